"""Liquid-cell geometry: tilt-series separation, membrane bulge fits, and
the empirical window-size thickness law.

Lengths are micrometres everywhere inside this module.  The curvature
coefficients ``a`` and ``g`` are reported in reciprocal millimetres, the
convention such measurements are usually quoted in; the single conversion is
1 mm^-1 = 1e-3 um^-1, applied when a fit result is packaged.

The membrane-separation fit uses the one-parameter model l(theta) =
h' * sin(theta): the out-of-focus particle shifts laterally by the membrane
separation times the sine of the tilt.  Bulge profiles are quadratic,
h' = -a r^2 + b, fitted by linear least squares in the (r^2, 1) basis.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError

MM_PER_UM_CURVATURE = 1e3  # um^-1 -> mm^-1 for reported coefficients


@dataclass(frozen=True)
class TiltSeries:
    """(tilt angle in degrees, particle displacement in um) samples."""

    samples: tuple

    def __post_init__(self):
        samples = tuple((float(t), float(l)) for t, l in self.samples)
        object.__setattr__(self, "samples", samples)
        if any(not (math.isfinite(t) and math.isfinite(l)) for t, l in samples):
            raise InputError("tilt samples must be finite")
        if any(abs(t) >= 90.0 for t, _ in samples):
            raise InputError("tilt angles must satisfy |theta| < 90 degrees")
        nonzero = {t for t, _ in samples if t != 0.0}
        if len(nonzero) < 2:
            raise InputError("need at least 2 distinct non-zero tilt angles")


@dataclass(frozen=True)
class SeparationFit:
    h_prime_um: float
    residual_rms_um: float
    stderr_um: float
    n_samples: int


@dataclass(frozen=True)
class MembraneFit:
    """Whole-window quadratic bulge: h' = -a r^2 + b."""

    a_per_mm: float
    b_um: float
    residual_rms_um: float


@dataclass(frozen=True)
class EdgeFit:
    """Single-membrane quadratic along one window edge."""

    g_per_mm: float
    h_edge_um: float
    side: str
    residual_rms_um: float

    def __post_init__(self):
        if self.side not in ("upper", "lower"):
            raise InputError(f"side must be 'upper' or 'lower', got {self.side!r}")


@dataclass(frozen=True)
class CellSpec:
    """Nominal window size W, measured window size W_A, spacer size S (um)."""

    w_um: float
    w_a_um: float
    s_um: float

    def __post_init__(self):
        if min(self.w_um, self.w_a_um, self.s_um) <= 0:
            raise InputError("cell dimensions must be positive")
        if not (0.5 <= self.w_a_um / self.w_um <= 2.0):
            raise InputError(
                f"actual window size {self.w_a_um} is implausible for a nominal "
                f"{self.w_um} um window"
            )


@dataclass(frozen=True)
class EmpiricalParams:
    """Window-scaling constants; defaults are the published values."""

    a_u: float = 0.20
    a_l: float = 0.11
    b_u: float = 0.038
    b_l: float = 0.018
    eta_um: float = 2.5

    def __post_init__(self):
        if min(self.a_u, self.a_l, self.b_u, self.b_l, self.eta_um) <= 0:
            raise InputError("empirical parameters must all be positive")


@dataclass(frozen=True)
class ScalingFit:
    """scaling_relations output; per-side intercepts kept for diagnostics."""

    a_u: float
    a_l: float
    b_u: float
    b_l: float
    eta_um: float
    eta_u_um: float
    eta_l_um: float


@dataclass(frozen=True)
class CenterComparison:
    empirical_um: float
    fitted_um: float
    gap_um: float


def fit_separation(series: TiltSeries) -> SeparationFit:
    """Least-squares h' for l(theta) = h' sin(theta)."""
    theta = np.radians([t for t, _ in series.samples])
    disp = np.array([l for _, l in series.samples])
    s = np.sin(theta)
    denom = float(s @ s)
    if denom == 0.0:
        raise InputError("all tilt angles are zero; separation is unconstrained")
    h_prime = float(s @ disp) / denom
    residuals = disp - h_prime * s
    rms = float(np.sqrt(np.mean(residuals**2)))
    n = len(disp)
    # single-parameter linear model: var(h') = sigma^2 / sum(sin^2)
    sigma2 = float(residuals @ residuals) / max(n - 1, 1)
    stderr = math.sqrt(sigma2 / denom)
    return SeparationFit(h_prime, rms, stderr, n)


def liquid_thickness(h_prime_um: float, particle_diameter_um: float) -> float:
    """Membrane separation seen by particles attached on both inner walls."""
    if h_prime_um < 0 or particle_diameter_um < 0:
        raise InputError("separation and particle diameter must be non-negative")
    return h_prime_um + particle_diameter_um


def _quadratic_fit(r2_um2: np.ndarray, h_um: np.ndarray, what: str):
    """LS fit of h = slope * r^2 + intercept; slope converted to mm^-1."""
    if len(r2_um2) < 3:
        raise InputError(f"{what}: need at least 3 points")
    design = np.column_stack([r2_um2, np.ones_like(r2_um2)])
    coef, _, rank, _ = np.linalg.lstsq(design, h_um, rcond=None)
    if rank < 2:
        raise InputError(f"{what}: all points at the same radius; fit is degenerate")
    residuals = h_um - design @ coef
    rms = float(np.sqrt(np.mean(residuals**2)))
    curvature_per_mm = -float(coef[0]) * MM_PER_UM_CURVATURE
    return curvature_per_mm, float(coef[1]), rms


def fit_profile(points: Sequence[tuple]) -> MembraneFit:
    """Quadratic bulge fit over (x_um, y_um, thickness_um) points."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InputError("profile points must be (x_um, y_um, thickness_um) triples")
    r2 = pts[:, 0] ** 2 + pts[:, 1] ** 2
    a, b, rms = _quadratic_fit(r2, pts[:, 2], "profile fit")
    return MembraneFit(a_per_mm=a, b_um=b, residual_rms_um=rms)


def fit_edge(points: Sequence[tuple], side: str) -> EdgeFit:
    """Quadratic fit along one edge over (coord_um, thickness_um) pairs."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise InputError("edge points must be (coord_um, thickness_um) pairs")
    g, h_edge, rms = _quadratic_fit(pts[:, 0] ** 2, pts[:, 1], "edge fit")
    return EdgeFit(g_per_mm=g, h_edge_um=h_edge, side=side, residual_rms_um=rms)


def _through_origin_slope(x: np.ndarray, y: np.ndarray, what: str) -> float:
    if len(set(x.tolist())) < 2:
        raise InputError(f"{what}: need at least 2 distinct window sizes")
    slope = float(x @ y) / float(x @ x)
    if slope <= 0:
        raise InputError(f"{what}: non-positive slope; data are not a scaling law")
    return slope


def scaling_relations(fits: Sequence[tuple]) -> ScalingFit:
    """Window-size scaling constants from (EdgeFit, CellSpec) pairs.

    Per side, 1/g grows linearly through the origin with the actual window
    size; the dimensionless constant is the reciprocal of that slope with
    1/g expressed in um.  The edge maxima obey h_edge = b * W_A + S + eta
    with the offset eta shared between the two membranes.
    """
    sides = {"upper": [], "lower": []}
    for fit, spec in fits:
        sides[fit.side].append((fit, spec))
    for side, rows in sides.items():
        if len(rows) < 2:
            raise InputError(f"need at least 2 {side}-membrane fits, got {len(rows)}")

    a = {}
    for side, rows in sides.items():
        w_a = np.array([spec.w_a_um for _, spec in rows])
        inv_g_um = np.array(
            [MM_PER_UM_CURVATURE / fit.g_per_mm for fit, _ in rows]
        )
        a[side] = 1.0 / _through_origin_slope(w_a, inv_g_um, f"{side} curvature scaling")

    rows3, rhs = [], []
    for fit, spec in sides["upper"]:
        rows3.append([spec.w_a_um, 0.0, 1.0])
        rhs.append(fit.h_edge_um - spec.s_um)
    for fit, spec in sides["lower"]:
        rows3.append([0.0, spec.w_a_um, 1.0])
        rhs.append(fit.h_edge_um - spec.s_um)
    coef, _, rank, _ = np.linalg.lstsq(np.array(rows3), np.array(rhs), rcond=None)
    if rank < 3:
        raise InputError("edge-maximum design is rank-deficient")

    eta_side = {}
    for side, rows in sides.items():
        w_a = np.array([spec.w_a_um for _, spec in rows])
        h_s = np.array([fit.h_edge_um - spec.s_um for fit, spec in rows])
        design = np.column_stack([w_a, np.ones_like(w_a)])
        side_coef, _, side_rank, _ = np.linalg.lstsq(design, h_s, rcond=None)
        eta_side[side] = float(side_coef[1]) if side_rank == 2 else float("nan")

    return ScalingFit(
        a_u=a["upper"],
        a_l=a["lower"],
        b_u=float(coef[0]),
        b_l=float(coef[1]),
        eta_um=float(coef[2]),
        eta_u_um=eta_side["upper"],
        eta_l_um=eta_side["lower"],
    )


def empirical_thickness(r_um, spec: CellSpec, params=EmpiricalParams()):
    """Thickness law h(r) = -(sqrt(a_u a_l)/W_A) r^2 + (b_u+b_l) W_A + eta + S."""
    r = np.asarray(r_um, dtype=np.float64)
    if np.any(r < 0):
        raise InputError("radius must be non-negative")
    curvature = math.sqrt(params.a_u * params.a_l) / spec.w_a_um
    center = (params.b_u + params.b_l) * spec.w_a_um + params.eta_um + spec.s_um
    h = -curvature * r**2 + center
    return float(h) if np.isscalar(r_um) else h


def compare_center_thickness(
    fit: MembraneFit, spec: CellSpec, params=EmpiricalParams()
) -> CenterComparison:
    """Empirical-law center thickness next to the directly fitted one."""
    empirical = empirical_thickness(0.0, spec, params)
    return CenterComparison(
        empirical_um=empirical,
        fitted_um=fit.b_um,
        gap_um=fit.b_um - empirical,
    )


# ---------------------------------------------------------------------------
# CSV interfaces


def _read_rows(path, header, what):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows or rows[0] != list(header):
        raise InputError(
            f"{path}: expected {what} header {','.join(header)!r}"
        )
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise InputError(f"{path}:{lineno}: expected {len(header)} fields")
        try:
            out.append(tuple(float(v) for v in row))
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: {exc}") from None
    return out


def read_tilt_series(path: str | Path) -> TiltSeries:
    rows = _read_rows(path, ("theta_deg", "displacement_um"), "tilt series")
    return TiltSeries(samples=tuple(rows))


def read_profile(path: str | Path) -> list[tuple]:
    return _read_rows(path, ("x_um", "y_um", "thickness_um"), "thickness profile")


def write_cell_table(path: str | Path, rows: Sequence[tuple]) -> None:
    """Whole-window fit table: one (CellSpec, MembraneFit) row per cell."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["W_um", "W_A_um", "S_nm", "a_per_mm", "b_um"])
        for spec, fit in rows:
            writer.writerow(
                [repr(spec.w_um), repr(spec.w_a_um), repr(spec.s_um * 1e3),
                 repr(fit.a_per_mm), repr(fit.b_um)]
            )


def write_edge_table(path: str | Path, rows: Sequence[tuple]) -> None:
    """Edge fit table: one (CellSpec, upper EdgeFit, lower EdgeFit) row per cell."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["W_um", "W_A_um", "S_nm", "g_U_per_mm", "g_L_per_mm", "h_U_um", "h_L_um"]
        )
        for spec, upper, lower in rows:
            if upper.side != "upper" or lower.side != "lower":
                raise InputError("edge table rows must be (spec, upper, lower)")
            writer.writerow(
                [repr(spec.w_um), repr(spec.w_a_um), repr(spec.s_um * 1e3),
                 repr(upper.g_per_mm), repr(lower.g_per_mm),
                 repr(upper.h_edge_um), repr(lower.h_edge_um)]
            )
