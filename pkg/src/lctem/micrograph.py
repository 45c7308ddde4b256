"""Micrograph containers, binary PGM I/O, preprocessing, and dose bookkeeping.

Detector frames are carried as unsigned 16-bit count arrays (`Micrograph`);
everything downstream of preprocessing works on float images in the unit
interval (`NormalizedImage`).  Binary PGM (P5) is the only frame format:
8-bit files are widened to 16-bit counts on load, and all files are written
with maxval 65535, most significant byte first.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError, MetadataError, PgmError

_WHITESPACE = b" \t\r\n\x0b\x0c"

#: Keys accepted in a ``.meta`` sidecar file.
SIDECAR_KEYS = (
    "pixel_size_nm",
    "exposure_s",
    "dose_rate_e_per_nm2_s",
    "magnification",
    "conversion_gain",
)

MANIFEST_HEADER = ("id", "noisy_path", "truth_path", "noisy_dose", "truth_dose")


@dataclass(frozen=True)
class Micrograph:
    """A single detector frame plus the acquisition metadata needed for dosimetry.

    Parameters
    ----------
    counts : np.ndarray
        Detected electron counts, shape ``(height, width)``, dtype uint16.
    pixel_size : float
        Physical edge length of one pixel in nanometres.
    exposure : float
        Exposure time of the frame in seconds.
    dose_rate : float, optional
        Electron flux in e-/nm^2/s.  ``None`` when the acquisition did not
        record it and it cannot be derived.
    magnification : float, optional
        Nominal instrument magnification, informational only.
    """

    counts: np.ndarray
    pixel_size: float = 1.0
    exposure: float = 1.0
    dose_rate: float | None = None
    magnification: float | None = None

    def __post_init__(self):
        arr = np.array(self.counts)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InputError(f"counts must be a 2-D array, got shape {arr.shape}")
        if arr.dtype != np.uint16:
            if not np.issubdtype(arr.dtype, np.integer):
                raise InputError(f"counts must be integer-valued, got dtype {arr.dtype}")
            if arr.min() < 0 or arr.max() > 65535:
                raise InputError("counts outside the uint16 range")
            arr = arr.astype(np.uint16)
        arr.flags.writeable = False
        object.__setattr__(self, "counts", arr)
        if not (self.pixel_size > 0):
            raise InputError(f"pixel_size must be positive, got {self.pixel_size}")
        if not (self.exposure > 0):
            raise InputError(f"exposure must be positive, got {self.exposure}")
        if self.dose_rate is not None and not (self.dose_rate >= 0):
            raise InputError(f"dose_rate must be non-negative, got {self.dose_rate}")
        if self.magnification is not None and not (self.magnification > 0):
            raise InputError(f"magnification must be positive, got {self.magnification}")

    @property
    def height(self) -> int:
        return self.counts.shape[0]

    @property
    def width(self) -> int:
        return self.counts.shape[1]


@dataclass(frozen=True)
class NormalizedImage:
    """A float image on the closed unit interval, shape ``(height, width)``."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InputError(f"values must be a 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InputError("values contain non-finite entries")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise InputError("values fall outside [0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PairedSample:
    """A noisy/ground-truth image pair with the dose received by each."""

    id: str
    noisy: NormalizedImage
    truth: NormalizedImage
    noisy_dose: float
    truth_dose: float

    def __post_init__(self):
        if self.noisy.values.shape != self.truth.values.shape:
            raise InputError(
                f"pair {self.id!r}: noisy shape {self.noisy.values.shape} does not "
                f"match truth shape {self.truth.values.shape}"
            )
        if not (self.noisy_dose > 0) or not (self.truth_dose > 0):
            raise InputError(f"pair {self.id!r}: doses must be positive")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    noisy_path: Path
    truth_path: Path
    noisy_dose: float
    truth_dose: float


def _next_token(buf: bytes, pos: int) -> tuple[bytes, int, int]:
    """Return the next header token, skipping whitespace and # comments."""
    n = len(buf)
    while pos < n:
        c = buf[pos]
        if c in _WHITESPACE:
            pos += 1
        elif c == 0x23:  # '#'
            while pos < n and buf[pos] not in b"\r\n":
                pos += 1
        else:
            break
    if pos >= n:
        raise PgmError("unexpected end of header", pos)
    start = pos
    while pos < n and buf[pos] not in _WHITESPACE:
        pos += 1
    return buf[start:pos], start, pos


def _int_token(buf: bytes, pos: int, what: str) -> tuple[int, int, int]:
    token, start, pos = _next_token(buf, pos)
    if not token.isdigit():
        raise PgmError(f"expected integer {what}, got {token[:20]!r}", start)
    return int(token), start, pos


def load_pgm(path: str | Path) -> Micrograph:
    """Load a binary PGM frame, reading the ``.meta`` sidecar when present.

    Accepts maxval 255 (samples widened to 16-bit counts) or 65535 (two bytes
    per sample, most significant first).  Malformed files raise `PgmError`
    carrying the byte offset of the defect.
    """
    path = Path(path)
    buf = path.read_bytes()
    if buf[:2] != b"P5":
        raise PgmError("not a binary PGM: magic 'P5' missing", 0)
    width, _, pos = _int_token(buf, 2, "width")
    height, _, pos = _int_token(buf, pos, "height")
    maxval, mv_start, pos = _int_token(buf, pos, "maxval")
    if width < 1 or height < 1:
        raise PgmError(f"bad raster dimensions {width}x{height}", 2)
    if maxval not in (255, 65535):
        raise PgmError(f"unsupported maxval {maxval}: expected 255 or 65535", mv_start)
    if pos >= len(buf) or buf[pos] not in _WHITESPACE:
        raise PgmError("missing single whitespace byte after maxval", pos)
    pos += 1
    sample_bytes = 2 if maxval == 65535 else 1
    need = width * height * sample_bytes
    payload = buf[pos : pos + need]
    if len(payload) < need:
        raise PgmError(
            f"truncated raster: expected {need} payload bytes, found {len(payload)}",
            pos + len(payload),
        )
    if sample_bytes == 2:
        counts = np.frombuffer(payload, dtype=">u2").reshape(height, width)
        counts = counts.astype(np.uint16)
    else:
        counts = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
        counts = counts.astype(np.uint16)
    meta = _sidecar_fields(sidecar_path(path), counts)
    return Micrograph(counts, **meta)


def save_pgm(image: Micrograph | NormalizedImage, path: str | Path) -> None:
    """Write a binary PGM with maxval 65535, big-endian samples.

    Normalized images are quantized with round-half-even onto 0..65535.
    """
    if isinstance(image, Micrograph):
        samples = image.counts
    elif isinstance(image, NormalizedImage):
        samples = quantize16(image.values)
    else:
        raise InputError(f"cannot save object of type {type(image).__name__}")
    header = f"P5\n{samples.shape[1]} {samples.shape[0]}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + samples.astype(">u2").tobytes())


def quantize16(values: np.ndarray) -> np.ndarray:
    """Map unit-interval floats onto uint16 codes with round-half-even."""
    return np.rint(np.asarray(values, dtype=np.float64) * 65535.0).astype(np.uint16)


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".meta")


def read_sidecar(path: str | Path) -> dict[str, float]:
    """Parse a ``key = value`` sidecar file.  Unknown or repeated keys are errors."""
    path = Path(path)
    values: dict[str, float] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, text = line.partition("=")
        if not sep:
            raise MetadataError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key = key.strip()
        if key not in SIDECAR_KEYS:
            raise MetadataError(f"{path}:{lineno}: unknown key {key!r}")
        if key in values:
            raise MetadataError(f"{path}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = float(text.strip())
        except ValueError:
            raise MetadataError(f"{path}:{lineno}: bad float for {key}: {text.strip()!r}") from None
    return values


def write_sidecar(m: Micrograph, path: str | Path) -> None:
    lines = [f"pixel_size_nm = {m.pixel_size!r}", f"exposure_s = {m.exposure!r}"]
    if m.dose_rate is not None:
        lines.append(f"dose_rate_e_per_nm2_s = {m.dose_rate!r}")
    if m.magnification is not None:
        lines.append(f"magnification = {m.magnification!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def _sidecar_fields(meta_path: Path, counts: np.ndarray) -> dict:
    """Map sidecar keys onto `Micrograph` fields, deriving dose_rate if needed.

    When the sidecar records a camera conversion gain but no flux, the flux is
    reconstructed from the mean count: electrons per pixel = gain * counts, so
    dose_rate = gain * mean(counts) / (pixel_size^2 * exposure).
    """
    if not meta_path.exists():
        return {}
    raw = read_sidecar(meta_path)
    fields = {
        "pixel_size": raw.get("pixel_size_nm", 1.0),
        "exposure": raw.get("exposure_s", 1.0),
        "dose_rate": raw.get("dose_rate_e_per_nm2_s"),
        "magnification": raw.get("magnification"),
    }
    if fields["dose_rate"] is None and "conversion_gain" in raw:
        if not (fields["pixel_size"] > 0) or not (fields["exposure"] > 0):
            raise MetadataError(f"{meta_path}: cannot derive dose_rate from gain")
        electrons_per_px = raw["conversion_gain"] * float(np.mean(counts))
        fields["dose_rate"] = electrons_per_px / (fields["pixel_size"] ** 2 * fields["exposure"])
    return fields


def to_normalized(m: Micrograph) -> NormalizedImage:
    """Scale counts onto [0, 1] by the 16-bit full scale (absolute, not min-max)."""
    return NormalizedImage(m.counts.astype(np.float64) / 65535.0)


def rescale_intensity(image: Micrograph | NormalizedImage | np.ndarray) -> NormalizedImage:
    """Affinely stretch an image so its minimum is 0.0 and its maximum is 1.0.

    A constant image maps to all zeros.
    """
    arr = _as_array(image)
    lo = float(arr.min())
    hi = float(arr.max())
    if hi == lo:
        return NormalizedImage(np.zeros_like(arr, dtype=np.float64))
    return NormalizedImage((arr - lo) / (hi - lo))


def flip(image, axis: str):
    """Mirror an image.  ``axis`` is "horizontal" (left-right) or "vertical"."""
    if axis == "horizontal":
        op = np.fliplr
    elif axis == "vertical":
        op = np.flipud
    else:
        raise InputError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")
    if isinstance(image, Micrograph):
        return replace(image, counts=op(image.counts))
    if isinstance(image, NormalizedImage):
        return NormalizedImage(op(image.values))
    return op(np.asarray(image)).copy()


def mosaic4(tiles: Sequence[NormalizedImage]) -> NormalizedImage:
    """Compose four equally sized tiles into one double-size image.

    Tile order is row-major: top-left, top-right, bottom-left, bottom-right.
    """
    if len(tiles) != 4:
        raise InputError(f"mosaic4 needs exactly 4 tiles, got {len(tiles)}")
    arrs = [_as_array(t) for t in tiles]
    shape = arrs[0].shape
    for k, a in enumerate(arrs[1:], start=1):
        if a.shape != shape:
            raise InputError(f"tile {k} has shape {a.shape}, expected {shape}")
    return NormalizedImage(np.block([[arrs[0], arrs[1]], [arrs[2], arrs[3]]]))


def _overlap_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix of exact pixel-area overlaps for one axis."""
    scale = n_in / n_out
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        start = i * scale
        end = (i + 1) * scale
        j0 = int(math.floor(start))
        j1 = min(int(math.ceil(end)), n_in)
        for j in range(j0, j1):
            w = min(end, j + 1.0) - max(start, float(j))
            if w > 0.0:
                mat[i, j] = w
        mat[i] /= mat[i].sum()
    return mat


def area_resize(image, new_width: int, new_height: int):
    """Resample by exact pixel-area overlap (the mean of covered source area).

    For an integer downscale factor this is the plain block mean.  Output
    values are convex combinations of input values, so the unit interval is
    preserved.  Resizing to the input size returns the image unchanged.
    """
    if new_width < 1 or new_height < 1:
        raise InputError(f"target size {new_width}x{new_height} is not positive")
    arr = _as_array(image)
    in_h, in_w = arr.shape
    if (in_w, in_h) == (new_width, new_height):
        return image if isinstance(image, NormalizedImage) else NormalizedImage(arr)
    rows = _overlap_matrix(in_h, new_height)
    cols = _overlap_matrix(in_w, new_width)
    out = rows @ arr @ cols.T
    np.clip(out, 0.0, 1.0, out=out)
    return NormalizedImage(out)


def total_dose(m: Micrograph) -> float:
    """Accumulated dose of one frame in e-/nm^2: dose_rate times exposure."""
    if m.dose_rate is None:
        raise MetadataError("dose_rate is unknown for this micrograph")
    return m.dose_rate * m.exposure


def decade_edges(lo: float, hi: float, per_decade: int = 1) -> np.ndarray:
    """Log-spaced histogram edges covering [lo, hi] on a decade-aligned grid."""
    if not (lo > 0) or not (hi > 0) or hi < lo:
        raise InputError(f"need 0 < lo <= hi, got lo={lo}, hi={hi}")
    if per_decade < 1:
        raise InputError("per_decade must be at least 1")
    k0 = math.floor(math.log10(lo) * per_decade)
    k1 = math.ceil(math.log10(hi) * per_decade)
    if k1 == k0:
        k1 += 1
    return np.power(10.0, np.arange(k0, k1 + 1) / per_decade)


def dose_histogram(doses: Iterable[float], edges: np.ndarray) -> np.ndarray:
    """Histogram of per-image doses on the given increasing edges.

    Every dose must be positive and fall inside ``[edges[0], edges[-1]]`` so
    the counts sum to the number of inputs.
    """
    d = np.asarray(list(doses), dtype=np.float64)
    edges = np.asarray(edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or not np.all(np.diff(edges) > 0):
        raise InputError("edges must be a 1-D strictly increasing array of length >= 2")
    if d.size and (not np.all(np.isfinite(d)) or d.min() <= 0):
        raise InputError("doses must be positive and finite")
    if d.size and (d.min() < edges[0] or d.max() > edges[-1]):
        raise InputError(
            f"dose range [{d.min()}, {d.max()}] falls outside the bin edges "
            f"[{edges[0]}, {edges[-1]}]"
        )
    counts, _ = np.histogram(d, bins=edges)
    return counts


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    """Read a dataset manifest CSV; relative image paths resolve against it."""
    path = Path(path)
    base = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise InputError(
                f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise InputError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            pair_id = row[0].strip()
            if not pair_id:
                raise InputError(f"{path}:{lineno}: empty id")
            if pair_id in seen:
                raise InputError(f"{path}:{lineno}: duplicate id {pair_id!r}")
            seen.add(pair_id)
            try:
                noisy_dose = float(row[3])
                truth_dose = float(row[4])
            except ValueError:
                raise InputError(f"{path}:{lineno}: doses must be numeric") from None
            if not (noisy_dose > 0) or not (truth_dose > 0):
                raise InputError(f"{path}:{lineno}: doses must be positive")
            entries.append(
                ManifestEntry(
                    id=pair_id,
                    noisy_path=_resolve(base, row[1].strip()),
                    truth_path=_resolve(base, row[2].strip()),
                    noisy_dose=noisy_dose,
                    truth_dose=truth_dose,
                )
            )
    return entries


def write_manifest(path: str | Path, entries: Sequence[ManifestEntry]) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for e in entries:
            writer.writerow(
                [e.id, _relativize(path.parent, e.noisy_path),
                 _relativize(path.parent, e.truth_path),
                 repr(e.noisy_dose), repr(e.truth_dose)]
            )


def load_pair(entry: ManifestEntry, size: int | None = None) -> PairedSample:
    """Load one manifest row and preprocess both frames the same way.

    Counts are scaled by full range, area-resized to ``size`` when given, then
    min-max rescaled onto [0, 1].
    """
    images = []
    for p in (entry.noisy_path, entry.truth_path):
        img = to_normalized(load_pgm(p))
        if size is not None:
            img = area_resize(img, size, size)
        images.append(rescale_intensity(img))
    return PairedSample(
        id=entry.id,
        noisy=images[0],
        truth=images[1],
        noisy_dose=entry.noisy_dose,
        truth_dose=entry.truth_dose,
    )


def _as_array(image) -> np.ndarray:
    if isinstance(image, Micrograph):
        return image.counts.astype(np.float64)
    if isinstance(image, NormalizedImage):
        return image.values
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise InputError(f"expected a 2-D image, got shape {arr.shape}")
    return arr


def _resolve(base: Path, raw: str) -> Path:
    p = Path(raw)
    return p if p.is_absolute() else base / p


def _relativize(base: Path, p: str | Path) -> str:
    p = Path(p)
    try:
        return p.relative_to(base).as_posix()
    except ValueError:
        return str(p)
