"""Dataset handling, synthetic paired-data generation, and the training loop.

The synthetic generator stands in for a paired acquisition: a clean scene of
bright discs and convex polygons on a dark background plays the
high-exposure target, and the matching low-dose frame is produced by
blurring, brightness scaling, and per-pixel Poisson shot noise at an
exposure dose drawn log-uniformly across roughly two orders of magnitude.

Training follows the usual loop: seeded shuffle, per-sample flip and
four-tile mosaic augmentation (the same transform applied to both images of
a pair), forward pass, one of the ssim/l1/l2 objectives, backward pass, and
a bias-corrected Adam step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InputError, TrainingAbort
from .metrics import SsimConfig, psnr, ssim
from .micrograph import (
    NormalizedImage,
    PairedSample,
    area_resize,
    flip,
    load_pair,
    mosaic4,
    read_manifest,
    rescale_intensity,
)
from .nn import OBJECTIVES, adam_step
from .unet import UNet


@dataclass(frozen=True)
class DegradeSpec:
    """How a clean scene turns into its low-dose counterpart.

    The expected electron count per pixel is
    ``dose * pixel_size^2 * (background + gain * blur(truth))`` with the dose
    drawn log-uniformly from [dose_min, dose_max] (e-/nm^2).  With
    ``shot_noise`` the counts are Poisson samples and the noisy image is the
    min-max rescale of the counts; without it the expected signal itself is
    clipped to [0, 1] and returned unchanged, so a zero-blur, unit-gain,
    zero-background spec reproduces the truth exactly.
    """

    blur_sigma: float = 1.0
    gain: float = 0.9
    background: float = 0.2
    dose_min: float = 1.0
    dose_max: float = 100.0
    truth_dose_min: float = 300.0
    truth_dose_max: float = 1000.0
    pixel_size: float = 1.0
    shot_noise: bool = True

    def __post_init__(self):
        if self.blur_sigma < 0 or self.gain < 0 or self.background < 0:
            raise InputError("blur_sigma, gain, and background must be non-negative")
        if not (0 < self.dose_min <= self.dose_max):
            raise InputError("need 0 < dose_min <= dose_max")
        if not (0 < self.truth_dose_min <= self.truth_dose_max):
            raise InputError("need 0 < truth_dose_min <= truth_dose_max")
        if not (self.pixel_size > 0):
            raise InputError("pixel_size must be positive")


@dataclass(frozen=True)
class TrainConfig:
    """Loss choice, optimizer settings, split, and augmentation knobs.

    The default learning rate sits at the top of the sub-1e-4 regime the
    refinement model is known to train well in; any non-negative value is
    accepted (zero freezes the parameters).  ``epochs`` may be zero, which
    turns training into a no-op that still produces an (empty) history.
    """

    loss: str = "ssim"
    learning_rate: float = 1e-4
    epochs: int = 2000
    batch_size: int = 4
    split_fraction: float = 0.9
    seed: int = 0
    flip_prob: float = 0.5
    mosaic_prob: float = 0.25
    window_size: int = 11

    def __post_init__(self):
        if self.loss not in OBJECTIVES:
            raise InputError(f"loss must be one of {sorted(OBJECTIVES)}, got {self.loss!r}")
        if self.learning_rate < 0 or not np.isfinite(self.learning_rate):
            raise InputError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.epochs < 0:
            raise InputError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise InputError(f"batch_size must be at least 1, got {self.batch_size}")
        if not (0.0 < self.split_fraction < 1.0):
            raise InputError(f"split_fraction must lie in (0, 1), got {self.split_fraction}")
        if not (0.0 <= self.flip_prob <= 1.0) or not (0.0 <= self.mosaic_prob <= 1.0):
            raise InputError("augmentation probabilities must lie in [0, 1]")
        SsimConfig(window_size=self.window_size)  # reuse its validation


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_psnr: float
    val_ssim: float


@dataclass
class EvalReport:
    """Refined-vs-truth and baseline noisy-vs-truth quality, per pair."""

    loss_name: str
    encoder: str
    pair_ids: list
    refined_psnr: list
    refined_ssim: list
    baseline_psnr: list
    baseline_ssim: list

    @property
    def mean_refined_psnr(self) -> float:
        return float(np.mean(self.refined_psnr))

    @property
    def mean_refined_ssim(self) -> float:
        return float(np.mean(self.refined_ssim))

    @property
    def mean_baseline_psnr(self) -> float:
        return float(np.mean(self.baseline_psnr))

    @property
    def mean_baseline_ssim(self) -> float:
        return float(np.mean(self.baseline_ssim))


# ---------------------------------------------------------------------------
# synthetic data


def _scene(rng: np.random.Generator, size: int) -> np.ndarray:
    """Bright discs and regular convex polygons on a dark background."""
    img = np.full((size, size), 0.05)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(int(rng.integers(4, 9))):
        cy, cx = rng.uniform(0.15 * size, 0.85 * size, size=2)
        radius = rng.uniform(size / 10.0, size / 4.5)
        level = rng.uniform(0.45, 0.95)
        sides = int(rng.integers(3, 8))  # 7 means "disc"
        if sides == 7:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius
        else:
            theta = rng.uniform(0, 2 * np.pi)
            angles = theta + 2 * np.pi * np.arange(sides + 1) / sides
            vy = cy + radius * np.sin(angles)
            vx = cx + radius * np.cos(angles)
            mask = np.ones((size, size), dtype=bool)
            for k in range(sides):
                # half-plane test against each edge of the convex polygon
                cross = (vx[k + 1] - vx[k]) * (yy - vy[k]) - (vy[k + 1] - vy[k]) * (
                    xx - vx[k]
                )
                mask &= cross >= 0.0
        img = np.where(mask, np.maximum(img, level), img)
    img = gaussian_filter(img, 0.6)
    return np.clip(img, 0.0, 1.0)


def synth_pair(seed: int, size: int = 64, spec: DegradeSpec = DegradeSpec()) -> PairedSample:
    """One reproducible noisy/truth pair drawn entirely from ``seed``."""
    if size < 32:
        raise InputError(f"size must be at least 32, got {size}")
    rng = np.random.default_rng(seed)
    truth = _scene(rng, size)
    noisy_dose = float(
        10 ** rng.uniform(np.log10(spec.dose_min), np.log10(spec.dose_max))
    )
    truth_dose = float(
        10 ** rng.uniform(np.log10(spec.truth_dose_min), np.log10(spec.truth_dose_max))
    )
    blurred = gaussian_filter(truth, spec.blur_sigma) if spec.blur_sigma > 0 else truth
    signal = spec.background + spec.gain * blurred
    if spec.shot_noise:
        lam = noisy_dose * spec.pixel_size**2 * signal
        counts = rng.poisson(lam)
        noisy = rescale_intensity(counts.astype(np.float64))
    else:
        noisy = NormalizedImage(np.clip(signal, 0.0, 1.0))
    return PairedSample(
        id=f"synth-{seed:d}",
        noisy=noisy,
        truth=NormalizedImage(truth),
        noisy_dose=noisy_dose,
        truth_dose=truth_dose,
    )


def make_synthetic_dataset(
    n_pairs: int, size: int = 64, seed: int = 0, spec: DegradeSpec = DegradeSpec()
) -> list[PairedSample]:
    """A reproducible list of pairs; each pair gets an independent child seed."""
    if n_pairs < 1:
        raise InputError(f"n_pairs must be positive, got {n_pairs}")
    child_seeds = np.random.SeedSequence(seed).generate_state(n_pairs, dtype=np.uint64)
    return [synth_pair(int(s), size=size, spec=spec) for s in child_seeds]


def load_dataset(manifest_path: str | Path, size: int | None = None) -> list[PairedSample]:
    """Load and preprocess every pair referenced by a manifest CSV."""
    entries = read_manifest(manifest_path)
    if not entries:
        raise InputError(f"{manifest_path}: manifest lists no pairs")
    return [load_pair(e, size=size) for e in entries]


# ---------------------------------------------------------------------------
# training


def split_dataset(pairs: Sequence[PairedSample], fraction: float, seed: int):
    """Seeded shuffle, then split into (train, validation); both non-empty."""
    if len(pairs) < 2:
        raise InputError(f"need at least 2 pairs to split, got {len(pairs)}")
    if not (0.0 < fraction < 1.0):
        raise InputError(f"fraction must lie in (0, 1), got {fraction}")
    order = np.random.default_rng(seed).permutation(len(pairs))
    # the epsilon keeps exact products like 0.9 * 1204 from rounding down
    n_train = int(np.floor(fraction * len(pairs) + 1e-9))
    n_train = min(max(n_train, 1), len(pairs) - 1)
    train = [pairs[i] for i in order[:n_train]]
    val = [pairs[i] for i in order[n_train:]]
    return train, val


def _augment_sample(pairs, index, cfg, rng):
    pair = pairs[index]
    s, t = pair.noisy, pair.truth
    if cfg.mosaic_prob > 0 and rng.random() < cfg.mosaic_prob:
        h, w = t.values.shape
        partners = [index] + [int(k) for k in rng.integers(0, len(pairs), size=3)]
        s = mosaic4([area_resize(pairs[k].noisy, w // 2, h // 2) for k in partners])
        t = mosaic4([area_resize(pairs[k].truth, w // 2, h // 2) for k in partners])
    if cfg.flip_prob > 0:
        if rng.random() < cfg.flip_prob:
            s, t = flip(s, "horizontal"), flip(t, "horizontal")
        if rng.random() < cfg.flip_prob:
            s, t = flip(s, "vertical"), flip(t, "vertical")
    return s.values, t.values


def train_epoch(model: UNet, pairs: Sequence[PairedSample], cfg: TrainConfig, rng=None) -> float:
    """One shuffled pass with augmentation and Adam updates; mean sample loss."""
    if not pairs:
        raise InputError("training set is empty")
    if cfg.mosaic_prob > 0:
        h, w = pairs[0].truth.values.shape
        if h % 2 or w % 2:
            raise InputError("mosaic augmentation needs even image dimensions")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    objective = OBJECTIVES[cfg.loss]
    loss_cfg = SsimConfig(window_size=cfg.window_size)
    order = rng.permutation(len(pairs))
    total = 0.0
    for start in range(0, len(order), cfg.batch_size):
        batch = order[start : start + cfg.batch_size]
        xs, ts = [], []
        for i in batch:
            s_arr, t_arr = _augment_sample(pairs, int(i), cfg, rng)
            xs.append(s_arr)
            ts.append(t_arr)
        x = np.stack(xs)[:, None].astype(model.dtype)
        t = np.stack(ts)[:, None].astype(model.dtype)
        y, cache = model.forward(x, train=True)
        loss, dy = objective(y, t, loss_cfg)
        if not np.isfinite(loss):
            raise TrainingAbort(
                f"non-finite {cfg.loss} loss ({loss}) in batch starting at sample "
                f"{start} (first pair {pairs[int(batch[0])].id!r})"
            )
        model.store.zero_grads()
        model.backward(dy, cache)
        adam_step(model.store, cfg.learning_rate)
        total += loss * len(batch)
    return total / len(order)


def _validation_stats(model, val_pairs, cfg):
    objective = OBJECTIVES[cfg.loss]
    loss_cfg = SsimConfig(window_size=cfg.window_size)
    losses, psnrs, ssims = [], [], []
    for pair in val_pairs:
        x = pair.noisy.values[None, None].astype(model.dtype)
        t = pair.truth.values[None, None].astype(model.dtype)
        y = model.predict(x)
        loss, _ = objective(y, t, loss_cfg)
        losses.append(loss)
        p = y[0, 0].astype(np.float64)
        psnrs.append(psnr(p, pair.truth.values))
        ssims.append(ssim(p, pair.truth.values, loss_cfg).mean)
    return float(np.mean(losses)), float(np.mean(psnrs)), float(np.mean(ssims))


def validation_curve(
    model: UNet,
    train_pairs: Sequence[PairedSample],
    val_pairs: Sequence[PairedSample],
    cfg: TrainConfig,
    every_n_epochs: int = 1,
    progress: Callable[[EpochStats], None] | None = None,
) -> list[EpochStats]:
    """Train for ``cfg.epochs`` epochs, sampling validation quality as it goes.

    Returns one row per sampled epoch (always including the last); an
    0-epoch config yields an empty series and touches nothing.
    """
    if every_n_epochs < 1:
        raise InputError(f"every_n_epochs must be positive, got {every_n_epochs}")
    if not val_pairs:
        raise InputError("validation set is empty")
    rng = np.random.default_rng(cfg.seed)
    history: list[EpochStats] = []
    for epoch in range(1, cfg.epochs + 1):
        train_loss = train_epoch(model, train_pairs, cfg, rng)
        if epoch % every_n_epochs == 0 or epoch == cfg.epochs:
            val_loss, val_psnr, val_ssim = _validation_stats(model, val_pairs, cfg)
            row = EpochStats(epoch, train_loss, val_loss, val_psnr, val_ssim)
            history.append(row)
            if progress is not None:
                progress(row)
    return history


def encoder_label(model: UNet) -> str:
    """Conventional depth name for the encoder, e.g. resnet18 for (2,2,2,2)."""
    return f"resnet{2 * sum(model.config.encoder_blocks) + 2}"


def evaluate(model, pairs: Sequence[PairedSample], window_size: int = 11,
             loss_name: str = "ssim") -> EvalReport:
    """Refined-vs-truth quality for every pair, with the noisy baseline.

    ``model`` only needs a ``predict`` method mapping (B, 1, H, W) onto the
    same shape, so oracle stand-ins can be evaluated with the same code.
    """
    if not pairs:
        raise InputError("cannot evaluate an empty pair list")
    cfg = SsimConfig(window_size=window_size)
    report = EvalReport(
        loss_name=loss_name,
        encoder=encoder_label(model) if isinstance(model, UNet) else "identity",
        pair_ids=[p.id for p in pairs],
        refined_psnr=[], refined_ssim=[], baseline_psnr=[], baseline_ssim=[],
    )
    for pair in pairs:
        x = pair.noisy.values[None, None]
        p = np.asarray(model.predict(x))[0, 0].astype(np.float64)
        truth = pair.truth.values
        report.refined_psnr.append(psnr(p, truth))
        report.refined_ssim.append(ssim(p, truth, cfg).mean)
        report.baseline_psnr.append(psnr(pair.noisy.values, truth))
        report.baseline_ssim.append(ssim(pair.noisy.values, truth, cfg).mean)
    return report


# ---------------------------------------------------------------------------
# CSV emission


def write_train_log(path: str | Path, history: Sequence[EpochStats]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_psnr", "val_ssim"])
        for row in history:
            writer.writerow(
                [row.epoch, repr(row.train_loss), repr(row.val_loss),
                 repr(row.val_psnr), repr(row.val_ssim)]
            )


def write_eval_report(path: str | Path, report: EvalReport) -> None:
    """Table of mean refined quality plus the noisy-input baseline row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["loss", "encoder", "psnr", "ssim"])
        writer.writerow(
            [report.loss_name, report.encoder,
             repr(report.mean_refined_psnr), repr(report.mean_refined_ssim)]
        )
        writer.writerow(
            ["original", "-",
             repr(report.mean_baseline_psnr), repr(report.mean_baseline_ssim)]
        )
