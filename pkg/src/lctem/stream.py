"""Simulated in-situ acquisition: source, ring-buffer integration, latency.

A producer thread plays back camera frames through a bounded queue while the
consumer preprocesses, runs the refinement model, and logs telemetry.  When
the consumer cannot keep up, the oldest queued frames are discarded and the
discard count travels with the telemetry (a live view wants the newest frame,
not a backlog).  A ring buffer of the last ten preprocessed frames supports
integrated refinement, which sums member frames before rescaling so the
represented dose is exactly the sum of member doses.
"""

from __future__ import annotations

import csv
import platform
import statistics
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import InputError
from .metrics import psnr
from .micrograph import (
    Micrograph,
    NormalizedImage,
    area_resize,
    rescale_intensity,
    save_pgm,
    to_normalized,
)


@dataclass(frozen=True)
class SceneSpec:
    """Static disc field for the simulated camera."""

    size: int = 256
    n_particles: int = 8
    seed: int = 0
    background: float = 0.2
    gain: float = 0.9
    pixel_size: float = 1.0
    exposure: float = 0.01

    def __post_init__(self):
        if self.size < 16:
            raise InputError(f"size must be at least 16, got {self.size}")
        if self.n_particles < 0:
            raise InputError("n_particles must be non-negative")
        if self.exposure <= 0 or self.pixel_size <= 0:
            raise InputError("exposure and pixel_size must be positive")


@dataclass(frozen=True)
class FrameEvent:
    """One camera frame: raw counts plus its place on the dose timeline."""

    index: int
    timestamp: float
    frame: Micrograph
    dose_rate: float

    def __post_init__(self):
        if self.index < 0:
            raise InputError(f"frame index must be non-negative, got {self.index}")
        if self.timestamp < 0 or not np.isfinite(self.timestamp):
            raise InputError(f"bad timestamp {self.timestamp}")
        if self.dose_rate < 0 or not np.isfinite(self.dose_rate):
            raise InputError(f"bad dose rate {self.dose_rate}")


@dataclass(frozen=True)
class FrameTimings:
    preprocess_ms: float
    inference_ms: float
    total_ms: float


@dataclass(frozen=True)
class StageStats:
    min: float
    median: float
    mean: float


@dataclass(frozen=True)
class LatencyReport:
    size: int
    processor: str
    preprocess: StageStats
    inference: StageStats
    encode: StageStats
    total: StageStats


@dataclass(frozen=True)
class TelemetryRow:
    frame: int
    timestamp_s: float
    dose_e_nm2: float
    preprocess_ms: float
    inference_ms: float
    total_ms: float
    psnr_db: float
    dropped_before: int


def _scene_discs(spec: SceneSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    img = np.zeros((spec.size, spec.size))
    yy, xx = np.mgrid[0 : spec.size, 0 : spec.size].astype(np.float64)
    for _ in range(spec.n_particles):
        cy, cx = rng.uniform(0.1 * spec.size, 0.9 * spec.size, size=2)
        radius = rng.uniform(spec.size / 20.0, spec.size / 7.0)
        level = rng.uniform(0.5, 1.0)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius
        img = np.where(mask, np.maximum(img, level), img)
    return img


def _rate_at(schedule, index: int, t: float) -> float:
    if callable(schedule):
        rate = schedule(t)
    elif np.isscalar(schedule):
        rate = schedule
    else:
        seq = schedule
        if index >= len(seq):
            raise InputError(
                f"dose schedule has {len(seq)} entries but frame {index} was requested"
            )
        rate = seq[index]
    rate = float(rate)
    if rate < 0 or not np.isfinite(rate):
        raise InputError(f"dose rate must be finite and non-negative, got {rate}")
    return rate


def simulate_source(
    spec: SceneSpec, fps: float, duration: float, dose_schedule
) -> list[FrameEvent]:
    """Scripted static scene sampled at ``fps`` with per-frame shot noise.

    ``dose_schedule`` is a constant rate, a per-frame sequence, or a callable
    of the timestamp, in electrons/(nm^2 s).  Frame ``i`` is seeded from
    ``(spec.seed, i)`` so any frame can be regenerated independently.
    """
    if fps <= 0:
        raise InputError(f"fps must be positive, got {fps}")
    if duration <= 0:
        raise InputError(f"duration must be positive, got {duration}")
    scene = _scene_discs(spec)
    signal = spec.background + spec.gain * scene
    n_frames = int(round(fps * duration))
    events = []
    for i in range(n_frames):
        t = i / fps
        rate = _rate_at(dose_schedule, i, t)
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, i)))
        lam = rate * spec.exposure * spec.pixel_size**2 * signal
        counts = np.minimum(rng.poisson(lam), 65535).astype(np.uint16)
        frame = Micrograph(
            counts,
            pixel_size=spec.pixel_size,
            exposure=spec.exposure,
            dose_rate=rate,
        )
        events.append(FrameEvent(index=i, timestamp=t, frame=frame, dose_rate=rate))
    return events


class RingBuffer:
    """Holds the last ``capacity`` preprocessed frames, oldest evicted first.

    Stored values are area-resized but NOT yet rescaled, so summing members
    keeps intensities on a common scale before the final min-max rescale.
    """

    def __init__(self, capacity: int = 10):
        if capacity < 1:
            raise InputError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._frames: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._frames)

    def push(self, values: np.ndarray, dose: float) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise InputError(f"expected a 2-D frame, got shape {values.shape}")
        if self._frames and values.shape != self._frames[0][0].shape:
            raise InputError(
                f"frame shape {values.shape} does not match buffered shape "
                f"{self._frames[0][0].shape}"
            )
        self._frames.append((values, float(dose)))

    @property
    def total_dose(self) -> float:
        return sum(d for _, d in self._frames)

    def integrate(self) -> NormalizedImage:
        """Sum of all held frames, min-max rescaled onto [0, 1]."""
        if not self._frames:
            raise InputError("cannot integrate an empty ring buffer")
        total = np.zeros_like(self._frames[0][0])
        for values, _ in self._frames:
            total += values
        return rescale_intensity(total)


def _model_target(model, target_size):
    config = getattr(model, "config", None)
    if target_size is None:
        if config is None:
            raise InputError("target_size is required for models without a config")
        return config.input_size
    if config is not None and target_size % config.downsample_factor:
        raise InputError(
            f"target size {target_size} is not a multiple of the model's "
            f"downsample factor {config.downsample_factor}"
        )
    return target_size


def _preprocess(event: FrameEvent, target: int):
    """Resize to the model raster; returns pre-rescale values and frame dose."""
    t0 = time.perf_counter()
    values = to_normalized(event.frame).values
    if values.shape != (target, target):
        values = area_resize(values, target, target).values
    dose = event.dose_rate * event.frame.exposure
    ms = (time.perf_counter() - t0) * 1e3
    return values, dose, ms


def _infer(model, image: NormalizedImage):
    t0 = time.perf_counter()
    x = image.values[None, None]
    y = np.asarray(model.predict(x))[0, 0]
    ms = (time.perf_counter() - t0) * 1e3
    return NormalizedImage(np.clip(y.astype(np.float64), 0.0, 1.0)), ms


def refine_frame(model, event: FrameEvent, target_size: int | None = None):
    """Preprocess one frame and run the model; returns (image, FrameTimings)."""
    target = _model_target(model, target_size)
    t0 = time.perf_counter()
    values, _, pre_ms = _preprocess(event, target)
    refined, inf_ms = _infer(model, rescale_intensity(values))
    total_ms = (time.perf_counter() - t0) * 1e3
    return refined, FrameTimings(pre_ms, inf_ms, total_ms)


def integrate_refine(model, ring: RingBuffer) -> NormalizedImage:
    """Refine the dose-summed content of the ring buffer."""
    refined, _ = _infer(model, ring.integrate())
    return refined


def run_stream(
    model,
    source: Sequence[FrameEvent],
    mode: str = "per-frame",
    out_dir: str | Path | None = None,
    reference_index: int | None = None,
    queue_capacity: int = 2,
    ring_capacity: int = 10,
    target_size: int | None = None,
    consumer_delay_s: float = 0.0,
    producer_interval_s: float = 0.0,
) -> list[TelemetryRow]:
    """Play ``source`` through the producer/consumer pipeline.

    The producer thread emits frames at ``producer_interval_s`` spacing into
    a queue of ``queue_capacity``; overflow discards the oldest queued frame
    (each discard is counted, never raised).  The consumer refines every
    frame it receives, per-frame or integrated over the ring buffer, and the
    PSNR column is filled in afterwards against the refined frame at
    ``reference_index`` (default: the last frame that was processed).
    """
    if mode not in ("per-frame", "integrated"):
        raise InputError(f"mode must be 'per-frame' or 'integrated', got {mode!r}")
    target = _model_target(model, target_size)

    queue: deque = deque()
    lock = threading.Lock()
    done = threading.Event()
    dropped = 0

    def produce():
        nonlocal dropped
        for event in source:
            with lock:
                if len(queue) >= queue_capacity:
                    queue.popleft()
                    dropped += 1
                queue.append(event)
            if producer_interval_s > 0:
                time.sleep(producer_interval_s)
        done.set()

    producer = threading.Thread(target=produce, name="frame-source")
    producer.start()

    ring = RingBuffer(ring_capacity)
    processed: list[tuple] = []
    while True:
        with lock:
            event = queue.popleft() if queue else None
            drops_so_far = dropped
        if event is None:
            if done.is_set():
                with lock:
                    if not queue:
                        break
                continue
            time.sleep(1e-4)
            continue
        t0 = time.perf_counter()
        values, dose, pre_ms = _preprocess(event, target)
        if mode == "integrated":
            ring.push(values, dose)
            refined, inf_ms = _infer(model, ring.integrate())
            dose = ring.total_dose
        else:
            refined, inf_ms = _infer(model, rescale_intensity(values))
        total_ms = (time.perf_counter() - t0) * 1e3
        processed.append((event, refined, dose, pre_ms, inf_ms, total_ms, drops_so_far))
        if consumer_delay_s > 0:
            time.sleep(consumer_delay_s)
    producer.join()

    if not processed:
        return []
    indices = [p[0].index for p in processed]
    if reference_index is None:
        reference_index = indices[-1]
    if reference_index not in indices:
        raise InputError(
            f"reference frame {reference_index} was not among the processed frames"
        )
    reference = processed[indices.index(reference_index)][1]

    rows = []
    for event, refined, dose, pre_ms, inf_ms, total_ms, drops in processed:
        rows.append(
            TelemetryRow(
                frame=event.index,
                timestamp_s=event.timestamp,
                dose_e_nm2=dose,
                preprocess_ms=pre_ms,
                inference_ms=inf_ms,
                total_ms=total_ms,
                psnr_db=psnr(refined.values, reference.values),
                dropped_before=drops,
            )
        )
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            save_pgm(refined, out / f"frame_{event.index:06d}.pgm")
    return rows


def write_telemetry(path: str | Path, rows: Sequence[TelemetryRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["frame", "timestamp_s", "dose_e_nm2", "preprocess_ms",
             "inference_ms", "total_ms", "psnr_db", "dropped_before"]
        )
        for r in rows:
            writer.writerow(
                [r.frame, repr(r.timestamp_s), repr(r.dose_e_nm2),
                 repr(r.preprocess_ms), repr(r.inference_ms), repr(r.total_ms),
                 repr(r.psnr_db), r.dropped_before]
            )


def _stage_stats(samples: list[float]) -> StageStats:
    return StageStats(
        min=min(samples),
        median=statistics.median(samples),
        mean=statistics.fmean(samples),
    )


def bench_conversion(
    model_builder: Callable[[int], object],
    sizes: Sequence[int] = (256, 512, 1024),
    repeats: int = 10,
    warmup: int = 3,
    processor: str | None = None,
) -> list[LatencyReport]:
    """Per-stage conversion latency at each raster size.

    ``model_builder(size)`` must return a model whose input raster is
    ``size``; each timed iteration preprocesses a double-resolution raw
    frame, refines it, and encodes the result to PGM bytes.  The first
    ``warmup`` iterations are discarded.
    """
    if repeats < 10:
        raise InputError(f"need at least 10 timed repeats, got {repeats}")
    if warmup < 3:
        raise InputError(f"need at least 3 warm-up iterations, got {warmup}")
    if processor is None:
        processor = platform.processor() or platform.machine() or "unknown-cpu"
    reports = []
    for size in sizes:
        model = model_builder(size)
        spec = SceneSpec(size=2 * size, seed=size)
        event = simulate_source(spec, fps=100.0, duration=0.01, dose_schedule=500.0)[0]
        pre_t, inf_t, enc_t, tot_t = [], [], [], []
        for i in range(warmup + repeats):
            t0 = time.perf_counter()
            values, _, pre_ms = _preprocess(event, size)
            refined, inf_ms = _infer(model, rescale_intensity(values))
            t1 = time.perf_counter()
            header = f"P5\n{size} {size}\n65535\n".encode("ascii")
            payload = header + np.rint(refined.values * 65535.0).astype(">u2").tobytes()
            enc_ms = (time.perf_counter() - t1) * 1e3
            total_ms = (time.perf_counter() - t0) * 1e3
            if i >= warmup:
                pre_t.append(pre_ms)
                inf_t.append(inf_ms)
                enc_t.append(enc_ms)
                tot_t.append(total_ms)
        reports.append(
            LatencyReport(
                size=size,
                processor=processor,
                preprocess=_stage_stats(pre_t),
                inference=_stage_stats(inf_t),
                encode=_stage_stats(enc_t),
                total=_stage_stats(tot_t),
            )
        )
    return reports


def write_bench_report(path: str | Path, reports: Sequence[LatencyReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["size", "processor", "min_ms", "median_ms", "mean_ms"])
        for r in reports:
            writer.writerow(
                [r.size, r.processor, repr(r.total.min), repr(r.total.median),
                 repr(r.total.mean)]
            )
