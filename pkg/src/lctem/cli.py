"""Command-line front end: every pipeline stage as one subcommand.

Precedence for settings is defaults < config file < explicit flags.  The
config file is plain ``key = value`` text (``#`` comments allowed) whose keys
are the flag names of the chosen subcommand; unknown keys are rejected.

Exit codes: 0 on success, 2 for input problems (bad files, bad flags, bad
config), 3 when training aborts on a non-finite loss.

Wall-clock measurements (the bench report and the per-frame stage timings of
``stream``) are written to dedicated files so that every other output is
byte-deterministic for a fixed ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import threadpoolctl

from . import cellgeom, train as train_mod
from .errors import InputError, ToolkitError, TrainingAbort
from .metrics import SsimConfig, ssim
from .micrograph import (
    NormalizedImage,
    area_resize,
    decade_edges,
    dose_histogram,
    load_pair,
    load_pgm,
    read_manifest,
    rescale_intensity,
    save_pgm,
    to_normalized,
)
from .stream import (
    SceneSpec,
    bench_conversion,
    run_stream,
    simulate_source,
    write_bench_report,
)
from .unet import ModelConfig, build, load_checkpoint, save_checkpoint

# dest -> string converter for config-file values, per subcommand
_CONFIG_KEYS: dict[str, dict] = {}


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise InputError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise InputError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise InputError("expected at least one integer")
    return values


def _opt(parser, cmd, *flags, type=str, default=None, suppress=False, **kw):
    """add_argument wrapper that records config-eligible options."""
    action = kw.get("action")
    dest = flags[0].lstrip("-").replace("-", "_")
    conv = _bool if action == "store_true" else type
    _CONFIG_KEYS.setdefault(cmd, {})[dest] = conv
    if suppress:
        parser.add_argument(*flags, default=argparse.SUPPRESS, **(
            kw if action else {**kw, "type": type}))
    else:
        if action:
            parser.add_argument(*flags, **kw)
        else:
            parser.add_argument(*flags, type=type, default=default, **kw)


def _add_globals(parser, cmd, suppress):
    _opt(parser, cmd, "--seed", type=int, default=0, suppress=suppress,
         help="base RNG seed for data, splits, and weights")
    _opt(parser, cmd, "--threads", type=int, default=None, suppress=suppress,
         help="cap on BLAS worker threads")
    _opt(parser, cmd, "--out", type=str, default=".", suppress=suppress,
         help="output directory")
    parser.add_argument("--config", default=None,
                        help="key = value settings file (flags take precedence)")


def _build_parser(suppress: bool = False) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lctem",
        description="Low-dose micrograph refinement toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset-stats", help="dose and pair-SSIM histograms")
    p.add_argument("manifest")
    _opt(p, "dataset-stats", "--size", type=int, default=None, suppress=suppress,
         help="resize pairs to this side length before scoring")
    _opt(p, "dataset-stats", "--window-size", type=int, default=11, suppress=suppress)
    _opt(p, "dataset-stats", "--per-decade", type=int, default=1, suppress=suppress,
         help="dose histogram bins per decade")
    _add_globals(p, "dataset-stats", suppress)
    p.set_defaults(func=cmd_dataset_stats)

    p = sub.add_parser("train", help="train a refinement model")
    _opt(p, "train", "--manifest", type=str, default=None, suppress=suppress,
         help="paired dataset manifest CSV")
    _opt(p, "train", "--synthetic", type=int, default=None, suppress=suppress,
         help="generate this many synthetic pairs instead of a manifest")
    _opt(p, "train", "--size", type=int, default=64, suppress=suppress)
    _opt(p, "train", "--width", type=int, default=16, suppress=suppress)
    _opt(p, "train", "--blocks", type=_int_list, default=(2, 2, 2, 2),
         suppress=suppress, help="encoder blocks per stage, comma separated")
    _opt(p, "train", "--stem", type=str, default="3x3", suppress=suppress)
    _opt(p, "train", "--norm", type=str, default="batch", suppress=suppress)
    _opt(p, "train", "--loss", type=str, default="ssim", suppress=suppress)
    _opt(p, "train", "--lr", type=float, default=1e-4, suppress=suppress)
    _opt(p, "train", "--epochs", type=int, default=60, suppress=suppress)
    _opt(p, "train", "--batch-size", type=int, default=4, suppress=suppress)
    _opt(p, "train", "--split-fraction", type=float, default=0.9, suppress=suppress)
    _opt(p, "train", "--flip-prob", type=float, default=0.5, suppress=suppress)
    _opt(p, "train", "--mosaic-prob", type=float, default=0.25, suppress=suppress)
    _opt(p, "train", "--window-size", type=int, default=11, suppress=suppress)
    _opt(p, "train", "--every-n-epochs", type=int, default=1, suppress=suppress)
    _opt(p, "train", "--with-optimizer", action="store_true", default=False,
         suppress=suppress, help="carry Adam moments in the checkpoint")
    _add_globals(p, "train", suppress)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a paired dataset")
    p.add_argument("checkpoint")
    _opt(p, "eval", "--manifest", type=str, default=None, suppress=suppress)
    _opt(p, "eval", "--synthetic", type=int, default=None, suppress=suppress)
    _opt(p, "eval", "--size", type=int, default=64, suppress=suppress)
    _opt(p, "eval", "--window-size", type=int, default=11, suppress=suppress)
    _opt(p, "eval", "--loss", type=str, default="ssim", suppress=suppress,
         help="loss label recorded in the report")
    _add_globals(p, "eval", suppress)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("refine", help="refine PGM images with a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("images", nargs="+")
    _add_globals(p, "refine", suppress)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("bench", help="conversion latency per raster size")
    p.add_argument("checkpoint")
    _opt(p, "bench", "--sizes", type=_int_list, default=(256, 512, 1024),
         suppress=suppress)
    _opt(p, "bench", "--repeats", type=int, default=10, suppress=suppress)
    _opt(p, "bench", "--warmup", type=int, default=3, suppress=suppress)
    _add_globals(p, "bench", suppress)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("stream", help="simulated live acquisition")
    p.add_argument("checkpoint")
    _opt(p, "stream", "--fps", type=float, default=100.0, suppress=suppress)
    _opt(p, "stream", "--duration", type=float, default=0.5, suppress=suppress)
    _opt(p, "stream", "--dose-rate", type=float, default=500.0, suppress=suppress)
    _opt(p, "stream", "--mode", type=str, default="per-frame", suppress=suppress)
    _opt(p, "stream", "--scene-size", type=int, default=128, suppress=suppress)
    _opt(p, "stream", "--particles", type=int, default=8, suppress=suppress)
    _opt(p, "stream", "--queue-capacity", type=int, default=2, suppress=suppress)
    _opt(p, "stream", "--ring-capacity", type=int, default=10, suppress=suppress)
    _opt(p, "stream", "--reference", type=int, default=None, suppress=suppress,
         help="frame index used as the PSNR reference (default: last processed)")
    _opt(p, "stream", "--consumer-delay", type=float, default=0.0, suppress=suppress,
         help="artificial per-frame consumer delay in seconds")
    _opt(p, "stream", "--producer-interval", type=float, default=0.0,
         suppress=suppress, help="spacing between produced frames in seconds")
    _add_globals(p, "stream", suppress)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("thickness", help="liquid-cell geometry fits")
    _opt(p, "thickness", "--tilt", type=str, default=None, suppress=suppress,
         help="tilt series CSV (theta_deg,displacement_um)")
    _opt(p, "thickness", "--profile", type=str, default=None, suppress=suppress,
         help="thickness profile CSV (x_um,y_um,thickness_um)")
    _opt(p, "thickness", "--diameter", type=float, default=0.1, suppress=suppress,
         help="tracer particle diameter in um")
    _add_globals(p, "thickness", suppress)
    p.set_defaults(func=cmd_thickness)

    return parser


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read config file: {exc}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if key in values:
            raise InputError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def _apply_config(args, explicit) -> None:
    if args.config is None:
        return
    known = _CONFIG_KEYS[args.command]
    for key, text in _read_config_file(args.config).items():
        if key not in known:
            raise InputError(
                f"config key {key!r} is not a setting of '{args.command}'"
            )
        if hasattr(explicit, key):
            continue  # explicit flag wins
        try:
            setattr(args, key, known[key](text))
        except (ValueError, TypeError):
            raise InputError(f"config key {key!r}: cannot parse {text!r}") from None


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_pairs(args):
    if args.manifest is not None and args.synthetic is not None:
        raise InputError("--manifest and --synthetic are mutually exclusive")
    if args.manifest is not None:
        return train_mod.load_dataset(args.manifest, size=args.size)
    n = args.synthetic if args.synthetic is not None else 200
    return train_mod.make_synthetic_dataset(n, size=args.size, seed=args.seed)


def _write_histogram(path, edges, counts):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            writer.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def cmd_dataset_stats(args) -> int:
    entries = read_manifest(args.manifest)
    if not entries:
        raise InputError(f"{args.manifest}: manifest lists no pairs")
    pairs = [load_pair(e, size=args.size) for e in entries]
    out = _out_dir(args)

    doses = [p.noisy_dose for p in pairs]
    edges = decade_edges(min(doses), max(doses), per_decade=args.per_decade)
    _write_histogram(out / "dose_histogram.csv", edges, dose_histogram(doses, edges))

    cfg = SsimConfig(window_size=args.window_size)
    scores = [ssim(p.noisy, p.truth, cfg).mean for p in pairs]
    ssim_edges = np.linspace(0.0, 1.0, 11)
    counts, _ = np.histogram(np.clip(scores, 0.0, 1.0), bins=ssim_edges)
    _write_histogram(out / "pair_ssim_histogram.csv", ssim_edges, counts)
    print(f"scored {len(pairs)} pairs; mean SSIM {float(np.mean(scores)):.4f}")
    return 0


def cmd_train(args) -> int:
    pairs = _load_pairs(args)
    cfg = train_mod.TrainConfig(
        loss=args.loss,
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        split_fraction=args.split_fraction,
        seed=args.seed,
        flip_prob=args.flip_prob,
        mosaic_prob=args.mosaic_prob,
        window_size=args.window_size,
    )
    train_pairs, val_pairs = train_mod.split_dataset(pairs, cfg.split_fraction, cfg.seed)
    model_cfg = ModelConfig(
        encoder_blocks=tuple(args.blocks),
        base_width=args.width,
        input_size=args.size,
        stem=args.stem,
        norm=args.norm,
    )
    model = build(model_cfg, seed=args.seed)
    history = train_mod.validation_curve(
        model, train_pairs, val_pairs, cfg, every_n_epochs=args.every_n_epochs,
        progress=lambda r: print(
            f"epoch {r.epoch}: train {r.train_loss:.4f} val {r.val_loss:.4f} "
            f"psnr {r.val_psnr:.2f} ssim {r.val_ssim:.4f}"
        ),
    )
    out = _out_dir(args)
    save_checkpoint(model, out / "model.ckpt", optimizer=args.with_optimizer)
    train_mod.write_train_log(out / "train_log.csv", history)
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    pairs = _load_pairs(args)
    report = train_mod.evaluate(model, pairs, window_size=args.window_size,
                                loss_name=args.loss)
    out = _out_dir(args)
    train_mod.write_eval_report(out / "eval.csv", report)
    print(
        f"refined: psnr {report.mean_refined_psnr:.2f} ssim "
        f"{report.mean_refined_ssim:.4f} | original: psnr "
        f"{report.mean_baseline_psnr:.2f} ssim {report.mean_baseline_ssim:.4f}"
    )
    return 0


def cmd_refine(args) -> int:
    model = load_checkpoint(args.checkpoint)
    factor = model.config.downsample_factor
    out = _out_dir(args)
    for image_path in args.images:
        m = load_pgm(image_path)
        values = to_normalized(m).values
        h, w = values.shape
        if h % factor or w % factor:
            size = model.config.input_size
            values = area_resize(values, size, size).values
        x = rescale_intensity(values).values[None, None]
        y = model.predict(x.astype(model.dtype))[0, 0]
        refined = NormalizedImage(np.clip(y.astype(np.float64), 0.0, 1.0))
        target = out / f"{Path(image_path).stem}_refined.pgm"
        save_pgm(refined, target)
        print(f"wrote {target}")
    return 0


def cmd_bench(args) -> int:
    base = load_checkpoint(args.checkpoint).config

    def builder(size: int):
        return build(replace(base, input_size=size), seed=args.seed)

    reports = bench_conversion(builder, sizes=args.sizes, repeats=args.repeats,
                               warmup=args.warmup)
    out = _out_dir(args)
    write_bench_report(out / "bench.csv", reports)
    for r in reports:
        print(f"{r.size}: median {r.total.median:.1f} ms")
    return 0


def cmd_stream(args) -> int:
    model = load_checkpoint(args.checkpoint)
    spec = SceneSpec(size=args.scene_size, n_particles=args.particles, seed=args.seed)
    source = simulate_source(spec, fps=args.fps, duration=args.duration,
                             dose_schedule=args.dose_rate)
    out = _out_dir(args)
    rows = run_stream(
        model,
        source,
        mode=args.mode,
        out_dir=out / "frames",
        reference_index=args.reference,
        queue_capacity=args.queue_capacity,
        ring_capacity=args.ring_capacity,
        consumer_delay_s=args.consumer_delay,
        producer_interval_s=args.producer_interval,
    )
    with open(out / "stream_telemetry.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "timestamp_s", "dose_e_nm2", "psnr_db",
                         "dropped_before"])
        for r in rows:
            writer.writerow([r.frame, repr(r.timestamp_s), repr(r.dose_e_nm2),
                             repr(r.psnr_db), r.dropped_before])
    with open(out / "stream_timings.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "preprocess_ms", "inference_ms", "total_ms"])
        for r in rows:
            writer.writerow([r.frame, repr(r.preprocess_ms), repr(r.inference_ms),
                             repr(r.total_ms)])
    print(f"processed {len(rows)} of {len(source)} frames")
    return 0


def cmd_thickness(args) -> int:
    if args.tilt is None and args.profile is None:
        raise InputError("provide --tilt and/or --profile input")
    out = _out_dir(args)
    rows = []
    if args.tilt is not None:
        fit = cellgeom.fit_separation(cellgeom.read_tilt_series(args.tilt))
        thickness = cellgeom.liquid_thickness(max(fit.h_prime_um, 0.0), args.diameter)
        rows += [
            ("h_prime_um", fit.h_prime_um),
            ("separation_residual_rms_um", fit.residual_rms_um),
            ("separation_stderr_um", fit.stderr_um),
            ("liquid_thickness_um", thickness),
        ]
        print(f"h_prime_um = {fit.h_prime_um:.6g}")
        print(f"liquid_thickness_um = {thickness:.6g}")
    if args.profile is not None:
        fit = cellgeom.fit_profile(cellgeom.read_profile(args.profile))
        rows += [
            ("a_per_mm", fit.a_per_mm),
            ("b_um", fit.b_um),
            ("profile_residual_rms_um", fit.residual_rms_um),
        ]
        print(f"a_per_mm = {fit.a_per_mm:.6g}")
        print(f"b_um = {fit.b_um:.6g}")
    with open(out / "thickness.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["quantity", "value"])
        for name, value in rows:
            writer.writerow([name, repr(float(value))])
    return 0


def main(argv=None) -> int:
    parser = _build_parser(suppress=False)
    sentinel = _build_parser(suppress=True)
    args = parser.parse_args(argv)
    explicit = sentinel.parse_args(argv)
    try:
        _apply_config(args, explicit)
        limit = args.threads
        if limit is not None:
            with threadpoolctl.threadpool_limits(limits=limit):
                return args.func(args)
        return args.func(args)
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3
    except (ToolkitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
