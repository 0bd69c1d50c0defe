"""Console script entry point for the latent_advection CLI.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical abort or
failed check, 4 I/O error.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape
from rich.table import Table

from . import config
from .baselines import OversizedInputError, TransportError, direct_pde_fit, ot_interpolate
from .checks import SUITES, run_suite
from .config_loader import ConfigError, load_manifest, load_presets, load_train_config, write_manifest
from .data import ImageFormatError, load_pair, save_image, scan_patches
from .export import ExportError, encode_field, export_artifacts, write_files_async
from .inference import infer_image
from .models import DatasetManifest, TrainConfig
from .networks import BundleFormatError, ModelBundle
from .recovery import SCENE_FILE, encode_scene_record, load_scene_truth, loss_plateau, plateau_ratio, recovery_metrics
from .synthetic import make_synthetic
from .tensor import ShapeError, TapeError
from .training import NumericalAbort, OptimizerState, read_metrics, train, write_metrics

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

_USAGE_ERRORS = (ShapeError, ConfigError, ValidationError, BundleFormatError, OversizedInputError)
_NUMERICAL_ERRORS = (NumericalAbort, TapeError, TransportError)


# =================================================================================================
# ARGUMENT TYPES
# =================================================================================================


def parse_size(text: str) -> tuple[int, int]:
    """Parse ``HxW`` into a (height, width) tuple."""
    try:
        h, w = (int(part) for part in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    if h < 2 or w < 2:
        raise argparse.ArgumentTypeError(f"size must be at least 2x2, got {text!r}")
    return h, w


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {value}")
    return value


def fraction(text: str) -> float:
    value = positive_float(text)
    if value > 1.0:
        raise argparse.ArgumentTypeError(f"expected a fraction in (0, 1], got {value}")
    return value


def config_keys_help() -> str:
    """One line per training configuration key with its example1 preset value."""
    lines = ["configuration keys (key = value, example1 preset values):"]
    for name, info in TrainConfig.model_fields.items():
        required = "required" if info.is_required() else "optional"
        lines.append(f"  {name:<20} {required:<9} {info.description or ''}")
    return "\n".join(lines)


def _resolve_config(args: argparse.Namespace) -> TrainConfig:
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.preset:
        presets = load_presets()
        if args.preset not in presets:
            raise ConfigError(f"unknown preset {args.preset!r}; available: {', '.join(sorted(presets)) or 'none'}")
        return presets[args.preset]
    if not args.config:
        raise ConfigError("a training configuration is required (--config FILE or --preset NAME)")
    return load_train_config(args.config)


# =================================================================================================
# COMMANDS
# =================================================================================================


def cmd_synth(args: argparse.Namespace) -> int:
    """Write x0/x1 PNGs, one binary per true field, the scene record and a manifest."""
    height, width = args.size
    scene = make_synthetic(args.kind, height, width, args.steps, dt=args.dt, seed=args.seed, max_shift=args.max_shift)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    save_image(out / "x0.png", scene.x0, bit_depth=16)
    save_image(out / "x1.png", scene.x1, bit_depth=16)
    files = {out / f"field_{s:03d}.bin": encode_field(field) for s, field in enumerate(scene.field_array())}
    files[out / SCENE_FILE] = encode_scene_record(scene)
    asyncio.run(write_files_async(files))
    write_manifest(out / "manifest.yaml", DatasetManifest(name=f"synthetic-{args.kind}", x0=["x0.png"], x1=["x1.png"]))
    logging.info("Wrote %s scene (%dx%d, N=%d, seed %d) to %s", args.kind, height, width, args.steps, args.seed, out)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    if args.zero_fields:
        cfg = cfg.model_copy(update={"zero_fields": True})
    pair = load_pair(load_manifest(args.data))
    dataset = scan_patches(pair, cfg.patch_height, cfg.patch_width, cfg.stride_h, cfg.stride_w)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    bundle = ModelBundle.build(cfg.bundle_spec(pair.channels, codec=args.codec))
    optimizer = OptimizerState.create(bundle.parameters(), cfg.optimizer_settings())
    result = train(
        dataset,
        bundle,
        optimizer,
        cfg.loss_weights(),
        iterations=cfg.iterations,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        log_every=cfg.log_every,
        dump_dir=out,
    )
    result.bundle.save(out / "model.bin")
    write_metrics(result.metrics, out / "metrics.csv")
    logging.info("[green]Training finished[/]: bundle and metrics in %s", out)
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    bundle = ModelBundle.load(args.model)
    pair = load_pair(load_manifest(args.data))
    if pair.channels != bundle.spec.in_channels:
        raise ShapeError(f"bundle expects {bundle.spec.in_channels} channel(s), data has {pair.channels}")
    result = infer_image(pair, bundle)
    extra = None
    if args.truth:
        record, true_fields = load_scene_truth(args.truth)
        extra = recovery_metrics(result, true_fields, record, disk_radius=args.disk_radius)
    export_artifacts(result, args.out, reference=pair, quiver_every=args.quiver_every, extra_metrics=extra)
    return EXIT_OK


def cmd_baseline(args: argparse.Namespace) -> int:
    pair = load_pair(load_manifest(args.data))
    out = Path(args.out)
    if args.method == "ot":
        interp = ot_interpolate(pair, args.steps, epsilon=args.epsilon, max_iter=args.max_iter, floor=args.floor)
        export_artifacts(interp.as_inference(), out / "baseline_ot", reference=pair, quiver_every=args.quiver_every)
        return EXIT_OK

    cfg = _resolve_config(args)
    dataset = scan_patches(pair, cfg.patch_height, cfg.patch_width, cfg.stride_h, cfg.stride_w)
    target = out / "baseline_direct"
    target.mkdir(parents=True, exist_ok=True)
    fit = direct_pde_fit(dataset, cfg, in_channels=pair.channels, dump_dir=target)
    fit.bundle.save(target / "model.bin")
    write_metrics(fit.metrics, target / "metrics.csv")
    result = infer_image(pair, fit.bundle)
    result.method = "direct"
    export_artifacts(result, target, reference=pair, quiver_every=args.quiver_every)
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    """Compare the dynamics-loss plateau of a zero-field run with the full model."""
    full = read_metrics(args.full)
    ablated = read_metrics(args.ablated)
    if not full or not ablated:
        raise ConfigError("both metrics files need at least one logged row")
    ratio = plateau_ratio(ablated, full, tail=args.tail)
    ok = ratio >= args.min_ratio
    table = Table(title="zero-field ablation")
    table.add_column("run")
    table.add_column("loss_dyn plateau", justify="right")
    table.add_row("full", f"{loss_plateau(full, args.tail):.4e}")
    table.add_row("zero fields", f"{loss_plateau(ablated, args.tail):.4e}")
    verdict = "[green]pass[/]" if ok else "[red]FAIL[/]"
    table.add_row(f"ratio (min {args.min_ratio:g})", f"{ratio:.2f} {verdict}")
    Console().print(table)
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_check(args: argparse.Namespace) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    table = Table(title="latent_advection checks")
    table.add_column("check")
    table.add_column("measured", justify="right")
    table.add_column("threshold", justify="right")
    table.add_column("result")
    passed = True
    for name in names:
        for r in run_suite(name):
            passed &= r.passed
            table.add_row(r.name, f"{r.measured:.3e}", f"{r.threshold:.1e}", "[green]pass[/]" if r.passed else "[red]FAIL[/]")
    Console().print(table)
    return EXIT_OK if passed else EXIT_NUMERICAL


# =================================================================================================
# PARSER
# =================================================================================================


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value training configuration")
    parser.add_argument("--preset", help=f"preset name from {config.PRESETS_DIR}/ instead of --config")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latent_advection",
        description="Estimate the evolution between two images with latent-space advection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic ground-truth scene")
    p.add_argument("--kind", choices=["translation", "rotation", "source-sink"], required=True)
    p.add_argument("--size", type=parse_size, default=(64, 64), help="HxW (default 64x64)")
    p.add_argument("--steps", type=positive_int, default=10, help="evolution steps N")
    p.add_argument("--dt", type=positive_float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-shift", type=float, default=2.0, help="largest per-step displacement in cells")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser(
        "train",
        help="train a model bundle on an image pair",
        epilog=config_keys_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--data", required=True, help="dataset manifest (YAML)")
    _add_config_args(p)
    p.add_argument("--codec", choices=["learned", "identity"], default="learned")
    p.add_argument("--zero-fields", action="store_true", help="clamp eta to zero fields (ablation)")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("infer", help="apply a trained bundle to an image pair")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quiver-every", type=positive_int, default=8)
    p.add_argument("--truth", help="synth output directory; adds field-recovery scores to metrics.json")
    p.add_argument("--disk-radius", type=positive_float, default=0.3, help="curl averaging disk for rotation scenes")
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser("baseline", help="run a comparison method")
    p.add_argument("--method", choices=["ot", "direct"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_args(p)
    p.add_argument("--steps", type=positive_int, default=10, help="OT frames minus one")
    p.add_argument("--epsilon", type=positive_float, default=1e-3, help="entropic weight")
    p.add_argument("--floor", type=positive_float, default=1e-8, help="mass floor before renormalising")
    p.add_argument("--max-iter", type=positive_int, default=10000)
    p.add_argument("--quiver-every", type=positive_int, default=8)
    p.set_defaults(handler=cmd_baseline)

    p = sub.add_parser("compare", help="compare a zero-field ablation run with the full model")
    p.add_argument("--full", required=True, help="metrics.csv of the full model")
    p.add_argument("--ablated", required=True, help="metrics.csv of the --zero-fields run")
    p.add_argument("--tail", type=fraction, default=0.1, help="fraction of logged rows forming the plateau")
    p.add_argument("--min-ratio", type=positive_float, default=3.0)
    p.set_defaults(handler=cmd_compare)

    p = sub.add_parser("check", help="run verification checks")
    p.add_argument("--suite", choices=[*SUITES, "all"], default="all")
    p.set_defaults(handler=cmd_check)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Console script entrypoint."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=config.LOG_LEVEL,
        format="%(asctime)s - %(levelname)s - %(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(markup=True)],
    )
    try:
        return args.handler(args)
    except _USAGE_ERRORS as exc:
        logging.error("[red]%s[/]", escape(str(exc)))
        return EXIT_USAGE
    except _NUMERICAL_ERRORS as exc:
        logging.error("[red]%s[/]", escape(str(exc)))
        return EXIT_NUMERICAL
    except (ImageFormatError, ExportError, OSError) as exc:
        logging.error("[red]%s[/]", escape(str(exc)))
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
