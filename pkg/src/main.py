"""Command-line entry point for Inner Gaussian Splatting.

Usage: python -m src.main <subcommand> [flags]
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from .config import SimulationConfig, TrainConfig, get_settings, load_config
from .data import (
    export_png,
    export_raw,
    extract_slices,
    load_checkpoint,
    load_volume,
    make_phantom,
    save_checkpoint,
    slice_spec_for,
    split_dataset,
    write_dataset,
    write_volume,
)
from .data.phantom import PhantomKind
from .errors import (
    ContractViolationError,
    DegenerateInputError,
    FormatError,
    InnerGSError,
    InvalidConfigError,
    TrainingError,
)
from .metrics import evaluate_images
from .rasterizer import render_many
from .scene.models import Axis, BoxMode, SelectionMethod, SplitLabel
from .simulation import run_selection_benchmark
from .training import train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_FORMAT = 4
EXIT_INVALID_CONFIG = 5
EXIT_CONTRACT = 6
EXIT_TRAINING = 7

EXIT_CODES_HELP = """exit codes:
  0  success
  2  usage error (unknown flag, bad value)
  3  missing input file
  4  malformed volume or checkpoint file
  5  invalid configuration
  6  contract violation (shape mismatch, degenerate input)
  7  training failure (non-finite loss, empty cloud)
"""


def setup_logging(level: str = "INFO") -> None:
    """Configure logging."""
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True,
    )

    # Reduce noise from libraries
    logging.getLogger("PIL").setLevel(logging.WARNING)
    logging.getLogger("asyncio").setLevel(logging.WARNING)


class UsageError(Exception):
    pass


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of printing usage and exiting."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def _axes(value: str) -> list[str]:
    names = [v.strip().lower() for v in value.split(",") if v.strip()]
    for name in names:
        if name not in {a.value for a in Axis}:
            raise argparse.ArgumentTypeError(f"unknown axis {name!r}")
    return names


def _positive_int(value: str) -> int:
    try:
        n = int(value)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}") from e
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be positive, got {n}")
    return n


def _slice_arg(value: str) -> tuple[Axis, float]:
    try:
        axis, t = value.split(":", 1)
        return Axis(axis.strip().lower()), float(t)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected AXIS:T such as z:10.5, got {value!r}") from e


def build_parser() -> CliParser:
    common = CliParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--out", help="output directory (created if absent)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker threads; 0 = all cores, 1 = bitwise deterministic")
    common.add_argument("--method", choices=[m.value for m in SelectionMethod])
    common.add_argument("--epsilon", type=float)
    common.add_argument("--axes", type=_axes, help="comma-separated subset of x,y,z")
    common.add_argument("--test-fraction", type=float)
    common.add_argument("--log-level")

    parser = CliParser(
        prog="innergs",
        description="Reconstruct volumes as 3D Gaussians from axis-aligned slices.",
        epilog=EXIT_CODES_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    p = sub.add_parser("phantom", parents=[common], help="write an analytic phantom volume")
    p.add_argument("--kind", choices=[k.value for k in PhantomKind], default=PhantomKind.NESTED_ELLIPSOIDS.value)
    p.add_argument("--dims", type=_positive_int, nargs=3, default=[64, 64, 64], metavar=("NX", "NY", "NZ"))

    p = sub.add_parser("slice", parents=[common], help="extract and split slices, write PNGs + manifest")
    p.add_argument("--volume", required=True)

    p = sub.add_parser("train", parents=[common], help="train a Gaussian cloud on a volume's slices")
    p.add_argument("--volume", required=True)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--grid-resolution", type=int)
    p.add_argument("--slices-per-step", type=int)
    p.add_argument("--ssim-weight", type=float)
    p.add_argument("--box-mode", choices=[b.value for b in BoxMode])
    p.add_argument("--no-refine", action="store_true")

    p = sub.add_parser("render", parents=[common], help="render slices at arbitrary depths from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--slice", dest="slices", type=_slice_arg, action="append", required=True, metavar="AXIS:T")
    p.add_argument("--dims", type=_positive_int, nargs=3, metavar=("NX", "NY", "NZ"), help="pixel grid (default: checkpoint bounds)")

    p = sub.add_parser("eval", parents=[common], help="score held-out slices of a volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)

    p = sub.add_parser("simulate", parents=[common], help="compare candidate-selection methods")
    p.add_argument("--volume-size", type=int)
    p.add_argument("--num-gaussians", type=int)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--box-mode", choices=[b.value for b in BoxMode])

    return parser


# ==========================================
# HELPERS
# ==========================================

def _out_dir(args: argparse.Namespace) -> Path:
    return get_settings().ensure_out_directory(args.out)


def _defaults() -> dict[str, Any]:
    settings = get_settings()
    return {
        "seed": settings.seed,
        "threads": settings.effective_threads,
        "tile_size": settings.tile_size,
        "checkpoint_every": settings.checkpoint_every,
    }


def _train_config(args: argparse.Namespace) -> TrainConfig:
    overrides = {
        "seed": args.seed,
        "threads": args.threads,
        "method": args.method,
        "epsilon": args.epsilon,
        "axes": args.axes,
        "test_fraction": args.test_fraction,
        "max_steps": getattr(args, "max_steps", None),
        "grid_resolution": getattr(args, "grid_resolution", None),
        "slices_per_step": getattr(args, "slices_per_step", None),
        "ssim_weight": getattr(args, "ssim_weight", None),
        "box_mode": getattr(args, "box_mode", None),
        "refine_enabled": False if getattr(args, "no_refine", False) else None,
    }
    return load_config(TrainConfig, args.config, overrides, _defaults())


def _echo_config(out: Path, command: str, effective: dict[str, Any]) -> None:
    """Write every effective parameter beside the outputs."""
    payload = {"command": command, **effective}
    (out / "config.json").write_text(json.dumps(payload, indent=2, default=str), encoding="utf-8")


def _dataset(volume_path: str, config: TrainConfig):
    volume = load_volume(volume_path)
    dataset = extract_slices(volume, config.axes)
    return split_dataset(dataset, config.test_fraction, config.seed)


# ==========================================
# SUBCOMMANDS
# ==========================================

def cmd_phantom(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else get_settings().seed
    volume = make_phantom(PhantomKind(args.kind), tuple(args.dims), seed)
    path = out / "volume.igv"
    write_volume(volume, path)
    _echo_config(out, "phantom", {"kind": args.kind, "dims": args.dims, "seed": seed, "volume": str(path)})
    logger.info("Phantom written to %s", path)
    return EXIT_OK


def cmd_slice(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    config = _train_config(args)
    dataset = _dataset(args.volume, config)
    manifest = write_dataset(dataset, out / "slices")
    _echo_config(out, "slice", {
        "volume": args.volume,
        "axes": [a.value for a in config.axes],
        "test_fraction": config.test_fraction,
        "seed": config.seed,
        "manifest": str(manifest),
    })
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    config = _train_config(args)
    dataset = _dataset(args.volume, config)
    _echo_config(out, "train", {"volume": args.volume, "train_config": config.model_dump(mode="json")})

    checkpoints = out / "checkpoints"

    def _on_checkpoint(cloud, step: int) -> None:
        checkpoints.mkdir(exist_ok=True)
        save_checkpoint(cloud, checkpoints / f"step_{step:05d}.igs", {"step": step})

    cloud, report = train(dataset, config, on_checkpoint=_on_checkpoint)
    save_checkpoint(cloud, out / "checkpoint.igs", {"step": report.final_step, "stop_reason": report.stop_reason.value})
    report.write_json(out / "train_report.json")
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    config = _train_config(args)
    cloud = load_checkpoint(args.checkpoint)
    dims = tuple(args.dims) if args.dims else tuple(int(round(v)) for v in cloud.world_bounds[1] - cloud.world_bounds[0])
    specs = [slice_spec_for(dims, axis, t) for axis, t in args.slices]

    rendered = render_many(
        cloud, specs, config.method, config.epsilon, config.tile_size,
        config.box_mode, config.min_transmittance, config.threads,
    )
    written = []
    for spec, result in zip(specs, rendered):
        stem = f"render_{spec.axis.value}_{spec.t:g}"
        export_png(result.image, out / f"{stem}.png")
        export_raw(result.image, out / f"{stem}.f32")
        written.append(stem)
    _echo_config(out, "render", {
        "checkpoint": args.checkpoint,
        "dims": list(dims),
        "slices": [{"axis": s.axis.value, "t": s.t} for s in specs],
        "train_config": config.model_dump(mode="json"),
        "outputs": written,
    })
    logger.info("Rendered %d slices to %s", len(specs), out)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    config = _train_config(args)
    cloud = load_checkpoint(args.checkpoint)
    dataset = _dataset(args.volume, config)
    test_ids = dataset.ids(SplitLabel.TEST)
    specs = [dataset.specs[i] for i in test_ids]

    rendered = render_many(
        cloud, specs, config.method, config.epsilon, config.tile_size,
        config.box_mode, config.min_transmittance, config.threads,
    )
    preds = [r.image for r in rendered]
    truths = [dataset.images[i] for i in test_ids]
    axes = [s.axis.value for s in specs]
    indices = [dataset.indices[i] for i in test_ids]

    for normalize, name in ((False, "metrics"), (True, "metrics_normalized")):
        report = evaluate_images(preds, truths, axes, indices, test_ids, normalize=normalize)
        report.write_json(out / f"{name}.json")
        report.write_csv(out / f"{name}.csv")
    _echo_config(out, "eval", {
        "checkpoint": args.checkpoint,
        "volume": args.volume,
        "train_config": config.model_dump(mode="json"),
    })
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    overrides = {
        "seed": args.seed,
        "threads": args.threads,
        "epsilon": args.epsilon,
        "axes": args.axes,
        "volume_size": args.volume_size,
        "num_gaussians": args.num_gaussians,
        "repetitions": args.repetitions,
        "box_mode": args.box_mode,
    }
    config = load_config(SimulationConfig, args.config, overrides, _defaults())
    report = run_selection_benchmark(config)
    report.write_json(out / "simulation.json")
    report.write_csv(out / "simulation.csv")
    _echo_config(out, "simulate", {"simulation_config": config.model_dump(mode="json")})
    print(report.summary_table())
    return EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom,
    "slice": cmd_slice,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
}


def _fail(kind: str, message: str, code: int) -> int:
    flat = str(message).replace("\n", " ").replace('"', "'")
    print(f'error={kind} message="{flat}"', file=sys.stderr)
    return code


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, dispatch, and map failures to exit codes."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        return _fail("usage", str(e), EXIT_USAGE)

    setup_logging(args.log_level or get_settings().log_level)
    try:
        return COMMANDS[args.command](args)
    except FileNotFoundError as e:
        return _fail("missing_file", f"{e.filename}: {e.strerror}", EXIT_MISSING_FILE)
    except FormatError as e:
        return _fail("format", str(e), EXIT_FORMAT)
    except InvalidConfigError as e:
        return _fail("invalid_config", str(e), EXIT_INVALID_CONFIG)
    except (ContractViolationError, DegenerateInputError) as e:
        return _fail("contract", str(e), EXIT_CONTRACT)
    except TrainingError as e:
        return _fail("training", str(e), EXIT_TRAINING)
    except InnerGSError as e:
        return _fail("error", str(e), EXIT_CONTRACT)


if __name__ == "__main__":
    sys.exit(run())
