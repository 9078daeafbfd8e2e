import sys
from argparse import ArgumentParser, ArgumentTypeError
from pathlib import Path

from hand_motion_dit.errors import HandMotionError
from hand_motion_dit.runner import CommandRunner, RunOptions, configure_logging, exit_code


def raster(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ArgumentTypeError(f"expected HxW, got `{text}`")
    if h < 1 or w < 1:
        raise ArgumentTypeError(f"raster dimensions must be positive, got `{text}`")
    return h, w


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="hand-motion-dit",
        description="Audio-conditioned hand motion generation with a diffusion transformer",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="Write a synthetic audio/motion dataset")
    synth.add_argument("--spec", type=Path, help="Synthetic dataset spec (JSON)")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", type=Path, required=True)

    train = commands.add_parser("train", help="Train the denoiser")
    train.add_argument("--config", type=Path, required=True, help="Run config (JSON)")
    train.add_argument("--resume", type=Path, help="Checkpoint to continue from")
    train.add_argument("--out", type=Path, help="Output directory (default: the config's `out`)")

    smp = commands.add_parser("sample", help="Generate motion for an audio track")
    smp.add_argument("--ckpt", dest="checkpoint", type=Path, required=True)
    smp.add_argument("--audio", type=Path, required=True, help="FEAT audio features")
    smp.add_argument("--style", help="Style name (default: the first known style)")
    smp.add_argument(
        "--amplitude",
        type=float,
        nargs="+",
        default=[0.01],
        help="Amplitude for both hands, or left then right",
    )
    smp.add_argument("--history", type=Path, help="MCLIP clip preceding the first sample")
    smp.add_argument("--reference", type=Path, help="FEAT reference-context vector")
    smp.add_argument("--count", type=int, default=1)
    smp.add_argument("--length", type=int, help="Frames per sample")
    smp.add_argument(
        "--chain", action="store_true", help="Continue each sample from the previous one"
    )
    smp.add_argument("--seed", type=int, default=0)
    smp.add_argument("--out", type=Path, required=True)

    ev = commands.add_parser("eval", help="Score generated motion")
    ev.add_argument("--generated", type=Path, required=True)
    ev.add_argument("--reference", dest="references", type=Path)
    ev.add_argument("--audio", dest="audio_dir", type=Path)
    ev.add_argument("--sigma", type=float, default=0.1, help="Beat alignment tolerance, seconds")
    ev.add_argument("--delta", type=float, default=0.1, help="PCK threshold")
    ev.add_argument("--window", type=int, help="FGD window in frames")
    ev.add_argument("--grid", type=int, default=32)
    ev.add_argument("--skeleton", type=Path)
    ev.add_argument("--out", type=Path, required=True)

    prep = commands.add_parser("prep", help="Prepare keypoint and hand maps")
    prep.add_argument("--clips", type=Path, required=True)
    prep.add_argument("--filter-kernel", dest="kernel", type=int, default=31)
    prep.add_argument("--raster", type=raster, default=(64, 64), help="HxW")
    prep.add_argument("--sigma-px", dest="sigma_px", type=float, default=2.0)
    prep.add_argument("--skeleton", type=Path)
    prep.add_argument("--out", type=Path, required=True)

    val = commands.add_parser("validate", help="Check a dataset")
    val.add_argument("dataset", type=Path, help="Dataset directory or manifest")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        configure_logging()
    except HandMotionError as err:
        print(err, file=sys.stderr)
        return exit_code(err)

    values = {k: v for k, v in vars(args).items() if k != "command"}
    runner = CommandRunner(RunOptions(**values))
    match args.command:
        case "synth":
            return runner.synth()
        case "train":
            return runner.train()
        case "sample":
            return runner.sample()
        case "eval":
            return runner.evaluate()
        case "prep":
            return runner.prep()
        case _:
            return runner.validate()


if __name__ == "__main__":
    sys.exit(main())
