import argparse
import logging
import sys
from pathlib import Path

from commands import run_estimate, run_evaluate, run_simulate
from constants import FILE_LOG, VARIANTS
from utils import RunActionFilter, error_handler, logger


def setup_logging(log_path=None):
    handlers = []

    # File handler - only run actions and problems
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_path, encoding="utf-8")
        file_handler.setLevel(logging.INFO)
        file_handler.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s]: %(message)s"))
        file_handler.addFilter(RunActionFilter())
        handlers.append(file_handler)

    # Console handler - everything
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(logging.INFO)
    console_handler.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s] %(name)s: %(message)s"))
    handlers.append(console_handler)

    logging.basicConfig(level=logging.INFO, handlers=handlers, force=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="popflow",
        description="Estimate population transition flows from aggregated counts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run configuration (JSON)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--variant", choices=sorted(VARIANTS), help="M-step variant")
        p.add_argument("--eps", type=float, help="entropic regularization weight")
        p.add_argument("--seed", type=int, help="simulation seed")

    p = sub.add_parser("simulate", help="simulate ground truth and sensor observations")
    common(p)
    p.set_defaults(handler=run_simulate)

    p = sub.add_parser("estimate", help="estimate flows and costs from observations")
    common(p)
    p.add_argument("--observations", required=True, help="observation MarginalFile (CSV)")
    p.set_defaults(handler=run_estimate)

    p = sub.add_parser("evaluate", help="score an estimate against ground truth")
    common(p)
    p.add_argument("--estimate", required=True, help="estimated FlowFile (CSV)")
    p.add_argument("--truth", required=True, help="ground-truth FlowFile (CSV)")
    p.add_argument("--stay", action="store_true", help="also report the STAY baseline")
    p.set_defaults(handler=run_evaluate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        setup_logging(Path(args.out) / FILE_LOG)
        logger.debug(f"popflow {args.command} with {vars(args)}")
        return args.handler(args)
    except Exception as e:
        return error_handler(e)


if __name__ == "__main__":
    sys.exit(main())
