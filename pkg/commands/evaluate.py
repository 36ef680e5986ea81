import logging
from pathlib import Path

import numpy as np

from config import config_hash, load_run_config
from constants import EXIT_OK, FILE_HEATMAP, FILE_METRICS, FILE_PER_STEP
from errors import DomainError
from evaluation import NeighborStructure, heatmap_table, metrics_report, per_step_table
from run_manifest import build_record, file_sha256, hash_outputs, write_manifest
from storage import output_transaction, read_flows, write_json, write_table
from utils import cli_overrides, record_run

from .estimate import grid_for

logger = logging.getLogger(__name__)


def marginals_of(flows) -> list:
    """Per-step marginals of a flow series: row sums, then the last column sums."""
    return [f.sum(axis=1) for f in flows] + [flows[-1].sum(axis=0)]


@record_run
def run_evaluate(args) -> int:
    cfg = load_run_config(args.config, overrides=cli_overrides(args))
    stay = cfg.evaluation.stay or bool(getattr(args, "stay", False))

    estimate = read_flows(args.estimate)
    truth = read_flows(args.truth)
    if len(estimate) != len(truth):
        raise DomainError(f"horizon mismatch: estimate has {len(estimate)} intervals, truth has {len(truth)}")
    if not truth:
        raise DomainError("truth holds no transition intervals")

    S = truth[0].shape[0]
    space = grid_for(S, cfg.estimation.grid_w)
    if cfg.evaluation.neighbors == "moore":
        nbrs = NeighborStructure.moore(space)
    else:
        nbrs = NeighborStructure.full(S)

    truth_marginals = marginals_of(truth)
    report = metrics_report(estimate, truth, nbrs, truth_marginals if stay else None,
                            config=cfg.to_dict()["evaluation"])
    heatmap = heatmap_table(space, marginals_of(estimate), truth_marginals)

    with output_transaction(args.out) as staging:
        write_json(staging / FILE_METRICS, report.to_dict())
        write_table(per_step_table(report), staging / FILE_PER_STEP)
        write_table(heatmap, staging / FILE_HEATMAP)

        record = build_record(
            "EVALUATE",
            config_hash(cfg),
            cfg.to_dict(),
            hash_outputs(staging),
            inputs={
                "estimate": file_sha256(args.estimate),
                "truth": file_sha256(args.truth),
            },
            summary={"nmae": report.nmae, "stay_nmae": report.stay_nmae,
                     "neighbors": report.neighbors, "total_truth_mass": float(np.sum([t.sum() for t in truth]))},
        )
        write_manifest(staging, record)

    logger.info(f"Metrics written to {Path(args.out)}: NMAE {report.nmae:.4f}")
    return EXIT_OK
