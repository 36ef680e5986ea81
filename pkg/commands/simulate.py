import logging
from pathlib import Path

from config import config_hash, load_run_config, to_sim_config
from constants import EXIT_OK, FILE_OBSERVATIONS, FILE_TRUE_FLOWS, FILE_TRUE_MARGINALS
from run_manifest import build_record, hash_outputs, write_manifest
from simulator import observe, simulate
from storage import output_transaction, write_flows, write_marginals
from utils import cli_overrides, record_run

logger = logging.getLogger(__name__)


@record_run
def run_simulate(args) -> int:
    cfg = load_run_config(args.config, overrides=cli_overrides(args))
    sim = to_sim_config(cfg.simulation)

    truth = simulate(sim)
    observations = observe(truth, sim)

    with output_transaction(args.out) as staging:
        write_marginals(staging / FILE_OBSERVATIONS, observations.steps, kind="observations")
        write_marginals(staging / FILE_TRUE_MARGINALS, [(m,) for m in truth.true_marginals], kind="true_marginals")
        write_flows(staging / FILE_TRUE_FLOWS, truth.true_flows, kind="true_flows")

        record = build_record(
            "SIMULATE",
            config_hash(cfg),
            cfg.to_dict(),
            hash_outputs(staging),
            seed=sim.rng_seed,
            summary={
                "S": sim.S,
                "T": sim.T,
                "n_particles": sim.n_particles,
                "sensors": len(sim.sensors()),
                "detections": [float(sum(v.sum() for v in step)) for step in observations.steps],
            },
        )
        write_manifest(staging, record)

    logger.info(f"Simulation written to {Path(args.out)}")
    return EXIT_OK
