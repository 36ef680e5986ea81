import logging
import math
from pathlib import Path

from config import config_hash, load_run_config, to_em_config, to_sim_config
from constants import (
    EXIT_OK, FILE_BETAS, FILE_COSTS, FILE_FLOWS, FILE_MARGINALS, FILE_TRACE, MSG_NEED_T,
)
from em_driver import run_em
from errors import SchemaError
from run_manifest import build_record, file_sha256, hash_outputs, write_manifest
from simulator import emission_cost, gaussian_emission_cost
from storage import output_transaction, read_marginals, write_betas, write_costs, write_flows, write_json, write_marginals
from tree_model import ObservationSet, StateSpace
from utils import cli_overrides, record_run

logger = logging.getLogger(__name__)


def grid_for(S: int, grid_w: int | None) -> StateSpace:
    """Grid state space for S cells; square unless grid_w says otherwise."""
    if grid_w is None:
        grid_w = math.isqrt(S)
        if grid_w * grid_w != S:
            raise SchemaError(f"{S} states do not form a square grid; set estimation.grid_w", key="estimation.grid_w")
    if S % grid_w:
        raise SchemaError(f"{S} states do not fit a grid of width {grid_w}", key="estimation.grid_w")
    return StateSpace.grid(grid_w, S // grid_w)


def emission_for(cfg, space: StateSpace):
    """Emission cost: a fixed sigma if configured, else derived from the simulated sensor layout."""
    est, sim = cfg.estimation, cfg.simulation
    if est.emission_scale is not None:
        return gaussian_emission_cost(space, est.emission_scale, est.eps)
    if space.size != sim.grid_w * sim.grid_w:
        raise SchemaError(
            f"{space.size} states do not match the {sim.grid_w}x{sim.grid_w} simulation grid; set estimation.emission_scale",
            key="estimation.emission_scale",
        )
    return emission_cost(space, to_sim_config(sim).sensors(), sim.decay_len, est.eps)


@record_run
def run_estimate(args) -> int:
    cfg = load_run_config(args.config, overrides=cli_overrides(args))
    est = cfg.estimation

    observations = ObservationSet(read_marginals(args.observations))
    if observations.T < 2:
        raise SchemaError(MSG_NEED_T)
    observations.require_every_step()
    space = grid_for(observations.S, est.grid_w)
    emission = emission_for(cfg, space)

    em_config = to_em_config(est, seed=cfg.simulation.seed)
    logger.info(f"Estimating with {est.variant}: S={space.size}, T={observations.T}, eps={est.eps:g}")
    result = run_em(observations, space, emission, em_config)

    with output_transaction(args.out) as staging:
        write_flows(staging / FILE_FLOWS, result.flows, kind="estimated_flows")
        write_marginals(staging / FILE_MARGINALS, [(m,) for m in result.marginals], kind="estimated_marginals")
        write_costs(staging / FILE_COSTS, result.costs)
        if result.betas is not None:
            write_betas(staging / FILE_BETAS, result.betas, em_config.exponents)
        write_json(staging / FILE_TRACE, {
            "variant": est.variant,
            "converged": result.converged,
            "iterations": result.iterations,
            "trace": result.trace,
        })

        record = build_record(
            "ESTIMATE",
            config_hash(cfg),
            cfg.to_dict(),
            hash_outputs(staging),
            seed=em_config.seed,
            inputs={Path(args.observations).name: file_sha256(args.observations)},
            summary={"variant": est.variant, "iterations": result.iterations, "converged": result.converged},
        )
        write_manifest(staging, record)

    logger.info(f"Estimate written to {Path(args.out)} after {result.iterations} EM iterations")
    return EXIT_OK
