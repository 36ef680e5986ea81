import json
from pathlib import Path

import pytest

from config import (
    RunConfig, build_run_config, config_hash, load_run_config, to_em_config, to_sim_config,
)
from errors import SchemaError, StorageError

TINY = Path(__file__).resolve().parent.parent / "data" / "tiny" / "config.json"


def test_defaults():
    cfg = build_run_config()
    assert cfg == RunConfig()
    assert cfg.estimation.variant == "istc"
    assert cfg.evaluation.neighbors == "moore"
    assert cfg.estimation.emission_scale is None
    assert cfg.estimation.mstep_marginals == "observed"


def test_layers_override_in_order():
    doc = {"estimation": {"eps": 2, "gamma": 0.01}}
    env = {"POPFLOW_ESTIMATION__EPS": "3", "POPFLOW_ESTIMATION__VARIANT": "ista", "HOME": "/root"}
    cfg = build_run_config(doc, env)
    assert cfg.estimation.eps == 3.0
    assert cfg.estimation.gamma == 0.01
    assert cfg.estimation.variant == "ista"

    cfg = build_run_config(doc, env, {"estimation": {"eps": 4.0}})
    assert cfg.estimation.eps == 4.0


def test_lists_become_tuples():
    cfg = build_run_config({"simulation": {"theta": [1, 2, 3, 4], "destination": [2.5, 2.5]}})
    assert cfg.simulation.theta == (1, 2, 3, 4)
    assert cfg.simulation.destination == (2.5, 2.5)


@pytest.mark.parametrize("doc, key", [
    ({"estimation": {"epsilon": 1.0}}, "estimation.epsilon"),
    ({"output": {}}, "output"),
    ({"estimation": {"eps": "big"}}, "estimation.eps"),
    ({"estimation": {"outer_iters": 2.5}}, "estimation.outer_iters"),
    ({"evaluation": {"stay": 1}}, "evaluation.stay"),
    ({"simulation": {"T": 1}}, "simulation.T"),
    ({"estimation": {"variant": "newton"}}, "estimation.variant"),
    ({"estimation": {"eps": 0}}, "estimation.eps"),
    ({"evaluation": {"neighbors": "von_neumann"}}, "evaluation.neighbors"),
    ({"estimation": {"emission_scale": -1.0}}, "estimation.emission_scale"),
    ({"estimation": {"mstep_marginals": "flows"}}, "estimation.mstep_marginals"),
])
def test_schema_errors_name_the_key(doc, key):
    with pytest.raises(SchemaError) as info:
        build_run_config(doc)
    assert info.value.details["key"] == key
    assert info.value.exit_code == 2


def test_unknown_environment_section():
    with pytest.raises(SchemaError):
        build_run_config(env={"POPFLOW_PLOTS__DPI": "300"})


def test_load_from_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"simulation": {"grid_w": 5, "seed": 9}}))
    cfg = load_run_config(path, env={})
    assert cfg.simulation.grid_w == 5
    assert cfg.simulation.seed == 9


def test_load_failures(tmp_path):
    with pytest.raises(StorageError):
        load_run_config(tmp_path / "missing.json", env={})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(SchemaError):
        load_run_config(bad, env={})
    bad.write_text("[1, 2]")
    with pytest.raises(SchemaError, match="JSON object"):
        load_run_config(bad, env={})


def test_tiny_config_loads():
    cfg = load_run_config(TINY, env={})
    assert cfg.estimation.grid_w == 2
    assert cfg.evaluation.stay


def test_config_hash():
    a = build_run_config()
    assert config_hash(a) == config_hash(build_run_config())
    assert config_hash(a) != config_hash(build_run_config({"estimation": {"eps": 0.5}}))
    assert len(config_hash(a)) == 64


def test_section_conversion():
    cfg = build_run_config({
        "simulation": {"grid_w": 6, "T": 4, "seed": 21, "attribution": "multi"},
        "estimation": {"variant": "ista", "eps": 0.5, "exponents": [1, 2], "gamma": 0.01, "mstep_marginals": "hidden"},
    })
    sim = to_sim_config(cfg.simulation)
    assert (sim.grid_w, sim.T, sim.rng_seed, sim.attribution) == (6, 4, 21, "multi")
    em = to_em_config(cfg.estimation, seed=cfg.simulation.seed)
    assert (em.variant, em.eps, em.exponents, em.gamma, em.seed) == ("ista", 0.5, (1, 2), 0.01, 21)
    assert em.mstep_marginals == "hidden"
