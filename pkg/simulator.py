# simulator.py
"""
Synthetic crowd on a W x W grid.

Particles step within their Moore neighborhood (or stay) by a log-linear
policy over four features: step length, alignment with an external force,
alignment with the destination, and staying. Sensors detect each particle
independently with probability exp(-distance / decay_len) and report
aggregated counts on the cells they sit in.
"""

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from errors import DomainError, SchemaError
from constants import MSG_NEED_T
from mot_core import eps_value
from tree_model import ObservationSet, StateSpace

logger = logging.getLogger(__name__)

Attribution = Literal["nearest", "multi"]
SensorLayout = Literal["lattice", "per_cell"]

# Moore neighborhood plus the stay move, stay last
MOVES = np.array([(dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dx, dy) != (0, 0)] + [(0, 0)])


@dataclass(frozen=True)
class SimConfig:
    grid_w: int = 30
    n_particles: int = 1000
    T: int = 10
    theta: tuple = (3.0, 5.0, 5.0, 10.0)
    force_dir: tuple = (1.0, 0.0)
    destination: tuple | None = None  # default: top-right cell center
    start_regions: tuple | None = None  # ((cells, fraction), ...); default: two bottom 3x3 blocks
    sensor_positions: tuple | None = None
    sensor_layout: SensorLayout = "lattice"
    sensors_per_side: int = 8
    decay_len: float = 1.5
    attribution: Attribution = "nearest"
    n_replicas: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if self.T < 2:
            raise SchemaError(MSG_NEED_T)
        if self.grid_w < 1 or self.n_particles < 1 or self.n_replicas < 1:
            raise SchemaError("grid_w, n_particles and n_replicas must be positive")
        if len(self.theta) != 4 or not np.all(np.isfinite(self.theta)):
            raise SchemaError(f"theta must hold 4 finite reals, got {self.theta}")
        if not self.decay_len > 0:
            raise SchemaError(f"decay_len must be positive, got {self.decay_len}")
        if self.attribution not in ("nearest", "multi"):
            raise SchemaError(f"unknown attribution {self.attribution!r}")
        if self.sensor_layout not in ("lattice", "per_cell"):
            raise SchemaError(f"unknown sensor_layout {self.sensor_layout!r}")
        force = np.asarray(self.force_dir, dtype=float)
        norm = np.linalg.norm(force)
        if force.shape != (2,) or norm == 0:
            raise SchemaError("force_dir must be a nonzero 2-vector")
        object.__setattr__(self, "force_dir", tuple(force / norm))
        total = sum(f for _, f in self.regions())
        if abs(total - 1.0) > 1e-9:
            raise SchemaError(f"start fractions must sum to 1, got {total}")

    @property
    def S(self) -> int:
        return self.grid_w * self.grid_w

    def state_space(self) -> StateSpace:
        return StateSpace.grid(self.grid_w)

    def target(self) -> np.ndarray:
        if self.destination is not None:
            return np.asarray(self.destination, dtype=float)
        return np.array([self.grid_w - 0.5, self.grid_w - 0.5])

    def regions(self) -> list:
        if self.start_regions is not None:
            return [(tuple(int(c) for c in cells), float(f)) for cells, f in self.start_regions]
        w = self.grid_w
        side = min(3, w)
        mid = max(0, min(w // 2 - 1, w - side))
        left = tuple(r * w + c for r in range(side) for c in range(side))
        middle = tuple(r * w + c for r in range(side) for c in range(mid, mid + side))
        return [(left, 0.5), (middle, 0.5)]

    def sensors(self) -> np.ndarray:
        """Sensor coordinates, shape (K, 2)."""
        if self.sensor_positions is not None:
            return np.asarray(self.sensor_positions, dtype=float).reshape(-1, 2)
        if self.sensor_layout == "per_cell":
            return self.state_space().coords.copy()
        return sensor_lattice(self.grid_w, self.sensors_per_side)


@dataclass
class GroundTruth:
    trajectories: np.ndarray  # (n_particles, T) cell indices
    true_flows: list  # T-1 count matrices
    true_marginals: list  # T count vectors
    meta: dict = field(default_factory=dict)


def sensor_lattice(grid_w: int, per_side: int = 8) -> np.ndarray:
    """per_side x per_side sensors at grid_w / per_side * (k + 0.5) on both axes."""
    ticks = grid_w / per_side * (np.arange(per_side) + 0.5)
    xs, ys = np.meshgrid(ticks, ticks)
    return np.column_stack([xs.ravel(), ys.ravel()])


def sensor_cells(config: SimConfig) -> np.ndarray:
    space = config.state_space()
    return np.array([space.nearest_cell(p) for p in config.sensors()], dtype=int)


def _features(steps: np.ndarray, origin: np.ndarray, config: SimConfig) -> np.ndarray:
    """(n_moves, 4) feature rows: -|step|, cos(step, force), cos(step, dest - x), stay."""
    lengths = np.linalg.norm(steps, axis=1)
    moving = lengths > 0
    force = np.asarray(config.force_dir)
    to_dest = config.target() - origin
    dest_norm = np.linalg.norm(to_dest)

    cos_force = np.zeros(len(steps))
    cos_dest = np.zeros(len(steps))
    cos_force[moving] = steps[moving] @ force / lengths[moving]
    if dest_norm > 0:
        cos_dest[moving] = steps[moving] @ to_dest / (lengths[moving] * dest_norm)
    return np.column_stack([-lengths, cos_force, cos_dest, (~moving).astype(float)])


def feasible_moves(state: int, grid_w: int) -> tuple[np.ndarray, np.ndarray]:
    """(target cells, step vectors) of moves that stay on the grid, stay move last."""
    row, col = divmod(state, grid_w)
    cols = col + MOVES[:, 0]
    rows = row + MOVES[:, 1]
    ok = (cols >= 0) & (cols < grid_w) & (rows >= 0) & (rows < grid_w)
    return rows[ok] * grid_w + cols[ok], MOVES[ok].astype(float)


def move_probabilities(state: int, config: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    """(target cells, probabilities) of the log-linear policy at one cell."""
    if not 0 <= state < config.S:
        raise DomainError(f"state {state} is outside the {config.grid_w}x{config.grid_w} grid")
    targets, steps = feasible_moves(state, config.grid_w)
    origin = config.state_space().coords[state]
    logits = _features(steps, origin, config) @ np.asarray(config.theta, dtype=float)
    logits -= logits.max()
    probs = np.exp(logits)
    return targets, probs / probs.sum()


def transition_distribution(state: int, config: SimConfig) -> np.ndarray:
    """Dense probability vector over all S cells, supported on the Moore neighborhood and the cell itself."""
    targets, probs = move_probabilities(state, config)
    dist = np.zeros(config.S)
    dist[targets] = probs
    return dist


def transition_table(config: SimConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Padded (S, 9) tables of targets and probabilities, plus the number of valid moves per cell."""
    S = config.S
    targets = np.zeros((S, len(MOVES)), dtype=int)
    probs = np.zeros((S, len(MOVES)))
    counts = np.zeros(S, dtype=int)
    for s in range(S):
        cells, p = move_probabilities(s, config)
        n = len(cells)
        targets[s, :n] = cells
        probs[s, :n] = p
        counts[s] = n
    return targets, probs, counts


def _rng(config: SimConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.rng_seed, stream]))


def particle_uniforms(config: SimConfig) -> np.ndarray:
    """
    (N, T + 1) uniforms, row i drawn from its own stream spawned off the seed,
    so particle i moves the same way whatever n_particles is.
    """
    streams = np.random.SeedSequence([config.rng_seed, 0]).spawn(config.n_particles)
    return np.stack([np.random.default_rng(s).random(config.T + 1) for s in streams])


def initial_states(config: SimConfig, u_region: np.ndarray, u_cell: np.ndarray) -> np.ndarray:
    """Start cells by inverse CDF: a region by its fraction, then a uniform cell in it."""
    regions = config.regions()
    fractions = np.array([f for _, f in regions])
    edges = np.cumsum(fractions / fractions.sum())
    picks = np.minimum(np.searchsorted(edges, u_region, side="right"), len(regions) - 1)
    states = np.empty(len(u_region), dtype=int)
    for k, (cells, _) in enumerate(regions):
        idx = np.flatnonzero(picks == k)
        cells = np.asarray(cells)
        states[idx] = cells[np.minimum((u_cell[idx] * len(cells)).astype(int), len(cells) - 1)]
    return states


def simulate(config: SimConfig) -> GroundTruth:
    """Move every particle T-1 times; flows and marginals are exact counts of the trajectories."""
    S, N, T = config.S, config.n_particles, config.T
    uniforms = particle_uniforms(config)
    targets, probs, n_valid = transition_table(config)
    cumulative = np.cumsum(probs, axis=1)

    traj = np.empty((N, T), dtype=int)
    traj[:, 0] = initial_states(config, uniforms[:, 0], uniforms[:, 1])
    for t in range(1, T):
        current = traj[:, t - 1]
        u = uniforms[:, t + 1]
        choice = (cumulative[current] < u[:, None]).sum(axis=1)
        choice = np.minimum(choice, n_valid[current] - 1)
        traj[:, t] = targets[current, choice]

    marginals = [np.bincount(traj[:, t], minlength=S).astype(float) for t in range(T)]
    flows = [
        np.bincount(traj[:, t] * S + traj[:, t + 1], minlength=S * S).reshape(S, S).astype(float)
        for t in range(T - 1)
    ]
    logger.info(f"Simulated {N} particles on a {config.grid_w}x{config.grid_w} grid for {T} steps")
    return GroundTruth(traj, flows, marginals, meta={"seed": config.rng_seed})


def detection_probabilities(positions: np.ndarray, config: SimConfig) -> np.ndarray:
    """(n_positions, K) matrix exp(-|x - sensor_k| / decay_len)."""
    sensors = config.sensors()
    dist = np.linalg.norm(positions[:, None, :] - sensors[None, :, :], axis=-1)
    return np.exp(-dist / config.decay_len)


def observe(truth: GroundTruth, config: SimConfig) -> ObservationSet:
    """
    Sensor-aggregated counts per step and replica. In "nearest" mode a detected
    particle counts once, at the nearest sensor that detected it; in "multi"
    mode every detecting sensor counts it.
    """
    rng = _rng(config, 1)
    space = config.state_space()
    cells_of_sensor = sensor_cells(config)
    sensors = config.sensors()
    S = config.S

    steps = []
    for t in range(truth.trajectories.shape[1]):
        positions = space.coords[truth.trajectories[:, t]]
        p_detect = detection_probabilities(positions, config)
        dist = np.linalg.norm(positions[:, None, :] - sensors[None, :, :], axis=-1)
        replicas = []
        for _ in range(config.n_replicas):
            detected = rng.random(p_detect.shape) < p_detect
            if config.attribution == "multi":
                hits = np.broadcast_to(cells_of_sensor, detected.shape)[detected]
            else:
                masked = np.where(detected, dist, np.inf)
                nearest = masked.argmin(axis=1)
                seen = detected.any(axis=1)
                hits = cells_of_sensor[nearest[seen]]
            replicas.append(np.bincount(hits, minlength=S).astype(float))
        steps.append(tuple(replicas))

    logger.info(f"Observed {len(steps)} steps with {len(sensors)} sensors ({config.attribution} attribution)")
    return ObservationSet(tuple(steps))


def expected_detections(counts, config: SimConfig, mode: Attribution | None = None) -> float:
    """
    Closed-form expected number of counts for a population vector:
    multi mode sum_x counts(x) sum_k p_xk; nearest mode sum_x counts(x) (1 - prod_k (1 - p_xk)).
    """
    mode = config.attribution if mode is None else mode
    counts = np.asarray(counts, dtype=float)
    p = detection_probabilities(config.state_space().coords, config)
    per_cell = p.sum(axis=1) if mode == "multi" else 1.0 - np.prod(1.0 - p, axis=1)
    return float(counts @ per_cell)


def coverage_radius(space: StateSpace, sensors: np.ndarray) -> float:
    """Largest distance from a cell center to its nearest sensor."""
    dist = np.linalg.norm(space.coords[:, None, :] - np.asarray(sensors)[None, :, :], axis=-1)
    return float(dist.min(axis=1).max())


def gaussian_emission_cost(space: StateSpace, sigma: float, eps) -> np.ndarray:
    """eps * d^2 / sigma^2 between cell centers."""
    if not sigma > 0:
        raise DomainError(f"emission sigma must be positive, got {sigma}")
    return eps_value(eps) * space.distance_matrix(power=2.0) / sigma ** 2


def emission_cost(space: StateSpace, sensors, decay_len: float, eps) -> np.ndarray:
    """Gaussian emission cost with sigma = max(0.5, min(decay_len, coverage radius))."""
    sigma = max(0.5, min(float(decay_len), coverage_radius(space, sensors)))
    return gaussian_emission_cost(space, sigma, eps)
