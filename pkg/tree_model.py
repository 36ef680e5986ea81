# tree_model.py
"""
Tree-structured collective model.

A TreeModel is a tree of marginal nodes. Every edge carries a cost matrix
(rows over the first endpoint's states, columns over the second's) and a
subset of nodes carries a fixed, normalized marginal. The HMM-shaped trees
used for flow estimation chain hidden nodes 0..T-1 and hang one leaf per
noisy observation off its time step.
"""

import json
import logging
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Sequence

import networkx as nx
import numpy as np

from constants import MSG_MISSING_STEP, MSG_NEED_T, MSG_ZERO_MASS
from errors import DomainError, SchemaError
from mot_core import as_matrix, as_vector, normalize

logger = logging.getLogger(__name__)

TREE_FORMAT = "popflow.tree/1"
NORMALIZATION_TOL = 1e-9


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class StateSpace:
    """Indexed discrete states with planar coordinates (grid-cell centers)."""
    coords: np.ndarray
    width: int | None = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] == 0:
            raise DomainError(f"coords must have shape (S, 2), got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise DomainError("coords must be finite")
        object.__setattr__(self, "coords", _frozen(coords))

    @classmethod
    def grid(cls, width: int, height: int | None = None) -> "StateSpace":
        """Cell index = row * width + col; cell centers at (col + 0.5, row + 0.5)."""
        height = width if height is None else height
        rows, cols = np.divmod(np.arange(width * height), width)
        return cls(np.column_stack([cols + 0.5, rows + 0.5]), width=width)

    @property
    def size(self) -> int:
        return self.coords.shape[0]

    def distance_matrix(self, power: float = 1.0) -> np.ndarray:
        """D_ij = |x_i - x_j| ** power (Euclidean)."""
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        dist = np.sqrt((diff ** 2).sum(axis=-1))
        return dist ** power

    def nearest_cell(self, point) -> int:
        point = np.asarray(point, dtype=float)
        return int(np.argmin(((self.coords - point) ** 2).sum(axis=1)))


@dataclass(frozen=True)
class ObservationSet:
    """Per time step, zero or more nonnegative count vectors over the states."""
    steps: tuple

    def __post_init__(self):
        steps = tuple(tuple(_frozen(as_vector(v, "observation")) for v in step) for step in self.steps)
        object.__setattr__(self, "steps", steps)

    @classmethod
    def from_arrays(cls, steps: Sequence[Sequence]) -> "ObservationSet":
        return cls(tuple(tuple(step) for step in steps))

    @classmethod
    def single(cls, vectors: Sequence) -> "ObservationSet":
        """One observation per step."""
        return cls(tuple((v,) for v in vectors))

    @property
    def T(self) -> int:
        return len(self.steps)

    @property
    def S(self) -> int:
        for step in self.steps:
            for v in step:
                return v.shape[0]
        raise SchemaError("observation set holds no vectors")

    @property
    def obs_per_step(self) -> list[int]:
        return [len(step) for step in self.steps]

    def require_every_step(self):
        for t, step in enumerate(self.steps):
            if not step:
                raise SchemaError(MSG_MISSING_STEP.format(step=t), step=t)

    def pooled(self, t: int) -> np.ndarray:
        """Mean of the normalized observations at step t."""
        for replica, v in enumerate(self.steps[t]):
            if v.sum() <= 0:
                raise DomainError(MSG_ZERO_MASS.format(step=t, replica=replica), step=t, replica=replica)
        vectors = [normalize(v) for v in self.steps[t]]
        return np.mean(vectors, axis=0)


@dataclass(frozen=True)
class HmmTreeSpec:
    """Layout of an HMM-shaped tree: hidden chain plus observation leaves."""
    T: int
    obs_per_step: tuple
    transition_edges: tuple  # edge id of (t, t+1)
    emission_edges: tuple  # edge id of (t, leaf), in leaf order
    leaves: tuple  # (t, replica, node)

    @property
    def hidden_nodes(self) -> tuple:
        return tuple(range(self.T))


@dataclass(frozen=True)
class TreeReport:
    ok: bool
    kind: str = "ok"
    message: str = ""
    node: int | None = None
    edge: int | None = None

    def __bool__(self):
        return self.ok


@dataclass(frozen=True)
class TreeModel:
    node_sizes: tuple
    edges: tuple
    edge_costs: tuple
    constrained: Mapping = field(default_factory=dict)
    hmm: HmmTreeSpec | None = None

    def __post_init__(self):
        object.__setattr__(self, "node_sizes", tuple(int(s) for s in self.node_sizes))
        object.__setattr__(self, "edges", tuple((int(u), int(v)) for u, v in self.edges))
        object.__setattr__(self, "edge_costs", tuple(_frozen(c) for c in self.edge_costs))
        constrained = {int(j): _frozen(mu) for j, mu in sorted(self.constrained.items())}
        object.__setattr__(self, "constrained", MappingProxyType(constrained))
        if len(self.edge_costs) != len(self.edges):
            raise DomainError("one cost matrix per edge is required")

    @property
    def n_nodes(self) -> int:
        return len(self.node_sizes)

    @property
    def gamma(self) -> tuple:
        """Constrained node ids, sorted."""
        return tuple(self.constrained.keys())

    def graph(self) -> nx.MultiGraph:
        """MultiGraph keyed by edge id, so duplicated edges show up as cycles."""
        g = nx.MultiGraph()
        g.add_nodes_from(range(self.n_nodes))
        for eid, (u, v) in enumerate(self.edges):
            g.add_edge(u, v, key=eid)
        return g

    def neighbors(self) -> dict[int, list[tuple[int, int]]]:
        """node -> [(neighbor, edge id)] in edge-id order."""
        nbrs = {j: [] for j in range(self.n_nodes)}
        for eid, (u, v) in enumerate(self.edges):
            nbrs[u].append((v, eid))
            nbrs[v].append((u, eid))
        return nbrs

    def with_costs(self, edge_costs: Sequence) -> "TreeModel":
        return TreeModel(self.node_sizes, self.edges, tuple(edge_costs), dict(self.constrained), self.hmm)


def build_hmm_tree(
    T: int,
    S: int,
    observations: ObservationSet,
    emission_cost,
    transition_costs: Sequence,
) -> TreeModel:
    """
    Hidden nodes 0..T-1 chained by the transition costs, one leaf per observation
    attached by the emission cost; every leaf is constrained to its normalized
    observation.

    Observations are required at the first and the last step; without them the
    chain end is free and the flow is not identifiable.
    """
    if T < 2:
        raise SchemaError(MSG_NEED_T)
    if observations.T != T:
        raise SchemaError(f"observations cover {observations.T} steps, expected {T}")
    if len(transition_costs) != T - 1:
        raise DomainError(f"expected {T - 1} transition costs, got {len(transition_costs)}")

    emission_cost = as_matrix(emission_cost, "emission_cost")
    if emission_cost.shape != (S, S):
        raise DomainError(f"emission cost has shape {emission_cost.shape}, expected {(S, S)}")
    transition_costs = [as_matrix(c, "transition_cost") for c in transition_costs]
    for t, c in enumerate(transition_costs):
        if c.shape != (S, S):
            raise DomainError(f"transition cost {t} has shape {c.shape}, expected {(S, S)}")

    for t in (0, T - 1):
        if not observations.steps[t]:
            raise SchemaError(MSG_MISSING_STEP.format(step=t), step=t)

    node_sizes = [S] * T
    edges = [(t, t + 1) for t in range(T - 1)]
    costs = list(transition_costs)
    constrained = {}
    leaves = []
    emission_edges = []

    for t, step in enumerate(observations.steps):
        for replica, counts in enumerate(step):
            if counts.shape[0] != S:
                raise DomainError(f"observation at step {t} has length {counts.shape[0]}, expected {S}")
            total = counts.sum()
            if total <= 0:
                raise DomainError(MSG_ZERO_MASS.format(step=t, replica=replica), step=t, replica=replica)

            node = len(node_sizes)
            node_sizes.append(S)
            emission_edges.append(len(edges))
            edges.append((t, node))
            costs.append(emission_cost)
            constrained[node] = normalize(counts)
            leaves.append((t, replica, node))

    hmm = HmmTreeSpec(
        T=T,
        obs_per_step=tuple(observations.obs_per_step),
        transition_edges=tuple(range(T - 1)),
        emission_edges=tuple(emission_edges),
        leaves=tuple(leaves),
    )
    logger.debug(f"Built HMM tree: {len(node_sizes)} nodes, {len(edges)} edges, {len(leaves)} leaves")
    return TreeModel(tuple(node_sizes), tuple(edges), tuple(costs), constrained, hmm)


def validate_tree(model: TreeModel) -> TreeReport:
    """Return the first structural or numerical violation found, or an ok report."""
    n = model.n_nodes
    if n == 0:
        return TreeReport(False, "empty", "tree has no nodes")
    for j, size in enumerate(model.node_sizes):
        if size <= 0:
            return TreeReport(False, "invalid node", f"node {j} has size {size}", node=j)

    for eid, (u, v) in enumerate(model.edges):
        if not (0 <= u < n and 0 <= v < n) or u == v:
            return TreeReport(False, "invalid edge", f"edge {eid} = ({u}, {v})", edge=eid)

    g = model.graph()
    try:
        cycle = nx.find_cycle(g)
    except nx.NetworkXNoCycle:
        cycle = None
    if cycle:
        u, v, eid = cycle[0]
        return TreeReport(False, "cycle", f"cycle through edge {eid} = ({u}, {v})", node=u, edge=eid)

    reachable = nx.node_connected_component(g, 0)
    if len(reachable) != n:
        missing = min(set(range(n)) - reachable)
        return TreeReport(False, "disconnected", f"node {missing} unreachable from node 0", node=missing)

    for eid, ((u, v), cost) in enumerate(zip(model.edges, model.edge_costs)):
        expected = (model.node_sizes[u], model.node_sizes[v])
        if cost.shape != expected:
            return TreeReport(False, "shape mismatch", f"edge {eid} cost {cost.shape}, expected {expected}", edge=eid)
        if not np.all(np.isfinite(cost)):
            return TreeReport(False, "non-finite cost", f"edge {eid} cost has non-finite entries", edge=eid)

    for j, mu in model.constrained.items():
        if not 0 <= j < n:
            return TreeReport(False, "invalid node", f"constrained node {j} does not exist", node=j)
        if mu.shape != (model.node_sizes[j],):
            return TreeReport(False, "shape mismatch", f"marginal of node {j} has shape {mu.shape}", node=j)
        if np.any(mu < 0) or not np.all(np.isfinite(mu)):
            return TreeReport(False, "negative marginal", f"marginal of node {j} is not nonnegative", node=j)
        if abs(mu.sum() - 1.0) > NORMALIZATION_TOL:
            return TreeReport(False, "unnormalized marginal", f"marginal of node {j} sums to {mu.sum()!r}", node=j)

    return TreeReport(True)


def tree_to_json(model: TreeModel) -> str:
    """Serialize to a byte-stable JSON document; floats round-trip exactly."""
    doc = {
        "format": TREE_FORMAT,
        "node_sizes": list(model.node_sizes),
        "edges": [list(e) for e in model.edges],
        "edge_costs": [c.tolist() for c in model.edge_costs],
        "constrained": {str(j): mu.tolist() for j, mu in model.constrained.items()},
        "hmm": None,
    }
    if model.hmm is not None:
        hmm = model.hmm
        doc["hmm"] = {
            "T": hmm.T,
            "obs_per_step": list(hmm.obs_per_step),
            "transition_edges": list(hmm.transition_edges),
            "emission_edges": list(hmm.emission_edges),
            "leaves": [list(leaf) for leaf in hmm.leaves],
        }
    return json.dumps(doc, sort_keys=True, allow_nan=False)


def tree_from_json(text: str) -> TreeModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"tree document is not valid JSON: {e}")
    if doc.get("format") != TREE_FORMAT:
        raise SchemaError(f"unsupported tree format {doc.get('format')!r}")

    hmm = None
    if doc.get("hmm") is not None:
        h = doc["hmm"]
        hmm = HmmTreeSpec(
            T=int(h["T"]),
            obs_per_step=tuple(h["obs_per_step"]),
            transition_edges=tuple(h["transition_edges"]),
            emission_edges=tuple(h["emission_edges"]),
            leaves=tuple(tuple(leaf) for leaf in h["leaves"]),
        )
    return TreeModel(
        node_sizes=tuple(doc["node_sizes"]),
        edges=tuple(tuple(e) for e in doc["edges"]),
        edge_costs=tuple(np.array(c, dtype=float) for c in doc["edge_costs"]),
        constrained={int(j): np.array(mu, dtype=float) for j, mu in doc["constrained"].items()},
        hmm=hmm,
    )
