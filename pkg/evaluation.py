# evaluation.py
"""NMAE over neighbor-restricted transitions and the STAY baseline."""

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from errors import DomainError
from tree_model import StateSpace

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NeighborStructure:
    """mask[i, j] is True when j is in the neighbor set of i (self included)."""
    mask: np.ndarray
    convention: str = "custom"

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
            raise DomainError(f"neighbor mask must be square, got shape {mask.shape}")
        if not np.all(np.diag(mask)):
            raise DomainError("every state must be its own neighbor")
        if not np.array_equal(mask, mask.T):
            raise DomainError("neighbor membership must be symmetric")
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def moore(cls, space: StateSpace) -> "NeighborStructure":
        """Chebyshev distance <= 1 between cell centers: the 8 surrounding cells plus self."""
        diff = np.abs(space.coords[:, None, :] - space.coords[None, :, :])
        mask = (diff <= 1.0 + 1e-9).all(axis=-1)
        return cls(mask, "moore+self (|dx| <= 1 and |dy| <= 1, self-transitions included)")

    @classmethod
    def full(cls, S: int) -> "NeighborStructure":
        return cls(np.ones((S, S), dtype=bool), "all pairs")

    @property
    def size(self) -> int:
        return self.mask.shape[0]


def _check_series(estimate, truth, nbrs: NeighborStructure):
    if len(estimate) != len(truth):
        raise DomainError(f"horizon mismatch: estimate has {len(estimate)} steps, truth has {len(truth)}")
    est = [np.asarray(m, dtype=float) for m in estimate]
    tru = [np.asarray(m, dtype=float) for m in truth]
    for t, (e, m) in enumerate(zip(est, tru)):
        if e.shape != m.shape or m.shape != nbrs.mask.shape:
            raise DomainError(f"shape mismatch at step {t}: {e.shape} vs {m.shape} vs {nbrs.mask.shape}")
    return est, tru


def _rescaled(estimate: np.ndarray, truth: np.ndarray) -> np.ndarray:
    total = estimate.sum()
    return estimate * (truth.sum() / total) if total > 0 else estimate


def step_errors(estimate, truth, nbrs: NeighborStructure) -> tuple[np.ndarray, np.ndarray]:
    """Per-step (absolute error, truth mass) over neighbor pairs, estimate rescaled to the truth's total."""
    est, tru = _check_series(estimate, truth, nbrs)
    errors = np.array([np.abs(_rescaled(e, m) - m)[nbrs.mask].sum() for e, m in zip(est, tru)])
    masses = np.array([m[nbrs.mask].sum() for m in tru])
    return errors, masses


def nmae(estimate, truth, nbrs: NeighborStructure) -> float:
    errors, masses = step_errors(estimate, truth, nbrs)
    denominator = masses.sum()
    if denominator <= 0:
        raise DomainError("truth has no neighbor-restricted mass")
    return float(errors.sum() / denominator)


def nmae_per_step(estimate, truth, nbrs: NeighborStructure) -> np.ndarray:
    errors, masses = step_errors(estimate, truth, nbrs)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(masses > 0, errors / masses, np.nan)


def stay_baseline(marginals) -> list:
    """Diagonal flows: everyone stays where they are."""
    return [np.diag(np.asarray(m, dtype=float)) for m in marginals[:-1]]


@dataclass
class MetricsReport:
    nmae: float
    per_step: list
    neighbors: str
    stay_nmae: float | None = None
    stay_per_step: list | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = {
            "nmae": self.nmae,
            "per_step": self.per_step,
            "neighbors": self.neighbors,
            "config": self.config,
        }
        if self.stay_nmae is not None:
            doc["stay_nmae"] = self.stay_nmae
            doc["stay_per_step"] = self.stay_per_step
        return doc


def metrics_report(estimate, truth, nbrs: NeighborStructure, truth_marginals=None,
                   config: dict | None = None) -> MetricsReport:
    """NMAE of the estimate and, when truth marginals are given, of the STAY baseline."""
    report = MetricsReport(
        nmae=nmae(estimate, truth, nbrs),
        per_step=nmae_per_step(estimate, truth, nbrs).tolist(),
        neighbors=nbrs.convention,
        config=dict(config or {}),
    )
    if truth_marginals is not None:
        stay = stay_baseline(truth_marginals)
        report.stay_nmae = nmae(stay, truth, nbrs)
        report.stay_per_step = nmae_per_step(stay, truth, nbrs).tolist()
        logger.info(f"NMAE {report.nmae:.4f} (STAY {report.stay_nmae:.4f})")
    else:
        logger.info(f"NMAE {report.nmae:.4f}")
    return report


def per_step_table(report: MetricsReport) -> pd.DataFrame:
    table = pd.DataFrame({"time_step": range(len(report.per_step)), "nmae": report.per_step})
    if report.stay_per_step is not None:
        table["stay_nmae"] = report.stay_per_step
    return table


def heatmap_table(space: StateSpace, estimated_marginals, truth_marginals=None) -> pd.DataFrame:
    """Long table (time_step, state, x, y, estimate[, truth]) for plotting marginal panels."""
    frames = []
    for t, est in enumerate(estimated_marginals):
        frame = pd.DataFrame({
            "time_step": t,
            "state": np.arange(space.size),
            "x": space.coords[:, 0],
            "y": space.coords[:, 1],
            "estimate": np.asarray(est, dtype=float),
        })
        if truth_marginals is not None:
            truth = np.asarray(truth_marginals[t], dtype=float)
            frame["truth"] = truth / truth.sum() if truth.sum() > 0 else truth
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)
