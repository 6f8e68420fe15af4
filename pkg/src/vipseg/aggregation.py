"""Saliency-weighted free-energy fusion of per-alias maps into per-class maps."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from . import kernels
from .aliases import QuerySet
from .backend import PatchGrid, TextQuery
from .dense import ActivationMap, _global_cosines, probabilities_from_sims
from .errors import InputContractError

log = logging.getLogger(__name__)

MODES = {
    "free_energy": kernels.AGG_FREE_ENERGY,
    "max": kernels.AGG_MAX,
    "mean": kernels.AGG_MEAN,
}


def saliency_factors(i: PatchGrid, class_queries: Sequence[TextQuery]) -> np.ndarray:
    """Softmax over cosines between the mean-pooled adapter token and each query."""
    if not class_queries:
        raise InputContractError("a class needs at least one query")
    emb = np.stack([q.embedding for q in class_queries])
    g = _global_cosines(i.tokens, emb)
    return kernels.softmax_rows(g[None, :])[0]


def modulate(m_hat_c, delta) -> np.ndarray:
    values = m_hat_c.values if isinstance(m_hat_c, ActivationMap) else np.asarray(m_hat_c, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != delta.shape[0]:
        raise InputContractError(f"map {values.shape} and weights {delta.shape} disagree")
    return values * delta[None, :]


def free_energy_aggregate(s, tau: float = 4.0) -> np.ndarray:
    """``(1/tau) * log sum_k exp(tau * s[:, k])`` per row."""
    if tau <= 0:
        raise InputContractError("tau must be positive")
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] == 0:
        raise InputContractError("expected a non-empty [hw, K] matrix")
    return kernels.free_energy(s, float(tau))


def assemble_class_map(per_class, grid_h: int, grid_w: int) -> ActivationMap:
    """Stack one fused column per class, without renormalising across classes."""
    cols = list(per_class)
    if not cols:
        raise InputContractError("no class columns")
    if any(c is None for c in cols):
        raise InputContractError("missing class column")
    values = np.stack([np.asarray(c, dtype=np.float64) for c in cols], axis=1)
    return ActivationMap(values, grid_h, grid_w, [(c, "class") for c in range(len(cols))])


def class_scores(sims: np.ndarray, gsims: np.ndarray, query_set: QuerySet, logit_scale: float,
                 tau: float = 4.0, mode: str = "free_energy") -> np.ndarray:
    """Per-class map [hw, C] from cached cosines over the whole query set.

    Probabilities are a softmax over the union of every class's queries; each
    class then fuses its own slice.
    """
    if mode not in MODES:
        raise InputContractError(f"unknown aggregation mode {mode!r}")
    probs = probabilities_from_sims(sims, logit_scale)
    return kernels.aggregate_groups(probs, np.asarray(gsims, dtype=np.float64), query_set.group_ptr,
                                    float(tau), MODES[mode])


def plain_class_scores(sims: np.ndarray, query_set: QuerySet, logit_scale: float) -> np.ndarray:
    """Softmax over the canonical names only; no aliases, no fusion."""
    return probabilities_from_sims(np.asarray(sims)[:, query_set.anchor_columns], logit_scale)
