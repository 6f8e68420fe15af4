"""Visual-guided scoring and filtering of candidate aliases and templates.

Each candidate is scored on every image by substituting it for its class's
canonical name: a grounding score (soft IoU between the candidate's map and
its random-walk refinement over the backbone affinity) and a certainty score
(mean class entropy over the candidate's high-activation patches). A
candidate survives only if it beats its canonical anchor on both.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import kernels
from .aliases import QuerySet, Vocabulary
from .backend import AttentionStack, QueryKind, TextQuery
from .dense import ActivationMap
from .errors import ConfigurationError, InputContractError
from .templates import FOUNDATIONAL_TEMPLATES

log = logging.getLogger(__name__)


@dataclass
class ScoringConfig:
    alpha: float = 2.0
    beta: int = 2
    threshold: float = 0.4
    logit_scale: float = 100.0
    min_support: int = 5
    vg_scope: str = "restricted"  # or "global": sums over all patches, threshold only gates inclusion

    def __post_init__(self):
        if self.alpha < 1:
            raise ConfigurationError("alpha must be >= 1")
        if int(self.beta) != self.beta or self.beta < 0:
            raise ConfigurationError("beta must be a non-negative integer")
        if self.vg_scope not in ("restricted", "global"):
            raise ConfigurationError(f"unknown vg_scope {self.vg_scope!r}")
        self.beta = int(self.beta)


# per-image operations --------------------------------------------------------


@dataclass
class AffinityMatrix:
    values: np.ndarray
    alpha_applied: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if (self.values < 0).any():
            raise InputContractError("affinity must be non-negative")


def aggregate_affinity(stack) -> AffinityMatrix:
    """Mean of the backbone attention layers."""
    layers = stack.as_array() if isinstance(stack, AttentionStack) else np.asarray(stack)
    if layers.ndim != 3 or layers.shape[0] < 1 or layers.shape[1] != layers.shape[2]:
        raise InputContractError(f"expected [L, hw, hw] attention, got {layers.shape}")
    return AffinityMatrix(layers.astype(np.float64).mean(axis=0))


def transition(a: AffinityMatrix, alpha: float) -> np.ndarray:
    w, isolated = kernels.transition_matrix(a.values, float(alpha))
    if isolated:
        log.warning("%d isolated patches in affinity; using self-loops", isolated)
    return w


def random_walk_refine(a: AffinityMatrix, m: ActivationMap, alpha: float = 2.0, beta: int = 2) -> ActivationMap:
    """``W^beta @ M`` with ``W`` the row-normalised elementwise power ``A**alpha``."""
    if a.values.shape != (m.hw, m.hw):
        raise InputContractError("affinity and activation map disagree in patch count")
    w = transition(a, alpha)
    out = kernels.propagate(w, m.values, int(beta))
    return ActivationMap(out, m.grid_h, m.grid_w, list(m.column_labels), normalized=m.normalized)


def vg_score_image(m: ActivationMap, m_tilde: ActivationMap, class_col: int, threshold: float = 0.4,
                   scope: str = "restricted") -> Optional[float]:
    """Soft IoU of a column with its refinement; ``None`` when no patch reaches ``threshold``."""
    if m.values.shape != m_tilde.values.shape:
        raise InputContractError("maps differ in shape")
    a = m.values[:, class_col]
    b = m_tilde.values[:, class_col]
    region = a >= threshold
    if not region.any():
        return None
    if scope == "restricted":
        a, b = a[region], b[region]
    inter = float((a * b).sum())
    den = float(a.sum() + b.sum()) - inter
    return inter / den if den > 0 else 0.0


def sc_score_image(m: ActivationMap, class_col: int, threshold: float = 0.4) -> Optional[float]:
    """Mean row entropy over patches whose ``class_col`` reaches ``threshold``."""
    region = m.values[:, class_col] >= threshold
    if not region.any():
        return None
    p = m.values[region]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(-plogp.sum(axis=1).mean())


# records --------------------------------------------------------------------


class Decision(str, Enum):
    PENDING = "pending"
    ANCHOR = "anchor"
    RETAINED = "retained"
    DROPPED = "dropped"


@dataclass
class AliasScoreRecord:
    query: TextQuery
    vg_sum: float = 0.0
    vg_count: int = 0
    sc_sum: float = 0.0
    sc_count: int = 0
    decision: Decision = Decision.PENDING
    reason: str = ""

    @property
    def is_anchor(self) -> bool:
        return self.query.kind is QueryKind.CANONICAL

    @property
    def vg_score(self) -> Optional[float]:
        return self.vg_sum / self.vg_count if self.vg_count else None

    @property
    def sc_score(self) -> Optional[float]:
        return self.sc_sum / self.sc_count if self.sc_count else None

    def add(self, vg: Optional[float], sc: Optional[float]) -> None:
        if vg is not None:
            self.vg_sum += vg
            self.vg_count += 1
        if sc is not None:
            self.sc_sum += sc
            self.sc_count += 1


@dataclass
class ScoringView:
    """One scored view (a sliding window): cosines for every query plus backbone attention."""

    sims: np.ndarray        # [hw, Q]
    attention: np.ndarray   # [L, hw, hw]


def score_views(views: Sequence[ScoringView], query_set: QuerySet, cfg: ScoringConfig):
    """Per-image scores for every query; returns ``(vg, sc)`` arrays with NaN where undefined.

    Window scores are averaged into one image-level value per query.
    """
    anchors = query_set.anchor_columns
    cls = query_set.class_of
    vg_acc = np.zeros(len(query_set))
    sc_acc = np.zeros(len(query_set))
    n_def = np.zeros(len(query_set))
    for view in views:
        logits = cfg.logit_scale * np.asarray(view.sims, dtype=np.float64)
        w = transition(aggregate_affinity(view.attention), cfg.alpha)
        if cfg.vg_scope == "restricted":
            vg, sc, count = kernels.score_substitutions(logits[:, anchors], logits, cls, w, cfg.beta, cfg.threshold)
        else:
            vg, sc, count = _score_definitional(logits, anchors, cls, w, cfg)
        ok = count > 0
        vg_acc[ok] += vg[ok]
        sc_acc[ok] += sc[ok]
        n_def[ok] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n_def > 0, vg_acc / n_def, np.nan), np.where(n_def > 0, sc_acc / n_def, np.nan)


def _substituted_map(logits, anchors, cls, q):
    cols = anchors.copy()
    cols[cls[q]] = q
    probs = kernels.softmax_rows(logits[:, cols])
    return ActivationMap(probs, 1, probs.shape[0], normalized=True)


def _score_definitional(logits, anchors, cls, w, cfg):
    """Column-by-column scoring through the public per-image operations."""
    q_n = logits.shape[1]
    vg = np.full(q_n, np.nan)
    sc = np.full(q_n, np.nan)
    count = np.zeros(q_n, dtype=np.int64)
    for q in range(q_n):
        m = _substituted_map(logits, anchors, cls, q)
        col = int(cls[q])
        mt = ActivationMap(kernels.propagate(w, m.values, cfg.beta), 1, m.hw)
        v = vg_score_image(m, mt, col, cfg.threshold, cfg.vg_scope)
        s = sc_score_image(m, col, cfg.threshold)
        if v is not None:
            vg[q], sc[q] = v, s
            count[q] = int((m.values[:, col] >= cfg.threshold).sum())
    return vg, sc, count


def score_vocabulary(samples: Iterable, query_set: QuerySet, cfg: ScoringConfig, jobs: int = 1,
                     report: Optional[list] = None) -> list:
    """Accumulate per-image scores over a dataset and finalise one record per query.

    ``samples`` yields ``(image_id, views)`` where ``views`` is a list of
    :class:`ScoringView` or ``None`` when the image's cache is missing (the
    image is skipped and noted in ``report``).
    """
    records = [AliasScoreRecord(q) for q in query_set.queries]
    report = report if report is not None else []

    def work(item):
        image_id, views = item
        if views is None:
            return image_id, None
        return image_id, score_views(views, query_set, cfg)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(work, samples))
    else:
        results = [work(s) for s in samples]

    for image_id, res in results:
        if res is None:
            report.append({"image": image_id, "reason": "missing feature cache"})
            continue
        vg, sc = res
        for rec, v, s in zip(records, vg, sc):
            rec.add(None if math.isnan(v) else float(v), None if math.isnan(s) else float(s))

    for rec in records:
        if rec.is_anchor:
            rec.decision = Decision.ANCHOR
        elif rec.vg_count == 0:
            rec.decision = Decision.DROPPED
            rec.reason = "no-support"
    return records


def filter_aliases(records: Sequence[AliasScoreRecord], min_support: int = 0) -> dict:
    """Keep candidates beating their anchor on both scores (strictly).

    Updates each record's decision and returns ``{class_index: [surfaces]}`` in
    record order. Fixed aliases are neither anchors nor candidates and are not
    expected here.
    """
    anchors = {}
    for rec in records:
        if rec.is_anchor:
            anchors[rec.query.class_index] = rec
    retained = {c: [] for c in anchors}
    for rec in records:
        if rec.is_anchor:
            rec.decision = Decision.ANCHOR
            continue
        c = rec.query.class_index
        anchor = anchors.get(c)
        if anchor is None:
            raise ConfigurationError(f"class {c} has no anchor record")
        if anchor.vg_count == 0 or anchor.sc_count == 0:
            raise ConfigurationError(
                f"anchor {anchor.query.surface!r} has no supporting image; check dataset and threshold"
            )
        if rec.vg_count == 0:
            rec.decision, rec.reason = Decision.DROPPED, "no-support"
        elif rec.vg_count < min_support:
            rec.decision, rec.reason = Decision.DROPPED, f"support {rec.vg_count} < {min_support}"
        elif rec.vg_score > anchor.vg_score and rec.sc_score < anchor.sc_score:
            rec.decision, rec.reason = Decision.RETAINED, ""
            retained[c].append(rec.query.surface)
        else:
            rec.decision = Decision.DROPPED
            rec.reason = "vg" if rec.vg_score <= anchor.vg_score else "sc"
            if rec.vg_score <= anchor.vg_score and rec.sc_score >= anchor.sc_score:
                rec.reason = "vg+sc"
    return retained


def write_score_report(path, records: Sequence[AliasScoreRecord], class_names: Sequence[str],
                       header: Optional[dict] = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for k, v in (header or {}).items():
            fh.write(f"# {k}: {v}\n")
        writer = csv.writer(fh)
        writer.writerow(["class", "surface", "kind", "vg_score", "vg_count", "sc_score", "sc_count", "decision"])
        for r in records:
            writer.writerow([
                class_names[r.query.class_index], r.query.surface, r.query.kind.value,
                "" if r.vg_score is None else f"{r.vg_score:.6f}", r.vg_count,
                "" if r.sc_score is None else f"{r.sc_score:.6f}", r.sc_count,
                r.decision.value,
            ])


# templates ------------------------------------------------------------------


def template_scores(template: str, vocab: Vocabulary, backend, feature_views, cfg: ScoringConfig):
    """Mean grounding and certainty over every query of ``vocab`` written with ``template`` alone.

    ``feature_views`` is a list of ``(image_id, [(tokens_I [hw, d], attention), ...])``.
    """
    from .dense import cosine_similarities

    qs = QuerySet.build(vocab, backend, [template])
    samples = [
        (img, [ScoringView(cosine_similarities(i, qs.embeddings), attn) for i, attn in views])
        for img, views in feature_views
    ]
    records = score_vocabulary(samples, qs, cfg)
    vg = [r.vg_score for r in records if r.vg_count]
    sc = [r.sc_score for r in records if r.sc_count]
    if not vg:
        return None, None
    return float(np.mean(vg)), float(np.mean(sc))


def filter_templates(candidate_templates: Sequence[str], reference_templates: Sequence[str],
                     filtered_vocab: Vocabulary, feature_views, backend, cfg: ScoringConfig,
                     report: Optional[list] = None):
    """Templates that beat the reference set's mean scores, plus the two foundational ones."""
    if not reference_templates:
        raise InputContractError("reference template set is empty")
    ref = [template_scores(t, filtered_vocab, backend, feature_views, cfg) for t in reference_templates]
    ref = [r for r in ref if r[0] is not None]
    if not ref:
        raise ConfigurationError("no reference template has any supporting image")
    ref_vg = float(np.mean([r[0] for r in ref]))
    ref_sc = float(np.mean([r[1] for r in ref]))
    kept = list(FOUNDATIONAL_TEMPLATES)
    for t in candidate_templates:
        vg, sc = template_scores(t, filtered_vocab, backend, feature_views, cfg)
        ok = vg is not None and vg > ref_vg and sc < ref_sc
        if report is not None:
            report.append({"template": t, "vg": vg, "sc": sc, "ref_vg": ref_vg, "ref_sc": ref_sc, "kept": ok})
        if ok and t not in kept:
            kept.append(t)
    return kept
