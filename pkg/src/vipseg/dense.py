"""Dense image-text activation maps, resampling helpers and window layout."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .backend import PatchGrid, TextQuery, unit_rows
from .errors import InputContractError
from .kernels import softmax_rows

log = logging.getLogger(__name__)

ROW_TOL = 1e-5


@dataclass
class ActivationMap:
    """Per-patch scores, one column per query or class."""

    values: np.ndarray
    grid_h: int
    grid_w: int
    column_labels: list = field(default_factory=list)
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.grid_h * self.grid_w:
            raise InputContractError(
                f"map of shape {self.values.shape} does not match grid {self.grid_h}x{self.grid_w}"
            )
        if self.column_labels and len(self.column_labels) != self.values.shape[1]:
            raise InputContractError("column_labels length differs from column count")
        if self.normalized:
            v = self.values
            if (v < -ROW_TOL).any() or (v > 1 + ROW_TOL).any() or np.abs(v.sum(axis=1) - 1).max() > ROW_TOL:
                raise InputContractError("normalized map must have rows on the simplex")

    @property
    def hw(self) -> int:
        return self.values.shape[0]

    def column(self, k: int) -> np.ndarray:
        return self.values[:, k]

    def labels(self) -> np.ndarray:
        return self.values.argmax(axis=1).reshape(self.grid_h, self.grid_w)


@dataclass
class SegmentationResult:
    labels: np.ndarray
    image_id: str = ""
    logits: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.logits is not None and self.logits.shape[:2] != self.labels.shape:
            raise InputContractError("logits and labels disagree in spatial size")


def _cosines(tokens: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.float64)
    norms = np.linalg.norm(t, axis=1)
    if (norms == 0).any():
        log.warning("%d zero-norm patch tokens treated as cosine 0", int((norms == 0).sum()))
    return unit_rows(t) @ unit_rows(np.asarray(embeddings, dtype=np.float64)).T


def cosine_similarities(tokens: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    """Patch-by-query cosine matrix as float32 (the precision caches store).

    Zero-norm tokens get cosine 0 against every query.
    """
    return _cosines(tokens, embeddings).astype(np.float32)


def _global_cosines(tokens: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    g = np.asarray(tokens, dtype=np.float64).mean(axis=0, keepdims=True)
    if not np.linalg.norm(g) > 0:
        log.warning("zero global feature; saliency weights fall back to uniform")
    return (unit_rows(g) @ unit_rows(np.asarray(embeddings, dtype=np.float64)).T)[0]


def global_similarities(tokens: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    """Cosine between the mean-pooled token and each query, float32."""
    return _global_cosines(tokens, embeddings).astype(np.float32)


def probabilities_from_sims(sims: np.ndarray, logit_scale: float) -> np.ndarray:
    return softmax_rows(logit_scale * np.asarray(sims, dtype=np.float64))


def compute_logits(i: PatchGrid, queries: Sequence[TextQuery], logit_scale: float) -> ActivationMap:
    """Softmax over queries of ``logit_scale * cosine(I, T)``."""
    if not queries:
        raise InputContractError("at least one query is required")
    if logit_scale <= 0:
        raise InputContractError("logit_scale must be positive")
    emb = np.stack([q.embedding for q in queries])
    return ActivationMap(
        probabilities_from_sims(_cosines(i.tokens, emb), logit_scale),
        i.grid_h,
        i.grid_w,
        [(q.class_index, q.kind.value) for q in queries],
        normalized=True,
    )


# resampling ------------------------------------------------------------------


def interp_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Linear interpolation weights with half-pixel centres (``align_corners=False``)."""
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    m = np.zeros((out_size, in_size))
    rows = np.arange(out_size)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an ``[H, W]`` or ``[H, W, C]`` array."""
    x = np.asarray(x)
    h, w = x.shape[:2]
    if (h, w) == (out_h, out_w):
        return x.astype(np.float64, copy=True)
    ry = interp_matrix(out_h, h)
    rx = interp_matrix(out_w, w)
    if x.ndim == 2:
        return ry @ x.astype(np.float64) @ rx.T
    return np.einsum("ih,hwc,jw->ijc", ry, x.astype(np.float64), rx, optimize=True)


def short_side_size(h: int, w: int, short_side: int) -> tuple:
    s = short_side / min(h, w)
    return max(1, int(round(h * s))), max(1, int(round(w * s)))


def window_origins(h: int, w: int, window: int, stride: int) -> list:
    """Top-left corners of the sliding windows in canonical (row-major) order."""
    if window > min(h, w):
        raise InputContractError(f"window {window} larger than image {h}x{w}")
    if stride <= 0 or stride > window:
        raise InputContractError(f"stride must lie in (0, window], got {stride}")
    ny = max(h - window + stride - 1, 0) // stride + 1
    nx = max(w - window + stride - 1, 0) // stride + 1
    out = []
    for iy in range(ny):
        for ix in range(nx):
            out.append((min(iy * stride, h - window), min(ix * stride, w - window)))
    return out


def fuse_windows(maps: Sequence[np.ndarray], origins, grid, window: int, size: tuple) -> np.ndarray:
    """Upsample per-window patch maps and average overlaps on the resized canvas.

    ``maps`` holds [hw, C] arrays; returns [H, W, C].
    """
    h, w = size
    n_cls = maps[0].shape[1]
    acc = np.zeros((h, w, n_cls))
    count = np.zeros((h, w, 1))
    gh, gw = grid
    ry = interp_matrix(window, gh)
    rx = interp_matrix(window, gw)
    for m, (y, x) in zip(maps, origins):
        up = np.einsum("ih,hwc,jw->ijc", ry, m.reshape(gh, gw, n_cls), rx, optimize=True)
        acc[y : y + window, x : x + window] += up
        count[y : y + window, x : x + window] += 1.0
    return acc / count
