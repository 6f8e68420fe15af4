"""Sliding-window inference: features, cached similarities, fused label maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .aggregation import class_scores, plain_class_scores
from .aliases import QuerySet, Vocabulary
from .backend import EncoderBackend
from .cache import ImageFeatures, ImageSims
from .correction import corrected_adapter_forward
from .dense import (
    SegmentationResult,
    cosine_similarities,
    fuse_windows,
    global_similarities,
    resize_bilinear,
    short_side_size,
    window_origins,
)
from .errors import ConfigurationError, InputContractError


@dataclass
class InferenceConfig:
    window: int = 224
    stride: int = 112
    short_side: Optional[int] = 336
    logit_scale: Optional[float] = None
    tau: float = 4.0
    aggregation: str = "free_energy"  # free_energy | max | mean | plain
    self_correction: bool = True
    background: str = "query"  # query | threshold
    background_threshold: float = 0.5

    def __post_init__(self):
        if self.aggregation not in ("free_energy", "max", "mean", "plain"):
            raise ConfigurationError(f"unknown aggregation {self.aggregation!r}")
        if self.background not in ("query", "threshold"):
            raise ConfigurationError(f"unknown background strategy {self.background!r}")


def resize_for_inference(image: np.ndarray, short_side: Optional[int]) -> np.ndarray:
    image = np.asarray(image)
    if short_side is None:
        return image.astype(np.float32)
    h, w = short_side_size(image.shape[0], image.shape[1], short_side)
    return resize_bilinear(image, h, w).astype(np.float32)


def extract_features(image: np.ndarray, backend: EncoderBackend, cfg: InferenceConfig,
                     image_id: str = "") -> ImageFeatures:
    """Encode every sliding window of the resized image (backbone, attention, adapter)."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    resized = resize_for_inference(image, cfg.short_side)
    h, w = resized.shape[:2]
    origins = window_origins(h, w, cfg.window, cfg.stride)
    vs, i_s, attns = [], [], []
    grid = None
    for y, x in origins:
        crop = resized[y : y + cfg.window, x : x + cfg.window]
        v, stack = backend.encode_backbone(crop, image_id)
        i = corrected_adapter_forward(v, backend, cfg.self_correction)
        grid = (v.grid_h, v.grid_w)
        vs.append(v.tokens)
        i_s.append(i.tokens)
        attns.append(stack.as_array())
    return ImageFeatures(
        image_id=image_id,
        v=np.stack(vs),
        i=np.stack(i_s),
        attn=np.stack(attns),
        grid=grid,
        origins=np.asarray(origins, dtype=np.int64),
        orig_size=(image.shape[0], image.shape[1]),
        resized_size=(h, w),
        window=cfg.window,
        self_correction=cfg.self_correction,
    )


def compute_sims(features: ImageFeatures, query_set: QuerySet) -> ImageSims:
    emb = query_set.embeddings
    sims = np.stack([cosine_similarities(i, emb) for i in features.i])
    gsims = np.stack([global_similarities(i, emb) for i in features.i])
    return ImageSims(features.image_id, query_set.keys, sims, gsims, features.grid, features.origins,
                     features.orig_size, features.resized_size, features.window)


def fused_logits(sims: ImageSims, query_set: QuerySet, cfg: InferenceConfig, logit_scale: float) -> np.ndarray:
    """Per-class scores at original resolution, [H, W, C]."""
    maps = []
    for s, g in zip(sims.sims, sims.gsims):
        if cfg.aggregation == "plain":
            maps.append(plain_class_scores(s, query_set, logit_scale))
        else:
            maps.append(class_scores(s, g, query_set, logit_scale, cfg.tau, cfg.aggregation))
    canvas = fuse_windows(maps, sims.origins, sims.grid, sims.window, sims.resized_size)
    return resize_bilinear(canvas, *sims.orig_size)


def labels_from_logits(logits: np.ndarray, cfg: InferenceConfig, has_background: bool = False) -> np.ndarray:
    if cfg.background == "threshold" and has_background:
        # query set covers foreground classes only; index 0 is reserved for background
        best = logits.argmax(axis=2)
        top = logits.max(axis=2)
        return np.where(top >= cfg.background_threshold, best + 1, 0).astype(np.int64)
    return logits.argmax(axis=2).astype(np.int64)


def segment_from_sims(sims: ImageSims, query_set: QuerySet, cfg: InferenceConfig, logit_scale: float,
                      has_background: bool = False, keep_logits: bool = False) -> SegmentationResult:
    sel = sims.select(query_set.keys)
    if sel is None:
        raise InputContractError(f"similarity cache for {sims.image_id!r} lacks some vocabulary queries")
    logits = fused_logits(sel, query_set, cfg, logit_scale)
    labels = labels_from_logits(logits, cfg, has_background)
    return SegmentationResult(labels, sims.image_id, logits.astype(np.float32) if keep_logits else None)


def sliding_window_segment(image: np.ndarray, vocabulary, backend: EncoderBackend, window: int = 224,
                           stride: int = 112, short_side: Optional[int] = 336,
                           cfg: Optional[InferenceConfig] = None, image_id: str = "",
                           has_background: bool = False, keep_logits: bool = False) -> SegmentationResult:
    """Full online inference for one image.

    ``vocabulary`` is a :class:`Vocabulary` (embedded here) or a prebuilt
    :class:`QuerySet`. Window logits are upsampled bilinearly, summed over
    overlaps, divided by coverage and resized back before the argmax.
    """
    if cfg is None:
        cfg = InferenceConfig(window=window, stride=stride, short_side=short_side)
    else:
        cfg = InferenceConfig(**{**cfg.__dict__, "window": window, "stride": stride, "short_side": short_side})
    qs = QuerySet.build(vocabulary, backend) if isinstance(vocabulary, Vocabulary) else vocabulary
    scale = cfg.logit_scale if cfg.logit_scale is not None else backend.logit_scale
    feats = extract_features(image, backend, cfg, image_id)
    return segment_from_sims(compute_sims(feats, qs), qs, cfg, scale, has_background, keep_logits)
