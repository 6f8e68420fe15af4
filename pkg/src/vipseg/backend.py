"""Encoder abstraction: backbone tokens, attention maps, adapter, text tower."""

from __future__ import annotations

import abc
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import BackendFaultError, InputContractError

ROW_TOL = 1e-5
NORM_TOL = 1e-5


class Source(str, Enum):
    BACKBONE = "backbone"
    ADAPTER = "adapter"


class QueryKind(str, Enum):
    CANONICAL = "canonical"
    ALIAS = "alias"
    TEMPLATE_INSTANCE = "template_instance"


@dataclass
class PatchGrid:
    """Dense patch tokens laid out row-major over a ``grid_h x grid_w`` grid."""

    tokens: np.ndarray
    grid_h: int
    grid_w: int
    source: Source = Source.BACKBONE
    image_id: str = ""

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float32)
        self.source = Source(self.source)
        if self.tokens.ndim != 2:
            raise InputContractError(f"tokens must be 2-D, got shape {self.tokens.shape}")
        if self.tokens.shape[0] != self.grid_h * self.grid_w:
            raise InputContractError(
                f"{self.tokens.shape[0]} tokens do not fill a {self.grid_h}x{self.grid_w} grid"
            )
        if self.tokens.shape[1] == 0:
            raise InputContractError("token dimension must be positive")
        if not np.isfinite(self.tokens).all():
            raise BackendFaultError(f"non-finite patch tokens for image {self.image_id!r}")

    @property
    def hw(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def global_feature(self) -> "GlobalImageFeature":
        return GlobalImageFeature(self.tokens.astype(np.float64).mean(axis=0), self.image_id)


@dataclass
class AttentionStack:
    """Per-layer row-stochastic patch-to-patch attention of the backbone."""

    layers: list

    def __post_init__(self):
        self.layers = [np.asarray(a, dtype=np.float32) for a in self.layers]
        if not self.layers:
            raise InputContractError("attention stack needs at least one layer")
        n = self.layers[0].shape[0]
        for idx, a in enumerate(self.layers):
            if a.shape != (n, n):
                raise InputContractError(f"layer {idx} has shape {a.shape}, expected {(n, n)}")
            if (a < 0).any():
                raise InputContractError(f"layer {idx} has negative entries")
            if np.abs(a.sum(axis=1, dtype=np.float64) - 1.0).max() > ROW_TOL:
                raise InputContractError(f"layer {idx} is not row-stochastic")

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    @property
    def hw(self) -> int:
        return self.layers[0].shape[0]

    def as_array(self) -> np.ndarray:
        return np.stack(self.layers)


@dataclass
class TextQuery:
    class_index: int
    surface: str
    kind: QueryKind
    embedding: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.kind = QueryKind(self.kind)
        if not self.surface:
            raise InputContractError("query surface must be non-empty")
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        if abs(np.linalg.norm(self.embedding) - 1.0) > NORM_TOL:
            raise InputContractError(f"embedding of {self.surface!r} is not unit norm")

    @property
    def key(self) -> str:
        return f"{self.class_index}:{self.kind.value}:{self.surface}"


@dataclass
class GlobalImageFeature:
    vector: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if not np.isfinite(self.vector).all():
            raise BackendFaultError("non-finite global feature")


def check_stochastic(a: np.ndarray, what: str = "attention") -> None:
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InputContractError(f"{what} must be square, got {a.shape}")
    if (a < 0).any() or np.abs(a.sum(axis=1, dtype=np.float64) - 1.0).max() > ROW_TOL:
        raise InputContractError(f"{what} must be row-stochastic within {ROW_TOL}")


def unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norm > 0, norm, 1.0)


class EncoderBackend(abc.ABC):
    """Vision and text towers of a dual-encoder model with a two-block adapter.

    Implementations are read-only after construction; every method is a pure
    function of its arguments and the frozen weights.
    """

    patch_size: int
    num_layers: int
    dim: int
    logit_scale: float
    name: str = "backend"

    @abc.abstractmethod
    def encode_backbone(self, image: np.ndarray, image_id: str = "") -> tuple[PatchGrid, AttentionStack]:
        """Backbone patch tokens and the attention of every backbone layer."""

    @abc.abstractmethod
    def adapter_forward(
        self, v: PatchGrid, injected_attention: Optional[Sequence[np.ndarray]] = None
    ) -> PatchGrid:
        """Run the adapter blocks; ``injected_attention`` replaces each block's attention."""

    @abc.abstractmethod
    def encode_text(self, prompts: Sequence[str]) -> np.ndarray:
        """Unit-norm embeddings, one row per prompt."""

    @property
    def adapter_blocks(self) -> int:
        return 2

    def check_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image)
        if image.ndim != 3:
            raise InputContractError(f"image must be HxWxC, got shape {image.shape}")
        h, w = image.shape[:2]
        if h % self.patch_size or w % self.patch_size:
            raise InputContractError(
                f"image size {h}x{w} is not divisible by patch size {self.patch_size}"
            )
        return image

    def normalize_injection(self, v: PatchGrid, injected_attention) -> Optional[list]:
        if injected_attention is None:
            return None
        if isinstance(injected_attention, np.ndarray) and injected_attention.ndim == 2:
            injected_attention = [injected_attention] * self.adapter_blocks
        mats = [np.asarray(a, dtype=np.float64) for a in injected_attention]
        if len(mats) != self.adapter_blocks:
            raise InputContractError(
                f"expected {self.adapter_blocks} injected matrices, got {len(mats)}"
            )
        for a in mats:
            if a.shape != (v.hw, v.hw):
                raise InputContractError(f"injected attention {a.shape} does not match hw={v.hw}")
            check_stochastic(a, "injected attention")
        return mats

    def describe(self) -> dict:
        return {
            "name": self.name,
            "patch_size": self.patch_size,
            "num_layers": self.num_layers,
            "dim": self.dim,
            "logit_scale": self.logit_scale,
        }
