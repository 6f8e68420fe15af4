"""Checkpoint-free encoder with planted class clusters.

Patch tokens are ``signal * prototype[c] + common * u + noise`` where ``u`` is a
direction shared by every token and orthogonal to all text embeddings, which
keeps cosine margins in the few-logit range real dual encoders show. The
adapter's native attention is near-global (every row looks alike), so without
self-correction tokens drift toward the image mean.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .backend import AttentionStack, EncoderBackend, PatchGrid, Source, unit_rows
from .errors import InputContractError


def _stable_seed(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


@dataclass
class SyntheticWorld:
    """Latent geometry shared by the synthetic images and the synthetic text tower."""

    class_names: Sequence[str]
    dim: int = 32
    seed: int = 0
    signal: float = 4.0
    common: float = 78.0
    noise: float = 0.5
    name_drift: float = 0.8

    def __post_init__(self):
        self.class_names = list(self.class_names)
        n = len(self.class_names)
        if self.dim < 2 * n + 2:
            raise InputContractError(f"dim={self.dim} too small for {n} classes")
        rng = np.random.default_rng(self.seed)
        basis, _ = np.linalg.qr(rng.normal(size=(self.dim, self.dim)))
        basis = basis.T
        self.common_dir = basis[0]
        self.prototypes = basis[1 : n + 1]
        self.drifts = basis[n + 1 : 2 * n + 1]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def canonical_vector(self, c: int) -> np.ndarray:
        v = self.prototypes[c] + self.name_drift * self.drifts[c]
        return v / np.linalg.norm(v)

    def mixture(self, weights: Mapping[int, float]) -> np.ndarray:
        v = sum(w * self.prototypes[c] for c, w in weights.items())
        return v / np.linalg.norm(v)

    def lexicon(self) -> dict:
        return {name.lower(): self.canonical_vector(c) for c, name in enumerate(self.class_names)}

    def token_noise(self, rng, n: int) -> np.ndarray:
        z = rng.normal(scale=self.noise, size=(n, self.dim))
        return z - np.outer(z @ self.common_dir, self.common_dir)

    def tokens_for(self, labels: np.ndarray, rng) -> np.ndarray:
        labels = np.asarray(labels).reshape(-1)
        base = self.signal * self.prototypes[labels] + self.common * self.common_dir
        return (base + self.token_noise(rng, labels.size)).astype(np.float32)

    def to_config(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "dim": self.dim,
            "seed": self.seed,
            "signal": self.signal,
            "common": self.common,
            "noise": self.noise,
            "name_drift": self.name_drift,
        }


def random_layout(rng, grid_h: int, grid_w: int, classes: Sequence[int], min_frac: float = 0.15):
    """Patch-level label grid: ``classes[0]`` fills the frame, the rest are rectangles."""
    labels = np.full((grid_h, grid_w), classes[0], dtype=np.int64)
    for c in classes[1:]:
        for _ in range(50):
            h = int(rng.integers(max(2, grid_h // 3), max(3, (2 * grid_h) // 3 + 1)))
            w = int(rng.integers(max(2, grid_w // 3), max(3, (2 * grid_w) // 3 + 1)))
            y = int(rng.integers(0, grid_h - h + 1))
            x = int(rng.integers(0, grid_w - w + 1))
            trial = labels.copy()
            trial[y : y + h, x : x + w] = c
            if all((trial == k).mean() >= min_frac for k in [classes[0], *classes[1:]] if (trial == k).any()):
                labels = trial
                break
        else:
            labels[: grid_h // 2, : grid_w // 2] = c
    return labels


def make_scene(world: SyntheticWorld, seed: int, grid_h: int, grid_w: int, patch_size: int,
               classes: Sequence[int]):
    """Render a scene; returns ``(image [H, W, dim] float32, mask [H, W] int64)``."""
    rng = np.random.default_rng(seed)
    labels = random_layout(rng, grid_h, grid_w, classes)
    tokens = world.tokens_for(labels, rng).reshape(grid_h, grid_w, world.dim)
    image = np.repeat(np.repeat(tokens, patch_size, axis=0), patch_size, axis=1)
    mask = np.repeat(np.repeat(labels, patch_size, axis=0), patch_size, axis=1)
    return np.ascontiguousarray(image), mask


class SyntheticBackend(EncoderBackend):
    """Deterministic encoder over a :class:`SyntheticWorld`.

    Text prompts are embedded by locating the longest lexicon entry inside the
    prompt; the remaining template text adds a hashed direction weighted by
    ``template_noise`` (``default_template_noise`` for unlisted templates). Prompts
    with no lexicon entry map to a hashed pseudo-random direction.
    """

    name = "synthetic"

    def __init__(
        self,
        world: SyntheticWorld,
        patch_size: int = 8,
        num_layers: int = 4,
        seed: int = 0,
        lexicon: Optional[Mapping[str, Sequence[float]]] = None,
        template_noise: Optional[Mapping[str, float]] = None,
        default_template_noise: float = 0.35,
        logit_scale: float = 100.0,
        mlp_scale: float = 0.5,
    ):
        self.world = world
        self.patch_size = patch_size
        self.num_layers = num_layers
        self.dim = world.dim
        self.seed = seed
        self.logit_scale = float(logit_scale)
        self.default_template_noise = default_template_noise
        self.mlp_scale = mlp_scale
        self.template_noise = {k.lower(): float(v) for k, v in (template_noise or {}).items()}
        self.lexicon = world.lexicon()
        for k, v in (lexicon or {}).items():
            v = np.asarray(v, dtype=np.float64)
            self.lexicon[k.lower()] = v / np.linalg.norm(v)
        self._names = sorted(self.lexicon, key=len, reverse=True)

        rng = np.random.default_rng(seed + 1)
        d = self.dim
        self._wq = [rng.normal(scale=0.02 / np.sqrt(d), size=(d, d)) for _ in range(2)]
        self._wk = [rng.normal(scale=0.02 / np.sqrt(d), size=(d, d)) for _ in range(2)]
        self._wv = [np.eye(d) + rng.normal(scale=0.02 / np.sqrt(d), size=(d, d)) for _ in range(2)]
        self._w1 = [rng.normal(scale=1.0 / np.sqrt(d), size=(d, d)) / world.common for _ in range(2)]
        self._w2 = [rng.normal(scale=1.0 / np.sqrt(d), size=(d, d)) for _ in range(2)]
        self._layer_sharpness = np.linspace(4.0, 16.0, num_layers)
        self._layer_reach = np.linspace(1.5, 6.0, num_layers)

    # vision -----------------------------------------------------------------

    def encode_backbone(self, image, image_id=""):
        image = self.check_image(image)
        if image.shape[2] != self.dim:
            raise InputContractError(f"synthetic images carry {self.dim} channels, got {image.shape[2]}")
        p = self.patch_size
        gh, gw = image.shape[0] // p, image.shape[1] // p
        tokens = image.astype(np.float64).reshape(gh, p, gw, p, self.dim).mean(axis=(1, 3))
        tokens = tokens.reshape(gh * gw, self.dim)
        v = PatchGrid(tokens, gh, gw, Source.BACKBONE, image_id)

        centred = tokens - np.outer(tokens @ self.world.common_dir, self.world.common_dir)
        unit = unit_rows(centred)
        cos = unit @ unit.T
        yy, xx = np.divmod(np.arange(gh * gw), gw)
        dist2 = (yy[:, None] - yy[None, :]) ** 2 + (xx[:, None] - xx[None, :]) ** 2
        layers = []
        for sharp, reach in zip(self._layer_sharpness, self._layer_reach):
            z = sharp * cos - dist2 / (2.0 * reach**2)
            z = np.exp(z - z.max(axis=1, keepdims=True))
            layers.append(z / z.sum(axis=1, keepdims=True))
        return v, AttentionStack(layers)

    def native_attention(self, x: np.ndarray, block: int) -> np.ndarray:
        q = x @ self._wq[block]
        k = x @ self._wk[block]
        z = q @ k.T / np.sqrt(self.dim)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def _block(self, x: np.ndarray, block: int, attn: np.ndarray) -> np.ndarray:
        x = x + attn @ (x @ self._wv[block])
        return x + self.mlp_scale * np.tanh(x @ self._w1[block]) @ self._w2[block]

    def adapter_forward(self, v, injected_attention=None):
        mats = self.normalize_injection(v, injected_attention)
        x = v.tokens.astype(np.float64)
        for b in range(self.adapter_blocks):
            x = self._block(x, b, self.native_attention(x, b) if mats is None else mats[b])
        return PatchGrid(x, v.grid_h, v.grid_w, Source.ADAPTER, v.image_id)

    # text -------------------------------------------------------------------

    def _hashed(self, text: str) -> np.ndarray:
        z = np.random.default_rng(_stable_seed(text)).normal(size=self.dim)
        z -= (z @ self.world.common_dir) * self.world.common_dir
        return z / np.linalg.norm(z)

    def _embed(self, prompt: str) -> np.ndarray:
        low = " ".join(prompt.lower().split())
        for name in self._names:
            m = re.search(r"(?<![a-z0-9])" + re.escape(name) + r"(?![a-z0-9])", low)
            if m is None:
                continue
            residual = low[: m.start()] + "{}" + low[m.end() :]
            if residual == "{}":
                weight = 0.0
            else:
                weight = self.template_noise.get(residual, self.default_template_noise)
            vec = self.lexicon[name] + weight * self._hashed("template:" + residual)
            break
        else:
            vec = self._hashed("text:" + low)
        vec = vec - (vec @ self.world.common_dir) * self.world.common_dir
        return vec / np.linalg.norm(vec)

    def encode_text(self, prompts):
        prompts = list(prompts)
        if not prompts:
            raise InputContractError("no prompts given")
        for p in prompts:
            if not isinstance(p, str) or not p.strip():
                raise InputContractError("empty prompt string")
        return np.stack([self._embed(p) for p in prompts])

    # config -----------------------------------------------------------------

    def to_config(self) -> dict:
        base = self.world.lexicon()
        extra = {k: v.tolist() for k, v in self.lexicon.items() if k not in base}
        return {
            "kind": "synthetic",
            "world": self.world.to_config(),
            "patch_size": self.patch_size,
            "num_layers": self.num_layers,
            "seed": self.seed,
            "lexicon": extra,
            "template_noise": dict(self.template_noise),
            "default_template_noise": self.default_template_noise,
            "logit_scale": self.logit_scale,
            "mlp_scale": self.mlp_scale,
        }

    @classmethod
    def from_config(cls, cfg: Mapping) -> "SyntheticBackend":
        cfg = dict(cfg)
        cfg.pop("kind", None)
        world = SyntheticWorld(**cfg.pop("world"))
        return cls(world, **cfg)

    def describe(self) -> dict:
        out = super().describe()
        out["config"] = self.to_config()
        return out


@dataclass
class SyntheticSceneSet:
    """Seeded collection of synthetic scenes with pixel masks."""

    world: SyntheticWorld
    n_images: int = 20
    seed: int = 0
    grid: tuple = (8, 8)
    patch_size: int = 8
    classes_per_image: int = 2
    fixed_classes: Optional[Sequence[int]] = None
    _cache: dict = field(default_factory=dict, repr=False)

    def image_ids(self) -> list:
        return [f"syn{self.seed:03d}_{i:04d}" for i in range(self.n_images)]

    def classes_for(self, index: int) -> list:
        if self.fixed_classes is not None:
            return list(self.fixed_classes)
        rng = np.random.default_rng([self.seed, index, 17])
        k = min(self.classes_per_image, self.world.num_classes)
        return [int(c) for c in rng.choice(self.world.num_classes, size=k, replace=False)]

    def load(self, index: int):
        if index not in self._cache:
            gh, gw = self.grid
            self._cache[index] = make_scene(
                self.world, _stable_seed(f"{self.seed}:{index}") % (2**32), gh, gw, self.patch_size,
                self.classes_for(index),
            )
        return self._cache[index]


# planted-alias fixture -------------------------------------------------------

FIXTURE_CLASSES = ("road", "bus", "tree", "sky")
GOOD_ALIAS = "coach bus"
CONFUSABLE_ALIAS = "bus tree"


def planted_fixture(seed: int = 0, n_images: int = 20, classes_per_image: int = 3):
    """World, backend and scenes with one good and one confusable alias planted for "bus".

    The good alias points at the bus prototype itself (the canonical name is
    drifted away from it); the confusable alias sits halfway between bus and tree.
    """
    world = SyntheticWorld(FIXTURE_CLASSES, seed=seed)
    extras = {GOOD_ALIAS: world.prototypes[1], CONFUSABLE_ALIAS: world.mixture({1: 1.0, 2: 1.0})}
    backend = SyntheticBackend(world, lexicon=extras, seed=seed)
    scenes = SyntheticSceneSet(world, n_images=n_images, seed=seed, classes_per_image=classes_per_image)
    return world, backend, scenes


def fixture_dataset_config(seed: int = 0, n_images: int = 20, classes_per_image: int = 3) -> dict:
    """Dataset config (JSON-serialisable) describing :func:`planted_fixture`."""
    _, backend, scenes = planted_fixture(seed, n_images, classes_per_image)
    return {
        "version": 1,
        "name": f"synthetic{seed:03d}",
        "classes": list(FIXTURE_CLASSES),
        "short_side": None,
        "window": 64,
        "stride": 32,
        "synthetic": {"n_images": n_images, "seed": seed, "grid": list(scenes.grid),
                      "classes_per_image": classes_per_image},
        "backend": backend.to_config(),
    }
