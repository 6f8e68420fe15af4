"""On-disk feature (``.feat``) and similarity (``.sims``) caches.

Both are numpy ``.npz`` containers written under a custom suffix. Every array
is float32 except the integer layout fields.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InputContractError

FEAT_SUFFIX = ".feat"
SIMS_SUFFIX = ".sims"
LOGITS_SUFFIX = ".logits"


def cache_root(default=None) -> Path:
    env = os.environ.get("VIP_CACHE_DIR")
    if env:
        return Path(env)
    return Path(default) if default is not None else Path(".vip_cache")


@dataclass
class ImageFeatures:
    """Per-window backbone tokens, adapter tokens and backbone attention of one image."""

    image_id: str
    v: np.ndarray          # [n_win, hw, d]
    i: np.ndarray          # [n_win, hw, d]
    attn: np.ndarray       # [n_win, L, hw, hw]
    grid: tuple
    origins: np.ndarray    # [n_win, 2] (y, x) in resized pixels
    orig_size: tuple
    resized_size: tuple
    window: int
    self_correction: bool = True

    @property
    def num_windows(self) -> int:
        return self.v.shape[0]

    @property
    def num_layers(self) -> int:
        return self.attn.shape[1]

    def save(self, directory) -> Path:
        path = Path(directory) / f"{self.image_id}{FEAT_SUFFIX}"
        arrays = {
            "V": self.v.astype(np.float32),
            "I": self.i.astype(np.float32),
            "grid": np.asarray(self.grid, dtype=np.int64),
            "origins": np.asarray(self.origins, dtype=np.int64),
            "sizes": np.asarray([*self.orig_size, *self.resized_size, self.window], dtype=np.int64),
            "self_correction": np.asarray(int(self.self_correction)),
        }
        for l in range(self.num_layers):
            arrays[f"attn_{l}"] = self.attn[:, l].astype(np.float32)
        _atomic_savez(path, arrays)
        return path

    @classmethod
    def load(cls, path) -> "ImageFeatures":
        path = Path(path)
        with np.load(path) as z:
            n_layers = sum(1 for k in z.files if k.startswith("attn_"))
            if n_layers == 0:
                raise InputContractError(f"{path} has no attention layers")
            attn = np.stack([z[f"attn_{l}"] for l in range(n_layers)], axis=1)
            sizes = z["sizes"]
            return cls(
                image_id=path.name[: -len(FEAT_SUFFIX)],
                v=z["V"],
                i=z["I"],
                attn=attn,
                grid=tuple(int(g) for g in z["grid"]),
                origins=z["origins"],
                orig_size=(int(sizes[0]), int(sizes[1])),
                resized_size=(int(sizes[2]), int(sizes[3])),
                window=int(sizes[4]),
                self_correction=bool(z["self_correction"]),
            )


@dataclass
class ImageSims:
    """Cached patch-query cosines (and pooled-feature cosines) for one image."""

    image_id: str
    keys: list
    sims: np.ndarray       # [n_win, hw, Q] float32
    gsims: np.ndarray      # [n_win, Q] float32
    grid: tuple
    origins: np.ndarray
    orig_size: tuple
    resized_size: tuple
    window: int

    def select(self, keys: Sequence[str]) -> Optional["ImageSims"]:
        """Columns for ``keys`` in that order, or ``None`` if any is missing."""
        pos = {k: n for n, k in enumerate(self.keys)}
        try:
            cols = [pos[k] for k in keys]
        except KeyError:
            return None
        return ImageSims(self.image_id, list(keys), self.sims[:, :, cols], self.gsims[:, cols], self.grid,
                         self.origins, self.orig_size, self.resized_size, self.window)

    def save(self, directory) -> Path:
        path = Path(directory) / f"{self.image_id}{SIMS_SUFFIX}"
        _atomic_savez(path, {
            "sims": self.sims.astype(np.float32),
            "gsims": self.gsims.astype(np.float32),
            "grid": np.asarray(self.grid, dtype=np.int64),
            "origins": np.asarray(self.origins, dtype=np.int64),
            "sizes": np.asarray([*self.orig_size, *self.resized_size, self.window], dtype=np.int64),
            "manifest": np.asarray(json.dumps({"queries": list(self.keys)})),
        })
        return path

    @classmethod
    def load(cls, path) -> "ImageSims":
        path = Path(path)
        with np.load(path) as z:
            sizes = z["sizes"]
            return cls(
                image_id=path.name[: -len(SIMS_SUFFIX)],
                keys=json.loads(str(z["manifest"]))["queries"],
                sims=z["sims"],
                gsims=z["gsims"],
                grid=tuple(int(g) for g in z["grid"]),
                origins=z["origins"],
                orig_size=(int(sizes[0]), int(sizes[1])),
                resized_size=(int(sizes[2]), int(sizes[3])),
                window=int(sizes[4]),
            )


def _atomic_savez(path: Path, arrays: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
