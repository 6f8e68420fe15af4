"""Datasets, mIoU, cost measurement and feature diagnostics."""

from __future__ import annotations

import csv
import json
import time
import tracemalloc
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .backend import PatchGrid, TextQuery, unit_rows
from .errors import ConfigurationError, InputContractError


# datasets -------------------------------------------------------------------


@dataclass
class ImageEntry:
    image_id: str
    image: Optional[str] = None
    mask: Optional[str] = None


@dataclass
class DatasetSpec:
    name: str
    class_names: list
    images: list = field(default_factory=list)
    ignore_index: int = 255
    has_background: bool = False
    short_side: Optional[int] = 336
    window: int = 224
    stride: int = 112
    background: str = "query"
    background_threshold: float = 0.5
    background_names: list = field(default_factory=list)
    synthetic: Optional[dict] = None
    backend: Optional[dict] = None
    root: Path = field(default_factory=Path)
    _scenes: object = field(default=None, repr=False)

    def __post_init__(self):
        if not self.class_names:
            raise ConfigurationError("dataset needs at least one class")
        if self.window > (self.short_side or self.window):
            raise ConfigurationError(f"window {self.window} exceeds short side {self.short_side}")
        if self.synthetic is None:
            for e in self.images:
                if e.mask is None:
                    raise ConfigurationError(f"image {e.image_id!r} has no mask")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def foreground_names(self) -> list:
        """Names that get text queries under the active background strategy."""
        if self.has_background and self.background == "threshold":
            return list(self.class_names[1:])
        return list(self.class_names)

    def image_ids(self) -> list:
        if self.synthetic is not None:
            return self.scenes().image_ids()
        return [e.image_id for e in self.images]

    def scenes(self):
        if self._scenes is None:
            from .synthetic import SyntheticSceneSet, SyntheticWorld

            if not self.backend or self.backend.get("kind") != "synthetic":
                raise ConfigurationError("synthetic dataset needs a synthetic backend section")
            world = SyntheticWorld(**self.backend["world"])
            s = self.synthetic
            self._scenes = SyntheticSceneSet(
                world, n_images=s.get("n_images", 20), seed=s.get("seed", 0), grid=tuple(s.get("grid", (8, 8))),
                patch_size=self.backend.get("patch_size", 8), classes_per_image=s.get("classes_per_image", 2),
                fixed_classes=s.get("fixed_classes"),
            )
        return self._scenes

    def load_image(self, index: int) -> np.ndarray:
        if self.synthetic is not None:
            return self.scenes().load(index)[0]
        return read_image(self.root / self.images[index].image)

    def load_mask(self, index: int) -> np.ndarray:
        if self.synthetic is not None:
            return self.scenes().load(index)[1]
        return read_mask(self.root / self.images[index].mask)

    def __len__(self):
        return len(self.image_ids())

    def to_dict(self) -> dict:
        out = {
            "version": 1,
            "name": self.name,
            "classes": list(self.class_names),
            "ignore_index": self.ignore_index,
            "has_background": self.has_background,
            "short_side": self.short_side,
            "window": self.window,
            "stride": self.stride,
            "background": {"strategy": self.background, "threshold": self.background_threshold,
                           "names": list(self.background_names)},
        }
        if self.synthetic is not None:
            out["synthetic"] = dict(self.synthetic)
        else:
            out["images"] = [{"id": e.image_id, "image": e.image, "mask": e.mask} for e in self.images]
        if self.backend is not None:
            out["backend"] = dict(self.backend)
        return out

    @classmethod
    def from_dict(cls, doc: dict, root=".") -> "DatasetSpec":
        if doc.get("version", 1) != 1:
            raise ConfigurationError(f"unsupported dataset config version {doc.get('version')!r}")
        try:
            bg = doc.get("background", {}) or {}
            images = [ImageEntry(str(e["id"]), e.get("image"), e.get("mask")) for e in doc.get("images", [])]
            return cls(
                name=doc["name"],
                class_names=list(doc["classes"]),
                images=images,
                ignore_index=int(doc.get("ignore_index", 255)),
                has_background=bool(doc.get("has_background", False)),
                short_side=doc.get("short_side", 336),
                window=int(doc.get("window", 224)),
                stride=int(doc.get("stride", 112)),
                background=bg.get("strategy", "query"),
                background_threshold=float(bg.get("threshold", 0.5)),
                background_names=list(bg.get("names", [])),
                synthetic=doc.get("synthetic"),
                backend=doc.get("backend"),
                root=Path(root),
            )
        except KeyError as exc:
            raise ConfigurationError(f"dataset config is missing {exc}") from exc

    @classmethod
    def load(cls, path) -> "DatasetSpec":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix in (".yaml", ".yml"):
            import yaml

            doc = yaml.safe_load(text)
        else:
            doc = json.loads(text)
        return cls.from_dict(doc, root=path.parent)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32)


def read_mask(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path).astype(np.int64)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im, dtype=np.int64)


def write_mask(path, labels: np.ndarray) -> None:
    from PIL import Image

    labels = np.asarray(labels)
    if labels.max(initial=0) > 255:
        raise InputContractError("indexed mask supports at most 256 labels")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


# metrics ---------------------------------------------------------------------


@dataclass
class MetricReport:
    per_class_iou: list
    miou: float
    pixel_accuracy: float
    class_names: list = field(default_factory=list)
    ms_per_image: Optional[float] = None
    peak_mb: Optional[float] = None
    config: dict = field(default_factory=dict)
    memory_metric: str = "peak traced heap allocation during the timed loop (tracemalloc)"

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "pixel_accuracy": self.pixel_accuracy,
            "per_class_iou": {
                (self.class_names[c] if c < len(self.class_names) else str(c)): (None if np.isnan(v) else v)
                for c, v in enumerate(self.per_class_iou)
            },
            "ms_per_image": self.ms_per_image,
            "peak_mb": self.peak_mb,
            "memory_metric": self.memory_metric,
            "config": self.config,
        }

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def save_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "iou"])
            for c, v in enumerate(self.per_class_iou):
                name = self.class_names[c] if c < len(self.class_names) else str(c)
                w.writerow([name, "" if np.isnan(v) else f"{v:.6f}"])


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_index: int = 255) -> np.ndarray:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise InputContractError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    keep = (gt != ignore_index) & (gt >= 0) & (gt < num_classes)
    p = pred[keep].astype(np.int64)
    g = gt[keep].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= num_classes):
        raise InputContractError("prediction label out of range")
    return np.bincount(g * num_classes + p, minlength=num_classes**2).reshape(num_classes, num_classes)


def report_from_confusion(conf: np.ndarray, class_names=None) -> MetricReport:
    conf = np.asarray(conf, dtype=np.float64)
    tp = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    valid = ~np.isnan(iou)
    miou = float(iou[valid].mean()) if valid.any() else float("nan")
    total = conf.sum()
    acc = float(tp.sum() / total) if total else float("nan")
    return MetricReport(iou.tolist(), miou, acc, list(class_names or []))


def compute_miou(predictions, ground_truth, num_classes: int, ignore_index: int = 255,
                 class_names=None) -> MetricReport:
    """Confusion-matrix IoU; classes absent from both prediction and ground truth are left out."""
    if isinstance(predictions, np.ndarray):
        predictions, ground_truth = [predictions], [ground_truth]
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(predictions, ground_truth, strict=True):
        conf += confusion_matrix(p, g, num_classes, ignore_index)
    return report_from_confusion(conf, class_names)


# cost -----------------------------------------------------------------------


def measure_cost(run_one: Callable, items: Sequence, warmup: int = 1):
    """Mean wall time (ms) per item after ``warmup`` untimed calls, and peak traced MB."""
    items = list(items)
    if not items:
        raise InputContractError("no images")
    for it in items[:warmup]:
        run_one(it)
    timed = items[warmup:] or items
    tracemalloc.start()
    try:
        start = time.perf_counter()
        for it in timed:
            run_one(it)
        elapsed = time.perf_counter() - start
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return 1000.0 * elapsed / len(timed), peak / 2**20


# diagnostics ----------------------------------------------------------------


def mask_to_grid(mask: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Patch-level labels by sampling the mask at each patch centre."""
    mask = np.asarray(mask)
    h, w = mask.shape
    ys = np.minimum(((np.arange(grid_h) + 0.5) * h / grid_h).astype(int), h - 1)
    xs = np.minimum(((np.arange(grid_w) + 0.5) * w / grid_w).astype(int), w - 1)
    return mask[np.ix_(ys, xs)]


def _grid_labels(gt_mask, grid: PatchGrid) -> np.ndarray:
    gt = np.asarray(gt_mask)
    if gt.shape != (grid.grid_h, grid.grid_w):
        gt = mask_to_grid(gt, grid.grid_h, grid.grid_w)
    return gt.reshape(-1)


def intra_class_similarity(refined: PatchGrid, original: PatchGrid, gt_mask, ignore_index: int = 255) -> dict:
    """Per-class mean of the per-patch cosine between refined and original tokens."""
    if refined.tokens.shape != original.tokens.shape:
        raise InputContractError("refined and original grids differ")
    labels = _grid_labels(gt_mask, refined)
    cos = (unit_rows(refined.tokens) * unit_rows(original.tokens)).sum(axis=1)
    return {int(c): float(cos[labels == c].mean()) for c in np.unique(labels) if c != ignore_index}


def image_text_similarity(i: PatchGrid, query: TextQuery, gt_mask, ignore_index: int = 255) -> dict:
    """Mean cosine between the query's class patches and its embedding, keyed by class.

    Empty when the class has no patch in ``gt_mask``.
    """
    labels = _grid_labels(gt_mask, i)
    sel = labels == query.class_index
    if not sel.any():
        return {}
    cos = unit_rows(i.tokens[sel]) @ unit_rows(query.embedding[None, :])[0]
    return {query.class_index: float(cos.mean())}
