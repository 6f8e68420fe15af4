"""Command-line entry point: offline extraction/distillation and online segmentation.

Exit codes: 0 success, 1 stage failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, kernels
from .aliases import (
    QuerySet,
    VocabClass,
    Vocabulary,
    build_vocabulary,
    hallucination_gate,
    load_candidates,
    load_templates,
)
from .backend import QueryKind, TextQuery
from .cache import FEAT_SUFFIX, LOGITS_SUFFIX, SIMS_SUFFIX, ImageFeatures, ImageSims, cache_root
from .config import RunConfig, fingerprint, make_backend
from .distill import (
    ScoringConfig,
    ScoringView,
    filter_aliases,
    filter_templates,
    score_vocabulary,
    write_score_report,
)
from .errors import ConfigurationError, SchemaError, VipsegError
from .evaluation import (
    DatasetSpec,
    compute_miou,
    image_text_similarity,
    intra_class_similarity,
    measure_cost,
    read_mask,
    write_mask,
)
from .correction import corrected_adapter_forward
from .dense import window_origins
from .segment import InferenceConfig, compute_sims, extract_features, resize_for_inference, segment_from_sims
from .templates import REFERENCE_TEMPLATES

log = logging.getLogger("vipseg")

EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 1, 2


class StageError(VipsegError):
    def __init__(self, stage: str, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# shared context --------------------------------------------------------------


class Context:
    """Dataset, backend, resolved configuration and cache directory of one invocation."""

    def __init__(self, dataset_path, run: RunConfig, cache_dir=None):
        self.dataset_path = Path(dataset_path)
        if not self.dataset_path.exists():
            raise ConfigurationError(f"dataset config {self.dataset_path} not found")
        self.ds = DatasetSpec.load(self.dataset_path)
        self.run = run
        self.backend = make_backend(self.ds.backend)
        self.infer = InferenceConfig(
            window=run.window or self.ds.window,
            stride=run.stride or self.ds.stride,
            short_side=_short_side(run.short_side, self.ds.short_side),
            logit_scale=run.logit_scale,
            tau=run.tau,
            aggregation=run.aggregation,
            self_correction=run.self_correction,
            background=self.ds.background,
            background_threshold=self.ds.background_threshold,
        )
        key = fingerprint({
            "backend": self.ds.backend,
            "window": self.infer.window,
            "stride": self.infer.stride,
            "short_side": self.infer.short_side,
            "self_correction": self.infer.self_correction,
        })
        root = Path(cache_dir) if cache_dir else cache_root(self.ds.root / ".vip_cache")
        self.cache = root / f"{self.ds.name}-{key}"

    @property
    def logit_scale(self) -> float:
        return self.run.logit_scale if self.run.logit_scale is not None else self.backend.logit_scale

    def image_ids(self) -> list:
        ids = self.ds.image_ids()
        if self.run.max_images is not None:
            ids = ids[: self.run.max_images]
        return ids

    def feat_path(self, image_id) -> Path:
        return self.cache / f"{image_id}{FEAT_SUFFIX}"

    def sims_path(self, image_id) -> Path:
        return self.cache / f"{image_id}{SIMS_SUFFIX}"

    def features(self, index: int, image_id: str) -> ImageFeatures:
        path = self.feat_path(image_id)
        if path.exists():
            return ImageFeatures.load(path)
        feats = extract_features(self.ds.load_image(index), self.backend, self.infer, image_id)
        feats.save(self.cache)
        return feats

    def with_background(self, vocab: Vocabulary) -> Vocabulary:
        """Check class names against the dataset and attach background names as fixed aliases."""
        expected = self.ds.foreground_names
        if vocab.class_names != expected:
            raise ConfigurationError(f"vocabulary classes {vocab.class_names} do not match dataset {expected}")
        if self.ds.has_background and self.ds.background == "query" and self.ds.background_names:
            first = vocab.classes[0]
            extra = [n for n in self.ds.background_names if n not in first.fixed and n != first.name]
            classes = [VocabClass(first.name, list(first.aliases), list(first.fixed) + extra)] + vocab.classes[1:]
            return Vocabulary(classes, list(vocab.templates), vocab.dataset, vocab.stage)
        return vocab

    def pmap(self, fn, items):
        if self.run.jobs > 1:
            with ThreadPoolExecutor(self.run.jobs) as pool:
                return list(pool.map(fn, items))
        return [fn(it) for it in items]


def _short_side(override, default):
    if override is None:
        return default
    return None if int(override) <= 0 else int(override)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _strip_fixed(vocab: Vocabulary) -> Vocabulary:
    return Vocabulary([VocabClass(c.name, list(c.aliases)) for c in vocab.classes], list(vocab.templates),
                      vocab.dataset, vocab.stage)


# stages ---------------------------------------------------------------------


def run_extract(ctx: Context, force: bool = False) -> dict:
    """Write one feature cache per image; existing caches are kept unless ``force``."""
    ctx.cache.mkdir(parents=True, exist_ok=True)
    ids = ctx.image_ids()

    def work(item):
        index, image_id = item
        path = ctx.feat_path(image_id)
        if path.exists() and not force:
            return image_id, "skipped", None
        try:
            image = ctx.ds.load_image(index)
            extract_features(image, ctx.backend, ctx.infer, image_id).save(ctx.cache)
        except (OSError, ValueError) as exc:
            return image_id, "failed", f"{type(exc).__name__}: {exc}"
        return image_id, "written", None

    results = ctx.pmap(work, list(enumerate(ids)))
    failures = [{"image": i, "error": err} for i, status, err in results if status == "failed"]
    manifest = {
        "dataset": ctx.ds.name,
        "backend": ctx.backend.describe(),
        "inference": {k: getattr(ctx.infer, k) for k in ("window", "stride", "short_side", "self_correction")},
        "features": {i: _sha256(ctx.feat_path(i)) for i, status, _ in results if status != "failed"},
    }
    _write_json(ctx.cache / "extract_manifest.json", manifest)
    _write_json(ctx.cache / "extract_failures.json", failures)
    counts = {s: sum(1 for r in results if r[1] == s) for s in ("written", "skipped", "failed")}
    return {"counts": counts, "failures": failures, "manifest": manifest}


def run_ingest(ctx: Context, aliases_path, templates_path=None, gate: Optional[float] = None,
               out=None) -> tuple:
    names = ctx.ds.foreground_names
    candidates, report = load_candidates(aliases_path, names)
    gate = ctx.run.gate if gate is None else gate
    kept, dropped = hallucination_gate(candidates, ctx.backend, gate)
    vocab = build_vocabulary(names, kept, dataset=ctx.ds.name)
    if templates_path:
        vocab = vocab.with_templates(load_templates(templates_path))
    if out:
        vocab.save(out)
    info = {
        "candidates": len(candidates),
        "kept": len(kept),
        "gate": gate,
        "gate_dropped": [{"class": c.canonical_name, "alias": c.alias_surface, "cosine": cos} for c, cos in dropped],
        "rejected": report.rejected,
    }
    return vocab, info


def _scoring_config(run: RunConfig, logit_scale: float) -> ScoringConfig:
    return ScoringConfig(alpha=run.alpha, beta=run.beta, threshold=run.threshold, logit_scale=logit_scale,
                         min_support=run.min_support, vg_scope=run.vg_scope)


def run_distill(ctx: Context, candidates: Vocabulary, scores_out=None, vocab_out=None,
                candidate_templates=None, reference_templates=None) -> tuple:
    """Score every candidate against its anchor and keep the winners.

    Writes each image's similarity cache for the candidate query set along the way.
    """
    cfg = _scoring_config(ctx.run, ctx.logit_scale)
    scoring_vocab = _strip_fixed(ctx.with_background(candidates))
    qs = QuerySet.build(scoring_vocab, ctx.backend)
    ctx.cache.mkdir(parents=True, exist_ok=True)
    ids = ctx.image_ids()
    missing = []

    def work(item):
        index, image_id = item
        try:
            feats = ctx.features(index, image_id)
        except (OSError, ValueError) as exc:
            missing.append({"image": image_id, "reason": str(exc)})
            return image_id, None, None
        sims = compute_sims(feats, qs)
        sims.save(ctx.cache)
        views = [ScoringView(sims.sims[w], feats.attn[w]) for w in range(feats.num_windows)]
        return image_id, views, feats

    loaded = ctx.pmap(work, list(enumerate(ids)))
    report = list(missing)
    records = score_vocabulary([(i, v) for i, v, _ in loaded], qs, cfg, jobs=ctx.run.jobs, report=report)
    retained = filter_aliases(records, min_support=cfg.min_support)
    filtered = candidates.with_aliases(retained)
    template_report = []
    if candidate_templates:
        refs = reference_templates or list(REFERENCE_TEMPLATES)
        feature_views = [(i, [(f.i[w], f.attn[w]) for w in range(f.num_windows)]) for i, _, f in loaded if f]
        kept = filter_templates(candidate_templates, refs, _strip_fixed(filtered), feature_views, ctx.backend,
                                cfg, template_report)
        filtered = filtered.with_templates(kept)
    if scores_out:
        header = {"alpha": cfg.alpha, "beta": cfg.beta, "threshold": cfg.threshold,
                  "logit_scale": cfg.logit_scale, "min_support": cfg.min_support, "images": len(ids)}
        write_score_report(scores_out, records, scoring_vocab.class_names, header)
    if vocab_out:
        filtered.save(vocab_out)
    return filtered, records, {"skipped": report, "templates": template_report}


def _segmentation_sims(ctx: Context, index: int, image_id: str, qs: QuerySet) -> ImageSims:
    path = ctx.sims_path(image_id)
    if path.exists():
        sel = ImageSims.load(path).select(qs.keys)
        if sel is not None:
            return sel
    return compute_sims(ctx.features(index, image_id), qs)


def run_segment(ctx: Context, vocab: Vocabulary, out_dir, save_logits: bool = False) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = ctx.with_background(vocab)
    qs = QuerySet.build(vocab, ctx.backend)
    has_bg = ctx.ds.has_background
    scale = ctx.logit_scale

    def work(item):
        index, image_id = item
        sims = _segmentation_sims(ctx, index, image_id, qs)
        res = segment_from_sims(sims, qs, ctx.infer, scale, has_bg, keep_logits=save_logits)
        write_mask(out_dir / f"{image_id}.png", res.labels)
        if save_logits:
            with open(out_dir / f"{image_id}{LOGITS_SUFFIX}", "wb") as fh:
                np.save(fh, res.logits)
        return image_id, sims

    done = ctx.pmap(work, list(enumerate(ctx.image_ids())))
    sims_by_id = dict(done)
    ms, mb = measure_cost(lambda i: segment_from_sims(sims_by_id[i], qs, ctx.infer, scale, has_bg), list(sims_by_id))
    return {"images": len(done), "ms_per_image": ms, "peak_mb": mb, "queries": len(qs)}


def run_evaluate(ctx: Context, pred_dir, out=None, cost: Optional[dict] = None):
    pred_dir = Path(pred_dir)
    ids = ctx.image_ids()
    preds, gts = [], []
    for index, image_id in enumerate(ids):
        path = pred_dir / f"{image_id}.png"
        if not path.exists():
            raise StageError("evaluate", f"missing prediction for {image_id!r} in {pred_dir}")
        preds.append(read_mask(path))
        gts.append(ctx.ds.load_mask(index))
    report = compute_miou(preds, gts, ctx.ds.num_classes, ctx.ds.ignore_index, ctx.ds.class_names)
    if cost:
        report.ms_per_image, report.peak_mb = cost.get("ms_per_image"), cost.get("peak_mb")
    report.config = {"dataset": ctx.ds.name, "images": len(ids)}
    if out:
        report.save(out)
        report.save_csv(Path(out).with_suffix(".csv"))
    return report


def run_diagnose(ctx: Context, out) -> int:
    """Per-class feature diagnostics for the native and self-corrected adapter outputs."""
    templates = ["a photo of a {}"]
    names = ctx.ds.foreground_names
    offset = 1 if ctx.ds.has_background and ctx.ds.background == "threshold" else 0
    emb = ctx.backend.encode_text([templates[0].format(n) for n in names])
    queries = [TextQuery(c + offset, n, QueryKind.CANONICAL, e) for c, (n, e) in enumerate(zip(names, emb))]
    rows = []
    for index, image_id in enumerate(ctx.image_ids()):
        image = resize_for_inference(ctx.ds.load_image(index), ctx.infer.short_side)
        mask = ctx.ds.load_mask(index)
        if ctx.infer.short_side is not None:
            # nearest-style resample of the mask to the resized image grid
            h, w = image.shape[:2]
            ys = np.minimum((np.arange(h) * mask.shape[0] / h).astype(int), mask.shape[0] - 1)
            xs = np.minimum((np.arange(w) * mask.shape[1] / w).astype(int), mask.shape[1] - 1)
            mask = mask[np.ix_(ys, xs)]
        win = ctx.infer.window
        for n_win, (y, x) in enumerate(window_origins(image.shape[0], image.shape[1], win, ctx.infer.stride)):
            crop, sub = image[y : y + win, x : x + win], mask[y : y + win, x : x + win]
            v, _ = ctx.backend.encode_backbone(crop, image_id)
            for variant, enabled in (("native", False), ("corrected", True)):
                i = corrected_adapter_forward(v, ctx.backend, enabled)
                intra = intra_class_similarity(i, v, sub, ctx.ds.ignore_index) if i.dim == v.dim else {}
                for q in queries:
                    it = image_text_similarity(i, q, sub, ctx.ds.ignore_index)
                    if q.class_index not in it:
                        continue
                    rows.append([image_id, n_win, ctx.ds.class_names[q.class_index], variant,
                                 f"{intra.get(q.class_index, float('nan')):.6f}", f"{it[q.class_index]:.6f}"])
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "window", "class", "variant", "intra_class_similarity", "image_text_similarity"])
        w.writerows(rows)
    return len(rows)


# manifests ------------------------------------------------------------------


def build_manifest(ctx: Context, aliases=None, templates=None, vocab: Optional[Vocabulary] = None) -> dict:
    """Everything needed to replay a pipeline run; outputs are recorded separately."""
    inputs = {"dataset": {"path": str(ctx.dataset_path.resolve()), "sha256": _sha256(ctx.dataset_path)}}
    for key, path in (("aliases", aliases), ("templates", templates)):
        if path:
            inputs[key] = {"path": str(Path(path).resolve()), "sha256": _sha256(path)}
    return {
        "manifest_version": 1,
        "run": ctx.run.to_dict(),
        "inference": asdict(ctx.infer),
        "logit_scale": ctx.logit_scale,
        "template_set": list(vocab.templates) if vocab else None,
        "backend": ctx.backend.describe(),
        "kernels": kernels.IMPLEMENTATION,
        "versions": {"vipseg": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "inputs": inputs,
    }


def run_pipeline(ctx: Context, out_dir, aliases=None, templates=None, force: bool = False):
    """extract -> vocab ingest -> distill -> segment -> evaluate."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def stage(name, fn, *a, **kw):
        log.info("stage %s", name)
        try:
            return fn(*a, **kw)
        except StageError:
            raise
        except ConfigurationError:
            raise
        except (VipsegError, OSError, ValueError) as exc:
            raise StageError(name, exc) from exc

    ext = stage("extract", run_extract, ctx, force)
    if ext["failures"]:
        raise StageError("extract", f"{len(ext['failures'])} image(s) could not be read")
    if aliases:
        vocab, ingest = stage("ingest", run_ingest, ctx, aliases, None, None, out_dir / "candidates.json")
        cand_templates = load_templates(templates) if templates else None
        vocab, _, _ = stage("distill", run_distill, ctx, vocab, out_dir / "scores.csv", out_dir / "vocab.json",
                            cand_templates)
    else:
        vocab = Vocabulary.from_names(ctx.ds.foreground_names, dataset=ctx.ds.name, stage="anchor")
        if templates:
            vocab = vocab.with_templates(load_templates(templates))
        vocab.save(out_dir / "vocab.json")
    cost = stage("segment", run_segment, ctx, vocab, out_dir / "pred")
    report = stage("evaluate", run_evaluate, ctx, out_dir / "pred", out_dir / "report.json", cost)
    manifest = build_manifest(ctx, aliases, templates, vocab)
    _write_json(out_dir / "manifest.json", manifest)
    masks = sorted((out_dir / "pred").glob("*.png"))
    digest = hashlib.sha256(b"".join(_sha256(p).encode() for p in masks)).hexdigest()
    _write_json(out_dir / "outputs.json", {"miou": report.miou, "pixel_accuracy": report.pixel_accuracy,
                                           "masks_sha256": digest, "vocabulary_size": vocab.size()})
    return report, manifest


# argument parsing -----------------------------------------------------------


def _add_common(p, dataset=True):
    if dataset:
        p.add_argument("--dataset", required=True, help="dataset config (JSON or YAML)")
    p.add_argument("--config", help="run config file; flags override its values")
    p.add_argument("--cache-dir", help="cache root (default: $VIP_CACHE_DIR or <dataset dir>/.vip_cache)")
    p.add_argument("--jobs", type=int, help="image-parallel workers")
    p.add_argument("--max-images", type=int)
    p.add_argument("--windows", dest="window", type=int, help="window size in pixels")
    p.add_argument("--stride", type=int)
    p.add_argument("--short-side", type=int, help="resize target; 0 disables resizing")
    p.add_argument("--logit-scale", type=float)
    sc = p.add_mutually_exclusive_group()
    sc.add_argument("--self-correction", dest="self_correction", action="store_true", default=None)
    sc.add_argument("--no-self-correction", dest="self_correction", action="store_false")


def _add_scoring(p):
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--min-support", type=int)


def _add_aggregation(p):
    p.add_argument("--aggregation", choices=["free_energy", "max", "mean", "plain"])
    p.add_argument("--tau", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vipseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="cache backbone/adapter features per image")
    _add_common(p)
    p.add_argument("--force", action="store_true", help="recompute existing caches")

    p = sub.add_parser("vocab", help="vocabulary tools")
    vsub = p.add_subparsers(dest="vocab_command", required=True)
    p = vsub.add_parser("ingest", help="validate alias candidates and apply the similarity gate")
    _add_common(p)
    p.add_argument("--aliases", required=True)
    p.add_argument("--templates")
    p.add_argument("--gate", type=float)
    p.add_argument("--out", required=True)

    p = sub.add_parser("distill", help="score alias candidates and write the filtered vocabulary")
    _add_common(p)
    _add_scoring(p)
    p.add_argument("--candidates", required=True, help="candidate vocabulary from 'vocab ingest'")
    p.add_argument("--candidate-templates", help="template file to filter against the reference set")
    p.add_argument("--reference-templates", help="reference template file (default: 80 CLIP templates)")
    p.add_argument("--out", required=True, help="score report CSV")
    p.add_argument("vocab_out", help="filtered vocabulary output")

    p = sub.add_parser("segment", help="segment every dataset image with a vocabulary")
    _add_common(p)
    _add_aggregation(p)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--save-logits", action="store_true")

    p = sub.add_parser("evaluate", help="mIoU of predicted masks")
    _add_common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pipeline", help="ingest, distill, segment and evaluate in one run")
    _add_common(p, dataset=False)
    _add_scoring(p)
    _add_aggregation(p)
    p.add_argument("--dataset")
    p.add_argument("--aliases")
    p.add_argument("--templates", help="candidate templates (filtered when aliases are given)")
    p.add_argument("--gate", type=float)
    p.add_argument("--manifest", help="replay the configuration recorded in a previous manifest")
    p.add_argument("--force", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("diagnose", help="feature diagnostics CSV (native vs self-corrected)")
    _add_common(p)
    p.add_argument("--out", required=True)
    return parser


_RUN_FIELDS = {f for f in RunConfig.__dataclass_fields__}


def resolve_run_config(args) -> RunConfig:
    base = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {k: v for k, v in vars(args).items() if k in _RUN_FIELDS and v is not None}
    return base.merged(overrides)


def _dispatch(args) -> int:
    if args.command == "pipeline" and args.manifest:
        doc = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        run = RunConfig.from_dict(doc["run"]).merged(
            {k: v for k, v in vars(args).items() if k in _RUN_FIELDS and v is not None})
        inputs = doc.get("inputs", {})
        for key, entry in inputs.items():
            if Path(entry["path"]).exists() and _sha256(entry["path"]) != entry["sha256"]:
                log.warning("%s input %s changed since the manifest was written", key, entry["path"])
        dataset = args.dataset or inputs["dataset"]["path"]
        aliases = args.aliases or inputs.get("aliases", {}).get("path")
        templates = args.templates or inputs.get("templates", {}).get("path")
    else:
        run = resolve_run_config(args)
        dataset = args.dataset
        aliases = getattr(args, "aliases", None)
        templates = getattr(args, "templates", None)
    if dataset is None:
        raise ConfigurationError("--dataset is required")
    ctx = Context(dataset, run, args.cache_dir)

    if args.command == "extract":
        res = run_extract(ctx, args.force)
        print(json.dumps(res["counts"]))
        for f in res["failures"]:
            print(f"failed: {f['image']}: {f['error']}", file=sys.stderr)
        return EXIT_STAGE if res["failures"] else EXIT_OK
    if args.command == "vocab":
        _, info = run_ingest(ctx, args.aliases, args.templates, args.gate, args.out)
        print(json.dumps({k: info[k] for k in ("candidates", "kept", "gate")}))
        return EXIT_OK
    if args.command == "distill":
        cand = Vocabulary.load(args.candidates)
        ct = load_templates(args.candidate_templates) if args.candidate_templates else None
        rt = load_templates(args.reference_templates) if args.reference_templates else None
        filtered, records, info = run_distill(ctx, cand, args.out, args.vocab_out, ct, rt)
        for s in info["skipped"]:
            print(f"skipped: {s['image']}: {s['reason']}", file=sys.stderr)
        kept = sum(len(c.aliases) for c in filtered.classes)
        print(json.dumps({"candidates": len(records), "retained_aliases": kept}))
        return EXIT_OK
    if args.command == "segment":
        res = run_segment(ctx, Vocabulary.load(args.vocab), args.out, args.save_logits)
        print(json.dumps(res))
        return EXIT_OK
    if args.command == "evaluate":
        report = run_evaluate(ctx, args.pred, args.out)
        print(json.dumps({"miou": report.miou, "pixel_accuracy": report.pixel_accuracy}))
        return EXIT_OK
    if args.command == "pipeline":
        report, _ = run_pipeline(ctx, args.out, aliases, templates, args.force)
        print(json.dumps({"miou": report.miou, "pixel_accuracy": report.pixel_accuracy,
                          "ms_per_image": report.ms_per_image}))
        return EXIT_OK
    if args.command == "diagnose":
        n = run_diagnose(ctx, args.out)
        print(json.dumps({"rows": n}))
        return EXIT_OK
    raise ConfigurationError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except (ConfigurationError, SchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (VipsegError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
