"""Candidate alias ingestion, hallucination gate, prompt ensembling and query sets."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .backend import EncoderBackend, QueryKind, TextQuery
from .errors import InputContractError, SchemaError
from .templates import DEFAULT_TEMPLATES

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_GATE = 0.7


class CandidateSource(str, Enum):
    LLM_FILE = "llm_file"
    MANUAL = "manual"


@dataclass(frozen=True)
class AliasCandidate:
    class_index: int
    canonical_name: str
    alias_surface: str
    source: CandidateSource = CandidateSource.LLM_FILE

    def __post_init__(self):
        if not self.alias_surface or not self.alias_surface.strip():
            raise InputContractError("alias surface must be non-empty")
        if self.class_index < 0:
            raise InputContractError("class index must be non-negative")


@dataclass
class IngestReport:
    rejected: list = field(default_factory=list)
    duplicates: int = 0

    def reject(self, name, alias, reason):
        self.rejected.append({"class": name, "alias": alias, "reason": reason})


# files ----------------------------------------------------------------------


def _load_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(exc.msg, path=path, line=exc.lineno) from exc


def _field_line(path, needle: str) -> Optional[int]:
    try:
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if needle in line:
                return n
    except OSError:
        pass
    return None


def _check_version(doc, path):
    if not isinstance(doc, dict):
        raise SchemaError("top level must be an object", path=path, line=1)
    if doc.get("version") != SCHEMA_VERSION:
        raise SchemaError(f"unsupported version {doc.get('version')!r}", path=path, field="version",
                          line=_field_line(path, '"version"'))


def load_candidates(path, class_names: Optional[Sequence[str]] = None):
    """Parse an alias file into candidates, collapsing duplicates case-insensitively.

    When ``class_names`` is given, entries for classes outside it are rejected
    into the returned :class:`IngestReport` instead of raising.
    """
    doc = _load_json(path)
    _check_version(doc, path)
    classes = doc.get("classes")
    if not isinstance(classes, list):
        raise SchemaError("'classes' must be a list", path=path, field="classes",
                          line=_field_line(path, '"classes"'))
    lookup = None
    if class_names is not None:
        lookup = {n.lower(): i for i, n in enumerate(class_names)}
    report = IngestReport()
    out = []
    seen = set()
    for pos, entry in enumerate(classes):
        if not isinstance(entry, dict) or not isinstance(entry.get("name"), str) or not entry["name"].strip():
            raise SchemaError("each class needs a non-empty 'name'", path=path, field=f"classes[{pos}].name")
        aliases = entry.get("aliases", [])
        if not isinstance(aliases, list) or not all(isinstance(a, str) for a in aliases):
            raise SchemaError("'aliases' must be a list of strings", path=path,
                              field=f"classes[{pos}].aliases", line=_field_line(path, f'"{entry["name"]}"'))
        name = entry["name"].strip()
        if lookup is None:
            idx = pos
        elif name.lower() in lookup:
            idx = lookup[name.lower()]
        else:
            for a in aliases:
                report.reject(name, a, "unknown class")
            continue
        for alias in aliases:
            alias = " ".join(alias.split())
            if not alias:
                report.reject(name, alias, "empty alias")
                continue
            key = (idx, alias.lower())
            if key in seen:
                report.duplicates += 1
                continue
            seen.add(key)
            out.append(AliasCandidate(idx, name, alias, CandidateSource.LLM_FILE))
    return out, report


def load_templates(path) -> list:
    doc = _load_json(path)
    _check_version(doc, path)
    templates = doc.get("templates")
    if not isinstance(templates, list) or not templates:
        raise SchemaError("'templates' must be a non-empty list", path=path, field="templates")
    for t in templates:
        check_template(t)
    return list(templates)


def check_template(template: str) -> None:
    if not isinstance(template, str) or template.count("{}") != 1:
        raise InputContractError(f"template {template!r} must contain exactly one '{{}}' placeholder")


def write_candidates(path, dataset: str, grouped: dict) -> None:
    """Write ``{class name: [aliases]}`` in the alias-file schema."""
    doc = {
        "version": SCHEMA_VERSION,
        "dataset": dataset,
        "classes": [{"name": k, "aliases": list(v)} for k, v in grouped.items()],
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


# gate -----------------------------------------------------------------------


def hallucination_gate(candidates: Sequence[AliasCandidate], backend: EncoderBackend,
                       threshold: float = DEFAULT_GATE):
    """Keep candidates whose bare-name embedding has cosine >= ``threshold`` with the canonical name.

    Returns ``(kept, dropped)``; ``dropped`` pairs each rejected candidate with its cosine.
    """
    if not candidates:
        return [], []
    names = sorted({c.canonical_name for c in candidates})
    surfaces = sorted({c.alias_surface for c in candidates})
    name_emb = dict(zip(names, backend.encode_text(names)))
    alias_emb = dict(zip(surfaces, backend.encode_text(surfaces)))
    kept, dropped = [], []
    for c in candidates:
        cos = float(name_emb[c.canonical_name] @ alias_emb[c.alias_surface])
        if cos >= threshold:
            kept.append(c)
        else:
            dropped.append((c, cos))
    return kept, dropped


# queries --------------------------------------------------------------------


def build_query_embedding(name: str, templates: Sequence[str], backend: EncoderBackend) -> np.ndarray:
    """Mean of the unit embeddings of every ``template.format(name)``, renormalised."""
    if not templates:
        raise InputContractError("at least one template is required")
    for t in templates:
        check_template(t)
    emb = backend.encode_text([t.format(name) for t in templates]).astype(np.float64)
    mean = emb.mean(axis=0)
    return mean / np.linalg.norm(mean)


@dataclass
class VocabClass:
    name: str
    aliases: list = field(default_factory=list)
    fixed: list = field(default_factory=list)


@dataclass
class Vocabulary:
    """Canonical classes, their surviving aliases and the prompt templates.

    ``fixed`` aliases (e.g. extra background names) are never scored or filtered.
    """

    classes: list
    templates: list = field(default_factory=lambda: list(DEFAULT_TEMPLATES))
    dataset: str = ""
    stage: str = "candidates"

    def __post_init__(self):
        self.classes = [c if isinstance(c, VocabClass) else VocabClass(**c) for c in self.classes]
        if not self.classes:
            raise InputContractError("vocabulary needs at least one class")
        for t in self.templates:
            check_template(t)

    @classmethod
    def from_names(cls, names: Iterable[str], **kw) -> "Vocabulary":
        return cls([VocabClass(n) for n in names], **kw)

    @property
    def class_names(self) -> list:
        return [c.name for c in self.classes]

    def anchor_only(self) -> "Vocabulary":
        return Vocabulary([VocabClass(c.name, [], list(c.fixed)) for c in self.classes],
                          list(self.templates), self.dataset, self.stage)

    def with_aliases(self, retained: dict, stage: str = "filtered") -> "Vocabulary":
        return Vocabulary(
            [VocabClass(c.name, list(retained.get(i, [])), list(c.fixed)) for i, c in enumerate(self.classes)],
            list(self.templates), self.dataset, stage,
        )

    def with_templates(self, templates) -> "Vocabulary":
        return Vocabulary(list(self.classes), list(templates), self.dataset, self.stage)

    def entries(self):
        """``(class_index, surface, kind)`` in canonical order: anchor, fixed, then aliases."""
        for i, c in enumerate(self.classes):
            yield i, c.name, QueryKind.CANONICAL
            for a in c.fixed:
                yield i, a, QueryKind.ALIAS
            for a in c.aliases:
                yield i, a, QueryKind.ALIAS

    def size(self) -> int:
        return sum(1 + len(c.fixed) + len(c.aliases) for c in self.classes)

    def candidates(self) -> list:
        return [AliasCandidate(i, c.name, a) for i, c in enumerate(self.classes) for a in c.aliases]

    def to_dict(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "dataset": self.dataset,
            "stage": self.stage,
            "templates": list(self.templates),
            "classes": [
                {"name": c.name, "aliases": list(c.aliases), **({"fixed": list(c.fixed)} if c.fixed else {})}
                for c in self.classes
            ],
        }

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        doc = _load_json(path)
        _check_version(doc, path)
        try:
            classes = [VocabClass(c["name"], list(c.get("aliases", [])), list(c.get("fixed", [])))
                       for c in doc["classes"]]
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed class entry ({exc})", path=path, field="classes") from exc
        return cls(classes, list(doc.get("templates") or DEFAULT_TEMPLATES), doc.get("dataset", ""),
                   doc.get("stage", "candidates"))


def build_vocabulary(class_names: Sequence[str], candidates: Sequence[AliasCandidate],
                     templates=DEFAULT_TEMPLATES, dataset: str = "", fixed: Optional[dict] = None) -> Vocabulary:
    grouped = {i: [] for i in range(len(class_names))}
    for c in candidates:
        if c.alias_surface.lower() != class_names[c.class_index].lower():
            grouped[c.class_index].append(c.alias_surface)
    fixed = fixed or {}
    return Vocabulary(
        [VocabClass(n, grouped[i], list(fixed.get(i, []))) for i, n in enumerate(class_names)],
        list(templates), dataset, "candidates",
    )


@dataclass
class QuerySet:
    """Embedded queries laid out contiguously by class.

    Class ``c`` owns rows ``group_ptr[c]:group_ptr[c + 1]``; the first row of
    every group is the canonical name.
    """

    queries: list
    class_names: list
    templates: list

    def __post_init__(self):
        counts = np.bincount([q.class_index for q in self.queries], minlength=len(self.class_names))
        idx = [q.class_index for q in self.queries]
        if idx != sorted(idx) or (counts == 0).any():
            raise InputContractError("queries must be grouped by class with every class present")
        self.group_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.embeddings = np.stack([q.embedding for q in self.queries])

    def __len__(self):
        return len(self.queries)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def keys(self) -> list:
        return [q.key for q in self.queries]

    @property
    def class_of(self) -> np.ndarray:
        return np.array([q.class_index for q in self.queries], dtype=np.int64)

    @property
    def anchor_columns(self) -> np.ndarray:
        return self.group_ptr[:-1].copy()

    @classmethod
    def build(cls, vocab: Vocabulary, backend: EncoderBackend, templates=None,
              per_template: bool = False) -> "QuerySet":
        templates = list(templates or vocab.templates)
        queries = []
        for i, surface, kind in vocab.entries():
            if per_template:
                for t in templates:
                    emb = build_query_embedding(surface, [t], backend)
                    queries.append(TextQuery(i, t.format(surface), QueryKind.TEMPLATE_INSTANCE, emb))
            else:
                queries.append(TextQuery(i, surface, kind, build_query_embedding(surface, templates, backend)))
        return cls(queries, vocab.class_names, templates)


# optional LLM transport -------------------------------------------------------

ALIAS_QUERY = (
    "List 20 short noun phrases, worded the way image captions would, that name a {{{name}}}{scene}. "
    "Include synonyms, plural forms, sub-types and visually concrete variants. "
    "Answer with a comma-separated list only."
)


def alias_prompt(name: str, scene: Optional[str] = None) -> str:
    return ALIAS_QUERY.format(name=name, scene=f" in {{{scene}}}" if scene else "")


def parse_alias_answer(text: str) -> list:
    """Split a comma/newline separated list answer into clean phrases."""
    parts = re.split(r"[,\n;]", text)
    out = []
    for p in parts:
        p = re.sub(r"^\s*(?:\d+[.)]|[-*•])\s*", "", p).strip().strip(".").strip()
        if p:
            out.append(p)
    return out


class LLMAliasClient:
    """Chat-completions client that writes the alias-file schema. Disabled unless called."""

    def __init__(self, url: str, model: str, api_key: Optional[str] = None, timeout: float = 60.0):
        self.url = url
        self.model = model
        self.api_key = api_key
        self.timeout = timeout

    def ask(self, name: str, scene: Optional[str] = None) -> list:
        import httpx

        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        body = {"model": self.model, "messages": [{"role": "user", "content": alias_prompt(name, scene)}]}
        resp = httpx.post(self.url, json=body, headers=headers, timeout=self.timeout)
        resp.raise_for_status()
        return parse_alias_answer(resp.json()["choices"][0]["message"]["content"])

    def generate(self, class_names: Sequence[str], out_path, dataset: str = "", scene: Optional[str] = None):
        grouped = {n: self.ask(n, scene) for n in class_names}
        write_candidates(out_path, dataset, grouped)
        return grouped
