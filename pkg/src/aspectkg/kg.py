"""Aspect-aware multi-modal knowledge graph: records, validation, persistence."""

from __future__ import annotations

import json
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable

ENTITY_TYPES = [
    "Capital and Country",
    "Company",
    "War",
    "Holiday",
    "Human (Canada)",
    "Human (China)",
    "Human (French)",
    "Human (UK)",
    "Sovereign State",
    "State (US)",
    "University (Canada)",
    "University (UK)",
    "University (US)",
    "Film (En)",
    "Series (En)",
]
_type_registry = set(ENTITY_TYPES)

DEFAULT_BLACKLIST = frozenset({"notes", "external links", "references", "see also"})

SOURCES = ("wikipedia", "search-engine")
KG_FILES = {
    "entities": "entities.jsonl",
    "aspects": "aspects.jsonl",
    "images": "images.jsonl",
    "links": "links.jsonl",
}


class DataError(ValueError):
    """Invalid or inconsistent input data."""


def register_entity_type(name: str) -> None:
    """Allow an entity type beyond the built-in fifteen."""
    if not name.strip():
        raise ValueError("entity type must be non-empty")
    _type_registry.add(name)


def entity_types() -> frozenset[str]:
    return frozenset(_type_registry)


def normalize_label(label: str) -> str:
    return " ".join(label.split()).casefold()


def is_blacklisted(label: str, blacklist: Iterable[str]) -> bool:
    key = normalize_label(label)
    return any(key == normalize_label(b) for b in blacklist)


@dataclass(frozen=True)
class EntityRecord:
    id: str
    name: str
    entity_type: str
    aliases: tuple[str, ...] = ()
    pageviews: int = 0

    def __post_init__(self):
        object.__setattr__(self, "aliases", tuple(self.aliases))

    def key(self):
        return self.id


@dataclass(frozen=True)
class AspectNode:
    entity_id: str
    path: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "path", tuple(self.path))

    @property
    def label(self) -> str:
        return self.path[-1]

    def key(self):
        return (self.entity_id, self.path)


@dataclass(frozen=True)
class ImageRef:
    image_id: str
    locator: str
    source: str
    origin_query: str | None = None
    search_rank: int | None = None

    def key(self):
        return self.image_id


@dataclass(frozen=True)
class AspectImageLink:
    entity_id: str
    aspect_path: tuple[str, ...]
    image_id: str
    relevance: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "aspect_path", tuple(self.aspect_path))

    def key(self):
        return (self.entity_id, self.aspect_path, self.image_id)


def _check_entity(e: EntityRecord) -> None:
    if not e.id:
        raise DataError("entity id must be non-empty")
    if not e.name or not e.name.strip():
        raise DataError(f"entity {e.id!r}: name must be non-empty")
    if e.entity_type not in _type_registry:
        raise DataError(f"entity {e.id!r}: unknown entity_type {e.entity_type!r}")
    if not isinstance(e.pageviews, int) or e.pageviews < 0:
        raise DataError(f"entity {e.id!r}: pageviews must be a non-negative integer")


def _check_aspect(a: AspectNode, blacklist) -> None:
    if not a.path:
        raise DataError(f"aspect of {a.entity_id!r}: empty path")
    for label in a.path:
        if not isinstance(label, str) or not label or label != label.strip():
            raise DataError(f"aspect {a.key()!r}: labels must be trimmed and non-empty")
        if is_blacklisted(label, blacklist):
            raise DataError(f"aspect {a.key()!r}: blacklisted label {label!r}")


def _check_image(im: ImageRef) -> None:
    if not im.image_id:
        raise DataError("image id must be non-empty")
    if im.source not in SOURCES:
        raise DataError(f"image {im.image_id!r}: unknown source {im.source!r}")
    if (im.search_rank is not None) != (im.source == "search-engine"):
        raise DataError(f"image {im.image_id!r}: search_rank must be set iff source is search-engine")
    if im.search_rank is not None and not 1 <= im.search_rank <= 5:
        raise DataError(f"image {im.image_id!r}: search_rank {im.search_rank} outside 1..5")


def _check_link(ln: AspectImageLink) -> None:
    if ln.relevance is not None and not -1.0 <= ln.relevance <= 1.0:
        raise DataError(f"link {ln.key()!r}: relevance outside [-1, 1]")


@dataclass(frozen=True)
class AspectKG:
    """Immutable graph; use :meth:`build` to get a validated, sorted instance."""

    entities: tuple[EntityRecord, ...] = ()
    aspects: tuple[AspectNode, ...] = ()
    images: tuple[ImageRef, ...] = ()
    links: tuple[AspectImageLink, ...] = field(default=())

    @classmethod
    def build(cls, entities=(), aspects=(), images=(), links=(), blacklist=DEFAULT_BLACKLIST) -> "AspectKG":
        entities = _sorted_unique(entities, "entity")
        aspects = _sorted_unique(aspects, "aspect")
        images = _sorted_unique(images, "image")
        links = _sorted_unique(links, "link")
        for e in entities:
            _check_entity(e)
        for a in aspects:
            _check_aspect(a, blacklist)
        for im in images:
            _check_image(im)
        entity_ids = {e.id for e in entities}
        aspect_keys = {a.key() for a in aspects}
        image_ids = {im.image_id for im in images}
        for a in aspects:
            if a.entity_id not in entity_ids:
                raise DataError(f"aspect {a.key()!r}: dangling entity {a.entity_id!r}")
        for ln in links:
            _check_link(ln)
            if ln.entity_id not in entity_ids:
                raise DataError(f"link {ln.key()!r}: dangling entity")
            if (ln.entity_id, ln.aspect_path) not in aspect_keys:
                raise DataError(f"link {ln.key()!r}: dangling aspect")
            if ln.image_id not in image_ids:
                raise DataError(f"link {ln.key()!r}: dangling image")
        return cls(entities, aspects, images, links)

    @cached_property
    def entity_by_id(self) -> dict[str, EntityRecord]:
        return {e.id: e for e in self.entities}

    @cached_property
    def image_by_id(self) -> dict[str, ImageRef]:
        return {im.image_id: im for im in self.images}

    @cached_property
    def _links_by_entity(self) -> dict[str, list[AspectImageLink]]:
        out = defaultdict(list)
        for ln in self.links:
            out[ln.entity_id].append(ln)
        return out

    @cached_property
    def _aspects_by_entity(self) -> dict[str, list[AspectNode]]:
        out = defaultdict(list)
        for a in self.aspects:
            out[a.entity_id].append(a)
        return out

    def aspects_of(self, entity_id: str) -> list[AspectNode]:
        return list(self._aspects_by_entity.get(entity_id, ()))

    def first_level_labels(self, entity_id: str) -> list[str]:
        return sorted({a.path[0] for a in self._aspects_by_entity.get(entity_id, ())})

    def links_of(self, entity_id: str) -> list[AspectImageLink]:
        return list(self._links_by_entity.get(entity_id, ()))

    def images_of(self, entity_id: str) -> list[str]:
        """Distinct image ids linked anywhere under the entity, sorted."""
        return sorted({ln.image_id for ln in self._links_by_entity.get(entity_id, ())})

    def images_under(self, entity_id: str, path_prefix) -> list[str]:
        """Distinct image ids linked to the aspect or any of its sub-aspects."""
        prefix = tuple(path_prefix)
        n = len(prefix)
        return sorted(
            {ln.image_id for ln in self._links_by_entity.get(entity_id, ()) if ln.aspect_path[:n] == prefix}
        )


def _sorted_unique(records, kind):
    records = sorted(records, key=lambda r: r.key())
    for prev, cur in zip(records, records[1:]):
        if prev.key() == cur.key():
            raise DataError(f"duplicate {kind} key {cur.key()!r}")
    return tuple(records)


# -- persistence ------------------------------------------------------------

def _record_to_dict(rec) -> dict:
    d = asdict(rec)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def _dumps(d: dict) -> str:
    return json.dumps(d, ensure_ascii=False, sort_keys=True)


def save_kg(kg: AspectKG, directory) -> None:
    """Write the four sorted JSONL record files into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, fname in KG_FILES.items():
        records = sorted(getattr(kg, name), key=lambda r: r.key())
        for prev, cur in zip(records, records[1:]):
            if prev.key() == cur.key():
                raise DataError(f"duplicate {name} key {cur.key()!r}")
        tmp = directory / (fname + ".tmp")
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            for rec in records:
                fh.write(_dumps(_record_to_dict(rec)) + "\n")
        os.replace(tmp, directory / fname)


_FIELDS = {
    "entities": (EntityRecord, {"id", "name", "entity_type", "aliases", "pageviews"}, {"id", "name", "entity_type"}),
    "aspects": (AspectNode, {"entity_id", "path"}, {"entity_id", "path"}),
    "images": (ImageRef, {"image_id", "locator", "source", "origin_query", "search_rank"}, {"image_id", "locator", "source"}),
    "links": (AspectImageLink, {"entity_id", "aspect_path", "image_id", "relevance"}, {"entity_id", "aspect_path", "image_id"}),
}


def _read_records(path: Path, name: str):
    cls, allowed, required = _FIELDS[name]
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path.name}:{lineno}"
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: malformed JSON ({exc.msg})") from None
            if not isinstance(d, dict):
                raise DataError(f"{where}: expected a JSON object")
            missing = required - d.keys()
            extra = d.keys() - allowed
            if missing or extra:
                raise DataError(f"{where}: missing fields {sorted(missing)} / unknown fields {sorted(extra)}")
            try:
                rec = cls(**d)
            except TypeError as exc:
                raise DataError(f"{where}: {exc}") from None
            out.append((rec, where))
    return out


def load_kg(directory, blacklist=DEFAULT_BLACKLIST) -> AspectKG:
    """Load and validate a KG directory; errors name the offending file and line."""
    directory = Path(directory)
    loaded = {}
    for name, fname in KG_FILES.items():
        path = directory / fname
        if not path.exists():
            raise DataError(f"{path}: missing KG file")
        loaded[name] = _read_records(path, name)

    # Validate record by record first so the error can cite the source line.
    seen = {}
    for name, recs in loaded.items():
        keys = {}
        for rec, where in recs:
            if rec.key() in keys:
                raise DataError(f"{where}: duplicate key {rec.key()!r} (first at {keys[rec.key()]})")
            keys[rec.key()] = where
            try:
                if name == "entities":
                    _check_entity(rec)
                elif name == "aspects":
                    _check_aspect(rec, blacklist)
                elif name == "images":
                    _check_image(rec)
                else:
                    _check_link(rec)
            except DataError as exc:
                raise DataError(f"{where}: {exc}") from None
        seen[name] = keys
    for rec, where in loaded["aspects"]:
        if rec.entity_id not in seen["entities"]:
            raise DataError(f"{where}: aspect references unknown entity {rec.entity_id!r}")
    for rec, where in loaded["links"]:
        if rec.entity_id not in seen["entities"]:
            raise DataError(f"{where}: link references unknown entity {rec.entity_id!r}")
        if (rec.entity_id, rec.aspect_path) not in seen["aspects"]:
            raise DataError(f"{where}: link references unknown aspect {list(rec.aspect_path)!r} of {rec.entity_id!r}")
        if rec.image_id not in seen["images"]:
            raise DataError(f"{where}: link references unknown image {rec.image_id!r}")
    return AspectKG.build(
        *(tuple(r for r, _ in loaded[name]) for name in KG_FILES), blacklist=blacklist
    )


# -- transformations ----------------------------------------------------------

def _max_relevance(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return max(a, b)


def flatten_to_first_level(kg: AspectKG) -> AspectKG:
    """Move every link to its first-level aspect, merging duplicates by max relevance."""
    merged: dict[tuple, AspectImageLink] = {}
    for ln in kg.links:
        path = ln.aspect_path[:1]
        key = (ln.entity_id, path, ln.image_id)
        if key in merged:
            rel = _max_relevance(merged[key].relevance, ln.relevance)
        else:
            rel = ln.relevance
        merged[key] = AspectImageLink(ln.entity_id, path, ln.image_id, rel)
    aspects = {(a.entity_id, a.path[:1]) for a in kg.aspects}
    return AspectKG.build(
        kg.entities,
        [AspectNode(e, p) for e, p in aspects],
        kg.images,
        merged.values(),
        blacklist=(),
    )


def compute_stats(kg: AspectKG) -> dict:
    n_entities = len(kg.entities)
    n_aspects = len(kg.aspects)
    n_images = len(kg.images)

    def ratio(x):
        return x / n_entities if n_entities else 0.0

    return {
        "n_entities": n_entities,
        "n_aspects": n_aspects,
        "n_images": n_images,
        "n_links": len(kg.links),
        "n_aspect_labels": len({normalize_label(a.label) for a in kg.aspects}),
        "images_per_entity": ratio(n_images),
        "aspects_per_entity": ratio(n_aspects),
    }
