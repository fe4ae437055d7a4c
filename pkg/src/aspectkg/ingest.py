"""Page parsing, aspect extraction and aspect-image harvesting."""

from __future__ import annotations

import json
import logging
import re
import threading
import time
import warnings
from dataclasses import dataclass, field
from html.parser import HTMLParser
from pathlib import Path
from typing import Protocol
from urllib.parse import unquote, urlsplit

from .kg import (
    DEFAULT_BLACKLIST,
    AspectImageLink,
    AspectNode,
    DataError,
    EntityRecord,
    ImageRef,
    is_blacklisted,
)

log = logging.getLogger(__name__)


class ParseWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Section:
    heading: str
    level: int
    paragraphs: tuple[str, ...] = ()
    images: tuple[ImageRef, ...] = ()
    children: tuple["Section", ...] = ()

    def to_dict(self) -> dict:
        return {
            "heading": self.heading,
            "level": self.level,
            "paragraphs": list(self.paragraphs),
            "images": [_image_to_dict(im) for im in self.images],
            "children": [c.to_dict() for c in self.children],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Section":
        return cls(
            heading=d["heading"],
            level=int(d["level"]),
            paragraphs=tuple(d.get("paragraphs", ())),
            images=tuple(ImageRef(**im) for im in d.get("images", ())),
            children=tuple(cls.from_dict(c) for c in d.get("children", ())),
        )


def _image_to_dict(im: ImageRef) -> dict:
    return {
        "image_id": im.image_id,
        "locator": im.locator,
        "source": im.source,
        "origin_query": im.origin_query,
        "search_rank": im.search_rank,
    }


@dataclass(frozen=True)
class PageDoc:
    entity_id: str
    title: str
    sections: tuple[Section, ...] = ()

    def __post_init__(self):
        for s in self.walk():
            if not s.heading.strip():
                raise DataError(f"page {self.entity_id!r}: empty heading")
            if not 2 <= s.level <= 4:
                raise DataError(f"page {self.entity_id!r}: heading level {s.level} outside 2..4")
            for c in s.children:
                if c.level != s.level + 1:
                    raise DataError(f"page {self.entity_id!r}: section {c.heading!r} breaks level nesting")

    def walk(self):
        stack = list(reversed(self.sections))
        while stack:
            s = stack.pop()
            yield s
            stack.extend(reversed(s.children))

    def to_dict(self) -> dict:
        return {
            "entity_id": self.entity_id,
            "title": self.title,
            "sections": [s.to_dict() for s in self.sections],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "PageDoc":
        return cls(d["entity_id"], d.get("title", ""), tuple(Section.from_dict(s) for s in d.get("sections", ())))


def load_page(path) -> PageDoc:
    """Read a PageDoc from JSON, or parse an ``.html`` file named after its entity id."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() in (".html", ".htm"):
        return parse_page_html(text, path.stem)
    try:
        return PageDoc.from_dict(json.loads(text))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: not a PageDoc ({exc})") from None


# -- HTML adapter -------------------------------------------------------------

_HEADINGS = {"h2": 2, "h3": 3, "h4": 4}
_BLOCK_TEXT = {"p", "li", "dd"}
_SKIP = {"script", "style", "noscript", "table"}
_WS = re.compile(r"\s+")


class _Builder:
    def __init__(self, heading, level):
        self.heading = heading
        self.level = level
        self.paragraphs = []
        self.images = []
        self.children = []

    def freeze(self) -> Section:
        return Section(
            self.heading,
            self.level,
            tuple(self.paragraphs),
            tuple(self.images),
            tuple(c.freeze() for c in self.children),
        )


class _PageParser(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.title = ""
        self.roots: list[_Builder] = []
        self.stack: list[_Builder] = []
        self.lead_paragraphs: list[str] = []
        self.lead_images: list[ImageRef] = []
        self.seen_heading = False
        self.open_tags: list[str] = []
        self.unbalanced = False
        self._skip_depth = 0
        self._ignore_depth = 0
        self._capture: str | None = None  # "h1", "hN", "p", "title"
        self._buf: list[str] = []
        self._heading_level = 0

    # tag bookkeeping for the unbalanced-markup warning
    def _push(self, tag):
        self.open_tags.append(tag)

    def _pop(self, tag):
        if tag in self.open_tags:
            while self.open_tags:
                top = self.open_tags.pop()
                if top == tag:
                    break
                if top not in ("p", "li", "dd", "dt"):
                    self.unbalanced = True
        else:
            self.unbalanced = True

    def handle_starttag(self, tag, attrs):
        attrs = dict(attrs)
        if tag in ("img", "br", "hr", "meta", "link", "input", "source", "wbr"):
            if tag == "img" and not self._skip_depth:
                self._add_image(attrs)
            return
        if tag == "p" and self._capture == "p":
            self._flush_paragraph()
        self._push(tag)
        if tag in _SKIP:
            self._skip_depth += 1
            return
        cls = attrs.get("class") or ""
        if self._ignore_depth or (tag in ("span", "sup", "div") and (
            "mw-editsection" in cls or "reference" in cls.split() or "navbox" in cls
        )):
            self._ignore_depth += 1
            return
        if self._skip_depth:
            return
        if tag == "title" and not self.title:
            self._start_capture("title")
        elif tag == "h1":
            self._start_capture("h1")
        elif tag in _HEADINGS:
            self._heading_level = _HEADINGS[tag]
            self._start_capture("hN")
        elif tag in _BLOCK_TEXT and self._capture is None:
            self._start_capture("p")

    def handle_startendtag(self, tag, attrs):
        self.handle_starttag(tag, attrs)
        if tag not in ("img", "br", "hr", "meta", "link", "input", "source", "wbr"):
            self.handle_endtag(tag)

    def handle_endtag(self, tag):
        if tag in ("img", "br", "hr", "meta", "link", "input", "source", "wbr"):
            return
        self._pop(tag)
        if tag in _SKIP and self._skip_depth:
            self._skip_depth -= 1
            return
        if self._ignore_depth:
            self._ignore_depth -= 1
            return
        if self._skip_depth:
            return
        if tag == "title" and self._capture == "title":
            self.title = self._end_capture()
        elif tag == "h1" and self._capture == "h1":
            text = self._end_capture()
            if text:
                self.title = text
        elif tag in _HEADINGS and self._capture == "hN":
            self._open_section(self._end_capture(), self._heading_level)
        elif tag in _BLOCK_TEXT and self._capture == "p":
            self._flush_paragraph()

    def handle_data(self, data):
        if self._skip_depth or self._ignore_depth:
            return
        if self._capture is not None:
            self._buf.append(data)

    def _start_capture(self, kind):
        if self._capture == "p":
            self._flush_paragraph()
        self._capture = kind
        self._buf = []

    def _end_capture(self) -> str:
        text = _WS.sub(" ", "".join(self._buf)).strip()
        self._capture = None
        self._buf = []
        return text

    def _flush_paragraph(self):
        text = self._end_capture()
        if not text:
            return
        if self.stack:
            self.stack[-1].paragraphs.append(text)
        elif not self.seen_heading:
            self.lead_paragraphs.append(text)

    def _open_section(self, heading, level):
        self.seen_heading = True
        if not heading:
            warnings.warn("empty heading skipped", ParseWarning, stacklevel=2)
            return
        while self.stack and self.stack[-1].level >= level:
            self.stack.pop()
        parent_level = self.stack[-1].level if self.stack else 1
        if level != parent_level + 1:
            warnings.warn(
                f"heading {heading!r} at level {level} under level {parent_level}; re-nested at {parent_level + 1}",
                ParseWarning,
                stacklevel=2,
            )
            level = parent_level + 1
        node = _Builder(heading, level)
        if self.stack:
            self.stack[-1].children.append(node)
        else:
            self.roots.append(node)
        self.stack.append(node)

    def _add_image(self, attrs):
        src = attrs.get("src") or attrs.get("data-src")
        if not src:
            return
        image_id = attrs.get("data-image-id") or _image_name(src)
        if not image_id:
            return
        ref = ImageRef(image_id=image_id, locator=src, source="wikipedia")
        if self.stack:
            self.stack[-1].images.append(ref)
        elif not self.seen_heading:
            self.lead_images.append(ref)


_THUMB = re.compile(r"^\d+px-")


def _image_name(src: str) -> str:
    parts = [unquote(p) for p in urlsplit(src).path.split("/") if p]
    if not parts:
        return ""
    # MediaWiki thumbnails: .../thumb/<File>/<NNN>px-<File>
    if len(parts) >= 2 and _THUMB.match(parts[-1]):
        return parts[-2]
    return parts[-1]


def parse_page_html(html: str, entity_id: str) -> PageDoc:
    """Parse MediaWiki-style rendered HTML (h2/h3/h4 sections) into a PageDoc.

    Content before the first heading is the lead and is not an aspect.  A page
    with body content but no headings yields one implicit section named after
    the page title.
    """
    p = _PageParser()
    p.feed(html)
    p.close()
    if p._capture == "p":
        p._flush_paragraph()
    if p.open_tags and any(t not in ("html", "body", "head", "p", "li", "dd", "dt") for t in p.open_tags):
        p.unbalanced = True
    if p.unbalanced:
        warnings.warn(f"unbalanced markup in page {entity_id!r}; best-effort parse", ParseWarning, stacklevel=2)
    title = p.title or entity_id
    if p.roots:
        sections = tuple(b.freeze() for b in p.roots)
    elif p.lead_paragraphs or p.lead_images:
        sections = (Section(title, 2, tuple(p.lead_paragraphs), tuple(p.lead_images)),)
    else:
        sections = ()
    return PageDoc(entity_id, title, sections)


# -- aspects, queries and images ---------------------------------------------------

def _kept_sections(page: PageDoc, blacklist):
    """Yield (path, section) for sections not removed by the blacklist."""
    stack = [((s.heading.strip(),), s) for s in reversed(page.sections)]
    while stack:
        path, s = stack.pop()
        if is_blacklisted(s.heading, blacklist):
            continue
        yield path, s
        stack.extend(((*path, c.heading.strip()), c) for c in reversed(s.children))


def extract_aspects(page: PageDoc, blacklist=DEFAULT_BLACKLIST) -> list[AspectNode]:
    seen = set()
    out = []
    for path, _ in _kept_sections(page, blacklist):
        if path not in seen:
            seen.add(path)
            out.append(AspectNode(page.entity_id, path))
    return out


@dataclass(frozen=True)
class QuerySentence:
    entity_id: str
    aspect_path: tuple[str, ...]
    text: str


_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


def split_sentences(paragraph: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_END.split(paragraph) if s.strip()]


def mentions(text: str, entity: EntityRecord) -> bool:
    low = text.casefold()
    return any(n.strip() and n.casefold() in low for n in (entity.name, *entity.aliases))


def extract_query_sentences(page: PageDoc, entity: EntityRecord, blacklist=DEFAULT_BLACKLIST) -> list[QuerySentence]:
    out = []
    for path, s in _kept_sections(page, blacklist):
        for para in s.paragraphs:
            for sent in split_sentences(para):
                if mentions(sent, entity):
                    out.append(QuerySentence(entity.id, path, sent))
    return out


def harvest_wikipedia_images(page: PageDoc, blacklist=DEFAULT_BLACKLIST) -> list[AspectImageLink]:
    links = {}
    for path, s in _kept_sections(page, blacklist):
        for im in s.images:
            link = AspectImageLink(page.entity_id, path, im.image_id)
            links[link.key()] = link
    return [links[k] for k in sorted(links)]


class SearchClient(Protocol):
    def search(self, query: str, k: int) -> list[ImageRef]: ...


def normalize_query(query: str) -> str:
    return " ".join(query.lower().split())


class FixtureSearchClient:
    """Offline image search backed by ``index.json`` (normalized query -> image ids)."""

    def __init__(self, directory):
        self.directory = Path(directory)
        with open(self.directory / "index.json", encoding="utf-8") as fh:
            raw = json.load(fh)
        self.index = {normalize_query(q): list(ids) for q, ids in raw.items()}

    def search(self, query: str, k: int) -> list[ImageRef]:
        ids = self.index.get(normalize_query(query), [])[:k]
        return [
            ImageRef(
                image_id=i,
                locator=f"fixture:{i}",
                source="search-engine",
                origin_query=query,
                search_rank=rank,
            )
            for rank, i in enumerate(ids, 1)
        ]


class LiveImageSearchClient:
    """Placeholder for an online image-search adapter; offline builds use fixtures."""

    def __init__(self, endpoint: str):
        self.endpoint = endpoint

    def search(self, query: str, k: int) -> list[ImageRef]:
        raise NotImplementedError("live image search is not available offline; use FixtureSearchClient")


class RateLimitedClient:
    """Wrap a client so that successive calls are at least ``min_interval`` seconds apart."""

    def __init__(self, client: SearchClient, min_interval: float = 0.0, clock=time.monotonic, sleep=time.sleep):
        self.client = client
        self.min_interval = min_interval
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._last = None

    def search(self, query: str, k: int) -> list[ImageRef]:
        with self._lock:
            if self._last is not None:
                wait = self.min_interval - (self._clock() - self._last)
                if wait > 0:
                    self._sleep(wait)
            self._last = self._clock()
        return self.client.search(query, k)


@dataclass
class SearchHarvest:
    links: list[AspectImageLink] = field(default_factory=list)
    images: list[ImageRef] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)
    n_queries: int = 0
    ranks: dict[tuple, int] = field(default_factory=dict)

    def report(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "n_skipped": len(self.skipped),
            "n_links": len(self.links),
            "n_images": len(self.images),
            "skipped": self.skipped,
        }


def harvest_search_images(queries, client: SearchClient, k: int = 5) -> SearchHarvest:
    """Link the top-``k`` search results of every query sentence to its aspect.

    Duplicate (entity, aspect, image) hits keep the best rank; failing queries
    are skipped and listed in the run report.
    """
    best: dict[tuple, ImageRef] = {}
    image_best: dict[str, ImageRef] = {}
    skipped = []
    for q in queries:
        try:
            results = client.search(q.text, k)
        except Exception as exc:  # a single bad query must not stop the run
            log.warning("search failed for %r: %s", q.text, exc)
            skipped.append({"entity_id": q.entity_id, "aspect_path": list(q.aspect_path), "query": q.text,
                            "error": f"{type(exc).__name__}: {exc}"})
            continue
        for rank, ref in enumerate(results[:k], 1):
            r = ref.search_rank or rank
            ref = ImageRef(ref.image_id, ref.locator, "search-engine", ref.origin_query or q.text, r)
            key = (q.entity_id, tuple(q.aspect_path), ref.image_id)
            if key not in best or r < best[key].search_rank:
                best[key] = ref
            if ref.image_id not in image_best or r < image_best[ref.image_id].search_rank:
                image_best[ref.image_id] = ref
    links = [AspectImageLink(e, p, i) for (e, p, i) in sorted(best)]
    return SearchHarvest(
        links=links,
        images=[image_best[i] for i in sorted(image_best)],
        skipped=skipped,
        n_queries=len(queries),
        ranks={key: best[key].search_rank for key in sorted(best)},
    )


def select_top_entities(candidates, n_per_type: int = 200) -> list[EntityRecord]:
    by_type: dict[str, list[EntityRecord]] = {}
    for e in candidates:
        by_type.setdefault(e.entity_type, []).append(e)
    out = []
    for etype in sorted(by_type):
        ranked = sorted(by_type[etype], key=lambda e: (-e.pageviews, e.id))
        out.extend(ranked[: max(n_per_type, 0)])
    return out
