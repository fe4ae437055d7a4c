"""Context-vs-aspect similarity features for entity aspect linking."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .encoders import EncoderProvider, WordEmbeddingTable, cosine, top_k_by_similarity
from .kg import AspectKG, AspectNode, DataError
from .ltr import FeatureRow, QueryList

FEATURE_NAMES = (
    "name-bm25",
    "name-tfidf",
    "name-w2v",
    "content-bm25",
    "content-tfidf",
    "content-overlap",
    "content-w2v",
    "image",
)
TEXT_FEATURES = tuple(range(7))
ALL_FEATURES = tuple(range(8))
IMAGE_INDEX = 7

BM25_K1 = 1.2
BM25_B = 0.75

_TOKEN = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class ContextSentence:
    raw: str
    entity_id: str = ""
    entities: frozenset[str] | None = None
    tokens: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(tokenize(self.raw)))


@dataclass(frozen=True)
class AspectDoc:
    aspect_id: str
    name: str
    content: str = ""
    entities: frozenset[str] | None = None

    def __post_init__(self):
        if not self.name.strip():
            raise DataError(f"aspect {self.aspect_id!r}: empty name")


@dataclass(frozen=True)
class CorpusStats:
    N: int
    df: dict
    avgdl: float

    @classmethod
    def from_documents(cls, docs: Sequence[Sequence[str]]) -> "CorpusStats":
        df = Counter()
        for d in docs:
            df.update(set(d))
        n = len(docs)
        avgdl = sum(len(d) for d in docs) / n if n else 0.0
        return cls(n, dict(df), avgdl)

    def bm25_idf(self, token: str) -> float:
        df = self.df.get(token, 0)
        return math.log(1.0 + (self.N - df + 0.5) / (df + 0.5))

    def smooth_idf(self, token: str) -> float:
        return math.log((1.0 + self.N) / (1.0 + self.df.get(token, 0))) + 1.0


def _tokens(x) -> Sequence[str]:
    return x.tokens if hasattr(x, "tokens") else x


def bm25(ctx, doc, stats: CorpusStats, k1: float = BM25_K1, b: float = BM25_B) -> float:
    q = _tokens(ctx)
    d = _tokens(doc)
    if stats.N == 0 or not d:
        return 0.0
    tf = Counter(d)
    norm = k1 * (1.0 - b + b * len(d) / stats.avgdl) if stats.avgdl > 0 else k1
    score = 0.0
    for t in set(q):
        f = tf.get(t, 0)
        if f:
            score += stats.bm25_idf(t) * f * (k1 + 1.0) / (f + norm)
    return score


def tfidf_vector(tokens, stats: CorpusStats) -> dict[str, float]:
    return {t: (1.0 + math.log(f)) * stats.smooth_idf(t) for t, f in Counter(tokens).items()}


def _sparse_cosine(a: dict, b: dict) -> float:
    if not a or not b:
        return 0.0
    if len(a) > len(b):
        a, b = b, a
    dot = sum(w * b.get(t, 0.0) for t, w in a.items())
    na = math.sqrt(sum(w * w for w in a.values()))
    nb = math.sqrt(sum(w * w for w in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return min(1.0, dot / (na * nb))


def tfidf_cosine(ctx, doc, stats: CorpusStats) -> float:
    return _sparse_cosine(tfidf_vector(_tokens(ctx), stats), tfidf_vector(_tokens(doc), stats))


def overlap(ctx, doc) -> int:
    """Shared unique words, plus shared entity ids when both sides are annotated."""
    n = len(set(_tokens(ctx)) & set(_tokens(doc)))
    ce = getattr(ctx, "entities", None)
    de = getattr(doc, "entities", None)
    if ce is not None and de is not None:
        n += len(set(ce) & set(de))
    return n


def _w2v_vector(tokens, table: WordEmbeddingTable, stats: CorpusStats):
    acc = None
    for t, w in tfidf_vector(tokens, stats).items():
        if t in table:
            acc = w * table[t] if acc is None else acc + w * table[t]
    return acc


def w2v_sim(ctx, doc, table: WordEmbeddingTable, stats: CorpusStats) -> float:
    u = _w2v_vector(_tokens(ctx), table, stats)
    v = _w2v_vector(_tokens(doc), table, stats)
    if u is None or v is None:
        return 0.0
    return cosine(u, v)


def _mean_context_similarity(ctx, image_ids, provider) -> float:
    if not image_ids:
        return 0.0
    q = provider.encode_text(ctx.raw)
    return float(np.mean([cosine(q, provider.encode_image(i)) for i in image_ids]))


def image_feature(ctx: ContextSentence, aspect: AspectNode, kg: AspectKG, provider: EncoderProvider, k: int = 5) -> float:
    """Mean context/image similarity over the aspect's top-``k`` images by label similarity."""
    ids = kg.images_under(aspect.entity_id, aspect.path)
    if not ids:
        return 0.0
    key = provider.encode_text(aspect.path[0])
    selected = top_k_by_similarity(key, [(i, provider.encode_image(i)) for i in ids], k)
    return _mean_context_similarity(ctx, [i for i, _ in selected], provider)


def kg_image_scorer(kg: AspectKG, provider: EncoderProvider, k: int = 5):
    """Image feature callback for :func:`assemble_feature_rows` (aspect name = first-level label)."""

    def score(ctx: ContextSentence, doc: AspectDoc) -> float:
        return image_feature(ctx, AspectNode(ctx.entity_id, (doc.name,)), kg, provider, k)

    return score


def sample_feature_subsets(seed: int, sizes=range(1, 7), n_text: int = 7) -> dict[int, tuple[int, ...]]:
    """Seeded text-feature subsets per size: prefixes of one random permutation.

    Prefixes keep the subsets nested, so a larger subset never carries less
    information than a smaller one drawn with the same seed.
    """
    perm = np.random.default_rng(seed).permutation(n_text)
    return {k: tuple(sorted(int(i) for i in perm[:k])) for k in sizes}


def parse_feature_indices(spec) -> tuple[int, ...]:
    """Accept "0,3,7", names such as "content-bm25", or "all"/"text"."""
    if spec is None or spec == "all":
        return ALL_FEATURES
    if spec == "text":
        return TEXT_FEATURES
    if isinstance(spec, str):
        spec = [s.strip() for s in spec.split(",") if s.strip()]
    out = []
    for s in spec:
        idx = FEATURE_NAMES.index(s) if isinstance(s, str) and not s.isdigit() else int(s)
        if not 0 <= idx < len(FEATURE_NAMES):
            raise ValueError(f"feature index {idx} out of range")
        out.append(idx)
    if len(set(out)) != len(out):
        raise ValueError("duplicate feature index")
    return tuple(sorted(out))


def assemble_feature_rows(
    ctx: ContextSentence,
    candidates: Sequence[AspectDoc],
    gold: str,
    query_id: str,
    features: Sequence[int] = ALL_FEATURES,
    table: WordEmbeddingTable | None = None,
    image_scorer: Callable[[ContextSentence, AspectDoc], float] | None = None,
) -> QueryList:
    """One feature row per candidate aspect, in canonical feature order."""
    features = tuple(sorted(features))
    if gold not in {c.aspect_id for c in candidates}:
        raise DataError(f"query {query_id!r}: gold aspect {gold!r} not among candidates")
    if IMAGE_INDEX in features and image_scorer is None:
        raise ValueError("image feature requested without an image scorer")
    if table is None and ({2, 6} & set(features)):
        raise ValueError("word-vector features requested without a word embedding table")

    name_toks = [tokenize(c.name) for c in candidates]
    content_toks = [tokenize(c.content) for c in candidates]
    name_stats = CorpusStats.from_documents(name_toks)
    content_stats = CorpusStats.from_documents(content_toks)

    rows = []
    for c, nt, ct in zip(candidates, name_toks, content_toks):
        cdoc = _Annotated(ct, c.entities)
        values = []
        for f in features:
            if f == 0:
                values.append(bm25(ctx, nt, name_stats))
            elif f == 1:
                values.append(tfidf_cosine(ctx, nt, name_stats))
            elif f == 2:
                values.append(w2v_sim(ctx, nt, table, name_stats))
            elif f == 3:
                values.append(bm25(ctx, ct, content_stats))
            elif f == 4:
                values.append(tfidf_cosine(ctx, ct, content_stats))
            elif f == 5:
                values.append(float(overlap(ctx, cdoc)))
            elif f == 6:
                values.append(w2v_sim(ctx, ct, table, content_stats))
            else:
                values.append(image_scorer(ctx, c))
        rows.append(FeatureRow(query_id, c.aspect_id, tuple(values), int(c.aspect_id == gold)))
    return QueryList(query_id, tuple(rows))


@dataclass(frozen=True)
class _Annotated:
    tokens: Sequence[str]
    entities: frozenset[str] | None
