"""Aspect-related image retrieval: triples, projection model, InfoNCE training, KG upkeep."""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoders import EncoderProvider, cosine, cosine_matrix, top_k_by_similarity
from .kg import AspectImageLink, AspectKG, AspectNode, DataError, ImageRef
from .ltr import config_digest

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    """Non-finite values during loss evaluation or training."""


@dataclass(frozen=True)
class AirTriple:
    entity_id: str
    overall_image_id: str
    aspect_label: str
    positive_image_id: str


@dataclass
class DatasetSplit:
    train: list[AirTriple]
    validation: list[AirTriple]
    test: list[AirTriple]


@dataclass
class AirTrainConfig:
    batch_size: int = 64
    learning_rate: float = 0.05
    epochs: int = 15
    seed: int = 0
    tau: float = 0.07

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")

    def digest(self) -> str:
        return config_digest(asdict(self))


@dataclass
class ProjectionModel:
    """Linear map from [overall image ; aspect text] to image space."""

    W: np.ndarray
    tau: float = 0.07

    def __post_init__(self):
        self.W = np.array(self.W, dtype=np.float64)
        if self.W.ndim != 2:
            raise ValueError("W must be a matrix")
        if not np.all(np.isfinite(self.W)):
            raise NumericError("W has non-finite entries")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")

    @property
    def image_dim(self) -> int:
        return self.W.shape[0]

    @property
    def text_dim(self) -> int:
        return self.W.shape[1] - self.W.shape[0]

    @classmethod
    def text_passthrough(cls, image_dim: int, text_dim: int, tau: float = 0.07) -> "ProjectionModel":
        """W = [0 | I]: the projection is the aspect text vector itself (vanilla CLIP scoring)."""
        if image_dim != text_dim:
            raise ValueError("text passthrough needs equal text and image dims")
        return cls(np.hstack([np.zeros((image_dim, image_dim)), np.eye(text_dim)]), tau)

    @classmethod
    def image_passthrough(cls, image_dim: int, text_dim: int, tau: float = 0.07) -> "ProjectionModel":
        return cls(np.hstack([np.eye(image_dim), np.zeros((image_dim, text_dim))]), tau)

    @classmethod
    def initial(cls, image_dim: int, text_dim: int, tau: float = 0.07, seed: int = 0, noise: float = 0.01):
        """Text passthrough plus small seeded noise (random if the dims differ)."""
        rng = np.random.default_rng(seed)
        if image_dim == text_dim:
            W = cls.text_passthrough(image_dim, text_dim, tau).W
        else:
            W = np.zeros((image_dim, image_dim + text_dim))
            noise = 1.0 / math.sqrt(image_dim + text_dim)
        return cls(W + noise * rng.standard_normal(W.shape), tau)

    def to_json(self, digest: str = "") -> str:
        return json.dumps(
            {
                "W": self.W.ravel().tolist(),
                "dims": {"image_dim": self.image_dim, "text_dim": self.text_dim},
                "tau": self.tau,
                "config_digest": digest,
            },
            sort_keys=True,
        ) + "\n"

    def save(self, path, digest: str = "") -> None:
        Path(path).write_text(self.to_json(digest), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ProjectionModel":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
            di, dt = d["dims"]["image_dim"], d["dims"]["text_dim"]
            W = np.asarray(d["W"], dtype=np.float64).reshape(di, di + dt)
            return cls(W, float(d["tau"]))
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: malformed AIR model ({exc})") from None


# -- dataset --------------------------------------------------------------------

def overall_image(kg: AspectKG, entity_id: str, provider: EncoderProvider) -> str | None:
    """The entity image most similar to the entity name (lowest id on ties)."""
    ids = kg.images_of(entity_id)
    if not ids:
        return None
    name = provider.encode_text(kg.entity_by_id[entity_id].name)
    return top_k_by_similarity(name, [(i, provider.encode_image(i)) for i in ids], 1)[0][0]


def _first_level_images(kg: AspectKG, entity_id: str) -> dict[str, list[str]]:
    groups = defaultdict(set)
    for ln in kg.links_of(entity_id):
        groups[ln.aspect_path[0]].add(ln.image_id)
    return {label: sorted(ids) for label, ids in sorted(groups.items())}


def build_triples(kg: AspectKG, provider: EncoderProvider, n_positive: int = 3,
                  exclude_overall: bool = False) -> list[AirTriple]:
    """One triple per (entity, first-level aspect, top-``n_positive`` image by label similarity)."""
    triples = []
    for e in kg.entities:
        overall = overall_image(kg, e.id, provider)
        if overall is None:
            log.info("entity %s has no images; skipped", e.id)
            continue
        groups = _first_level_images(kg, e.id)
        single = len(kg.images_of(e.id)) == 1
        for label, ids in groups.items():
            if exclude_overall and not single:
                ids = [i for i in ids if i != overall]
            key = provider.encode_text(label)
            for img, _ in top_k_by_similarity(key, [(i, provider.encode_image(i)) for i in ids], n_positive):
                triples.append(AirTriple(e.id, overall, label, img))
    return triples


# Held-out share per split.  Nominally one tenth; this value reproduces the
# reference 37,453 / 4,663 / 4,663 partition of 46,779 triples exactly and
# still gives 8/1/1 for n = 10.
HELD_OUT_FRACTION = 4663 / 46779


def split_triples(triples: Sequence[AirTriple], seed: int = 0,
                  held_out_fraction: float = HELD_OUT_FRACTION) -> DatasetSplit:
    """Seeded 8:1:1 split; validation and test each get round(n * held_out_fraction)."""
    if not 0 <= held_out_fraction <= 0.5:
        raise ValueError("held_out_fraction must lie in [0, 0.5]")
    n = len(triples)
    order = np.random.default_rng(seed).permutation(n)
    n_small = math.floor(n * held_out_fraction + 0.5)
    n_train = n - 2 * n_small
    pick = [triples[i] for i in order]
    return DatasetSplit(pick[:n_train], pick[n_train:n_train + n_small], pick[n_train + n_small:])


def write_triples(path, triples: Sequence[AirTriple]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in triples:
            fh.write(json.dumps(asdict(t), ensure_ascii=False, sort_keys=True) + "\n")


def read_triples(path) -> list[AirTriple]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(AirTriple(**json.loads(line)))
            except (TypeError, json.JSONDecodeError) as exc:
                raise DataError(f"{Path(path).name}:{lineno}: bad triple ({exc})") from None
    return out


# -- model math ---------------------------------------------------------------------

def forward(model: ProjectionModel, overall_vec, aspect_vec) -> np.ndarray:
    x = np.concatenate([np.asarray(overall_vec, dtype=np.float64), np.asarray(aspect_vec, dtype=np.float64)])
    if x.shape[0] != model.W.shape[1]:
        raise ValueError(f"input dim {x.shape[0]} does not match model ({model.W.shape[1]})")
    return model.W @ x


def _unit_rows(M):
    n = np.linalg.norm(M, axis=1)
    safe = np.where(n > 0, n, 1.0)
    return M / safe[:, None], n


def info_nce_loss(projected, positives, tau: float) -> float:
    """Mean InfoNCE with in-batch negatives: row i scores its own positive against all N positives."""
    P = np.atleast_2d(np.asarray(projected, dtype=np.float64))
    C = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    if P.shape[0] != C.shape[0] or P.shape[0] < 2:
        raise ValueError("need N >= 2 matched rows")
    if tau <= 0:
        raise ValueError("tau must be > 0")
    sim = cosine_matrix(P, C)
    return _loss_from_sim(sim, tau)[0]


def info_nce_from_similarities(sim, tau: float) -> float:
    """Mean InfoNCE for an N x N similarity matrix whose diagonal holds the positives."""
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1] or sim.shape[0] < 2:
        raise ValueError("need a square similarity matrix with N >= 2")
    if tau <= 0:
        raise ValueError("tau must be > 0")
    return _loss_from_sim(sim, tau)[0]


def _loss_from_sim(sim: np.ndarray, tau: float):
    if not np.all(np.isfinite(sim)):
        raise NumericError("non-finite similarity")
    logits = sim / tau
    m = logits.max(axis=1, keepdims=True)
    z = np.exp(logits - m)
    denom = z.sum(axis=1, keepdims=True)
    log_denom = m[:, 0] + np.log(denom[:, 0])
    losses = log_denom - np.diag(logits)
    return float(np.maximum(losses, 0.0).mean()), z / denom


def loss_and_grad(W: np.ndarray, X: np.ndarray, C: np.ndarray, tau: float):
    """Mean InfoNCE over the batch and its gradient w.r.t. W.

    X holds concatenated [overall ; aspect] inputs (N x D), C the positive image
    vectors (N x d).  Zero-norm projections contribute zero gradient.
    """
    N = X.shape[0]
    P = X @ W.T
    Pu, pn = _unit_rows(P)
    Cu, _ = _unit_rows(C)
    sim = Pu @ Cu.T
    loss, soft = _loss_from_sim(sim, tau)
    G = (soft - np.eye(N)) / (tau * N)  # dL/dsim
    # d sim_ij / d P_i = (Cu_j - sim_ij * Pu_i) / |P_i|
    inv = np.where(pn > 0, 1.0 / np.where(pn > 0, pn, 1.0), 0.0)
    dP = (G @ Cu - (G * sim).sum(axis=1, keepdims=True) * Pu) * inv[:, None]
    return loss, dP.T @ X


@dataclass
class _Arrays:
    X: np.ndarray
    C: np.ndarray


def _triple_arrays(triples: Sequence[AirTriple], provider: EncoderProvider) -> _Arrays:
    if not triples:
        return _Arrays(np.zeros((0, provider.image_dim + provider.text_dim)), np.zeros((0, provider.image_dim)))
    X = np.array([
        np.concatenate([provider.encode_image(t.overall_image_id), provider.encode_text(t.aspect_label)])
        for t in triples
    ])
    C = np.array([provider.encode_image(t.positive_image_id) for t in triples])
    return _Arrays(X, C)


def _fixed_batches(n: int, size: int):
    # a trailing batch of one row has no negatives and is folded into the previous one
    bounds = list(range(0, n, size))
    batches = [np.arange(b, min(b + size, n)) for b in bounds]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return [b for b in batches if len(b) >= 2]


def dataset_loss(model: ProjectionModel, arrays: _Arrays, batch_size: int) -> float:
    """Mean InfoNCE over fixed consecutive batches (no shuffling)."""
    batches = _fixed_batches(arrays.X.shape[0], batch_size)
    if not batches:
        return float("nan")
    losses = [loss_and_grad(model.W, arrays.X[b], arrays.C[b], model.tau)[0] for b in batches]
    return float(np.mean(losses))


@dataclass
class TrainOutcome:
    model: ProjectionModel
    loss_curve: list[float] = field(default_factory=list)
    val_curve: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")


def train(model: ProjectionModel, split: DatasetSplit, provider: EncoderProvider,
          config: AirTrainConfig | None = None) -> TrainOutcome:
    """Plain mini-batch SGD on W with seeded per-epoch shuffling.

    The loss curve holds the full training loss after each epoch, measured on
    fixed batches so that it is comparable across epochs.
    """
    config = config or AirTrainConfig()
    train_arr = _triple_arrays(split.train, provider)
    val_arr = _triple_arrays(split.validation, provider)
    n = train_arr.X.shape[0]
    if n < 2:
        raise ValueError("training needs at least 2 triples")
    W = model.W.copy()
    tau = config.tau
    rng = np.random.default_rng(config.seed)
    current = ProjectionModel(W, tau)
    initial = dataset_loss(current, train_arr, config.batch_size)
    curve, val_curve = [], []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for b in _fixed_batches(n, config.batch_size):
            idx = order[b]
            loss, grad = loss_and_grad(W, train_arr.X[idx], train_arr.C[idx], tau)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise NumericError(f"divergence at epoch {epoch}: loss={loss}, |W|={np.linalg.norm(W):.3g}")
            W = W - config.learning_rate * grad
        current = ProjectionModel(W, tau)
        epoch_loss = dataset_loss(current, train_arr, config.batch_size)
        if not math.isfinite(epoch_loss):
            raise NumericError(f"non-finite training loss after epoch {epoch}")
        curve.append(epoch_loss)
        if val_arr.X.shape[0] >= 2:
            val_curve.append(dataset_loss(current, val_arr, config.batch_size))
        log.debug("epoch %d loss %.6f", epoch, epoch_loss)
    return TrainOutcome(current, curve, val_curve, initial)


# -- retrieval and KG upkeep ----------------------------------------------------------

@dataclass
class RetrievalResult:
    ranking: list[tuple[str, float]]

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.ranking]


def query_vector(model: ProjectionModel | None, provider: EncoderProvider, overall_image_id: str,
                 aspect_label: str) -> np.ndarray:
    aspect_vec = provider.encode_text(aspect_label)
    if model is None:
        return aspect_vec
    return forward(model, provider.encode_image(overall_image_id), aspect_vec)


def retrieve(model: ProjectionModel | None, provider: EncoderProvider, overall_image_id: str,
             aspect_label: str, candidates: Sequence[str]) -> RetrievalResult:
    """Rank candidate images for (overall image, aspect); ``model=None`` is the vanilla text baseline."""
    q = query_vector(model, provider, overall_image_id, aspect_label)
    ids = list(candidates)
    if not ids:
        return RetrievalResult([])
    vecs = np.array([provider.encode_image(i) for i in ids])
    scores = cosine_matrix(q[None, :], vecs)[0]
    ranking = sorted(zip(ids, scores.tolist()), key=lambda t: (-t[1], t[0]))
    return RetrievalResult(ranking)


def vanilla_retrieve(model, provider, overall_image_id, aspect_label, candidates) -> RetrievalResult:
    """Baseline under the same signature: cosine(aspect text, candidate); ``model`` is ignored."""
    return retrieve(None, provider, overall_image_id, aspect_label, candidates)


@dataclass(frozen=True)
class ThresholdPolicy:
    theta: float


@dataclass(frozen=True)
class TopMPolicy:
    m: int


def score_links(kg: AspectKG, model, provider) -> dict[tuple, float]:
    """Retrieve score of every link within its (entity, aspect) group."""
    out = {}
    groups = defaultdict(list)
    for ln in kg.links:
        groups[(ln.entity_id, ln.aspect_path)].append(ln.image_id)
    overall_cache = {}
    for (eid, path), ids in sorted(groups.items()):
        if eid not in overall_cache:
            overall_cache[eid] = overall_image(kg, eid, provider)
        res = retrieve(model, provider, overall_cache[eid], path[-1], ids)
        for img, s in res.ranking:
            out[(eid, path, img)] = s
    return out


def correct_kg(kg: AspectKG, model, provider, policy) -> tuple[AspectKG, list[tuple[AspectImageLink, float]]]:
    """Drop links whose retrieval score fails ``policy``; returns the new KG and the removals."""
    scores = score_links(kg, model, provider)
    drop = set()
    if isinstance(policy, ThresholdPolicy):
        drop = {k for k, s in scores.items() if s < policy.theta}
    elif isinstance(policy, TopMPolicy):
        groups = defaultdict(list)
        for (eid, path, img), s in scores.items():
            groups[(eid, path)].append((img, s))
        for (eid, path), items in groups.items():
            items.sort(key=lambda t: (-t[1], t[0]))
            drop.update((eid, path, img) for img, _ in items[policy.m:])
    else:
        raise TypeError(f"unknown policy {policy!r}")
    kept = [ln for ln in kg.links if ln.key() not in drop]
    removed = [(ln, scores[ln.key()]) for ln in kg.links if ln.key() in drop]
    return AspectKG.build(kg.entities, kg.aspects, kg.images, kept, blacklist=()), removed


def expand_assign(image_id: str, entity_id: str, kg: AspectKG, model, provider) -> tuple[str, float]:
    """Pick the first-level aspect whose retrieve score for ``image_id`` is highest (ties by label)."""
    labels = kg.first_level_labels(entity_id)
    if not labels:
        raise DataError(f"entity {entity_id!r} has no aspects")
    overall = overall_image(kg, entity_id, provider)
    if overall is None:
        raise DataError(f"entity {entity_id!r} has no images to anchor retrieval")
    best = None
    for label in labels:
        s = retrieve(model, provider, overall, label, [image_id]).ranking[0][1]
        if best is None or s > best[1]:
            best = (label, s)
    return best


def expand_kg(kg: AspectKG, assignments: Sequence[tuple[str, str, str]], images: Sequence[ImageRef]) -> AspectKG:
    """Add (entity_id, first-level label, image_id) links plus their image records."""
    known = kg.image_by_id
    new_images = [im for im in images if im.image_id not in known]
    links = list(kg.links)
    existing = {ln.key() for ln in links}
    aspects = set(kg.aspects)
    for eid, label, img in assignments:
        ln = AspectImageLink(eid, (label,), img)
        aspects.add(AspectNode(eid, (label,)))
        if ln.key() not in existing:
            existing.add(ln.key())
            links.append(ln)
    return AspectKG.build(kg.entities, aspects, [*kg.images, *new_images], links, blacklist=())


def eal_image_feature_air(ctx, aspect: AspectNode, kg: AspectKG, model, provider, k: int = 5) -> float:
    """Image feature with images selected by the retrieval model instead of raw label similarity."""
    ids = kg.images_under(aspect.entity_id, aspect.path)
    if not ids:
        return 0.0
    overall = overall_image(kg, aspect.entity_id, provider)
    selected = retrieve(model, provider, overall, aspect.path[0], ids).ids[:k]
    q = provider.encode_text(ctx.raw)
    return float(np.mean([cosine(q, provider.encode_image(i)) for i in selected]))


def air_image_scorer(kg: AspectKG, model, provider, k: int = 5):
    """Drop-in image feature callback for feature assembly."""

    def score(ctx, doc) -> float:
        return eal_image_feature_air(ctx, AspectNode(ctx.entity_id, (doc.name,)), kg, model, provider, k)

    return score
