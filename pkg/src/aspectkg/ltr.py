"""List-wise linear ranking trained by mini-batched coordinate ascent on MAP."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence
from urllib.parse import quote, unquote

import numpy as np

from .kg import DataError


@dataclass(frozen=True)
class FeatureRow:
    query_id: str
    aspect_id: str
    features: tuple[float, ...]
    label: int

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(float(x) for x in self.features))


@dataclass(frozen=True)
class QueryList:
    query_id: str
    rows: tuple[FeatureRow, ...]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))

    @property
    def n_features(self) -> int:
        return len(self.rows[0].features) if self.rows else 0


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]


@dataclass
class TrainConfig:
    minibatch_size: int = 1000
    rel_tol: float = 0.01
    restarts: int = 20
    step_scales: tuple[float, ...] = (0.05, 0.1, 0.2, 0.5, 1.0, 2.0)
    max_epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        self.step_scales = tuple(float(s) for s in self.step_scales)
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    def digest(self) -> str:
        return config_digest(asdict(self))


def config_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# -- normalization --------------------------------------------------------------

def _matrix(rows) -> np.ndarray:
    return np.array([r.features for r in rows], dtype=np.float64).reshape(len(rows), -1)


def zscore_fit(rows: Sequence[FeatureRow]) -> NormStats:
    if not rows:
        raise ValueError("zscore_fit needs at least one row")
    X = _matrix(rows)
    # constant columns can pick up a rounding-level sigma; pin them to exactly 0
    std = np.where(np.ptp(X, axis=0) == 0, 0.0, X.std(axis=0))
    return NormStats(tuple(X.mean(axis=0).tolist()), tuple(std.tolist()))


def _zscore_array(stats: NormStats, X: np.ndarray) -> np.ndarray:
    mu = np.asarray(stats.mean)
    sd = np.asarray(stats.std)
    safe = np.where(sd > 0, sd, 1.0)
    return np.where(sd > 0, (X - mu) / safe, 0.0)


def zscore_apply(stats: NormStats, rows: Sequence[FeatureRow]) -> list[FeatureRow]:
    if not rows:
        return []
    Z = _zscore_array(stats, _matrix(rows))
    return [FeatureRow(r.query_id, r.aspect_id, tuple(z), r.label) for r, z in zip(rows, Z.tolist())]


def _fit_querylists(querylists):
    return zscore_fit([r for ql in querylists for r in ql.rows])


def _normalize_querylists(stats, querylists):
    return [QueryList(ql.query_id, zscore_apply(stats, ql.rows)) for ql in querylists]


# -- metrics ----------------------------------------------------------------

def average_precision(scores, labels, ids=None) -> float:
    """AP of one ranked list; ties in score are broken by ``ids`` ascending (default: position)."""
    scores = [float(s) for s in scores]
    labels = [int(x) for x in labels]
    if ids is None:
        ids = list(range(len(scores)))
    n_rel = sum(1 for x in labels if x)
    if n_rel == 0:
        raise DataError("average precision undefined without a relevant item")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], ids[i]))
    hits = 0
    total = 0.0
    for k, i in enumerate(order, 1):
        if labels[i]:
            hits += 1
            total += hits / k
    return total / n_rel


class _Packed:
    """Query lists as padded arrays for vectorized MAP evaluation."""

    def __init__(self, querylists: Sequence[QueryList]):
        if not querylists:
            raise ValueError("no query lists")
        F = querylists[0].n_features
        n = max(len(ql.rows) for ql in querylists)
        Q = len(querylists)
        self.X = np.zeros((Q, n, F))
        self.labels = np.zeros((Q, n))
        self.mask = np.zeros((Q, n), dtype=bool)
        self.tie = np.full((Q, n), n, dtype=np.int64)
        for q, ql in enumerate(querylists):
            if len(ql.rows) < 2:
                raise DataError(f"query {ql.query_id!r}: a ranking list needs at least 2 rows")
            if any(len(r.features) != F for r in ql.rows):
                raise DataError(f"query {ql.query_id!r}: inconsistent feature count")
            m = len(ql.rows)
            self.X[q, :m] = [r.features for r in ql.rows]
            self.labels[q, :m] = [1.0 if r.label else 0.0 for r in ql.rows]
            self.mask[q, :m] = True
            ids = [r.aspect_id for r in ql.rows]
            if len(set(ids)) != m:
                raise DataError(f"query {ql.query_id!r}: duplicate aspect ids")
            for rank, i in enumerate(sorted(range(m), key=lambda j: ids[j])):
                self.tie[q, i] = rank
        n_pos = self.labels.sum(axis=1)
        if np.any(n_pos == 0):
            bad = querylists[int(np.argmin(n_pos))].query_id
            raise DataError(f"query {bad!r} has no relevant row")
        self.query_ids = [ql.query_id for ql in querylists]
        self.single = bool(np.all(n_pos == 1))
        if self.single:
            self.pos = self.labels.argmax(axis=1)
            self.pos_tie = self.tie[np.arange(Q), self.pos]
        self.n_pos = n_pos

    def subset(self, idx) -> "_Packed":
        sub = object.__new__(_Packed)
        for name in ("X", "labels", "mask", "tie", "n_pos"):
            setattr(sub, name, getattr(self, name)[idx])
        sub.query_ids = [self.query_ids[i] for i in idx]
        sub.single = self.single
        if self.single:
            sub.pos = self.pos[idx]
            sub.pos_tie = self.pos_tie[idx]
        return sub

    def scores(self, w) -> np.ndarray:
        return self.X @ np.asarray(w, dtype=np.float64)

    def ap(self, scores: np.ndarray) -> np.ndarray:
        """Per-query AP for scores of shape (..., Q, n); leading axes batch candidates."""
        if self.single:
            Q = scores.shape[-2]
            s_pos = np.take_along_axis(scores, np.broadcast_to(self.pos[:, None], scores.shape[:-1] + (1,)), axis=-1)
            ahead = (scores > s_pos) | ((scores == s_pos) & (self.tie < self.pos_tie[:, None]))
            ahead &= self.mask
            return 1.0 / (1.0 + ahead.sum(axis=-1))
        s = np.where(self.mask, scores, -np.inf)
        tie = np.broadcast_to(self.tie, s.shape)
        order = np.lexsort((tie, -s), axis=-1)
        lab = np.take_along_axis(np.broadcast_to(self.labels, s.shape), order, axis=-1)
        ranks = np.arange(1, s.shape[-1] + 1)
        prec = np.cumsum(lab, axis=-1) / ranks
        return (prec * lab).sum(axis=-1) / self.n_pos

    def mean_ap(self, w) -> float:
        return float(self.ap(self.scores(w)).mean())


def mean_ap(querylists: Sequence[QueryList], w) -> float:
    """Unweighted mean of per-query AP under scores ``w . features``."""
    return _Packed(querylists).mean_ap(w)


def per_query_ap(querylists: Sequence[QueryList], w) -> dict[str, float]:
    packed = _Packed(querylists)
    return dict(zip(packed.query_ids, packed.ap(packed.scores(w)).tolist()))


# -- training -------------------------------------------------------------------

@dataclass
class TrainResult:
    weights: tuple[float, ...]
    norm: NormStats
    train_map: float
    restart: int
    epochs: int
    history: list[float] = field(default_factory=list)
    restart_maps: list[float] = field(default_factory=list)
    trace: list[tuple[float, float]] = field(default_factory=list)


def _candidates(wf: float, scales) -> np.ndarray:
    out = []
    for s in scales:
        out.extend((wf + s, wf - s, wf * (1 + s), wf * (1 - s)))
    return np.array(out)


def _run_restart(packed: _Packed, config: TrainConfig, restart: int, trace: list | None):
    rng = np.random.default_rng([config.seed, restart])
    F = packed.X.shape[2]
    w = rng.standard_normal(F)
    w /= np.linalg.norm(w) or 1.0
    Q = packed.X.shape[0]
    prev = packed.mean_ap(w)
    history = []
    epochs = 0
    for epoch in range(config.max_epochs):
        epochs = epoch + 1
        order = rng.permutation(Q)
        for start in range(0, Q, config.minibatch_size):
            batch = packed.subset(np.sort(order[start:start + config.minibatch_size]))
            for f in range(F):
                xf = batch.X[:, :, f]
                base = batch.scores(w) - w[f] * xf
                current = float(batch.ap(base + w[f] * xf).mean())
                cands = _candidates(w[f], config.step_scales)
                maps = batch.ap(base[None] + cands[:, None, None] * xf[None]).mean(axis=-1)
                best = int(np.argmax(maps))
                if maps[best] > current:
                    if trace is not None:
                        trace.append((current, float(maps[best])))
                    w[f] = cands[best]
        full = packed.mean_ap(w)
        history.append(full)
        change = abs(full - prev) / prev if prev > 0 else (0.0 if full == prev else math.inf)
        prev = full
        if change < config.rel_tol:
            break
    return w, prev, epochs, history


def coordinate_ascent_train(querylists: Sequence[QueryList], config: TrainConfig | None = None,
                            record_trace: bool = False) -> TrainResult:
    """Fit z-score stats, then run ``config.restarts`` seeded coordinate-ascent restarts.

    The restart with the best training MAP wins; ties go to the lowest index.
    """
    config = config or TrainConfig()
    if not querylists:
        raise ValueError("empty training set")
    norm = _fit_querylists(querylists)
    packed = _Packed(_normalize_querylists(norm, querylists))
    best = None
    restart_maps = []
    trace = [] if record_trace else None
    for r in range(config.restarts):
        w, m, epochs, history = _run_restart(packed, config, r, trace)
        restart_maps.append(m)
        if best is None or m > best[1]:
            best = (w.copy(), m, r, epochs, history)
    w, m, r, epochs, history = best
    return TrainResult(tuple(w.tolist()), norm, m, r, epochs, history, restart_maps, trace or [])


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max())
    return z / z.sum()


def score_rows(w, stats: NormStats, rows: Sequence[FeatureRow]) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    X = _matrix(rows)
    if X.shape[1] != w.shape[0] or len(stats.mean) != w.shape[0]:
        raise ValueError(f"feature count {X.shape[1]} does not match model ({w.shape[0]})")
    return _zscore_array(stats, X) @ w


def rank(w, stats: NormStats, rows: Sequence[FeatureRow]) -> list[tuple[str, float]]:
    """Aspect ids ordered by score (ties by id), with softmax probabilities."""
    if not rows:
        return []
    scores = score_rows(w, stats, rows)
    probs = _softmax(scores)
    order = sorted(range(len(rows)), key=lambda i: (-scores[i], rows[i].aspect_id))
    return [(rows[i].aspect_id, float(probs[i])) for i in order]


# -- interchange ------------------------------------------------------------------

@dataclass
class LinearModel:
    weights: tuple[float, ...]
    norm: NormStats
    feature_order: tuple[str, ...]
    config_digest: str = ""
    train_map: float | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "weights": list(self.weights),
                "norm": {"mean": list(self.norm.mean), "std": list(self.norm.std)},
                "feature_order": list(self.feature_order),
                "config_digest": self.config_digest,
                "train_map": self.train_map,
            },
            indent=2,
            sort_keys=True,
        ) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "LinearModel":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
            model = cls(
                tuple(d["weights"]),
                NormStats(tuple(d["norm"]["mean"]), tuple(d["norm"]["std"])),
                tuple(d["feature_order"]),
                d.get("config_digest", ""),
                d.get("train_map"),
            )
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: malformed model file ({exc})") from None
        if not (len(model.weights) == len(model.norm.mean) == len(model.norm.std) == len(model.feature_order)):
            raise DataError(f"{path}: inconsistent model dimensions")
        return model


def project_features(querylists: Sequence[QueryList], indices: Sequence[int]) -> list[QueryList]:
    idx = list(indices)
    return [
        QueryList(ql.query_id, tuple(FeatureRow(r.query_id, r.aspect_id, tuple(r.features[i] for i in idx), r.label)
                                     for r in ql.rows))
        for ql in querylists
    ]


_ID_SAFE = "".join(chr(c) for c in range(33, 127) if chr(c) != "%")


def _encode_id(x: str) -> str:
    # ids may contain spaces ("Personal life"); percent-encode so columns stay whitespace-separated
    return quote(x, safe=_ID_SAFE)


def write_run_file(path, querylists: Sequence[QueryList]) -> None:
    """Lines of ``query_id aspect_id label f1 ... fF`` (ids percent-encoded where needed)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ql in querylists:
            for r in ql.rows:
                fh.write(" ".join([_encode_id(r.query_id), _encode_id(r.aspect_id), str(int(r.label)), *(repr(float(x)) for x in r.features)]))
                fh.write("\n")


def read_run_file(path) -> list[QueryList]:
    grouped: dict[str, list[FeatureRow]] = {}
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            where = f"{Path(path).name}:{lineno}"
            if len(parts) < 4:
                raise DataError(f"{where}: expected 'query_id aspect_id label f1 ... fF'")
            try:
                label = int(parts[2])
                feats = tuple(float(x) for x in parts[3:])
            except ValueError:
                raise DataError(f"{where}: non-numeric label or feature") from None
            if label not in (0, 1) or not all(math.isfinite(x) for x in feats):
                raise DataError(f"{where}: label must be 0/1 and features finite")
            if width is None:
                width = len(feats)
            elif len(feats) != width:
                raise DataError(f"{where}: {len(feats)} features, expected {width}")
            qid, aid = unquote(parts[0]), unquote(parts[1])
            grouped.setdefault(qid, []).append(FeatureRow(qid, aid, feats, label))
    return [QueryList(q, tuple(rows)) for q, rows in grouped.items()]
