"""Ranking metrics and evaluation reports for the EAL ranker and the AIR model."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .air import AirTriple, retrieve
from .kg import AspectKG, DataError
from .ltr import LinearModel, QueryList, average_precision, score_rows


def recall_at_k(ranking: Sequence[str], relevant, k: int) -> float:
    relevant = set(relevant)
    if not relevant:
        raise DataError("recall undefined for an empty relevant set")
    if k <= 0:
        return 0.0
    return len(set(ranking[:k]) & relevant) / len(relevant)


def precision_at_k(ranking: Sequence[str], relevant, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    return len(set(ranking[:k]) & relevant) / k


@dataclass
class MetricReport:
    map: float | None = None
    recall_at: dict[int, float] = field(default_factory=dict)
    precision_at: dict[int, float] = field(default_factory=dict)
    n_queries: int = 0
    per_query: list[dict] = field(default_factory=list)

    def to_dict(self, include_per_query: bool = False) -> dict:
        d = {
            "map": self.map,
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "precision_at": {str(k): v for k, v in sorted(self.precision_at.items())},
            "n_queries": self.n_queries,
        }
        if include_per_query:
            d["per_query"] = self.per_query
        return d

    def write(self, out_dir, stem: str = "report", per_query: bool = True) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                                              encoding="utf-8")
        if per_query and self.per_query:
            cols = list(self.per_query[0].keys())
            lines = ["\t".join(cols)]
            for row in self.per_query:
                lines.append("\t".join(_fmt(row[c]) for c in cols))
            (out_dir / f"{stem}.per_query.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _mean_sorted(values: dict) -> float:
    # summation over sorted keys keeps the aggregate independent of evaluation order
    keys = sorted(values)
    return sum(values[k] for k in keys) / len(keys)


def eval_eal(model: LinearModel, querylists: Sequence[QueryList]) -> MetricReport:
    if not querylists:
        raise ValueError("empty evaluation set")
    aps = {}
    rows_out = {}
    for ql in querylists:
        scores = score_rows(model.weights, model.norm, ql.rows)
        ap = average_precision(scores, [r.label for r in ql.rows], [r.aspect_id for r in ql.rows])
        order = sorted(range(len(ql.rows)), key=lambda i: (-scores[i], ql.rows[i].aspect_id))
        gold_rank = next(k for k, i in enumerate(order, 1) if ql.rows[i].label)
        aps[ql.query_id] = ap
        rows_out[ql.query_id] = {"query_id": ql.query_id, "ap": ap, "top": ql.rows[order[0]].aspect_id,
                                 "gold_rank": gold_rank}
    return MetricReport(map=_mean_sorted(aps), n_queries=len(aps), per_query=[rows_out[q] for q in sorted(rows_out)])


def air_queries(test: Sequence[AirTriple], kg: AspectKG | None = None):
    """Group test triples into retrieval queries.

    Each query is (entity, overall image, aspect) with its positives as the
    relevant set.  Candidates are every image linked to the entity in ``kg``
    when given, otherwise every image of the entity appearing in ``test``.
    """
    relevant = defaultdict(set)
    pool = defaultdict(set)
    for t in test:
        relevant[(t.entity_id, t.overall_image_id, t.aspect_label)].add(t.positive_image_id)
        pool[t.entity_id].add(t.positive_image_id)
    if kg is not None:
        for eid in pool:
            pool[eid].update(kg.images_of(eid))
    return [(key, sorted(relevant[key]), sorted(pool[key[0]])) for key in sorted(relevant)]


def eval_air(model, test: Sequence[AirTriple], provider, ks=(3, 5, 10), kg: AspectKG | None = None) -> MetricReport:
    """Recall@k / P@k of ``model`` (None = vanilla text baseline) over the test queries."""
    queries = air_queries(test, kg)
    if not queries:
        raise ValueError("empty evaluation set")
    recalls = {k: {} for k in ks}
    precs = {k: {} for k in ks}
    per_query = []
    for (eid, overall, label), rel, cands in queries:
        ranking = retrieve(model, provider, overall, label, cands).ids
        qid = f"{eid}\x1f{label}"
        row = {"entity_id": eid, "aspect_label": label, "n_relevant": len(rel), "n_candidates": len(cands)}
        for k in ks:
            recalls[k][qid] = recall_at_k(ranking, rel, k)
            precs[k][qid] = precision_at_k(ranking, rel, k)
            row[f"recall@{k}"] = recalls[k][qid]
        per_query.append(row)
    return MetricReport(
        recall_at={k: _mean_sorted(v) for k, v in recalls.items()},
        precision_at={k: _mean_sorted(v) for k, v in precs.items()},
        n_queries=len(queries),
        per_query=per_query,
    )
