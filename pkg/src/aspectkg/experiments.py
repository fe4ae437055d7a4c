"""Desk-scale reproductions: image-feature ablation for EAL and AIR vs. text baseline."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .air import AirTrainConfig, ProjectionModel, build_triples, split_triples, train
from .features import (
    ALL_FEATURES,
    IMAGE_INDEX,
    assemble_feature_rows,
    kg_image_scorer,
    sample_feature_subsets,
)
from .ltr import LinearModel, TrainConfig, coordinate_ascent_train, project_features
from .metrics import eval_air, eval_eal
from .synthetic import air_world, eal_world


def world_querylists(world, features=ALL_FEATURES, image_scorer=None):
    scorer = image_scorer or kg_image_scorer(world.kg, world.provider)
    return [
        assemble_feature_rows(q.context, q.candidates, q.gold, q.query_id, features, world.table, scorer)
        for q in world.queries
    ]


def _fit_eval(train_lists, test_lists, indices, config):
    tr = project_features(train_lists, indices)
    te = project_features(test_lists, indices)
    res = coordinate_ascent_train(tr, config)
    model = LinearModel(res.weights, res.norm, tuple(str(i) for i in indices))
    return eval_eal(model, te).map


@dataclass
class AblationResult:
    sizes: list[int]
    without: dict[int, list[float]] = field(default_factory=dict)
    with_image: dict[int, list[float]] = field(default_factory=dict)

    def delta(self, k: int) -> list[float]:
        return [b - a for a, b in zip(self.without[k], self.with_image[k])]

    def mean_delta(self, k: int) -> float:
        return float(np.mean(self.delta(k)))

    def table(self) -> str:
        head = "# text features " + " ".join(f"{k:>7d}" for k in self.sizes)
        wo = "w/o images      " + " ".join(f"{np.mean(self.without[k]):7.3f}" for k in self.sizes)
        wi = "w/ images       " + " ".join(f"{np.mean(self.with_image[k]):7.3f}" for k in self.sizes)
        de = "delta           " + " ".join(f"{self.mean_delta(k):+7.3f}" for k in self.sizes)
        return "\n".join([head, wo, wi, de])


def eal_image_ablation(seeds=range(5), n_queries: int = 600, test_fraction: float = 0.5,
                       config: TrainConfig | None = None, world_kwargs: dict | None = None) -> AblationResult:
    """Train with and without the image feature for 1..7 text features per seed.

    Subsets come from :func:`sample_feature_subsets`; MAP is measured on
    held-out queries of the same synthetic world.
    """
    sizes = list(range(1, 8))
    result = AblationResult(sizes, {k: [] for k in sizes}, {k: [] for k in sizes})
    for seed in seeds:
        world = eal_world(n_queries=n_queries, seed=seed, **(world_kwargs or {}))
        lists = world_querylists(world)
        order = np.random.default_rng([seed, 1]).permutation(len(lists))
        n_test = int(len(lists) * test_fraction)
        test = [lists[i] for i in sorted(order[:n_test])]
        train_lists = [lists[i] for i in sorted(order[n_test:])]
        subsets = sample_feature_subsets(seed)
        subsets[7] = tuple(range(7))
        cfg = config or TrainConfig(seed=seed)
        for k in sizes:
            text = subsets[k]
            result.without[k].append(_fit_eval(train_lists, test, text, cfg))
            result.with_image[k].append(_fit_eval(train_lists, test, (*text, IMAGE_INDEX), cfg))
    return result


@dataclass
class AirComparison:
    ks: tuple[int, ...]
    air: list[dict] = field(default_factory=list)
    baseline: list[dict] = field(default_factory=list)
    loss_curves: list[list[float]] = field(default_factory=list)

    def mean(self, which: str, k: int) -> float:
        return float(np.mean([r[k] for r in getattr(self, which)]))

    def table(self) -> str:
        head = "model    " + " ".join(f"R@{k:<5d}" for k in self.ks)
        base = "text     " + " ".join(f"{self.mean('baseline', k):7.3f}" for k in self.ks)
        air = "AIR      " + " ".join(f"{self.mean('air', k):7.3f}" for k in self.ks)
        return "\n".join([head, base, air])


def air_vs_baseline(seeds=range(5), ks=(3, 5, 10), config: AirTrainConfig | None = None,
                    world_kwargs: dict | None = None) -> AirComparison:
    out = AirComparison(tuple(ks))
    for seed in seeds:
        world = air_world(seed=seed, **(world_kwargs or {}))
        triples = build_triples(world.kg, world.provider)
        split = split_triples(triples, seed=seed)
        cfg = config or AirTrainConfig(seed=seed)
        init = ProjectionModel.initial(world.provider.image_dim, world.provider.text_dim, cfg.tau, seed=seed)
        outcome = train(init, split, world.provider, cfg)
        out.loss_curves.append(outcome.loss_curve)
        out.air.append(eval_air(outcome.model, split.test, world.provider, ks, kg=world.kg).recall_at)
        out.baseline.append(eval_air(None, split.test, world.provider, ks, kg=world.kg).recall_at)
    return out


def demo_pipeline_commands(work, out) -> list[list[str]]:
    """CLI invocations that run every stage on a workspace from ``write_demo_workspace``."""
    work, out = Path(work), Path(out)
    eal, air, planted = work / "eal", work / "air", work / "planted"
    return [
        ["build", "--pages", str(work / "pages"), "--entities", str(work / "entities.jsonl"),
         "--fixtures", str(work / "fixtures"), "--out", str(out / "build")],
        ["flatten", "--kg", str(out / "build" / "kg"), "--out", str(out / "flatten")],
        ["stats", "--kg", str(out / "flatten" / "kg"), "--out", str(out / "stats")],
        ["features", "--input", str(eal / "eal.jsonl"), "--kg", str(eal / "kg"),
         "--embeddings", str(eal / "embeddings.jsonl"), "--word-vectors", str(eal / "word_vectors.jsonl"),
         "--out", str(out / "features")],
        ["ltr-train", "--input", str(out / "features" / "features.run"), "--seed", "0",
         "--config", str(work / "config.json"), "--out", str(out / "ltr")],
        ["ltr-eval", "--input", str(out / "features" / "features.run"), "--model", str(out / "ltr" / "model.json"),
         "--out", str(out / "ltr-eval")],
        ["air-triples", "--kg", str(air / "kg"), "--embeddings", str(air / "embeddings.jsonl"), "--seed", "0",
         "--out", str(out / "triples")],
        ["air-train", "--triples", str(out / "triples"), "--embeddings", str(air / "embeddings.jsonl"),
         "--seed", "0", "--config", str(work / "config.json"), "--out", str(out / "air")],
        ["air-eval", "--triples", str(out / "triples"), "--embeddings", str(air / "embeddings.jsonl"),
         "--model", str(out / "air" / "air_model.json"), "--kg", str(air / "kg"), "--out", str(out / "air-eval")],
        ["kg-correct", "--kg", str(planted / "kg"), "--embeddings", str(planted / "embeddings.jsonl"),
         "--model", str(planted / "passthrough.json"), "--threshold", "0.3", "--out", str(out / "correct")],
        ["kg-expand", "--kg", str(out / "correct" / "kg"), "--embeddings", str(planted / "embeddings.jsonl"),
         "--model", str(planted / "passthrough.json"), "--images", str(planted / "new_images.jsonl"),
         "--out", str(out / "expand")],
    ]


DEMO_CONFIG = {
    "ltr": {"restarts": 3, "max_epochs": 20, "minibatch_size": 1000},
    "air": {"epochs": 5, "batch_size": 32, "learning_rate": 0.05},
}
