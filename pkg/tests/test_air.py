import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aspectkg.air import (
    AirTrainConfig,
    AirTriple,
    NumericError,
    ProjectionModel,
    ThresholdPolicy,
    TopMPolicy,
    air_image_scorer,
    build_triples,
    correct_kg,
    eal_image_feature_air,
    expand_assign,
    expand_kg,
    forward,
    info_nce_from_similarities,
    info_nce_loss,
    loss_and_grad,
    overall_image,
    read_triples,
    retrieve,
    split_triples,
    train,
    vanilla_retrieve,
    write_triples,
)
from aspectkg.encoders import FileEncoder, MockEncoder, cosine
from aspectkg.features import AspectDoc, ContextSentence, image_feature
from aspectkg.kg import AspectImageLink, AspectKG, AspectNode, DataError, EntityRecord, ImageRef
from aspectkg.synthetic import air_world, planted_correction_world


def fd_gradient(W, X, C, tau, h=1e-5):
    g = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        Wp, Wm = W.copy(), W.copy()
        Wp[idx] += h
        Wm[idx] -= h
        g[idx] = (loss_and_grad(Wp, X, C, tau)[0] - loss_and_grad(Wm, X, C, tau)[0]) / (2 * h)
    return g


def max_relative_error(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


def _kg_with(images_by_aspect, entity="E", name="Ent"):
    aspects = [AspectNode(entity, (l,)) for l in images_by_aspect]
    imgs, links = [], []
    for l, ids in images_by_aspect.items():
        for i in ids:
            imgs.append(ImageRef(i, "f", "wikipedia"))
            links.append(AspectImageLink(entity, (l,), i))
    return AspectKG.build([EntityRecord(entity, name, "War")], aspects, imgs, links)


# -- triples -----------------------------------------------------------------------

def test_one_aspect_two_images_gives_two_triples():
    kg = _kg_with({"History": ["a", "b"]})
    triples = build_triples(kg, MockEncoder(0, 8))
    assert len(triples) == 2
    assert {t.positive_image_id for t in triples} == {"a", "b"}


def test_planted_overall_image():
    base = MockEncoder(1, 8)
    prov = FileEncoder.from_vectors({"i:x": base.encode_text("Ent")}, fallback=base)
    kg = _kg_with({"History": ["a", "x"], "Economy": ["b", "c", "d", "e"]})
    assert overall_image(kg, "E", prov) == "x"
    triples = build_triples(kg, prov)
    assert all(t.overall_image_id == "x" for t in triples)
    assert sum(t.aspect_label == "Economy" for t in triples) == 3


def test_exclude_overall_option():
    base = MockEncoder(1, 8)
    prov = FileEncoder.from_vectors({"i:x": base.encode_text("Ent")}, fallback=base)
    kg = _kg_with({"History": ["a", "x"]})
    triples = build_triples(kg, prov, exclude_overall=True)
    assert [t.positive_image_id for t in triples] == ["a"]


def test_entity_without_images_is_skipped():
    kg = AspectKG.build([EntityRecord("E", "Ent", "War")], [AspectNode("E", ("History",))])
    assert build_triples(kg, MockEncoder(0, 8)) == []


@pytest.mark.parametrize("n, sizes", [(46779, (37453, 4663, 4663)), (10, (8, 1, 1)), (0, (0, 0, 0)), (100, (80, 10, 10))])
def test_split_sizes(n, sizes):
    triples = [AirTriple("E", "o", "L", f"p{i}") for i in range(n)]
    s = split_triples(triples, seed=3)
    assert (len(s.train), len(s.validation), len(s.test)) == sizes


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 300), st.integers(0, 2**32 - 1))
def test_split_partitions(n, seed):
    triples = [AirTriple("E", "o", "L", f"p{i}") for i in range(n)]
    s = split_triples(triples, seed)
    ids = [t.positive_image_id for t in s.train + s.validation + s.test]
    assert sorted(ids) == sorted(t.positive_image_id for t in triples)
    assert len(set(ids)) == n
    assert split_triples(triples, seed) == s


def test_triples_file_round_trip(tmp_path):
    triples = [AirTriple("E", "o", "Économie", "p1"), AirTriple("F", "o2", "History", "p2")]
    write_triples(tmp_path / "t.jsonl", triples)
    assert read_triples(tmp_path / "t.jsonl") == triples


# -- model math ---------------------------------------------------------------------

def test_forward_blocks_and_oracle():
    rng = np.random.default_rng(0)
    o, a = rng.normal(size=4), rng.normal(size=3)
    assert np.allclose(forward(ProjectionModel.image_passthrough(4, 3), o, a), o)
    assert np.all(forward(ProjectionModel(np.zeros((4, 7))), o, a) == 0)
    W = rng.normal(size=(4, 7))
    expected = [sum(W[i, j] * np.concatenate([o, a])[j] for j in range(7)) for i in range(4)]
    assert np.allclose(forward(ProjectionModel(W), o, a), expected, atol=1e-12)
    with pytest.raises(ValueError):
        forward(ProjectionModel(W), o, rng.normal(size=2))


@pytest.mark.parametrize("n", [2, 4, 8])
def test_uniform_similarities_give_log_n(n):
    assert info_nce_from_similarities(np.full((n, n), 0.3), 0.5) == pytest.approx(math.log(n), abs=1e-12)


def test_info_nce_limits_and_oracle():
    sim = np.full((3, 3), -1.0) + 2 * np.eye(3)
    assert info_nce_from_similarities(sim, 0.01) < 1e-12
    assert info_nce_from_similarities([[0.9, 0.1], [0.2, 0.8]], 1.0) == pytest.approx(
        0.404294308216831676, abs=1e-12)
    with pytest.raises(NumericError):
        info_nce_from_similarities([[np.nan, 0], [0, 1]], 1.0)
    with pytest.raises(ValueError):
        info_nce_from_similarities([[1.0]], 1.0)


def test_info_nce_loss_on_vectors():
    P = np.array([[1.0, 0.0], [0.0, 2.0]])
    C = np.array([[3.0, 0.0], [0.0, 0.5]])
    e = math.exp(1 / 0.1)
    assert info_nce_loss(P, C, 0.1) == pytest.approx(-math.log(e / (e + 1)), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(-0.9, 0.9), st.floats(-0.9, 0.9), st.floats(0.05, 2.0))
def test_loss_nonnegative_and_falls_with_diagonal(off, diag, tau):
    n = 4
    sim = np.full((n, n), off)
    np.fill_diagonal(sim, diag)
    higher = sim.copy()
    np.fill_diagonal(higher, min(diag + 0.05, 1.0))
    loss = info_nce_from_similarities(sim, tau)
    assert loss >= 0
    assert info_nce_from_similarities(higher, tau) <= loss + 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(8, 16))
    X = rng.normal(size=(6, 16))
    C = rng.normal(size=(6, 8))
    analytic = loss_and_grad(W, X, C, 0.5)[1]
    assert max_relative_error(analytic, fd_gradient(W, X, C, 0.5)) < 1e-4


def _tiny_world_split(seed=0):
    w = air_world(n_entities=20, n_aspects=4, images_per_aspect=6, seed=seed)
    triples = build_triples(w.kg, w.provider)
    return w, split_triples(triples, seed)


def test_training_loss_decreases():
    w, split = _tiny_world_split()
    init = ProjectionModel.initial(32, 32, seed=0)
    out = train(init, split, w.provider, AirTrainConfig(batch_size=16, epochs=6, learning_rate=0.05))
    curve = [out.initial_loss, *out.loss_curve]
    assert all(b < a for a, b in zip(curve[:6], curve[1:6]))


def test_zero_learning_rate_keeps_model():
    w, split = _tiny_world_split()
    init = ProjectionModel.initial(32, 32, seed=0)
    out = train(init, split, w.provider, AirTrainConfig(batch_size=16, epochs=3, learning_rate=0.0))
    assert np.array_equal(out.model.W, init.W)
    assert len(set(out.loss_curve)) == 1 and out.loss_curve[0] == out.initial_loss


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises():
    w, split = _tiny_world_split()
    init = ProjectionModel.initial(32, 32, seed=0)
    with pytest.raises(NumericError):
        train(init, split, w.provider, AirTrainConfig(batch_size=16, epochs=5, learning_rate=1e308))


def test_model_file_round_trip(tmp_path):
    m = ProjectionModel.initial(3, 2, seed=4)
    m.save(tmp_path / "air.json", digest="d")
    back = ProjectionModel.load(tmp_path / "air.json")
    assert np.array_equal(back.W, m.W) and back.tau == m.tau


def test_config_validation():
    with pytest.raises(ValueError):
        AirTrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        AirTrainConfig(tau=0)


# -- retrieval ----------------------------------------------------------------------

def test_candidate_matching_query_ranks_first_and_baseline():
    base = MockEncoder(2, 8)
    prov = FileEncoder.from_vectors({"i:hit": base.encode_text("History")}, fallback=base)
    model = ProjectionModel.text_passthrough(8, 8)
    res = retrieve(model, prov, "o", "History", ["c", "hit", "a"])
    assert res.ids[0] == "hit"
    assert vanilla_retrieve(model, prov, "o", "History", ["c", "hit", "a"]).ranking == res.ranking
    with pytest.raises(KeyError):
        retrieve(model, FileEncoder.from_vectors({"t:History": np.ones(8)}), "o", "History", ["missing"])


def test_golden_ranking():
    prov = MockEncoder(5, 8)
    model = ProjectionModel.initial(8, 8, seed=1, noise=0.3)
    res = retrieve(model, prov, "overall", "Geography", [f"c{i}" for i in range(6)])
    assert res.ids == ["c0", "c2", "c3", "c1", "c5", "c4"]
    q = model.W @ np.concatenate([prov.encode_image("overall"), prov.encode_text("Geography")])
    assert res.ranking[0][1] == pytest.approx(cosine(q, prov.encode_image("c0")), abs=1e-12)


def test_retrieve_invariant_to_candidate_rescaling():
    rng = np.random.default_rng(3)
    vecs = {f"i:c{i}": rng.normal(size=4) for i in range(6)}
    vecs["t:L"] = rng.normal(size=4)
    vecs["i:o"] = rng.normal(size=4)
    scaled = {k: (v * rng.uniform(0.1, 10) if k.startswith("i:c") else v) for k, v in vecs.items()}
    model = ProjectionModel(rng.normal(size=(4, 8)))
    ids = [f"c{i}" for i in range(6)]
    a = retrieve(model, FileEncoder.from_vectors(vecs), "o", "L", ids).ids
    b = retrieve(model, FileEncoder.from_vectors(scaled), "o", "L", ids).ids
    assert a == b


# -- KG upkeep ----------------------------------------------------------------------

def test_correct_vacuous_policies():
    w = planted_correction_world(n_entities=4, n_new=0)
    kg2, removed = correct_kg(w.kg, w.model, w.provider, ThresholdPolicy(-1.0))
    assert removed == [] and kg2 == w.kg
    kg3, removed = correct_kg(w.kg, w.model, w.provider, TopMPolicy(100))
    assert removed == [] and kg3 == w.kg


def test_correct_never_removes_above_threshold():
    w = planted_correction_world(n_entities=4, n_new=0)
    for theta in (-0.5, 0.0, 0.3, 0.6):
        _, removed = correct_kg(w.kg, w.model, w.provider, ThresholdPolicy(theta))
        assert all(s < theta for _, s in removed)


def test_top_m_keeps_m_per_group():
    w = planted_correction_world(n_entities=3, n_new=0)
    kg2, removed = correct_kg(w.kg, w.model, w.provider, TopMPolicy(2))
    groups = {}
    for ln in kg2.links:
        groups[(ln.entity_id, ln.aspect_path)] = groups.get((ln.entity_id, ln.aspect_path), 0) + 1
    assert set(groups.values()) == {2}


def test_expand_assign_cases():
    w = planted_correction_world(n_entities=4, n_new=20)
    iid, eid, label = w.new_images[0]
    got, score = expand_assign(iid, eid, w.kg, w.model, w.provider)
    overall = overall_image(w.kg, eid, w.provider)
    assert score == retrieve(w.model, w.provider, overall, got, [iid]).ranking[0][1]
    single = _kg_with({"History": ["a"]})
    assert expand_assign("zzz", "E", single, ProjectionModel.text_passthrough(8, 8), MockEncoder(0, 8))[0] == "History"
    bare = AspectKG.build([EntityRecord("E", "Ent", "War")])
    with pytest.raises(DataError):
        expand_assign("zzz", "E", bare, None, MockEncoder(0, 8))


def test_expand_kg_adds_links():
    w = planted_correction_world(n_entities=2, n_new=5)
    new = [(iid, eid, label) for iid, eid, label in w.new_images if eid in w.kg.entity_by_id]
    kg2 = expand_kg(w.kg, [(e, l, i) for i, e, l in new], [ImageRef(i, "f", "search-engine", "q", 1) for i, _, _ in new])
    assert len(kg2.links) == len(w.kg.links) + len(new)


# -- EAL hook -----------------------------------------------------------------------

def test_air_feature_with_passthrough_matches_label_feature():
    prov = MockEncoder(3, 8)
    kg = _kg_with({"History": [f"i{k}" for k in range(8)], "Economy": []})
    ctx = ContextSentence("Ent history", "E")
    model = ProjectionModel.text_passthrough(8, 8)
    a = AspectNode("E", ("History",))
    assert eal_image_feature_air(ctx, a, kg, model, prov) == pytest.approx(image_feature(ctx, a, kg, prov), abs=1e-12)
    assert eal_image_feature_air(ctx, AspectNode("E", ("Economy",)), kg, model, prov) == 0.0
    assert air_image_scorer(kg, model, prov)(ctx, AspectDoc("x", "History")) == pytest.approx(
        image_feature(ctx, a, kg, prov), abs=1e-12)
