import numpy as np
import pytest
import torch

from uaagan.errors import ContaminationError, DomainError, ShapeError
from uaagan.generator import build_generator
from uaagan.retrieval import (EvalReport, GalleryIndex, QuerySet, TransferMatrix, _order, average_precision,
                              build_index, cmc, evaluate, matched_gaussian, rank, transfer_evaluate)
from uaagan.targets import AggregationSpec, ToyBackboneSpec, train_toy_backbone, TargetModel


def brute_force_ap(relevance, total):
    """Sum of precision@k at every hit, divided by the number of relevant items."""
    s = 0.0
    for k in range(1, len(relevance) + 1):
        if relevance[k - 1]:
            s += sum(relevance[:k]) / k
    return s / total


def make_index(features, labels=None, ids=None, metric="euclidean"):
    features = torch.as_tensor(features, dtype=torch.float64)
    n = len(features)
    ids = ids if ids is not None else [f"g{i:03d}" for i in range(n)]
    labels = labels if labels is not None else np.zeros(n, dtype=int)
    return GalleryIndex(ids, labels, features, "fp", metric)


def test_ap_textbook():
    assert average_precision([1, 0, 1, 0], 2) == pytest.approx((1 / 1 + 2 / 3) / 2, abs=1e-12)
    assert average_precision([1, 0, 1, 0], 2) == pytest.approx(0.8333, abs=1e-4)
    assert average_precision([1, 1, 1, 0, 0], 3) == 1.0
    assert average_precision([0, 0, 0], 2) == 0.0


def test_ap_errors():
    with pytest.raises(DomainError):
        average_precision([0, 0], 0)
    with pytest.raises(DomainError):
        average_precision([1, 1, 1], 2)


def test_ap_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        rel = rng.integers(0, 2, size=12)
        total = int(rel.sum()) + int(rng.integers(0, 3))  # some relevant items may be unranked
        if total == 0:
            total = 1
        assert abs(average_precision(rel, total) - brute_force_ap(rel.tolist(), total)) <= 1e-9


def test_cmc_examples():
    out = cmc([1, 3], ks=(1, 5))
    assert out == {1: 0.5, 5: 1.0}
    assert cmc([1, 1, 1]) == {1: 1.0, 5: 1.0, 10: 1.0}
    out = cmc([7, 2, 12, 1], ks=(10, 1, 5))
    assert list(out) == [1, 5, 10]
    vals = list(out.values())
    assert vals == sorted(vals)
    with pytest.raises(DomainError):
        cmc([])
    with pytest.raises(DomainError):
        cmc([0])


def test_rank_zero_distance_first():
    feats = np.random.default_rng(1).normal(size=(6, 4))
    idx = make_index(feats)
    assert rank(idx, feats[3])[0] == "g003"


def test_rank_ties_by_ascending_id():
    idx = make_index(np.zeros((4, 3)), ids=["d", "b", "c", "a"])
    assert rank(idx, np.ones(3)) == ["a", "b", "c", "d"]


def test_rank_single_item_and_self_exclusion():
    assert rank(make_index(np.ones((1, 2))), np.zeros(2)) == ["g000"]
    idx = make_index(np.eye(3), ids=["x", "y", "z"])
    assert rank(idx, np.eye(3)[1], query_id="y")[0] != "y"
    assert "y" not in rank(idx, np.eye(3)[1], query_id="y")


def test_rank_fingerprint_guard():
    idx = make_index(np.eye(2))
    with pytest.raises(ContaminationError):
        rank(idx, np.ones(2), fingerprint="other")
    with pytest.raises(ContaminationError):
        GalleryIndex(["a"], [0], torch.zeros(1, 2), "")


def test_index_validation():
    with pytest.raises(ShapeError):
        GalleryIndex(["a", "b"], [0], torch.zeros(2, 2), "fp")
    with pytest.raises(DomainError):
        GalleryIndex(["a"], [0], torch.full((1, 2), float("nan")), "fp")


def test_order_invariant_under_monotone_transform():
    rng = np.random.default_rng(2)
    for _ in range(20):
        idx = make_index(rng.normal(size=(15, 3)))
        d = rng.uniform(0, 3, size=15)
        assert np.array_equal(_order(idx, d), _order(idx, d ** 2))


def test_euclidean_on_normalized_equals_cosine_order():
    rng = np.random.default_rng(3)
    for _ in range(100):
        g = rng.normal(size=(20, 8))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        q = rng.normal(size=8)
        q /= np.linalg.norm(q)
        assert rank(make_index(g), q) == rank(make_index(g, metric="cosine"), q)


def test_matched_gaussian_contract():
    torch.manual_seed(0)
    x = torch.rand(8, 3, 32, 32)
    out, _ = matched_gaussian(x, torch.zeros_like(x), 0.1)
    assert torch.equal(out, x)
    delta = (torch.rand_like(x) - 0.5) * 0.1
    out, stats = matched_gaussian(x, delta, 0.1, seed=4)
    assert 0 <= float(out.min()) and float(out.max()) <= 1
    assert float(stats["linf"].max()) <= 0.1
    # composing in float32 may round x + noise by one ulp
    assert float((out - x).abs().max()) <= 0.1 + 1e-7
    ratio = stats["achieved_rms"] / stats["target_rms"]
    assert bool(((ratio > 0.9) & (ratio < 1.1)).all())


def test_matched_gaussian_shape_error():
    with pytest.raises(ShapeError):
        matched_gaussian(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5), 0.1)


@pytest.fixture(scope="module")
def small_setup(tiny_data):
    x, y = tiny_data
    train = np.arange(len(y)) < 18
    bb, _ = train_toy_backbone(ToyBackboneSpec(num_classes=3), x[train], y[train], seed=0, epochs=8,
                               min_epochs=8, accuracy_floor=0.0, normalize=False)
    target = TargetModel(bb, AggregationSpec("gem"), normalize=False)
    q = np.arange(18, 24)
    g = np.arange(24, 36)
    queries = QuerySet(x[q], y[q], [f"q{i}" for i in q])
    index = build_index(target, x[g], y[g], [f"g{i}" for i in g])
    return target, queries, index, x, y


def test_build_index_contract(small_setup):
    target, _, index, x, y = small_setup
    assert index.features.shape == (12, 32)
    again = build_index(target, x[24:36], y[24:36], [f"g{i}" for i in range(24, 36)])
    assert torch.equal(again.features, index.features)
    dup = build_index(target, torch.cat([x[24:25], x[24:25]]), [0, 0], ["a", "b"])
    assert torch.equal(dup.features[0], dup.features[1])


def test_evaluate_deterministic_and_bounded(small_setup):
    target, queries, index, _, _ = small_setup
    a, b = evaluate(target, queries, index), evaluate(target, queries, index)
    da, db = a.to_dict(), b.to_dict()
    da.pop("wall_clock"), db.pop("wall_clock")
    assert da == db
    assert 0 <= a.mAP <= 1
    assert list(a.cmc.values()) == sorted(a.cmc.values())
    assert EvalReport.from_dict(a.to_dict()) == a


def test_evaluate_attack_modes_share_index(small_setup):
    target, queries, index, _, _ = small_setup
    gen = build_generator(seed=1)
    reports = [evaluate(target, queries, index, mode, gen) for mode in ("none", "generator", "gaussian")]
    assert len({r.index_fingerprint for r in reports}) == 1
    assert reports[1].noise["linf"] <= 0.1
    assert reports[2].noise["linf"] <= 0.1
    assert reports[2].noise["matched_rms"] == pytest.approx(reports[1].noise["raw_rms"], rel=1e-6)


def test_evaluate_rejects_foreign_index(small_setup):
    target, queries, index, _, _ = small_setup
    other = target.with_aggregation(AggregationSpec("mac"))
    with pytest.raises(ContaminationError):
        evaluate(other, queries, index)


def test_evaluate_needs_gallery_labels(small_setup):
    target, queries, index, _, _ = small_setup
    bad = QuerySet(queries.images[:1], [7], ["q"])
    with pytest.raises(ShapeError):
        evaluate(target, bad, index)


def test_self_retrieval_beats_permuted_labels(small_setup):
    target, _, _, x, y = small_setup
    ids = [f"i{k}" for k in range(len(y))]
    queries = QuerySet(x, y, ids)
    real = evaluate(target, queries, build_index(target, x, y, ids)).mAP
    rng = np.random.default_rng(0)
    for _ in range(5):
        yp = rng.permutation(y)
        shuffled = evaluate(target, QuerySet(x, yp, ids), build_index(target, x, yp, ids)).mAP
        assert real > shuffled


def test_transfer_matrix(small_setup):
    target, queries, index, x, y = small_setup
    mac_t = target.with_aggregation(AggregationSpec("mac"))
    g_ids = [f"g{i}" for i in range(24, 36)]
    galleries = {"gem": index, "mac": build_index(mac_t, x[24:36], y[24:36], g_ids)}
    gens = {"gem": build_generator(seed=1), "mac": None}
    m = transfer_evaluate(gens, {"gem": target, "mac": mac_t}, queries, galleries)
    rows = list(m.rows())
    assert [r[0] for r in rows] == ["no-attack", "gem", "mac"]
    assert all(len(r) == 3 for r in rows)
    assert m.value("mac", "gem") is None and m.relative_drop("mac", "gem") is None
    diag = evaluate(target, queries, index, "generator", gens["gem"]).mAP
    assert m.value("gem", "gem") == diag
    assert m.clean["gem"] == evaluate(target, queries, index).mAP
    assert isinstance(m, TransferMatrix)
