import math

import numpy as np
import pytest

from posenorm.errors import Infeasible, TooFewVisible, UnknownPart
from posenorm.geometry import Box, WarpFamily, estimate_warp, residuals
from posenorm.prototypes import (
    CandidateAnchor,
    CubKeypoints,
    FacilityLocationInstance,
    HeadBody,
    PrototypeLearnConfig,
    RandPairs,
    baseline_regions,
    build_candidate,
    candidate_anchors,
    connection_cost,
    cost_matrix,
    expanded_box,
    greedy_facility_location,
    learn_prototypes,
    load_prototypes,
    save_prototypes,
)

from conftest import TEMPLATE, make_dataset, similarity_copies
from oracles import facility_location_optimum


# --- candidates ---------------------------------------------------------------


def test_expanded_box_arithmetic():
    box = expanded_box([(10, 10), (30, 30)], 0.5, (1000, 1000))
    assert box == Box(0, 0, 40, 40)


def test_expanded_box_clips_to_image():
    box = expanded_box([(2, 2), (12, 12)], 0.5, (15, 15))
    assert box == Box(0, 0, 15, 15)


def test_build_candidate_single_neighbor():
    ds = make_dataset(TEMPLATE[None] + 100)
    cfg = PrototypeLearnConfig(neighbors=1, family="translation")
    p = build_candidate(CandidateAnchor("img000", 2), ds, cfg)
    assert p.anchor_parts == (2,)
    assert p.box.width == pytest.approx(8) and p.box.height == pytest.approx(8)
    assert p.box.contains(TEMPLATE[2] + 100)


def test_build_candidate_nearest_by_exhaustive_sort():
    rng = np.random.default_rng(0)
    for _ in range(20):
        xy = rng.uniform(0, 200, (1, 12, 2))
        vis = rng.random((1, 12)) < 0.8
        k = int(rng.choice(np.flatnonzero(vis[0])))
        if vis.sum() < 5:
            continue
        ds = make_dataset(xy, vis)
        p = build_candidate(CandidateAnchor("img000", k), ds, PrototypeLearnConfig(neighbors=5))
        d = [(float(np.sum((xy[0, j] - xy[0, k]) ** 2)), j) for j in range(12) if vis[0, j]]
        expected = tuple(sorted(j for _, j in sorted(d)[:5]))
        assert p.anchor_parts == expected
        assert k in p.anchor_parts
        assert p.box.contains(xy[0, list(expected)])


def test_build_candidate_too_few_visible():
    vis = np.array([[True, True, True, False, False, False, False]])
    ds = make_dataset(TEMPLATE[None] + 100, vis)
    with pytest.raises(TooFewVisible):
        build_candidate(CandidateAnchor("img000", 0), ds, PrototypeLearnConfig(neighbors=5))


def test_config_validation():
    with pytest.raises(ValueError):
        PrototypeLearnConfig(lambda_=0)
    with pytest.raises(ValueError):
        PrototypeLearnConfig(neighbors=2, family="affine")


def test_anchor_subsample_stratified_and_seeded():
    rng = np.random.default_rng(1)
    ds = make_dataset(similarity_copies(TEMPLATE, rng, 20))
    cfg = PrototypeLearnConfig(anchor_subsample=21, rng_seed=3)
    a = candidate_anchors(ds, cfg)
    assert len(a) == 21
    counts = np.bincount([x.part for x in a], minlength=7)
    assert counts.max() - counts.min() <= 1
    assert a == candidate_anchors(ds, cfg)


# --- connection costs -----------------------------------------------------------


def test_self_connection_cost_is_zero():
    rng = np.random.default_rng(2)
    ds = make_dataset(similarity_copies(TEMPLATE, rng, 3))
    cfg = PrototypeLearnConfig(neighbors=5)
    proto = build_candidate(CandidateAnchor("img001", 1), ds, cfg)
    assert connection_cost(("img001", 1), proto, ds) == pytest.approx(0, abs=1e-18)


def test_connection_cost_infinite_with_one_shared_anchor():
    xy = np.stack([TEMPLATE + 100, TEMPLATE + 90])
    vis = np.ones((2, 7), bool)
    ds = make_dataset(xy, vis)
    proto = build_candidate(CandidateAnchor("img000", 0), ds, PrototypeLearnConfig(neighbors=5))
    anchors = list(proto.anchor_parts)
    vis[1, anchors[1:]] = False
    ds2 = make_dataset(xy, vis)
    visible_city = anchors[0]
    assert connection_cost(("img001", visible_city), proto, ds2) == math.inf


def test_connection_cost_part_invisible_in_reference():
    xy = np.stack([TEMPLATE + 100, TEMPLATE + 90])
    vis = np.ones((2, 7), bool)
    vis[0, 4] = False
    ds = make_dataset(xy, vis)
    proto = build_candidate(CandidateAnchor("img000", 0), ds, PrototypeLearnConfig(neighbors=3))
    assert connection_cost(("img001", 4), proto, ds) == math.inf


def test_connection_cost_exact_similarity_pair():
    rng = np.random.default_rng(3)
    xy = similarity_copies(TEMPLATE, rng, 2)
    ds = make_dataset(xy)
    proto = build_candidate(CandidateAnchor("img000", 3), ds, PrototypeLearnConfig(neighbors=5))
    for j in range(7):
        assert connection_cost(("img001", j), proto, ds) < 1e-9


def test_cost_matrix_matches_single_costs():
    rng = np.random.default_rng(4)
    xy = similarity_copies(TEMPLATE, rng, 6) + rng.normal(0, 2, (6, 7, 2))
    vis = rng.random((6, 7)) < 0.8
    ds = make_dataset(xy, vis)
    cfg = PrototypeLearnConfig(neighbors=3)
    protos = [build_candidate(a, ds, cfg) for a in candidate_anchors(ds, cfg)[:5]]
    costs, cities = cost_matrix(protos, ds, workers=2)
    for r, (i, j) in enumerate(cities):
        for f, p in enumerate(protos):
            single = connection_cost((ds.images[i].id, j), p, ds)
            if math.isinf(single):
                assert math.isinf(costs[r, f])
            else:
                # independent route: explicit fit on the co-visible anchors
                used = [k for k in p.anchor_parts if vis[i, k] and p.ref_keypoints.visible[k]]
                w = estimate_warp(xy[i, used], p.normalized_ref_keypoints.xy[used], WarpFamily.SIMILARITY)
                box_scale = p.canonical_size / p.box.width
                if abs(box_scale - p.canonical_size / p.box.height) < 1e-12:
                    expect = residuals(w, xy[i, [j]], p.normalized_ref_keypoints.xy[[j]])[0]
                    assert costs[r, f] == pytest.approx(expect, rel=1e-9, abs=1e-9)
                assert costs[r, f] == pytest.approx(single, rel=1e-12, abs=1e-12)


# --- greedy facility location ---------------------------------------------------------


def test_greedy_single_facility():
    sol = greedy_facility_location(FacilityLocationInstance(10.0, [[1.0], [2.0], [3.0]]))
    assert sol.open_facilities == (0,)
    assert sol.total_cost == pytest.approx(16.0)


def test_greedy_two_clusters():
    C = np.array([[0, 100], [0, 100], [100, 0], [100, 0]], float)
    sol = greedy_facility_location(FacilityLocationInstance(1.0, C))
    assert sol.open_facilities == (0, 1)
    assert sol.total_cost == pytest.approx(2.0)


def test_greedy_infeasible():
    C = np.array([[1.0, np.inf], [np.inf, np.inf]])
    with pytest.raises(Infeasible) as e:
        greedy_facility_location(FacilityLocationInstance(1.0, C, city_ids=("a", "b")))
    assert e.value.uncovered == ["b"]


def random_instance(rng):
    n_f = int(rng.integers(1, 9))
    n_c = int(rng.integers(1, 13))
    C = rng.uniform(0, 10, (n_c, n_f))
    C[rng.random(C.shape) < 0.2] = np.inf
    for i in range(n_c):
        if not np.isfinite(C[i]).any():
            C[i, rng.integers(n_f)] = rng.uniform(0, 10)
    return C


def test_greedy_within_log_bound_of_brute_force():
    rng = np.random.default_rng(77)
    for trial in range(50):
        C = random_instance(rng)
        lam = [1.0, 5.0, 20.0][trial % 3]
        sol = greedy_facility_location(FacilityLocationInstance(lam, C))
        opt, _ = facility_location_optimum(lam, C)
        assert sol.total_cost <= (1 + math.log(12)) * opt + 1e-9
        assert sol.total_cost >= opt - 1e-9


def test_solution_feasible_and_consistent():
    rng = np.random.default_rng(8)
    for _ in range(30):
        C = random_instance(rng)
        inst = FacilityLocationInstance(3.0, C)
        sol = greedy_facility_location(inst)
        assert set(sol.assignment.tolist()) <= set(sol.open_facilities)
        assigned = C[np.arange(C.shape[0]), sol.assignment]
        assert np.all(np.isfinite(assigned))
        recomputed = 3.0 * len(sol.open_facilities) + assigned.sum()
        assert abs(recomputed - sol.total_cost) < 1e-9
        # after reassignment no city prefers another open facility
        sub = C[:, list(sol.open_facilities)]
        assert np.all(assigned <= sub.min(axis=1) + 1e-12)


def test_open_count_non_increasing_in_lambda():
    rng = np.random.default_rng(10)
    for _ in range(10):
        C = rng.uniform(0, 10, (12, 8))
        counts = [
            len(greedy_facility_location(FacilityLocationInstance(lam, C)).open_facilities)
            for lam in [0.1, 0.5, 1, 2, 5, 10, 20, 50, 100, 1000]
        ]
        assert all(a >= b for a, b in zip(counts, counts[1:])), counts


# --- learning -----------------------------------------------------------------------


def test_identical_images_give_one_prototype():
    ds = make_dataset(np.stack([TEMPLATE + 100] * 5))
    for lam in (1e-6, 1.0, 64.0):
        res = learn_prototypes(ds, PrototypeLearnConfig(lambda_=lam))
        assert len(res.prototypes) == 1
        assert res.mean_alignment_error == pytest.approx(0, abs=1e-12)


def _two_pose_clusters(rng, n_per=6):
    wings_down = TEMPLATE.copy()
    wings_up = TEMPLATE.copy()
    wings_up[3] = (10, -30)  # "back" lifted
    wings_up[5] = (8, -20)  # "belly" folded over
    a = similarity_copies(wings_down, rng, n_per)
    b = similarity_copies(wings_up, rng, n_per)
    return np.concatenate([a, b]), np.array([0] * n_per + [1] * n_per)


def test_two_clusters_separate():
    rng = np.random.default_rng(21)
    xy, cluster = _two_pose_clusters(rng)
    ds = make_dataset(xy)
    res = learn_prototypes(ds, PrototypeLearnConfig(lambda_=1e-3, neighbors=7, box_expansion=0.2))
    assert len(res.prototypes) >= 2
    cost = res.instance.connection_cost
    city_cluster = np.array([cluster[i] for i, _ in res.cities])
    fac_cluster = np.array([cluster[ds.index_of(a.image)] for a in res.instance.facility_ids])
    same = city_cluster[:, None] == fac_cluster[None, :]
    finite = np.isfinite(cost)
    assert cost[same & finite].mean() < cost[~same & finite].mean()
    assert cost[same & finite].max() < 1e-6


def test_large_lambda_gives_one_prototype():
    rng = np.random.default_rng(22)
    xy, _ = _two_pose_clusters(rng)
    ds = make_dataset(xy)
    cfg = PrototypeLearnConfig(lambda_=1.0, neighbors=5)
    base = learn_prototypes(ds, cfg)
    single_best = np.min(np.where(np.isfinite(base.instance.connection_cost), base.instance.connection_cost, 0).sum(0))
    res = learn_prototypes(ds, PrototypeLearnConfig(lambda_=single_best + 1.0, neighbors=5))
    assert len(res.prototypes) == 1


def test_learning_deterministic_and_covering():
    rng = np.random.default_rng(23)
    xy = similarity_copies(TEMPLATE, rng, 10) + rng.normal(0, 2, (10, 7, 2))
    vis = rng.random((10, 7)) < 0.85
    ds = make_dataset(xy, vis)
    cfg = PrototypeLearnConfig(lambda_=2.0, neighbors=3, anchor_subsample=30, rng_seed=5)
    r1 = learn_prototypes(ds, cfg)
    r2 = learn_prototypes(ds, cfg)
    assert [p.to_dict() for p in r1.prototypes] == [p.to_dict() for p in r2.prototypes]
    costs, cities = cost_matrix(r1.prototypes, ds)
    assert len(cities) == vis.sum()
    assert np.all(np.isfinite(costs).any(axis=1))
    assert r1.assignment_counts == sorted(r1.assignment_counts, reverse=True)
    assert r1.objective == pytest.approx(cfg.lambda_ * len(r1.prototypes) + r1.mean_alignment_error)


# --- baselines ----------------------------------------------------------------------


def test_cub_keypoints_one_per_part():
    rng = np.random.default_rng(30)
    xy = rng.uniform(20, 180, (4, 15, 2))
    ds = make_dataset(xy)
    protos = baseline_regions(CubKeypoints(), ds, PrototypeLearnConfig(neighbors=1, family="translation"))
    assert len(protos) == 15
    assert all(len(p.anchor_parts) == 1 for p in protos)
    assert all(p.family is WarpFamily.TRANSLATION for p in protos)


def test_rand_pairs_seeded():
    rng = np.random.default_rng(31)
    ds = make_dataset(similarity_copies(TEMPLATE, rng, 8))
    cfg = PrototypeLearnConfig()
    a = baseline_regions(RandPairs(6, seed=9), ds, cfg)
    b = baseline_regions(RandPairs(6, seed=9), ds, cfg)
    assert len(a) == 6 and a == b
    assert all(len(p.anchor_parts) == 2 for p in a)


def test_head_body_contains_group():
    rng = np.random.default_rng(32)
    ds = make_dataset(similarity_copies(TEMPLATE, rng, 3))
    head = ["p0", "p1", "p2", "p6"]
    protos = baseline_regions(HeadBody({"head": head}), ds, PrototypeLearnConfig())
    assert len(protos) == 1
    p = protos[0]
    assert p.anchor_parts == (0, 1, 2, 6)
    assert p.box.contains(p.ref_keypoints.xy[[0, 1, 2, 6]])
    with pytest.raises(UnknownPart):
        baseline_regions(HeadBody({"x": [99]}), ds, PrototypeLearnConfig())


# --- serialization -----------------------------------------------------------------


def test_prototype_json_round_trip(tmp_path):
    rng = np.random.default_rng(40)
    ds = make_dataset(similarity_copies(TEMPLATE, rng, 4))
    protos = baseline_regions(RandPairs(3, seed=1), ds, PrototypeLearnConfig(canonical_size=64))
    path = tmp_path / "p.json"
    save_prototypes(path, protos)
    back = load_prototypes(path)
    assert back == protos
    text1 = path.read_text()
    save_prototypes(path, back)
    assert path.read_text() == text1
