import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from costrec.exceptions import DataError
from costrec.mainstream import (
    MainstreamScores,
    dis_scores,
    read_scores,
    sim_scores,
    standardize,
    util_scores,
    write_scores,
)
from costrec.model import TrainConfig, init_params


def brute_sim(sets):
    out = []
    for u, a in enumerate(sets):
        total = 0.0
        for v, b in enumerate(sets):
            if u != v and (a | b):
                total += len(a & b) / len(a | b)
        out.append(total / (len(sets) - 1))
    return np.array(out)


def brute_dis(sets, n_items):
    X = np.zeros((len(sets), n_items))
    for u, s in enumerate(sets):
        X[u, list(s)] = 1.0
    mean = X.mean(axis=0)
    return np.array(
        [x @ mean / (np.linalg.norm(x) * np.linalg.norm(mean)) if x.any() else 0.0 for x in X]
    )


def as_arrays(sets):
    return [np.array(sorted(s), dtype=np.int64) for s in sets]


item_sets = st.lists(st.sets(st.integers(0, 14), max_size=8), min_size=2, max_size=12)


def test_sim_examples():
    assert sim_scores(as_arrays([{1, 2}, {1, 2}])).values.tolist() == [1.0, 1.0]
    assert sim_scores(as_arrays([{1}, {2}])).values.tolist() == [0.0, 0.0]
    s = sim_scores(as_arrays([{1, 2}, {2, 3}, {4}])).values
    np.testing.assert_allclose(s, [1 / 6, 1 / 6, 0.0])


def test_dis_examples():
    d = dis_scores(as_arrays([{0}, {1}]), 2).values
    np.testing.assert_allclose(d, [1 / math.sqrt(2)] * 2, rtol=1e-15)
    assert dis_scores(as_arrays([{0, 1}, {0, 1}]), 3).values == pytest.approx([1.0, 1.0])


@settings(max_examples=60, deadline=None)
@given(item_sets)
def test_sim_dis_match_brute_force(sets):
    arrays = as_arrays(sets)
    np.testing.assert_allclose(sim_scores(arrays).values, brute_sim(sets), atol=1e-12)
    np.testing.assert_allclose(sim_scores(arrays, block=3).values, brute_sim(sets), atol=1e-12)
    if any(sets):
        np.testing.assert_allclose(dis_scores(arrays, 15).values, brute_dis(sets, 15), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(item_sets, st.randoms(use_true_random=False))
def test_scores_equivariant_under_user_permutation(sets, rnd):
    perm = list(range(len(sets)))
    rnd.shuffle(perm)
    arrays = as_arrays(sets)
    shuffled = [arrays[p] for p in perm]
    np.testing.assert_allclose(sim_scores(shuffled).values, sim_scores(arrays).values[perm], atol=1e-12)
    if any(sets):
        np.testing.assert_allclose(
            dis_scores(shuffled, 15).values, dis_scores(arrays, 15).values[perm], atol=1e-12
        )


def test_sim_sampled_mode():
    rng = np.random.default_rng(0)
    sets = [set(rng.choice(30, size=6, replace=False).tolist()) for _ in range(60)]
    arrays = as_arrays(sets)
    exact = sim_scores(arrays).values
    a = sim_scores(arrays, max_exact_users=10, sample_size=59, seed=3)
    assert a.metadata["mode"].startswith("sampled")
    np.testing.assert_allclose(a.values, exact, atol=1e-12)  # sample covers everyone
    b = sim_scores(arrays, max_exact_users=10, sample_size=20, seed=3)
    c = sim_scores(arrays, max_exact_users=10, sample_size=20, seed=3)
    assert np.array_equal(b.values, c.values)


def test_sim_requires_two_users():
    with pytest.raises(ValueError):
        sim_scores(as_arrays([{1}]))


def test_util_second_place():
    p = init_params(1, 4, TrainConfig(init_scale=0.0))
    p.w[1 + 2] = 1.0  # item 2 outranks the rest; item 0 next on the id tie-break
    u = util_scores(p, [np.arange(4)], [np.array([0])])
    assert u.method == "Util" and u.values[0] == pytest.approx(1 / math.log2(3), abs=1e-15)


def test_util_missing_validation_warns():
    p = init_params(2, 4, TrainConfig())
    with pytest.warns(UserWarning, match="excluded"):
        u = util_scores(p, [np.arange(4), np.arange(4)], [np.array([1]), np.array([], dtype=int)])
    assert np.isnan(u.values[1])


def test_standardize():
    np.testing.assert_allclose(standardize([1.0, 2.0, 3.0]), [-1.0, 0.0, 1.0])
    with pytest.raises(ValueError, match="degenerate"):
        standardize([2.0, 2.0, 2.0])


def test_scores_round_trip(tmp_path):
    s = MainstreamScores("Dis", [0.25, 0.5], {"note": 1})
    write_scores(tmp_path / "s.tsv", ["a", "b"], s, {"seed": 0})
    back = read_scores(tmp_path / "s.tsv", ["b", "a"])
    assert back.method == "Dis" and back.values.tolist() == [0.5, 0.25]
    assert back.metadata["note"] == 1


def test_scores_import_den(tmp_path):
    (tmp_path / "den.tsv").write_text("# costrec scores/1\nuser\tmethod\tscore\na\tDen\t0.1\nb\tDen\t0.7\n")
    assert read_scores(tmp_path / "den.tsv", ["a", "b"]).method == "Den"
    with pytest.raises(DataError, match="no score"):
        read_scores(tmp_path / "den.tsv", ["a", "c"])


def test_unknown_method():
    with pytest.raises(ValueError):
        MainstreamScores("Nope", [1.0])
