import math

import numpy as np
import pytest

from costrec.corpus import SplitConfig, filter_and_truncate, sample_training_negatives, split, synthetic_log
from costrec.exceptions import ConfigError, DataError, TrainingDivergedError
from costrec.model import (
    AdamState,
    Batch,
    FMParams,
    TrainConfig,
    adam_step,
    batch_objective,
    generic_fm,
    gradients,
    init_params,
    load_checkpoint,
    predict,
    predict_many,
    save_checkpoint,
    train,
    user_loss,
)


def random_params(n_users, n_items, k, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    n = n_users + n_items
    return FMParams(
        np.asarray(rng.normal(0, scale)), rng.normal(0, scale, n), rng.normal(0, scale, (n, k)), n_users
    )


def random_batch(n_users, n_items, size, seed):
    rng = np.random.default_rng(seed)
    return Batch(
        rng.integers(0, n_users, size),
        rng.integers(0, n_items, size),
        rng.integers(0, 2, size).astype(float),
        rng.uniform(0.05, 2.0, size),
    )


def one_hot(params, u, i):
    x = np.zeros(params.w.size)
    x[u] = 1.0
    x[params.n_users + i] = 1.0
    return x


def reference_objective(params, batch, l2):
    """Coefficient-weighted BCE via the generic pairwise FM, term by term."""
    total = 0.0
    for u, i, y, c in zip(*batch):
        z = generic_fm(float(params.w0), params.w, params.V, one_hot(params, u, i))
        p = 1.0 / (1.0 + math.exp(-z))
        total += c * -(y * math.log(p) + (1 - y) * math.log(1 - p))
    return total + 0.5 * l2 * (float(np.sum(params.w**2)) + float(np.sum(params.V**2)))


def finite_difference(params, batch, l2, h=1e-5):
    grads = []
    for arr in params.arrays():
        g = np.zeros(arr.shape)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            up = reference_objective(params, batch, l2)
            flat[j] = old - h
            down = reference_objective(params, batch, l2)
            flat[j] = old
            gflat[j] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a, n = np.asarray(a, float), np.asarray(n, float)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


# --- init / predict ---------------------------------------------------------


def test_init_shapes_and_zero_scale():
    p = init_params(2, 3, TrainConfig(k=32))
    assert p.V.shape == (5, 32) and p.w.shape == (5,) and float(p.w0) == 0.0
    z = init_params(4, 6, TrainConfig(init_scale=0.0))
    assert np.all(predict_many(z, np.arange(4)[:, None], np.arange(6)[None, :]) == 0.0)


def test_init_deterministic():
    a = init_params(5, 7, TrainConfig(seed=3))
    b = init_params(5, 7, TrainConfig(seed=3))
    assert np.array_equal(a.V, b.V)


def test_predict_arithmetic():
    p = init_params(1, 1, TrainConfig(k=2, init_scale=0.0))
    p.w0[...] = 1.0
    p.w[:] = [0.5, -0.25]
    p.V[0] = [0.5, 1.0]
    p.V[1] = [0.5, 0.5]  # dot = 0.75
    assert predict(p, 0, 0) == pytest.approx(2.0, abs=1e-15)


def test_predict_matches_generic_fm():
    p = random_params(4, 6, 5, seed=1)
    for u in range(4):
        for i in range(6):
            assert predict(p, u, i) == pytest.approx(
                generic_fm(float(p.w0), p.w, p.V, one_hot(p, u, i)), abs=1e-12
            )


def test_predict_out_of_range():
    p = init_params(2, 2, TrainConfig())
    with pytest.raises(IndexError):
        predict(p, 2, 0)
    with pytest.raises(IndexError):
        predict(p, 0, -1)


# --- loss -------------------------------------------------------------------------


def test_user_loss_zero_model():
    p = init_params(1, 10, TrainConfig(init_scale=0.0))
    assert user_loss(p, 0, [0], []) == pytest.approx(math.log(2), abs=1e-15)
    assert user_loss(p, 0, [0], [1, 2, 3, 4]) == pytest.approx(math.log(2), abs=1e-15)


def test_user_loss_matches_term_by_term():
    p = random_params(2, 8, 3, seed=4)
    pos, neg = [1, 3], [0, 5, 6]
    terms = []
    for i, y in [(i, 1) for i in pos] + [(i, 0) for i in neg]:
        z = generic_fm(float(p.w0), p.w, p.V, one_hot(p, 1, i))
        s = 1 / (1 + math.exp(-z))
        terms.append(-math.log(s) if y else -math.log(1 - s))
    assert user_loss(p, 1, pos, neg) == pytest.approx(sum(terms) / len(terms), rel=1e-12)


def test_user_loss_requires_positives():
    with pytest.raises(ValueError):
        user_loss(init_params(1, 2, TrainConfig()), 0, [], [1])


# --- gradients --------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_gradient_check(seed):
    rng = np.random.default_rng(seed)
    nu, ni, k = rng.integers(2, 6), rng.integers(2, 6), rng.integers(1, 5)
    p = random_params(nu, ni, k, seed)
    batch = random_batch(nu, ni, 12, seed + 100)
    l2 = 0.01
    analytic, loss = gradients(p, batch, l2)
    assert max_rel_error(analytic, finite_difference(p, batch, l2)) < 1e-4
    assert loss + 0.5 * l2 * (p.w @ p.w + np.sum(p.V**2)) == pytest.approx(batch_objective(p, batch, l2))


def test_gradient_saturated_is_small():
    p = init_params(2, 2, TrainConfig(init_scale=0.0))
    p.w[:2] = [40.0, -40.0]  # user 0 always positive, user 1 always negative
    batch = Batch(np.array([0, 1]), np.array([0, 1]), np.array([1.0, 0.0]), np.ones(2))
    g, _ = gradients(p, batch)
    assert max(np.abs(a).max() for a in g) < 1e-15


def test_gradient_zero_coefficients():
    p = random_params(3, 4, 2, seed=0)
    batch = random_batch(3, 4, 10, 0)._replace(coefs=np.zeros(10))
    g, _ = gradients(p, batch, l2=0.0)
    assert all(not np.any(a) for a in g)


def test_gradient_scales_with_weight():
    p = random_params(1, 6, 4, seed=2)
    batch = random_batch(1, 6, 9, 3)
    g1, _ = gradients(p, batch, l2=0.0)
    g2, _ = gradients(p, batch._replace(coefs=2.0 * batch.coefs), l2=0.0)
    for a, b in zip(g1, g2):
        assert np.array_equal(2.0 * a, b)
    g3, _ = gradients(p, batch._replace(coefs=3.7 * batch.coefs), l2=0.0)
    for a, b in zip(g1, g3):
        np.testing.assert_allclose(3.7 * a, b, rtol=1e-12, atol=0)


# --- adam --------------------------------------------------------------------------


def test_adam_first_step_is_lr_sign():
    cfg = TrainConfig(lr=0.01)
    p = random_params(2, 3, 2, seed=0)
    before = p.copy()
    g = [np.asarray(0.3), np.linspace(-1, 1, 5) + 0.05, np.full((5, 2), -2.0)]
    adam_step(AdamState.zeros_like(p), p, g, cfg)
    for new, old, grad in zip(p.arrays(), before.arrays(), g):
        expected = -cfg.lr * grad / (np.abs(grad) + cfg.eps)
        np.testing.assert_allclose(new - old, expected, rtol=1e-9, atol=1e-15)


def test_adam_zero_gradient_fixed_point():
    cfg = TrainConfig(lr=0.1)
    p = random_params(2, 2, 3, seed=1)
    before = p.copy()
    state = AdamState.zeros_like(p)
    zeros = [np.zeros_like(a) for a in p.arrays()]
    for _ in range(50):
        adam_step(state, p, zeros, cfg)
    assert state.t == 50
    for a, b in zip(p.arrays(), before.arrays()):
        assert np.array_equal(a, b)


def test_adam_update_bounded_by_lr():
    cfg = TrainConfig(lr=0.05)
    p = random_params(3, 3, 2, seed=5)
    state = AdamState.zeros_like(p)
    rng = np.random.default_rng(0)
    for _ in range(30):
        before = p.copy()
        adam_step(state, p, [rng.normal(size=a.shape) for a in p.arrays()], cfg)
        # bias-corrected Adam step is at most ~lr * (1 - b1) / sqrt(1 - b2) in theory;
        # in practice this random-gradient regime stays well within a few lr
        for a, b in zip(p.arrays(), before.arrays()):
            assert np.max(np.abs(a - b)) <= 5 * cfg.lr


# --- training -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_split():
    log = synthetic_log(n_users=30, n_items=200, n_popular=80, n_niche_clusters=4, seed=2)
    cfg = SplitConfig(candidate_total=50, seed=1)
    return split(filter_and_truncate(log, cfg), cfg)


def test_train_deterministic_and_unit_weights_match_baseline(small_split):
    cfg = TrainConfig(lr=0.01, epochs=2, k=4, seed=3)
    a = train(small_split, None, cfg)
    b = train(small_split, np.ones(small_split.n_users), cfg)
    for x, y in zip(a.params.arrays(), b.params.arrays()):
        assert np.array_equal(x, y)
    assert a.loss_history == b.loss_history
    c = train(small_split, None, cfg)
    assert np.array_equal(a.params.V, c.params.V)


def test_train_loss_audit(small_split):
    cfg = TrainConfig(lr=0.01, epochs=3, k=4, seed=0)
    w = np.random.default_rng(0).uniform(0.1, 3.0, small_split.n_users)
    res = train(small_split, w, cfg, keep_snapshots=True)
    assert len(res.loss_history) == 3 and all(np.isfinite(res.loss_history))
    for epoch, snap in res.snapshots.items():
        negs = sample_training_negatives(small_split, epoch, cfg.seed)
        recomputed = sum(
            w[u] * user_loss(snap, u, small_split.train[u], negs[u]) for u in range(small_split.n_users)
        )
        assert abs(recomputed - res.loss_history[epoch]) < 1e-10


def test_train_loss_decreases(small_split):
    res = train(small_split, None, TrainConfig(lr=0.01, epochs=5, k=8))
    assert res.loss_history[-1] < res.loss_history[0]


def test_train_rejects_bad_weights(small_split):
    cfg = TrainConfig(epochs=1)
    with pytest.raises(DataError):
        train(small_split, np.ones(small_split.n_users - 1), cfg)
    with pytest.raises(DataError):
        train(small_split, np.zeros(small_split.n_users), cfg)


def test_train_divergence_reports_epoch_and_batch(small_split):
    w = np.full(small_split.n_users, 1.7e308)  # coefficient sums overflow
    with pytest.raises(TrainingDivergedError) as info:
        train(small_split, w, TrainConfig(epochs=1))
    assert info.value.epoch == 0 and info.value.batch == 0


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


def test_checkpoint_round_trip(tmp_path):
    p = random_params(3, 5, 4, seed=9)
    cfg = TrainConfig(seed=9)
    path = save_checkpoint(tmp_path / "m.npz", p, cfg, {"note": "x"})
    q, header = load_checkpoint(path)
    for a, b in zip(p.arrays(), q.arrays()):
        assert np.array_equal(a, b)
    assert q.n_users == 3 and header["note"] == "x" and header["train_config"]["seed"] == 9


def test_checkpoint_missing(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "none.npz")


def test_checkpoint_bytes_depend_only_on_contents(tmp_path):
    p = random_params(2, 3, 2, seed=1)
    a = save_checkpoint(tmp_path / "a.npz", p, TrainConfig())
    b = save_checkpoint(tmp_path / "b.npz", p.copy(), TrainConfig())
    assert a.read_bytes() == b.read_bytes()
    with np.load(a) as z:  # still a regular npz archive
        assert np.array_equal(z["V"], p.V)
