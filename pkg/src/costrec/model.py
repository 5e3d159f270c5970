"""Two-field factorization machine trained with user-weighted BCE and Adam.

Feature ``u`` is the one-hot user ``u``; feature ``n_users + i`` is item
``i``.  With exactly one user and one item active, the degree-2 FM

    y(x) = w0 + sum_j w_j x_j + sum_{j<l} <V_j, V_l> x_j x_l

collapses to ``w0 + w[u] + w[n_users + i] + V[u] . V[n_users + i]``.

Training minimizes ``sum_u weight[u] * mean BCE over u's samples``.  Each
sample of user ``u`` carries the coefficient ``weight[u] / n_u`` (``n_u``
being that user's positive + negative count for the epoch), so summing the
coefficient-weighted BCE over an epoch gives exactly that objective.
"""

from __future__ import annotations

import json
import logging
import io
import os
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from costrec.corpus import SplitDataset, sample_training_negatives
from costrec.exceptions import ConfigError, DataError, TrainingDivergedError

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_INIT, _SHUFFLE = 21, 22


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    l2: float = 1e-3
    batch_size: int = 512
    epochs: int = 300
    k: int = 32
    seed: int = 0
    init_scale: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")
        if self.batch_size < 1 or self.epochs < 1 or self.k < 1:
            raise ConfigError("batch_size, epochs and k must be >= 1")
        if self.init_scale < 0:
            raise ConfigError("init_scale must be >= 0")


@dataclass
class FMParams:
    w0: np.ndarray  # 0-d
    w: np.ndarray  # (n_users + n_items,)
    V: np.ndarray  # (n_users + n_items, k)
    n_users: int

    @property
    def n_items(self) -> int:
        return self.w.shape[0] - self.n_users

    @property
    def k(self) -> int:
        return self.V.shape[1]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.w0, self.w, self.V

    def copy(self) -> "FMParams":
        return FMParams(self.w0.copy(), self.w.copy(), self.V.copy(), self.n_users)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.w0) and np.isfinite(self.w).all() and np.isfinite(self.V).all())


class Gradients(NamedTuple):
    w0: np.ndarray
    w: np.ndarray
    V: np.ndarray


class Batch(NamedTuple):
    """Parallel arrays of training samples."""

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    coefs: np.ndarray


def init_params(n_users: int, n_items: int, cfg: TrainConfig) -> FMParams:
    if n_users < 1 or n_items < 1:
        raise ConfigError("n_users and n_items must be positive")
    rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, _INIT])
    n = n_users + n_items
    V = rng.normal(0.0, 1.0, size=(n, cfg.k)) * cfg.init_scale
    return FMParams(np.zeros(()), np.zeros(n), V, n_users)


def _check_ids(params: FMParams, users: np.ndarray, items: np.ndarray) -> None:
    if users.size and (users.min() < 0 or users.max() >= params.n_users):
        raise IndexError("user id out of range")
    if items.size and (items.min() < 0 or items.max() >= params.n_items):
        raise IndexError("item id out of range")


def predict_many(params: FMParams, users, items) -> np.ndarray:
    """Logits for paired ``users[j], items[j]`` (broadcastable)."""
    users, items = np.broadcast_arrays(np.asarray(users, np.int64), np.asarray(items, np.int64))
    _check_ids(params, users, items)
    fi = items + params.n_users
    return params.w0 + params.w[users] + params.w[fi] + np.einsum(
        "...k,...k->...", params.V[users], params.V[fi]
    )


def predict(params: FMParams, user: int, item: int) -> float:
    return float(predict_many(params, user, item))


def generic_fm(w0: float, w: np.ndarray, V: np.ndarray, x: np.ndarray) -> float:
    """Degree-2 FM on a dense feature vector, summed pair by pair.

    Quadratic in the number of features; used as a reference evaluator.
    """
    total = w0 + float(w @ x)
    nz = np.flatnonzero(x)
    for a, j in enumerate(nz):
        for l in nz[a + 1 :]:
            total += float(V[j] @ V[l]) * x[j] * x[l]
    return total


def bce_with_logits(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    # log(1 + e^z) - y z, stable for large |z|
    return np.logaddexp(0.0, z) - y * z


def user_loss(params: FMParams, user: int, positives, negatives) -> float:
    """Mean BCE over one user's positives (label 1) and negatives (label 0)."""
    positives = np.asarray(positives, dtype=np.int64)
    negatives = np.asarray(negatives, dtype=np.int64)
    if positives.size == 0:
        raise ValueError("positives must be non-empty")
    items = np.concatenate([positives, negatives])
    labels = np.concatenate([np.ones(positives.size), np.zeros(negatives.size)])
    z = predict_many(params, np.full(items.size, user), items)
    return float(bce_with_logits(z, labels).sum() / items.size)


def l2_penalty(params: FMParams, l2: float) -> float:
    """Regularizer whose gradient is ``l2 * w`` and ``l2 * V`` (``w0`` exempt)."""
    return 0.5 * l2 * (float(params.w @ params.w) + float(np.sum(params.V * params.V)))


def batch_objective(params: FMParams, batch: Batch, l2: float = 0.0) -> float:
    z = predict_many(params, batch.users, batch.items)
    return float(np.sum(batch.coefs * bce_with_logits(z, batch.labels))) + l2_penalty(params, l2)


def gradients(params: FMParams, batch: Batch, l2: float = 0.0) -> tuple[Gradients, float]:
    """Analytic gradient of :func:`batch_objective` and the (data-term) loss.

    Scatter-adds run sequentially in sample order, so the result is
    bit-stable for a given batch.
    """
    u = batch.users
    fi = batch.items + params.n_users
    Vu, Vi = params.V[u], params.V[fi]
    z = params.w0 + params.w[u] + params.w[fi] + np.einsum("bk,bk->b", Vu, Vi)
    loss = float(np.sum(batch.coefs * bce_with_logits(z, batch.labels)))
    g = batch.coefs * (expit(z) - batch.labels)

    n = params.w.shape[0]
    gw = np.bincount(u, weights=g, minlength=n) + np.bincount(fi, weights=g, minlength=n)
    gV = np.zeros_like(params.V)
    np.add.at(gV, u, g[:, None] * Vi)
    np.add.at(gV, fi, g[:, None] * Vu)
    if l2:
        gw += l2 * params.w
        gV += l2 * params.V
    return Gradients(np.asarray(g.sum()), gw, gV), loss


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: FMParams) -> "AdamState":
        return cls(
            [np.zeros_like(a) for a in params.arrays()],
            [np.zeros_like(a) for a in params.arrays()],
        )


def adam_step(
    state: AdamState, params: FMParams, grads: Sequence[np.ndarray], cfg: TrainConfig
) -> tuple[AdamState, FMParams]:
    """One bias-corrected Adam update, applied in place."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params.arrays(), grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        # lr * (m / c1) / (sqrt(v / c2) + eps), in one scratch buffer
        step = np.empty_like(v)
        np.divide(v, c2, out=step)
        np.sqrt(step, out=step)
        step += cfg.eps
        np.divide(m, step, out=step)
        step *= cfg.lr / c1
        p -= step
    return state, params


def epoch_samples(
    ds: SplitDataset, negatives: Sequence[np.ndarray], weights: np.ndarray
) -> Batch:
    """All (user, item, label, coefficient) samples for one epoch, user-major."""
    users, items, labels, coefs = [], [], [], []
    for u in range(ds.n_users):
        pos, neg = ds.train[u], negatives[u]
        n_u = pos.size + neg.size
        users.append(np.full(n_u, u, dtype=np.int64))
        items.append(np.concatenate([pos, neg]).astype(np.int64))
        labels.append(np.concatenate([np.ones(pos.size), np.zeros(neg.size)]))
        coefs.append(np.full(n_u, weights[u] / n_u))
    return Batch(*(np.concatenate(a) for a in (users, items, labels, coefs)))


@dataclass
class TrainResult:
    params: FMParams
    loss_history: list[float]
    l2_history: list[float]
    snapshots: dict[int, FMParams] = field(default_factory=dict)


def train(
    ds: SplitDataset,
    weights: np.ndarray | None,
    cfg: TrainConfig,
    *,
    keep_snapshots: bool = False,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Fit the FM with per-user weights (``None`` means the unweighted baseline).

    ``loss_history[e]`` is the weighted objective evaluated with the
    parameters at the end of epoch ``e`` over that epoch's samples; the L2
    term is reported separately in ``l2_history``.
    """
    if weights is None:
        weights = np.ones(ds.n_users)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (ds.n_users,):
        raise DataError(f"expected {ds.n_users} user weights, got shape {weights.shape}")
    if not (np.isfinite(weights).all() and (weights > 0).all()):
        raise DataError("user weights must be finite and positive")

    params = init_params(ds.n_users, ds.n_items, cfg)
    state = AdamState.zeros_like(params)
    result = TrainResult(params, [], [])
    for epoch in range(cfg.epochs):
        negatives = sample_training_negatives(ds, epoch, cfg.seed)
        samples = epoch_samples(ds, negatives, weights)
        order = np.random.default_rng([cfg.seed & 0xFFFFFFFF, _SHUFFLE, epoch]).permutation(
            samples.users.size
        )
        for b, start in enumerate(range(0, order.size, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            batch = Batch(*(a[idx] for a in samples))
            grads, loss = gradients(params, batch, cfg.l2)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, b, loss)
            adam_step(state, params, grads, cfg)

        epoch_loss = batch_objective(params, samples)
        if not np.isfinite(epoch_loss) or not params.is_finite():
            raise TrainingDivergedError(epoch, -1, epoch_loss)
        result.loss_history.append(epoch_loss)
        result.l2_history.append(l2_penalty(params, cfg.l2))
        if keep_snapshots:
            result.snapshots[epoch] = params.copy()
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)
        log.debug("epoch %d loss %.6f", epoch, epoch_loss)
    return result


# --- checkpoints ----------------------------------------------------------


def save_checkpoint(
    path: str | os.PathLike, params: FMParams, cfg: TrainConfig, meta: dict | None = None
) -> Path:
    """Write an ``.npz`` checkpoint (float64 arrays, so round trips are exact)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": CHECKPOINT_VERSION,
        "n_users": params.n_users,
        "n_items": params.n_items,
        "k": params.k,
        "train_config": asdict(cfg),
        **(meta or {}),
    }
    arrays = {"w0": params.w0, "w": params.w, "V": params.V, "header": np.array(json.dumps(header))}
    tmp = path.with_name(path.name + ".tmp")
    # np.savez stamps the current time into the archive; fixed entry dates keep
    # the bytes (and therefore the file hash) a function of the contents only
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[FMParams, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint: {path}")
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {header.get('version')}")
        params = FMParams(z["w0"].copy(), z["w"].copy(), z["V"].copy(), int(header["n_users"]))
    if params.n_items != header["n_items"] or params.k != header["k"]:
        raise DataError(f"{path}: array shapes disagree with header")
    return params, header
