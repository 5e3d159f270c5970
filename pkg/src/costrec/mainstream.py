"""Per-user mainstreamness scores.

``Sim``  mean Jaccard similarity of a user's training items to every other user's.
``Dis``  cosine between a user's binary item vector and the mean user vector.
``Util`` validation nDCG of the unweighted model for that user.

``Den`` and ``Deep`` are accepted only when importing externally computed
score files.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from costrec._tsv import read_table, write_table
from costrec.exceptions import DataError
from costrec.metrics import evaluate_model
from costrec.model import FMParams

METHODS = ("Sim", "Dis", "Util")
IMPORT_METHODS = METHODS + ("Den", "Deep")
SCORE_SCHEMA = "scores/1"
EXACT_SIM_MAX_USERS = 20_000


@dataclass
class MainstreamScores:
    method: str
    values: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in IMPORT_METHODS:
            raise ValueError(f"unknown mainstreamness method {self.method!r}")
        self.values = np.asarray(self.values, dtype=np.float64)

    def __len__(self) -> int:
        return self.values.size


def _binary_matrix(item_sets: Sequence[np.ndarray], n_items: int | None = None) -> sp.csr_matrix:
    lengths = np.fromiter((len(s) for s in item_sets), dtype=np.int64, count=len(item_sets))
    cols = np.concatenate([np.asarray(s, dtype=np.int64) for s in item_sets] or [np.empty(0, np.int64)])
    if n_items is None:
        n_items = int(cols.max()) + 1 if cols.size else 1
    indptr = np.r_[0, np.cumsum(lengths)]
    X = sp.csr_matrix((np.ones(cols.size), cols, indptr), shape=(len(item_sets), n_items))
    X.sum_duplicates()
    X.data[:] = 1.0
    return X


def sim_scores(
    train: Sequence[np.ndarray],
    *,
    max_exact_users: int = EXACT_SIM_MAX_USERS,
    sample_size: int = 2000,
    seed: int = 0,
    block: int = 1024,
) -> MainstreamScores:
    """Mean Jaccard similarity to all other users.

    Exact when there are at most ``max_exact_users`` users; otherwise each
    user is compared with ``sample_size`` other users drawn at random.
    Two empty sets have similarity 0.
    """
    n = len(train)
    if n < 2:
        raise ValueError("Sim needs at least 2 users")
    X = _binary_matrix(train)
    sizes = np.asarray(X.sum(axis=1)).ravel()
    XT = X.T.tocsr()
    out = np.empty(n)
    exact = n <= max_exact_users
    if exact:
        for lo in range(0, n, block):
            hi = min(lo + block, n)
            inter = np.asarray((X[lo:hi] @ XT).todense())
            union = sizes[lo:hi, None] + sizes[None, :] - inter
            with np.errstate(invalid="ignore", divide="ignore"):
                jac = np.where(union > 0, inter / union, 0.0)
            rows = np.arange(hi - lo)
            jac[rows, rows + lo] = 0.0
            out[lo:hi] = jac.sum(axis=1) / (n - 1)
    else:
        rng = np.random.default_rng([seed, 31])
        m = min(sample_size, n - 1)
        for u in range(n):
            others = rng.choice(n - 1, size=m, replace=False)
            others[others >= u] += 1
            inter = np.asarray((X[others] @ X[u].T).todense()).ravel()
            union = sizes[others] + sizes[u] - inter
            with np.errstate(invalid="ignore", divide="ignore"):
                out[u] = np.where(union > 0, inter / union, 0.0).mean()
    meta = {"mode": "exact" if exact else f"sampled:{sample_size}:seed={seed}"}
    return MainstreamScores("Sim", out, meta)


def dis_scores(train: Sequence[np.ndarray], n_items: int) -> MainstreamScores:
    """Cosine similarity of each user's binary vector to the mean user vector."""
    if not len(train):
        raise ValueError("Dis needs at least one user")
    X = _binary_matrix(train, n_items)
    mean = np.asarray(X.mean(axis=0)).ravel()
    mean_norm = np.linalg.norm(mean)
    if mean_norm == 0:
        raise ValueError("no interactions: mean user vector has zero norm")
    norms = np.sqrt(np.asarray(X.sum(axis=1)).ravel())
    dots = X @ mean
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(norms > 0, dots / (norms * mean_norm), 0.0)
    return MainstreamScores("Dis", np.clip(out, 0.0, 1.0))


def util_scores(
    params: FMParams,
    val_candidates: Sequence[np.ndarray],
    val_relevant: Sequence[np.ndarray],
    metric: str = "ndcg",
    metadata: dict | None = None,
) -> MainstreamScores:
    """Validation accuracy of the unweighted model per user.

    Users without validation items get NaN and a warning.
    """
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        values = evaluate_model(params, val_candidates, val_relevant, metric)
    if caught:
        warnings.warn(f"Util: {int(np.isnan(values).sum())} user(s) excluded (empty validation set)")
    return MainstreamScores("Util", values, {"metric": metric, **(metadata or {})})


def standardize(scores) -> np.ndarray:
    """Zero mean, unit sample standard deviation."""
    values = np.asarray(getattr(scores, "values", scores), dtype=np.float64)
    if values.size < 2:
        raise ValueError("need at least 2 scores")
    sd = values.std(ddof=1)
    if not sd > 0:
        raise ValueError("degenerate scores: zero variance")
    return (values - values.mean()) / sd


def write_scores(
    path: str | os.PathLike, user_ids: Sequence[str], scores: MainstreamScores, meta: dict | None = None
):
    rows = ((uid, scores.method, float(v)) for uid, v in zip(user_ids, scores.values))
    meta = {**(meta or {}), "score_metadata": scores.metadata}
    return write_table(path, SCORE_SCHEMA, ["user", "method", "score"], rows, meta)


def read_scores(path: str | os.PathLike, user_ids: Sequence[str]) -> MainstreamScores:
    """Load a score file (ours or externally computed) ordered by ``user_ids``."""
    meta, _, rows = read_table(path, SCORE_SCHEMA)
    methods = {r[1] for r in rows}
    if len(methods) != 1:
        raise DataError(f"{path}: expected exactly one method, found {sorted(methods)}")
    method = methods.pop()
    if method not in IMPORT_METHODS:
        raise DataError(f"{path}: unknown method {method!r}")
    table = {r[0]: float(r[2]) for r in rows}
    missing = [u for u in user_ids if u not in table]
    if missing:
        raise DataError(f"{path}: no score for {len(missing)} user(s), e.g. {missing[0]!r}")
    metadata = json.loads(meta.get("score_metadata", "{}"))
    metadata["_file_meta"] = meta
    return MainstreamScores(method, np.array([table[u] for u in user_ids]), metadata)
