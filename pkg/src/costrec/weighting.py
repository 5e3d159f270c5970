"""Mainstreamness scores to per-user training weights.

Scores are first replaced by their normalized rank in ``[0, 1]`` and then
passed through the density of a zero-mean Normal truncated to ``[0, 1]``.
The Normal's scale is chosen so that ``cost(0) / cost(1)`` equals the
requested contrast.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import erfc

from costrec._tsv import read_table, write_table
from costrec.exceptions import ConfigError, DataError

PRESET_CONTRASTS = (5.0, 10.0, 20.0, 50.0, 80.0)
WEIGHT_SCHEMA = "weights/1"

_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], values.size]
    run_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(values.size)
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks


def ecdf_normalize(scores) -> np.ndarray:
    """``(avg_rank - 1) / (N - 1)``: min score -> 0, max score -> 1, ties shared."""
    scores = np.asarray(getattr(scores, "values", scores), dtype=np.float64)
    if scores.size < 2:
        raise ValueError("ecdf normalization needs at least 2 users")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    return (average_ranks(scores) - 1.0) / (scores.size - 1)


def calibrate_sigma(contrast: float) -> float:
    """Scale of the zero-mean Normal whose density ratio at 0 vs 1 is ``contrast``.

    The truncation constant cancels in the ratio, leaving
    ``exp(1 / (2 sigma^2)) = contrast``.
    """
    if not contrast > 1.0:
        raise ConfigError(f"contrast must be > 1, got {contrast}")
    return 1.0 / math.sqrt(2.0 * math.log(contrast))


def norm_cdf(x):
    return 0.5 * erfc(-np.asarray(x, dtype=np.float64) / _SQRT2)


@dataclass(frozen=True)
class CostFunction:
    """Zero-mean Normal density truncated to ``[0, 1]``."""

    contrast: float
    sigma: float
    normalizer: float

    @classmethod
    def from_contrast(cls, contrast: float) -> "CostFunction":
        sigma = calibrate_sigma(contrast)
        normalizer = sigma * float(norm_cdf(1.0 / sigma) - norm_cdf(0.0))
        return cls(float(contrast), sigma, normalizer)

    def __call__(self, x):
        return cost(x, self)


def cost(x, fn: CostFunction):
    x = np.asarray(x, dtype=np.float64)
    if np.any(~((x >= 0.0) & (x <= 1.0))):
        raise ValueError("cost is defined on [0, 1] only")
    z = x / fn.sigma
    out = np.exp(-0.5 * z * z) / _SQRT2PI / fn.normalizer
    return float(out) if out.ndim == 0 else out


def user_weights(scores, contrast: float, mean_one: bool = False) -> np.ndarray:
    """``cost(ecdf(score))`` per user; higher mainstreamness, lower weight.

    ``mean_one`` rescales the weights to average 1 (off by default: the raw
    density is used).
    """
    weights = cost(ecdf_normalize(scores), CostFunction.from_contrast(contrast))
    if mean_one:
        weights = weights / weights.mean()
    return weights


def write_weights(
    path: str | os.PathLike, user_ids: Sequence[str], weights, meta: dict | None = None
):
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(user_ids),):
        raise DataError("one weight per user required")
    return write_table(path, WEIGHT_SCHEMA, ["user", "weight"], zip(user_ids, map(float, weights)), meta)


def read_weights(path: str | os.PathLike, user_ids: Sequence[str]) -> np.ndarray:
    """Load a weight file and order it by ``user_ids``; every user must be present."""
    _, _, rows = read_table(path, WEIGHT_SCHEMA)
    table = {uid: float(w) for uid, w in rows}
    missing = [u for u in user_ids if u not in table]
    if missing:
        raise DataError(f"{path}: no weight for {len(missing)} user(s), e.g. {missing[0]!r}")
    out = np.array([table[u] for u in user_ids])
    if not (out > 0).all():
        raise DataError(f"{path}: weights must be positive")
    return out
