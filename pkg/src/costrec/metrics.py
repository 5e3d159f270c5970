"""Ranking metrics, per-user evaluation, group analysis and the
validation/test reliability study."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace
from typing import Iterable, Literal, Sequence

import numpy as np

from costrec.corpus import InteractionLog, SplitConfig, filter_and_truncate, split
from costrec.exceptions import CostrecError
from costrec.model import FMParams, TrainConfig, predict_many, train
from costrec.weighting import average_ranks

logger = logging.getLogger(__name__)

GROUP_LABELS = ("low", "med-low", "med", "med-high", "high")


def _relevance(ranked, relevant) -> tuple[np.ndarray, int]:
    ranked = np.asarray(ranked)
    relevant = np.asarray(list(relevant) if isinstance(relevant, (set, frozenset)) else relevant)
    if ranked.size == 0:
        raise ValueError("ranked list is empty")
    if relevant.size == 0:
        raise ValueError("relevant set is empty")
    return np.isin(ranked, relevant), np.unique(relevant).size


def ndcg(ranked, relevant) -> float:
    """Full-list nDCG with binary relevance and ``1 / log2(rank + 1)`` discount."""
    rel, n_rel = _relevance(ranked, relevant)
    discounts = 1.0 / np.log2(np.arange(2, rel.size + 2))
    ideal = discounts[: min(n_rel, rel.size)].sum()
    return float(discounts[rel].sum() / ideal)


def average_precision(ranked, relevant) -> float:
    """Mean of precision@r over the ranks r of relevant items.

    Relevant items missing from ``ranked`` count as zero precision.
    """
    rel, n_rel = _relevance(ranked, relevant)
    hits = np.cumsum(rel)
    ranks = np.flatnonzero(rel) + 1
    return float(np.sum(hits[rel] / ranks) / n_rel)


METRICS = {"ndcg": ndcg, "ap": average_precision}


def rank_candidates(params: FMParams, user: int, candidates: np.ndarray) -> np.ndarray:
    """Candidates by descending logit, ties broken by ascending item id."""
    candidates = np.asarray(candidates, dtype=np.int64)
    logits = predict_many(params, user, candidates)
    return candidates[np.lexsort((candidates, -logits))]


def evaluate_model(
    params: FMParams,
    candidates: Sequence[np.ndarray],
    relevant: Sequence[np.ndarray],
    metric: Literal["ndcg", "ap"] = "ndcg",
) -> np.ndarray:
    """Per-user metric; users without candidates or relevant items get NaN."""
    fn = METRICS[metric]
    out = np.full(len(relevant), np.nan)
    skipped = 0
    for u, rel in enumerate(relevant):
        cands = candidates[u] if u < len(candidates) else None
        if cands is None or len(cands) == 0 or len(rel) == 0:
            skipped += 1
            continue
        out[u] = fn(rank_candidates(params, u, cands), rel)
    if skipped:
        warnings.warn(f"{skipped} user(s) skipped: no candidates or no relevant items", stacklevel=2)
    return out


def group_users(scores, n_groups: int = 5) -> np.ndarray:
    """Quantile group index per user (0 = lowest scores).

    Users are ordered by score, ties by user index, and cut into contiguous
    blocks whose sizes differ by at most one; the larger blocks come first.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < n_groups:
        raise ValueError(f"need at least {n_groups} users, got {scores.size}")
    order = np.lexsort((np.arange(scores.size), scores))
    groups = np.empty(scores.size, dtype=np.int64)
    for g, block in enumerate(np.array_split(order, n_groups)):
        groups[block] = g
    return groups


def group_label(g: int, n_groups: int = 5) -> str:
    return GROUP_LABELS[g] if n_groups == 5 else f"q{g + 1}"


@dataclass(frozen=True)
class GroupRow:
    group: str
    n_users: int
    baseline: float
    treatment: float
    improvement: float  # percent; NaN when the baseline mean is 0


def relative_improvement(baseline, treatment):
    """``100 (treatment - baseline) / baseline``; NaN where the baseline is 0."""
    baseline = np.asarray(baseline, dtype=np.float64)
    treatment = np.asarray(treatment, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 100.0 * (treatment - baseline) / baseline
    return np.where(baseline == 0, np.nan, out)


def group_report(baseline, treatment, grouping_key, n_groups: int = 5) -> list[GroupRow]:
    """Per-group and overall means of baseline vs treatment scores."""
    baseline = np.asarray(baseline, dtype=np.float64)
    treatment = np.asarray(treatment, dtype=np.float64)
    if baseline.shape != treatment.shape or baseline.shape != np.shape(grouping_key):
        raise ValueError("baseline, treatment and grouping key must cover the same users")
    groups = group_users(grouping_key, n_groups)
    rows = []
    for g in range(n_groups):
        sel = groups == g
        b, t = baseline[sel].mean(), treatment[sel].mean()
        rows.append(GroupRow(group_label(g, n_groups), int(sel.sum()), b, t, float(relative_improvement(b, t))))
    b, t = baseline.mean(), treatment.mean()
    rows.append(GroupRow("overall", baseline.size, b, t, float(relative_improvement(b, t))))
    return rows


def binned_means(x, y, n_bins: int = 10) -> list[tuple[float, float, int, float]]:
    """Equal-width bins over ``[0, 1]``: ``(left, right, count, mean y)``.

    NaN ``y`` values are left out; the last bin is closed on the right.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ok = np.isfinite(y)
    idx = np.minimum((x * n_bins).astype(np.int64), n_bins - 1)
    out = []
    for b in range(n_bins):
        sel = ok & (idx == b)
        mean = float(y[sel].mean()) if sel.any() else float("nan")
        out.append((b / n_bins, (b + 1) / n_bins, int(sel.sum()), mean))
    return out


def _paired(x, y, min_len: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d and of equal length")
    if x.size < min_len:
        raise ValueError(f"need at least {min_len} values")
    return x, y


def pearson(x, y) -> float:
    x, y = _paired(x, y, 2)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("zero variance")
    r = float(dx @ dy) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def spearman(x, y) -> float:
    x, y = _paired(x, y, 2)
    return pearson(average_ranks(x), average_ranks(y))


def rmse(x, y) -> float:
    x, y = _paired(x, y, 1)
    return float(np.sqrt(np.mean((x - y) ** 2)))


@dataclass(frozen=True)
class StudyCell:
    min_train: int
    min_val: int
    min_test: int
    n_users: int
    rmse: float
    spearman: float
    status: str = "ok"


def study_cell(
    log: InteractionLog, cell: tuple[int, int, int], model_cfg: TrainConfig, seed: int,
    base: SplitConfig | None = None,
) -> StudyCell:
    """Re-split ``log`` for one (train, val, test) minimum, train the unweighted
    model and compare per-user validation and test nDCG."""
    a, b, c = cell
    base = base or SplitConfig()
    try:
        cfg = replace(
            base, min_train=a, min_val=b, min_test=c, seed=seed,
            max_relevant=max(base.max_relevant, a + b + c),
        )
        ds = split(filter_and_truncate(log, cfg), cfg)
        if ds.n_users < 2:
            return StudyCell(a, b, c, ds.n_users, np.nan, np.nan, "failed: fewer than 2 users")
        params = train(ds, None, replace(model_cfg, seed=seed)).params
        val = evaluate_model(params, ds.val_candidates, ds.val)
        test = evaluate_model(params, ds.test_candidates, ds.test)
        return StudyCell(a, b, c, ds.n_users, rmse(val, test), spearman(val, test))
    except (CostrecError, ValueError) as exc:
        logger.warning("study cell %s failed: %s", cell, exc)
        return StudyCell(a, b, c, 0, np.nan, np.nan, f"failed: {exc}")


def default_study_grid() -> list[tuple[int, int, int]]:
    return [(t, v, v2) for t in (3, 4, 5, 10) for v in range(1, 6) for v2 in range(1, 6)]


def val_test_study(
    log: InteractionLog,
    grid: Iterable[tuple[int, int, int]],
    model_cfg: TrainConfig,
    seed: int,
    base: SplitConfig | None = None,
) -> list[StudyCell]:
    """Validation/test agreement (RMSE, Spearman) for every grid cell."""
    return [study_cell(log, tuple(cell), model_cfg, seed, base) for cell in grid]
