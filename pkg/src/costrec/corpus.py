"""Interaction ingestion, filtering, per-user splitting and sampling.

Every row of the raw data counts as a relevant interaction; ratings and
timestamps are discarded.  All randomness flows from ``numpy`` generators
seeded with ``[seed, purpose, ...]`` so that each stage draws from its own
stream and re-running with the same seed is bit-identical.
"""

from __future__ import annotations

import json
import os
import re
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from costrec._tsv import read_table, write_table
from costrec.exceptions import ConfigError, DataError

# stream tags for _rng; never reuse a tag for a different purpose
_TRUNCATE, _SPLIT, _CAND_VAL, _CAND_TEST, _NEGATIVES = 11, 12, 13, 14, 15

_DELIMITERS = {"tab": "\t", "comma": ",", "csv": ",", "tsv": "\t", "ml": "::", "space": None}


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *keys])


class NegativePoolWarning(UserWarning):
    """A user's pool of irrelevant items was too small; sampled with replacement."""


@dataclass(frozen=True, eq=False)
class InteractionLog:
    """Deduplicated implicit-feedback log with dense ids.

    ``users[j], items[j]`` is the j-th interaction.  ``user_ids[u]`` is the
    external id of dense user ``u`` (likewise ``item_ids``).
    """

    users: np.ndarray
    items: np.ndarray
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64)
        items = np.asarray(self.items, dtype=np.int64)
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)
        if users.shape != items.shape or users.ndim != 1:
            raise DataError("users and items must be 1-d arrays of equal length")
        if not self.user_ids or not self.item_ids or users.size == 0:
            raise DataError("empty log")
        if users.min() < 0 or users.max() >= self.n_users:
            raise DataError("user id out of range")
        if items.min() < 0 or items.max() >= self.n_items:
            raise DataError("item id out of range")
        keys = users * self.n_items + items
        if np.unique(keys).size != keys.size:
            raise DataError("duplicate (user, item) pairs")

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_interactions(self) -> int:
        return int(self.users.size)

    def user_items(self) -> list[np.ndarray]:
        """Sorted item array per dense user id."""
        order = np.lexsort((self.items, self.users))
        counts = np.bincount(self.users, minlength=self.n_users)
        return np.split(self.items[order], np.cumsum(counts)[:-1])

    def stats(self) -> dict[str, float]:
        density = self.n_interactions / (self.n_users * self.n_items)
        return {
            "users": self.n_users,
            "items": self.n_items,
            "interactions": self.n_interactions,
            "density_pct": round(100.0 * density, 3),
        }

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[object, object]]) -> "InteractionLog":
        """Build a log from external ``(user, item)`` pairs, first-seen id order."""
        user_map: dict[str, int] = {}
        item_map: dict[str, int] = {}
        seen: set[tuple[int, int]] = set()
        users, items = [], []
        for u, i in pairs:
            uid = user_map.setdefault(str(u), len(user_map))
            iid = item_map.setdefault(str(i), len(item_map))
            if (uid, iid) in seen:
                continue
            seen.add((uid, iid))
            users.append(uid)
            items.append(iid)
        if not users:
            raise DataError("empty log")
        return cls(np.array(users), np.array(items), tuple(user_map), tuple(item_map))


def _split_line(line: str, delim: str | None) -> list[str]:
    if delim is None:
        return line.split()
    return [f.strip() for f in line.split(delim)]


def _guess_delimiter(line: str) -> str | None:
    for delim in ("::", "\t", ",", ";"):
        if delim in line:
            return delim
    return None


_HEADER_WORDS = re.compile(r"user|item|movie|product|rating|time|uid|iid", re.I)


def load_interactions(path: str | os.PathLike, delimiter: str | None = "auto") -> InteractionLog:
    """Read a delimited ``user, item[, rating[, timestamp]]`` file.

    ``delimiter`` is a literal separator, one of ``tab``, ``comma``, ``ml``
    (the ``::`` MovieLens format), ``space`` (any whitespace), or ``auto``.
    A header line is detected when its first two fields look like column
    names.  Malformed rows raise :class:`DataError` with the line number.
    """
    path = Path(path)
    try:
        fh = open(path, encoding="utf-8", errors="replace")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from exc

    auto = delimiter == "auto"
    delim = None if auto or delimiter is None else _DELIMITERS.get(delimiter, delimiter)

    pairs: list[tuple[str, str]] = []
    first = True
    with fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            if auto:
                delim, auto = _guess_delimiter(line), False
            fields = _split_line(line, delim)
            if first:
                first = False
                if len(fields) >= 2 and all(_HEADER_WORDS.search(f) for f in fields[:2]):
                    continue
            if len(fields) < 2 or not fields[0] or not fields[1]:
                raise DataError(f"{path}:{lineno}: malformed row {line!r}")
            pairs.append((fields[0], fields[1]))
    if not pairs:
        raise DataError(f"{path}: empty log")
    return InteractionLog.from_pairs(pairs)


@dataclass(frozen=True)
class SplitConfig:
    min_train: int = 5
    min_val: int = 5
    min_test: int = 5
    max_relevant: int = 200
    neg_ratio: int = 4
    candidate_total: int = 500
    seed: int = 0

    def __post_init__(self):
        for name in ("min_train", "min_val", "min_test", "max_relevant", "candidate_total"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.neg_ratio < 0:
            raise ConfigError("neg_ratio must be >= 0")
        if self.candidate_total <= max(self.min_val, self.min_test):
            raise ConfigError("candidate_total must exceed min_val and min_test")
        if self.max_relevant < self.min_total:
            raise ConfigError("max_relevant must be >= min_train + min_val + min_test")

    @property
    def min_total(self) -> int:
        return self.min_train + self.min_val + self.min_test


def filter_and_truncate(log: InteractionLog, cfg: SplitConfig) -> InteractionLog:
    """Drop light users, cap heavy ones at ``max_relevant``, re-densify ids."""
    counts = np.bincount(log.users, minlength=log.n_users)
    keep = np.ones(log.n_interactions, dtype=bool)
    keep &= counts[log.users] >= cfg.min_total

    rng = _rng(cfg.seed, _TRUNCATE)
    by_user = np.argsort(log.users, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)])
    for u in np.flatnonzero(counts > cfg.max_relevant):
        rows = by_user[starts[u] : starts[u + 1]]
        dropped = rng.choice(rows, size=rows.size - cfg.max_relevant, replace=False)
        keep[dropped] = False

    users, items = log.users[keep], log.items[keep]
    if users.size == 0:
        raise DataError("no eligible users")
    kept_users = np.unique(users)
    kept_items = np.unique(items)
    user_remap = np.full(log.n_users, -1, dtype=np.int64)
    user_remap[kept_users] = np.arange(kept_users.size)
    item_remap = np.full(log.n_items, -1, dtype=np.int64)
    item_remap[kept_items] = np.arange(kept_items.size)
    return InteractionLog(
        user_remap[users],
        item_remap[items],
        tuple(log.user_ids[u] for u in kept_users),
        tuple(log.item_ids[i] for i in kept_items),
    )


def partition_sizes(n: int, cfg: SplitConfig) -> tuple[int, int, int]:
    """Proportional (train, val, test) sizes; val/test round down, rest to train."""
    n_val = n * cfg.min_val // cfg.min_total
    n_test = n * cfg.min_test // cfg.min_total
    return n - n_val - n_test, n_val, n_test


@dataclass(frozen=True, eq=False)
class SplitDataset:
    """Per-user disjoint train/val/test item arrays plus candidate lists.

    All per-user sequences are indexed by dense user id; item arrays are
    sorted ascending.
    """

    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    train: tuple[np.ndarray, ...]
    val: tuple[np.ndarray, ...]
    test: tuple[np.ndarray, ...]
    config: SplitConfig
    val_candidates: tuple[np.ndarray, ...] = field(default=())
    test_candidates: tuple[np.ndarray, ...] = field(default=())

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def relevant(self, user: int) -> np.ndarray:
        return np.concatenate([self.train[user], self.val[user], self.test[user]])

    def candidates(self, which: Literal["val", "test"]) -> tuple[np.ndarray, ...]:
        return self.val_candidates if which == "val" else self.test_candidates

    def partition(self, which: Literal["train", "val", "test"]) -> tuple[np.ndarray, ...]:
        return {"train": self.train, "val": self.val, "test": self.test}[which]


def split(log: InteractionLog, cfg: SplitConfig) -> SplitDataset:
    """Shuffle each user's items and cut them proportionally to the minimums."""
    rng = _rng(cfg.seed, _SPLIT)
    train, val, test = [], [], []
    for u, items in enumerate(log.user_items()):
        n_train, n_val, n_test = partition_sizes(items.size, cfg)
        if n_train < cfg.min_train or n_val < cfg.min_val or n_test < cfg.min_test:
            raise DataError(
                f"user {log.user_ids[u]!r} has {items.size} items, "
                f"fewer than {cfg.min_total}; run filter_and_truncate first"
            )
        perm = rng.permutation(items)
        val.append(np.sort(perm[:n_val]))
        test.append(np.sort(perm[n_val : n_val + n_test]))
        train.append(np.sort(perm[n_val + n_test :]))
    ds = SplitDataset(log.user_ids, log.item_ids, tuple(train), tuple(val), tuple(test), cfg)
    return replace(
        ds,
        val_candidates=build_candidates(ds, "val", cfg),
        test_candidates=build_candidates(ds, "test", cfg),
    )


def _irrelevant_pool(ds: SplitDataset, user: int) -> np.ndarray:
    mask = np.ones(ds.n_items, dtype=bool)
    mask[ds.train[user]] = False
    mask[ds.val[user]] = False
    mask[ds.test[user]] = False
    return np.flatnonzero(mask)


def build_candidates(
    ds: SplitDataset, which: Literal["val", "test"], cfg: SplitConfig | None = None
) -> tuple[np.ndarray, ...]:
    """Relevant val (or test) items plus sampled irrelevant items, sorted by id.

    Sampled items exclude the user's relevant items in every partition.
    When the user's relevant items alone reach ``candidate_total`` no
    irrelevant items are added.
    """
    cfg = cfg or ds.config
    rng = _rng(cfg.seed, _CAND_VAL if which == "val" else _CAND_TEST)
    relevant = ds.partition(which)
    out = []
    for u in range(ds.n_users):
        pool = _irrelevant_pool(ds, u)
        n_sample = min(max(cfg.candidate_total - relevant[u].size, 0), pool.size)
        sampled = rng.choice(pool, size=n_sample, replace=False)
        out.append(np.sort(np.concatenate([relevant[u], sampled])))
    return tuple(out)


def sample_training_negatives(
    ds: SplitDataset, epoch: int, seed: int, neg_ratio: int | None = None
) -> list[np.ndarray]:
    """``neg_ratio`` irrelevant items per training item, fresh for each epoch.

    Draws are uniform without replacement from items outside the user's
    relevant set; if that pool is too small the draw falls back to sampling
    with replacement (an empty pool yields no negatives) and a
    :class:`NegativePoolWarning` is emitted.
    """
    ratio = ds.config.neg_ratio if neg_ratio is None else neg_ratio
    rng = _rng(seed, _NEGATIVES, epoch)
    out = []
    short = []
    for u in range(ds.n_users):
        need = ratio * ds.train[u].size
        if need == 0:
            out.append(np.empty(0, dtype=np.int64))
            continue
        pool = _irrelevant_pool(ds, u)
        replace = pool.size < need
        if replace:
            short.append(ds.user_ids[u])
        if pool.size == 0:
            out.append(np.empty(0, dtype=np.int64))
        else:
            out.append(rng.choice(pool, size=need, replace=replace))
    if short:
        warnings.warn(
            f"{len(short)} user(s) have fewer irrelevant items than required "
            f"negatives; sampled with replacement (first: {short[0]!r})",
            NegativePoolWarning,
            stacklevel=2,
        )
    return out


# --- manifest -------------------------------------------------------------

SPLIT_SCHEMA = "split/1"
CANDIDATE_SCHEMA = "candidates/1"
ITEMS_SCHEMA = "items/1"


def write_split(ds: SplitDataset, directory: str | os.PathLike, meta: dict | None = None) -> None:
    """Persist ``split.tsv``, ``candidates.tsv`` and ``items.tsv`` under ``directory``."""
    directory = Path(directory)
    meta = dict(meta or {})
    meta.setdefault("split_config", ds.config.__dict__)

    def split_rows():
        for u, uid in enumerate(ds.user_ids):
            for part in ("train", "val", "test"):
                for i in ds.partition(part)[u]:
                    yield uid, part, ds.item_ids[i]

    def cand_rows():
        for which in ("val", "test"):
            for u, uid in enumerate(ds.user_ids):
                for i in ds.candidates(which)[u]:
                    yield uid, which, ds.item_ids[i]

    write_table(directory / "items.tsv", ITEMS_SCHEMA, ["item"], ((i,) for i in ds.item_ids), meta)
    write_table(directory / "split.tsv", SPLIT_SCHEMA, ["user", "partition", "item"], split_rows(), meta)
    write_table(
        directory / "candidates.tsv", CANDIDATE_SCHEMA, ["user", "list", "item"], cand_rows(), meta
    )


def read_split(directory: str | os.PathLike) -> SplitDataset:
    """Inverse of :func:`write_split`; dense ids are restored exactly."""
    directory = Path(directory)
    _, _, item_rows = read_table(directory / "items.tsv", ITEMS_SCHEMA)
    item_ids = tuple(r[0] for r in item_rows)
    item_index = {iid: n for n, iid in enumerate(item_ids)}
    meta, _, rows = read_table(directory / "split.tsv", SPLIT_SCHEMA)
    cfg = SplitConfig(**json.loads(meta["split_config"]))

    user_index: dict[str, int] = {}
    parts: dict[str, list[list[int]]] = {"train": [], "val": [], "test": []}
    for uid, part, iid in rows:
        u = user_index.setdefault(uid, len(user_index))
        if u == len(parts["train"]):
            for lst in parts.values():
                lst.append([])
        try:
            parts[part][u].append(item_index[iid])
        except KeyError as exc:
            raise DataError(f"split.tsv: unknown partition or item in row {uid, part, iid}") from exc

    _, _, crows = read_table(directory / "candidates.tsv", CANDIDATE_SCHEMA)
    cands: dict[str, list[list[int]]] = {
        "val": [[] for _ in user_index],
        "test": [[] for _ in user_index],
    }
    for uid, which, iid in crows:
        cands[which][user_index[uid]].append(item_index[iid])

    def arrs(lists):
        return tuple(np.sort(np.asarray(x, dtype=np.int64)) for x in lists)

    return SplitDataset(
        tuple(user_index),
        item_ids,
        arrs(parts["train"]),
        arrs(parts["val"]),
        arrs(parts["test"]),
        cfg,
        arrs(cands["val"]),
        arrs(cands["test"]),
    )


# --- synthetic data -------------------------------------------------------


def synthetic_log(
    n_users: int = 1000,
    n_items: int = 1000,
    niche_frac: float = 0.2,
    n_popular: int = 300,
    n_tastes: int = 5,
    taste_strength: float = 8.0,
    n_niche_clusters: int = 20,
    niche_loyalty: float = 0.8,
    mainstream_activity: tuple[int, int] = (40, 120),
    niche_activity: tuple[int, int] = (15, 35),
    seed: int = 0,
) -> InteractionLog:
    """Planted-bias interaction log.

    Mainstream users draw from a shared pool of ``n_popular`` items with a
    Zipf-like popularity profile, tilted toward one of ``n_tastes`` taste
    segments.  Niche users (``niche_frac`` of all users, lower activity)
    draw ``niche_loyalty`` of their items from one of ``n_niche_clusters``
    disjoint niche item clusters, each user restricted to a random half of
    its cluster, and the rest from the popular pool.
    """
    if not 0.0 <= niche_frac < 1.0:
        raise ConfigError("niche_frac must lie in [0, 1)")
    if n_popular >= n_items:
        raise ConfigError("n_popular must be smaller than n_items")
    rng = np.random.default_rng([seed, 99])
    n_niche = int(round(n_users * niche_frac))
    is_niche = np.zeros(n_users, dtype=bool)
    is_niche[rng.choice(n_users, size=n_niche, replace=False)] = True

    popularity = 1.0 / np.arange(1, n_popular + 1) ** 0.8
    popular_items = rng.permutation(n_popular)
    taste_of_item = rng.integers(0, n_tastes, size=n_popular)
    clusters = np.array_split(rng.permutation(np.arange(n_popular, n_items)), n_niche_clusters)

    users, items = [], []
    for u in range(n_users):
        if is_niche[u]:
            n = int(rng.integers(niche_activity[0], niche_activity[1] + 1))
            cluster = clusters[rng.integers(n_niche_clusters)]
            own = rng.choice(cluster, size=max(cluster.size // 2, 1), replace=False)
            n_own = min(int(round(n * niche_loyalty)), own.size)
            picked = list(rng.choice(own, size=n_own, replace=False))
            p = popularity / popularity.sum()
            picked += list(popular_items[rng.choice(n_popular, size=n - n_own, replace=False, p=p)])
        else:
            n = int(rng.integers(mainstream_activity[0], mainstream_activity[1] + 1))
            taste = rng.integers(n_tastes)
            p = popularity * np.where(taste_of_item == taste, taste_strength, 1.0)
            p /= p.sum()
            picked = list(popular_items[rng.choice(n_popular, size=min(n, n_popular), replace=False, p=p)])
        users.extend([u] * len(picked))
        items.extend(int(i) for i in picked)

    users_arr = np.asarray(users)
    items_arr = np.asarray(items)
    used = np.unique(items_arr)
    remap = np.full(n_items, -1)
    remap[used] = np.arange(used.size)
    return InteractionLog(
        users_arr,
        remap[items_arr],
        tuple(f"u{u}" for u in range(n_users)),
        tuple(f"i{i}" for i in used),
    )


def synthetic_niche_users(log: InteractionLog, **kwargs) -> np.ndarray:
    """Boolean niche mask matching :func:`synthetic_log` called with the same arguments."""
    n_users = kwargs.get("n_users", 1000)
    niche_frac = kwargs.get("niche_frac", 0.2)
    seed = kwargs.get("seed", 0)
    rng = np.random.default_rng([seed, 99])
    mask = np.zeros(n_users, dtype=bool)
    mask[rng.choice(n_users, size=int(round(n_users * niche_frac)), replace=False)] = True
    return mask[[int(uid[1:]) for uid in log.user_ids]]
