"""Pipeline steps behind the command line.

Every step reads its inputs from, and writes its outputs to, one output
directory::

    config.json                      effective configuration
    data/interactions.tsv            generated log (synthetic runs only)
    data/{items,split,candidates}.tsv, data/stats.tsv
    baseline/seed{s}/model.npz, eval.tsv, loss.tsv
    scores/Sim.tsv, scores/Dis.tsv, scores/Util_seed{s}.tsv
    weighted/{method}_x{contrast}/seed{s}/weights.tsv, model.npz, eval.tsv, loss.tsv
    reports/compare.csv, scatter.csv, binned.csv, corr_study.csv
    logs/run.log

Each step is a pure function of the files it reads, the configuration and
the seeds: re-running it rewrites byte-identical files.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from costrec._tsv import config_hash, file_sha256, read_table, write_table
from costrec.corpus import (
    InteractionLog,
    SplitConfig,
    SplitDataset,
    filter_and_truncate,
    load_interactions,
    read_split,
    split,
    synthetic_log,
    write_split,
)
from costrec.exceptions import ConfigError, DataError
from costrec.mainstream import (
    METHODS,
    MainstreamScores,
    dis_scores,
    read_scores,
    sim_scores,
    util_scores,
    write_scores,
)
from costrec.metrics import (
    binned_means,
    default_study_grid,
    evaluate_model,
    group_report,
    relative_improvement,
    val_test_study,
)
from costrec.model import TrainConfig, load_checkpoint, save_checkpoint, train
from costrec.weighting import (
    PRESET_CONTRASTS,
    CostFunction,
    ecdf_normalize,
    user_weights,
    write_weights,
)

log = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "COSTREC_OUTPUT_DIR"
EVAL_SCHEMA = "eval/1"
LOSS_SCHEMA = "loss/1"
STATS_SCHEMA = "stats/1"
REPORT_SCHEMA = "report/1"
COMPARE_COLUMNS = (
    "experiment", "seed", "method", "contrast", "group", "metric", "value", "relative_improvement",
)
STUDY_COLUMNS = ("min_train", "min_val", "min_test", "rmse", "spearman", "seed", "n_users", "status")

# Desk-scale settings for the built-in synthetic generator. The published
# learning rate and L2 strength underfit a 1,000-user log in a few dozen epochs.
DESK_PRESET: dict[str, Any] = {
    "synthetic": {},
    "train": {"lr": 0.01, "l2": 2e-4, "epochs": 20},
}


@dataclass
class ExperimentConfig:
    data: str | None = None
    data_format: str = "auto"
    synthetic: dict | None = None
    split: SplitConfig = field(default_factory=SplitConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    methods: tuple[str, ...] = METHODS
    contrasts: tuple[float, ...] = PRESET_CONTRASTS
    seeds: tuple[int, ...] = (0, 1, 2)
    metric: str = "ndcg"
    output_dir: str = "runs"
    sim_max_exact_users: int = 20_000
    sim_sample_size: int = 2000
    weights_mean_one: bool = False
    study_grid: tuple[tuple[int, int, int], ...] | None = None

    def __post_init__(self):
        if isinstance(self.split, dict):
            self.split = SplitConfig(**self.split)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        self.methods = tuple(self.methods)
        self.contrasts = tuple(float(c) for c in self.contrasts)
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.study_grid is not None:
            self.study_grid = tuple(tuple(int(v) for v in cell) for cell in self.study_grid)
        if not self.methods:
            raise ConfigError("at least one mainstreamness method is required")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method(s) {bad}; choose from {list(METHODS)}")
        if not self.contrasts or any(not c > 1 for c in self.contrasts):
            raise ConfigError(f"contrasts must be non-empty and > 1, got {list(self.contrasts)}")
        if not self.seeds:
            raise ConfigError("seed list is empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("duplicate seeds")
        if self.metric not in ("ndcg", "ap"):
            raise ConfigError(f"metric must be 'ndcg' or 'ap', got {self.metric!r}")
        if self.data is None and self.synthetic is None:
            raise ConfigError("no dataset: set 'data' to a file or enable 'synthetic'")
        if self.study_grid is not None and any(len(c) != 3 or min(c) < 1 for c in self.study_grid):
            raise ConfigError("study_grid cells must be (min_train, min_val, min_test) >= 1")

    # --- (de)serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["methods"], d["contrasts"], d["seeds"] = list(self.methods), list(self.contrasts), list(self.seeds)
        if self.study_grid is not None:
            d["study_grid"] = [list(c) for c in self.study_grid]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def provenance(self) -> dict:
        """Config without the output location; identical runs elsewhere hash the same."""
        d = self.to_dict()
        d.pop("output_dir")
        return d

    @property
    def hash(self) -> str:
        return config_hash(self.provenance())

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


def _merge(base: dict, patch: dict) -> dict:
    out = dict(base)
    for key, value in patch.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def parse_override(text: str) -> dict:
    """``train.lr=0.01`` -> ``{"train": {"lr": 0.01}}``; values are JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    for part in reversed(key.strip().split(".")):
        if not part:
            raise ConfigError(f"bad override key {key!r}")
        value = {part: value}
    return value


def load_config(
    path: str | os.PathLike | None = None,
    overrides: Iterable[dict] = (),
    preset: str | None = None,
) -> ExperimentConfig:
    """Preset, then config file, then the output-dir environment variable, then overrides."""
    d: dict = {}
    if preset is not None:
        if preset != "desk":
            raise ConfigError(f"unknown preset {preset!r}; available: desk")
        d = _merge(d, DESK_PRESET)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                d = _merge(d, json.load(fh))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if os.environ.get(OUTPUT_DIR_ENV):
        d["output_dir"] = os.environ[OUTPUT_DIR_ENV]
    for patch in overrides:
        d = _merge(d, patch)
    return ExperimentConfig.from_dict(d)


# --- shared helpers -----------------------------------------------------------


def _meta(cfg: ExperimentConfig, seed: int | None = None, **extra) -> dict:
    meta = {"config_hash": cfg.hash, "seed": "all" if seed is None else seed}
    meta.update(extra)
    meta["config"] = cfg.provenance()
    return meta


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"{what} not found: {path} (run the earlier pipeline step first)")
    return path


def baseline_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return cfg.out / "baseline" / f"seed{seed}"


def weighted_dir(cfg: ExperimentConfig, method: str, contrast: float, seed: int) -> Path:
    return cfg.out / "weighted" / f"{method}_x{contrast:g}" / f"seed{seed}"


def score_path(cfg: ExperimentConfig, method: str, seed: int | None = None) -> Path:
    name = f"{method}_seed{seed}.tsv" if method == "Util" else f"{method}.tsv"
    return cfg.out / "scores" / name


def raw_log(cfg: ExperimentConfig) -> InteractionLog:
    if cfg.synthetic is not None:
        return synthetic_log(**cfg.synthetic)
    return load_interactions(cfg.data, cfg.data_format)


def load_dataset(cfg: ExperimentConfig) -> SplitDataset:
    _require(cfg.out / "data" / "split.tsv", "split manifest")
    ds = read_split(cfg.out / "data")
    if ds.config != cfg.split:
        raise ConfigError("split settings differ from the prepared manifest; re-run prepare")
    return ds


def manifest_hash(directory: Path) -> str:
    h = hashlib.sha256()
    for name in ("items.tsv", "split.tsv", "candidates.tsv"):
        h.update(file_sha256(directory / name).encode())
    return h.hexdigest()


def write_eval(path: Path, ds: SplitDataset, params, meta: dict) -> Path:
    cols = {}
    for metric in ("ndcg", "ap"):
        cols[f"val_{metric}"] = evaluate_model(params, ds.val_candidates, ds.val, metric)
        cols[f"test_{metric}"] = evaluate_model(params, ds.test_candidates, ds.test, metric)
    rows = ((uid, *(float(c[u]) for c in cols.values())) for u, uid in enumerate(ds.user_ids))
    return write_table(path, EVAL_SCHEMA, ["user", *cols], rows, meta)


def read_eval(path: Path) -> tuple[list[str], dict[str, np.ndarray]]:
    _, columns, rows = read_table(_require(path, "evaluation file"), EVAL_SCHEMA)
    users = [r[0] for r in rows]
    values = {c: np.array([float(r[j]) for r in rows]) for j, c in enumerate(columns) if j}
    return users, values


def _train_and_save(cfg: ExperimentConfig, ds: SplitDataset, weights, seed: int, outdir: Path, meta: dict):
    tcfg = dataclasses.replace(cfg.train, seed=seed)
    result = train(
        ds, weights, tcfg, on_epoch=lambda e, loss: log.debug("seed %d epoch %d loss %.6f", seed, e, loss)
    )
    ckpt = save_checkpoint(outdir / "model.npz", result.params, tcfg, {"config_hash": cfg.hash, **meta})
    loss_rows = ((e, l, r) for e, (l, r) in enumerate(zip(result.loss_history, result.l2_history)))
    write_table(outdir / "loss.tsv", LOSS_SCHEMA, ["epoch", "objective", "l2_penalty"], loss_rows, _meta(cfg, seed, **meta))
    write_eval(outdir / "eval.tsv", ds, result.params, _meta(cfg, seed, **meta))
    log.info("seed %d: final objective %.6f -> %s", seed, result.loss_history[-1] if result.loss_history else float("nan"), outdir)
    return ckpt


# --- steps --------------------------------------------------------------------


def save_effective_config(cfg: ExperimentConfig) -> Path:
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = cfg.out / "config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def prepare(cfg: ExperimentConfig) -> dict:
    """Split the log, persist manifest and candidates, and summarise the data."""
    data_dir = cfg.out / "data"
    interactions = raw_log(cfg)
    if cfg.synthetic is not None:
        rows = zip((interactions.user_ids[u] for u in interactions.users), (interactions.item_ids[i] for i in interactions.items))
        write_table(data_dir / "interactions.tsv", "interactions/1", ["user", "item"], rows, _meta(cfg))
    raw_stats = interactions.stats()
    filtered = filter_and_truncate(interactions, cfg.split)
    ds = split(filtered, cfg.split)
    write_split(ds, data_dir, _meta(cfg, cfg.split.seed))
    stats = {"raw": raw_stats, "filtered": filtered.stats()}
    stats_rows = [(stage, k, v) for stage, d in stats.items() for k, v in d.items()]
    digest = manifest_hash(data_dir)
    write_table(data_dir / "stats.tsv", STATS_SCHEMA, ["stage", "statistic", "value"], stats_rows,
                _meta(cfg, cfg.split.seed, manifest_sha256=digest))
    log.info("prepared %d users, %d items -> %s (manifest %s)", ds.n_users, ds.n_items, data_dir, digest[:12])
    return {**stats, "manifest_sha256": digest}


def train_baseline(cfg: ExperimentConfig) -> list[Path]:
    ds = load_dataset(cfg)
    meta = {"kind": "baseline", "manifest_sha256": manifest_hash(cfg.out / "data")}
    return [_train_and_save(cfg, ds, None, s, baseline_dir(cfg, s), meta) for s in cfg.seeds]


def score(cfg: ExperimentConfig, methods: Sequence[str] | None = None) -> list[Path]:
    """Sim and Dis once from the training partition; Util once per baseline seed."""
    ds = load_dataset(cfg)
    written = []
    for method in methods or cfg.methods:
        if method == "Sim":
            s = sim_scores(ds.train, max_exact_users=cfg.sim_max_exact_users,
                           sample_size=cfg.sim_sample_size, seed=cfg.split.seed)
            written.append(write_scores(score_path(cfg, "Sim"), ds.user_ids, s, _meta(cfg)))
        elif method == "Dis":
            s = dis_scores(ds.train, ds.n_items)
            written.append(write_scores(score_path(cfg, "Dis"), ds.user_ids, s, _meta(cfg)))
        elif method == "Util":
            for seed in cfg.seeds:
                ckpt = _require(baseline_dir(cfg, seed) / "model.npz", f"baseline checkpoint for seed {seed}")
                params, _ = load_checkpoint(ckpt)
                digest = file_sha256(ckpt)
                s = util_scores(params, ds.val_candidates, ds.val, cfg.metric,
                                {"checkpoint": str(ckpt.relative_to(cfg.out)), "checkpoint_sha256": digest})
                written.append(write_scores(score_path(cfg, "Util", seed), ds.user_ids, s,
                                            _meta(cfg, seed, checkpoint_sha256=digest)))
        else:
            raise ConfigError(f"unknown method {method!r}")
        log.info("scored %s", method)
    return written


def _scores_for(cfg: ExperimentConfig, ds: SplitDataset, method: str, seed: int) -> MainstreamScores:
    path = _require(score_path(cfg, method, seed), f"{method} score file")
    scores = read_scores(path, ds.user_ids)
    if method == "Util":
        cited = scores.metadata.get("checkpoint_sha256")
        ckpt = _require(baseline_dir(cfg, seed) / "model.npz", f"baseline checkpoint for seed {seed}")
        if cited != file_sha256(ckpt):
            raise DataError(f"{path} was computed from a different baseline checkpoint than {ckpt}; re-run score")
        if np.isnan(scores.values).any():
            raise DataError(f"{path}: Util undefined for some users")
    return scores


def train_weighted(
    cfg: ExperimentConfig, methods: Sequence[str] | None = None, contrasts: Sequence[float] | None = None
) -> list[Path]:
    ds = load_dataset(cfg)
    written = []
    for method in methods or cfg.methods:
        for contrast in contrasts or cfg.contrasts:
            fn = CostFunction.from_contrast(contrast)
            for seed in cfg.seeds:
                scores = _scores_for(cfg, ds, method, seed)
                weights = user_weights(scores, contrast, cfg.weights_mean_one)
                log.info(
                    "%s x%g seed %d: sigma %.6f, cost(0)/cost(1) = %.12g, weight max/min = %.6g",
                    method, contrast, seed, fn.sigma, fn(0.0) / fn(1.0), weights.max() / weights.min(),
                )
                outdir = weighted_dir(cfg, method, contrast, seed)
                meta = {"kind": "weighted", "method": method, "contrast": contrast}
                write_weights(outdir / "weights.tsv", ds.user_ids, weights, _meta(cfg, seed, **meta))
                written.append(_train_and_save(cfg, ds, weights, seed, outdir, meta))
    return written


def _check_same_users(a: Sequence[str], b: Sequence[str], what: str) -> None:
    if list(a) != list(b):
        diff = sorted(set(a) ^ set(b))
        if not diff:
            raise DataError(f"{what}: same users in a different order")
        raise DataError(f"{what}: user sets differ; symmetric difference ({len(diff)}): {diff[:20]}")


def compare(cfg: ExperimentConfig) -> dict[str, Path]:
    """Group reports, per-user scatter and binned means for every weighted run found."""
    rdir = cfg.out / "reports"
    rows, scatter, binned = [], [], []
    sim_key = None
    if score_path(cfg, "Sim").exists():
        sim = read_table(score_path(cfg, "Sim"), "scores/1")[2]
        sim_key = {r[0]: float(r[2]) for r in sim}
    col = f"test_{cfg.metric}"
    for seed in cfg.seeds:
        users, base = read_eval(baseline_dir(cfg, seed) / "eval.tsv")
        keys = {"table1": base[col]}
        if sim_key is not None:
            _check_same_users(users, list(sim_key), "Sim scores vs baseline")
            keys["table2"] = np.array([sim_key[u] for u in users])
        for experiment in keys:
            for r in group_report(base[col], base[col], keys[experiment]):
                rows.append((experiment, seed, "FM", "", r.group, cfg.metric, round(r.baseline, 4), ""))
        x = ecdf_normalize(base[col])
        for method in cfg.methods:
            for contrast in cfg.contrasts:
                path = weighted_dir(cfg, method, contrast, seed) / "eval.tsv"
                if not path.exists():
                    log.warning("no weighted run at %s; skipped", path)
                    continue
                w_users, treat = read_eval(path)
                _check_same_users(users, w_users, f"{path} vs baseline seed {seed}")
                for experiment, key in keys.items():
                    for r in group_report(base[col], treat[col], key):
                        rows.append((experiment, seed, method, f"{contrast:g}", r.group, cfg.metric,
                                     round(r.treatment, 4), round(r.improvement, 2)))
                imp = relative_improvement(base[col], treat[col])
                scatter += [(method, f"{contrast:g}", seed, u, float(xi), float(ii)) for u, xi, ii in zip(users, x, imp)]
                binned += [(method, f"{contrast:g}", seed, lo, hi, n, m) for lo, hi, n, m in binned_means(x, imp)]
    if not rows:
        raise DataError(f"no baseline evaluations under {cfg.out / 'baseline'}")
    meta = _meta(cfg)
    out = {
        "compare": write_table(rdir / "compare.csv", REPORT_SCHEMA, COMPARE_COLUMNS, rows, meta, sep=","),
        "scatter": write_table(rdir / "scatter.csv", "scatter/1",
                               ("method", "contrast", "seed", "user", "ecdf_baseline", "relative_improvement"),
                               scatter, meta, sep=","),
        "binned": write_table(rdir / "binned.csv", "binned/1",
                              ("method", "contrast", "seed", "bin_left", "bin_right", "count", "mean_relative_improvement"),
                              binned, meta, sep=","),
    }
    log.info("reports written to %s", rdir)
    return out


def corr_study(cfg: ExperimentConfig) -> Path:
    interactions = raw_log(cfg)
    grid = cfg.study_grid or default_study_grid()
    rows = []
    for seed in cfg.seeds:
        for c in val_test_study(interactions, grid, cfg.train, seed, cfg.split):
            rows.append((c.min_train, c.min_val, c.min_test, c.rmse, c.spearman, seed, c.n_users, c.status))
            log.info("study seed %d cell %s: rmse %.4f rho %.4f (%s)",
                     seed, (c.min_train, c.min_val, c.min_test), c.rmse, c.spearman, c.status)
    return write_table(cfg.out / "reports" / "corr_study.csv", "study/1", STUDY_COLUMNS, rows, _meta(cfg), sep=",")


def read_compare(path: str | os.PathLike) -> list[dict[str, str]]:
    _, columns, rows = read_table(path, REPORT_SCHEMA, sep=",")
    return [dict(zip(columns, r)) for r in rows]
