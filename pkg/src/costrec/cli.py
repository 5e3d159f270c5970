"""``costrec`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (e.g. diverged training).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from typing import Sequence

from costrec import __version__, experiment as ex
from costrec.exceptions import CostrecError, NumericError, TrainingDivergedError
from costrec.mainstream import METHODS

log = logging.getLogger("costrec")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2, which is our data-error code
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _csv(kind):
    def parse(text: str):
        try:
            return [kind(v) for v in text.split(",") if v.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc

    return parse


def _common() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    g = p.add_argument_group("configuration")
    g.add_argument("-c", "--config", help="JSON config file")
    g.add_argument("--preset", choices=["desk"], help="built-in settings (desk: synthetic data, desk-scale training)")
    g.add_argument("--data", help="interaction log (user, item[, ...] per line)")
    g.add_argument("--data-format", help="delimiter: auto, tab, comma, ml (::), space")
    g.add_argument("-o", "--output-dir", help=f"output directory (env {ex.OUTPUT_DIR_ENV} also works)")
    g.add_argument("--seeds", type=_csv(int), help="comma-separated seeds, e.g. 0,1,2")
    g.add_argument("--contrasts", type=_csv(float), help="comma-separated contrasts, e.g. 5,10,20")
    g.add_argument("--methods", type=_csv(str), help=f"comma-separated subset of {','.join(METHODS)}")
    g.add_argument("--epochs", type=int, help="training epochs")
    g.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set train.lr=0.01 (repeatable)")
    g.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="costrec", description="Cost-sensitive training against mainstream bias.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="filter, split and write candidate lists")
    p.add_argument("--synthetic", action="store_true", help="use the built-in synthetic generator")
    sub.add_parser("train-baseline", parents=[common], help="train the unweighted model per seed")
    p = sub.add_parser("score", parents=[common], help="compute mainstreamness scores")
    p.add_argument("--method", action="append", choices=METHODS, help="repeatable; default: configured methods")
    p = sub.add_parser("train-weighted", parents=[common], help="cost-sensitive training per method/contrast/seed")
    p.add_argument("--method", action="append", choices=METHODS)
    p.add_argument("--contrast", action="append", type=float)
    sub.add_parser("compare", parents=[common], help="group reports and plot data")
    sub.add_parser("corr-study", parents=[common], help="validation/test agreement vs split minimums")
    p = sub.add_parser("pipeline", parents=[common], help="prepare, train, score, retrain, compare")
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--with-corr-study", action="store_true", help="also run the (slow) correlation study")
    return parser


def _config(args) -> ex.ExperimentConfig:
    patches = []
    if args.data is not None:
        patches.append({"data": args.data, "synthetic": None})
    if getattr(args, "synthetic", False):
        patches.append({"synthetic": {}})
    for key in ("data_format", "output_dir", "seeds", "contrasts", "methods"):
        if getattr(args, key) is not None:
            patches.append({key: getattr(args, key)})
    if args.epochs is not None:
        patches.append({"train": {"epochs": args.epochs}})
    patches += [ex.parse_override(o) for o in args.overrides]
    cfg = ex.load_config(args.config, patches, args.preset)
    if getattr(args, "synthetic", False) and cfg.synthetic is None:
        cfg.synthetic = {}
    return cfg


def _setup_logging(verbosity: int, cfg: ex.ExperimentConfig | None = None) -> None:
    level = logging.DEBUG if verbosity > 1 else logging.INFO if verbosity == 1 else logging.WARNING
    root = logging.getLogger("costrec")
    for h in root.handlers:
        h.close()
    root.handlers.clear()
    root.setLevel(logging.DEBUG)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(level)
    console.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    root.addHandler(console)
    if cfg is not None:
        (cfg.out / "logs").mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(cfg.out / "logs" / "run.log", encoding="utf-8")
        fh.setLevel(logging.INFO)
        fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
        root.addHandler(fh)
    logging.captureWarnings(True)


def _run(args, cfg: ex.ExperimentConfig) -> None:
    cmd = args.command
    if cmd in ("prepare", "pipeline"):
        stats = ex.prepare(cfg)
        f = stats["filtered"]
        print(f"users {f['users']}  items {f['items']}  interactions {f['interactions']}  "
              f"density {f['density_pct']}%  manifest {stats['manifest_sha256'][:12]}")
    if cmd in ("train-baseline", "pipeline"):
        for path in ex.train_baseline(cfg):
            print(f"baseline checkpoint {path}")
    if cmd in ("score", "pipeline"):
        for path in ex.score(cfg, getattr(args, "method", None)):
            print(f"scores {path}")
    if cmd in ("train-weighted", "pipeline"):
        for path in ex.train_weighted(cfg, getattr(args, "method", None), getattr(args, "contrast", None)):
            print(f"weighted checkpoint {path}")
    if cmd in ("compare", "pipeline"):
        paths = ex.compare(cfg)
        print(_summary(paths["compare"]))
    if cmd == "corr-study" or (cmd == "pipeline" and args.with_corr_study):
        print(f"study {ex.corr_study(cfg)}")


def _summary(path) -> str:
    """Overall and low-group improvements averaged over seeds, one line per run."""
    acc: dict[tuple, list[float]] = {}
    for r in ex.read_compare(path):
        if r["experiment"] == "table1" and r["method"] != "FM" and r["group"] in ("low", "overall"):
            acc.setdefault((r["method"], r["contrast"], r["group"]), []).append(float(r["relative_improvement"]))
    lines = [f"report {path}"]
    for (method, contrast, group), v in sorted(acc.items()):
        lines.append(f"  {method} x{contrast} {group:>7}: {sum(v) / len(v):+.2f}% (n_seeds={len(v)})")
    return "\n".join(lines)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        cfg = _config(args)
        ex.save_effective_config(cfg)
        _setup_logging(args.verbose, cfg)
        log.info("command %s, config hash %s, output %s", args.command, cfg.hash, cfg.out)
        log.debug("effective config %s", json.dumps(cfg.to_dict(), sort_keys=True))
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            _run(args, cfg)
    except TrainingDivergedError as exc:
        print(f"costrec: training diverged at epoch {exc.epoch}, batch {exc.batch} (loss {exc.loss}); "
              "try a smaller learning rate", file=sys.stderr)
        return exc.exit_code
    except (CostrecError, NumericError) as exc:
        print(f"costrec: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", 3)
    except KeyboardInterrupt:
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())
