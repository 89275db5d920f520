"""``a2gcn`` command line: prepare, train, evaluate, ablate, missing-sweep.

Every command reads an optional flat JSON config whose keys are either
:class:`TrainConfig` fields or the run keys of :class:`RunConfig`.  Flags
override file values, and the merged config is written next to the outputs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

from .autodiff import NonFiniteError
from .checkpoint import Checkpoint, CheckpointError
from .data import (AttributeTable, DataError, PreparedData, kcore_filter, load_attributes, load_interactions,
                   load_prepared, remove_attributes, split, write_prepared)
from .evaluation import DimensionError, evaluate
from .model import ABLATION_ORDER
from .synthetic import planted_preferences
from .training import TrainConfig, TrainingDiverged, fit

log = logging.getLogger("a2gcn")

DEFAULT_RATIOS = (0.0, 0.2, 0.4, 0.6, 0.8)
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything one command needs; ``train`` holds the model/optimizer part."""

    train: TrainConfig = field(default_factory=TrainConfig)
    interactions: str | None = None
    attributes: str | None = None
    synthetic: bool = False
    kcore: int = 5
    data_dir: str | None = None
    out_dir: str = "out"
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    thresholds: tuple[int, ...] | None = None
    jobs: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        train_keys = {f.name for f in fields(TrainConfig)}
        run_keys = {f.name for f in fields(cls)} - {"train"}
        unknown = set(d) - train_keys - run_keys
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        run = {k: v for k, v in d.items() if k in run_keys}
        for k in ("ratios", "thresholds"):
            if run.get(k) is not None:
                run[k] = tuple(run[k])
        try:
            train = TrainConfig.from_dict({k: v for k, v in d.items() if k in train_keys})
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad config: {exc}") from None
        cfg = cls(train=train, **run)
        for r in cfg.ratios:
            if not 0.0 <= r <= 1.0:
                raise UsageError(f"missing ratio {r} outside [0, 1]")
        if cfg.jobs < 1:
            raise UsageError("jobs must be positive")
        return cfg

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "train"}
        d.update(self.train.to_dict())
        for k in ("ratios", "thresholds"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    def write(self, out: Path) -> None:
        """Copy the merged config into ``out``; the output path itself is left out
        so reruns into another directory stay byte-identical."""
        out.mkdir(parents=True, exist_ok=True)
        d = self.to_dict()
        del d["out_dir"]
        (out / "config.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def _load_config(path: str | None, overrides: dict) -> RunConfig:
    d: dict = {}
    if path:
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise UsageError(f"{path}: config must be a JSON object")
    d.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(d)


# -- tables -------------------------------------------------------------------


def write_table(rows: list[dict], out: Path, stem: str) -> str:
    """Write ``stem.csv`` plus an aligned ``stem.txt``; return the text form."""
    out.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0])
    with (out / f"{stem}.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    cells = [[f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    text = "\n".join(line.rstrip() for line in lines) + "\n"
    (out / f"{stem}.txt").write_text(text)
    return text


# -- commands -----------------------------------------------------------------


def _need_data(cfg: RunConfig) -> PreparedData:
    if not cfg.data_dir:
        raise UsageError("no prepared data: pass --data DIR or set data_dir")
    return load_prepared(cfg.data_dir)


def cmd_prepare(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    if cfg.synthetic:
        prepared = planted_preferences(seed=cfg.train.seed)
        write_prepared(out, prepared.split, prepared.attributes)
    else:
        if not cfg.interactions:
            raise UsageError("prepare needs --interactions PATH (or synthetic: true)")
        table = kcore_filter(load_interactions(cfg.interactions), cfg.kcore)
        if cfg.attributes and Path(cfg.attributes).exists():
            attrs = load_attributes(cfg.attributes)
        else:
            warnings.warn(f"attribute file {cfg.attributes!r} not found; every item gets an empty attribute set",
                          stacklevel=2)
            attrs = AttributeTable({}, ())
        write_prepared(out, split(table, 0.8, 0.1, cfg.train.seed), attrs)
    cfg.write(out)
    return out


def _train_and_eval(train_cfg: TrainConfig, data_dir: str, out: str | None, thresholds,
                    ratio: float | None = None) -> dict:
    data = load_prepared(data_dir)
    attrs = None
    if ratio is not None:
        attrs = remove_attributes(data.attributes, ratio, train_cfg.seed)
    res = fit(train_cfg, data, attributes=attrs, out_dir=out)
    rep = evaluate(res.checkpoint, data, n=train_cfg.top_n, thresholds=thresholds, attributes=attrs)
    if out is not None:
        rep.write(out)
    return {"hr": rep.hr, "ndcg": rep.ndcg, "epoch": res.checkpoint.epoch}


def cmd_train(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    cfg.write(out)
    data = _need_data(cfg)
    res = fit(cfg.train, data, out_dir=out)
    log.info("best epoch %d, validation NDCG %.4f", res.checkpoint.epoch, res.checkpoint.best_val_ndcg)
    return out / "best.ckpt"


def cmd_evaluate(cfg: RunConfig, checkpoint: str, per_user: bool = False) -> str:
    data = _need_data(cfg)
    try:
        ckpt = Checkpoint.load(checkpoint)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {checkpoint}") from None
    rep = evaluate(ckpt, data, n=cfg.train.top_n, thresholds=cfg.thresholds)
    out = Path(cfg.out_dir)
    rep.write(out, per_user=per_user)
    n = rep.n
    rows = [{"group": "all", "users": rep.n_users, f"HR@{n}": rep.hr, f"NDCG@{n}": rep.ndcg}]
    rows += [{"group": str(g), "users": c, f"HR@{n}": h, f"NDCG@{n}": d} for g, (h, d, c) in sorted(rep.groups.items())]
    return write_table(rows, out, "report")


def _run_jobs(jobs: list[tuple], n_workers: int) -> list[dict]:
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(n_workers, len(jobs))) as pool:
            return list(pool.map(_train_and_eval, *zip(*jobs)))
    return [_train_and_eval(*job) for job in jobs]


def cmd_ablate(cfg: RunConfig) -> str:
    out = Path(cfg.out_dir)
    cfg.write(out)
    _need_data(cfg)
    base = cfg.train.to_dict()
    jobs = [(TrainConfig.from_dict({**base, "variant": v}), cfg.data_dir, str(out / v), cfg.thresholds)
            for v in ABLATION_ORDER]
    results = _run_jobs(jobs, cfg.jobs)
    n = cfg.train.top_n
    rows = [{"variant": v, f"HR@{n}": r["hr"], f"NDCG@{n}": r["ndcg"]} for v, r in zip(ABLATION_ORDER, results)]
    return write_table(rows, out, "ablation")


def cmd_missing_sweep(cfg: RunConfig) -> str:
    out = Path(cfg.out_dir)
    cfg.write(out)
    _need_data(cfg)
    jobs = [(cfg.train, cfg.data_dir, str(out / f"ratio_{r:.1f}"), cfg.thresholds, r) for r in cfg.ratios]
    results = _run_jobs(jobs, cfg.jobs)
    n = cfg.train.top_n
    rows = [{"ratio": float(r), f"HR@{n}": res["hr"], f"NDCG@{n}": res["ndcg"]} for r, res in zip(cfg.ratios, results)]
    return write_table(rows, out, "missing_sweep")


# -- argument parsing -------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="a2gcn", description="Attribute-aware attentive GCN recommender")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="flat JSON config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", dest="out_dir")
        if data:
            sp.add_argument("--data", dest="data_dir", help="prepared data directory")
        return sp

    sp = common(sub.add_parser("prepare", help="filter and split raw data"), data=False)
    sp.add_argument("--interactions")
    sp.add_argument("--attributes")
    sp.add_argument("--kcore", type=int)
    sp.add_argument("--synthetic", action="store_true", default=None,
                    help="write the planted-preference dataset instead of reading raw files")

    common(sub.add_parser("train", help="fit one model"))

    sp = common(sub.add_parser("evaluate", help="score a checkpoint on the test split"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--top-n", type=int)
    sp.add_argument("--groups", type=_int_list, help="sparsity thresholds, e.g. 5,10,15")
    sp.add_argument("--per-user", action="store_true")

    for name, help_ in (("ablate", "train and compare the five variants"),
                        ("missing-sweep", "retrain with attributes removed at several ratios")):
        sp = common(sub.add_parser(name, help=help_))
        sp.add_argument("--jobs", type=int)
        sp.add_argument("--top-n", type=int)
        sp.add_argument("--groups", type=_int_list)
        if name == "missing-sweep":
            sp.add_argument("--ratios", type=_float_list)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    ns = vars(args)
    overrides = {k: ns.get(k) for k in ("seed", "out_dir", "data_dir", "interactions", "attributes", "kcore",
                                        "synthetic", "jobs", "ratios")}
    overrides["top_n"] = ns.get("top_n")
    overrides["thresholds"] = ns.get("groups")
    try:
        cfg = _load_config(args.config, overrides)
        if args.command == "prepare":
            print(cmd_prepare(cfg))
        elif args.command == "train":
            print(cmd_train(cfg))
        elif args.command == "evaluate":
            print(cmd_evaluate(cfg, args.checkpoint, args.per_user), end="")
        elif args.command == "ablate":
            print(cmd_ablate(cfg), end="")
        else:
            print(cmd_missing_sweep(cfg), end="")
    except UsageError as exc:
        print(f"a2gcn: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"a2gcn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DimensionError, CheckpointError, FileNotFoundError) as exc:
        print(f"a2gcn: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
