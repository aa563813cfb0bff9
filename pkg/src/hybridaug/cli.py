"""Command-line entry point: ``hybridaug <command> [options]``.

All commands share one run directory (``--out``)::

    data/{train,val,test}.hyad     gen-data
    models/base.ckpt, loss_base.csv            train
    models/plus.ckpt, augmented.hyad, loss_plus.csv   augment
    report/report.json, report/tables/*.csv    eval
    sweep/report.json, sweep/tables/*.csv      sweep

Each of these directories also receives ``config.json``, the resolved config
that produced it. Exit codes: 0 success, 1 runtime or numerical failure,
2 usage or config error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

from . import datasets, dynamics, evaluation
from .aphynity import LagrangianConfig, aph_train
from .augmentation import AugmentationError, AugmentConfig, augment_pipeline, save_augmented
from .checks import run_selfcheck
from .dynamics import System
from .hvae import HvaeConfig, hvae_train
from .integrators import DivergenceError
from .models import arch_config, build_model, load_model, save_model
from .rng import Rng

THREADS_ENV = "HYBRID_AUG_THREADS"

DEFAULTS = {
    "system": "pendulum",
    "flavor": "aphynity",
    "seed": 0,
    "threads": 1,
    "data": {"n_train": None, "n_val": None, "n_test": None, "grid": None, "za_shift": False},
    "model": {},
    "train": {},
    "augment": {},
    "eval": {"n_mc": 8, "bins": 3, "sweep_n": 100, "baseline": False},
}


class ConfigError(ValueError):
    pass


class MissingInput(ConfigError):
    pass


# ----------------------------------------------------------------------
# configuration


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and base[k] and not isinstance(v, dict):
            raise ConfigError(f"config key {path + k!r} must be an object")
        if isinstance(base[k], dict) and base[k]:
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply one ``dotted.key=value`` override (value parsed as JSON when possible)."""
    key, sep, value = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    leaf = parts[-1]
    if node is cfg and leaf not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    if node is not cfg and parts[0] in ("data", "eval") and leaf not in DEFAULTS[parts[0]]:
        raise ConfigError(f"unknown config key {key!r}")
    node[leaf] = _parse_value(value)


def _dataclass_from(cls, values: dict, section: str, base=None):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {section} option(s): {sorted(unknown)}")
    values = {k: tuple(tuple(x) if isinstance(x, list) else x for x in v) if isinstance(v, list) else v
              for k, v in values.items()}
    try:
        return cls(**{**(asdict(base) if base is not None else {}), **values})
    except TypeError as err:
        raise ConfigError(f"{section}: {err}") from None


def train_config(cfg: dict):
    system = System(cfg["system"])
    if cfg["flavor"] == "hvae":
        tc = _dataclass_from(HvaeConfig, cfg["train"], "train", HvaeConfig.for_system(system))
    else:
        tc = _dataclass_from(LagrangianConfig, cfg["train"], "train",
                             LagrangianConfig.for_system(system))
    try:
        tc.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from None
    return tc


def augment_config(cfg: dict) -> AugmentConfig:
    return _dataclass_from(AugmentConfig, cfg["augment"], "augment")


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise MissingInput(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"{args.config}: invalid JSON ({err})") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        cfg = _merge(cfg, loaded)
    for assignment in args.set or []:
        apply_override(cfg, assignment)
    if args.system:
        cfg["system"] = args.system
    if args.flavor:
        cfg["flavor"] = args.flavor
    if args.seed is not None:
        cfg["seed"] = args.seed
    threads = args.threads if args.threads is not None else os.environ.get(THREADS_ENV)
    if threads is not None:
        cfg["threads"] = threads
    try:
        cfg["system"] = System(cfg["system"]).value
        cfg["seed"] = int(cfg["seed"])
        cfg["threads"] = max(1, int(cfg["threads"]))
    except (ValueError, TypeError) as err:
        raise ConfigError(str(err)) from None
    if cfg["seed"] < 0:
        raise ConfigError("seed must be non-negative")
    if cfg["flavor"] not in ("aphynity", "hvae"):
        raise ConfigError(f"unknown flavor {cfg['flavor']!r}")
    try:
        arch_config(cfg["flavor"], cfg["model"])
    except (ValueError, TypeError) as err:
        raise ConfigError(str(err)) from None
    train_config(cfg)
    augment_config(cfg)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def echo_config(directory: Path, cfg: dict, command: str) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    resolved = dict(cfg)
    resolved["train_resolved"] = asdict(train_config(cfg))
    resolved["augment_resolved"] = asdict(augment_config(cfg))
    (directory / "config.json").write_text(
        json.dumps({"command": command, "config": resolved}, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------------
# commands


def _split_specs(cfg: dict) -> dict[str, datasets.SplitSpec]:
    d = cfg["data"]
    if d["za_shift"]:
        train, test = datasets.za_shift_splits(cfg["system"], cfg["seed"], d["n_train"],
                                               d["n_test"], d["grid"])
        val = datasets.standard_splits(cfg["system"], cfg["seed"], n_val=d["n_val"], grid=d["grid"],
                                       za_box=train.za_box)["val"]
        return {"train": train, "val": val, "test": test}
    return datasets.standard_splits(cfg["system"], cfg["seed"], d["n_train"], d["n_val"],
                                    d["n_test"], d["grid"])


def _need(path: Path) -> Path:
    if not path.exists():
        raise MissingInput(f"missing input: {path}")
    return path


def _write_record(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_gen_data(cfg: dict, out: Path, args) -> int:
    data_dir = out / "data"
    echo_config(data_dir, cfg, "gen-data")
    for name, spec in _split_specs(cfg).items():
        ds = datasets.generate_split(spec, threads=cfg["threads"])
        datasets.save_dataset(ds, data_dir / f"{name}.hyad")
        print(f"{name}: {len(ds)} samples -> {data_dir / f'{name}.hyad'}")
    return 0


def _system_spec(cfg: dict, ds: datasets.Dataset) -> dynamics.SystemSpec:
    return dynamics.get_spec(cfg["system"], grid=ds.manifest["grid"])


def cmd_train(cfg: dict, out: Path, args) -> int:
    train = datasets.load_dataset(_need(out / "data" / "train.hyad"))
    tc = train_config(cfg)
    model_dir = out / "models"
    echo_config(model_dir, cfg, "train")
    ckpt = model_dir / "base.ckpt"
    state = None
    if args.resume and ckpt.exists():
        model, state, _ = load_model(ckpt)
        print(f"resuming from epoch {state.epoch if state else tc.epochs}")
    else:
        model = build_model(cfg["flavor"], _system_spec(cfg, train), Rng(cfg["seed"], (1,)),
                            cfg["model"])
    rng = Rng(cfg["seed"], (2,))
    meta = {"seed": cfg["seed"], "train_config": asdict(tc)}

    def on_epoch(st):
        save_model(ckpt, model, st, **meta)

    def log(row):
        print(" ".join(f"{k}={v:.6g}" for k, v in row.items()), flush=True)

    trainer = hvae_train if cfg["flavor"] == "hvae" else aph_train
    try:
        result = trainer(model, train.x, train.y, tc, rng, log=log, resume=state, on_epoch=on_epoch)
    except DivergenceError as err:
        last = state.epoch if state else 0
        print(f"error: training diverged ({err}); last checkpointed epoch is in {ckpt} "
              f"(started from epoch {last})", file=sys.stderr)
        return 1
    save_model(ckpt, model, result.state, **meta)
    _write_record(model_dir / "loss_base.csv", result.record.epochs)
    return 0


def cmd_augment(cfg: dict, out: Path, args) -> int:
    model_dir = out / "models"
    train = datasets.load_dataset(_need(out / "data" / "train.hyad"))
    model, _, manifest = load_model(_need(model_dir / "base.ckpt"))
    ac = augment_config(cfg)
    if args.n_aug is not None:
        ac.n_aug = args.n_aug
    if cfg["flavor"] == "hvae":
        model.train_config = train_config(cfg)
    echo_config(model_dir, cfg, "augment")
    base_hash = model.decoder_hash()
    rows = []
    try:
        res = augment_pipeline(model, train.x, train.y, ac, Rng(cfg["seed"], (3,)), log=rows.append)
    except AugmentationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    save_augmented(res.data, model_dir / "augmented.hyad", {"system": cfg["system"]})
    save_model(model_dir / "plus.ckpt", model, None, seed=cfg["seed"], base_decoder_hash=base_hash,
               augment_config=asdict(ac) | {"support": [list(b) for b in res.data.support]})
    _write_record(model_dir / "loss_plus.csv", res.record.epochs)
    print(f"augmented {len(res.data)} samples (skipped {res.data.skipped}); "
          f"support {list(map(list, res.data.support))}")
    return 0


def _models(out: Path, require_plus: bool) -> dict:
    models = {"base": load_model(_need(out / "models" / "base.ckpt"))[0]}
    plus = out / "models" / "plus.ckpt"
    if require_plus:
        _need(plus)
    if plus.exists():
        models["plus"] = load_model(plus)[0]
    return models


def cmd_eval(cfg: dict, out: Path, args) -> int:
    splits = {k: datasets.load_dataset(_need(out / "data" / f"{k}.hyad")) for k in ("val", "test")}
    models = _models(out, require_plus=False)
    if cfg["eval"]["baseline"]:
        train = datasets.load_dataset(_need(out / "data" / "train.hyad"))
        models["mean"] = evaluation.mean_baseline(train)
    report_dir = out / "report"
    echo_config(report_dir, cfg, "eval")
    report = evaluation.ExperimentReport(meta={"seed": cfg["seed"], "system": cfg["system"],
                                               "flavor": cfg["flavor"],
                                               "config_hash": config_hash(cfg)})
    start = time.perf_counter()
    for split, ds in splits.items():
        for name, m in models.items():
            met = evaluation.evaluate_model(m, ds, threads=cfg["threads"], n_mc=cfg["eval"]["n_mc"],
                                            seed=cfg["seed"])
            report.add(split, name, cfg["seed"], met)
            print(f"{split:5s} {name:5s} log_mse={met.log_mse:.4f} rel_ze_error={met.rel_ze_error}")
    evaluation.emit_report(report, report_dir)
    (report_dir / "timing.json").write_text(json.dumps({"wall_time_s": time.perf_counter() - start}))
    return 0


def cmd_sweep(cfg: dict, out: Path, args) -> int:
    models = _models(out, require_plus=True)
    sweep_dir = out / "sweep"
    echo_config(sweep_dir, cfg, "sweep")
    _, test_za = datasets.ZA_SHIFT[System(cfg["system"])]
    bins = datasets.sweep_bins(test_za, cfg["eval"]["bins"])
    grid = cfg["data"]["grid"]
    rows = evaluation.za_sweep(models["base"], models["plus"], cfg["system"], bins, seed=cfg["seed"],
                               n=cfg["eval"]["sweep_n"], grid=grid, threads=cfg["threads"])
    report = evaluation.ExperimentReport(meta={"seed": cfg["seed"], "system": cfg["system"],
                                               "flavor": cfg["flavor"],
                                               "config_hash": config_hash(cfg)})
    report.add_sweep(cfg["seed"], rows)
    evaluation.emit_report(report, sweep_dir)
    for r in rows:
        print(f"[{r['bin_lo']:.4g}, {r['bin_hi']:.4g}] {r['model']:4s} log_mse={r['log_mse']:.4f}")
    return 0


def cmd_selfcheck(cfg: dict | None, out: Path | None, args) -> int:
    results = run_selfcheck(perturb_gradient=args.perturb_gradient)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.value:.3e}  ({r.limit})")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"all {len(results)} checks passed")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "augment": cmd_augment,
            "eval": cmd_eval, "sweep": cmd_sweep, "selfcheck": cmd_selfcheck}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted-path override, e.g. train.lr=0.0005 (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help=f"worker threads (fallback: ${THREADS_ENV})")
    common.add_argument("--system", choices=[s.value for s in System])
    common.add_argument("--flavor", choices=["aphynity", "hvae"])
    common.add_argument("--resume", action="store_true", help="continue training from base.ckpt")

    parser = argparse.ArgumentParser(prog="hybridaug", description="Hybrid models with expert augmentation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name != "selfcheck":
            p.add_argument("--out", required=True, help="run directory")
        if name == "augment":
            p.add_argument("--n-aug", type=int, dest="n_aug")
        if name == "selfcheck":
            p.add_argument("--perturb-gradient", type=float, default=0.0, help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "selfcheck":
            return cmd_selfcheck(None, None, args)
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, Path(args.out), args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (DivergenceError, FloatingPointError, datasets.ContainerError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
