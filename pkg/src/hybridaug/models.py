"""Construct models by flavor and move them (with optimizer state) through checkpoints."""
from __future__ import annotations

from dataclasses import asdict, fields

import numpy as np

from . import dynamics
from .aphynity import AphynityConfig, AphynityModel
from .datasets import load_checkpoint, save_checkpoint
from .hvae import HvaeModel, HvaeNetConfig
from .hybrid import HybridModel, LossRecord, TrainState
from .optim import AdamState
from .rng import Rng

FLAVORS = {"aphynity": (AphynityModel, AphynityConfig), "hvae": (HvaeModel, HvaeNetConfig)}


def arch_config(flavor: str, values: dict | None = None):
    try:
        _, cfg_cls = FLAVORS[flavor]
    except KeyError:
        raise ValueError(f"unknown model flavor {flavor!r}; expected one of {sorted(FLAVORS)}") from None
    values = dict(values or {})
    known = {f.name for f in fields(cfg_cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown {flavor} model option(s): {sorted(unknown)}")
    for k, v in values.items():
        if isinstance(v, list):
            values[k] = tuple(v)
    return cfg_cls(**values)


def build_model(flavor: str, spec: dynamics.SystemSpec, rng: Rng, arch: dict | None = None,
                prior_support=None) -> HybridModel:
    cfg = arch_config(flavor, arch)
    if flavor == "hvae":
        return HvaeModel(spec, rng, cfg, prior_support)
    return AphynityModel(spec, rng, cfg)


def model_manifest(model: HybridModel) -> dict:
    m = model.manifest()
    m["config"] = {k: list(v) if isinstance(v, tuple) else v for k, v in m["config"].items()}
    m["decoder_hash"] = model.decoder_hash()
    m["n_parameters"] = model.n_parameters()
    return m


def save_model(path, model: HybridModel, state: TrainState | None = None, **meta) -> None:
    """Checkpoint parameters, and optionally the optimizer state and loss curve."""
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    manifest = {**model_manifest(model), **meta}
    if state is not None:
        names = [k for k, _ in model.named_parameters()]
        for name, m, v in zip(names, state.adam.m, state.adam.v):
            arrays[f"adam_m/{name}"] = m
            arrays[f"adam_v/{name}"] = v
        a = asdict(state.adam)
        del a["m"], a["v"]
        manifest["train_state"] = {"adam": a, "epoch": state.epoch, "step": state.step,
                                   "record": state.record.epochs, "extra": state.extra}
    save_checkpoint(path, manifest, arrays)


def load_model(path) -> tuple[HybridModel, TrainState | None, dict]:
    manifest, arrays = load_checkpoint(path)
    flavor = manifest.get("flavor")
    if flavor not in FLAVORS:
        raise ValueError(f"{path}: unknown model flavor {flavor!r}")
    spec = dynamics.get_spec(manifest["system"], grid=manifest["grid"])
    model = build_model(flavor, spec, Rng(0), manifest["config"], manifest.get("prior_support"))
    model.load_state_dict({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    if "lam" in manifest:
        model.lam = float(manifest["lam"])
    state = None
    ts = manifest.get("train_state")
    if ts is not None:
        names = [k for k, _ in model.named_parameters()]
        adam = AdamState(**ts["adam"], m=[arrays[f"adam_m/{n}"] for n in names],
                         v=[arrays[f"adam_v/{n}"] for n in names])
        state = TrainState(adam, ts["epoch"], ts["step"], LossRecord(list(ts["record"])),
                           dict(ts["extra"]))
    return model, state, manifest


def state_equal(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
