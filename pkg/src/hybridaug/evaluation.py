"""Metrics, the mean-signal baseline, z_a sweeps and report files."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import datasets, dynamics
from .datasets import Dataset, observed_window
from .integrators import Trajectory, rk4_rollout
from .rng import Rng
from .tensor import Tensor, no_grad

MSE_FLOOR = 1e-300


def _array(traj) -> np.ndarray:
    if isinstance(traj, Trajectory):
        traj = traj.ys
    if isinstance(traj, Tensor):
        traj = traj.data
    return np.asarray(traj, dtype=np.float64)


def log_mse(pred, target, with_flag: bool = False):
    """Natural log of the mean squared error over every sample, step and coordinate.

    An exact match is floored at ``log(1e-300)``; ``with_flag`` also returns
    whether that floor was hit.
    """
    p, t = _array(pred), _array(target)
    if p.shape != t.shape:
        raise ValueError(f"log_mse: shape mismatch {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("log_mse: empty input")
    with np.errstate(over="ignore"):  # a blown-up rollout scores +inf rather than warning
        m = float(np.mean((p - t) ** 2))
    exact = m < MSE_FLOOR
    value = math.log(max(m, MSE_FLOOR))
    return (value, exact) if with_flag else value


def relative_param_error(z_true, mu) -> float:
    """Mean over samples of the coordinate-averaged |(z - mu) / z|, in percent."""
    z, m = np.atleast_2d(np.asarray(z_true, float)), np.atleast_2d(np.asarray(mu, float))
    if z.shape != m.shape:
        raise ValueError(f"relative_param_error: shape mismatch {z.shape} vs {m.shape}")
    if np.any(z == 0):
        raise ValueError("relative_param_error: true parameters must be non-zero")
    return float(np.mean(np.mean(np.abs((z - m) / z), axis=1)) * 100.0)


class MeanBaseline:
    """Predicts the per-step, per-coordinate training mean whatever the query."""

    flavor = "mean"

    def __init__(self, means: np.ndarray, dt_obs: float):
        self.means = means
        self.dt_obs = dt_obs

    def predict(self, x_o, y_o, x, n_obs: int, t0: float = 0.0) -> Trajectory:
        start = int(round(t0 / self.dt_obs))
        if start + n_obs > len(self.means):
            raise ValueError("query extends past the training horizon")
        B = np.shape(x)[0]
        block = np.broadcast_to(self.means[start:start + n_obs], (B, n_obs) + self.means.shape[1:])
        return Trajectory(Tensor(np.asarray(x)), Tensor(block.copy()), self.dt_obs)


def mean_baseline(train: Dataset) -> MeanBaseline:
    if len(train) == 0:
        raise ValueError("mean_baseline needs a non-empty split")
    return MeanBaseline(train.y.mean(axis=0), float(train.manifest.get("dt_obs", 0.1)))


class OracleModel:
    """Predicts with the true parameters and true interaction field of ``ds``.

    Samples are recognized by their initial state and first observation, so the
    oracle only answers queries drawn from the dataset it was built from.
    """

    flavor = "oracle"

    def __init__(self, spec: dynamics.SystemSpec, ds: Dataset):
        self.spec = spec
        self.ds = ds
        self._index = {self._key(ds.x[i], ds.y[i, 0]): i for i in range(len(ds))}

    @staticmethod
    def _key(x, y1) -> bytes:
        return np.ascontiguousarray(x).tobytes() + np.ascontiguousarray(y1).tobytes()

    def _rows(self, x_o, y_o) -> np.ndarray:
        return np.array([self._index[self._key(x_o[i], y_o[i, 0])] for i in range(len(x_o))])

    def expert_estimate(self, x_o, y_o) -> np.ndarray:
        return self.ds.z_e[self._rows(x_o, y_o)]

    def predict(self, x_o, y_o, x, n_obs: int, t0: float | None = None) -> Trajectory:
        rows = self._rows(x_o, y_o)
        z_e, z_a = Tensor(self.ds.z_e[rows]), Tensor(self.ds.z_a_true[rows])
        if t0 is None:
            t0 = self.spec.horizon[1]

        def f(t, y):
            return dynamics.full_field(self.spec, t, y, z_e, z_a)

        return rk4_rollout(f, x, t0, n_obs, self.spec.dt_obs, self.spec.model_substeps)


@dataclass
class Metrics:
    log_mse: float
    rel_ze_error: float | None
    n: int
    exact: bool = False


def _predict_chunk(model, ds: Dataset, sel, n_train_obs: int, t0: float, n_mc: int, seed: int):
    x_o, y_o, x, fut = observed_window(ds.subset(sel), n_train_obs)
    kw = {}
    if getattr(model, "flavor", "") == "hvae":
        kw = {"n_mc": n_mc, "rng": Rng(seed, (int(sel[0]),))}
    with no_grad():
        pred = _array(model.predict(x_o, y_o, x, fut.shape[1], t0, **kw))
        ze = model.expert_estimate(x_o, y_o) if hasattr(model, "expert_estimate") else None
    return pred, ze


def evaluate_model(model, ds: Dataset, n_train_obs: int | None = None, threads: int = 1,
                   chunk: int = 50, n_mc: int = 8, seed: int = 0) -> Metrics:
    """Condition on the first ``n_train_obs`` observations and score the rest of the horizon."""
    t0, t1, _ = ds.manifest.get("horizon", (0.0, 5.0, 20.0))
    dt = float(ds.manifest.get("dt_obs", 0.1))
    if n_train_obs is None:
        n_train_obs = int(round((t1 - t0) / dt))
    n = len(ds)
    if n == 0:
        raise ValueError("evaluate_model needs a non-empty dataset")
    sels = [np.arange(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    args = (n_train_obs, t0 + n_train_obs * dt, n_mc, seed)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda s: _predict_chunk(model, ds, s, *args), sels))
    else:
        parts = [_predict_chunk(model, ds, s, *args) for s in sels]
    pred = np.concatenate([p for p, _ in parts])
    value, exact = log_mse(pred, ds.y[:, n_train_obs:], with_flag=True)
    ze = None
    if parts[0][1] is not None:
        ze = relative_param_error(ds.z_e, np.concatenate([z for _, z in parts]))
    return Metrics(value, ze, n, exact)


def za_sweep(model, model_plus, system, bins, seed: int = 0, n: int = 100,
             grid: int | None = None, threads: int = 1, n_train_obs: int | None = None) -> list[dict]:
    """One shifted test split per z_a bin (z_e in the shifted box); both models scored on each."""
    _, test = datasets.za_shift_splits(system, seed=seed, n_test=n, grid=grid)
    rows = []
    for k, (lo, hi) in enumerate(bins):
        spec = replace(test, split=f"za_bin{k}", za_box=((lo, hi),))
        ds = datasets.generate_split(spec, threads=threads)
        for name, m in (("base", model), ("plus", model_plus)):
            met = evaluate_model(m, ds, n_train_obs, threads=threads)
            rows.append({"bin_lo": lo, "bin_hi": hi, "model": name, "log_mse": met.log_mse,
                         "rel_ze_error": met.rel_ze_error, "n": met.n})
    return rows


# ----------------------------------------------------------------------
# reports


@dataclass
class ExperimentReport:
    """Per-run metric rows plus optional sweep rows and run metadata."""

    rows: list[dict] = field(default_factory=list)
    sweep: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, split: str, model: str, seed: int, metrics: Metrics) -> None:
        self.rows.append({"split": split, "model": model, "seed": int(seed),
                          "log_mse": metrics.log_mse, "rel_ze_error": metrics.rel_ze_error,
                          "n": metrics.n})

    def add_sweep(self, seed: int, rows: list[dict]) -> None:
        self.sweep.extend({**r, "seed": int(seed)} for r in rows)

    def summary(self) -> list[dict]:
        """Mean and std over seeds for every (split, model) pair."""
        groups: dict[tuple, list[dict]] = {}
        for r in self.rows:
            groups.setdefault((r["split"], r["model"]), []).append(r)
        out = []
        for (split, model), rs in groups.items():
            lm = np.array([r["log_mse"] for r in rs])
            ze = [r["rel_ze_error"] for r in rs if r["rel_ze_error"] is not None]
            out.append({"split": split, "model": model, "runs": len(rs),
                        "log_mse_mean": float(lm.mean()), "log_mse_std": float(lm.std()),
                        "rel_ze_error_mean": float(np.mean(ze)) if ze else None,
                        "rel_ze_error_std": float(np.std(ze)) if ze else None})
        return out

    def to_dict(self) -> dict:
        return {"rows": self.rows, "sweep": self.sweep, "meta": self.meta, "summary": self.summary()}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(list(d.get("rows", [])), list(d.get("sweep", [])), dict(d.get("meta", {})))


ROW_FIELDS = ["split", "model", "seed", "log_mse", "rel_ze_error", "n"]
SWEEP_FIELDS = ["bin_lo", "bin_hi", "model", "seed", "log_mse", "rel_ze_error", "n"]
SUMMARY_FIELDS = ["split", "model", "runs", "log_mse_mean", "log_mse_std",
                  "rel_ze_error_mean", "rel_ze_error_std"]


def _write_csv(path: Path, fields: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fields})


def emit_report(report: ExperimentReport, path) -> dict[str, Path]:
    """Write ``report.json`` and ``tables/{metrics,summary,sweep}.csv`` under ``path``."""
    root = Path(path)
    (root / "tables").mkdir(parents=True, exist_ok=True)
    files = {"json": root / "report.json", "metrics": root / "tables" / "metrics.csv",
             "summary": root / "tables" / "summary.csv"}
    files["json"].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_csv(files["metrics"], ROW_FIELDS, report.rows)
    _write_csv(files["summary"], SUMMARY_FIELDS, report.summary())
    if report.sweep:
        files["sweep"] = root / "tables" / "sweep.csv"
        _write_csv(files["sweep"], SWEEP_FIELDS, report.sweep)
    return files


def load_report(path) -> ExperimentReport:
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    return ExperimentReport.from_dict(json.loads(p.read_text()))

