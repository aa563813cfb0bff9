"""Numerical self-checks: finite-difference gradients, physics invariants, RK4 order
and container round-trips. Shared by the ``selfcheck`` command and the test suite."""
from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import datasets, dynamics
from . import tensor as T
from .integrators import rk4_rollout
from .rng import Rng
from .tensor import Parameter, Tape, Tensor


def gradcheck(fn: Callable[[], Tensor], params: list[Tensor], h: float = 1e-5,
              perturb: float = 0.0) -> float:
    """Largest per-tensor relative error between tape and central-difference gradients.

    ``fn`` must recompute the scalar loss from the current ``params`` values.
    ``perturb`` scales the analytic gradient by ``1 + perturb`` (negative control).
    """
    with Tape() as tape:
        loss = fn()
    analytic = [g * (1.0 + perturb) for g in tape.gradient(loss, params)]
    worst = 0.0
    for p, g in zip(params, analytic):
        num = np.zeros_like(p.data)
        base = p.data
        for i in range(base.size):
            for sign in (1.0, -1.0):
                shifted = base.copy()
                shifted.flat[i] += sign * h
                p.data = shifted
                num.flat[i] += sign * fn().item()
            p.data = base
        num /= 2.0 * h
        scale = max(np.linalg.norm(g), np.linalg.norm(num), 1e-12)
        worst = max(worst, float(np.linalg.norm(g - num) / scale))
    return worst


def _leaf(rng: Rng, shape, lo=-1.0, hi=1.0) -> Parameter:
    return Parameter(rng.uniform_array(lo, hi, shape))


def primitive_cases(rng: Rng) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """One scalar-valued probe per differentiable primitive."""
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    pos = _leaf(rng, (3, 4), 0.5, 2.0)
    row = _leaf(rng, (4,))
    w, v = _leaf(rng, (4, 2)), _leaf(rng, (2,))
    img, ker, kb = _leaf(rng, (2, 2, 5, 5)), _leaf(rng, (3, 2, 3, 3)), _leaf(rng, (3,))
    field = _leaf(rng, (2, 2, 5, 5))
    wt = Tensor(rng.uniform_array(-1, 1, (3, 4)))
    # each probe weights the output by fixed random numbers so no symmetry hides an error
    s = lambda t: (t * Tensor(rng.child(t.size).uniform_array(-1, 1, t.shape))).sum()
    return {
        "add": (lambda: s(a + row), [a, row]),
        "sub": (lambda: s(a - b), [a, b]),
        "mul": (lambda: s(a * b), [a, b]),
        "div": (lambda: s(a / pos), [a, pos]),
        "neg": (lambda: s(-a), [a]),
        "square": (lambda: s(T.square(a)), [a]),
        "pow": (lambda: s(T.power(pos, 1.7)), [pos]),
        "exp": (lambda: s(T.exp(a)), [a]),
        "log": (lambda: s(T.log(pos)), [pos]),
        "sqrt": (lambda: s(T.sqrt(pos)), [pos]),
        "sin": (lambda: s(T.sin(a)), [a]),
        "cos": (lambda: s(T.cos(a)), [a]),
        "tanh": (lambda: s(T.tanh(a)), [a]),
        "sigmoid": (lambda: s(T.sigmoid(a)), [a]),
        "relu": (lambda: s(T.relu(a * 1.0 + 0.05)), [a]),
        "selu": (lambda: s(T.selu(a)), [a]),
        "softplus": (lambda: s(T.softplus(a)), [a]),
        "clip": (lambda: s(T.clip(a, -0.5, 0.5)), [a]),
        "matmul": (lambda: s(T.matmul(a, w)), [a, w]),
        "linear": (lambda: s(T.linear(a, w, v)), [a, w, v]),
        "sum": (lambda: s(T.reduce_sum(a * wt, axis=0)), [a]),
        "mean": (lambda: s(T.reduce_mean(a * wt, axis=1, keepdims=True)), [a]),
        "reshape": (lambda: s(T.reshape(a, (2, 6))), [a]),
        "transpose": (lambda: s(T.transpose(a)), [a]),
        "broadcast_to": (lambda: s(T.broadcast_to(row, (3, 4))), [row]),
        "getitem": (lambda: s(a[np.array([0, 2, 2]), 1:3]), [a]),
        "concat": (lambda: s(T.concat([a, b], axis=0)), [a, b]),
        "stack": (lambda: s(T.stack([a, b], axis=1)), [a, b]),
        "conv2d": (lambda: s(T.conv2d(img, ker, kb)), [img, ker, kb]),
        "conv2d_stride2": (lambda: s(T.conv2d(img, ker, kb, stride=2)), [img, ker, kb]),
        "laplacian": (lambda: s(T.laplacian(field)), [field]),
    }


def toy_spec(system: str = "pendulum") -> dynamics.SystemSpec:
    """Ten observed steps (1 s at dt = 0.1) and a small grid for diffusion."""
    grid = 6 if system == "diffusion" else 32
    return dynamics.get_spec(system, horizon=(0.0, 1.0, 2.0), grid=grid)


def _toy_batch(spec: dynamics.SystemSpec, n: int = 3, seed: int = 0):
    ds = datasets.generate_split(datasets.SplitSpec(
        system=spec.system.value, split="toy", n=n, ze_box=spec.train_ze, za_box=spec.train_za,
        horizon=spec.horizon, dt_obs=spec.dt_obs, seed=seed, grid=spec.grid, substeps=2))
    return ds.x, ds.y[:, :spec.n_obs_train]


def toy_aphynity(seed: int = 0):
    """APHYNITY model with fewer than 100 parameters on the ten-step spec."""
    from .aphynity import AphynityConfig, AphynityModel
    spec = toy_spec()
    cfg = AphynityConfig(hidden=2, ze_hidden=(2,), za_hidden=(2,), fa_width=3, fa_depth=1)
    return AphynityModel(spec, Rng(seed), cfg)


def toy_hvae(seed: int = 0):
    """HVAE model with fewer than 100 parameters on the ten-step spec."""
    from .hvae import HvaeModel, HvaeNetConfig
    spec = toy_spec()
    cfg = HvaeNetConfig(hidden=1, ze_hidden=(), za_hidden=(), filter_width=2, filter_depth=1,
                        fa_width=3, fa_depth=1)
    return HvaeModel(spec, Rng(seed), cfg)


def model_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """Full training losses of both flavors on ten-step toy rollouts."""
    from .hvae import HvaeConfig
    aph = toy_aphynity(seed)
    hv = toy_hvae(seed)
    x, y = _toy_batch(aph.spec)
    x, y = Tensor(x), Tensor(y)
    cfg = HvaeConfig()
    return {
        "aphynity_loss": (lambda: aph.objective(x, y)[0], aph.parameters()),
        "hvae_loss": (lambda: hv.objective(x, y, cfg, Rng(seed, (7,)))[0], hv.parameters()),
    }


def energy_drift(t_end: float = 20.0, seed: int = 0) -> float:
    """Worst relative energy change of undamped pendulum rollouts at data resolution."""
    spec = dynamics.pendulum_spec()
    rng = Rng(seed)
    x = np.stack([rng.uniform_array(-np.pi / 2, np.pi / 2, (8,)), np.zeros(8)], axis=1)
    omega = rng.uniform_array(0.5, 3.5, (8, 1))
    f = lambda t, y: dynamics.expert_field(spec, t, y, omega)
    n = int(round(t_end / spec.dt_obs))
    ys = rk4_rollout(f, x, 0.0, n, spec.dt_obs, spec.data_substeps).ys.data
    e0 = dynamics.pendulum_energy(x, omega[:, 0])
    e = dynamics.pendulum_energy(ys, omega)
    return float(np.max(np.abs(e - e0[:, None]) / np.abs(e0[:, None])))


def mass_drift(frames: int = 50, grid: int = 32, seed: int = 0) -> float:
    """Relative change of total u and v under pure (zero-flux) diffusion."""
    spec = dynamics.diffusion_spec(grid=grid)
    rng = Rng(seed)
    x = rng.uniform_array(0.0, 1.0, (2, 2, grid, grid))
    z_e = np.array([[0.002, 0.005], [0.004, 0.05]])
    f = lambda t, y: dynamics.expert_field(spec, t, y, z_e)
    ys = rk4_rollout(f, x, 0.0, frames, spec.dt_obs, spec.data_substeps).ys.data
    m0 = x.sum(axis=(-1, -2))
    m = ys.sum(axis=(-1, -2))
    return float(np.max(np.abs(m - m0[:, None]) / np.abs(m0[:, None])))


def rk4_order_factor(h: float = 0.2, t_end: float = 4.0) -> float:
    """Error ratio between step h and h/2 against a fine reference (about 16 for 4th order)."""
    spec = dynamics.pendulum_spec()
    x = np.array([[1.2, 0.0]])
    omega, alpha = np.array([[2.0]]), np.array([[0.3]])
    f = lambda t, y: dynamics.full_field(spec, t, y, omega, alpha)

    def end(steps_per_unit: int) -> np.ndarray:
        return rk4_rollout(f, x, 0.0, 1, t_end, steps_per_unit).ys.data[0, -1]

    n = int(round(t_end / h))
    ref = end(16 * n)
    return float(np.linalg.norm(end(n) - ref) / np.linalg.norm(end(2 * n) - ref))


def roundtrip_ok(seed: int = 0) -> bool:
    """Save/load a small dataset and checkpoint; True when both are bitwise lossless."""
    spec = toy_spec()
    ds = datasets.generate_split(datasets.SplitSpec(
        system="pendulum", split="rt", n=4, ze_box=spec.train_ze, za_box=spec.train_za,
        horizon=spec.horizon, seed=seed))
    model = toy_aphynity(seed)
    with tempfile.TemporaryDirectory() as d:
        p = Path(d)
        datasets.save_dataset(ds, p / "ds.hyad")
        back = datasets.load_dataset(p / "ds.hyad")
        datasets.save_checkpoint(p / "m.ckpt", {"flavor": "aphynity"}, model.state_dict())
        _, state = datasets.load_checkpoint(p / "m.ckpt")
    same_ds = back.manifest == ds.manifest and all(
        np.array_equal(a, b) and a.dtype == b.dtype
        for a, b in zip(ds.arrays().values(), back.arrays().values()))
    same_ckpt = all(np.array_equal(v, state[k]) for k, v in model.state_dict().items())
    return bool(same_ds and same_ckpt)


@dataclass
class CheckResult:
    name: str
    value: float
    limit: str
    passed: bool


def run_selfcheck(perturb_gradient: float = 0.0, include_models: bool = True) -> list[CheckResult]:
    out = []
    for name, (fn, params) in primitive_cases(Rng(0)).items():
        err = gradcheck(fn, params, perturb=perturb_gradient)
        out.append(CheckResult(f"grad:{name}", err, "< 1e-4", err < 1e-4))
    if include_models:
        for name, (fn, params) in model_cases().items():
            err = gradcheck(fn, params, perturb=perturb_gradient)
            out.append(CheckResult(f"grad:{name}", err, "< 1e-3", err < 1e-3))
    e = energy_drift()
    out.append(CheckResult("pendulum energy drift (20 s)", e, "< 1e-4", e < 1e-4))
    m = mass_drift()
    out.append(CheckResult("diffusion mass drift (50 frames)", m, "< 1e-10", m < 1e-10))
    r = rk4_order_factor()
    out.append(CheckResult("rk4 step-halving factor", r, "in [12, 20]", 12 <= r <= 20))
    ok = roundtrip_ok()
    out.append(CheckResult("dataset/checkpoint round-trip", float(ok), "bitwise", ok))
    return out
