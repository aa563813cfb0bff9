"""Ground-truth splits and the binary container used for datasets and checkpoints.

Container layout (little-endian)::

    b"HYAD" | version u32 | entry count u32 | entries...
    entry  = name length u32 | name (utf-8) | ndim u32 | dims u64 * ndim | payload

The first entry is ``__manifest__``: a 1-d entry whose payload is the UTF-8
JSON manifest (dims = [byte length]). Every other payload is raw float64
data in row-major order.
"""
from __future__ import annotations

import json
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dynamics
from .dynamics import System, SystemSpec
from .integrators import DivergenceError, rk4_rollout
from .rng import Rng
from .tensor import Tensor

MAGIC = b"HYAD"
VERSION = 1
MANIFEST_KEY = "__manifest__"


class ContainerError(ValueError):
    """Malformed, truncated or incompatible container file."""


@dataclass(frozen=True)
class SplitSpec:
    system: str
    split: str
    n: int
    ze_box: tuple
    za_box: tuple
    horizon: tuple = (0.0, 5.0, 20.0)
    dt_obs: float = 0.1
    seed: int = 0
    grid: int = 32
    substeps: int = 4

    def validate(self) -> None:
        if self.n <= 0:
            raise ValueError("split sample count must be positive")
        t0, t1, t2 = self.horizon
        if not t0 < t1 < t2:
            raise ValueError("horizon must satisfy t0 < t1 < t2")
        for lo, hi in tuple(self.ze_box) + tuple(self.za_box):
            if lo > hi:
                raise ValueError(f"empty support [{lo}, {hi}]")

    @property
    def n_obs(self) -> int:
        return int(round((self.horizon[2] - self.horizon[0]) / self.dt_obs))

    def system_spec(self) -> SystemSpec:
        return dynamics.get_spec(self.system, grid=self.grid, horizon=tuple(self.horizon),
                                 dt_obs=self.dt_obs)

    def to_json(self) -> dict:
        d = asdict(self)
        d["ze_box"] = [list(b) for b in self.ze_box]
        d["za_box"] = [list(b) for b in self.za_box]
        d["horizon"] = list(self.horizon)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SplitSpec":
        d = dict(d)
        d["ze_box"] = tuple(tuple(b) for b in d["ze_box"])
        d["za_box"] = tuple(tuple(b) for b in d["za_box"])
        d["horizon"] = tuple(d["horizon"])
        return cls(**d)


@dataclass
class Dataset:
    manifest: dict
    x: np.ndarray         # [N, *S]
    y: np.ndarray         # [N, T, *S], states at dt, 2 dt, ..., t2
    z_e: np.ndarray       # [N, d_e]
    z_a_true: np.ndarray  # [N, 1]
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        m = dict(self.manifest, n=int(len(idx)))
        return Dataset(m, self.x[idx], self.y[idx], self.z_e[idx], self.z_a_true[idx],
                       {k: v[idx] for k, v in self.extra.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"x": self.x, "y": self.y, "z_e": self.z_e, "z_a_true": self.z_a_true}
        out.update(self.extra)
        return out

    def validate(self) -> None:
        n = self.x.shape[0]
        for name, arr in self.arrays().items():
            if arr.shape[0] != n:
                raise ValueError(f"array {name!r} has {arr.shape[0]} rows, expected {n}")
        if not np.all(np.isfinite(self.y)):
            raise ValueError("dataset contains non-finite trajectories")


# ----------------------------------------------------------------------
# generation


def _split_rng(spec: SplitSpec) -> Rng:
    return Rng(spec.seed, (zlib.crc32(spec.split.encode()),))


def _draw_initial_state(system: System, rng: Rng, grid: int) -> np.ndarray:
    if system is System.PENDULUM:
        return np.array([rng.uniform_array(-np.pi / 2, np.pi / 2), 0.0])
    if system is System.RLC:
        return np.array([rng.normal_array(0.0, 1.0, (1,))[0], 0.0])
    return rng.uniform_array(0.0, 1.0, (2, grid, grid))


def _draw_box(rng: Rng, box) -> np.ndarray:
    out = np.empty(len(box))
    for i, (lo, hi) in enumerate(box):
        out[i] = lo if lo == hi else rng.uniform_array(lo, hi)
    return out


def draw_sample_parameters(spec: SplitSpec, index: int):
    """(z_e, z_a, x) for one sample, from its own child stream."""
    rng = _split_rng(spec).child(index)
    z_e = _draw_box(rng, spec.ze_box)
    z_a = _draw_box(rng, spec.za_box)
    x = _draw_initial_state(System(spec.system), rng, spec.grid)
    return z_e, z_a, x


def simulate(sys_spec: SystemSpec, x: np.ndarray, z_e: np.ndarray, z_a: np.ndarray,
             n_obs: int, dt_obs: float, substeps: int, t0: float = 0.0,
             reactions: bool = True) -> np.ndarray:
    """Integrate the true field; returns [B, n_obs, *S] as a plain array."""
    ze, za = Tensor(z_e), Tensor(z_a)
    if reactions:
        def field(t, y):
            return dynamics.full_field(sys_spec, t, y, ze, za)
    else:
        def field(t, y):
            return dynamics.expert_field(sys_spec, t, y, ze)
    return rk4_rollout(field, Tensor(x), t0, n_obs, dt_obs, substeps).ys.data


def generate_split(spec: SplitSpec, threads: int = 1, chunk: int = 250) -> Dataset:
    spec.validate()
    sys_spec = spec.system_spec()
    params = [draw_sample_parameters(spec, i) for i in range(spec.n)]
    z_e = np.stack([p[0] for p in params])
    z_a = np.stack([p[1] for p in params])
    x = np.stack([p[2] for p in params])
    # every op is per-sample, so chunking (and threading) leaves results bitwise unchanged
    bounds = [(s, min(s + chunk, spec.n)) for s in range(0, spec.n, chunk)]

    def run(b):
        s, e = b
        try:
            return simulate(sys_spec, x[s:e], z_e[s:e], z_a[s:e], spec.n_obs, spec.dt_obs,
                            spec.substeps, spec.horizon[0])
        except DivergenceError as err:
            raise DivergenceError(err.step, f"ground-truth rollout diverged for samples "
                                            f"{s}..{e - 1} (z_e={z_e[s:e].tolist()}, "
                                            f"z_a={z_a[s:e].tolist()})") from err

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    manifest = {"kind": "dataset", **spec.to_json(),
                "n_obs": spec.n_obs, "expert_names": list(sys_spec.expert_names),
                "interaction_names": list(sys_spec.interaction_names)}
    ds = Dataset(manifest, x, np.concatenate(parts), z_e, z_a)
    ds.validate()
    return ds


def standard_splits(system, seed: int = 0, n_train: int | None = None,
                    n_val: int | None = None, n_test: int | None = None,
                    grid: int | None = None, za_box=None) -> dict[str, SplitSpec]:
    """Train / IID validation / shifted-z_e test specs with the benchmark supports."""
    s = dynamics.get_spec(system, **({"grid": grid} if grid else {}))
    za = tuple(za_box) if za_box is not None else s.train_za
    common = dict(system=s.system.value, za_box=za, horizon=s.horizon, dt_obs=s.dt_obs,
                  seed=seed, grid=s.grid, substeps=s.data_substeps)
    return {
        "train": SplitSpec(split="train", n=n_train or s.n_train, ze_box=s.train_ze, **common),
        "val": SplitSpec(split="val", n=n_val or s.n_val, ze_box=s.train_ze, **common),
        "test": SplitSpec(split="test", n=n_test or s.n_test, ze_box=s.test_ze, **common),
    }


ZA_SHIFT = {
    System.PENDULUM: (((0.0, 0.3),), ((0.3, 0.6),)),
    System.DIFFUSION: (((0.003, 0.005),), ((0.005, 0.008),)),
    System.RLC: (((1.0, 3.0),), ((3.0, 6.0),)),
}


def za_shift_splits(system, seed: int = 0, n_train: int | None = None,
                    n_test: int | None = None, grid: int | None = None) -> tuple[SplitSpec, SplitSpec]:
    """(train, test) specs where the test shifts z_a as well as z_e."""
    sys_ = System(system)
    train_za, test_za = ZA_SHIFT[sys_]
    base = standard_splits(sys_, seed, n_train=n_train, n_test=n_test, grid=grid, za_box=train_za)
    test = replace(base["test"], split="za_test", za_box=test_za)
    return base["train"], test


def sweep_bins(za_box, n_bins: int = 3) -> list[tuple[float, float]]:
    ((lo, hi),) = za_box
    edges = np.linspace(lo, hi, n_bins + 1)
    return [(float(a), float(b)) for a, b in zip(edges[:-1], edges[1:])]


def observed_window(ds: Dataset, n_obs_train: int):
    """(x_o, y_o, x, y_future) views used for training and evaluation."""
    return ds.x, ds.y[:, :n_obs_train], ds.y[:, n_obs_train - 1], ds.y[:, n_obs_train:]


# ----------------------------------------------------------------------
# container


def write_container(path, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays) + 1)]

    def header(name: str, dims) -> bytes:
        nb = name.encode("utf-8")
        return (struct.pack("<I", len(nb)) + nb + struct.pack("<I", len(dims))
                + struct.pack(f"<{len(dims)}Q", *dims))

    parts += [header(MANIFEST_KEY, (len(blob),)), blob]
    for name, arr in arrays.items():
        if name == MANIFEST_KEY:
            raise ValueError(f"{MANIFEST_KEY!r} is reserved")
        a = np.ascontiguousarray(arr, dtype="<f8")
        parts += [header(name, a.shape), a.tobytes()]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ContainerError(f"{path}: truncated at byte {pos} (needed {n} more)")
        out = buf[pos:pos + n]
        pos += n
        return out

    magic = take(4)
    if magic != MAGIC:
        raise ContainerError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}, expected {VERSION}")
    manifest = None
    arrays: dict[str, np.ndarray] = {}
    for k in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        if k == 0:
            if name != MANIFEST_KEY or ndim != 1:
                raise ContainerError(f"{path}: first entry must be {MANIFEST_KEY!r}")
            try:
                manifest = json.loads(take(dims[0]).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as err:
                raise ContainerError(f"{path}: malformed manifest ({err})") from None
            continue
        n = int(np.prod(dims, dtype=np.int64))
        arrays[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if manifest is None:
        raise ContainerError(f"{path}: missing manifest")
    if pos != len(buf):
        raise ContainerError(f"{path}: {len(buf) - pos} trailing bytes")
    return manifest, arrays


def save_dataset(ds: Dataset, path) -> None:
    if len(ds) == 0:
        raise ValueError("refusing to save an empty dataset (N = 0)")
    ds.validate()
    write_container(path, ds.manifest, ds.arrays())


def load_dataset(path) -> Dataset:
    manifest, arrays = read_container(path)
    if manifest.get("kind") != "dataset":
        raise ContainerError(f"{path}: not a dataset (kind={manifest.get('kind')!r})")
    try:
        core = {k: arrays.pop(k) for k in ("x", "y", "z_e", "z_a_true")}
    except KeyError as err:
        raise ContainerError(f"{path}: missing array {err}") from None
    ds = Dataset(manifest, extra=arrays, **core)
    ds.validate()
    return ds


def save_checkpoint(path, manifest: dict, state: dict[str, np.ndarray]) -> None:
    write_container(path, {"kind": "checkpoint", **manifest}, state)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    manifest, arrays = read_container(path)
    if manifest.get("kind") != "checkpoint":
        raise ContainerError(f"{path}: not a checkpoint (kind={manifest.get('kind')!r})")
    return manifest, arrays
