"""Expert augmentation: synthesize data over a widened z_e support from the
trained hybrid decoder, then fine-tune only the encoder on it."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datasets import ContainerError, read_container, write_container
from .hybrid import HybridModel, LossRecord, minibatches, optimizer_step
from .optim import AdamState
from .rng import Rng
from .tensor import Tape, Tensor


class AugmentationError(RuntimeError):
    """Too many synthetic samples diverged."""


@dataclass
class AugmentConfig:
    support: tuple | None = None      # None -> the system's augmented support
    n_aug: int | None = None          # None -> size of the training set
    w_sup: float = 1.0
    sup_unit: tuple | None = None     # per-coordinate divisor of the z_e error; None -> raw
    epochs: int = 25
    lr: float = 5e-4
    batch: int = 20
    weight_decay: float = 0.0
    max_skip_fraction: float = 0.05
    chunk: int = 250

    def resolved_support(self, model: HybridModel) -> tuple:
        box = tuple(tuple(b) for b in (self.support or model.spec.augmented_ze))
        if len(box) != model.spec.d_e or any(lo >= hi for lo, hi in box):
            raise ValueError(f"augmented support {box} must be a non-empty box of dim {model.spec.d_e}")
        return box


@dataclass
class AugmentedData:
    """Synthetic samples (x_o, y, z_e); ``y`` has the training observation length."""

    x: np.ndarray
    y: np.ndarray
    z_e: np.ndarray
    z_a: np.ndarray
    support: tuple
    skipped: int = 0
    requested: int = 0

    def __len__(self) -> int:
        return len(self.x)


def save_augmented(data: AugmentedData, path, meta: dict | None = None) -> None:
    if len(data) == 0:
        raise ValueError("refusing to save an empty augmented dataset")
    manifest = {"kind": "augmented", "support": [list(b) for b in data.support],
                "n": len(data), "skipped": data.skipped, "requested": data.requested, **(meta or {})}
    write_container(path, manifest, {"x": data.x, "y": data.y, "z_e": data.z_e, "z_a": data.z_a})


def load_augmented(path) -> AugmentedData:
    manifest, arrays = read_container(path)
    if manifest.get("kind") != "augmented":
        raise ContainerError(f"{path}: not an augmented dataset (kind={manifest.get('kind')!r})")
    support = tuple(tuple(b) for b in manifest["support"])
    return AugmentedData(arrays["x"], arrays["y"], arrays["z_e"], arrays["z_a"], support,
                         manifest["skipped"], manifest["requested"])


def _sample_box(rng: Rng, box, n: int) -> np.ndarray:
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    return rng.uniform_array(lo, hi, (n, len(box)))


def build_augmented_dataset(model: HybridModel, x_train: np.ndarray, y_train: np.ndarray,
                            cfg: AugmentConfig, rng: Rng) -> AugmentedData:
    box = cfg.resolved_support(model)
    n_aug = len(x_train) if cfg.n_aug is None else int(cfg.n_aug)
    shape = model.spec.state_shape
    if n_aug == 0:
        return AugmentedData(np.zeros((0,) + shape), np.zeros((0, model.n_obs) + shape),
                             np.zeros((0, model.spec.d_e)), np.zeros((0, 0)), box)
    if len(x_train) == 0:
        raise ValueError("build_augmented_dataset needs training data")
    y_train = y_train[:, :model.n_obs]
    idx = rng.integers(len(x_train), n_aug)
    z_a = model.augmentation_za(x_train, y_train, idx, rng)
    z_e = _sample_box(rng, box, n_aug)
    x = x_train[idx]
    ys = np.empty((n_aug, model.n_obs) + shape)
    for s in range(0, n_aug, cfg.chunk):
        e = min(s + cfg.chunk, n_aug)
        ys[s:e] = model.decode(x[s:e], z_e[s:e], z_a[s:e], model.n_obs)
    ok = np.all(np.isfinite(ys.reshape(n_aug, -1)), axis=1)
    skipped = int(n_aug - ok.sum())
    if skipped > cfg.max_skip_fraction * n_aug:
        raise AugmentationError(f"{skipped}/{n_aug} augmented rollouts diverged "
                                f"(limit {cfg.max_skip_fraction:.0%})")
    return AugmentedData(x[ok], ys[ok], z_e[ok], z_a[ok], box, skipped, n_aug)


@dataclass
class FinetuneResult:
    model: HybridModel
    record: LossRecord = field(default_factory=LossRecord)


def finetune_encoder(model: HybridModel, data: AugmentedData, cfg: AugmentConfig,
                     rng: Rng, log=None) -> FinetuneResult:
    """Minimize ``loss + w_sup * supervision`` over encoder parameters only."""
    if len(data) == 0:
        raise ValueError("finetune_encoder needs a non-empty augmented dataset")
    model.freeze_decoder()
    try:
        params = model.encoder_parameters()
        frozen = model.decoder_parameters()
        state = AdamState.for_params(params, cfg.lr, cfg.weight_decay)
        record = LossRecord()
        step = 0
        for epoch in range(cfg.epochs):
            totals = np.zeros(3)
            erng = rng.child(epoch)
            for b, idx in enumerate(minibatches(len(data), cfg.batch, erng.child(0))):
                with Tape() as tape:
                    base, sup = model.finetune_losses(Tensor(data.x[idx]), Tensor(data.y[idx]),
                                                      Tensor(data.z_e[idx]), erng.child(1, b),
                                                      unit=cfg.sup_unit)
                    loss = base + cfg.w_sup * sup
                optimizer_step(loss, tape, params, state, frozen=frozen, step=step)
                step += 1
                totals += len(idx) * np.array([loss.item(), base.item(), sup.item()])
            totals /= len(data)
            record.add(epoch=epoch, loss=totals[0], base=totals[1], supervision=totals[2])
            if log is not None:
                log(record.epochs[-1])
    finally:
        model.unfreeze_decoder()
    return FinetuneResult(model, record)


@dataclass
class AugmentResult:
    model: HybridModel
    data: AugmentedData
    record: LossRecord
    decoder_hash: str


def augment_pipeline(model: HybridModel, x_train: np.ndarray, y_train: np.ndarray,
                     cfg: AugmentConfig, rng: Rng, log=None) -> AugmentResult:
    """Build the augmented set from ``model`` and fine-tune it in place (the "+" model)."""
    before = model.decoder_hash()
    data = build_augmented_dataset(model, x_train, y_train, cfg, rng.child(0))
    result = finetune_encoder(model, data, cfg, rng.child(1), log=log)
    after = model.decoder_hash()
    if before != after:
        raise RuntimeError("decoder parameters changed during encoder fine-tuning")
    return AugmentResult(result.model, data, result.record, after)
