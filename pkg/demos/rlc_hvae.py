"""HVAE on the series RLC circuit, with and without expert augmentation.

    python3 demos/rlc_hvae.py --n-train 60 --epochs 10

Each prediction averages several posterior samples. The z_e column reports how
well the encoder recovers (L, C) from the observed window.
"""
import argparse

from hybridaug import datasets, dynamics
from hybridaug.augmentation import AugmentConfig, augment_pipeline
from hybridaug.evaluation import evaluate_model
from hybridaug.hvae import HvaeConfig, HvaeModel, hvae_train
from hybridaug.rng import Rng

ap = argparse.ArgumentParser()
ap.add_argument("--n-train", type=int, default=200)
ap.add_argument("--epochs", type=int, default=25)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

splits = {k: datasets.generate_split(s) for k, s in
          datasets.standard_splits("rlc", seed=args.seed, n_train=args.n_train).items()}
model = HvaeModel(dynamics.rlc_spec(), Rng(args.seed, (1,)))
hvae_train(model, splits["train"].x, splits["train"].y,
           HvaeConfig(epochs=args.epochs, batch=20, lr=1e-3), Rng(args.seed, (2,)))


def report(tag):
    for split in ("val", "test"):
        m = evaluate_model(model, splits[split])
        print(f"{tag:<6s}{split:<5s} log-MSE {m.log_mse:7.3f}  z_e error {m.rel_ze_error:6.1f}%")


report("HVAE")
augment_pipeline(model, splits["train"].x, splits["train"].y,
                 AugmentConfig(n_aug=4 * args.n_train, epochs=args.epochs, lr=1e-3), Rng(args.seed, (3,)))
report("HVAE+")
