"""Shared setup for the experiment scripts: synthetic data and the smoke-scale model."""

from __future__ import annotations

import argparse

from shrimpxnet.data import generate_synthetic, split
from shrimpxnet.model import ModelSpec
from shrimpxnet.trainer import TrainConfig


def common_args(description):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--per-class", type=int, default=200, help="synthetic images per class (default: %(default)s)")
    p.add_argument("--size", type=int, default=64, help="image size in pixels (default: %(default)s)")
    p.add_argument("--epochs", type=int, default=15, help="maximum epochs per run (default: %(default)s)")
    p.add_argument("--batch-size", type=int, default=32, help="batch size (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="data, split and training seed (default: %(default)s)")
    return p


def setup(args):
    samples, names = generate_synthetic(args.per_class, 4, args.size, seed=args.seed)
    splits = split(samples, args.seed, names)
    spec = ModelSpec(input_size=(args.size, args.size))
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, seed=args.seed)
    return splits, spec, config
