"""Named model topologies for the desk-scale MNIST experiments.

MNIST images are reshaped space-to-depth into (patch**2, 28/patch, 28/patch) tensors,
(16, 7, 7) for the default patch of 4, so the first layer sees a (C, H, W) input the
tensor formulations can factor. Every preset ends in a dense layer to 10 classes.
Changing a preset's layers requires bumping PRESET_VERSION.
"""
from __future__ import annotations

import re
from typing import Any, Callable

from kron_fc import kfc
from kron_fc.linalg import Rng
from kron_fc.train import AbsTanh, Dense, Dropout, KfcLayer, Model, TrainConfig
from kron_fc.utils import ArgumentError


PRESET_VERSION = 1
MNIST_SIDE = 28
N_CLASSES = 10
CUT_WIDTH = LOWRANK_WIDTH = 96


def input_shape(config: TrainConfig) -> tuple[int, int, int]:
    if MNIST_SIDE % config.patch:
        raise ArgumentError(f"patch={config.patch} does not divide {MNIST_SIDE}")
    side = MNIST_SIDE // config.patch
    return (config.patch**2, side, side)


def _head(width: int, config: TrainConfig, rng: Rng) -> list[tuple[str, Any]]:
    return [
        ("act1", AbsTanh()),
        ("drop1", Dropout(config.dropout_keep)),
        ("fc2", Dense.init(width, N_CLASSES, rng)),
    ]


def _out_factors(config: TrainConfig) -> list[int]:
    outs = [config.k1, config.k2]
    if config.formulation == "I":
        if config.k3 is None:
            raise ArgumentError("formulation I needs k3")
        outs.append(config.k3)
    return outs


GROUP_TOKEN = re.compile(r"\s*(I|II|III|IV):(\d+(?:x\d+){1,2})(?:@(\d+))?\s*")


def parse_groups(text: str) -> list[tuple[str, list[int], int]]:
    """'II:64x4@1,III:128x2@1' -> [("II", [64, 4], 1), ("III", [128, 2], 1)]."""
    groups = []
    for token in text.split(","):
        match = GROUP_TOKEN.fullmatch(token)
        if match is None:
            raise ArgumentError(
                f"bad group {token!r}, expected TAG:K1xK2[xK3][@rank] with TAG one "
                f"of I, II, III, IV"
            )
        tag, outs, rank = match.groups()
        groups.append((tag, [int(k) for k in outs.split("x")], int(rank or 1)))
    return groups


def mnist_mlp_baseline(config: TrainConfig, rng: Rng) -> Model:
    chans, height, width = input_shape(config)
    fc1 = Dense.init(chans * height * width, config.hidden, rng)
    layers = [("fc1", fc1)] + _head(config.hidden, config, rng)
    return Model(layers, (chans, height, width))


def mnist_mlp_kfc2(config: TrainConfig, rng: Rng) -> Model:
    """Baseline with fc1 replaced by a single-formulation KFC layer (II by default,
    K1=64, K2=4).
    """
    shape = input_shape(config)
    if config.formulation == "KFCM":
        return mnist_mlp_kfcm(config, rng)
    spec = kfc.make_spec_formulation(
        config.formulation, (*shape, config.hidden), _out_factors(config), config.rank
    )
    layers = [("fc1", KfcLayer.init(spec, rng))] + _head(config.hidden, config, rng)
    return Model(layers, shape)


def mnist_mlp_kfc_combined(config: TrainConfig, rng: Rng) -> Model:
    """fc1 as the sum of formulations II (64, 4), III (128, 2) and IV (128, 2), or
    the groups given by `config.groups`.
    """
    shape = input_shape(config)
    groups = (
        parse_groups(config.groups)
        if config.groups
        else [
            ("II", [64, 4], config.rank),
            ("III", [128, 2], config.rank),
            ("IV", [128, 2], config.rank),
        ]
    )
    spec = kfc.make_spec_combined((*shape, config.hidden), groups)
    layers = [("fc1", KfcLayer.init(spec, rng))] + _head(config.hidden, config, rng)
    return Model(layers, shape)


def mnist_mlp_kfcm(config: TrainConfig, rng: Rng) -> Model:
    """fc1 as KFCM on the flattened input: 784 = 28*28 inputs, 256 = 16*16 outputs."""
    shape = input_shape(config)
    spec = kfc.make_spec_kfcm(
        shape[0] * shape[1] * shape[2], config.hidden, config.c1, None, config.rank
    )
    layers = [("fc1", KfcLayer.init(spec, rng))] + _head(config.hidden, config, rng)
    return Model(layers, shape)


def mnist_mlp_cut96(config: TrainConfig, rng: Rng) -> Model:
    chans, height, width = input_shape(config)
    fc1 = Dense.init(chans * height * width, CUT_WIDTH, rng)
    return Model([("fc1", fc1)] + _head(CUT_WIDTH, config, rng), (chans, height, width))


def mnist_mlp_lowrank96(config: TrainConfig, rng: Rng) -> Model:
    """fc1 split into two dense layers (784 -> 96 without activation, 96 -> 256)."""
    chans, height, width = input_shape(config)
    layers = [
        ("fc1a", Dense.init(chans * height * width, LOWRANK_WIDTH, rng)),
        ("fc1b", Dense.init(LOWRANK_WIDTH, config.hidden, rng)),
    ]
    return Model(layers + _head(config.hidden, config, rng), (chans, height, width))


PRESETS: dict[str, Callable[[TrainConfig, Rng], Model]] = {
    "mnist-mlp-baseline": mnist_mlp_baseline,
    "mnist-mlp-kfc2": mnist_mlp_kfc2,
    "mnist-mlp-kfc-combined": mnist_mlp_kfc_combined,
    "mnist-mlp-kfcm": mnist_mlp_kfcm,
    "mnist-mlp-cut96": mnist_mlp_cut96,
    "mnist-mlp-lowrank96": mnist_mlp_lowrank96,
}


def build_model(config: TrainConfig, rng: Rng | None = None) -> Model:
    """Instantiate the preset named by `config.model`, initialized from `rng`
    (default Rng(config.seed)).
    """
    if config.model not in PRESETS:
        valid = ", ".join(PRESETS)
        raise ArgumentError(
            f"unknown model preset {config.model!r}, valid presets: {valid}"
        )
    return PRESETS[config.model](config, rng or Rng(config.seed))
