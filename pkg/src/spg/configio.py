"""INI run configuration.

Sections [network], [training], [guidance], and [data] override the built-in
defaults field by field. Unknown sections or keys are errors, not warnings:
a typo must never silently fall back to a default.

    [network]
    input_hw = 64x64
    stem_blocks = 32d,32d     ; channels, trailing d halves resolution
    share_b_layers = true

    [training]
    epochs = 4
    base_lr = 0.001

    [guidance]
    seed_lo = 0.1
    seed_hi = 0.7
    flat_seeds = false

    [data]
    image_hw = 64x64
    train = 2000
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, replace

from spg.core import DataFormatError, Thresholds
from spg.data import DatasetSpec
from spg.guidance import GuidanceConfig
from spg.model import NetworkConfig
from spg.training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig
    training: TrainConfig
    data: DatasetSpec


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_hw(text: str) -> tuple[int, int]:
    parts = text.lower().replace("x", " ").replace(",", " ").split()
    if len(parts) != 2:
        raise ValueError(f"expected HxW, got {text!r}")
    return int(parts[0]), int(parts[1])


def _parse_stem(text: str) -> tuple[tuple[int, bool], ...]:
    blocks = []
    for piece in text.split(","):
        piece = piece.strip()
        if not piece:
            raise ValueError(f"empty stem block in {text!r}")
        down = piece.endswith("d")
        channels = int(piece[:-1] if down else piece)
        blocks.append((channels, down))
    return tuple(blocks)


_NETWORK_KEYS = {
    "input_hw": _parse_hw,
    "num_classes": int,
    "stem_blocks": _parse_stem,
    "a1_channels": int,
    "a2_channels": int,
    "a3_channels": int,
    "a1_downsample": _parse_bool,
    "a2_downsample": _parse_bool,
    "a3_downsample": _parse_bool,
    "b_adapter_filters": int,
    "b_shared_filters": int,
    "c_head_filters": int,
    "share_b_layers": _parse_bool,
    "enable_spg": _parse_bool,
    "enable_c": _parse_bool,
    "init_seed": int,
}

_TRAINING_KEYS = {
    "epochs": int,
    "batch_size": int,
    "base_lr": float,
    "new_layer_lr": float,
    "lr_decay_factor": float,
    "momentum": float,
    "weight_decay": float,
    "aux_loss_weight": float,
    "seed": int,
    "checkpoint_path": str,
    "log_path": str,
}

_GUIDANCE_KEYS = {
    "seed_lo": float,
    "seed_hi": float,
    "stage_lo": float,
    "stage_hi": float,
    "fuse_lo": float,
    "fuse_hi": float,
    "flat_seeds": _parse_bool,
}

_DATA_KEYS = {
    "image_hw": _parse_hw,
    "num_classes": int,
    "train": int,
    "val": int,
    "test": int,
    "seed": int,
}

_SECTIONS = {
    "network": _NETWORK_KEYS,
    "training": _TRAINING_KEYS,
    "guidance": _GUIDANCE_KEYS,
    "data": _DATA_KEYS,
}


def _section_values(parser, path, section: str) -> dict:
    keys = _SECTIONS[section]
    values = {}
    if not parser.has_section(section):
        return values
    for key, raw in parser.items(section):
        if key not in keys:
            raise DataFormatError(f"{path}: unknown key {key!r} in [{section}]")
        try:
            values[key] = keys[key](raw)
        except ValueError as exc:
            raise DataFormatError(f"{path}: bad value for {key!r} in [{section}]: {exc}") from None
    return values


def read_config(path) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise DataFormatError(f"{path}: file not found") from None
    except configparser.Error as exc:
        raise DataFormatError(f"{path}: {exc}") from None
    for section in parser.sections():
        if section not in _SECTIONS:
            raise DataFormatError(f"{path}: unknown section [{section}]")

    guidance = GuidanceConfig()
    g = _section_values(parser, path, "guidance")
    try:
        if "seed_lo" in g or "seed_hi" in g:
            guidance = replace(
                guidance,
                seed_thresholds=Thresholds(
                    g.get("seed_lo", guidance.seed_thresholds.lo),
                    g.get("seed_hi", guidance.seed_thresholds.hi),
                ),
            )
        if "stage_lo" in g or "stage_hi" in g:
            guidance = replace(
                guidance,
                stage_thresholds=Thresholds(
                    g.get("stage_lo", guidance.stage_thresholds.lo),
                    g.get("stage_hi", guidance.stage_thresholds.hi),
                ),
            )
        if "fuse_lo" in g or "fuse_hi" in g:
            guidance = replace(
                guidance,
                fuse_thresholds=Thresholds(
                    g.get("fuse_lo", guidance.fuse_thresholds.lo),
                    g.get("fuse_hi", guidance.fuse_thresholds.hi),
                ),
            )
        if "flat_seeds" in g:
            guidance = replace(guidance, flat_seeds=g["flat_seeds"])

        network = replace(NetworkConfig(), **_section_values(parser, path, "network"))
        training = replace(
            TrainConfig(guidance=guidance), **_section_values(parser, path, "training")
        )
        data = replace(DatasetSpec(), **_section_values(parser, path, "data"))
        network.validate()
        training.validate()
        data.validate()
    except ValueError as exc:
        if isinstance(exc, DataFormatError):
            raise
        raise DataFormatError(f"{path}: {exc}") from None
    return RunConfig(network=network, training=training, data=data)
