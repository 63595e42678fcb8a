"""The guidance network graph: stem extractor, classifier trunk with per-class
score maps, two guidance branches with optionally shared layers, and an
auxiliary pixel head.

The trunk is a plain CNN: stem blocks, then blocks A1..A3, then a 1x1
convolution A4 with one filter per class whose channels are the per-class
attention maps. Logits are the global average pool of A4. Branch one taps A1,
branch two taps A2, the auxiliary head taps A3; each ends in a sigmoid and
emits a single-channel map at its tap's resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from spg.core import normalize_map


@dataclass(frozen=True)
class NetworkConfig:
    input_hw: tuple[int, int] = (64, 64)
    num_classes: int = 4
    # (filters, downsample) per stem convolution; downsample = stride 2.
    stem_blocks: tuple[tuple[int, bool], ...] = ((32, True), (32, True))
    a1_channels: int = 64
    a2_channels: int = 128
    a3_channels: int = 256
    a1_downsample: bool = False
    a2_downsample: bool = True
    a3_downsample: bool = False
    b_adapter_filters: int = 128
    b_shared_filters: int = 128
    c_head_filters: int = 128
    share_b_layers: bool = True
    enable_spg: bool = True
    enable_c: bool = True
    init_seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        counts = [f for f, _ in self.stem_blocks] + [
            self.a1_channels, self.a2_channels, self.a3_channels,
            self.b_adapter_filters, self.b_shared_filters, self.c_head_filters,
        ]
        if any(c < 1 for c in counts):
            raise ValueError("all filter counts must be >= 1")
        h, w = self.tap_sizes()["A4"]
        if h < 4 or w < 4:
            raise ValueError(f"spatial size at the class map must be >= 4x4, got {h}x{w}")

    def tap_sizes(self) -> dict[str, tuple[int, int]]:
        """Spatial resolution at each tap, derived from the downsample plan."""

        def step(hw, down):
            if not down:
                return hw
            h = (hw[0] - 1) // 2 + 1
            w = (hw[1] - 1) // 2 + 1
            if h < 1 or w < 1:
                raise ValueError("downsampling collapsed the spatial size")
            return (h, w)

        hw = self.input_hw
        for _, down in self.stem_blocks:
            hw = step(hw, down)
        sizes = {"stem": hw}
        hw = step(hw, self.a1_downsample)
        sizes["A1"] = hw
        hw = step(hw, self.a2_downsample)
        sizes["A2"] = hw
        hw = step(hw, self.a3_downsample)
        sizes["A3"] = hw
        sizes["A4"] = hw
        return sizes


@dataclass
class NetworkOutputs:
    logits: torch.Tensor          # (N, C)
    class_probs: torch.Tensor     # (N, C), rows sum to 1
    f_a4: torch.Tensor            # (N, C, h, w) per-class score maps
    f_b1: torch.Tensor | None     # (N, h1, w1) in (0, 1)
    f_b2: torch.Tensor | None     # (N, h2, w2) in (0, 1)
    f_c: torch.Tensor | None      # (N, hc, wc) in (0, 1)


def _conv(cin, cout, kernel, stride=1):
    return nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2)


class SpgNetwork(nn.Module):
    def __init__(self, config: NetworkConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        config.validate()
        self.config = config

        stem = []
        cin = 3
        for filters, down in config.stem_blocks:
            stem.append(_conv(cin, filters, 3, stride=2 if down else 1))
            cin = filters
        self.stem = nn.ModuleList(stem)

        self.a1 = _conv(cin, config.a1_channels, 3, 2 if config.a1_downsample else 1)
        self.a2 = _conv(config.a1_channels, config.a2_channels, 3, 2 if config.a2_downsample else 1)
        self.a3 = _conv(config.a2_channels, config.a3_channels, 3, 2 if config.a3_downsample else 1)
        self.a4 = _conv(config.a3_channels, config.num_classes, 1)

        if config.enable_spg:
            self.b1_adapter = _conv(config.a1_channels, config.b_adapter_filters, 3)
            self.b2_adapter = _conv(config.a2_channels, config.b_adapter_filters, 3)
            if config.share_b_layers:
                shared = _conv(config.b_adapter_filters, config.b_shared_filters, 3)
                out = _conv(config.b_shared_filters, 1, 1)
                self.b1_mid, self.b2_mid = shared, shared
                self.b1_out, self.b2_out = out, out
            else:
                self.b1_mid = _conv(config.b_adapter_filters, config.b_shared_filters, 3)
                self.b1_out = _conv(config.b_shared_filters, 1, 1)
                self.b2_mid = _conv(config.b_adapter_filters, config.b_shared_filters, 3)
                self.b2_out = _conv(config.b_shared_filters, 1, 1)
            if config.enable_c:
                self.c_mid = _conv(config.a3_channels, config.c_head_filters, 3)
                self.c_out = _conv(config.c_head_filters, 1, 1)

        self._reset_parameters(config.init_seed)
        if dtype != torch.float32:
            self.to(dtype)

    def _reset_parameters(self, seed: int) -> None:
        # He fan-in init drawn in a fixed parameter order; biases zero.
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, param in sorted(self.named_parameters(), key=lambda kv: kv[0]):
                if name.endswith("bias"):
                    param.zero_()
                else:
                    fan_in = param.shape[1] * param.shape[2] * param.shape[3]
                    std = math.sqrt(2.0 / fan_in)
                    param.copy_(torch.randn(param.shape, generator=gen, dtype=param.dtype) * std)

    @property
    def has_spg(self) -> bool:
        return self.config.enable_spg

    @property
    def has_c(self) -> bool:
        return self.config.enable_spg and self.config.enable_c

    def base_parameters(self):
        """Trunk parameters: stem and A1..A3."""
        mods = list(self.stem) + [self.a1, self.a2, self.a3]
        for m in mods:
            yield from m.parameters()

    def new_parameters(self):
        """Freshly-added layers: the class map A4 and the guidance heads."""
        mods = [self.a4]
        if self.has_spg:
            mods += [self.b1_adapter, self.b2_adapter]
            seen = set()
            for m in (self.b1_mid, self.b1_out, self.b2_mid, self.b2_out):
                if id(m) not in seen:
                    seen.add(id(m))
                    mods.append(m)
            if self.has_c:
                mods += [self.c_mid, self.c_out]
        for m in mods:
            yield from m.parameters()

    def forward(self, images: torch.Tensor) -> NetworkOutputs:
        expected_hw = self.config.input_hw
        if images.ndim != 4 or images.shape[1] != 3 or tuple(images.shape[2:]) != expected_hw:
            raise ValueError(
                f"expected images of shape (N, 3, {expected_hw[0]}, {expected_hw[1]}), "
                f"got {tuple(images.shape)}"
            )
        # Inputs are [0, 1] pixels; center them so early layers start balanced.
        x = images - 0.5
        for conv in self.stem:
            x = F.relu(conv(x))
        f_a1 = F.relu(self.a1(x))
        f_a2 = F.relu(self.a2(f_a1))
        f_a3 = F.relu(self.a3(f_a2))
        f_a4 = self.a4(f_a3)
        logits = f_a4.mean(dim=(2, 3))
        probs = F.softmax(logits, dim=1)

        f_b1 = f_b2 = f_c = None
        if self.has_spg:
            h1 = F.relu(self.b1_adapter(f_a1))
            f_b1 = torch.sigmoid(self.b1_out(F.relu(self.b1_mid(h1)))).squeeze(1)
            h2 = F.relu(self.b2_adapter(f_a2))
            f_b2 = torch.sigmoid(self.b2_out(F.relu(self.b2_mid(h2)))).squeeze(1)
            if self.has_c:
                f_c = torch.sigmoid(self.c_out(F.relu(self.c_mid(f_a3)))).squeeze(1)
        return NetworkOutputs(
            logits=logits, class_probs=probs, f_a4=f_a4, f_b1=f_b1, f_b2=f_b2, f_c=f_c
        )


def build_network(config: NetworkConfig, dtype: torch.dtype = torch.float32) -> SpgNetwork:
    return SpgNetwork(config, dtype=dtype)


def extract_attention(f_a4, class_idx: int) -> np.ndarray:
    """Pull one class channel out of the per-class score maps and normalize it.

    f_a4 is a single image's (C, h, w) stack, torch or numpy.
    """
    if isinstance(f_a4, torch.Tensor):
        f_a4 = f_a4.detach().cpu().numpy()
    f_a4 = np.asarray(f_a4)
    if f_a4.ndim != 3:
        raise ValueError(f"expected (C, h, w) score maps, got shape {f_a4.shape}")
    if not 0 <= class_idx < f_a4.shape[0]:
        raise ValueError(f"class index {class_idx} out of range for {f_a4.shape[0]} classes")
    return normalize_map(f_a4[class_idx].astype(np.float64))


def predict_topk(logits, k: int) -> list[int]:
    """Indices of the k best classes, descending score, ties by ascending index."""
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    scores = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not 1 <= k <= scores.size:
        raise ValueError(f"k must be in [1, {scores.size}], got {k}")
    order = np.argsort(-scores, kind="stable")
    return [int(i) for i in order[:k]]
