"""Self-generated guidance: tri-state seed masks, stagewise supervision, fusion, masked pixel loss.

Mask construction works on plain numpy maps and is never differentiated through;
only the masked pixel loss touches autograd. Supervision targets are therefore
constants with respect to optimization by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from spg.core import (
    BACKGROUND,
    FOREGROUND,
    IGNORED,
    Thresholds,
    _require_map,
    normalize_map,
    resize_bilinear,
    resize_nearest,
)

EPS = 1e-7

# Double thresholds applied to the attention map (seeds), to the renormalized
# first-stage branch output (stage), and to the averaged branch outputs (fuse).
DEFAULT_SEED_THRESHOLDS = Thresholds(0.1, 0.7)
DEFAULT_STAGE_THRESHOLDS = Thresholds(0.05, 0.5)
DEFAULT_FUSE_THRESHOLDS = Thresholds(0.05, 0.5)


@dataclass(frozen=True)
class GuidanceConfig:
    seed_thresholds: Thresholds = DEFAULT_SEED_THRESHOLDS
    stage_thresholds: Thresholds = DEFAULT_STAGE_THRESHOLDS
    fuse_thresholds: Thresholds = DEFAULT_FUSE_THRESHOLDS
    # Ablation: supervise both branches with the attention seed mask instead of
    # cascading the first branch's thresholded output into the second.
    flat_seeds: bool = False


@dataclass
class SupervisionSet:
    """Tri-state targets for the two guidance branches and the auxiliary head.

    m_a supervises the deeper branch (built from the attention map), m_b2
    supervises the shallower branch (built from the deeper branch's output),
    m_fuse supervises the auxiliary head (built from the averaged branch
    outputs). Each is already resized to its consumer's resolution.
    """

    m_a: np.ndarray
    m_b2: np.ndarray
    m_fuse: np.ndarray


def generate_seed_mask(map_: np.ndarray, t: Thresholds) -> np.ndarray:
    """Double-threshold a map in [0, 1] into {background, foreground, ignored}.

    Strict inequalities select the confident labels; values equal to either
    threshold fall into the closed ignore band.
    """
    m = _require_map(map_)
    if m.min() < 0.0 or m.max() > 1.0:
        raise ValueError("seed thresholding expects map values in [0, 1]")
    mask = np.full(m.shape, IGNORED, dtype=np.uint8)
    mask[m < t.lo] = BACKGROUND
    mask[m > t.hi] = FOREGROUND
    return mask


def fuse_guidance(f_b1: np.ndarray, f_b2: np.ndarray, t: Thresholds) -> np.ndarray:
    """Average the two branch outputs at the finer resolution and threshold the mean.

    f_b2 is resized bilinearly to f_b1's resolution first, so the result lives
    at f_b1's resolution.
    """
    a = _require_map(f_b1, "f_b1")
    b = _require_map(f_b2, "f_b2")
    b = resize_bilinear(b, *a.shape)
    return generate_seed_mask((a + b) / 2.0, t)


def masked_bce_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy over cells labeled 0 or 1; cells labeled 255 are ignored.

    The mean runs over the non-ignored cells only. Ignored cells contribute
    exactly zero gradient; if every cell is ignored the loss is zero with zero
    gradient. pred must hold probabilities in (0, 1) and match target's shape.
    """
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    valid = target != IGNORED
    if not bool(valid.any()):
        # Zero with an exactly-zero gradient, but still attached to the graph.
        return (pred * 0.0).sum()
    p = pred[valid]
    t = target[valid].to(pred.dtype)
    losses = -(t * torch.log(p + EPS) + (1.0 - t) * torch.log(1.0 - p + EPS))
    return losses.mean()


def build_supervision_set(
    attention: np.ndarray,
    f_b2: np.ndarray,
    f_b1: np.ndarray,
    t_seed: Thresholds = DEFAULT_SEED_THRESHOLDS,
    t_stage: Thresholds = DEFAULT_STAGE_THRESHOLDS,
    t_fuse: Thresholds = DEFAULT_FUSE_THRESHOLDS,
    *,
    c_hw: tuple[int, int] | None = None,
    flat_seeds: bool = False,
) -> SupervisionSet:
    """Run the stagewise supervision construction for one image.

    attention: normalized attention map for the image's class.
    f_b2, f_b1: current branch outputs (detached values in (0, 1)).
    c_hw: resolution of the auxiliary head's output; defaults to the fused
    mask's native (f_b1) resolution.

    The seed mask of the attention map supervises the deeper branch; that
    branch's renormalized output is thresholded again to supervise the
    shallower branch (unless flat_seeds, which reuses the attention seeds for
    both); the averaged branch outputs are thresholded into the fused target.
    """
    seed = generate_seed_mask(attention, t_seed)
    m_a = resize_nearest(seed, *np.asarray(f_b2).shape)
    b1_hw = np.asarray(f_b1).shape
    if flat_seeds:
        m_b2 = resize_nearest(seed, *b1_hw)
    else:
        m_b2 = resize_nearest(generate_seed_mask(normalize_map(f_b2), t_stage), *b1_hw)
    fused = fuse_guidance(f_b1, f_b2, t_fuse)
    if c_hw is not None:
        fused = resize_nearest(fused, *c_hw)
    return SupervisionSet(m_a=m_a, m_b2=m_b2, m_fuse=fused)
