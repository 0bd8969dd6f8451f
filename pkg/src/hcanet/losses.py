"""Heatmap regression loss, disc prototypes, and the geometric skeleton loss.

All operations are differentiable torch expressions; dtype follows the inputs
so the same code runs in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .errors import ConfigurationError, InputError
from .heatmap_codec import HeatmapStack, KeypointSet, ProbabilityMap, softmax_probability

PROTOTYPE_MODES = ("expectation", "stochastic")

# How far a channel sum may drift from 1 before the map counts as unnormalized.
# Wider than the ~1e-7 float32 softmax drift, far tighter than any real misuse.
_PROB_SUM_TOL = 1e-5

AlphaLike = Union[float, torch.Tensor]


@dataclass
class LossConfig:
    """Weights and sampling choices for the combined training objective."""

    lambda_sk: float = 2e-4
    beta: float = 0.75
    alpha: float = 0.8
    samples: int = 10
    prototype_mode: str = "expectation"
    alpha_learnable: bool = False

    def __post_init__(self):
        if self.lambda_sk < 0:
            raise ConfigurationError(f"lambda_sk must be >= 0, got {self.lambda_sk}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigurationError(f"beta must be in [0, 1], got {self.beta}")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.samples < 1:
            raise ConfigurationError(f"samples must be >= 1, got {self.samples}")
        if self.prototype_mode not in PROTOTYPE_MODES:
            raise ConfigurationError(
                f"prototype_mode must be one of {PROTOTYPE_MODES}, got {self.prototype_mode!r}"
            )


@dataclass
class Prototype:
    """Per-disc 2D locations extracted from a probability map.

    ``coords`` is a (V, 2) tensor of (row, col) heatmap positions that stays on
    the autograd graph; ``valid`` marks discs that carry usable coordinates.
    """

    coords: torch.Tensor
    valid: np.ndarray

    def __post_init__(self):
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise InputError(f"coords must be (V, 2), got {tuple(self.coords.shape)}")
        if self.coords.shape[0] != self.valid.shape[0]:
            raise InputError("coords and valid lengths differ")

    def __len__(self) -> int:
        return self.coords.shape[0]


def _euclidean(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # vector_norm has a zero (not NaN) subgradient when the points coincide
    return torch.linalg.vector_norm(a - b)


def mse_loss(
    prediction: HeatmapStack,
    target: HeatmapStack,
    visible: Sequence[bool],
) -> torch.Tensor:
    """Mean squared error over all V x M entries, with invisible channels masked.

    Masked channels contribute zero to the sum; the 1/(V*M) normalization is
    unchanged by masking.
    """
    pred = prediction.values
    tgt = target.values
    if pred.shape != tgt.shape:
        raise InputError(f"shape mismatch: prediction {tuple(pred.shape)} vs target {tuple(tgt.shape)}")
    vis = np.asarray(visible, dtype=bool).reshape(-1)
    if vis.shape[0] != pred.shape[0]:
        raise InputError(f"visibility length {vis.shape[0]} != channel count {pred.shape[0]}")
    mask = torch.as_tensor(vis, dtype=pred.dtype).view(-1, 1, 1)
    v, h, w = pred.shape
    return (((tgt - pred) ** 2) * mask).sum() / (v * h * w)


def prototype_from_map(
    prob: ProbabilityMap,
    config: LossConfig,
    rng: Optional[torch.Generator] = None,
) -> Prototype:
    """Extract one (row, col) location per channel from a probability map.

    Expectation mode returns the distribution mean (soft-argmax), which is the
    infinite-sample limit of the stochastic sampler and fully differentiable.
    Stochastic mode averages ``config.samples`` multinomial pixel draws; each
    drawn coordinate is scaled by p/detach(p) so its value is unchanged but
    gradient flows through the probability of the drawn pixel only.
    """
    p = prob.values
    v, h, w = p.shape
    sums = p.double().sum(dim=(-2, -1))
    if (sums - 1.0).abs().max().item() > _PROB_SUM_TOL:
        raise InputError("probability map channels do not sum to 1")

    rows = torch.arange(h, dtype=p.dtype).view(h, 1)
    cols = torch.arange(w, dtype=p.dtype).view(1, w)
    if config.prototype_mode == "expectation":
        er = (p * rows).sum(dim=(-2, -1))
        ec = (p * cols).sum(dim=(-2, -1))
        coords = torch.stack([er, ec], dim=1)
    else:
        flat = p.reshape(v, h * w)
        idx = torch.multinomial(flat.detach(), config.samples, replacement=True, generator=rng)
        weight = flat.gather(1, idx)
        ratio = weight / weight.detach()
        draw_rows = (idx // w).to(p.dtype)
        draw_cols = (idx % w).to(p.dtype)
        coords = torch.stack(
            [(draw_rows * ratio).mean(dim=1), (draw_cols * ratio).mean(dim=1)], dim=1
        )
    return Prototype(coords, np.ones(v, dtype=bool))


def pairwise_distance_loss(
    pred: Prototype,
    gt: Prototype,
    alpha: AlphaLike,
) -> torch.Tensor:
    """Penalize changes in inter-disc distances, down-weighting far-apart pairs.

    Over the C jointly-valid discs (kept in order and reindexed 1..C):
    sum over pairs c < k of alpha^(k-c) * (||V_c - V_k|| - ||G_c - G_k||)^2.
    Pairs containing an invalid disc are skipped.
    """
    if len(pred) != len(gt):
        raise InputError(f"prototype sizes differ: {len(pred)} vs {len(gt)}")
    joint = pred.valid & gt.valid
    idx = np.flatnonzero(joint)
    total = pred.coords.new_zeros(())
    if idx.size < 2:
        return total
    pc = pred.coords
    gc = gt.coords
    for a_pos in range(idx.size - 1):
        for b_pos in range(a_pos + 1, idx.size):
            i, k = int(idx[a_pos]), int(idx[b_pos])
            dp = _euclidean(pc[i], pc[k])
            dg = _euclidean(gc[i], gc[k])
            total = total + alpha ** (b_pos - a_pos) * (dp - dg) ** 2
    return total


def _gt_prototype(gt_keypoints: KeypointSet, like: torch.Tensor) -> Prototype:
    coords = torch.as_tensor(gt_keypoints.coords, dtype=like.dtype)
    return Prototype(coords, gt_keypoints.visible.copy())


def skeleton_loss(
    intermediates: Sequence[HeatmapStack],
    gt_keypoints: KeypointSet,
    config: LossConfig,
    rng: Optional[torch.Generator] = None,
    alpha: Optional[AlphaLike] = None,
) -> torch.Tensor:
    """Geometric supervision over every block output.

    For each block: softmax the maps, take prototypes, and combine the mean
    prototype-to-truth distance with the pairwise-distance term as
    beta * L_id + (1 - beta) * L_pd, summed over blocks. ``gt_keypoints`` must
    already be in heatmap-resolution pixels.
    """
    if len(intermediates) == 0:
        raise InputError("skeleton loss needs at least one block output")
    alpha_eff: AlphaLike = config.alpha if alpha is None else alpha
    first = intermediates[0].values
    gt_proto = _gt_prototype(gt_keypoints, first)
    total = first.new_zeros(())
    for stack in intermediates:
        if stack.num_channels != len(gt_keypoints):
            raise InputError(
                f"stack has {stack.num_channels} channels for {len(gt_keypoints)} keypoints"
            )
        proto = prototype_from_map(softmax_probability(stack), config, rng=rng)
        valid = np.flatnonzero(proto.valid & gt_proto.valid)
        if valid.size > 0:
            dists = [_euclidean(proto.coords[int(i)], gt_proto.coords[int(i)]) for i in valid]
            l_id = torch.stack(dists).mean()
        else:
            l_id = first.new_zeros(())
        l_pd = pairwise_distance_loss(proto, gt_proto, alpha_eff)
        total = total + config.beta * l_id + (1.0 - config.beta) * l_pd
    return total


def total_loss_terms(
    prediction,
    target: HeatmapStack,
    gt: KeypointSet,
    config: LossConfig,
    rng: Optional[torch.Generator] = None,
    alpha: Optional[AlphaLike] = None,
) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
    """Return (heatmap term, skeleton term); the skeleton term is None when
    lambda_sk is zero and would not be computed."""
    mse = mse_loss(prediction.fused, target, gt.visible)
    if config.lambda_sk == 0.0:
        return mse, None
    sk = skeleton_loss(prediction.intermediates, gt, config, rng=rng, alpha=alpha)
    return mse, sk


def total_loss(
    prediction,
    target: HeatmapStack,
    gt: KeypointSet,
    config: LossConfig,
    rng: Optional[torch.Generator] = None,
    alpha: Optional[AlphaLike] = None,
) -> torch.Tensor:
    """Combined objective: heatmap MSE plus lambda_sk times the skeleton loss."""
    mse, sk = total_loss_terms(prediction, target, gt, config, rng=rng, alpha=alpha)
    if sk is None:
        return mse
    return mse + config.lambda_sk * sk
