"""Adaptive attention re-weighting.

Turns the per-position reconstruction gap between a normal sample and the
current clean estimate into positive attention weights that sum to the mask
area: positions the sampler has not yet filled with anomaly content get more
attention mass. Maps are recomputed every sampling step; each map caches its
own per-resolution downsamples.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .diffusion import ContractViolation


class DegenerateWeightMapWarning(UserWarning):
    """The weight map collapsed to all zeros (empty mask or exact match)."""


@dataclass
class AttentionWeightMap:
    """Nonnegative per-position weights at image resolution.

    status is "ok", "empty-mask" or "zero-distance"; the latter two mean the
    weights are identically zero. Resampled variants are cached per target
    resolution for the lifetime of this map (one sampling step).
    """

    weights: torch.Tensor          # [H, W], float64
    mask_area: float
    status: str = "ok"
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def resolution(self):
        return int(self.weights.shape[0]), int(self.weights.shape[1])

    def at_resolution(self, h: int, w: int) -> torch.Tensor:
        if (h, w) == self.resolution:
            return self.weights
        key = (h, w)
        if key not in self._cache:
            self._cache[key] = resample_weight_map(self.weights, (h, w))
        return self._cache[key]

    def flat(self, h: int, w: int, dtype=None) -> torch.Tensor:
        m = self.at_resolution(h, w).reshape(-1)
        return m.to(dtype) if dtype is not None else m


def _spatial(x: torch.Tensor) -> torch.Tensor:
    """Channel-sum of squares; accepts [H, W] or [C, H, W]."""
    if x.ndim == 2:
        return x * x
    if x.ndim == 3:
        return (x * x).sum(dim=0)
    raise ContractViolation("expected [H, W] or [C, H, W]")


def compute_weight_map(x0_hat: torch.Tensor, y: torch.Tensor, mask,
                       epsilon: float = 0.0) -> AttentionWeightMap:
    """Adaptive scaling softmax over per-position reconstruction gaps.

    d_p = ||m*y - m*x0_hat||^2 summed over channels; logits are 1/d_p where
    d_p > 0 and -inf elsewhere; weights = ||m||_1 * softmax(logits) over all
    positions. Positions outside the mask get exactly 0. epsilon > 0 floors
    the distance for in-mask positions (default off: exact zero gaps get
    zero weight, faithful to the literal f).
    """
    if torch.is_tensor(mask):
        m = mask.detach().to(torch.float64)
    else:
        m = torch.as_tensor(np.asarray(mask), dtype=torch.float64)
    if m.ndim != 2:
        raise ContractViolation("mask must be a 2-d grid")
    if not bool(torch.all((m == 0) | (m == 1))):
        raise ContractViolation("mask must be binary")
    x0_hat = x0_hat.detach().to(torch.float64)
    y = y.detach().to(torch.float64)
    if x0_hat.shape != y.shape:
        raise ContractViolation("x0_hat and y must share shape")
    if x0_hat.shape[-2:] != m.shape:
        raise ContractViolation("mask resolution must match the images")

    area = float(m.sum())
    if area == 0:
        warnings.warn("weight map requested for an empty mask", DegenerateWeightMapWarning)
        return AttentionWeightMap(torch.zeros_like(m), 0.0, status="empty-mask")

    diff = _spatial(m * y - m * x0_hat)                    # [H, W]
    inside = m > 0
    if epsilon > 0:
        live = inside
        denom = diff + epsilon
    else:
        live = inside & (diff > 0)
        denom = diff
    if not bool(live.any()):
        warnings.warn("all in-mask differences are exactly zero", DegenerateWeightMapWarning)
        return AttentionWeightMap(torch.zeros_like(m), area, status="zero-distance")

    logits = torch.full_like(diff, -np.inf)
    logits[live] = 1.0 / denom[live]

    top = logits.max()
    if bool(torch.isinf(top)):
        # 1/d overflowed; split the mass evenly over the overflowing positions
        hot = torch.isinf(logits) & (logits > 0)
        weights = torch.zeros_like(diff)
        weights[hot] = area / float(hot.sum())
    else:
        stable = torch.where(torch.isinf(logits), logits, logits - top)
        expd = torch.exp(stable)
        weights = area * expd / expd.sum()
    return AttentionWeightMap(weights, area, status="ok")


def resample_weight_map(weights, target_resolution) -> torch.Tensor:
    """Area-average downsampling with sum-preserving rescale.

    The target must divide the source resolution; upsampling is rejected.
    Each target cell becomes the sum of its source block, so the total mass
    is carried through unchanged.
    """
    if isinstance(weights, AttentionWeightMap):
        weights = weights.weights
    if weights.ndim != 2:
        raise ContractViolation("weight map must be 2-d")
    h, w = weights.shape
    th, tw = (int(v) for v in target_resolution)
    if th < 1 or tw < 1:
        raise ContractViolation("target resolution must be positive")
    if th > h or tw > w:
        raise ContractViolation("upsampling weight maps is not supported")
    if h % th or w % tw:
        raise ContractViolation("target resolution must divide the source resolution")
    if (th, tw) == (h, w):
        return weights
    fh, fw = h // th, w // tw
    pooled = weights.reshape(th, fh, tw, fw).mean(dim=(1, 3))
    return pooled * (fh * fw)


def reweight_attention(attn: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Multiply attention rows by per-position weights.

    attn is [..., P, K]; weights is [P] or [..., P] and broadcasts across
    the token axis. No renormalization afterward.
    """
    if weights.ndim < 1 or weights.shape[-1] != attn.shape[-2]:
        raise ContractViolation(
            f"weight length {tuple(weights.shape)} does not match positions {attn.shape[-2]}")
    return attn * weights.to(attn.dtype).unsqueeze(-1)


class AdaptiveReweightHook:
    """Per-step attention hook carrying the current weight map.

    The sampling loop replaces `map` each step; attention layers call the
    hook with their post-softmax map and spatial shape.
    """

    def __init__(self, weight_map: AttentionWeightMap | None = None):
        self.map = weight_map

    def __call__(self, attn: torch.Tensor, hw) -> torch.Tensor:
        if self.map is None:
            return attn
        h, w = hw
        return reweight_attention(attn, self.map.flat(h, w, dtype=attn.dtype))


def ones_hook():
    """Hook multiplying every attention row by exactly 1 (neutrality checks)."""

    def hook(attn, hw):
        h, w = hw
        return reweight_attention(attn, torch.ones(h * w, dtype=attn.dtype))

    return hook


def save_weight_map_image(weight_map: AttentionWeightMap, path) -> None:
    """Dump a weight map as a lossless 16-bit grayscale PNG (max-scaled)."""
    from PIL import Image

    w = weight_map.weights.numpy()
    top = w.max()
    scaled = (w / top * 65535.0).round().astype(np.uint16) if top > 0 else np.zeros_like(w, np.uint16)
    Image.fromarray(scaled).save(path)
