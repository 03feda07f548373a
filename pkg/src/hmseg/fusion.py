"""Combining per-scale predictions into one output map.

The main strategy folds scales pairwise from the lowest upward: the running
result is multiplied by the lower scale's attention, upsampled, and added to
the next scale's logits weighted by (1 - upsampled attention). The product
is formed *before* upsampling (resampling does not commute with products,
so the order matters). Baselines: explicitly weighted fusion, plain
averaging, and per-channel max.

Every weighted mode also reports per-scale effective weights: nonnegative
maps summing to one at every pixel, obtained by pushing per-scale indicator
inputs through the same (linear in the logits) recursion.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import UsageError


@dataclass(frozen=True)
class ScaleSet:
    """Strictly increasing inference scales; output lives at the resolution
    of the scale at target_index (default: the largest)."""
    scales: tuple
    target_index: int = -1

    def __post_init__(self):
        s = tuple(float(x) for x in self.scales)
        if not s:
            raise UsageError("at least one scale required")
        if any(x <= 0 for x in s):
            raise UsageError(f"scales must be positive: {s}")
        if any(b <= a for a, b in zip(s, s[1:])):
            raise UsageError(f"scales must be strictly increasing and distinct: {s}")
        object.__setattr__(self, "scales", s)
        idx = self.target_index
        if idx < 0:
            idx += len(s)
        if not 0 <= idx < len(s):
            raise UsageError(f"target_index {self.target_index} out of range")
        object.__setattr__(self, "target_index", idx)

    @staticmethod
    def parse(text):
        return ScaleSet(tuple(float(t) for t in text.split(",") if t.strip()))


@dataclass
class FusionResult:
    fused: ad.Tensor                       # [num_classes, H, W] at target resolution
    effective_weights: Optional[List[np.ndarray]] = None  # one [1,H,W] map per scale


def _check_ascending(forwards):
    if not forwards:
        raise UsageError("no scales to fuse")
    scales = [f.scale for f in forwards]
    if any(b <= a for a, b in zip(scales, scales[1:])):
        raise UsageError(f"forwards must be ordered by strictly ascending scale, got {scales}")


def _ones_like_map(t):
    return ad.as_tensor(np.ones((1,) + tuple(t.shape[1:]), dtype=t.data.dtype))


def _fold(running, lower_attention, higher_logits, hw):
    """One chain step: U(running * a) + (1 - U(a)) * higher."""
    prod = ad.mul(running, lower_attention)
    up = ad.bilinear_resize(prod, *hw)
    a_up = ad.bilinear_resize(lower_attention, *hw)
    keep = ad.sub(_ones_like_map(a_up), a_up)
    return ad.add(up, ad.mul(higher_logits, keep))


def fuse_pair(lower, higher):
    """Two-scale fusion; the attention comes from the lower scale's pass."""
    if lower.scale >= higher.scale:
        raise UsageError(f"fuse_pair wants lower.scale < higher.scale, "
                         f"got {lower.scale} vs {higher.scale}")
    if lower.attention is None:
        raise UsageError("lower scale carries no attention map")
    return _fold(lower.logits, lower.attention, higher.logits, higher.hw)


def _chain(logit_maps, attentions, hws):
    out = logit_maps[0]
    for i in range(1, len(logit_maps)):
        out = _fold(out, attentions[i - 1], logit_maps[i], hws[i])
    return out


def fuse_hierarchical(forwards):
    """Fold scales lowest to highest; report per-scale effective weights."""
    _check_ascending(forwards)
    if any(f.attention is None for f in forwards[:-1]):
        raise UsageError("hierarchical fusion needs attention for all but the largest scale")
    logit_maps = [f.logits for f in forwards]
    attentions = [f.attention for f in forwards[:-1]]
    hws = [f.hw for f in forwards]
    fused = _chain(logit_maps, attentions, hws)

    weights = []
    with ad.no_grad():
        for i in range(len(forwards)):
            indicators = [
                ad.as_tensor(np.full((1,) + hws[j], 1.0 if j == i else 0.0,
                                     dtype=forwards[j].logits.data.dtype))
                for j in range(len(forwards))
            ]
            weights.append(_chain(indicators, attentions, hws).data)
    return FusionResult(fused=fused, effective_weights=weights)


def _upsampled_logits(forwards, hw):
    return [ad.bilinear_resize(f.logits, *hw) for f in forwards]


def fuse_explicit(forwards, per_scale_attention):
    """Weighted sum with one attention map per scale, normalized per pixel
    to a partition of unity after upsampling."""
    _check_ascending(forwards)
    if len(per_scale_attention) != len(forwards):
        raise UsageError(f"{len(forwards)} scales but {len(per_scale_attention)} attention maps")
    hw = forwards[-1].hw
    ups = []
    for a in per_scale_attention:
        arr = a.data if isinstance(a, ad.Tensor) else np.asarray(a)
        ups.append(kernels.bilinear_forward(arr, *hw))
    total = np.add.reduce(ups)
    if np.any(total <= 0):
        raise UsageError("explicit fusion needs positive attention values")
    weights = [u / total for u in ups]
    fused = None
    for logit_up, w in zip(_upsampled_logits(forwards, hw), weights):
        term = ad.mul(logit_up, ad.as_tensor(w))
        fused = term if fused is None else ad.add(fused, term)
    return FusionResult(fused=fused, effective_weights=weights)


def fuse_average(forwards):
    """Upsample everything to the target resolution and average."""
    _check_ascending(forwards)
    hw = forwards[-1].hw
    acc = None
    for logit_up in _upsampled_logits(forwards, hw):
        acc = logit_up if acc is None else ad.add(acc, logit_up)
    return ad.mul(acc, 1.0 / len(forwards))


def fuse_max(forwards):
    """Upsample everything to the target resolution; per-channel max."""
    _check_ascending(forwards)
    hw = forwards[-1].hw
    with ad.no_grad():
        stacked = [ad.bilinear_resize(f.logits, *hw).data for f in forwards]
        return ad.as_tensor(np.maximum.reduce(stacked))


def argmax_prediction(fused, dtype=np.uint8):
    """Per-pixel class decision; ties go to the lowest class index."""
    arr = fused.data if isinstance(fused, ad.Tensor) else np.asarray(fused)
    if arr.ndim != 3:
        raise UsageError(f"expected [C,H,W] logits, got shape {arr.shape}")
    return arr.argmax(axis=0).astype(dtype)
