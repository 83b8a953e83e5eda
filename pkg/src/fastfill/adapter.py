"""Inpainting adapter: an attention-free encoder clone with zero-init taps.

The adapter consumes the concatenated condition [x_bg, x_noisy, mask] and
emits one feature map per backbone stage, each passed through a 1x1
convolution whose weight and bias start at exactly zero. A freshly
initialized adapter is therefore an exact no-op on whichever backbone it is
attached to. One adapter instance is shared by the slow and fast generators.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .backbone import BackboneConfig, CondEmbedding, Encoder
from .schedule import NoiseSchedule, predict_x0


@dataclass(frozen=True)
class AdapterConfig:
    """Conditioning knobs. `mask_downsample` is the factor applied to the hole
    mask before concatenation; it must keep the mask at the input resolution
    of the adapter (1 at 32x32, where image and feature grids coincide)."""

    mask_downsample: int = 1


@dataclass
class ConditionTriple:
    """Adapter input: background image, noisy image, binary hole mask."""

    x_bg: torch.Tensor  # (B, C, H, W), hole region zeroed
    x_noisy: torch.Tensor  # (B, C, H, W)
    mask_ds: torch.Tensor  # (B, 1, h, w), values in {0, 1}

    def __post_init__(self):
        if self.x_bg.shape != self.x_noisy.shape:
            raise ValueError("x_bg and x_noisy must have identical shapes")
        if self.mask_ds.ndim != 4 or self.mask_ds.shape[1] != 1:
            raise ValueError("mask_ds must be (B, 1, h, w)")
        if self.mask_ds.shape[0] != self.x_bg.shape[0]:
            raise ValueError("mask_ds batch size must match images")
        vals = torch.unique(self.mask_ds)
        if not torch.all((vals == 0) | (vals == 1)):
            raise ValueError("mask_ds must be binary")
        if self.mask_ds.shape[2:] == self.x_bg.shape[2:]:
            hole = self.mask_ds.to(self.x_bg.dtype)
            if torch.any(self.x_bg * hole != 0):
                raise ValueError("x_bg must be zero inside the hole")


def make_background(x0, hole_mask):
    """Zero the hole region: x_bg = x0 * (1 - hole), broadcast over channels."""
    if torch.is_tensor(x0):
        keep = 1.0 - (hole_mask if torch.is_tensor(hole_mask) else torch.as_tensor(hole_mask)).to(x0.dtype)
        if keep.ndim == x0.ndim - 1:
            keep = keep.unsqueeze(-3)
        if keep.shape[-2:] != x0.shape[-2:]:
            raise ValueError("hole_mask spatial shape must match x0")
        return x0 * keep
    keep = 1.0 - np.asarray(hole_mask, dtype=x0.dtype)
    if keep.shape != x0.shape[-2:]:
        raise ValueError("hole_mask spatial shape must match x0")
    return x0 * keep


def downsample_mask(hole_mask: np.ndarray, factor: int):
    """Nearest-neighbor downsampling anchored at the top-left pixel; the
    output stays binary."""
    h, w = hole_mask.shape[-2], hole_mask.shape[-1]
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"factor {factor} must divide spatial dims ({h}, {w})")
    return hole_mask[..., ::factor, ::factor]


class Adapter(nn.Module):
    """Encoder clone over [x_bg, x_noisy, mask] with zero-init fusion taps."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.cond_embed = CondEmbedding(cfg)
        self.encoder = Encoder(cfg, in_channels=2 * cfg.in_channels + 1)
        self.taps = nn.ModuleList()
        for w in cfg.stage_widths:
            tap = nn.Conv2d(w, w, 1)
            nn.init.zeros_(tap.weight)
            nn.init.zeros_(tap.bias)
            self.taps.append(tap)

    def forward(self, cond: ConditionTriple, t, label) -> list[torch.Tensor]:
        x = torch.cat([cond.x_bg, cond.x_noisy, cond.mask_ds.to(cond.x_bg.dtype)], dim=1)
        b = x.shape[0]
        if not torch.is_tensor(t):
            t = torch.full((b,), int(t), dtype=torch.long)
        if not torch.is_tensor(label):
            label = torch.full((b,), int(label), dtype=torch.long)
        emb = self.cond_embed(t, label)
        feats = self.encoder(x, emb)
        return [tap(f) for tap, f in zip(self.taps, feats)]


def adapter_forward(adapter: Adapter, cond: ConditionTriple, t, label) -> list[torch.Tensor]:
    return adapter(cond, t, label)


def generate_one_step(adapter, fast_backbone, x_t, cond: ConditionTriple, t, label,
                      schedule: NoiseSchedule) -> torch.Tensor:
    """One-step clean estimate from the fast generator at a few-step timestep."""
    allowed = set(schedule.lcm_steps)
    ts = np.atleast_1d(np.asarray(t.cpu() if torch.is_tensor(t) else t))
    if not all(int(v) in allowed for v in ts):
        raise ValueError(f"timestep {t} not in the few-step set {schedule.lcm_steps}")
    feats = adapter(cond, t, label)
    eps = fast_backbone.eps_predict(x_t, t, label, adapter_features=feats)
    return predict_x0(x_t, eps, t, schedule)
