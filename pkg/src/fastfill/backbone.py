"""Tiny conditional noise-prediction U-Net used for both base-model roles.

The "slow" and "fast" roles share one architecture (so a single adapter fits
both) and differ only in which timesteps they are trained and evaluated on.
There is no attention anywhere; blocks are GroupNorm + SiLU residual convs
with an additive timestep/label embedding. Per-stage feature lists can be
residually injected into the encoder and decoder, and zero features are an
exact no-op.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    blocks_per_stage: int = 2
    num_labels: int = 18

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        counts = (self.image_size, self.in_channels, self.base_channels,
                  self.blocks_per_stage, self.num_labels, *self.channel_multipliers)
        if min(counts) < 1:
            raise ValueError("all backbone config counts must be positive")
        if self.image_size % (1 << (self.num_stages - 1)) != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2^{self.num_stages - 1}"
            )

    @property
    def num_stages(self) -> int:
        return len(self.channel_multipliers)

    @property
    def stage_widths(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    @property
    def embed_dim(self) -> int:
        return 4 * self.base_channels

    def stage_sizes(self) -> tuple[int, ...]:
        return tuple(self.image_size >> i for i in range(self.num_stages))


def time_embedding(t: torch.Tensor | int, dim: int) -> torch.Tensor:
    """Sinusoidal timestep encoding: [sin(t*w_0..), cos(t*w_0..)], dim even."""
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    if not torch.is_tensor(t):
        t = torch.tensor([t])
    t = t.to(torch.float64)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1).to(torch.float32)


def _norm_groups(channels: int) -> int:
    g = min(8, channels)
    while channels % g:
        g -= 1
    return g


class CondEmbedding(nn.Module):
    """Timestep sinusoid -> 2-layer MLP, plus an additive learned label vector."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.num_labels = cfg.num_labels
        self.sin_dim = cfg.base_channels if cfg.base_channels % 2 == 0 else cfg.base_channels + 1
        self.mlp = nn.Sequential(
            nn.Linear(self.sin_dim, cfg.embed_dim),
            nn.SiLU(),
            nn.Linear(cfg.embed_dim, cfg.embed_dim),
        )
        self.label_table = nn.Embedding(cfg.num_labels, cfg.embed_dim)

    def forward(self, t: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
        if torch.any(label < 0) or torch.any(label >= self.num_labels):
            raise ValueError(f"label outside [0, {self.num_labels - 1}]")
        return self.mlp(time_embedding(t, self.sin_dim)) + self.label_table(label)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_norm_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Encoder(nn.Module):
    """Stem conv plus `num_stages` residual stages with stride-2 downsampling.

    Returns one feature map per stage (post injection), shallow to deep.
    `in_channels` can be overridden so condition-processing clones can consume
    concatenated inputs.
    """

    def __init__(self, cfg: BackboneConfig, in_channels: int | None = None):
        super().__init__()
        widths = cfg.stage_widths
        self.cfg = cfg
        self.stem = nn.Conv2d(in_channels or cfg.in_channels, widths[0], 3, padding=1)
        self.stages = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i, w in enumerate(widths):
            blocks = []
            for j in range(cfg.blocks_per_stage):
                w_in = widths[i - 1] if (j == 0 and i > 0) else w
                blocks.append(ResBlock(w_in, w, cfg.embed_dim))
            self.stages.append(nn.ModuleList(blocks))
            if i < len(widths) - 1:
                self.downs.append(nn.Conv2d(w, w, 3, stride=2, padding=1))

    def forward(
        self,
        x: torch.Tensor,
        emb: torch.Tensor,
        injected: list[torch.Tensor] | None = None,
    ) -> list[torch.Tensor]:
        if injected is not None and len(injected) != len(self.stages):
            raise ValueError(
                f"expected {len(self.stages)} injected features, got {len(injected)}"
            )
        h = self.stem(x)
        feats = []
        for i, blocks in enumerate(self.stages):
            for block in blocks:
                h = block(h, emb)
            if injected is not None:
                if injected[i].shape != h.shape:
                    raise ValueError(
                        f"injected feature {i} shape {tuple(injected[i].shape)} "
                        f"!= stage shape {tuple(h.shape)}"
                    )
                h = h + injected[i]
            feats.append(h)
            if i < len(self.stages) - 1:
                h = self.downs[i](h)
        return feats


class Decoder(nn.Module):
    """Mid block plus mirrored upsampling stages consuming encoder skips."""

    def __init__(self, cfg: BackboneConfig, out_channels: int | None = None):
        super().__init__()
        widths = cfg.stage_widths
        self.cfg = cfg
        self.mid = ResBlock(widths[-1], widths[-1], cfg.embed_dim)
        self.stages = nn.ModuleList()
        self.ups = nn.ModuleDict()
        for i in reversed(range(len(widths))):
            w = widths[i]
            blocks = [ResBlock(2 * w, w, cfg.embed_dim)]
            blocks += [ResBlock(w, w, cfg.embed_dim) for _ in range(cfg.blocks_per_stage - 1)]
            self.stages.append(nn.ModuleList(blocks))
            if i > 0:
                self.ups[str(i)] = nn.Conv2d(w, widths[i - 1], 3, padding=1)
        self.head_norm = nn.GroupNorm(_norm_groups(widths[0]), widths[0])
        self.head = nn.Conv2d(widths[0], out_channels or cfg.in_channels, 3, padding=1)

    def forward(
        self,
        feats: list[torch.Tensor],
        emb: torch.Tensor,
        injected: list[torch.Tensor] | None = None,
    ) -> torch.Tensor:
        num_stages = len(self.stages)
        if len(feats) != num_stages:
            raise ValueError(f"expected {num_stages} skip features, got {len(feats)}")
        h = self.mid(feats[-1], emb)
        for rank, blocks in enumerate(self.stages):
            i = num_stages - 1 - rank
            h = torch.cat([h, feats[i]], dim=1)
            for block in blocks:
                h = block(h, emb)
            if injected is not None:
                h = h + injected[i]
            if i > 0:
                h = self.ups[str(i)](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.head(F.silu(self.head_norm(h)))


class Backbone(nn.Module):
    """Frozen base model stand-in; role is "slow" (multi-step) or "fast" (few-step)."""

    ROLES = ("slow", "fast")

    def __init__(self, cfg: BackboneConfig, role: str):
        super().__init__()
        if role not in self.ROLES:
            raise ValueError(f"role must be one of {self.ROLES}, got {role!r}")
        self.cfg = cfg
        self.role = role
        self.cond = CondEmbedding(cfg)
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def _batch_cond(self, x: torch.Tensor, t, label) -> tuple[torch.Tensor, torch.Tensor]:
        b = x.shape[0]
        if not torch.is_tensor(t):
            t = torch.full((b,), int(t), dtype=torch.long)
        if not torch.is_tensor(label):
            label = torch.full((b,), int(label), dtype=torch.long)
        if t.shape != (b,) or label.shape != (b,):
            raise ValueError("t and label must be scalars or 1-D batch vectors")
        return t, label

    def _check_input(self, x: torch.Tensor) -> None:
        c, s = self.cfg.in_channels, self.cfg.image_size
        if x.ndim != 4 or x.shape[1:] != (c, s, s):
            raise ValueError(f"expected input (B, {c}, {s}, {s}), got {tuple(x.shape)}")

    def embed(self, x: torch.Tensor, t, label) -> torch.Tensor:
        t, label = self._batch_cond(x, t, label)
        return self.cond(t, label)

    def forward(
        self,
        x_t: torch.Tensor,
        t,
        label,
        adapter_features: list[torch.Tensor] | None = None,
    ) -> torch.Tensor:
        """Predict the injected noise; adapter features (if any) are added to
        every encoder and decoder stage output."""
        self._check_input(x_t)
        emb = self.embed(x_t, t, label)
        feats = self.encoder(x_t, emb, injected=adapter_features)
        return self.decoder(feats, emb, injected=adapter_features)

    def eps_predict(self, x_t, t, label, adapter_features=None) -> torch.Tensor:
        # routed through __call__ so forward hooks observe every evaluation
        return self(x_t, t, label, adapter_features=adapter_features)

    def encode_stages(
        self,
        x_t: torch.Tensor,
        t,
        label,
        assistant_features: list[torch.Tensor] | None = None,
    ) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Encoder-only pass; returns per-stage fused maps and the embedding."""
        self._check_input(x_t)
        emb = self.embed(x_t, t, label)
        return self.encoder(x_t, emb, injected=assistant_features), emb

    def encode_features(self, x_t, t, label, assistant_features=None) -> torch.Tensor:
        """Deepest fused encoder map (spatial image_size / 2^(stages-1))."""
        feats, _ = self.encode_stages(x_t, t, label, assistant_features)
        return feats[-1]
