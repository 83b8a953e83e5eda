"""Diffusion discriminator: frozen backbone encoder + trainable assistants.

The assistant encoder (same architecture as the inpainting adapter) processes
[x_bg, x_noisy, mask] and injects zero-init features into the frozen encoder
stages. The fused stage whose spatial size matches the classifier input feeds
a 5-layer convolutional head producing one logit per sample; the fused stage
stack also feeds a trainable assistant decoder that predicts noise for the
fake diffusion loss. The frozen encoder is held by reference and never
appears among this module's parameters.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .adapter import Adapter, ConditionTriple
from .backbone import Backbone, BackboneConfig, Decoder, _norm_groups

CLASSIFIER_INPUT_SIZE = 32
CLASSIFIER_STAGES = 5


class ConvClassifier(nn.Module):
    """Five stride-2 convolutions, 32x32 -> 1x1, one scalar logit per sample.

    Channel widths double each stage from the input width; the final stage is
    a bare zero-initialized convolution (no norm, no activation), so a fresh
    classifier scores everything 0.
    """

    def __init__(self, in_channels: int, input_size: int = CLASSIFIER_INPUT_SIZE):
        super().__init__()
        if input_size != 1 << CLASSIFIER_STAGES:
            raise ValueError(f"classifier input size must be {1 << CLASSIFIER_STAGES}")
        self.input_size = input_size
        widths = [in_channels * (2 ** (i + 1)) for i in range(CLASSIFIER_STAGES - 1)] + [1]
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        w_in = in_channels
        for i, w_out in enumerate(widths):
            self.convs.append(nn.Conv2d(w_in, w_out, 3, stride=2, padding=1))
            if i < CLASSIFIER_STAGES - 1:
                self.norms.append(nn.GroupNorm(_norm_groups(w_out), w_out))
            w_in = w_out
        nn.init.zeros_(self.convs[-1].weight)
        nn.init.zeros_(self.convs[-1].bias)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        if fmap.ndim != 4 or fmap.shape[2:] != (self.input_size, self.input_size):
            raise ValueError(
                f"classifier expects {self.input_size}x{self.input_size} maps, got {tuple(fmap.shape)}"
            )
        h = fmap
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < CLASSIFIER_STAGES - 1:
                h = F.silu(self.norms[i](h))
        return h.reshape(h.shape[0])


class Discriminator(nn.Module):
    def __init__(self, frozen_backbone: Backbone, cfg: BackboneConfig):
        super().__init__()
        sizes = cfg.stage_sizes()
        if CLASSIFIER_INPUT_SIZE not in sizes:
            raise ValueError(
                f"no encoder stage has spatial size {CLASSIFIER_INPUT_SIZE} (stages: {sizes})"
            )
        self.cfg = cfg
        self.stage_idx = sizes.index(CLASSIFIER_INPUT_SIZE)
        self.assistant_encoder = Adapter(cfg)
        self.assistant_decoder = Decoder(cfg)
        self.classifier = ConvClassifier(cfg.stage_widths[self.stage_idx])
        # Reference only: kept out of the module registry so parameters() and
        # state_dict() cover the trainables alone.
        self.__dict__["frozen"] = frozen_backbone

    def _fuse(self, x_noisy, x_bg, mask_ds, t, label):
        cond = ConditionTriple(x_bg=x_bg, x_noisy=x_noisy, mask_ds=mask_ds)
        assist = self.assistant_encoder(cond, t, label)
        return self.frozen.encode_stages(x_noisy, t, label, assistant_features=assist)

    def score(self, x_noisy, x_bg, mask_ds, t, label) -> torch.Tensor:
        """Raw (pre-sigmoid) realness logits, one per sample."""
        feats, _ = self._fuse(x_noisy, x_bg, mask_ds, t, label)
        return self.classifier(feats[self.stage_idx])

    def assistant_denoise(self, x_noisy, x_bg, mask_ds, t, label) -> torch.Tensor:
        """Noise prediction decoded from the fused encoder stack."""
        feats, emb = self._fuse(x_noisy, x_bg, mask_ds, t, label)
        return self.assistant_decoder(feats, emb)

    def critique(self, x_noisy, x_bg, mask_ds, t, label) -> tuple[torch.Tensor, torch.Tensor]:
        """(logits, noise prediction) sharing one fused encoding; identical
        results to calling score and assistant_denoise separately."""
        feats, emb = self._fuse(x_noisy, x_bg, mask_ds, t, label)
        return self.classifier(feats[self.stage_idx]), self.assistant_decoder(feats, emb)
