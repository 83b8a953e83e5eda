"""Three-step alternating training loop with strict freeze contracts.

One cycle is: (1) adapter update through the frozen slow backbone with the
plain diffusion loss, (2) adapter update through the frozen fast backbone
with the weighted GAN + background losses, (3) discriminator-trainables
update with the fake diffusion loss plus the weighted GAN loss. Each step is
one optimizer update after `grad_accum` micro-batches of its own kind; the
iteration counter increments once per step, so N cycles = 3N iterations.

Randomness: data batches derive from (seed, iteration, micro) counters so a
prefetching loader cannot change results; everything else (timesteps, noise)
is drawn from one master generator whose state is checkpointed.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch.optim import AdamW

from .adapter import Adapter, AdapterConfig, ConditionTriple, generate_one_step, make_background
from .backbone import Backbone, BackboneConfig
from .data import DataConfig, make_dataset
from .discriminator import Discriminator
from .losses import (
    LossWeights,
    background_loss,
    combine_discriminator,
    combine_generator,
    discriminator_gan_loss,
    fake_diffusion_loss,
    generator_gan_loss,
    real_diffusion_loss,
)
from .schedule import NoiseSchedule, ScheduleConfig, add_noise, renoise
from .utils import atomic_torch_save, atomic_write_text, derive_seed, freeze, requires_grad_off

CHECKPOINT_VERSION = 1
STEP_KINDS = ("slow", "fast", "disc")
LOG_HEADER = ("iteration", "step_kind", "loss_name", "value")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 2
    grad_accum: int = 4
    total_iterations: int = 2000  # optimizer updates; one cycle = 3 updates
    seed: int = 0
    checkpoint_interval: int = 500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 1e-2
    baseline_mode: bool = False  # step 1 only, no discriminator allocated
    pretrain_iterations: int = 2000
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 16
    backbone_init: str = ""  # path to a pretrained-backbones file; empty = random init
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        counts = (self.batch_size, self.grad_accum, self.total_iterations,
                  self.checkpoint_interval, self.pretrain_iterations, self.pretrain_batch_size)
        if min(counts) < 1:
            raise ValueError("all trainer counts must be positive")
        if self.learning_rate < 0 or self.pretrain_lr < 0:
            raise ValueError("learning rates must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        d["schedule"] = ScheduleConfig(**d["schedule"])
        d["backbone"] = BackboneConfig(**d["backbone"])
        d["adapter"] = AdapterConfig(**d["adapter"])
        d["data"] = DataConfig(**d["data"])
        return TrainConfig(**d)


class TrainState:
    """Everything the loop mutates: modules, optimizers, counter, RNG."""

    def __init__(self, config, schedule, slow_backbone, fast_backbone, adapter,
                 discriminator, opt_adapter, opt_disc, rng, dataset):
        self.config = config
        self.schedule = schedule
        self.slow_backbone = slow_backbone
        self.fast_backbone = fast_backbone
        self.adapter = adapter
        self.discriminator = discriminator
        self.opt_adapter = opt_adapter
        self.opt_disc = opt_disc
        self.rng = rng
        self.dataset = dataset  # dict of stacked tensors
        self.iteration = 0


def dataset_tensors(samples) -> dict[str, torch.Tensor]:
    x0 = torch.stack([torch.from_numpy(s.x0) for s in samples])
    hole = torch.stack([torch.from_numpy(s.hole_mask.astype(np.float32)) for s in samples]).unsqueeze(1)
    label = torch.tensor([s.label for s in samples], dtype=torch.long)
    x_bg = make_background(x0, hole)
    return {"x0": x0, "hole": hole, "x_bg": x_bg, "label": label}


def build_backbones(config: TrainConfig) -> tuple[Backbone, Backbone]:
    torch.manual_seed(derive_seed(config.seed, "backbones"))
    slow = Backbone(config.backbone, role="slow")
    fast = Backbone(config.backbone, role="fast")
    return slow, fast


def _make_optimizer(params, config: TrainConfig) -> AdamW:
    return AdamW(params, lr=config.learning_rate,
                 betas=(config.adam_beta1, config.adam_beta2),
                 weight_decay=config.weight_decay)


def build_state(config: TrainConfig, load_backbone_init: bool = True) -> TrainState:
    if config.adapter.mask_downsample != 1:
        raise ValueError(
            "mask_downsample must be 1: the conditioning concatenation needs the "
            "mask at the adapter input resolution"
        )
    if config.backbone.image_size != 32 or config.backbone.in_channels != 3:
        raise ValueError("the synthetic dataset is 32x32 RGB; backbone must match")
    schedule = config.schedule.build()
    slow, fast = build_backbones(config)
    if load_backbone_init and config.backbone_init:
        load_backbones_into(config.backbone_init, slow, fast)
    freeze(slow)
    freeze(fast)
    torch.manual_seed(derive_seed(config.seed, "trainables"))
    adapter = Adapter(config.backbone)
    discriminator = None if config.baseline_mode else Discriminator(slow, config.backbone)
    opt_adapter = _make_optimizer(adapter.parameters(), config)
    opt_disc = None if discriminator is None else _make_optimizer(discriminator.parameters(), config)
    rng = torch.Generator()
    rng.manual_seed(derive_seed(config.seed, "train"))
    dataset = dataset_tensors(make_dataset(config.data))
    return TrainState(config, schedule, slow, fast, adapter, discriminator,
                      opt_adapter, opt_disc, rng, dataset)


def draw_micro_batches(state: TrainState, iteration: int) -> list[dict[str, torch.Tensor]]:
    """Counter-seeded index draws; independent of the master generator."""
    cfg = state.config
    n = state.dataset["x0"].shape[0]
    micros = []
    for m in range(cfg.grad_accum):
        rng = np.random.default_rng(derive_seed(cfg.seed, "batch", iteration, m))
        idx = torch.from_numpy(rng.integers(0, n, cfg.batch_size))
        micros.append({k: v[idx] for k, v in state.dataset.items()})
    return micros


def _rand_t(state: TrainState, b: int) -> torch.Tensor:
    return torch.randint(0, state.schedule.T, (b,), generator=state.rng)


def _rand_lcm_t(state: TrainState, b: int) -> torch.Tensor:
    steps = torch.tensor(state.schedule.lcm_steps, dtype=torch.long)
    idx = torch.randint(0, len(steps), (b,), generator=state.rng)
    return steps[idx]


def _randn_like(state: TrainState, x: torch.Tensor) -> torch.Tensor:
    return torch.randn(x.shape, generator=state.rng, dtype=x.dtype)


def step_slow(state: TrainState, micro_batches) -> float:
    """Adapter update through the frozen slow backbone (plain diffusion loss)."""
    n = len(micro_batches)
    state.opt_adapter.zero_grad(set_to_none=True)
    total = 0.0
    for mb in micro_batches:
        t = _rand_t(state, mb["x0"].shape[0])
        eps = _randn_like(state, mb["x0"])
        x_t = add_noise(mb["x0"], eps, t, state.schedule)
        cond = ConditionTriple(x_bg=mb["x_bg"], x_noisy=x_t, mask_ds=mb["hole"])
        feats = state.adapter(cond, t, mb["label"])
        eps_pred = state.slow_backbone.eps_predict(x_t, t, mb["label"], adapter_features=feats)
        loss = real_diffusion_loss(eps, eps_pred)
        (loss / n).backward()
        total += float(loss.detach())
    state.opt_adapter.step()
    return total / n


def step_fast(state: TrainState, micro_batches) -> tuple[float, float]:
    """Adapter update through the frozen fast backbone with discriminator
    critique; discriminator trainables accumulate no gradient."""
    if state.discriminator is None:
        raise ValueError("step_fast requires a discriminator (not baseline mode)")
    n = len(micro_batches)
    state.opt_adapter.zero_grad(set_to_none=True)
    tot_gan, tot_bg = 0.0, 0.0
    for mb in micro_batches:
        t = _rand_lcm_t(state, mb["x0"].shape[0])
        eps = _randn_like(state, mb["x0"])
        x_t = add_noise(mb["x0"], eps, t, state.schedule)
        cond = ConditionTriple(x_bg=mb["x_bg"], x_noisy=x_t, mask_ds=mb["hole"])
        x0_hat = generate_one_step(state.adapter, state.fast_backbone, x_t, cond, t,
                                   mb["label"], state.schedule)
        t2 = _rand_t(state, mb["x0"].shape[0])
        eps2 = _randn_like(state, mb["x0"])
        x_hat_t = renoise(x0_hat, eps2, t2, state.schedule)
        with requires_grad_off(state.discriminator):
            logits = state.discriminator.score(x_hat_t, mb["x_bg"], mb["hole"], t2, mb["label"])
        l_gan = generator_gan_loss(logits)
        l_bg = background_loss(mb["x0"], x0_hat, mb["hole"])
        loss = combine_generator(l_gan, l_bg, state.config.weights)
        (loss / n).backward()
        tot_gan += float(l_gan.detach())
        tot_bg += float(l_bg.detach())
    state.opt_adapter.step()
    return tot_gan / n, tot_bg / n


def step_disc(state: TrainState, micro_batches) -> tuple[float, float]:
    """Assistant encoder/decoder + classifier update; the fake path is
    detached so the adapter accumulates no gradient."""
    if state.discriminator is None:
        raise ValueError("step_disc requires a discriminator (not baseline mode)")
    n = len(micro_batches)
    state.opt_disc.zero_grad(set_to_none=True)
    tot_fd, tot_d = 0.0, 0.0
    for mb in micro_batches:
        b = mb["x0"].shape[0]
        t_real = _rand_t(state, b)
        eps_real = _randn_like(state, mb["x0"])
        x_t = add_noise(mb["x0"], eps_real, t_real, state.schedule)
        real_logits = state.discriminator.score(x_t, mb["x_bg"], mb["hole"], t_real, mb["label"])

        t_gen = _rand_lcm_t(state, b)
        eps_gen = _randn_like(state, mb["x0"])
        x_tg = add_noise(mb["x0"], eps_gen, t_gen, state.schedule)
        cond = ConditionTriple(x_bg=mb["x_bg"], x_noisy=x_tg, mask_ds=mb["hole"])
        with torch.no_grad():
            x0_hat = generate_one_step(state.adapter, state.fast_backbone, x_tg, cond,
                                       t_gen, mb["label"], state.schedule).detach()
        t_fake = _rand_t(state, b)
        eps_fresh = _randn_like(state, mb["x0"])
        x_hat_t = renoise(x0_hat, eps_fresh, t_fake, state.schedule)
        fake_logits, eps_pred = state.discriminator.critique(
            x_hat_t, mb["x_bg"], mb["hole"], t_fake, mb["label"])

        l_d = discriminator_gan_loss(real_logits, fake_logits)
        l_fd = fake_diffusion_loss(eps_fresh, eps_pred)
        loss = combine_discriminator(l_fd, l_d, state.config.weights)
        (loss / n).backward()
        tot_fd += float(l_fd.detach())
        tot_d += float(l_d.detach())
    state.opt_disc.step()
    return tot_fd / n, tot_d / n


def _run_iteration(state: TrainState) -> list[tuple[int, str, str, float]]:
    kinds = ("slow",) if state.config.baseline_mode else STEP_KINDS
    kind = kinds[state.iteration % len(kinds)]
    micros = draw_micro_batches(state, state.iteration)
    it = state.iteration
    if kind == "slow":
        rows = [(it, "slow", "real_diff", step_slow(state, micros))]
    elif kind == "fast":
        l_gan, l_bg = step_fast(state, micros)
        rows = [(it, "fast", "gen_gan", l_gan), (it, "fast", "bg", l_bg)]
    else:
        l_fd, l_d = step_disc(state, micros)
        rows = [(it, "disc", "fake_diff", l_fd), (it, "disc", "disc_gan", l_d)]
    state.iteration += 1
    return rows


def format_log_rows(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(LOG_HEADER)
    for it, kind, name, value in rows:
        writer.writerow([it, kind, name, repr(float(value))])
    return buf.getvalue()


def train(config: TrainConfig, out_dir: str | None = None,
          resume_path: str | None = None) -> tuple[TrainState, list]:
    """Run the alternating loop to `total_iterations`; returns the final state
    and the loss-log rows produced by this call."""
    state = load_checkpoint(resume_path) if resume_path else build_state(config)
    rows: list[tuple[int, str, str, float]] = []
    while state.iteration < state.config.total_iterations:
        rows.extend(_run_iteration(state))
        if out_dir and state.iteration % state.config.checkpoint_interval == 0:
            save_checkpoint(os.path.join(out_dir, f"ckpt_{state.iteration:06d}.pt"), state)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "checkpoint.pt"), state)
        atomic_write_text(os.path.join(out_dir, "loss_log.csv"), format_log_rows(rows))
    return state, rows


def save_checkpoint(path: str, state: TrainState) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "iteration": state.iteration,
        "config": state.config.to_dict(),
        "rng_state": state.rng.get_state(),
        "adapter": state.adapter.state_dict(),
        "slow_backbone": state.slow_backbone.state_dict(),
        "fast_backbone": state.fast_backbone.state_dict(),
        "discriminator": None if state.discriminator is None else state.discriminator.state_dict(),
        "frozen_encoder_ref": "slow",
        "opt_adapter": state.opt_adapter.state_dict(),
        "opt_disc": None if state.opt_disc is None else state.opt_disc.state_dict(),
    }
    try:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        atomic_torch_save(path, payload)
    except OSError as e:
        raise RuntimeError(f"checkpoint write failed at iteration {state.iteration}: {e}") from e


def load_checkpoint(path: str) -> TrainState:
    try:
        payload = torch.load(path, weights_only=True)
    except OSError as e:
        raise RuntimeError(f"checkpoint read failed: {e}") from e
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    config = TrainConfig.from_dict(payload["config"])
    state = build_state(config, load_backbone_init=False)
    state.slow_backbone.load_state_dict(payload["slow_backbone"])
    state.fast_backbone.load_state_dict(payload["fast_backbone"])
    state.adapter.load_state_dict(payload["adapter"])
    state.opt_adapter.load_state_dict(payload["opt_adapter"])
    if payload["discriminator"] is not None:
        if state.discriminator is None:
            raise ValueError("checkpoint has a discriminator but config is baseline mode")
        state.discriminator.load_state_dict(payload["discriminator"])
        state.opt_disc.load_state_dict(payload["opt_disc"])
    state.rng.set_state(payload["rng_state"])
    state.iteration = payload["iteration"]
    return state


def save_adapter(path: str, adapter: Adapter) -> None:
    """Adapter-only export so one file can attach to either backbone role."""
    atomic_torch_save(path, {
        "version": CHECKPOINT_VERSION,
        "backbone_config": asdict(adapter.cfg),
        "adapter": adapter.state_dict(),
    })


def load_adapter(path: str) -> Adapter:
    payload = torch.load(path, weights_only=True)
    adapter = Adapter(BackboneConfig(**payload["backbone_config"]))
    adapter.load_state_dict(payload["adapter"])
    return adapter


def pretrain_backbone(backbone: Backbone, dataset: dict[str, torch.Tensor],
                      schedule: NoiseSchedule, iterations: int, lr: float,
                      batch_size: int, seed: int) -> list[float]:
    """Plain conditional denoising, no adapter and no background conditioning.

    The slow role samples timesteps uniformly over the full schedule; the fast
    role samples from the few-step set only.
    """
    opt = AdamW(backbone.parameters(), lr=lr, betas=(0.9, 0.999), weight_decay=1e-2)
    rng = torch.Generator()
    rng.manual_seed(derive_seed(seed, "pretrain", backbone.role))
    n = dataset["x0"].shape[0]
    lcm = torch.tensor(schedule.lcm_steps, dtype=torch.long)
    losses = []
    for it in range(iterations):
        idx_rng = np.random.default_rng(derive_seed(seed, "pretrain-batch", backbone.role, it))
        idx = torch.from_numpy(idx_rng.integers(0, n, batch_size))
        x0 = dataset["x0"][idx]
        label = dataset["label"][idx]
        if backbone.role == "fast":
            t = lcm[torch.randint(0, len(lcm), (batch_size,), generator=rng)]
        else:
            t = torch.randint(0, schedule.T, (batch_size,), generator=rng)
        eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
        x_t = add_noise(x0, eps, t, schedule)
        loss = real_diffusion_loss(eps, backbone.eps_predict(x_t, t, label))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return losses


def save_backbones(path: str, slow: Backbone, fast: Backbone) -> None:
    atomic_torch_save(path, {
        "version": CHECKPOINT_VERSION,
        "backbone_config": asdict(slow.cfg),
        "slow": slow.state_dict(),
        "fast": fast.state_dict(),
    })


def load_backbones_into(path: str, slow: Backbone, fast: Backbone) -> None:
    payload = torch.load(path, weights_only=True)
    stored = BackboneConfig(**payload["backbone_config"])
    if stored != slow.cfg:
        raise ValueError(f"backbone config mismatch: checkpoint {stored} vs model {slow.cfg}")
    slow.load_state_dict(payload["slow"])
    fast.load_state_dict(payload["fast"])
