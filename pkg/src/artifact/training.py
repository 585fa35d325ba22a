"""NoGAN warm-up and WGAN-GP adversarial training.

Three phases share one layout on disk: ``<out>/<phase>/epoch_XXXX.pt`` plus
``last.pt`` and a ``losses.jsonl`` record stream. All randomness inside a
phase (batch order, interpolation weights) is drawn from generators seeded by
(seed, phase, epoch), so resuming from an epoch checkpoint reproduces the
following steps exactly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from .errors import EmptyDataset, MissingGeneratorCheckpoint, MissingPretrainState, ShapeMismatch
from .models.checkpoint import load_checkpoint, save_checkpoint
from .models.critic import critic_scalar
from .models.generator import GeneratorNetwork

log = logging.getLogger(__name__)

PHASES = ("pretrain-gen", "pretrain-critic", "adversarial")

Critic = Callable[[torch.Tensor], torch.Tensor]


@dataclass
class TrainConfig:
    lambda_mse: float = 1000.0
    lambda_gp: float = 10.0
    pretrain_gen_epochs: int = 25
    pretrain_critic_epochs: int = 10
    adversarial_epochs: int = 50
    lr_pretrain: float = 1e-4
    lr_initial: float = 1e-4
    lr_final: float = 1e-6
    critic_steps_per_gen_step: int = 5
    batch_size: int = 8
    gen_betas: tuple[float, float] = (0.9, 0.999)
    critic_betas: tuple[float, float] = (0.0, 0.9)
    seed: int = 0
    critic_variant: str = "opt"
    keep_checkpoints: int = 0  # most recent epoch checkpoints kept per phase; 0 keeps all

    def __post_init__(self):
        self.gen_betas = tuple(self.gen_betas)
        self.critic_betas = tuple(self.critic_betas)
        if self.lr_final > self.lr_initial:
            raise ValueError("lr_final must not exceed lr_initial")
        for name in ("pretrain_gen_epochs", "pretrain_critic_epochs", "adversarial_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lambda_mse < 0 or self.lambda_gp < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainState:
    phase: str
    epoch: int = -1  # last completed epoch
    step: int = 0
    critic_loss_history: list[float] = field(default_factory=list)
    gen_loss_history: list[float] = field(default_factory=list)
    epoch_means: list[float] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


# --- losses -------------------------------------------------------------------

def _grad_wrt(outputs: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
    if not outputs.requires_grad:
        return torch.zeros_like(inputs)
    (grad,) = torch.autograd.grad(outputs.sum(), inputs, create_graph=True, allow_unused=True)
    return torch.zeros_like(inputs) if grad is None else grad


def gradient_penalty(
    critic: Critic,
    real_batch: torch.Tensor,
    fake_batch: torch.Tensor,
    lambda_gp: float,
    generator: torch.Generator | None = None,
    epsilon: torch.Tensor | None = None,
) -> torch.Tensor:
    """lambda * mean over interpolates of (||grad C(x_hat)||_2 - 1)^2, one epsilon per sample."""
    if real_batch.shape != fake_batch.shape:
        raise ShapeMismatch(f"real {tuple(real_batch.shape)} vs fake {tuple(fake_batch.shape)}")
    if lambda_gp < 0:
        raise ValueError("lambda_gp must be non-negative")
    b = real_batch.shape[0]
    if epsilon is None:
        epsilon = torch.rand(b, generator=generator, dtype=real_batch.dtype)
    eps = epsilon.reshape(b, *([1] * (real_batch.ndim - 1))).to(real_batch)
    x_hat = (eps * real_batch.detach() + (1 - eps) * fake_batch.detach()).requires_grad_(True)
    scores = critic_scalar(critic(x_hat))
    grad = _grad_wrt(scores, x_hat).reshape(b, -1)
    return lambda_gp * ((grad.norm(2, dim=1) - 1) ** 2).mean()


def critic_loss(critic: Critic, y_batch, generated_batch, lambda_gp: float, generator: torch.Generator | None = None):
    """-(mean C(y) - mean C(G(f))) + lambda * penalty."""
    if y_batch.shape != generated_batch.shape:
        raise ShapeMismatch(f"y {tuple(y_batch.shape)} vs generated {tuple(generated_batch.shape)}")
    real = critic_scalar(critic(y_batch)).mean()
    fake = critic_scalar(critic(generated_batch.detach())).mean()
    gp = gradient_penalty(critic, y_batch, generated_batch, lambda_gp, generator) if lambda_gp > 0 else real.new_zeros(())
    return -(real - fake) + gp


def generator_loss(critic: Critic, generated_batch, reference_batch, lambda_mse: float):
    """-mean C(G(f)) + Lambda * MSE(G(f), y)."""
    if generated_batch.shape != reference_batch.shape:
        raise ShapeMismatch(f"generated {tuple(generated_batch.shape)} vs reference {tuple(reference_batch.shape)}")
    adv = -critic_scalar(critic(generated_batch)).mean()
    if lambda_mse == 0:
        return adv
    return adv + lambda_mse * F.mse_loss(generated_batch, reference_batch)


def lr_at_epoch(epoch: int, n_epochs: int, lr_initial: float, lr_final: float) -> float:
    """Exponential interpolation from lr_initial (epoch 0) to lr_final (last epoch)."""
    if n_epochs <= 1:
        return lr_initial
    frac = min(max(epoch / (n_epochs - 1), 0.0), 1.0)
    return lr_initial * (lr_final / lr_initial) ** frac


# --- plumbing -----------------------------------------------------------------

def sub_seed(seed: int, *names) -> int:
    digest = hashlib.sha256(repr((seed,) + names).encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def _epoch_batches(dataset: Dataset, config: TrainConfig, phase: str, epoch: int) -> Iterator[dict]:
    g = torch.Generator().manual_seed(sub_seed(config.seed, phase, "order", epoch))
    loader = DataLoader(dataset, batch_size=config.batch_size, shuffle=True, generator=g, num_workers=0)
    return iter(loader)


def _eps_generator(config: TrainConfig, phase: str, epoch: int) -> torch.Generator:
    return torch.Generator().manual_seed(sub_seed(config.seed, phase, "eps", epoch))


def _generate(gen: GeneratorNetwork, batch: dict) -> torch.Tensor:
    return gen(batch["f"], batch["m"], batch["i"], batch["delta"], batch["d"])


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def _trainable(module: torch.nn.Module):
    return [p for p in module.parameters() if p.requires_grad]


def _phase_dir(out_dir, phase) -> Path:
    d = Path(out_dir) / phase
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_records(path: Path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _link_last(path: Path) -> None:
    last = path.parent / "last.pt"
    tmp = path.parent / "last.pt.tmp"
    tmp.unlink(missing_ok=True)
    try:
        os.link(path, tmp)
    except OSError:
        shutil.copyfile(path, tmp)
    tmp.replace(last)


def _finish_epoch(phase_dir: Path, state: TrainState, payload: dict, config: TrainConfig) -> None:
    path = phase_dir / f"epoch_{state.epoch:04d}.pt"
    state.checkpoint = str(path)
    meta = {"phase": state.phase, "epoch": state.epoch, "step": state.step, "state": state.to_dict(), "train_config": asdict(config)}
    save_checkpoint(path, {**payload, **meta})
    _link_last(path)
    _write_records(phase_dir / "losses.jsonl", state.records)
    if config.keep_checkpoints > 0:
        for old in sorted(phase_dir.glob("epoch_*.pt"))[:-config.keep_checkpoints]:
            old.unlink()


def _restore_state(doc: dict) -> TrainState:
    return TrainState(**doc["state"])


def _critic_payload(critic, opt) -> dict:
    bb = critic.backbone
    return {
        "critic_config": critic.config_dict(),
        "critic": critic.state_dict(),
        "critic_optimizer": opt.state_dict() if opt is not None else None,
        "backbone": None if bb is None else {"name": bb.name, "checksum": bb.weights_checksum, "input_size": bb.input_size},
    }


def _gen_payload(gen, opt) -> dict:
    return {
        "generator_config": gen.config.to_dict(),
        "generator": gen.state_dict(),
        "gen_optimizer": opt.state_dict() if opt is not None else None,
    }


# --- phases -------------------------------------------------------------------

def pretrain_generator(gen: GeneratorNetwork, dataset: Dataset, config: TrainConfig, out_dir, resume=None) -> TrainState:
    """Squared-l2 reconstruction training; one checkpoint per epoch."""
    if len(dataset) == 0:
        raise EmptyDataset("pretraining needs at least one sample")
    phase = "pretrain-gen"
    pdir = _phase_dir(out_dir, phase)
    opt = torch.optim.Adam(gen.parameters(), lr=config.lr_pretrain, betas=config.gen_betas)
    state = TrainState(phase)
    if resume is not None:
        doc = load_checkpoint(resume)
        gen.load_state_dict(doc["generator"])
        opt.load_state_dict(doc["gen_optimizer"])
        state = _restore_state(doc)
    if config.pretrain_gen_epochs == 0 and resume is None:
        state.checkpoint = str(save_checkpoint(pdir / "last.pt", {**_gen_payload(gen, opt), "phase": phase, "epoch": -1, "step": 0, "state": state.to_dict()}))
        _write_records(pdir / "losses.jsonl", state.records)
        return state
    for epoch in range(state.epoch + 1, config.pretrain_gen_epochs):
        gen.train()
        _set_lr(opt, config.lr_pretrain)
        losses = []
        for batch in _epoch_batches(dataset, config, phase, epoch):
            loss = F.mse_loss(_generate(gen, batch), batch["y"])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            state.step += 1
            losses.append(loss.item())
            state.gen_loss_history.append(loss.item())
            state.records.append({"phase": phase, "epoch": epoch, "step": state.step, "l2": loss.item()})
        state.epoch = epoch
        state.epoch_means.append(sum(losses) / len(losses))
        log.info("%s epoch %d: l2 %.6f", phase, epoch, state.epoch_means[-1])
        _finish_epoch(pdir, state, _gen_payload(gen, opt), config)
    return state


def pretrain_critic(critic, frozen_gen: GeneratorNetwork, dataset: Dataset, config: TrainConfig, out_dir, generator_checkpoint, resume=None) -> TrainState:
    """Critic training against outputs of the pretrained (frozen) generator."""
    if generator_checkpoint is None or not Path(generator_checkpoint).is_file():
        raise MissingGeneratorCheckpoint(f"generator checkpoint {generator_checkpoint} not found; run pretrain-gen first")
    if len(dataset) == 0:
        raise EmptyDataset("critic pretraining needs at least one sample")
    phase = "pretrain-critic"
    pdir = _phase_dir(out_dir, phase)
    frozen_gen.load_state_dict(load_checkpoint(generator_checkpoint)["generator"])
    frozen_gen.eval()
    for p in frozen_gen.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam(_trainable(critic), lr=config.lr_pretrain, betas=config.critic_betas)
    state = TrainState(phase)
    if resume is not None:
        doc = load_checkpoint(resume)
        critic.load_state_dict(doc["critic"])
        opt.load_state_dict(doc["critic_optimizer"])
        state = _restore_state(doc)
    payload = lambda: {**_critic_payload(critic, opt), **_gen_payload(frozen_gen, None)}
    if config.pretrain_critic_epochs == 0 and resume is None:
        state.checkpoint = str(save_checkpoint(pdir / "last.pt", {**payload(), "phase": phase, "epoch": -1, "step": 0, "state": state.to_dict()}))
        _write_records(pdir / "losses.jsonl", state.records)
        return state
    for epoch in range(state.epoch + 1, config.pretrain_critic_epochs):
        critic.train()
        _set_lr(opt, config.lr_pretrain)
        eps_gen = _eps_generator(config, phase, epoch)
        losses = []
        for batch in _epoch_batches(dataset, config, phase, epoch):
            with torch.no_grad():
                fake = _generate(frozen_gen, batch)
            loss = critic_loss(critic, batch["y"], fake, config.lambda_gp, eps_gen)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            state.step += 1
            losses.append(loss.item())
            state.critic_loss_history.append(loss.item())
            state.records.append({"phase": phase, "epoch": epoch, "step": state.step, "critic_loss": loss.item()})
        state.epoch = epoch
        state.epoch_means.append(sum(losses) / len(losses))
        log.info("%s epoch %d: critic loss %.6f", phase, epoch, state.epoch_means[-1])
        _finish_epoch(pdir, state, payload(), config)
    return state


def adversarial_train(
    gen: GeneratorNetwork,
    critic,
    dataset: Dataset,
    config: TrainConfig,
    out_dir,
    generator_checkpoint=None,
    critic_checkpoint=None,
    resume=None,
) -> TrainState:
    """WGAN-GP: per batch, `critic_steps_per_gen_step` critic updates then one generator update."""
    if len(dataset) == 0:
        raise EmptyDataset("adversarial training needs at least one sample")
    phase = "adversarial"
    pdir = _phase_dir(out_dir, phase)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr_initial, betas=config.critic_betas)
    opt_c = torch.optim.Adam(_trainable(critic), lr=config.lr_initial, betas=config.critic_betas)
    state = TrainState(phase)
    if resume is not None:
        doc = load_checkpoint(resume)
        gen.load_state_dict(doc["generator"])
        critic.load_state_dict(doc["critic"])
        opt_g.load_state_dict(doc["gen_optimizer"])
        opt_c.load_state_dict(doc["critic_optimizer"])
        state = _restore_state(doc)
    else:
        for name, ckpt in (("generator", generator_checkpoint), ("critic", critic_checkpoint)):
            if ckpt is None or not Path(ckpt).is_file():
                raise MissingPretrainState(f"pretrained {name} checkpoint {ckpt} not found")
        gen.load_state_dict(load_checkpoint(generator_checkpoint)["generator"])
        critic.load_state_dict(load_checkpoint(critic_checkpoint)["critic"])
    for p in gen.parameters():
        p.requires_grad_(True)
    critic_params = _trainable(critic)

    n_epochs = config.adversarial_epochs
    for epoch in range(state.epoch + 1, n_epochs):
        lr = lr_at_epoch(epoch, n_epochs, config.lr_initial, config.lr_final)
        _set_lr(opt_g, lr)
        _set_lr(opt_c, lr)
        gen.train()
        critic.train()
        eps_gen = _eps_generator(config, phase, epoch)
        g_losses = []
        for batch in _epoch_batches(dataset, config, phase, epoch):
            with torch.no_grad():
                fake = _generate(gen, batch)
            for _ in range(config.critic_steps_per_gen_step):
                c_loss = critic_loss(critic, batch["y"], fake, config.lambda_gp, eps_gen)
                opt_c.zero_grad(set_to_none=True)
                c_loss.backward()
                opt_c.step()
            for p in critic_params:
                p.requires_grad_(False)
            restored = _generate(gen, batch)
            g_loss = generator_loss(critic, restored, batch["y"], config.lambda_mse)
            opt_g.zero_grad(set_to_none=True)
            g_loss.backward()
            opt_g.step()
            for p in critic_params:
                p.requires_grad_(True)
            state.step += 1
            state.critic_loss_history.append(c_loss.item())
            state.gen_loss_history.append(g_loss.item())
            g_losses.append(g_loss.item())
            state.records.append(
                {"phase": phase, "epoch": epoch, "step": state.step, "lr": lr, "critic_loss": c_loss.item(), "gen_loss": g_loss.item()}
            )
        state.epoch = epoch
        state.epoch_means.append(sum(g_losses) / len(g_losses))
        log.info("%s epoch %d: critic %.6f gen %.6f (lr %.2e)", phase, epoch, c_loss.item(), g_loss.item(), lr)
        _finish_epoch(pdir, state, {**_gen_payload(gen, opt_g), **_critic_payload(critic, opt_c)}, config)
    return state


@torch.no_grad()
def critic_gap(critic, gen: GeneratorNetwork, dataset: Dataset, batch_size: int = 8) -> float:
    """mean C(y) - mean C(G(f)) over a dataset, in eval mode."""
    was = critic.training, gen.training
    critic.eval()
    gen.eval()
    real, fake, n = 0.0, 0.0, 0
    for batch in DataLoader(dataset, batch_size=batch_size, shuffle=False):
        real += critic_scalar(critic(batch["y"])).sum().item()
        fake += critic_scalar(critic(_generate(gen, batch))).sum().item()
        n += batch["y"].shape[0]
    critic.train(was[0])
    gen.train(was[1])
    return (real - fake) / n
