import json
import math

import pytest
import torch
import torch.nn as nn

from artifact.data.dataset import TensorSampleDataset
from artifact.errors import EmptyDataset, MissingGeneratorCheckpoint, MissingPretrainState, ShapeMismatch
from artifact.features import parameter_checksum
from artifact.models import GeneratorConfig, build_critic, build_generator, load_checkpoint
from artifact.training import (
    TrainConfig,
    _grad_wrt,
    adversarial_train,
    critic_gap,
    critic_loss,
    generator_loss,
    gradient_penalty,
    lr_at_epoch,
    pretrain_critic,
    pretrain_generator,
    sub_seed,
)

SIZE = 64
GEN = GeneratorConfig(unet_depth=2, base_channels=8, seed=1)


class LinearCritic(nn.Module):
    """C(x) = <w, x>, returned as a 1x1 score block."""

    def __init__(self, w: torch.Tensor):
        super().__init__()
        self.w = nn.Parameter(w)

    def forward(self, x):
        return (x.reshape(x.shape[0], -1) @ self.w.reshape(-1)).reshape(-1, 1, 1, 1)


class ConstantCritic(nn.Module):
    def __init__(self, value: float):
        super().__init__()
        self.value = value

    def forward(self, x):
        return torch.full((x.shape[0], 1, 2, 2), self.value, dtype=x.dtype)


class MeanCritic(nn.Module):
    """Stub whose score block is the input itself, so C(x) is the mean pixel value."""

    def forward(self, x):
        return x


def _unit(shape, norm, seed=0):
    w = torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    return w / w.norm() * norm


def toy_dataset(n=8, size=SIZE, seed=0):
    g = torch.Generator().manual_seed(seed)
    samples = []
    for _ in range(n):
        y = torch.rand(3, size, size, generator=g)
        f = (y + 0.1 * torch.randn(3, size, size, generator=g)).clamp(0, 1)
        samples.append(
            {
                "f": f,
                "m": torch.rand(2, size, size, generator=g),
                "i": y.clone(),
                "delta": torch.tensor([0.8]),
                "d": torch.tensor([0.2]),
                "y": y,
            }
        )
    return TensorSampleDataset(samples)


def small_config(**kw):
    base = dict(pretrain_gen_epochs=1, pretrain_critic_epochs=1, adversarial_epochs=1, batch_size=4, critic_steps_per_gen_step=2, seed=5)
    base.update(kw)
    return TrainConfig(**base)


# --- gradient penalty ----------------------------------------------------------------

@pytest.mark.parametrize("norm, expected", [(1.0, 0.0), (3.0, 40.0)])
def test_gp_linear_critic(norm, expected):
    critic = LinearCritic(_unit(3 * 8 * 8, norm))
    real = torch.rand(4, 3, 8, 8, dtype=torch.float64)
    fake = torch.rand(4, 3, 8, 8, dtype=torch.float64)
    assert gradient_penalty(critic, real, fake, 10.0).item() == pytest.approx(expected, abs=1e-4)


def test_gp_constant_critic():
    real, fake = torch.rand(3, 3, 8, 8), torch.rand(3, 3, 8, 8)
    assert gradient_penalty(ConstantCritic(2.0), real, fake, 1.0).item() == 1.0


def test_gp_is_nonnegative_and_checks_shapes():
    critic = build_critic("trainable_only", patch_size=SIZE)
    real, fake = torch.rand(2, 3, SIZE, SIZE), torch.rand(2, 3, SIZE, SIZE)
    assert gradient_penalty(critic, real, fake, 10.0).item() >= 0
    with pytest.raises(ShapeMismatch):
        gradient_penalty(critic, real, fake[:1], 10.0)
    with pytest.raises(ValueError):
        gradient_penalty(critic, real, fake, -1.0)


def test_gp_uses_one_epsilon_per_sample():
    # with eps = 1 every interpolate is the real sample; with eps = 0 it is the fake
    critic = nn.Sequential(nn.Flatten(), nn.Linear(12, 1), nn.Tanh(), nn.Unflatten(1, (1, 1, 1))).double()
    real, fake = torch.rand(2, 3, 2, 2, dtype=torch.float64), torch.rand(2, 3, 2, 2, dtype=torch.float64)
    at_real = gradient_penalty(critic, real, fake, 1.0, epsilon=torch.ones(2, dtype=torch.float64))
    at_fake = gradient_penalty(critic, real, fake, 1.0, epsilon=torch.zeros(2, dtype=torch.float64))
    assert at_real.item() == pytest.approx(gradient_penalty(critic, real, real, 1.0).item(), abs=1e-12)
    assert at_fake.item() == pytest.approx(gradient_penalty(critic, fake, fake, 1.0).item(), abs=1e-12)


def test_autodiff_matches_finite_differences():
    torch.manual_seed(3)
    critic = nn.Sequential(nn.Conv2d(3, 4, 3), nn.Tanh(), nn.Conv2d(4, 1, 3)).double()
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
    score = lambda t: critic(t).reshape(1, -1).mean(dim=1)
    grad = _grad_wrt(score(x), x).detach()
    h = 1e-6
    for idx in [(0, 0, 0, 0), (0, 1, 3, 4), (0, 2, 7, 7), (0, 0, 4, 2)]:
        e = torch.zeros_like(x)
        e[idx] = h
        with torch.no_grad():
            fd = (score(x + e) - score(x - e)).item() / (2 * h)
        assert grad[idx].item() == pytest.approx(fd, abs=1e-5)


# --- loss identities -----------------------------------------------------------------

def test_critic_loss_stub_values():
    y = torch.full((2, 1, 3, 3), 2.0)
    g = torch.full((2, 1, 3, 3), 1.0)
    assert critic_loss(MeanCritic(), y, g, 0.0).item() == -1.0
    assert critic_loss(MeanCritic(), y, y.clone(), 0.0).item() == 0.0


def test_critic_loss_with_penalty():
    w = torch.zeros(3 * 4 * 4, dtype=torch.float64)
    w[0] = 3.0
    y = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    g = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    y[:, 0, 0, 0] = 0
    g[:, 0, 0, 0] = 0
    assert critic_loss(LinearCritic(w), y, g, 10.0).item() == pytest.approx(40.0, abs=1e-6)


def test_generator_loss_stub_values():
    ref = torch.full((2, 3, 4, 4), 0.5, dtype=torch.float64)
    zero = ConstantCritic(0.0)
    assert generator_loss(zero, ref.clone(), ref, 1000.0).item() == 0.0
    assert generator_loss(zero, ref + 0.1, ref, 1000.0).item() == pytest.approx(10.0, abs=1e-6)
    assert generator_loss(ConstantCritic(-3.0), ref + 0.1, ref, 0.0).item() == 3.0
    with pytest.raises(ShapeMismatch):
        generator_loss(zero, ref[:1], ref, 1.0)
    with pytest.raises(ShapeMismatch):
        critic_loss(zero, ref[:1], ref, 1.0)


# --- config and schedule -------------------------------------------------------------

def test_lr_schedule_endpoints():
    lrs = [lr_at_epoch(e, 50, 1e-4, 1e-6) for e in range(50)]
    assert lrs[0] == pytest.approx(1e-4, rel=1e-12)
    assert lrs[-1] == pytest.approx(1e-6, rel=1e-12)
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert lr_at_epoch(0, 1, 1e-4, 1e-6) == 1e-4


def test_train_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.pretrain_gen_epochs, c.pretrain_critic_epochs, c.adversarial_epochs) == (25, 10, 50)
    assert (c.lr_initial, c.lr_final, c.lambda_gp, c.lambda_mse) == (1e-4, 1e-6, 10.0, 1000.0)
    with pytest.raises(ValueError):
        TrainConfig(lr_final=1e-3)
    with pytest.raises(ValueError):
        TrainConfig(adversarial_epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(lambda_mse=-1)


def test_sub_seed_is_stable_and_distinct():
    assert sub_seed(0, "train") == sub_seed(0, "train")
    assert len({sub_seed(0, "train"), sub_seed(1, "train"), sub_seed(0, "critic")}) == 3
    assert 0 <= sub_seed(7, "x", 3) < 2**63


# --- phases --------------------------------------------------------------------------

def test_empty_dataset(tmp_path):
    empty = TensorSampleDataset([])
    gen = build_generator(GEN)
    with pytest.raises(EmptyDataset):
        pretrain_generator(gen, empty, small_config(), tmp_path)
    ckpt = tmp_path / "g.pt"
    torch.save({}, ckpt)
    with pytest.raises(EmptyDataset):
        pretrain_critic(build_critic("trainable_only", patch_size=SIZE), gen, empty, small_config(), tmp_path, ckpt)
    with pytest.raises(EmptyDataset):
        adversarial_train(gen, build_critic("trainable_only", patch_size=SIZE), empty, small_config(), tmp_path)


def test_zero_epochs_is_a_noop(tmp_path):
    gen = build_generator(GEN)
    before = parameter_checksum(gen)
    state = pretrain_generator(gen, toy_dataset(), small_config(pretrain_gen_epochs=0), tmp_path)
    assert state.epoch == -1 and state.step == 0 and state.gen_loss_history == []
    assert parameter_checksum(gen) == before
    assert load_checkpoint(state.checkpoint)["generator"].keys() == gen.state_dict().keys()


def test_missing_upstream_checkpoints(tmp_path):
    gen = build_generator(GEN)
    critic = build_critic("trainable_only", patch_size=SIZE)
    with pytest.raises(MissingGeneratorCheckpoint):
        pretrain_critic(critic, gen, toy_dataset(), small_config(), tmp_path, tmp_path / "absent.pt")
    with pytest.raises(MissingPretrainState):
        adversarial_train(gen, critic, toy_dataset(), small_config(), tmp_path, tmp_path / "absent.pt", tmp_path / "absent.pt")


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    data = toy_dataset()
    config = small_config(pretrain_gen_epochs=2, pretrain_critic_epochs=2, adversarial_epochs=2)
    gen = build_generator(GEN)
    g_state = pretrain_generator(gen, data, config, out)
    critic = build_critic("trainable_only", patch_size=SIZE, seed=2)
    frozen = build_generator(GEN)
    before = parameter_checksum(frozen)
    c_state = pretrain_critic(critic, frozen, data, config, out, g_state.checkpoint)
    return out, data, config, g_state, c_state, parameter_checksum(frozen), before


def test_pretrain_generator_outputs(pretrained):
    out, data, config, g_state, *_ = pretrained
    phase = out / "pretrain-gen"
    assert sorted(p.name for p in phase.glob("epoch_*.pt")) == ["epoch_0000.pt", "epoch_0001.pt"]
    assert (phase / "last.pt").is_file()
    records = [json.loads(line) for line in (phase / "losses.jsonl").read_text().splitlines()]
    assert len(records) == g_state.step == 4
    assert [r["l2"] for r in records] == g_state.gen_loss_history
    assert len(g_state.epoch_means) == 2


def test_pretrain_critic_leaves_generator_alone(pretrained):
    out, _, _, g_state, c_state, after, before = pretrained
    loaded = build_generator(GEN)
    loaded.load_state_dict(load_checkpoint(g_state.checkpoint)["generator"])
    assert after == parameter_checksum(loaded)
    assert after != before
    doc = load_checkpoint(c_state.checkpoint)
    assert doc["critic_config"]["kind"] == "trainable_only"
    assert len(c_state.critic_loss_history) == c_state.step == 4


def test_adversarial_schedule_and_critic_steps(pretrained, tmp_path):
    out, data, config, g_state, c_state, *_ = pretrained
    gen = build_generator(GEN)
    critic = build_critic("trainable_only", patch_size=SIZE, seed=2)
    state = adversarial_train(gen, critic, data, config, tmp_path, g_state.checkpoint, c_state.checkpoint)
    lrs = sorted({r["lr"] for r in state.records}, reverse=True)
    assert lrs == [pytest.approx(config.lr_initial), pytest.approx(config.lr_final)]
    doc = load_checkpoint(state.checkpoint)
    gen_steps = doc["gen_optimizer"]["state"][0]["step"].item()
    critic_steps = doc["critic_optimizer"]["state"][0]["step"].item()
    assert gen_steps == state.step == 4
    assert critic_steps == config.critic_steps_per_gen_step * gen_steps
    assert len(state.gen_loss_history) == len(state.critic_loss_history) == 4


def test_adversarial_resume_reproduces_losses(pretrained, tmp_path):
    out, data, config, g_state, c_state, *_ = pretrained
    full = adversarial_train(
        build_generator(GEN), build_critic("trainable_only", patch_size=SIZE, seed=2), data, config, tmp_path / "full", g_state.checkpoint, c_state.checkpoint
    )
    mid = tmp_path / "full" / "adversarial" / "epoch_0000.pt"
    resumed = adversarial_train(
        build_generator(GEN), build_critic("trainable_only", patch_size=SIZE, seed=9), data, config, tmp_path / "resumed", resume=mid
    )
    assert resumed.records == full.records
    assert resumed.gen_loss_history == full.gen_loss_history


def test_pretrain_generator_resume(tmp_path):
    data, config = toy_dataset(), small_config(pretrain_gen_epochs=2)
    full = pretrain_generator(build_generator(GEN), data, config, tmp_path / "a")
    resumed = pretrain_generator(build_generator(GEN), data, config, tmp_path / "b", resume=tmp_path / "a" / "pretrain-gen" / "epoch_0000.pt")
    assert resumed.records == full.records


def test_keep_checkpoints_prunes(tmp_path):
    config = small_config(pretrain_gen_epochs=3, keep_checkpoints=1)
    state = pretrain_generator(build_generator(GEN), toy_dataset(), config, tmp_path)
    phase = tmp_path / "pretrain-gen"
    assert [p.name for p in phase.glob("epoch_*.pt")] == ["epoch_0002.pt"]
    assert load_checkpoint(phase / "last.pt")["epoch"] == state.epoch == 2


def test_backbone_frozen_through_all_phases(backbone64, tmp_path):
    data = toy_dataset()
    config = small_config()
    before = parameter_checksum(backbone64)
    gen = build_generator(GEN)
    g_state = pretrain_generator(gen, data, config, tmp_path)
    critic = build_critic("opt", backbone=backbone64, patch_size=SIZE)
    c_state = pretrain_critic(critic, build_generator(GEN), data, config, tmp_path, g_state.checkpoint)
    adversarial_train(gen, critic, data, config, tmp_path, g_state.checkpoint, c_state.checkpoint)
    assert parameter_checksum(backbone64) == before
    assert load_checkpoint(c_state.checkpoint)["backbone"]["checksum"] == backbone64.weights_checksum


def test_critic_gap_values():
    data = toy_dataset(4)
    gen = build_generator(GEN)
    gap = critic_gap(MeanCritic(), gen, data)
    assert math.isfinite(gap)
    assert critic_gap(ConstantCritic(1.0), gen, data) == 0.0
