"""
Tests for joint pretraining: loss combination, schedules, batches,
optimizer steps, checkpoints and resume.
"""

import dataclasses
import math

import pytest
import torch

from lego import trainer
from lego.codebook import TextKnowledgeCodebook, TokenCache
from lego.errors import (
    ConfigurationError,
    DivergenceError,
    IntegrityError,
    ValidationError,
)
from lego.integrity import unpack_artifact
from lego.trainer import (
    LegoModel,
    PretrainConfig,
    batch_indices,
    build_state,
    combine_losses,
    cosine_schedule,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    load_encoder,
    lr_schedule,
    make_batch,
    pretrain_step,
    run_pretraining,
    save_checkpoint,
)
from lego.tvqvae import TvqvaeModel


def _state_dicts_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(
        torch.equal(sa[k], sb[k]) for k in sa
    )


@pytest.fixture
def no_warmup(tiny_pretrain_config):
    """Tiny config whose first step already has a non-zero rate."""
    return dataclasses.replace(tiny_pretrain_config, warmup_epochs=0)


@pytest.fixture
def token_cache(tiny_codebook):
    return TokenCache(tiny_codebook)


# ---------------------------------------------------------------------------
# Losses and schedules
# ---------------------------------------------------------------------------


def test_combine_losses_weights_terms():
    """total = L_c + alpha * L_m + beta * L_r."""
    total = combine_losses(
        torch.tensor(1.0), torch.tensor(2.0), torch.tensor(3.0), 0.1, 1.0
    )
    assert float(total) == pytest.approx(4.2)


def test_combine_losses_names_the_diverged_task():
    """A NaN in the MIM term raises DivergenceError for MIM."""
    with pytest.raises(DivergenceError) as err:
        combine_losses(
            torch.tensor(1.0),
            torch.tensor(float("nan")),
            torch.tensor(0.0),
            0.1,
            1.0,
            step=7,
        )
    assert err.value.task == "MIM"
    assert err.value.step == 7


def test_cosine_schedule_shape():
    """Linear warmup, peak at the end of warmup, cosine to zero."""
    assert cosine_schedule(0, 1.0, 10, 110) == 0.0
    assert cosine_schedule(5, 1.0, 10, 110) == pytest.approx(0.5)
    assert cosine_schedule(10, 1.0, 10, 110) == pytest.approx(1.0)
    assert cosine_schedule(60, 1.0, 10, 110) == pytest.approx(0.5)
    assert cosine_schedule(110, 1.0, 10, 110) == 0.0


def test_lr_schedule_uses_epoch_warmup(tiny_pretrain_config):
    """One warmup epoch over 16 images at batch 4 spans four steps."""
    cfg = dataclasses.replace(tiny_pretrain_config, epochs=3)
    assert lr_schedule(2, cfg, 16) == pytest.approx(cfg.lr_init / 2)
    assert lr_schedule(4, cfg, 16) == pytest.approx(cfg.lr_init)


@pytest.mark.parametrize(
    "overrides",
    [
        {"tau": 0.0},
        {"ema_m": 1.5},
        {"mask_ratio": -0.1},
        {"alpha": math.inf},
        {"embed_dim": 25, "num_heads": 2},
        {"n_portions": 4},
        {"use_sid": False, "use_mim": False, "use_rtr": False},
    ],
)
def test_config_validation(overrides):
    """Out-of-range hyperparameters are configuration errors."""
    with pytest.raises(ConfigurationError):
        PretrainConfig(**overrides).validate()


def test_plain_rtr_allows_other_portion_counts():
    """Without the codebook RTR may use any strip count."""
    PretrainConfig(n_portions=4, use_codebook=False).validate()


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


def test_batch_indices_cover_an_epoch(tiny_pretrain_config):
    """Each epoch visits every image exactly once."""
    seen = []
    for step in range(3):
        seen += batch_indices(tiny_pretrain_config, 10, step)
    assert sorted(seen) == list(range(10))
    assert len(batch_indices(tiny_pretrain_config, 10, 2)) == 2


def test_make_batch_is_deterministic(samples, token_cache, no_warmup):
    """A step's batch depends only on (seed, step)."""
    first = make_batch(samples, token_cache, no_warmup, 3)
    second = make_batch(samples, token_cache, no_warmup, 3)
    threaded = make_batch(samples, token_cache, no_warmup, 3, workers=2)
    assert tuple(first.view_a.shape) == (4, 3, 32, 128)
    assert tuple(first.tokens.shape) == (4, 8)
    assert first.source_ids == second.source_ids == threaded.source_ids
    for other in (second, threaded):
        assert torch.equal(first.view_a, other.view_a)
        assert torch.equal(first.view_b, other.view_b)
        assert torch.equal(first.tokens, other.tokens)


# ---------------------------------------------------------------------------
# Model and steps
# ---------------------------------------------------------------------------


def test_momentum_branch_is_frozen(no_warmup):
    """Momentum parameters never reach the optimizer."""
    model = LegoModel(no_warmup, latent_dim=8)
    momentum = model.momentum_parameters()
    assert momentum
    assert not any(p.requires_grad for p in momentum)
    online_ids = {id(p) for p in model.online_parameters()}
    assert not online_ids & {id(p) for p in momentum}


def test_pretrain_step_updates_online_and_momentum(
    samples, tiny_codebook, token_cache, no_warmup
):
    """One step moves the online encoder and drags the EMA copy along."""
    state = build_state(no_warmup, tiny_codebook, len(samples))
    model = state.model
    before = model.encoder.pos_embed.detach().clone()
    momentum_before = model.momentum_encoder.pos_embed.detach().clone()

    batch = make_batch(samples, token_cache, no_warmup, 0)
    state, losses = pretrain_step(state, batch, tiny_codebook)

    after = model.encoder.pos_embed.detach()
    momentum_after = model.momentum_encoder.pos_embed.detach()
    assert state.step == 1
    assert len(state.history) == 1
    keys = {"step", "L_c", "L_m", "L_r", "total", "lr"}
    assert set(state.history[0]) == keys
    assert not torch.equal(before, after)
    assert not torch.equal(momentum_before, momentum_after)
    expected = 0.99 * momentum_before + 0.01 * after
    assert torch.allclose(momentum_after, expected, atol=1e-6)
    assert all(math.isfinite(v) for v in losses.as_record().values())


def test_pretrain_step_checks_codebook_hash(
    samples, tiny_codebook, token_cache, no_warmup
):
    """A state trained against another codebook refuses to step."""
    state = build_state(no_warmup, tiny_codebook, len(samples))
    state.codebook_hash = "0" * 64
    batch = make_batch(samples, token_cache, no_warmup, 0)
    with pytest.raises(ConfigurationError):
        pretrain_step(state, batch, tiny_codebook)


def test_ablation_without_codebook(samples, tiny_codebook, no_warmup):
    """Plain SID, MIM and RTR still train without codebook guidance."""
    cfg = dataclasses.replace(no_warmup, use_codebook=False)
    state = build_state(cfg, tiny_codebook, len(samples))
    batch = make_batch(samples, TokenCache(tiny_codebook), cfg, 0)
    _, losses = pretrain_step(state, batch, tiny_codebook)
    assert math.isfinite(float(losses.total))


def test_ablation_without_sid(samples, tiny_codebook, no_warmup):
    """Dropping SID removes the momentum branch and zeroes L_c."""
    cfg = dataclasses.replace(no_warmup, use_sid=False)
    state = build_state(cfg, tiny_codebook, len(samples))
    assert state.model.momentum_encoder is None
    assert state.model.projector is None
    batch = make_batch(samples, TokenCache(tiny_codebook), cfg, 0)
    _, losses = pretrain_step(state, batch, tiny_codebook)
    assert float(losses.L_c) == 0.0
    assert float(losses.L_m) > 0.0


def test_divergence_saves_checkpoint(
    monkeypatch, tmp_path, samples, tiny_codebook, token_cache, no_warmup
):
    """A NaN loss writes a checkpoint and raises for the right task."""

    def nan_losses(model, batch, codebook, step):
        zero = batch.images.new_zeros(())
        return zero + float("nan"), zero, zero

    monkeypatch.setattr(trainer, "compute_losses", nan_losses)
    state = build_state(no_warmup, tiny_codebook, len(samples))
    batch = make_batch(samples, token_cache, no_warmup, 0)
    with pytest.raises(DivergenceError) as err:
        pretrain_step(state, batch, tiny_codebook, tmp_path)
    assert err.value.task == "SID"
    saved = load_checkpoint(tmp_path / "diverged_000000.ckpt", tiny_codebook)
    assert saved.step == 0


# ---------------------------------------------------------------------------
# Runs and checkpoints
# ---------------------------------------------------------------------------


def test_run_pretraining_writes_metrics_and_checkpoint(
    tmp_path, samples, tiny_codebook, no_warmup
):
    """An epoch of 16 images at batch 4 logs four steps."""
    state = run_pretraining(no_warmup, samples, tiny_codebook, tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 4 == state.step
    restored = load_checkpoint(tmp_path / "last.ckpt", tiny_codebook)
    assert restored.step == 4
    assert _state_dicts_equal(restored.model, state.model)


def test_run_pretraining_rejects_empty_corpus(tiny_codebook, no_warmup):
    """Training needs at least one image."""
    with pytest.raises(ValidationError):
        run_pretraining(no_warmup, [], tiny_codebook)


def test_resume_matches_uninterrupted_run(
    tmp_path, samples, tiny_codebook, no_warmup
):
    """Stopping at step 2 and resuming reproduces the straight run."""
    cfg = dataclasses.replace(no_warmup, epochs=2)
    straight = run_pretraining(cfg, samples, tiny_codebook, tmp_path / "a")

    out = tmp_path / "b"
    run_pretraining(cfg, samples, tiny_codebook, out, stop_at=2)
    assert load_checkpoint(out / "last.ckpt").step == 2
    resumed = run_pretraining(
        cfg, samples, tiny_codebook, out, resume=out / "last.ckpt"
    )

    assert resumed.step == straight.step == 8
    assert (out / "metrics.jsonl").read_text() == (
        tmp_path / "a" / "metrics.jsonl"
    ).read_text()
    assert _state_dicts_equal(resumed.model, straight.model)


def test_resume_from_earlier_checkpoint_rewrites_metrics(
    tmp_path, samples, tiny_codebook, no_warmup
):
    """Records past the checkpoint are replayed, not duplicated."""
    cfg = dataclasses.replace(no_warmup, checkpoint_every=2)
    run_pretraining(cfg, samples, tiny_codebook, tmp_path)
    before = (tmp_path / "metrics.jsonl").read_text()

    run_pretraining(
        cfg,
        samples,
        tiny_codebook,
        tmp_path,
        resume=tmp_path / "step_000002.ckpt",
    )
    assert (tmp_path / "metrics.jsonl").read_text() == before


def test_truncate_metrics_keeps_earlier_steps(tmp_path):
    """Only records of steps before the resume point survive."""
    path = tmp_path / "metrics.jsonl"
    path.write_text("".join(f'{{"step": {i}}}\n' for i in range(4)))
    trainer._truncate_metrics(path, 2)
    assert path.read_text() == '{"step": 0}\n{"step": 1}\n'
    trainer._truncate_metrics(tmp_path / "missing.jsonl", 2)
    assert not (tmp_path / "missing.jsonl").exists()


def test_pretraining_leaves_codebook_untouched(
    tmp_path, samples, tiny_codebook, no_warmup
):
    """The codebook weights hash the same before and after a run."""
    before = tiny_codebook.model.content_hash()
    run_pretraining(no_warmup, samples, tiny_codebook, tmp_path)
    assert tiny_codebook.model.content_hash() == before
    tiny_codebook.verify(tiny_codebook.content_hash)


def test_checkpoint_holds_only_model_and_optimizer_tensors(
    samples, tiny_codebook, token_cache, no_warmup
):
    """Randomness is recorded as (seed, step); no generator state."""
    state = build_state(no_warmup, tiny_codebook, len(samples))
    batch = make_batch(samples, token_cache, no_warmup, 0)
    state, _ = pretrain_step(state, batch, tiny_codebook)
    meta, tensors = unpack_artifact(
        encode_checkpoint(state),
        trainer.CHECKPOINT_MAGIC,
        trainer.CHECKPOINT_VERSION,
    )
    assert meta["rng"] == {"seed": no_warmup.seed, "step": 1}
    assert all(k.startswith(("model.", "optimizer.")) for k in tensors)
    assert any(k.startswith("optimizer.") for k in tensors)


def test_resume_with_other_config_rejected(
    tmp_path, samples, tiny_codebook, no_warmup
):
    """A checkpoint only resumes the configuration that wrote it."""
    run_pretraining(no_warmup, samples, tiny_codebook, tmp_path, stop_at=1)
    other = dataclasses.replace(no_warmup, alpha=0.5)
    with pytest.raises(ConfigurationError):
        run_pretraining(
            other, samples, tiny_codebook, resume=tmp_path / "last.ckpt"
        )


def test_checkpoint_bytes_are_stable(
    samples, tiny_codebook, token_cache, no_warmup
):
    """Decoding and re-encoding a checkpoint gives the same bytes."""
    state = build_state(no_warmup, tiny_codebook, len(samples))
    batch = make_batch(samples, token_cache, no_warmup, 0)
    state, _ = pretrain_step(state, batch, tiny_codebook)
    data = encode_checkpoint(state)
    assert encode_checkpoint(decode_checkpoint(data, tiny_codebook)) == data


def test_checkpoint_against_other_codebook(
    tmp_path, samples, tiny_codebook, tiny_tvqvae_config, no_warmup
):
    """Loading with a different codebook is a configuration error."""
    state = build_state(no_warmup, tiny_codebook, len(samples))
    path = tmp_path / "state.ckpt"
    save_checkpoint(state, path)

    torch.manual_seed(1)
    other = TextKnowledgeCodebook(TvqvaeModel(tiny_tvqvae_config))
    with pytest.raises(ConfigurationError):
        load_checkpoint(path, other)


def test_corrupted_checkpoint_rejected(
    tmp_path, samples, tiny_codebook, no_warmup
):
    """A flipped byte fails the integrity check; a missing file is named."""
    path = tmp_path / "state.ckpt"
    save_checkpoint(build_state(no_warmup, tiny_codebook, 16), path)
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(IntegrityError):
        load_checkpoint(path)
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_load_encoder_returns_online_encoder(
    tmp_path, tiny_codebook, no_warmup
):
    """load_encoder exposes the online ViT of a checkpoint."""
    state = build_state(no_warmup, tiny_codebook, 16)
    path = tmp_path / "state.ckpt"
    save_checkpoint(state, path)
    assert _state_dicts_equal(load_encoder(path), state.model.encoder)
