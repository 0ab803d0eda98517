import json
import math

import numpy as np
import pytest

from guided_spkemb import autodiff as ad
from guided_spkemb.autodiff import Tape, Tensor
from guided_spkemb.features import ActivityMask
from guided_spkemb.models import ModelConfig, extract_embedding, load_checkpoint
from guided_spkemb.synth import synth_speaker_bank
from guided_spkemb.training import (
    AAMHead,
    AdamState,
    LRSchedule,
    TrainConfig,
    aam_logits,
    aam_softmax_loss,
    adam_step,
    cyclical_lr,
    mixture_batch,
    single_speaker_batch,
    train_run,
)

TINY_MODEL = dict(n_mels=40, channels=16, num_blocks=1, kernel_sizes=[3], dilations=[2], embedding_dim=8,
                  attention_dim=8)
TINY_TRAIN = dict(n_speakers=6, epochs=2, iters_per_epoch=2, mixtures_per_batch=2, window_frames=120,
                  clip_frames=(50, 80), shift_min_frames=10, cycle_epochs=1, warmup_iters=1)


def test_aam_aligned_target_logit():
    head = AAMHead(3, 4, margin=0.2, scale=30.0, rng=0)
    emb = head.weight.data[1:2] * 2.5
    logits = aam_logits(emb, [1], head).data
    assert logits[0, 1] == pytest.approx(30 * math.cos(0.2), abs=1e-9)


def test_aam_without_margin_is_softmax_cross_entropy():
    rng = np.random.default_rng(0)
    head = AAMHead(5, 6, margin=0.0, scale=1.0, rng=1)
    emb = rng.normal(size=(4, 6))
    labels = np.array([0, 3, 4, 3])
    W = head.weight.data / np.linalg.norm(head.weight.data, axis=1, keepdims=True)
    cos = emb / np.linalg.norm(emb, axis=1, keepdims=True) @ W.T
    expected = np.mean(np.log(np.exp(cos).sum(axis=1)) - cos[np.arange(4), labels])
    assert aam_softmax_loss(emb, labels, head).item() == pytest.approx(expected, abs=1e-12)


def test_aam_input_checks():
    head = AAMHead(3, 2, rng=0)
    with pytest.raises(ValueError):
        aam_softmax_loss(np.array([[np.nan, 1.0]]), [0], head)
    with pytest.raises(ValueError):
        aam_softmax_loss(np.ones((1, 2)), [3], head)
    with pytest.raises(ValueError):
        AAMHead(3, 2, margin=2.0)


def test_aam_loss_decreases_on_toy_problem():
    rng = np.random.default_rng(2)
    centers = np.eye(4) * 3
    x = np.concatenate([centers[c] + rng.normal(0, 0.3, (10, 4)) for c in range(4)])
    y = np.repeat(np.arange(4), 10)
    W = Tensor(rng.normal(0, 0.5, (4, 4)), requires_grad=True)
    head = AAMHead(4, 4, margin=0.2, scale=10.0, rng=3)
    params = [W, head.weight]
    state = AdamState()
    losses = []
    for _ in range(50):
        with Tape() as tape:
            loss = aam_softmax_loss(ad.matmul(x, W), y, head)
        tape.backward(loss)
        adam_step(params, [p.grad for p in params], state, 0.05)
        losses.append(loss.item())
    assert losses[-1] < 0.5 * losses[0]
    assert np.mean(np.diff(losses) < 0) > 0.8


def test_lr_boundaries():
    s = LRSchedule(base_lr=1e-5, max_lr=1e-3, cycle_epochs=20, warmup_iters=1000)
    assert cyclical_lr(0, 100, s) == pytest.approx(1e-5, abs=1e-15)
    assert cyclical_lr(1000, 100, s) == pytest.approx(1e-3, abs=1e-15)
    assert abs(cyclical_lr(1999, 100, s) - 1e-5) < 1e-12
    assert abs(cyclical_lr(2000, 100, s) - 1e-5) < 1e-12
    with pytest.raises(ValueError):
        LRSchedule(base_lr=1e-2, max_lr=1e-3)


def test_adam_first_step_and_zero_gradient():
    p = Tensor(np.array([1.0, -2.0, 0.5]))
    adam_step([p], [np.array([0.3, -4.0, 1e-3])], AdamState(), 0.01)
    np.testing.assert_allclose(np.abs(p.data - [1.0, -2.0, 0.5]), 0.01, rtol=1e-5)
    q = Tensor(np.array([1.0, 2.0]))
    adam_step([q], [np.zeros(2)], AdamState(), 0.01)
    np.testing.assert_array_equal(q.data, [1.0, 2.0])


def test_adam_minimizes_square():
    x = Tensor(np.array([1.0]))
    state = AdamState()
    prev = 1.0
    for _ in range(10):
        adam_step([x], [2 * x.data], state, 0.05)
        assert abs(x.data[0]) < prev
        prev = abs(x.data[0])


def test_adam_skips_non_finite_gradient():
    x = Tensor(np.array([1.0]))
    state = AdamState()
    assert adam_step([x], [np.array([np.inf])], state, 0.1) is False
    assert x.data[0] == 1.0 and state.step == 0


def test_batches_have_consistent_masks():
    bank = synth_speaker_bank(0, 6)
    rng = np.random.default_rng(0)
    cfg = TrainConfig(**TINY_TRAIN)
    b = mixture_batch(bank, rng, cfg)
    assert b.features.shape == (6, 40, 120) and b.q_target.shape == (6, 120)
    assert np.all(b.q_target.sum(axis=1) >= 50)
    # rows from one mixture share features; a speaker's target row shows up in the others' non-target rows
    for m in range(2):
        rows = slice(3 * m, 3 * m + 3)
        assert np.all(b.features[rows] == b.features[3 * m])
        assert np.array_equal(b.q_nontarget[3 * m], np.maximum(b.q_target[3 * m + 1], b.q_target[3 * m + 2]))
    s = single_speaker_batch(bank, rng, cfg)
    assert s.q_target.all() and not s.q_nontarget.any()


@pytest.mark.parametrize("preset", ["baseline", "proposed"])
def test_train_run_is_deterministic(tmp_path, preset):
    mcfg = ModelConfig.preset(preset, **TINY_MODEL)
    runs = [train_run(mcfg, TrainConfig(**TINY_TRAIN), seed=7, out_dir=tmp_path / f"r{i}") for i in range(2)]
    logs = [(tmp_path / f"r{i}" / "metrics.log").read_bytes() for i in range(2)]
    assert logs[0] == logs[1]
    assert len(logs[0].splitlines()) == 4
    record = json.loads(logs[0].splitlines()[0])
    assert set(record) == {"step", "epoch", "lr", "loss", "grad_norm", "acc"}
    names = [p.name for p in runs[0].checkpoints]
    assert names == ["step000002.ckpt", "step000004.ckpt"]
    for a, b in zip(runs[0].checkpoints, runs[1].checkpoints):
        assert a.read_bytes() == b.read_bytes()


def test_trained_checkpoint_roundtrip(tmp_path):
    mcfg = ModelConfig.preset("no-guided-bn", **TINY_MODEL)
    result = train_run(mcfg, TrainConfig(**TINY_TRAIN), seed=1, out_dir=tmp_path)
    loaded, meta = load_checkpoint(result.checkpoints[-1])
    assert loaded.config.guide_bn is False and loaded.config.guide_se_or_cam is True
    x = np.random.default_rng(0).normal(size=(40, 70))
    mask = ActivityMask(np.r_[np.ones(40), np.zeros(30)], np.r_[np.zeros(20), np.ones(50)])
    assert extract_embedding(loaded, x, mask).tobytes() == extract_embedding(result.model, x, mask).tobytes()


def test_train_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 1, "learning_rate": 3})
