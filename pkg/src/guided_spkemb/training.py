"""AAM-softmax training with Adam, a cyclical learning rate and on-the-fly mixtures."""

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import DivergenceError
from .layers import Module, _param
from .models import ModelConfig, build_model, save_checkpoint
from .synth import SynthConfig, mix_sources, synth_speaker_bank, synth_utterance, training_mixture_layout


class AAMHead(Module):
    """Class weights for additive angular margin softmax."""

    def __init__(self, n_classes, embedding_dim, margin=0.2, scale=30.0, rng=None):
        if not 0.0 <= margin < math.pi / 2:
            raise ValueError(f"margin must be in [0, pi/2), got {margin}")
        if scale <= 0:
            raise ValueError(f"scale must be positive, got {scale}")
        rng = np.random.default_rng(rng)
        self.weight = _param(rng.normal(0, 1, (n_classes, embedding_dim)), "weight")
        self.margin = float(margin)
        self.scale = float(scale)

    @property
    def n_classes(self):
        return self.weight.shape[0]


def _l2_normalize(x, axis=-1):
    return x / ad.sqrt(ad.tsum(x * x, axis=axis, keepdims=True))


def cosine_logits(embeddings, head):
    """``B x C`` cosines between normalized embeddings and normalized class weights."""
    return ad.matmul(_l2_normalize(ad.as_tensor(embeddings)), _l2_normalize(head.weight).transpose())


def aam_logits(embeddings, labels, head):
    emb = ad.as_tensor(embeddings)
    if not np.all(np.isfinite(emb.data)):
        raise ValueError("non-finite embedding")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (emb.shape[0],):
        raise ValueError(f"need one label per embedding, got {labels.shape} for {emb.shape[0]} embeddings")
    if labels.min() < 0 or labels.max() >= head.n_classes:
        raise ValueError(f"labels must lie in [0, {head.n_classes})")
    cos = cosine_logits(emb, head)
    rows = np.arange(labels.size)
    c = cos[rows, labels]
    m = head.margin
    one_minus = 1.0 - c * c
    sin = ad.sqrt(ad.where(one_minus.data > 0, one_minus, 0.0))
    phi = c * math.cos(m) - sin * math.sin(m)
    # past theta + m = pi, cos(theta + m) stops decreasing; fall back to a linear penalty
    target = ad.where(c.data > math.cos(math.pi - m), phi, c - math.sin(math.pi - m) * m)
    onehot = np.zeros(cos.shape)
    onehot[rows, labels] = 1.0
    delta = ad.reshape(target - c, (-1, 1)) * onehot
    return (cos + delta) * head.scale


def aam_softmax_loss(embeddings, labels, head):
    """Mean cross-entropy over margin-adjusted, scaled cosine logits."""
    logits = aam_logits(embeddings, labels, head)
    logp = ad.log_softmax(logits, axis=1)
    labels = np.asarray(labels, dtype=np.int64)
    return -ad.mean(logp[np.arange(labels.size), labels])


# learning rate


@dataclass
class LRSchedule:
    base_lr: float = 1e-5
    max_lr: float = 1e-3
    cycle_epochs: int = 20
    warmup_iters: int = 1000

    def __post_init__(self):
        if not 0 < self.base_lr <= self.max_lr:
            raise ValueError("need 0 < base_lr <= max_lr")
        if self.cycle_epochs < 1 or self.warmup_iters < 0:
            raise ValueError("cycle_epochs must be >= 1 and warmup_iters >= 0")


def cyclical_lr(iteration, iters_per_epoch, schedule):
    """Linear warmup then cosine decay back to ``base_lr``, restarting every cycle.

    The last iteration of a cycle lands exactly on ``base_lr``, as does the
    first iteration of the next.
    """
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    s = schedule
    cycle = s.cycle_epochs * iters_per_epoch
    i = iteration % cycle
    warm = min(s.warmup_iters, cycle - 1)
    if i < warm:
        return s.base_lr + (s.max_lr - s.base_lr) * i / warm
    span = cycle - 1 - warm
    if span <= 0:
        return s.max_lr
    frac = (i - warm) / span
    return s.base_lr + (s.max_lr - s.base_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))


# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: list = None
    v: list = None


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place bias-corrected Adam update. Returns ``False`` (and changes nothing) on a non-finite gradient."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    grads = [np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64) for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
    if not all(np.all(np.isfinite(g)) for g in grads):
        return False
    if state.m is None:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return True


# batches


@dataclass
class TrainConfig:
    n_speakers: int = 64
    bank_seed: int = 0
    epochs: int = 40
    iters_per_epoch: int = 15
    mixtures_per_batch: int = 16
    speakers_per_mixture: int = 3
    window_frames: int = 250
    clip_frames: tuple = (100, 200)
    shift_min_frames: int = 50
    margin: float = 0.2
    scale: float = 30.0
    base_lr: float = 1e-5
    max_lr: float = 2e-3
    cycle_epochs: int = 40
    warmup_iters: int = 30
    threads: int = 1

    def __post_init__(self):
        self.clip_frames = tuple(self.clip_frames)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def schedule(self):
        return LRSchedule(self.base_lr, self.max_lr, self.cycle_epochs, self.warmup_iters)


@dataclass
class Batch:
    features: np.ndarray  # B x F x T
    q_target: np.ndarray  # B x T
    q_nontarget: np.ndarray
    labels: np.ndarray


def mixture_batch(bank, rng, cfg, synth_config=None):
    """Mixtures of ``speakers_per_mixture`` speakers; each speaker takes a turn as target."""
    scfg = synth_config or SynthConfig()
    T = cfg.window_frames
    feats, qt, qn, labels = [], [], [], []
    for _ in range(cfg.mixtures_per_batch):
        spk_idx = rng.choice(len(bank), cfg.speakers_per_mixture, replace=False)
        onsets, durs = training_mixture_layout(rng, cfg.speakers_per_mixture, T, cfg.clip_frames, cfg.shift_min_frames)
        sources = [(synth_utterance(bank[i], d, rng, scfg), o) for i, d, o in zip(spk_idx, durs, onsets)]
        x = mix_sources(sources, T, rng, scfg)
        active = np.zeros((len(spk_idx), T), dtype=np.int8)
        for k, (o, d) in enumerate(zip(onsets, durs)):
            active[k, o : o + d] = 1
        for k, i in enumerate(spk_idx):
            feats.append(x)
            qt.append(active[k])
            qn.append(np.delete(active, k, axis=0).max(axis=0))
            labels.append(i)
    return Batch(np.stack(feats), np.stack(qt), np.stack(qn), np.asarray(labels, dtype=np.int64))


def single_speaker_batch(bank, rng, cfg, synth_config=None):
    """Clean single-speaker crops, as many as a mixture batch yields."""
    scfg = synth_config or SynthConfig()
    T = cfg.window_frames
    B = cfg.mixtures_per_batch * cfg.speakers_per_mixture
    labels = rng.integers(0, len(bank), B)
    feats = np.stack([mix_sources([(synth_utterance(bank[i], T, rng, scfg), 0)], T, rng, scfg) for i in labels])
    ones = np.ones((B, T), dtype=np.int8)
    return Batch(feats, ones, np.zeros_like(ones), labels.astype(np.int64))


# run


@dataclass
class TrainResult:
    model: object
    head: AAMHead
    metrics: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def _format_metrics(record):
    return json.dumps(record, sort_keys=True)


def train_run(model_config, train_config=None, seed=0, out_dir=None, synth_config=None, bank=None, log=None):
    """Train one extractor; returns the model, its AAM head, per-step metrics and checkpoint paths.

    With ``out_dir`` the metrics log is written to ``out_dir/metrics.log`` and a
    checkpoint to ``out_dir/checkpoints`` at the end of every LR cycle and of the run.
    """
    cfg = train_config or TrainConfig()
    mcfg = model_config if isinstance(model_config, ModelConfig) else ModelConfig.from_dict(model_config)
    scfg = synth_config or SynthConfig(n_mels=mcfg.n_mels)
    if scfg.n_mels != mcfg.n_mels:
        raise ValueError("synthetic features and model disagree on n_mels")
    bank = bank if bank is not None else synth_speaker_bank(cfg.bank_seed, cfg.n_speakers, scfg)
    rng = np.random.default_rng(seed)
    model = build_model(mcfg, seed)
    head = AAMHead(len(bank), mcfg.embedding_dim, cfg.margin, cfg.scale, rng=seed + 1)
    params = model.parameters() + head.parameters()
    state = AdamState()
    schedule = cfg.schedule()
    make_batch = mixture_batch if mcfg.guided else single_speaker_batch
    result = TrainResult(model, head)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "metrics.log", "w")
    cycle_iters = cfg.cycle_epochs * cfg.iters_per_epoch
    total = cfg.epochs * cfg.iters_per_epoch
    last_good = None
    try:
        with threadpool_limits(limits=cfg.threads):
            model.train()
            for step in range(total):
                batch = make_batch(bank, rng, cfg, scfg)
                lr = cyclical_lr(step, cfg.iters_per_epoch, schedule)
                with Tape() as tape:
                    emb = model(batch.features, batch.q_target, batch.q_nontarget)
                    loss = aam_softmax_loss(emb, batch.labels, head)
                if not np.isfinite(loss.data):
                    if out is not None:
                        last_good = out / "checkpoints" / "last-good.ckpt"
                        save_checkpoint(last_good, model, {"step": step, "reason": "divergence"})
                    raise DivergenceError(f"non-finite loss at step {step}", last_good=last_good)
                tape.backward(loss)
                grads = [p.grad for p in params]
                grad_norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None)))
                applied = adam_step(params, grads, state, lr)
                acc = float(np.mean(np.argmax(cosine_logits(emb.data, head).data, axis=1) == batch.labels))
                record = {
                    "step": step,
                    "epoch": step // cfg.iters_per_epoch,
                    "lr": lr,
                    "loss": float(loss.data),
                    "grad_norm": grad_norm,
                    "acc": acc,
                }
                if not applied:
                    record["skipped"] = True
                result.metrics.append(record)
                if log_fh is not None:
                    log_fh.write(_format_metrics(record) + "\n")
                if log is not None:
                    log(record)
                end_of_cycle = (step + 1) % cycle_iters == 0
                if out is not None and (end_of_cycle or step + 1 == total):
                    path = out / "checkpoints" / f"step{step + 1:06d}.ckpt"
                    save_checkpoint(path, model, {"step": step + 1, "train": asdict(cfg)})
                    result.checkpoints.append(path)
            model.eval()
    finally:
        if log_fh is not None:
            log_fh.close()
    return result
