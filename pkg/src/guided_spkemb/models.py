"""Scaled-down ECAPA-TDNN and CAM++ style extractors with guide switches."""

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, EmptyTargetMask, MissingMask
from .features import ActivityMask, FeatureSequence
from .layers import AttentiveStatsPool, BatchNorm1d, CAMLayer, Conv1d, Linear, Module, SEBlock

CHECKPOINT_VERSION = 1
FAMILIES = ("ecapa-mini", "campp-mini")


@dataclass
class ModelConfig:
    family: str = "ecapa-mini"
    n_mels: int = 40
    channels: int = 64
    num_blocks: int = 3
    kernel_sizes: list = field(default_factory=lambda: [3, 3, 3])
    dilations: list = field(default_factory=lambda: [2, 3, 4])
    stem_kernel: int = 5
    embedding_dim: int = 32
    se_reduction: int = 4
    res2_scale: int = 2
    attention_dim: int = 32
    cam_seg_len: int = 10
    guide_input: bool = False
    guide_pooling: bool = False
    guide_se_or_cam: bool = False
    guide_bn: bool = False
    pointwise_only: bool = False

    def __post_init__(self):
        self.kernel_sizes = list(self.kernel_sizes)
        self.dilations = list(self.dilations)

    def validate(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.num_blocks < 1:
            raise ValueError("at least one block is required")
        if len(self.kernel_sizes) != self.num_blocks or len(self.dilations) != self.num_blocks:
            raise ValueError("kernel_sizes and dilations need one entry per block")
        if self.channels < self.se_reduction or self.channels % self.se_reduction:
            raise ValueError(f"channels ({self.channels}) must be a positive multiple of se_reduction")
        if self.family == "ecapa-mini" and self.channels % self.res2_scale:
            raise ValueError("channels must be divisible by res2_scale")
        if any(k < 1 for k in self.kernel_sizes) or any(d < 1 for d in self.dilations):
            raise ValueError("kernel sizes and dilations must be positive")
        return self

    @property
    def guided(self):
        return self.guide_input or self.guide_pooling or self.guide_se_or_cam or self.guide_bn

    def kernel(self, k):
        return 1 if self.pointwise_only else k

    @classmethod
    def preset(cls, name, **overrides):
        """Named configurations: ``baseline``, ``guided``, ``proposed`` and the ablations."""
        flags = {
            "baseline": dict(),
            "guided": dict(guide_input=True, guide_pooling=True),
            "proposed": dict(guide_input=True, guide_pooling=True, guide_se_or_cam=True, guide_bn=True),
            "no-guided-bn": dict(guide_input=True, guide_pooling=True, guide_se_or_cam=True),
            "no-guided-se": dict(guide_input=True, guide_pooling=True, guide_bn=True),
        }
        if name not in flags:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(flags)}")
        return cls(**{**flags[name], **overrides})

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class TDNNLayer(Module):
    """conv -> ReLU -> batch norm."""

    def __init__(self, c_in, c_out, kernel_size, dilation, rng):
        self.conv = Conv1d(c_in, c_out, kernel_size, dilation, rng=rng)
        self.bn = BatchNorm1d(c_out)

    def __call__(self, x, bn_mask=None):
        return self.bn(self.conv(x).relu(), bn_mask)


class SERes2Block(Module):
    def __init__(self, D, kernel_size, dilation, scale, r, rng):
        self.scale = scale
        width = D // scale
        self.tdnn1 = TDNNLayer(D, D, 1, 1, rng)
        self.res2 = [TDNNLayer(width, width, kernel_size, dilation, rng) for _ in range(scale - 1)]
        self.tdnn2 = TDNNLayer(D, D, 1, 1, rng)
        self.se = SEBlock(D, r, rng)

    def __call__(self, x, bn_mask=None, se_mask=None):
        h = self.tdnn1(x, bn_mask)
        width = h.shape[1] // self.scale
        chunks = [h[:, i * width : (i + 1) * width, :] for i in range(self.scale)]
        outs = [chunks[0]]
        prev = None
        for i, layer in enumerate(self.res2, start=1):
            inp = chunks[i] if prev is None else chunks[i] + prev
            prev = layer(inp, bn_mask)
            outs.append(prev)
        h = ad.concat(outs, axis=1) if len(outs) > 1 else outs[0]
        h = self.tdnn2(h, bn_mask)
        return self.se(h, se_mask) + x


class CAMDenseBlock(Module):
    """Dense-style block: BN-ReLU-1x1 conv-BN-ReLU-CAM, concatenated and reduced back to D."""

    def __init__(self, D, kernel_size, dilation, r, seg_len, rng):
        self.bn1 = BatchNorm1d(D)
        self.bottleneck = Conv1d(D, D, 1, rng=rng)
        self.bn2 = BatchNorm1d(D)
        self.cam = CAMLayer(D, kernel_size, dilation, r, seg_len, rng)
        self.transit = Conv1d(2 * D, D, 1, rng=rng)
        self.transit_bn = BatchNorm1d(D)

    def __call__(self, x, bn_mask=None, cam_mask=None):
        h = self.bottleneck(self.bn1(x, bn_mask).relu())
        h = self.cam(self.bn2(h, bn_mask).relu(), cam_mask)
        return self.transit_bn(self.transit(ad.concat([x, h], axis=1)).relu())


class SpeakerEncoder(Module):
    def __init__(self, config, seed=0):
        config.validate()
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        c = config
        c_in = c.n_mels + (2 if c.guide_input else 0)
        self.stem = TDNNLayer(c_in, c.channels, c.kernel(c.stem_kernel), 1, rng)
        if c.family == "ecapa-mini":
            self.blocks = [
                SERes2Block(c.channels, c.kernel(k), d, c.res2_scale, c.se_reduction, rng)
                for k, d in zip(c.kernel_sizes, c.dilations)
            ]
        else:
            self.blocks = [
                CAMDenseBlock(c.channels, c.kernel(k), d, c.se_reduction, c.cam_seg_len, rng)
                for k, d in zip(c.kernel_sizes, c.dilations)
            ]
        self.pool = AttentiveStatsPool(c.channels, c.attention_dim, rng)
        self.embed = Linear(2 * c.channels, c.embedding_dim, rng)
        for m in self.modules():
            if isinstance(m, BatchNorm1d):
                m.params.reset_running_stats()

    def __call__(self, x, q_target=None, q_nontarget=None):
        """``x``: ``B x F x T`` features; masks ``B x T``. Returns ``B x E``."""
        c = self.config
        x = ad.as_tensor(x)
        if c.guided:
            if q_target is None or q_nontarget is None:
                raise MissingMask("guided configurations need target and non-target activity")
            q_target = np.asarray(q_target).astype(np.float64)
            q_nontarget = np.asarray(q_nontarget).astype(np.float64)
            if np.any(q_target.sum(axis=-1) == 0):
                raise EmptyTargetMask("target speaker has no active frame")
        if c.guide_input:
            x = ad.concat([x, np.stack([q_target, q_nontarget], axis=1)], axis=1)
        tmask = q_target.astype(bool) if c.guided else None
        bn_mask = tmask if c.guide_bn else None
        stat_mask = tmask if c.guide_se_or_cam else None
        pool_mask = tmask if c.guide_pooling else None

        h = self.stem(x, bn_mask if c.family == "ecapa-mini" else None)
        for block in self.blocks:
            h = block(h, bn_mask, stat_mask)
        return self.embed(self.pool(h, pool_mask))


def build_model(config, seed=0):
    return SpeakerEncoder(config, seed)


def count_parameters(model):
    return int(sum(p.size for p in model.parameters()))


def extract_embedding(model, features, mask=None):
    """Inference-mode embedding of one recording; returns a length-E vector."""
    frames = features.frames if isinstance(features, FeatureSequence) else np.asarray(features, dtype=np.float64)
    T = frames.shape[1]
    if model.config.guided:
        if mask is None:
            raise MissingMask("guided configurations need an ActivityMask")
        if len(mask) != T:
            raise ValueError(f"mask length {len(mask)} does not match {T} frames")
        mask.require_target()
        qt, qn = mask.q_target[None], mask.q_nontarget[None]
    else:
        qt = qn = None
    was_training = model.training
    model.eval()
    try:
        out = model(frames[None], qt, qn)
    finally:
        model.train(was_training)
    return out.data[0].copy()


# checkpoints


def _array_bytes(arr):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _write_entry(zf, name, payload):
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, payload)


def save_checkpoint(path, model, extra=None):
    """Write a version-tagged zip with the config echo, seed, parameters and BN running stats."""
    meta = {
        "format": "guided-spkemb-checkpoint",
        "version": CHECKPOINT_VERSION,
        "seed": model.seed,
        "config": asdict(model.config),
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1))
        for name, p in model.named_parameters():
            _write_entry(zf, f"params/{name}.npy", _array_bytes(p.data))
        for name, m in _named_batchnorms(model):
            _write_entry(zf, f"running/{name}.mean.npy", _array_bytes(m.params.running_mean))
            _write_entry(zf, f"running/{name}.var.npy", _array_bytes(m.params.running_var))


def _named_batchnorms(module, prefix=""):
    for name, value in vars(module).items():
        if isinstance(value, BatchNorm1d):
            yield prefix + name, value
        elif isinstance(value, Module):
            yield from _named_batchnorms(value, prefix + name + ".")
        elif isinstance(value, (list, tuple)):
            for i, item in enumerate(value):
                if isinstance(item, Module):
                    yield from _named_batchnorms(item, f"{prefix}{name}.{i}.")


def load_checkpoint(path):
    with zipfile.ZipFile(path) as zf:
        try:
            meta = json.loads(zf.read("meta.json"))
        except KeyError:
            raise CheckpointError(f"{path}: missing meta.json") from None
        if meta.get("format") != "guided-spkemb-checkpoint":
            raise CheckpointError(f"{path}: not a checkpoint file")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
        model = build_model(ModelConfig.from_dict(meta["config"]), meta["seed"])

        def read(name):
            return np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)

        names = set(zf.namelist())
        for name, p in model.named_parameters():
            entry = f"params/{name}.npy"
            if entry not in names:
                raise CheckpointError(f"{path}: missing parameter {name}")
            arr = read(entry)
            if arr.shape != p.shape:
                raise CheckpointError(f"{path}: parameter {name} has shape {arr.shape}, expected {p.shape}")
            p.data = arr.astype(np.float64)
        for name, m in _named_batchnorms(model):
            m.params.running_mean = read(f"running/{name}.mean.npy")
            m.params.running_var = read(f"running/{name}.var.npy")
    model.eval()
    return model, meta
