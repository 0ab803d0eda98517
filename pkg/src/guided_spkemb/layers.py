"""Standard and target-masked statistics layers.

Every layer takes an optional binary frame mask. ``None`` means the layer
uses all frames (the usual global statistics); a mask restricts the
statistics to frames where the target speaker is active, while the layer
output is still produced for every frame. Inputs are ``D x T`` or
``B x D x T``; masks are ``T`` or ``B x T`` accordingly.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptyTargetMask, NotInitializedError, ShapeError


class Module:
    """Container of named parameter tensors and child modules."""

    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _param(data, name=None):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)


def _as_bool_mask(mask, shape, what="mask"):
    """Validate a frame mask against the leading/time axes of ``shape``."""
    m = np.asarray(mask).astype(bool)
    expected = shape[:-2] + shape[-1:] if len(shape) == 3 else shape[-1:]
    if m.shape != expected:
        raise ShapeError(f"{what} shape {m.shape} does not match input frames {expected}", axis=-1)
    return m


# masked statistics


def _checked_mask(mask, shape):
    m = _as_bool_mask(mask, shape)
    if np.any(m.sum(axis=-1) == 0):
        raise EmptyTargetMask("mask selects no frame")
    return m


def _gather_selected(X, m):
    """Selected frames only, for a single sequence (``D x T`` or ``1 x D x T``).

    Reducing over the gathered frames makes the statistic independent of how
    many unselected frames surround them, down to the last bit. Larger
    batches have ragged selections and use a masked sum instead.
    """
    if X.ndim == 2:
        return X[:, np.flatnonzero(m)]
    if X.shape[0] == 1:
        return X[:, :, np.flatnonzero(m[0])]
    return None


def masked_moments(X, mask="all"):
    """Per-channel mean and population variance over the selected frames.

    ``mask`` is ``"all"``/``None`` or a binary vector over frames (``B x T``
    for batched input). Returns tensors of shape ``D`` (or ``B x D``).
    """
    X = ad.as_tensor(X)
    if mask is None or (isinstance(mask, str) and mask == "all"):
        if X.shape[-1] < 1:
            raise EmptyTargetMask("no frames to average")
        mean = X.mean(axis=-1)
        centered = X - ad.reshape(mean, mean.shape + (1,))
        var = (centered * centered).mean(axis=-1)
        return mean, var
    m = _checked_mask(mask, X.shape)
    gathered = _gather_selected(X, m)
    if gathered is not None:
        return masked_moments(gathered, "all")
    sel, denom = m[..., None, :], m.sum(axis=-1)[..., None].astype(np.float64)
    mean = ad.where(sel, X, 0.0).sum(axis=-1) / denom
    centered = X - ad.reshape(mean, mean.shape + (1,))
    var = ad.where(sel, centered * centered, 0.0).sum(axis=-1) / denom
    return mean, var


def masked_mean(X, mask=None):
    X = ad.as_tensor(X)
    if mask is None:
        return X.mean(axis=-1)
    m = _checked_mask(mask, X.shape)
    gathered = _gather_selected(X, m)
    if gathered is not None:
        return gathered.mean(axis=-1)
    return ad.where(m[..., None, :], X, 0.0).sum(axis=-1) / m.sum(axis=-1)[..., None].astype(np.float64)


# squeeze-and-excitation


@dataclass
class SEParams:
    W3: Tensor  # (D/r) x D
    b3: Tensor
    W4: Tensor  # D x (D/r)
    b4: Tensor
    r: int = 4

    def __post_init__(self):
        h, d = self.W3.shape
        if self.W4.shape != (d, h) or self.b3.shape != (h,) or self.b4.shape != (d,):
            raise ShapeError("SE parameter shapes are inconsistent")

    @classmethod
    def init(cls, D, r=4, rng=None, zero=False):
        if D % r:
            raise ValueError(f"channel count {D} is not divisible by reduction ratio {r}")
        h = D // r
        if zero:
            return cls(_param(np.zeros((h, D))), _param(np.zeros(h)), _param(np.zeros((D, h))), _param(np.zeros(D)), r)
        rng = np.random.default_rng(rng)
        return cls(
            _param(rng.normal(0, 1 / np.sqrt(D), (h, D))),
            _param(np.zeros(h)),
            _param(rng.normal(0, 1 / np.sqrt(h), (D, h))),
            _param(np.zeros(D)),
            r,
        )


def excitation(z, params):
    """``sigmoid(W4 relu(W3 z + b3) + b4)`` over the last axis of ``z``."""
    hidden = ad.affine(z, params.W3, params.b3).relu()
    return ad.affine(hidden, params.W4, params.b4).sigmoid()


def se_block_forward(X, params, mask=None):
    """Channel reweighting by a pooled statistic; returns ``(X', s)``.

    With a mask, the pooled mean uses only target-active frames.
    """
    X = ad.as_tensor(X)
    z = masked_mean(X, mask)
    s = excitation(z, params)
    return X * ad.reshape(s, s.shape + (1,)), s


# context-aware masking (CAM++)


class SegmentPlan:
    """Segment boundaries ``0 = t_0 < t_1 < ... < t_K = T``."""

    def __init__(self, boundaries):
        b = np.asarray(boundaries, dtype=np.int64)
        if b.ndim != 1 or b.size < 2 or b[0] != 0 or np.any(np.diff(b) <= 0):
            raise ValueError(f"invalid segment boundaries {list(b)}")
        self.boundaries = b

    @classmethod
    def fixed(cls, T, seg_len=10):
        if T < 1 or seg_len < 1:
            raise ValueError("T and seg_len must be positive")
        return cls(list(range(0, T, seg_len)) + [T])

    @property
    def T(self):
        return int(self.boundaries[-1])

    @property
    def n_segments(self):
        return self.boundaries.size - 1

    def averaging_matrix(self):
        """``T x K`` matrix whose column ``k`` averages segment ``k``."""
        A = np.zeros((self.T, self.n_segments))
        for k, (a, b) in enumerate(zip(self.boundaries[:-1], self.boundaries[1:])):
            A[a:b, k] = 1.0 / (b - a)
        return A

    def assignment_matrix(self):
        """``K x T`` indicator of segment membership."""
        M = np.zeros((self.n_segments, self.T))
        for k, (a, b) in enumerate(zip(self.boundaries[:-1], self.boundaries[1:])):
            M[k, a:b] = 1.0
        return M


def campp_mask_forward(X, params, g, plan, mask=None, return_weights=False):
    """CAM++ gating: ``g(X)`` scaled per segment by ``s_k``.

    ``s_k = sigmoid(W4 relu(W3 (z + z_k) + b3) + b4)`` where ``z_k`` is the
    plain mean of segment ``k`` and ``z`` the global mean, restricted to
    target frames when ``mask`` is given. Segment means are never masked: a
    segment may contain no target frame at all.
    """
    X = ad.as_tensor(X)
    if plan.T != X.shape[-1]:
        raise ValueError(f"segment plan covers {plan.T} frames but input has {X.shape[-1]}")
    z = masked_mean(X, mask)  # (B,) D
    zk = ad.matmul(X, plan.averaging_matrix())  # (B,) D x K
    context = zk + ad.reshape(z, z.shape + (1,))
    s = excitation(ad.transpose(context, _swap_last(context.ndim)), params)  # (B,) K x D
    s = ad.transpose(s, _swap_last(s.ndim))  # (B,) D x K
    gx = g(X)
    if gx.shape != X.shape[:-2] + (params.W4.shape[0], X.shape[-1]):
        raise ShapeError(f"transform output {gx.shape} does not match gate shape")
    out = gx * ad.matmul(s, plan.assignment_matrix())
    if return_weights:
        return out, s, z
    return out


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# batch normalization


class BNParams:
    def __init__(self, D, eps=1e-5, momentum=0.1):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.gamma = _param(np.ones(D))
        self.beta = _param(np.zeros(D))
        self.eps = eps
        self.momentum = momentum
        self.running_mean = None
        self.running_var = None

    @property
    def initialized(self):
        return self.running_mean is not None

    def reset_running_stats(self):
        D = self.gamma.shape[0]
        self.running_mean = np.zeros(D)
        self.running_var = np.ones(D)


def batchnorm_forward(batch, params, masks=None, mode="train"):
    """Batch normalization over ``B x D x T`` with optional per-sample masks.

    In train mode the statistics pool every selected frame of every sample
    (denominator ``sum_b |Q_b|``) and all frames are normalized with them;
    running statistics are updated in place. Infer mode ignores masks.
    """
    X = ad.as_tensor(batch)
    if X.ndim != 3:
        raise ShapeError(f"batchnorm expects B x D x T input, got {X.shape}")
    D = X.shape[1]
    if params.gamma.shape != (D,):
        raise ShapeError(f"batchnorm has {params.gamma.shape[0]} channels, input has {D}", axis=1)
    gamma = ad.reshape(params.gamma, (1, D, 1))
    beta = ad.reshape(params.beta, (1, D, 1))
    if mode == "infer":
        if not params.initialized:
            raise NotInitializedError("batchnorm running statistics are not initialized")
        scale = 1.0 / np.sqrt(params.running_var + params.eps)
        normed = (X - params.running_mean[None, :, None]) * scale[None, :, None]
        return normed * gamma + beta
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")

    if masks is None:
        m = None
        count = X.shape[0] * X.shape[2]
        if count < 2:
            raise EmptyTargetMask("batchnorm needs at least 2 frames in train mode")
    else:
        m = np.asarray(masks).astype(bool)
        if m.shape != (X.shape[0], X.shape[2]):
            raise ShapeError(f"masks shape {m.shape} does not match batch frames {(X.shape[0], X.shape[2])}")
        count = int(m.sum())
        if count == 0:
            raise EmptyTargetMask("no target frame anywhere in the batch")
        if count < 2:
            raise EmptyTargetMask("batchnorm needs at least 2 selected frames in train mode")
    out, mean, var = _bn_train(X, params.gamma, params.beta, m, count, params.eps)
    if not params.initialized:
        params.reset_running_stats()
    mom = params.momentum
    params.running_mean = (1 - mom) * params.running_mean + mom * mean
    params.running_var = (1 - mom) * params.running_var + mom * var
    return out


def _bn_train(X, gamma, beta, mask, count, eps):
    """Fused train-mode normalization; statistics come from ``mask`` frames only."""
    x = X.data
    sel = None if mask is None else mask[:, None, :]
    if sel is None:
        mean = x.sum(axis=(0, 2)) / count
        centered = x - mean[None, :, None]
        var = (centered * centered).sum(axis=(0, 2)) / count
    else:
        mean = np.where(sel, x, 0.0).sum(axis=(0, 2)) / count
        centered = x - mean[None, :, None]
        var = np.where(sel, centered * centered, 0.0).sum(axis=(0, 2)) / count
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv[None, :, None]
    g_, b_ = gamma.data, beta.data
    out = xhat * g_[None, :, None] + b_[None, :, None]

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2))
        gb = g.sum(axis=(0, 2))
        gxhat = g * g_[None, :, None]
        # d/dvar and d/dmean collect over every frame; they flow back only to selected frames
        dvar = -0.5 * (gxhat * centered).sum(axis=(0, 2)) * inv**3
        dmean = -gxhat.sum(axis=(0, 2)) * inv
        stat = dmean[None, :, None] / count + dvar[None, :, None] * 2.0 * centered / count
        if sel is not None:
            stat = np.where(sel, stat, 0.0)
        gx = gxhat * inv[None, :, None] + stat
        return gx, gg, gb

    return ad._result(out, (X, gamma, beta), backward), mean, var


# attentive statistics pooling


@dataclass
class PoolParams:
    W1: Tensor  # A x 3D
    b1: Tensor
    W2: Tensor  # D x A
    b2: Tensor

    @classmethod
    def init(cls, D, attention_dim=None, rng=None, zero=False):
        A = attention_dim or max(1, D // 2)
        if zero:
            return cls(_param(np.zeros((A, 3 * D))), _param(np.zeros(A)), _param(np.zeros((D, A))), _param(np.zeros(D)))
        rng = np.random.default_rng(rng)
        return cls(
            _param(rng.normal(0, 1 / np.sqrt(3 * D), (A, 3 * D))),
            _param(np.zeros(A)),
            _param(rng.normal(0, 1 / np.sqrt(A), (D, A))),
            _param(np.zeros(D)),
        )


def _pool_one(H, params):
    D, T = H.shape
    mean, var = masked_moments(H, "all")
    std = ad.sqrt(var)
    ones = np.ones((1, T))
    context = ad.concat([H, ad.reshape(mean, (D, 1)) * ones, ad.reshape(std, (D, 1)) * ones], axis=0)
    hidden = ad.tanh(ad.conv1d(context, ad.reshape(params.W1, params.W1.shape + (1,)), bias=params.b1))
    logits = ad.conv1d(hidden, ad.reshape(params.W2, params.W2.shape + (1,)), bias=params.b2)
    alpha = ad.softmax(logits, axis=-1)
    mu = (alpha * H).sum(axis=-1)
    dev = H - ad.reshape(mu, (D, 1))
    sigma = ad.sqrt((alpha * dev * dev).sum(axis=-1))
    return ad.concat([mu, sigma], axis=0)


def attentive_stats_pool(H, mask=None, pool_params=None):
    """Channel- and context-dependent attentive statistics pooling.

    Attention runs over selected frames only, with the global mean/std
    context also taken over those frames. Unselected frames get zero weight;
    they are dropped before any reduction, so their values (and how many
    there are) cannot affect the result. Returns ``2D`` (or ``B x 2D``).
    """
    H = ad.as_tensor(H)
    batched = H.ndim == 3
    if not batched:
        H3 = ad.reshape(H, (1,) + H.shape)
        masks = None if mask is None else np.asarray(mask)[None]
    else:
        H3 = H
        masks = None if mask is None else np.asarray(mask)
    if masks is not None:
        masks = _as_bool_mask(masks, H3.shape)
    outs = []
    for b in range(H3.shape[0]):
        Hb = H3[b]
        if masks is not None:
            idx = np.flatnonzero(masks[b])
            if idx.size == 0:
                raise EmptyTargetMask(f"sample {b}: pooling mask selects no frame")
            Hb = Hb[:, idx]
        outs.append(_pool_one(Hb, pool_params))
    return ad.stack(outs, axis=0) if batched else outs[0]


# layer modules used by the encoders


class Conv1d(Module):
    def __init__(self, c_in, c_out, kernel_size=1, dilation=1, bias=True, rng=None):
        rng = np.random.default_rng(rng)
        fan_in = c_in * kernel_size
        self.weight = _param(rng.normal(0, np.sqrt(2.0 / fan_in), (c_out, c_in, kernel_size)))
        self.bias = _param(np.zeros(c_out)) if bias else None
        self.dilation = dilation

    @property
    def kernel_size(self):
        return self.weight.shape[2]

    def __call__(self, x):
        return ad.conv1d(x, self.weight, self.dilation, self.bias)


class Linear(Module):
    def __init__(self, d_in, d_out, rng=None):
        rng = np.random.default_rng(rng)
        self.weight = _param(rng.normal(0, 1 / np.sqrt(d_in), (d_out, d_in)))
        self.bias = _param(np.zeros(d_out))

    def __call__(self, x):
        return ad.affine(x, self.weight, self.bias)


class BatchNorm1d(Module):
    def __init__(self, D, eps=1e-5, momentum=0.1):
        self.params = BNParams(D, eps, momentum)
        self.gamma = self.params.gamma
        self.beta = self.params.beta

    def __call__(self, x, mask=None):
        return batchnorm_forward(x, self.params, mask, "train" if self.training else "infer")


class SEBlock(Module):
    def __init__(self, D, r=4, rng=None):
        self.params = SEParams.init(D, r, rng)
        self.W3, self.b3, self.W4, self.b4 = self.params.W3, self.params.b3, self.params.W4, self.params.b4

    def __call__(self, x, mask=None):
        return se_block_forward(x, self.params, mask)[0]


class CAMLayer(Module):
    """CAM++ masking with a dilated convolution as the transform."""

    def __init__(self, D, kernel_size=3, dilation=1, r=4, seg_len=10, rng=None):
        rng = np.random.default_rng(rng)
        self.transform = Conv1d(D, D, kernel_size, dilation, bias=False, rng=rng)
        self.params = SEParams.init(D, r, rng)
        self.W3, self.b3, self.W4, self.b4 = self.params.W3, self.params.b3, self.params.W4, self.params.b4
        self.seg_len = seg_len

    def __call__(self, x, mask=None):
        plan = SegmentPlan.fixed(x.shape[-1], self.seg_len)
        return campp_mask_forward(x, self.params, self.transform, plan, mask)


class AttentiveStatsPool(Module):
    def __init__(self, D, attention_dim=None, rng=None):
        self.params = PoolParams.init(D, attention_dim, rng)
        self.W1, self.b1, self.W2, self.b2 = self.params.W1, self.params.b1, self.params.W2, self.params.b2

    def __call__(self, h, mask=None):
        return attentive_stats_pool(h, mask, self.params)
