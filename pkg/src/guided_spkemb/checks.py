"""Property suites behind ``selfcheck`` and ``gradcheck``.

Each suite draws randomized cases from a seed and returns a
:class:`CheckResult` with the worst value it saw.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (
    BNParams,
    PoolParams,
    SEParams,
    SegmentPlan,
    _bn_train,
    attentive_stats_pool,
    batchnorm_forward,
    campp_mask_forward,
    se_block_forward,
)
from .models import ModelConfig, build_model, extract_embedding
from .synth import SynthConfig, nontarget_only_runs, scale_nontarget_duration, synth_mixture, synth_speaker_bank
from .training import AAMHead, aam_softmax_loss

FD_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    cases: int
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: worst={self.worst:.3g} tol={self.tolerance:g} cases={self.cases}{extra}"


def _random_mask(rng, B, T, min_active=1):
    m = rng.random((B, T)) < rng.uniform(0.2, 0.8)
    for b in range(B):
        if m[b].sum() < min_active:
            m[b, rng.choice(T, min_active, replace=False)] = True
    return m


def _case_dims(rng):
    return int(rng.integers(1, 4)), 4 * int(rng.integers(1, 4)), int(rng.integers(3, 25))


def _grad_dims(rng):
    # finite differences cost two forwards per element, so keep these small
    return int(rng.integers(1, 3)), 4 * int(rng.integers(1, 3)), int(rng.integers(3, 13))


def _identity(x):
    return x


# guided with all-ones masks equals unguided


def reduction_suite(n_cases=100, seed=0, tol=1e-12):
    rng = np.random.default_rng(seed)
    worst = {"se": 0.0, "cam": 0.0, "bn": 0.0, "pool": 0.0}
    for _ in range(n_cases):
        B, D, T = _case_dims(rng)
        X = rng.normal(size=(B, D, T))
        ones = np.ones((B, T), dtype=bool)
        se = SEParams.init(D, 4, rng)
        a, sa = se_block_forward(X, se, ones)
        b, sb = se_block_forward(X, se, None)
        worst["se"] = max(worst["se"], np.abs(a.data - b.data).max(), np.abs(sa.data - sb.data).max())

        plan = SegmentPlan.fixed(T, int(rng.integers(1, 8)))
        a = campp_mask_forward(X, se, _identity, plan, ones)
        b = campp_mask_forward(X, se, _identity, plan, None)
        worst["cam"] = max(worst["cam"], np.abs(a.data - b.data).max())

        if B * T >= 2:
            pa, pb = BNParams(D), BNParams(D)
            pa.gamma.data = pb.gamma.data = rng.normal(size=D)
            a = batchnorm_forward(X, pa, ones, "train")
            b = batchnorm_forward(X, pb, None, "train")
            worst["bn"] = max(
                worst["bn"],
                np.abs(a.data - b.data).max(),
                np.abs(pa.running_mean - pb.running_mean).max(),
                np.abs(pa.running_var - pb.running_var).max(),
            )

        pool = PoolParams.init(D, 8, rng)
        a = attentive_stats_pool(X, ones, pool)
        b = attentive_stats_pool(X, None, pool)
        worst["pool"] = max(worst["pool"], np.abs(a.data - b.data).max())
    return [CheckResult(f"reduction/{k}", v <= tol, float(v), tol, n_cases) for k, v in worst.items()]


# masked-out frames cannot move guided statistics


def masked_independence_suite(n_cases=100, seed=0):
    rng = np.random.default_rng(seed)
    changed = {"se": 0, "cam": 0, "bn": 0, "pool": 0, "pool-duplicated": 0}
    for _ in range(n_cases):
        B, D, T = _case_dims(rng)
        T = max(T, 4)
        X = rng.normal(size=(B, D, T))
        mask = _random_mask(rng, B, T, min_active=2)
        Y = X.copy()
        Y[np.broadcast_to(~mask[:, None, :], X.shape)] = rng.normal(0, 100, size=int((~mask).sum()) * D)

        se = SEParams.init(D, 4, rng)
        s1 = se_block_forward(X, se, mask)[1].data
        s2 = se_block_forward(Y, se, mask)[1].data
        changed["se"] += not np.array_equal(s1, s2)

        plan = SegmentPlan.fixed(T, int(rng.integers(1, 8)))
        z1 = campp_mask_forward(X, se, _identity, plan, mask, return_weights=True)[2].data
        z2 = campp_mask_forward(Y, se, _identity, plan, mask, return_weights=True)[2].data
        changed["cam"] += not np.array_equal(z1, z2)

        g, b = Tensor(rng.normal(size=D)), Tensor(rng.normal(size=D))
        count = int(mask.sum())
        _, m1, v1 = _bn_train(Tensor(X), g, b, mask, count, 1e-5)
        _, m2, v2 = _bn_train(Tensor(Y), g, b, mask, count, 1e-5)
        changed["bn"] += not (np.array_equal(m1, m2) and np.array_equal(v1, v2))

        pool = PoolParams.init(D, 8, rng)
        p1 = attentive_stats_pool(X, mask, pool).data
        p2 = attentive_stats_pool(Y, mask, pool).data
        changed["pool"] += not np.array_equal(p1, p2)

        # duplicating masked-out frames changes T but not the pooled output
        b0 = 0
        out_idx = np.flatnonzero(~mask[b0])
        if out_idx.size:
            dup = np.concatenate([np.arange(T), rng.choice(out_idx, int(rng.integers(1, 6)))])
            p3 = attentive_stats_pool(X[b0][:, dup], mask[b0][dup], pool).data
            changed["pool-duplicated"] += not np.array_equal(p1[b0], p3)
    return [
        CheckResult(f"masked-independence/{k}", v == 0, float(v), 0.0, n_cases, "cases with any bit changed")
        for k, v in changed.items()
    ]


# finite differences


def _probe(rng, shape):
    return rng.normal(size=shape)


def _fd(fn, params):
    return ad.finite_difference_check(fn, params, step=1e-5)


def _grad_case(layer, rng):
    """One randomized finite-difference case; returns (relative error, max |grad b2| or 0)."""
    B, D, T = _grad_dims(rng)
    x = Tensor(rng.normal(size=(B, D, T)), requires_grad=True, name="x")
    mask = _random_mask(rng, B, T, min_active=2)
    if layer == "conv1d":
        K = int(rng.integers(1, 4))
        w = Tensor(rng.normal(size=(D + 1, D, K)), requires_grad=True, name="w")
        bias = Tensor(rng.normal(size=D + 1), requires_grad=True, name="bias")
        dil = int(rng.integers(1, 4))
        R = _probe(rng, (B, D + 1, T))
        return _fd(lambda: (ad.conv1d(x, w, dil, bias) * R).sum(), [x, w, bias]), 0.0
    if layer == "affine":
        z = Tensor(rng.normal(size=(B, D)), requires_grad=True, name="z")
        w = Tensor(rng.normal(size=(3, D)), requires_grad=True, name="w")
        bias = Tensor(rng.normal(size=3), requires_grad=True, name="bias")
        R = _probe(rng, (B, 3))
        return _fd(lambda: (ad.affine(z, w, bias) * R).sum(), [z, w, bias]), 0.0
    if layer == "se":
        p = SEParams.init(D, 4, rng)
        p.b3.data = rng.normal(size=p.b3.shape)
        R = _probe(rng, (B, D, T))
        params = {"x": x, "W3": p.W3, "b3": p.b3, "W4": p.W4, "b4": p.b4}
        return _fd(lambda: (se_block_forward(x, p, mask)[0] * R).sum(), params), 0.0
    if layer == "cam":
        p = SEParams.init(D, 4, rng)
        p.b3.data = rng.normal(size=p.b3.shape)
        k = Tensor(rng.normal(size=(D, D, 3)) / D, requires_grad=True, name="kernel")
        plan = SegmentPlan.fixed(T, int(rng.integers(1, 8)))
        R = _probe(rng, (B, D, T))
        params = {"x": x, "kernel": k, "W3": p.W3, "b3": p.b3, "W4": p.W4, "b4": p.b4}
        fn = lambda: (campp_mask_forward(x, p, lambda v: ad.conv1d(v, k, 2), plan, mask) * R).sum()  # noqa: E731
        return _fd(fn, params), 0.0
    if layer == "bn":
        p = BNParams(D)
        p.gamma.data = rng.normal(size=D)
        p.beta.data = rng.normal(size=D)
        R = _probe(rng, (B, D, T))
        return _fd(lambda: (batchnorm_forward(x, p, mask, "train") * R).sum(), [x, p.gamma, p.beta]), 0.0
    if layer == "pool":
        p = PoolParams.init(D, 4, rng)
        p.b1.data = rng.normal(size=p.b1.shape)
        p.b2.data = rng.normal(size=p.b2.shape)
        R = _probe(rng, (B, 2 * D))
        fn = lambda: (attentive_stats_pool(x, mask, p) * R).sum()  # noqa: E731
        # softmax over time is shift-invariant, so the output bias b2 has an exactly zero gradient
        err = _fd(fn, {"x": x, "W1": p.W1, "b1": p.b1, "W2": p.W2})
        with ad.Tape() as tape:
            loss = fn()
        tape.backward(loss)
        return err, float(np.abs(p.b2.grad).max()) if p.b2.grad is not None else 0.0
    if layer == "aam":
        C = int(rng.integers(2, 9))
        head = AAMHead(C, D, 0.2, 30.0, rng=rng)
        e = Tensor(rng.normal(size=(max(B, 2), D)), requires_grad=True, name="emb")
        labels = rng.integers(0, C, e.shape[0])
        return _fd(lambda: aam_softmax_loss(e, labels, head), {"emb": e, "weight": head.weight}), 0.0
    raise ValueError(f"unknown layer {layer!r}")


GRADIENT_LAYERS = ("conv1d", "affine", "se", "cam", "bn", "pool", "aam")


def gradient_suite(n_cases=100, seed=0, layers=GRADIENT_LAYERS, tol=FD_TOLERANCE):
    rng = np.random.default_rng(seed)
    results = []
    for layer in layers:
        worst, worst_b2 = 0.0, 0.0
        for _ in range(n_cases):
            err, b2 = _grad_case(layer, rng)
            worst, worst_b2 = max(worst, err), max(worst_b2, b2)
        results.append(CheckResult(f"gradient/{layer}", worst < tol, worst, tol, n_cases))
        if layer == "pool":
            results.append(CheckResult("gradient/pool-b2-zero", worst_b2 < 1e-10, worst_b2, 1e-10, n_cases))
    return results


# exact m-invariance


def m_invariance_suite(n_mixtures=50, m_values=(0, 1, 2, 3, 5), seed=0, tol=1e-10, model=None):
    """Pointwise-only proposed model: embeddings must not move when non-target-only runs are rescaled."""
    scfg = SynthConfig()
    if model is None:
        model = build_model(ModelConfig.preset("proposed", pointwise_only=True, n_mels=scfg.n_mels), seed)
        rng_bn = np.random.default_rng(seed + 1)
        for m in model.modules():
            if hasattr(m, "params") and isinstance(m.params, BNParams):
                m.params.running_mean = rng_bn.normal(0, 0.5, m.params.gamma.shape)
                m.params.running_var = rng_bn.uniform(0.5, 2.0, m.params.gamma.shape)
    model.eval()
    bank = synth_speaker_bank(seed + 100, 8, scfg)
    rng = np.random.default_rng(seed)
    buckets = ("(0,25)", "[25,50)", "[50,75)", "[75,100)")
    worst = 0.0
    for i in range(n_mixtures):
        spk = [bank[j] for j in rng.permutation(len(bank))[:3]]
        mix = synth_mixture(spk, None, 0.0, buckets[i % len(buckets)], rng, scfg)
        while not nontarget_only_runs(mix.mask()):
            mix = synth_mixture(spk, None, 0.0, buckets[i % len(buckets)], rng, scfg)
        ref = extract_embedding(model, mix.features, mix.mask())
        for m in m_values:
            scaled = scale_nontarget_duration(mix, m)
            emb = extract_embedding(model, scaled.features, scaled.mask())
            worst = max(worst, float(np.abs(emb - ref).max()))
    return CheckResult("m-invariance/pointwise-proposed", worst <= tol, worst, tol, n_mixtures)

