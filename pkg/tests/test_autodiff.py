import numpy as np
import pytest

from guided_spkemb import autodiff as ad
from guided_spkemb.autodiff import Tape, Tensor, finite_difference_check
from guided_spkemb.errors import GradientCheckError, ShapeError, TapeError
from guided_spkemb.layers import SEParams, se_block_forward


def naive_conv1d(x, kernel, dilation):
    C, T = x.shape
    O, _, K = kernel.shape
    out = np.zeros((O, T))
    for o in range(O):
        for t in range(T):
            acc = 0.0
            for i in range(C):
                for k in range(K):
                    src = t + (k - K // 2) * dilation
                    if 0 <= src < T:
                        acc += kernel[o, i, k] * x[i, src]
            out[o, t] = acc
    return out


def test_conv1d_identity_kernel():
    out = ad.conv1d(np.array([[1.0, 2, 3]]), np.array([[[1.0]]]))
    np.testing.assert_array_equal(out.data, [[1, 2, 3]])


def test_conv1d_zero_padding():
    out = ad.conv1d(np.ones((1, 3)), np.ones((1, 1, 3)))
    np.testing.assert_array_equal(out.data, [[2, 3, 2]])


@pytest.mark.parametrize("K,dilation", [(3, 2), (5, 1), (2, 3), (4, 2)])
def test_conv1d_matches_loop(K, dilation):
    rng = np.random.default_rng(K * 10 + dilation)
    x = rng.normal(size=(4, 16))
    kernel = rng.normal(size=(3, 4, K))
    np.testing.assert_allclose(ad.conv1d(x, kernel, dilation).data, naive_conv1d(x, kernel, dilation), atol=1e-12)


def test_conv1d_batched_matches_unbatched():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 9))
    k = rng.normal(size=(4, 3, 3))
    out = ad.conv1d(x, k, 2).data
    for b in range(2):
        np.testing.assert_allclose(out[b], ad.conv1d(x[b], k, 2).data, atol=1e-14)


def test_conv1d_shape_errors():
    with pytest.raises(ShapeError):
        ad.conv1d(np.ones((2, 5)), np.ones((1, 3, 3)))
    with pytest.raises(ShapeError):
        ad.conv1d(np.ones((2, 5)), np.ones((1, 2)))
    with pytest.raises(ValueError):
        ad.conv1d(np.ones((2, 5)), np.ones((1, 2, 3)), dilation=0)


def test_affine_examples():
    np.testing.assert_array_equal(ad.affine(np.array([1.0, 2]), np.eye(2), np.zeros(2)).data, [1, 2])
    np.testing.assert_array_equal(ad.affine(np.array([1.0, 1]), np.array([[2.0, 3]]), np.array([1.0])).data, [6])


def test_affine_matches_loop():
    rng = np.random.default_rng(2)
    x, W, b = rng.normal(size=8), rng.normal(size=(8, 8)), rng.normal(size=8)
    expected = [sum(W[e, d] * x[d] for d in range(8)) + b[e] for e in range(8)]
    np.testing.assert_allclose(ad.affine(x, W, b).data, expected, atol=1e-12)


def test_affine_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.affine(np.ones(3), np.ones((2, 4)))
    with pytest.raises(ShapeError):
        ad.affine(np.ones(3), np.ones((2, 3)), np.ones(3))


def test_backward_linear_and_quadratic():
    x = Tensor(np.zeros(3), requires_grad=True)
    with Tape() as tape:
        loss = x.sum()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [1, 1, 1])

    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [2, 4])


def test_backward_accumulates_shared_inputs():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = (x * x + x * 2.0).sum()
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [8.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(TapeError):
        tape.backward(y)


def test_backward_twice_is_an_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = x.sum()
    tape.backward(loss)
    with pytest.raises(TapeError):
        tape.backward(loss)


def test_backward_without_tape():
    loss = Tensor(np.ones(3), requires_grad=True).sum()
    with pytest.raises(TapeError):
        ad.backward(loss)


def test_no_recording_outside_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = (x * x).sum()
    assert y._tape is None


def test_broadcast_mismatch_raises():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))


def test_backward_is_deterministic():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(4, 10))
    grads = []
    for _ in range(2):
        x = Tensor(data, requires_grad=True)
        k = Tensor(np.full((2, 4, 3), 0.3), requires_grad=True)
        with Tape() as tape:
            loss = ad.conv1d(x, k, 2).tanh().sum()
        tape.backward(loss)
        grads.append((x.grad.tobytes(), k.grad.tobytes()))
    assert grads[0] == grads[1]


def test_log_softmax_saturated_rows_stay_finite():
    z = Tensor(np.array([[1000.0, 0.0, -1000.0]]), requires_grad=True)
    with Tape() as tape:
        loss = -ad.log_softmax(z)[0, 0]
    tape.backward(loss)
    assert np.isfinite(loss.item()) and loss.item() >= 0
    assert np.all(np.isfinite(z.grad))


def test_fd_check_linear_model():
    rng = np.random.default_rng(3)
    w = Tensor(rng.normal(size=5), requires_grad=True, name="w")
    x = rng.normal(size=5)
    assert finite_difference_check(lambda: (w * x).sum(), [w]) < 1e-9


def test_fd_check_guided_se_block():
    rng = np.random.default_rng(4)
    D, T = 8, 12
    p = SEParams.init(D, 4, rng)
    X = Tensor(rng.normal(size=(D, T)), requires_grad=True, name="X")
    mask = rng.random(T) < 0.5
    mask[0] = True
    weights = rng.normal(size=(D, T))
    params = {"X": X, "W3": p.W3, "b3": p.b3, "W4": p.W4, "b4": p.b4}
    err = finite_difference_check(lambda: (se_block_forward(X, p, mask)[0] * weights).sum(), params)
    assert err < 1e-5


def test_fd_check_flags_a_wrong_gradient():
    w = Tensor([0.5, -0.3], requires_grad=True)

    def bad_square(a):
        return ad._result(a.data**2, (a,), lambda g: (g * a.data,))  # missing factor 2

    rel = finite_difference_check(lambda: bad_square(w).sum(), [w])
    assert rel == pytest.approx(0.5, rel=1e-6)


def test_fd_check_non_finite_output():
    w = Tensor([1.0], requires_grad=True)
    with np.errstate(divide="ignore"), pytest.raises(GradientCheckError):
        finite_difference_check(lambda: ad.log(w - 1.0).sum(), [w])
