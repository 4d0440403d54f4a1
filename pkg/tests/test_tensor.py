import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from seenet import (
    SGD,
    Tensor,
    bce_multilabel_loss,
    c_relu,
    c_relu_backward,
    c_relu_forward,
    conv2d,
    finite_diff_check,
    global_avg_pool,
    load_tensor,
    relu,
    save_tensor,
    sgd_step,
    tsum,
)
from seenet.errors import ContractError, DataIOError, GradCheckError
from seenet.tensor import add, read_tensor, write_tensor


def naive_conv2d(x, w, b, stride=1, pad=0):
    """Direct quadruple-loop cross-correlation, the independent oracle."""
    c_in, h, wdt = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (wdt + 2 * pad - k) // stride + 1
    out = np.zeros((c_out, h_out, w_out), dtype=np.float64)
    for co in range(c_out):
        for oy in range(h_out):
            for ox in range(w_out):
                acc = 0.0
                for ci in range(c_in):
                    for ky in range(k):
                        for kx in range(k):
                            acc += w[co, ci, ky, kx] * xp[ci, oy * stride + ky, ox * stride + kx]
                out[co, oy, ox] = acc + b[co]
    return out


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def test_conv2d_scalar_product():
    out = conv2d(Tensor([[[2.0]]]), Tensor([[[[3.0]]]]), Tensor([0.0]))
    assert out.data.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == 6.0


def test_conv2d_identity_kernel(rng):
    x = Tensor(rng.standard_normal((2, 5, 5)))
    w = np.zeros((2, 2, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1] = 1.0
    w[1, 1, 1, 1] = 1.0
    out = conv2d(x, Tensor(w), Tensor(np.zeros(2)), stride=1, pad=1)
    np.testing.assert_array_equal(out.data, x.data)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_naive_oracle(rng, stride, pad):
    x = rng.standard_normal((2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad)
    want = naive_conv2d(x, w, b, stride=stride, pad=pad)
    np.testing.assert_allclose(got.data, want, atol=1e-5)


def test_conv2d_batched_matches_per_sample(rng):
    xs = rng.standard_normal((4, 2, 6, 6)).astype(np.float32)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    b = Tensor(rng.standard_normal(3))
    batched = conv2d(Tensor(xs), w, b, stride=2, pad=1)
    for i in range(4):
        single = conv2d(Tensor(xs[i]), w, b, stride=2, pad=1)
        np.testing.assert_allclose(batched.data[i], single.data, atol=1e-5)


def test_conv2d_shape_errors(rng):
    x = Tensor(rng.standard_normal((2, 5, 5)))
    with pytest.raises(ContractError, match="channels"):
        conv2d(x, Tensor(rng.standard_normal((3, 4, 3, 3))), Tensor(np.zeros(3)))
    with pytest.raises(ContractError, match="bias"):
        conv2d(x, Tensor(rng.standard_normal((3, 2, 3, 3))), Tensor(np.zeros(4)))
    with pytest.raises(ContractError, match="does not fit"):
        conv2d(x, Tensor(rng.standard_normal((3, 2, 7, 7))), Tensor(np.zeros(3)))


def test_conv2d_gradients_via_finite_differences(rng):
    x = Tensor(rng.standard_normal((2, 5, 5)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.standard_normal(3), requires_grad=True, dtype=np.float64)
    assert finite_diff_check(lambda t: tsum(conv2d(t, w, b, 2, 1)), x) < 1e-6
    assert finite_diff_check(lambda t: tsum(conv2d(x, t, b, 2, 1)), w) < 1e-6
    assert finite_diff_check(lambda t: tsum(conv2d(x, w, t, 2, 1)), b) < 1e-6


# ---------------------------------------------------------------------------
# c_relu
# ---------------------------------------------------------------------------

def test_c_relu_basic_values():
    x = Tensor([[[2.0]]])
    assert c_relu_forward(x, np.array([[-1]])).data[0, 0, 0] == -2.0
    x = Tensor([[[-3.0]]])
    for m in (-1, 0, 1):
        assert c_relu_forward(x, np.array([[m]])).data[0, 0, 0] == 0.0


def test_c_relu_all_ones_equals_relu(rng):
    x = Tensor(rng.standard_normal((3, 4, 4)))
    ones = np.ones((4, 4), dtype=np.int8)
    np.testing.assert_array_equal(c_relu(x, ones).data, relu(x).data)


def test_c_relu_semantics_exhaustive():
    # all (sign of x, mask value) combinations
    for xv in (-1.5, 0.0, 1.5):
        for mv in (-1, 0, 1):
            out = c_relu_forward(Tensor([[[xv]]]), np.array([[mv]]))
            assert out.data[0, 0, 0] == max(xv, 0.0) * mv


def test_c_relu_backward_rule():
    g = Tensor([[[1.0]]])
    assert c_relu_backward(g, Tensor([[[2.0]]]), np.array([[-1]])).data[0, 0, 0] == -1.0
    g5 = Tensor([[[5.0]]])
    assert c_relu_backward(g5, Tensor([[[-1.0]]]), np.array([[1]])).data[0, 0, 0] == 0.0


def test_c_relu_backward_matches_finite_differences(rng):
    # central differences at points away from the rectifier kink
    x = rng.standard_normal((2, 5, 5))
    x[np.abs(x) < 1e-3] += 0.1
    mask = rng.integers(-1, 2, size=(5, 5)).astype(np.int8)
    eps = 1e-5
    xt = Tensor(x, dtype=np.float64)
    analytic = c_relu_backward(Tensor(np.ones_like(x), dtype=np.float64), xt, mask).data
    for i in np.ndindex(x.shape):
        xp = x.copy()
        xp[i] += eps
        xm = x.copy()
        xm[i] -= eps
        num = (
            c_relu_forward(Tensor(xp, dtype=np.float64), mask).data[i]
            - c_relu_forward(Tensor(xm, dtype=np.float64), mask).data[i]
        ) / (2 * eps)
        denom = max(abs(analytic[i]), abs(num), 1e-8)
        assert abs(analytic[i] - num) / denom < 1e-4


def test_c_relu_mask_value_and_shape_errors(rng):
    x = Tensor(rng.standard_normal((2, 3, 3)))
    with pytest.raises(ContractError, match="mask values"):
        c_relu(x, np.array([[2, 0, 0], [0, 0, 0], [0, 0, 0]]))
    with pytest.raises(ContractError, match="spatial"):
        c_relu(x, np.zeros((2, 2), dtype=np.int8))


@settings(deadline=None)
@given(
    hnp.arrays(
        np.float32,
        (3, 4, 4),
        elements=st.floats(-5, 5, width=32, allow_nan=False),
    ),
    hnp.arrays(np.int8, (4, 4), elements=st.sampled_from((-1, 0, 1))),
)
def test_c_relu_sign_property(x, mask):
    out = c_relu_forward(Tensor(x), mask).data
    pos = x > 0
    # output vanishes where the input is non-positive or the mask is zero
    assert (out[~pos] == 0).all()
    assert (out[:, mask == 0] == 0).all()
    # where x > 0 the output sign agrees with the mask sign
    sign = np.sign(out)
    expected = np.broadcast_to(mask[None], out.shape)
    assert (sign[pos] == np.sign(expected)[pos] * (x[pos] > 0)).all()


# ---------------------------------------------------------------------------
# global_avg_pool
# ---------------------------------------------------------------------------

def test_gap_constant_map():
    x = Tensor(np.full((2, 3, 3), 4.5))
    np.testing.assert_allclose(global_avg_pool(x).data, [4.5, 4.5])


def test_gap_single_pixel_identity(rng):
    x = rng.standard_normal((3, 1, 1)).astype(np.float32)
    np.testing.assert_array_equal(global_avg_pool(Tensor(x)).data, x[:, 0, 0])


def test_gap_mean():
    x = Tensor([[[1.0, 2.0], [3.0, 4.0]]])
    assert global_avg_pool(x).data[0] == 2.5


def test_gap_backward_conserves_gradient(rng):
    x = Tensor(rng.standard_normal((3, 4, 5)), requires_grad=True)
    tsum(global_avg_pool(x)).backward()
    np.testing.assert_allclose(x.grad.sum(axis=(1, 2)), np.ones(3), rtol=1e-6)


def test_gap_empty_spatial_error():
    with pytest.raises(ContractError, match="spatial"):
        global_avg_pool(Tensor(np.zeros((2, 0, 3))))


# ---------------------------------------------------------------------------
# bce
# ---------------------------------------------------------------------------

def test_bce_at_zero_logit():
    for t in (0.0, 1.0):
        loss = bce_multilabel_loss(Tensor([0.0]), np.array([t]))
        assert abs(float(loss.data) - math.log(2)) < 1e-6


def test_bce_confident_logits_stable():
    z = Tensor(np.array([30.0, -30.0]))
    loss = bce_multilabel_loss(z, np.array([1.0, 0.0]))
    assert 0 <= float(loss.data) < 1e-9
    z = Tensor(np.array([500.0, -500.0]))  # would overflow a naive exp
    loss = bce_multilabel_loss(z, np.array([1.0, 0.0]))
    assert np.isfinite(loss.data)


def test_bce_nonnegative(rng):
    for _ in range(50):
        z = Tensor(rng.standard_normal(5) * 5)
        t = (rng.random(5) < 0.5).astype(np.float32)
        assert float(bce_multilabel_loss(z, t).data) >= 0


def test_bce_target_validation():
    with pytest.raises(ContractError, match="0 or 1"):
        bce_multilabel_loss(Tensor([0.0]), np.array([0.5]))


def test_bce_gradient(rng):
    z = Tensor(rng.standard_normal(6), requires_grad=True, dtype=np.float64)
    t = (rng.random(6) < 0.5).astype(np.float64)
    assert finite_diff_check(lambda v: bce_multilabel_loss(v, t), z) < 1e-6


# ---------------------------------------------------------------------------
# sgd
# ---------------------------------------------------------------------------

def test_sgd_step_examples():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([1.0], dtype=np.float32)
    sgd_step([p], lr=0.1)
    np.testing.assert_allclose(p.data, [0.9])
    assert p.grad is None

    p = Tensor([1.0], requires_grad=True)
    p.grad = np.zeros(1, dtype=np.float32)
    sgd_step([p], lr=0.1)
    np.testing.assert_allclose(p.data, [1.0])

    p = Tensor([1.0], requires_grad=True)
    p.grad = np.zeros(1, dtype=np.float32)
    sgd_step([p], lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(p.data, [0.95])


def test_sgd_step_requires_grad():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(ContractError, match="grad"):
        sgd_step([p], lr=0.1)


def test_sgd_class_momentum_zero_matches_sgd_step(rng):
    data = rng.standard_normal(4).astype(np.float32)
    g = rng.standard_normal(4).astype(np.float32)
    p1 = Tensor(data.copy(), requires_grad=True)
    p1.grad = g.copy()
    p2 = Tensor(data.copy(), requires_grad=True)
    p2.grad = g.copy()
    sgd_step([p1], lr=0.05, weight_decay=0.01)
    SGD([p2], lr=0.05, momentum=0.0, weight_decay=0.01).step()
    np.testing.assert_array_equal(p1.data, p2.data)


def test_sgd_momentum_accumulates():
    p = Tensor([0.0], requires_grad=True)
    opt = SGD([p], lr=1.0, momentum=0.5)
    p.grad = np.array([1.0], dtype=np.float32)
    opt.step()
    np.testing.assert_allclose(p.data, [-1.0])
    p.grad = np.array([1.0], dtype=np.float32)
    opt.step()  # velocity = 0.5 * 1 + 1
    np.testing.assert_allclose(p.data, [-2.5])


# ---------------------------------------------------------------------------
# autograd plumbing
# ---------------------------------------------------------------------------

def test_fanout_gradient_accumulation(rng):
    x = Tensor(rng.random(5) + 0.5, requires_grad=True)
    y = add(tsum(relu(x)), tsum(relu(x)))
    y.backward()
    np.testing.assert_allclose(x.grad, np.full(5, 2.0))


def test_backward_requires_scalar(rng):
    x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    with pytest.raises(ContractError, match="scalar"):
        x.backward()


def test_grads_accumulate_across_backward_calls(rng):
    x = Tensor(rng.random(3) + 1.0, requires_grad=True)
    tsum(relu(x)).backward()
    tsum(relu(x)).backward()
    np.testing.assert_allclose(x.grad, np.full(3, 2.0))


# ---------------------------------------------------------------------------
# finite_diff_check itself
# ---------------------------------------------------------------------------

def test_finite_diff_linear_function(rng):
    x = Tensor(rng.standard_normal(8), requires_grad=True, dtype=np.float64)
    assert finite_diff_check(tsum, x) <= 1e-10


def test_finite_diff_composition(rng):
    x = Tensor(rng.standard_normal((2, 6, 6)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5, dtype=np.float64)
    b = Tensor(np.zeros(3), dtype=np.float64)
    mask = rng.integers(-1, 2, size=(6, 6)).astype(np.int8)

    def f(t):
        return tsum(global_avg_pool(c_relu(conv2d(t, w, b, 1, 1), mask)))

    assert finite_diff_check(f, x) <= 1e-3


def test_finite_diff_nonfinite_raises():
    bad = Tensor([1.0], requires_grad=True, dtype=np.float64)
    with pytest.raises(GradCheckError):
        finite_diff_check(lambda t: tsum(add(t, Tensor([np.inf], dtype=np.float64))), bad)


def test_finite_diff_skips_kink_coordinates():
    # x sits exactly at the rectifier kink: the perturbation flips the sign
    # pattern, so the coordinate must be skipped rather than reported
    x = Tensor(np.array([0.0, 2.0]), requires_grad=True, dtype=np.float64)
    err = finite_diff_check(lambda t: tsum(relu(t)), x, eps=1e-5)
    assert err <= 1e-8


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_tensor_roundtrip_bit_identical(tmp_path, rng):
    arr = rng.standard_normal((3, 4, 5)).astype(np.float32)
    path = tmp_path / "t.setn"
    save_tensor(path, arr)
    back = load_tensor(path)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, arr)
    assert back.tobytes() == arr.tobytes()


def test_tensor_format_layout(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    path = tmp_path / "t.setn"
    save_tensor(path, arr)
    raw = path.read_bytes()
    assert raw[:4] == b"SETN"
    assert raw[4] == 2  # rank
    assert np.frombuffer(raw[5:13], dtype="<u4").tolist() == [2, 3]
    np.testing.assert_array_equal(np.frombuffer(raw[13:], dtype="<f4").reshape(2, 3), arr)


def test_tensor_bad_magic(tmp_path):
    path = tmp_path / "bad.setn"
    path.write_bytes(b"NOPE" + bytes(10))
    with pytest.raises(DataIOError, match="magic"):
        load_tensor(path)


def test_tensor_truncated_payload():
    buf = io.BytesIO()
    write_tensor(buf, np.ones((2, 2), dtype=np.float32))
    data = buf.getvalue()[:-4]
    with pytest.raises(DataIOError, match="truncated"):
        read_tensor(io.BytesIO(data))


def test_tensor_missing_file():
    with pytest.raises(DataIOError, match="missing"):
        load_tensor("/nonexistent/missing.setn")
