import numpy as np
import pytest

from depthnav import autodiff as ad
from depthnav.autodiff import Tensor


def check_gradients(build, arrays, h=1e-5, tol=1e-4):
    """Compare reverse-mode gradients against central finite differences.

    build(*tensors) must return a scalar Tensor. arrays are float64 numpy
    inputs; every one is treated as differentiable.
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*tensors)
    ad.backward(loss)
    for k, (tensor, base) in enumerate(zip(tensors, arrays)):
        grad = tensor.grad
        assert grad is not None, f"input {k} got no gradient"
        num = np.zeros_like(base)
        flat = base.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            for sign in (+1, -1):
                flat[idx] = orig + sign * h
                rebuilt = [Tensor(a.copy()) for a in arrays]
                val = float(build(*rebuilt).data)
                num.reshape(-1)[idx] += sign * val / (2 * h)
            flat[idx] = orig
        denom = np.maximum(1.0, np.maximum(np.abs(grad), np.abs(num)))
        rel = np.max(np.abs(grad - num) / denom)
        assert rel < tol, f"input {k}: relative gradient error {rel:.2e}"


def rnd(rng, *shape):
    return rng.standard_normal(shape)


RNG = np.random.default_rng(0)


@pytest.mark.parametrize(
    "name,build,arrays",
    [
        ("add_broadcast", lambda x, y: (x + y).sum(), [rnd(RNG, 3, 4), rnd(RNG, 4)]),
        ("sub", lambda x, y: (x - y).mean(), [rnd(RNG, 5), rnd(RNG, 5)]),
        ("mul_broadcast", lambda x, y: ad.mul(x, y).sum(), [rnd(RNG, 2, 3), rnd(RNG, 1, 3)]),
        ("power", lambda x: ad.power(x, 3).sum(), [rnd(RNG, 4) + 3.0]),
        ("exp", lambda x: ad.exp(x).sum(), [rnd(RNG, 6)]),
        ("log", lambda x: ad.log(x).sum(), [np.abs(rnd(RNG, 6)) + 0.5]),
        ("relu", lambda x: ad.relu(x).sum(), [rnd(RNG, 40) + np.sign(rnd(RNG, 40)) * 0.2]),
        ("elu", lambda x: ad.elu(x).sum(), [rnd(RNG, 40) + np.sign(rnd(RNG, 40)) * 0.2]),
        ("sigmoid", lambda x: ad.sigmoid(x).sum(), [rnd(RNG, 10)]),
        ("tanh", lambda x: ad.tanh(x).sum(), [rnd(RNG, 10)]),
        ("softplus", lambda x: ad.softplus(x).sum(), [rnd(RNG, 10) * 3]),
        ("clip", lambda x: ad.clip(x, -0.5, 0.5).sum(), [rnd(RNG, 30) * 2 + 0.01]),
        ("minimum", lambda x, y: ad.minimum(x, y).sum(), [rnd(RNG, 20), rnd(RNG, 20) + 0.05]),
        ("maximum", lambda x, y: ad.maximum(x, y).sum(), [rnd(RNG, 20), rnd(RNG, 20) + 0.05]),
        ("sum_axis", lambda x: ad.tensor_sum(ad.tensor_sum(x, axis=1), axis=0).sum(), [rnd(RNG, 3, 4, 2)]),
        ("mean_axis_keepdims", lambda x: ad.tensor_mean(x, axis=1, keepdims=True).sum(), [rnd(RNG, 3, 5)]),
        ("reshape", lambda x: ad.reshape(x, (6,)).sum(), [rnd(RNG, 2, 3)]),
        ("narrow", lambda x: ad.narrow(x, 1, 1, 2).sum(), [rnd(RNG, 3, 5)]),
        ("concat", lambda x, y: ad.concat([x, y], axis=1).mean(), [rnd(RNG, 2, 3), rnd(RNG, 2, 4)]),
        ("matmul", lambda x, y: (x @ y).sum(), [rnd(RNG, 3, 4), rnd(RNG, 4, 2)]),
        ("affine", lambda x, w, b: ad.affine(x, w, b).sum(), [rnd(RNG, 5, 3), rnd(RNG, 3, 2), rnd(RNG, 2)]),
        ("mse", lambda x, y: ad.mse(x, y), [rnd(RNG, 4, 3), rnd(RNG, 4, 3)]),
        ("log_softmax", lambda x: ad.mul(ad.log_softmax(x), Tensor(np.arange(8.0).reshape(2, 4))).sum(), [rnd(RNG, 2, 4)]),
    ],
)
def test_primitive_gradients(name, build, arrays):
    check_gradients(build, arrays)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_gradients(stride, padding):
    rng = np.random.default_rng(1)
    x = rnd(rng, 2, 3, 6, 7)
    w = rnd(rng, 4, 3, 3, 3) * 0.5
    b = rnd(rng, 4)
    check_gradients(lambda x, w, b: ad.conv2d(x, w, b, stride=stride, padding=padding).sum(), [x, w, b])


@pytest.mark.parametrize("stride,padding,output_padding", [(1, 0, 0), (1, 1, 0), (2, 1, 1), (2, 0, 1), (2, 0, 0)])
def test_conv2d_transpose_gradients(stride, padding, output_padding):
    rng = np.random.default_rng(2)
    x = rnd(rng, 2, 4, 5, 6)
    w = rnd(rng, 4, 3, 3, 3) * 0.5
    b = rnd(rng, 3)
    check_gradients(
        lambda x, w, b: ad.conv2d_transpose(x, w, b, stride=stride, padding=padding, output_padding=output_padding).sum(),
        [x, w, b],
    )


def test_conv2d_identity_kernel():
    x = Tensor(np.random.default_rng(3).standard_normal((1, 1, 5, 5)))
    w = Tensor(np.ones((1, 1, 1, 1)))
    b = Tensor(np.zeros(1))
    out = ad.conv2d(x, w, b, stride=1, padding=0)
    assert np.array_equal(out.data, x.data)


def test_conv_transpose_matches_torch_semantics():
    """convT output size is (in-1)*stride - 2*pad + kernel + output_padding."""
    x = Tensor(np.zeros((1, 2, 5, 8)))
    w = Tensor(np.zeros((2, 3, 3, 3)))
    b = Tensor(np.zeros(3))
    out = ad.conv2d_transpose(x, w, b, stride=2, padding=1, output_padding=1)
    assert out.data.shape == (1, 3, 10, 16)


def test_conv_transpose_is_conv_adjoint():
    """<conv(x), y> == <x, convT(y)> for matching shapes (zero bias)."""
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((2, 3, 8, 10)))
    w = Tensor(rng.standard_normal((5, 3, 3, 3)))
    zero5 = Tensor(np.zeros(5))
    zero3 = Tensor(np.zeros(3))
    y_shape_out = ad.conv2d(x, w, zero5, stride=2, padding=1)
    y = Tensor(rng.standard_normal(y_shape_out.data.shape))
    lhs = float(np.sum(y_shape_out.data * y.data))
    wt = Tensor(np.ascontiguousarray(w.data))  # convT expects (C_in=5 out-ch of conv, C_out=3, kh, kw)
    wt.data = w.data  # (5, 3, 3, 3) already in convT layout for the adjoint
    back = ad.conv2d_transpose(y, wt, zero3, stride=2, padding=1, output_padding=1)
    rhs = float(np.sum(back.data * x.data))
    assert abs(lhs - rhs) / max(abs(lhs), 1.0) < 1e-10


def test_lstm_cell_gradients():
    rng = np.random.default_rng(5)
    hidden = 4
    x = rnd(rng, 2, 3)
    h = rnd(rng, 2, hidden)
    c = rnd(rng, 2, hidden)
    w_x = rnd(rng, 3, 4 * hidden) * 0.4
    w_h = rnd(rng, hidden, 4 * hidden) * 0.4
    b = rnd(rng, 4 * hidden) * 0.1

    def build(x, h, c, w_x, w_h, b):
        h_new, c_new = ad.lstm_cell(x, h, c, w_x, w_h, b)
        return ad.add(h_new.sum(), ad.mul(c_new.sum(), Tensor(np.float64(0.7))))

    check_gradients(build, [x, h, c, w_x, w_h, b])


def test_lstm_cell_zero_weights_zero_state():
    hidden = 3
    x = Tensor(np.ones((2, 5)))
    h = Tensor(np.zeros((2, hidden)))
    c = Tensor(np.zeros((2, hidden)))
    zeros = lambda *s: Tensor(np.zeros(s))
    h_new, c_new = ad.lstm_cell(x, h, c, zeros(5, 4 * hidden), zeros(hidden, 4 * hidden), zeros(4 * hidden))
    assert np.allclose(h_new.data, 0.0)
    assert np.allclose(c_new.data, 0.0)


def test_mse_of_identical_inputs():
    x = Tensor(np.random.default_rng(6).standard_normal((3, 3)), requires_grad=True)
    y = Tensor(x.data.copy())
    loss = ad.mse(x, y)
    ad.backward(loss)
    assert float(loss.data) == 0.0
    assert np.allclose(x.grad, 0.0)


def test_shape_mismatch_errors_name_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    with pytest.raises(ValueError, match=r"\(2, 2\).*\(3, 2\)"):
        ad.mse(Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 2))))


def test_backward_requires_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(x + x)


def test_gradient_accumulates_across_two_uses():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    y = ad.add(ad.mul(x, x), x)  # x^2 + x -> grad 2x + 1
    ad.backward(y.sum())
    assert np.allclose(x.grad, 2 * x.data + 1)


def test_sum_times_weight_gradient_is_input():
    rng = np.random.default_rng(7)
    w = Tensor(rng.standard_normal(5), requires_grad=True)
    x = Tensor(rng.standard_normal(5))
    ad.backward(ad.mul(w, x).sum())
    assert np.array_equal(w.grad, x.data)


# ---------------------------------------------------------------------------
# gradient reversal
# ---------------------------------------------------------------------------

def test_grad_reverse_forward_bit_exact():
    x = Tensor(np.random.default_rng(8).standard_normal((4, 4)).astype(np.float32), requires_grad=True)
    out = ad.grad_reverse(x, 0.7)
    assert out.data is x.data or np.array_equal(out.data, x.data)


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0])
def test_grad_reverse_backward_exact(lam):
    rng = np.random.default_rng(9)
    x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    weight = Tensor(rng.standard_normal((3, 5)))
    loss = ad.mul(ad.grad_reverse(x, lam), weight).sum()
    ad.backward(loss)
    assert np.array_equal(x.grad, -lam * weight.data)


def test_grad_reverse_example_arithmetic():
    x = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    g = Tensor(np.array([2.0, -4.0]))
    ad.backward(ad.mul(ad.grad_reverse(x, 0.5), g).sum())
    assert np.array_equal(x.grad, np.array([-1.0, 2.0]))


def test_grad_reverse_rejects_negative_lambda():
    with pytest.raises(ValueError):
        ad.grad_reverse(Tensor(np.zeros(2)), -0.1)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_no_change():
    value = np.array([1.0, -2.0])
    new, m, v = ad.adam_update(value, np.zeros(2), np.zeros(2), np.zeros(2), t=1, lr=0.1)
    assert np.array_equal(new, value)


def test_adam_first_step_is_lr_sign():
    g = np.array([0.3, -7.0, 0.001])
    new, _, _ = ad.adam_update(np.zeros(3), g, np.zeros(3), np.zeros(3), t=1, lr=0.05)
    assert np.allclose(new, -0.05 * np.sign(g), atol=1e-4)


def test_adam_constant_gradient_asymptotic_step():
    g = np.full(1, 2.5)
    value = np.zeros(1)
    m = np.zeros(1)
    v = np.zeros(1)
    prev = value.copy()
    for t in range(1, 400):
        value, m, v = ad.adam_update(value, g, m, v, t, lr=0.01)
        if t > 300:
            assert abs((prev - value)[0] - 0.01) < 1e-4  # step -> lr * sign(g)
        prev = value.copy()


def test_adam_optimizer_deterministic():
    def run():
        rng = np.random.default_rng(10)
        p = Tensor(rng.standard_normal(4).astype(np.float32), requires_grad=True)
        opt = ad.Adam([p], lr=0.01)
        target = Tensor(np.ones(4, dtype=np.float32))
        for _ in range(30):
            opt.zero_grad()
            loss = ad.mse(p, target)
            ad.backward(loss)
            opt.step()
        return p.data.copy()

    assert np.array_equal(run(), run())


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        ad.adam_update(np.zeros(3), np.zeros(4), np.zeros(3), np.zeros(3), t=1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(11)
    tensors = {
        "enc.w": rng.standard_normal((3, 4, 2, 2)).astype(np.float32),
        "enc.b": rng.standard_normal(4).astype(np.float32),
        "scalarish": rng.standard_normal(1).astype(np.float32),
    }
    path = tmp_path / "model.ckp"
    ad.save_checkpoint(str(path), tensors)
    loaded = ad.load_checkpoint(str(path))
    assert list(loaded) == list(tensors)
    for k in tensors:
        assert np.array_equal(loaded[k], tensors[k])
        assert loaded[k].dtype == np.float32
    blob = path.read_bytes()
    assert blob[:4] == b"CKP1"
    path2 = tmp_path / "model2.ckp"
    ad.save_checkpoint(str(path2), tensors)
    assert blob == path2.read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckp"
    path.write_bytes(b"XXXX\x00\x00\x00\x00")
    with pytest.raises(ValueError, match="CKP1"):
        ad.load_checkpoint(str(path))


def test_no_grad_disables_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad
    assert y._parents == ()
