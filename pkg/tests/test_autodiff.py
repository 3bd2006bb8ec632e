import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import numeric_grad, rel_err
from semreduce import autodiff as ad
from semreduce.autodiff import ShapeError, Tensor


def weighted(out: Tensor, rng) -> Tensor:
    """Scalar probe of a tensor output with fixed random weights."""
    return ad.sum_all(ad.mul(out, Tensor(rng.standard_normal(out.shape))))


def check_op(build, arrays, seed=0, tol=1e-4):
    """Compare tape gradients of ``weighted(build(*tensors))`` with central differences."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    w_rng = lambda: np.random.default_rng([seed, 2])  # noqa: E731
    with ad.Tape() as tape:
        loss = weighted(build(*ts), w_rng())
        tape.backward(loss)

    def f():
        with ad.no_grad():
            return weighted(build(*ts), w_rng()).item()

    worst = 0.0
    for t in ts:
        worst = max(worst, rel_err(t.grad, numeric_grad(f, t.data)))
    assert worst < tol, worst
    return worst


# -- conv2d


def test_conv_1x1_scalar_multiply():
    out = ad.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor([0.0]))
    assert out.shape == (1, 3, 3)
    assert np.array_equal(out.data, np.full((1, 3, 3), 2.0))


def test_conv_full_extent_is_inner_product():
    rng = np.random.default_rng(0)
    x, w = rng.standard_normal((1, 5, 5)), rng.standard_normal((1, 1, 5, 5))
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor([0.0]))
    assert out.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == pytest.approx(float(x.ravel() @ w.ravel()), rel=1e-12)


def test_conv_weight_gradient_2x2x3x3():
    rng = np.random.default_rng(5)
    check_op(lambda x, w, b: ad.conv2d(x, w, b, 1, 1),
             [rng.standard_normal((2, 6, 7)), rng.standard_normal((2, 2, 3, 3)), rng.standard_normal(2)])


def naive_conv(x, w, b, stride, pad):
    c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                out[o, i, j] = np.sum(xp[:, i * stride : i * stride + k, j * stride : j * stride + k] * w[o]) + b[o]
    return out


@settings(max_examples=40)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(0, 2), st.integers(1, 3),
       st.integers(3, 8), st.integers(3, 8), st.integers(0, 10**6))
def test_conv_matches_loop_reference(ci, co, k, pad, stride, h, w, seed):
    if k > h + 2 * pad or k > w + 2 * pad:
        return
    rng = np.random.default_rng(seed)
    x, wt, b = rng.standard_normal((ci, h, w)), rng.standard_normal((co, ci, k, k)), rng.standard_normal(co)
    out = ad.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, pad)
    ho = (h + 2 * pad - k) // stride + 1
    assert out.shape == (co, ho, (w + 2 * pad - k) // stride + 1)
    assert np.allclose(out.data, naive_conv(x, wt, b, stride, pad), atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 2), (2, 1), (3, 0)])
def test_conv_gradients_all_paths(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    check_op(lambda x, w, b: ad.conv2d(x, w, b, stride, pad),
             [rng.standard_normal((2, 2, 7, 6)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)])


def test_conv_channel_mismatch_diagnostic():
    with pytest.raises(ShapeError, match="3 channels.*C_in=2"):
        ad.conv2d(Tensor(np.zeros((3, 5, 5))), Tensor(np.zeros((1, 2, 3, 3))), Tensor([0.0]))


def test_conv_kernel_larger_than_input():
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), Tensor([0.0]))


# -- maxpool


def test_maxpool_basic():
    out = ad.maxpool2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), 2, 2)
    assert out.data.tolist() == [[[4.0]]]


def test_maxpool_ties_first_index():
    x = Tensor(np.full((1, 4, 4), 7.0), requires_grad=True)
    with ad.Tape() as tape:
        out = ad.maxpool2d(x, 2, 2)
        assert np.all(out.data == 7.0)
        g = np.arange(1.0, 5.0).reshape(1, 2, 2)
        tape.backward(ad.sum_all(ad.mul(out, Tensor(g))))
    expect = np.zeros((1, 4, 4))
    expect[0, ::2, ::2] = g[0]
    assert np.array_equal(x.grad, expect)


@pytest.mark.parametrize("kernel,stride", [(2, 2), (3, 1), (2, 1)])
def test_maxpool_gradient(kernel, stride):
    rng = np.random.default_rng(kernel + 7 * stride)
    check_op(lambda x: ad.maxpool2d(x, kernel, stride), [rng.standard_normal((1, 4, 4))])


# -- elementwise


def test_relu_values_and_subgradient():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    with ad.Tape() as tape:
        y = ad.relu(x)
        tape.backward(ad.sum_all(y))
    assert y.data.tolist() == [0.0, 0.0, 2.0]
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
def test_relu_idempotent(vals):
    x = Tensor(vals)
    assert np.array_equal(ad.relu(ad.relu(x)).data, ad.relu(x).data)


def test_tanh_gradient():
    check_op(ad.tanh, [np.random.default_rng(1).standard_normal((3, 4))])


def test_upsample_gradient():
    check_op(lambda x: ad.upsample_nearest2d(x, 2), [np.random.default_rng(2).standard_normal((2, 3, 3))])


def test_add_mul_broadcast_gradient():
    rng = np.random.default_rng(3)
    check_op(lambda a, b: ad.mul(ad.add(a, b), a), [rng.standard_normal((2, 3)), rng.standard_normal(3)])


# -- linear


def test_linear_identity():
    x = np.array([1.5, -2.0, 3.0])
    assert np.array_equal(ad.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)


def test_linear_small():
    out = ad.linear(Tensor([1.0, 2.0]), Tensor([[1.0, 1.0]]), Tensor([0.5]))
    assert out.data.tolist() == [3.5]


@pytest.mark.parametrize("batch", [False, True])
def test_linear_gradient(batch):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((5, 4) if batch else 4)
    check_op(ad.linear, [x, rng.standard_normal((3, 4)), rng.standard_normal(3)])


def test_linear_shape_mismatch():
    with pytest.raises(ShapeError, match="linear"):
        ad.linear(Tensor(np.zeros(3)), Tensor(np.zeros((2, 4))), Tensor(np.zeros(2)))


# -- losses


def test_mse_values():
    assert ad.mse(Tensor([1.0, 2.0]), [1.0, 2.0]).item() == 0.0
    assert ad.mse(Tensor([1.0, 0.0]), [0.0, 0.0]).item() == 0.5


def test_mse_gradient_closed_form():
    rng = np.random.default_rng(6)
    p, t = rng.standard_normal(7), rng.standard_normal(7)
    pred = Tensor(p.copy(), requires_grad=True)
    with ad.Tape() as tape:
        tape.backward(ad.mse(pred, t))
    assert np.allclose(pred.grad, 2 * (p - t) / 7, rtol=1e-12)

    def f():
        return float(np.mean((pred.data - t) ** 2))

    assert rel_err(pred.grad, numeric_grad(f, pred.data)) < 1e-4


def test_mse_rejects_empty_and_mismatch():
    with pytest.raises(ValueError):
        ad.mse(Tensor(np.zeros(0)), np.zeros(0))
    with pytest.raises(ShapeError):
        ad.mse(Tensor(np.zeros(2)), np.zeros(3))


def test_cross_entropy_gradient():
    rng = np.random.default_rng(8)
    labels = rng.integers(0, 4, (2, 3, 3))
    check_op(lambda z: ad.cross_entropy2d(z, labels), [rng.standard_normal((2, 4, 3, 3))])


def test_cross_entropy_uniform_logits():
    z = Tensor(np.zeros((1, 5, 2, 2)))
    assert ad.cross_entropy2d(z, np.zeros((1, 2, 2), int)).item() == pytest.approx(np.log(5))


# -- backward semantics


def test_backward_scale():
    x = Tensor(2.0, requires_grad=True)
    with ad.Tape() as tape:
        tape.backward(ad.scale(x, 3.0))
    assert x.grad == 3.0


def test_backward_accumulates_over_uses():
    x, y = Tensor(2.0, requires_grad=True), Tensor(5.0, requires_grad=True)
    with ad.Tape() as tape:
        tape.backward(x * y + x)
    assert x.grad == 6.0 and y.grad == 2.0


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.relu(x)
        with pytest.raises(ShapeError):
            tape.backward(y)


def test_backward_of_sum_is_sum_of_backwards():
    rng = np.random.default_rng(9)
    w = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    x1, x2 = Tensor(rng.standard_normal(3)), Tensor(rng.standard_normal(3))
    b = Tensor(np.zeros(2))

    def loss(x):
        return ad.sum_all(ad.tanh(ad.linear(x, w, b)))

    grads = []
    for x in (x1, x2):
        with ad.Tape() as tape:
            tape.backward(loss(x))
        grads.append(w.grad)
        w.grad = None
    with ad.Tape() as tape:
        tape.backward(ad.add(loss(x1), loss(x2)))
    assert np.allclose(w.grad, grads[0] + grads[1], rtol=1e-13, atol=1e-15)


def test_every_reachable_leaf_gets_grad():
    a, b = Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2), requires_grad=True)
    c = Tensor(np.ones(2))
    with ad.Tape() as tape:
        tape.backward(ad.sum_all(a * b + c))
    assert a.grad is not None and b.grad is not None and c.grad is None
    assert a.grad.shape == a.shape


def test_tape_cleared_after_backward():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.relu(x))
        assert len(tape) == 2
        tape.backward(loss)
    assert len(tape) == 0


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape, ad.no_grad():
        y = ad.relu(x)
    assert len(tape) == 0 and not y.requires_grad


def test_forward_bit_identical():
    rng = np.random.default_rng(10)
    x, w, b = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 5, 5)), rng.standard_normal(4)
    a = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 2).data
    c = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 2).data
    assert a.tobytes() == c.tobytes()


def test_tapes_are_thread_private():
    results = {}

    def work(k):
        x = Tensor(float(k), requires_grad=True)
        with ad.Tape() as tape:
            tape.backward(ad.scale(x * x, 1.0))
        results[k] = x.grad

    threads = [threading.Thread(target=work, args=(k,)) for k in range(1, 6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == {k: 2.0 * k for k in range(1, 6)}


# -- sgd


def test_sgd_single_step():
    p = Tensor(1.0, requires_grad=True)
    p.grad = np.array(2.0)
    ad.sgd_step([p], 0.1)
    assert p.data == pytest.approx(0.8) and p.grad is None


def test_sgd_zero_lr_keeps_params():
    p = Tensor([1.0, -3.0], requires_grad=True)
    p.grad = np.array([5.0, 5.0])
    ad.sgd_step([p], 0.0)
    assert p.data.tolist() == [1.0, -3.0]


def test_sgd_missing_grad_rejected():
    with pytest.raises(ValueError, match="no gradient"):
        ad.sgd_step([Tensor(1.0, requires_grad=True)], 0.1)


def test_sgd_converges_on_quadratic():
    # loss = (p - 3)^2, minimiser p* = 3
    p = Tensor(-4.0, requires_grad=True)
    opt = ad.SGD([p], 0.1)
    for _ in range(200):
        with ad.Tape() as tape:
            d = ad.add(p, Tensor(-3.0))
            tape.backward(ad.mul(d, d))
        opt.step()
    assert abs(p.item() - 3.0) < 1e-6


# -- checkpoints


def test_checkpoint_bit_exact(tmp_path):
    rng = np.random.default_rng(11)
    params = {"a.weight": rng.standard_normal((2, 3, 4)), "b": np.array([np.pi, -0.0, 1e-300]),
              "scalar": np.array(2.5)}
    path = tmp_path / "m.ckpt"
    ad.save_checkpoint(path, "toy", params)
    mid, back = ad.load_checkpoint(path)
    assert mid == "toy" and list(back) == list(params)
    for k in params:
        assert back[k].shape == params[k].shape and back[k].tobytes() == params[k].tobytes()
    again = tmp_path / "again.ckpt"
    ad.save_checkpoint(again, mid, back)
    assert again.read_bytes() == path.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(ad.CheckpointError, match="magic"):
        ad.load_checkpoint(p)
    ad.save_checkpoint(p, "x", {"w": np.ones(2)})
    p.write_bytes(p.read_bytes() + b"\0")
    with pytest.raises(ad.CheckpointError, match="trailing"):
        ad.load_checkpoint(p)
