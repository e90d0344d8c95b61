import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dxnet import ops
from dxnet.autodiff import NonFiniteError, Variable, backward, no_grad
from dxnet.gradcheck import check_gradients, grad_check
from dxnet.ops import BatchNormState, ConvSpec
from oracles import naive_conv2d


def V(a, grad=False):
    return Variable(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- conv2d -------------------------------------------------------------------


def test_conv_identity_1x1(rng):
    x = rng.normal(size=(2, 4, 5, 5))
    w = np.eye(4).reshape(4, 4, 1, 1)
    y = ops.conv2d(V(x), V(w), None, ConvSpec(4, 4, 1, 1))
    assert np.array_equal(y.data, x)


def test_conv_all_ones_receptive_fields():
    y = ops.conv2d(V(np.ones((1, 1, 4, 4))), V(np.ones((1, 1, 3, 3))), None, ConvSpec.same(1, 1, 3)).data[0, 0]
    expected = np.array([[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]], dtype=float)
    assert np.array_equal(y, expected)


def test_depthwise_9x9_matches_naive_loop(rng):
    x = rng.normal(size=(1, 2, 12, 11))
    w = rng.normal(size=(2, 1, 9, 9))
    b = rng.normal(size=2)
    y = ops.conv2d(V(x), V(w), V(b), ConvSpec.same(2, 2, 9, groups=2, bias=True)).data
    np.testing.assert_allclose(y, naive_conv2d(x, w, b, padding=4, groups=2), rtol=1e-9, atol=1e-9)
    for c in range(2):
        single = naive_conv2d(x[:, c : c + 1], w[c : c + 1], b[c : c + 1], padding=4)
        np.testing.assert_allclose(y[:, c : c + 1], single, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize(
    "cin,cout,k,stride,pad,groups",
    [(3, 5, 3, 1, 1, 1), (4, 6, 3, 2, 1, 2), (3, 2, 1, 1, 0, 1), (4, 4, 5, 1, 2, 4), (2, 3, 2, 2, 0, 1)],
)
def test_conv_matches_naive_loop(rng, cin, cout, k, stride, pad, groups):
    x = rng.normal(size=(2, cin, 7, 6))
    w = rng.normal(size=(cout, cin // groups, k, k))
    spec = ConvSpec(cin, cout, k, k, stride, pad, groups)
    y = ops.conv2d(V(x), V(w), None, spec).data
    np.testing.assert_allclose(y, naive_conv2d(x, w, None, stride, pad, groups), rtol=1e-10, atol=1e-10)


def test_conv_errors():
    with pytest.raises(ValueError):
        ConvSpec(3, 4, 3, 3, groups=2)
    with pytest.raises(ValueError):
        ops.conv2d(V(np.ones((1, 2, 4, 4))), V(np.ones((1, 3, 3, 3))), None, ConvSpec(3, 1, 3, 3))
    with pytest.raises(ValueError):
        ops.conv2d(V(np.ones((1, 1, 2, 2))), V(np.ones((1, 1, 3, 3))), None, ConvSpec(1, 1, 3, 3))


# -- batch norm -----------------------------------------------------------------


def test_bn_train_normalizes(rng):
    st_ = BatchNormState.create(3, np.float64)
    y = ops.batch_norm(V(rng.normal(2.0, 3.0, size=(8, 3, 5, 5))), st_).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-5)


def test_bn_zero_gamma(rng):
    st_ = BatchNormState.create(2, np.float64)
    st_.gamma.data[:] = 0.0
    st_.beta.data[:] = [0.3, -0.7]
    x = V(rng.normal(size=(4, 2, 3, 3)), grad=True)
    y = ops.batch_norm(x, st_)
    np.testing.assert_allclose(y.data, np.broadcast_to(np.array([0.3, -0.7])[None, :, None, None], y.shape))
    backward(ops.sum_all(ops.hadamard(y, V(rng.normal(size=y.shape)))))
    assert np.all(x.grad == 0.0)


def test_bn_eval_closed_form():
    st_ = BatchNormState.create(1, np.float64)
    st_.gamma.data[:] = 2.0
    st_.beta.data[:] = 1.0
    st_.mode = "eval"
    y = ops.batch_norm(V(np.full((1, 1, 1, 1), 0.5)), st_).data.item()
    assert y == pytest.approx(2 * 0.5 / math.sqrt(1 + 1e-5) + 1, abs=1e-12)
    assert y == pytest.approx(1.999995, abs=1e-9)


def test_bn_running_stats_update(rng):
    st_ = BatchNormState.create(2, np.float64)
    x = rng.normal(1.0, 2.0, size=(4, 2, 3, 3))
    ops.batch_norm(V(x), st_)
    np.testing.assert_allclose(st_.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


def test_bn_errors():
    st_ = BatchNormState.create(2, np.float64)
    st_.mode = "eval"
    st_.running_mean = None
    with pytest.raises(ValueError):
        ops.batch_norm(V(np.ones((1, 2, 2, 2))), st_)
    with pytest.raises(ValueError):
        ops.batch_norm(V(np.ones((0, 2, 2, 2))), BatchNormState.create(2, np.float64))


# -- activations, pooling, concat, hadamard --------------------------------------


def test_activation_values():
    assert ops.activation(V([0.0]), "sigmoid").data[0] == 0.5
    assert ops.activation(V([0.0]), "gaussian_gate").data[0] == 1.0
    for z, val, g in ((-3.2, 0.0, 0.0), (3.2, 3.2, 1.0), (0.0, 0.0, 0.0)):
        x = V([z], grad=True)
        y = ops.relu(x)
        backward(ops.sum_all(y))
        assert y.data[0] == val and x.grad[0] == g


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 50), elements=st.floats(-1e3, 1e3)))
def test_gate_range(z):
    for kind in ("sigmoid", "gaussian"):
        g = ops.gate(V(z), kind).data
        assert np.all((g >= 0) & (g <= 1))


def test_pool_values(rng):
    assert ops.pool(V(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), "avg2x2").data.item() == 2.5
    assert np.all(ops.pool(V(np.full((2, 3, 5, 7), 1.25)), "global_avg").data == 1.25)
    assert ops.pool(V(rng.normal(size=(1, 1, 5, 7))), "avg2x2").shape == (1, 1, 2, 3)
    with pytest.raises(ValueError):
        ops.pool(V(np.ones((1, 1, 0, 2))), "global_avg")


def test_pool_gradient_quarter():
    x = V(np.zeros((1, 1, 4, 4)), grad=True)
    backward(ops.sum_all(ops.pool(x, "avg2x2")))
    assert np.all(x.grad == 0.25)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.integers(0, 2**31))
def test_concat_slice_identity(channels, seed):
    r = np.random.default_rng(seed)
    xs = [r.normal(size=(2, c, 3, 4)) for c in channels]
    y = ops.concat_channels([V(x) for x in xs]).data
    assert y.shape[1] == sum(channels)
    start = 0
    for x in xs:
        assert np.array_equal(y[:, start : start + x.shape[1]], x)
        start += x.shape[1]


def test_concat_errors():
    with pytest.raises(ValueError):
        ops.concat_channels([V(np.ones((1, 1, 2, 2))), V(np.ones((1, 1, 3, 2)))])


def test_hadamard_identities(rng):
    x = V(rng.normal(size=(2, 3, 4, 4)), grad=True)
    assert np.array_equal(ops.hadamard(x, V(np.ones(x.shape))).data, x.data)
    y = ops.hadamard(x, V(np.zeros(x.shape)))
    backward(ops.sum_all(y))
    assert np.all(y.data == 0) and np.all(x.grad == 0)
    with pytest.raises(ValueError):
        ops.hadamard(x, V(np.ones((2, 3, 4, 3))))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_hadamard_gate_shrinks(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(3, 7))
    g = r.uniform(0, 1, size=(3, 7))
    assert np.all(np.abs(ops.hadamard(V(x), V(g)).data) <= np.abs(x))


# -- losses ----------------------------------------------------------------------


def test_losses(rng):
    t = rng.normal(size=(4, 3))
    assert ops.compute_loss("mse", V(t), t).data == 0.0
    assert ops.compute_loss("mae", V(t + 1.0), t).data == pytest.approx(1.0)
    ce = ops.compute_loss("softmax_ce", V(np.zeros((5, 10))), np.arange(5)).data
    assert ce == pytest.approx(math.log(10), abs=1e-12)
    assert ce == pytest.approx(2.302585, abs=1e-6)
    with pytest.raises(ValueError):
        ops.compute_loss("softmax_ce", V(np.zeros((2, 10))), np.array([0, 10]))
    x = V([1.0, 2.0], grad=True)
    backward(ops.compute_loss("mae", x, np.array([1.0, 0.0])))
    assert x.grad[0] == 0.0 and x.grad[1] == 0.5


# -- backward ------------------------------------------------------------------


def test_backward_basic(rng):
    x = V(rng.normal(size=(2, 3, 4)), grad=True)
    backward(ops.sum_all(x))
    assert np.all(x.grad == 1.0)
    backward(ops.sum_all(ops.hadamard(x, x)))
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_accumulates_over_uses(rng):
    a = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    x = V(a, grad=True)
    backward(ops.sum_all(ops.add(ops.hadamard(x, V(w)), ops.hadamard(x, V(a)))))
    # oracle: same function with the two uses fed from distinct copies
    x1, x2 = V(a, grad=True), V(a, grad=True)
    backward(ops.sum_all(ops.add(ops.hadamard(x1, V(w)), ops.hadamard(x2, V(a)))))
    np.testing.assert_allclose(x.grad, x1.grad + x2.grad)


def test_backward_errors():
    with pytest.raises(ValueError):
        backward(V(np.ones(3), grad=True))
    with pytest.raises(NonFiniteError):
        ops.scale(V([1.0]), np.inf)


def test_no_grad_records_nothing():
    x = V([1.0, 2.0], grad=True)
    with no_grad():
        y = ops.sum_all(x)
    assert not y.requires_grad


# -- gradient checks ---------------------------------------------------------


def test_grad_check_quadratic():
    err = grad_check(lambda v: ops.scale(ops.sum_all(ops.hadamard(v, v)), 0.5), np.linspace(-1, 2, 7), 1e-4)
    assert err < 1e-8


def test_grad_check_conv_weights_5x5(rng):
    x = V(rng.normal(size=(2, 2, 5, 5)))
    r = V(rng.normal(size=(2, 3, 5, 5)))
    spec = ConvSpec.same(2, 3, 3)
    err = grad_check(lambda w: ops.sum_all(ops.hadamard(ops.conv2d(x, w, None, spec), r)), rng.normal(size=(3, 2, 3, 3)))
    assert err < 1e-4


def _weighted(y, r):
    return ops.sum_all(ops.hadamard(y, Variable(r)))


def _random_primitive_cases(rng):
    """Yields (label, f, variables, tolerance) over randomized small shapes."""
    for trial in range(4):
        n, c, h, w = rng.integers(1, 3), rng.integers(1, 4), rng.integers(3, 7), rng.integers(3, 7)
        k = int(rng.choice([1, 3]))
        groups = int(rng.choice([1, c]))
        cout = c * int(rng.integers(1, 3)) if groups == c else int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        spec = ConvSpec(c, cout, k, k, stride, k // 2, groups, has_bias=True)
        x = V(rng.normal(size=(n, c, h, w)))
        wt = V(rng.normal(size=spec.weight_shape))
        b = V(rng.normal(size=cout))
        ho, wo = spec.output_hw(h, w)
        r = rng.normal(size=(n, cout, ho, wo))
        yield f"conv{trial}", lambda x=x, wt=wt, b=b, spec=spec, r=r: _weighted(ops.conv2d(x, wt, b, spec), r), [x, wt, b], 1e-4

        bn = BatchNormState.create(c, np.float64)
        bn.gamma.data[:] = rng.uniform(0.5, 2.0, c)
        bn.beta.data[:] = rng.normal(size=c)
        xb = V(rng.normal(size=(n + 1, c, h, w)))
        rb = rng.normal(size=xb.shape)
        yield f"bn_train{trial}", lambda xb=xb, bn=bn, rb=rb: _weighted(ops.batch_norm(xb, bn), rb), [xb, bn.gamma, bn.beta], 1e-3

        bne = BatchNormState.create(c, np.float64)
        bne.running_mean[:] = rng.normal(size=c)
        bne.running_var[:] = rng.uniform(0.5, 2.0, c)
        bne.mode = "eval"
        yield f"bn_eval{trial}", lambda xb=xb, bne=bne, rb=rb: _weighted(ops.batch_norm(xb, bne), rb), [xb, bne.gamma, bne.beta], 1e-4

        z = V(rng.normal(size=(n, c, h, w)) + 0.05)
        rz = rng.normal(size=z.shape)
        for kind in ("relu", "sigmoid", "gaussian_gate"):
            yield f"{kind}{trial}", lambda z=z, kind=kind, rz=rz: _weighted(ops.activation(z, kind), rz), [z], 1e-4

        for kind in ("avg2x2", "global_avg"):
            out_shape = ops.pool(z, kind).shape
            rp = rng.normal(size=out_shape)
            yield f"{kind}{trial}", lambda z=z, kind=kind, rp=rp: _weighted(ops.pool(z, kind), rp), [z], 1e-4

        z2 = V(rng.normal(size=(n, int(rng.integers(1, 4)), h, w)))
        rc = rng.normal(size=(n, c + z2.shape[1], h, w))
        yield f"concat{trial}", lambda z=z, z2=z2, rc=rc: _weighted(ops.concat_channels([z, z2]), rc), [z, z2], 1e-4

        g = V(rng.uniform(size=z.shape))
        yield f"hadamard{trial}", lambda z=z, g=g, rz=rz: _weighted(ops.hadamard(z, g), rz), [z, g], 1e-4

        lx = V(rng.normal(size=(n + 1, 4)))
        lw = V(rng.normal(size=(3, 4)))
        lb = V(rng.normal(size=3))
        rl = rng.normal(size=(n + 1, 3))
        yield f"linear{trial}", lambda lx=lx, lw=lw, lb=lb, rl=rl: _weighted(ops.linear(lx, lw, lb), rl), [lx, lw, lb], 1e-4

        ps = V(rng.normal(size=(n, 4 * c, h, w)))
        rps = rng.normal(size=(n, c, 2 * h, 2 * w))
        yield f"pixel_shuffle{trial}", lambda ps=ps, rps=rps: _weighted(ops.pixel_shuffle(ps, 2), rps), [ps], 1e-4

        p = V(rng.normal(size=(n + 1, 5)))
        t = rng.normal(size=(n + 1, 5))
        labels = rng.integers(0, 5, size=n + 1)
        yield f"mse{trial}", lambda p=p, t=t: ops.compute_loss("mse", p, t), [p], 1e-4
        yield f"mae{trial}", lambda p=p, t=t: ops.compute_loss("mae", p, t), [p], 1e-4
        yield f"ce{trial}", lambda p=p, labels=labels: ops.compute_loss("softmax_ce", p, labels), [p], 1e-4


def test_every_primitive_gradient_over_random_shapes():
    rng = np.random.default_rng(7)
    cases = list(_random_primitive_cases(rng))
    shapes = {tuple(v.shape) for _, _, vs, _ in cases for v in vs}
    assert len(shapes) >= 20
    failures = []
    for label, f, variables, tol in cases:
        err = check_gradients(f, variables)
        if not err < tol:
            failures.append((label, err))
    assert not failures, failures
