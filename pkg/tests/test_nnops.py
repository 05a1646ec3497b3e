import numpy as np
import pytest

from wbnas import nnops as O

GRAD_TOL = 1e-4  # central differences vs analytic, relative


def central_diff(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom


def scalarize(node):
    """Quadratic reduction so every output element gets a distinct weight."""
    w = np.arange(1, node.value.size + 1, dtype=np.float64).reshape(node.value.shape)
    out = O.Node((node.value * w).sum(), parents=(node,))

    def vjp(gy):
        node.grad += gy * w

    out.vjp = vjp
    return out


def check_grads(build, arrays):
    """``build`` maps Nodes (one per array) to a scalar Node."""
    nodes = [O.Node(a) for a in arrays]
    root = build(*nodes)
    O.backward(root)
    for node, arr in zip(nodes, arrays):
        def f(node=node, arr=arr):
            fresh = [O.Node(a) for a in arrays]
            # re-wrap so the perturbed array is picked up
            return float(build(*fresh).value)
        num = central_diff(f, arr)
        assert rel_err(node.grad, num) < GRAD_TOL


def test_conv2d_gradcheck_plain():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    check_grads(lambda xn, wn, bn: scalarize(O.conv2d(xn, wn, bn, stride=1, pad=1)), [x, w, b])


def test_conv2d_gradcheck_grouped_strided():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 4, 6, 6))
    w = rng.normal(size=(8, 4, 3, 3))
    b = rng.normal(size=8)
    check_grads(
        lambda xn, wn, bn: scalarize(O.conv2d(xn, wn, bn, stride=2, pad=1, groups=2)),
        [x, w, b],
    )


def test_conv2d_off_diagonal_taps_untouched():
    rng = np.random.default_rng(2)
    x = O.Node(rng.normal(size=(1, 4, 4, 4)))
    w = O.Node(rng.normal(size=(4, 4, 3, 3)))
    y = scalarize(O.conv2d(x, w, None, pad=1, groups=2))
    O.backward(y)
    # group 0 reads in-channels 0:2, group 1 reads 2:4; cross taps get zero
    assert np.all(w.grad[0:2, 2:4] == 0)
    assert np.all(w.grad[2:4, 0:2] == 0)
    assert np.any(w.grad[0:2, 0:2] != 0)


def test_conv2d_shape_validation():
    x = O.Node(np.zeros((1, 3, 4, 4)))
    w = O.Node(np.zeros((4, 2, 3, 3)))
    with pytest.raises(ValueError):
        O.conv2d(x, w, None)
    w2 = O.Node(np.zeros((3, 3, 1, 1)))
    with pytest.raises(ValueError):
        O.conv2d(x, w2, None, groups=2)


def test_relu_and_add_gradcheck():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(2, 3, 4, 4))
    b = rng.normal(size=(2, 3, 4, 4))
    check_grads(lambda an, bn: scalarize(O.relu(O.add(an, bn))), [a, b])


def test_slice_ops_route_gradients_to_prefix():
    rng = np.random.default_rng(4)
    p = O.Node(rng.normal(size=(6, 5, 3, 3)))
    sliced = O.slice_weight(p, 4, 2)
    y = scalarize(sliced)
    O.backward(y)
    assert np.all(p.grad[4:] == 0)
    assert np.all(p.grad[:4, 2:] == 0)
    assert np.any(p.grad[:4, :2] != 0)

    b = O.Node(rng.normal(size=6))
    y2 = scalarize(O.slice_oc(b, 3))
    O.backward(y2)
    assert np.all(b.grad[3:] == 0)
    assert np.all(b.grad[:3] != 0)


def test_bilinear_resize_gradcheck():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 4, 5))
    check_grads(lambda xn: scalarize(O.bilinear_resize(xn, (7, 3))), [x])
    check_grads(lambda xn: scalarize(O.bilinear_resize(xn, (2, 9))), [x])


def test_bilinear_resize_preserves_constants():
    x = np.full((1, 2, 5, 7), 3.25)
    out = O.bilinear_resize_array(x, (11, 4))
    assert np.allclose(out, 3.25)


def test_bilinear_resize_matches_closed_form():
    # corner-aligned: output column j samples input at j*(n_in-1)/(n_out-1)
    x = np.array([[[0.0, 1.0], [0.0, 1.0]]])
    out = O.bilinear_resize_array(x, (2, 4))
    assert np.allclose(out[0, 0], [0.0, 1 / 3, 2 / 3, 1.0])
    ramp = np.arange(5, dtype=np.float64)[None, None, :].repeat(2, axis=1)
    out2 = O.bilinear_resize_array(ramp, (2, 9))
    assert np.allclose(out2[0, 0], np.arange(9) * 4 / 8)


def test_masked_mse_value_and_grad():
    rng = np.random.default_rng(6)
    pred = rng.normal(size=(2, 3, 4, 4))
    target = rng.normal(size=(2, 3, 4, 4))
    mask = np.array([[1, 0, 1], [1, 1, 1]], dtype=float)

    # hand-computed value: per sample, masked channels excluded from sum
    # and from the normalizer
    expected = 0.0
    for n in range(2):
        active = mask[n] != 0
        diff = (pred[n, active] - target[n, active]) ** 2
        expected += diff.sum() / (active.sum() * 16)
    expected /= 2

    node = O.masked_mse(O.Node(pred), target, mask)
    assert abs(float(node.value) - expected) < 1e-12

    check_grads(lambda pn: O.masked_mse(pn, target, mask), [pred])


def test_masked_mse_identical_inputs_zero():
    x = np.random.default_rng(7).normal(size=(1, 2, 3, 3))
    node = O.masked_mse(O.Node(x.copy()), x)
    assert float(node.value) == 0.0


def test_masked_mse_shape_errors():
    with pytest.raises(ValueError):
        O.masked_mse(O.Node(np.zeros((1, 2, 3, 3))), np.zeros((1, 2, 3, 4)))
    with pytest.raises(ValueError):
        O.masked_mse(O.Node(np.zeros((1, 2, 3, 3))), np.zeros((1, 2, 3, 3)), np.zeros((2, 2)))


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        O.backward(O.Node(np.zeros(3)))


def test_composite_loss_gradcheck():
    # conv -> relu -> resize -> masked mse, the full layer stack in one graph
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 2, 6, 6))
    w = rng.normal(size=(4, 2, 3, 3))
    b = rng.normal(size=4)
    target = rng.normal(size=(1, 4, 5, 5))
    mask = np.array([[1, 1, 0, 1]], dtype=float)

    def build(xn, wn, bn):
        y = O.relu(O.conv2d(xn, wn, bn, stride=2, pad=1, groups=2))
        y = O.bilinear_resize(y, (5, 5))
        return O.masked_mse(y, target, mask)

    check_grads(build, [x, w, b])
