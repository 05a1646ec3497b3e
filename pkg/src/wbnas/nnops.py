"""Reverse-mode array ops for the desk-scale super-network.

A minimal tape: each :class:`Node` wraps a float64 array and a hand-derived
vector-Jacobian product against its parents.  Only the handful of ops the
elastic network needs are implemented (grouped strided conv, relu, add,
bilinear resize, channel slicing, masked MSE).
"""

from __future__ import annotations

import numpy as np


class Node:
    __slots__ = ("value", "grad", "parents", "vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return self.value.shape


def constant(value) -> Node:
    return Node(value)


def backward(root: Node) -> None:
    """Accumulate gradients of a scalar root into every reachable node."""
    if root.value.shape != ():
        raise ValueError("backward expects a scalar root")
    order = []
    seen = set()

    def topo(node):
        if id(node) in seen:
            return
        seen.add(id(node))
        for p in node.parents:
            topo(p)
        order.append(node)

    topo(root)
    for node in order:
        node.grad = np.zeros_like(node.value)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.vjp is not None:
            node.vjp(node.grad)


# --------------------------------------------------------------------------
# Convolution
# --------------------------------------------------------------------------


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols, ho, wo


def _col2im(gcols, x_shape, stride, pad):
    n, c, h, w = x_shape
    kh, kw = gcols.shape[2], gcols.shape[3]
    ho, wo = gcols.shape[4], gcols.shape[5]
    gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                :, :, i, j
            ]
    if pad:
        return gxp[:, :, pad:-pad, pad:-pad]
    return gxp


def conv2d(x: Node, w: Node, b: Node | None, stride=1, pad=0, groups=1) -> Node:
    """Grouped 2-D convolution.

    ``w`` is dense ``(Cout, Cin, kh, kw)``; group ``g`` reads the
    block-diagonal slice ``w[g-th out chunk, g-th in chunk]``.  Off-diagonal
    taps are never touched and therefore receive exactly zero gradient.
    """
    n, cin, _, _ = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin_w != cin:
        raise ValueError(f"weight expects {cin_w} input channels, got {cin}")
    if cin % groups or cout % groups:
        raise ValueError(f"groups {groups} must divide channel counts ({cin}, {cout})")
    cols, ho, wo = _im2col(x.value, kh, kw, stride, pad)
    ig, og = cin // groups, cout // groups
    y = np.empty((n, cout, ho, wo), dtype=np.float64)
    for g in range(groups):
        wg = w.value[g * og : (g + 1) * og, g * ig : (g + 1) * ig]
        cg = cols[:, g * ig : (g + 1) * ig]
        y[:, g * og : (g + 1) * og] = np.einsum("ncijhw,ocij->nohw", cg, wg, optimize=True)
    if b is not None:
        y += b.value[: cout].reshape(1, cout, 1, 1)

    parents = (x, w) if b is None else (x, w, b)
    out = Node(y, parents=parents)

    def vjp(gy):
        gcols = np.zeros_like(cols)
        for g in range(groups):
            osl = slice(g * og, (g + 1) * og)
            isl = slice(g * ig, (g + 1) * ig)
            gyg = gy[:, osl]
            cg = cols[:, isl]
            w.grad[osl, isl] += np.einsum("ncijhw,nohw->ocij", cg, gyg, optimize=True)
            gcols[:, isl] = np.einsum(
                "ocij,nohw->ncijhw", w.value[osl, isl], gyg, optimize=True
            )
        x.grad += _col2im(gcols, x.shape, stride, pad)
        if b is not None:
            b.grad[:cout] += gy.sum(axis=(0, 2, 3))

    out.vjp = vjp
    return out


# --------------------------------------------------------------------------
# Pointwise / structural ops
# --------------------------------------------------------------------------


def relu(x: Node) -> Node:
    mask = x.value > 0
    out = Node(x.value * mask, parents=(x,))

    def vjp(gy):
        x.grad += gy * mask

    out.vjp = vjp
    return out


def add(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Node(a.value + b.value, parents=(a, b))

    def vjp(gy):
        a.grad += gy
        b.grad += gy

    out.vjp = vjp
    return out


def add_scalars(nodes) -> Node:
    nodes = list(nodes)
    out = Node(sum(n.value for n in nodes), parents=tuple(nodes))

    def vjp(gy):
        for n in nodes:
            n.grad += gy

    out.vjp = vjp
    return out


def slice_oc(param: Node, count: int) -> Node:
    """First ``count`` entries along axis 0 of a parameter array."""
    out = Node(param.value[:count], parents=(param,))

    def vjp(gy):
        param.grad[:count] += gy

    out.vjp = vjp
    return out


def slice_weight(param: Node, cout: int, cin: int) -> Node:
    """First ``cout`` output and ``cin`` input channels of a conv weight."""
    out = Node(param.value[:cout, :cin], parents=(param,))

    def vjp(gy):
        param.grad[:cout, :cin] += gy

    out.vjp = vjp
    return out


# --------------------------------------------------------------------------
# Bilinear resize (align-corners: pixel centers on integer coordinates,
# corners map to corners, constants are preserved exactly)
# --------------------------------------------------------------------------


def _resize_axis_weights(n_in: int, n_out: int):
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    t = src - lo
    return lo, hi, t


def bilinear_resize_array(x: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Non-differentiable resize of a (..., H, W) array."""
    h_out, w_out = out_hw
    h_in, w_in = x.shape[-2], x.shape[-1]
    ylo, yhi, ty = _resize_axis_weights(h_in, h_out)
    xlo, xhi, tx = _resize_axis_weights(w_in, w_out)
    rows = x[..., ylo, :] * (1 - ty)[:, None] + x[..., yhi, :] * ty[:, None]
    return rows[..., :, xlo] * (1 - tx) + rows[..., :, xhi] * tx


def bilinear_resize(x: Node, out_hw: tuple[int, int]) -> Node:
    h_out, w_out = out_hw
    h_in, w_in = x.shape[-2], x.shape[-1]
    ylo, yhi, ty = _resize_axis_weights(h_in, h_out)
    xlo, xhi, tx = _resize_axis_weights(w_in, w_out)
    out = Node(bilinear_resize_array(x.value, out_hw), parents=(x,))

    def vjp(gy):
        grows = np.zeros(x.shape[:-2] + (h_out, w_in), dtype=np.float64)
        np.add.at(grows, (Ellipsis, xlo), gy * (1 - tx))
        np.add.at(grows, (Ellipsis, xhi), gy * tx)
        gx = np.zeros_like(x.value)
        np.add.at(gx, (..., ylo, slice(None)), grows * (1 - ty)[:, None])
        np.add.at(gx, (..., yhi, slice(None)), grows * ty[:, None])
        x.grad += gx

    out.vjp = vjp
    return out


# --------------------------------------------------------------------------
# Masked pixel-wise MSE
# --------------------------------------------------------------------------


def masked_mse(pred: Node, target: np.ndarray, mask: np.ndarray | None = None) -> Node:
    """Mean squared error over heatmaps, averaging only unmasked channels.

    ``pred``/``target`` are (N, K, H, W); ``mask`` is (N, K) with nonzero
    entries marking channels that contribute.  Masked channels are excluded
    from both the sum and the normalizer.  The result is the mean over
    samples of sum_k,i,j (y - yhat)^2 / (K_active * H * W).
    """
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    n, k, h, w = pred.shape
    if mask is None:
        mask = np.ones((n, k))
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (n, k):
        raise ValueError(f"mask must be (N, K) = ({n}, {k}), got {mask.shape}")
    active = (mask != 0).astype(np.float64)
    k_active = active.sum(axis=1)  # per sample
    denom = np.where(k_active > 0, k_active * h * w, 1.0)
    diff = (pred.value - target) * active[:, :, None, None]
    per_sample = (diff**2).sum(axis=(1, 2, 3)) / denom
    out = Node(per_sample.mean(), parents=(pred,))

    def vjp(gy):
        pred.grad += gy * 2.0 * diff / denom[:, None, None, None] / n

    out.vjp = vjp
    return out
