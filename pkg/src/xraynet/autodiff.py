"""Reverse-mode automatic differentiation over dense numpy arrays.

A `Variable` wraps an ndarray (float32 for training, float64 for tight
gradient verification) together with an accumulated gradient and the graph
edges needed for backpropagation. Ops are pure functions: they build a new
`Variable` whose recorded edges carry vector-Jacobian closures back to each
differentiable input. `backward` propagates from a scalar root in reverse
topological order and adds the result into each reachable Variable's
gradient, so calling it twice without zeroing doubles the gradients.

The op set is exactly what small residual/dense image classifiers require:
conv2d, batch norm (composed from elementwise/reduction primitives), relu,
pooling, linear, add, channel concat, and a fused log-softmax for stable
losses. There is no general broadcasting at the public level; the internal
primitives broadcast only as far as channel parameters and reductions need.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

Edge = tuple["Variable", Callable[[np.ndarray], np.ndarray]]

_FLOAT_DTYPES = (np.float32, np.float64)


class Variable:
    """A tensor participating in the differentiable graph."""

    __slots__ = ("data", "requires_grad", "_grad", "_edges")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None
        self._edges: tuple[Edge, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self) -> np.ndarray:
        """Accumulated gradient; zeros until a backward pass reaches this node."""
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Variable(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def constant(data, dtype=None) -> Variable:
    return Variable(data, requires_grad=False, dtype=dtype)


def _op(data: np.ndarray, edges: Iterable[Edge]) -> Variable:
    kept = tuple((v, f) for v, f in edges if v.requires_grad)
    out = Variable(data, requires_grad=bool(kept))
    out._edges = kept
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / reduction primitives (internal; broadcast-aware)
# ---------------------------------------------------------------------------

def badd(a: Variable, b: Variable) -> Variable:
    return _op(a.data + b.data, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ])


def bsub(a: Variable, b: Variable) -> Variable:
    return _op(a.data - b.data, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    ])


def bmul(a: Variable, b: Variable) -> Variable:
    ad, bd = a.data, b.data
    return _op(ad * bd, [
        (a, lambda g: _unbroadcast(g * bd, ad.shape)),
        (b, lambda g: _unbroadcast(g * ad, bd.shape)),
    ])


def mulc(x: Variable, c: float) -> Variable:
    return _op(x.data * x.dtype.type(c), [(x, lambda g: g * c)])


def addc(x: Variable, c: float) -> Variable:
    return _op(x.data + x.dtype.type(c), [(x, lambda g: g)])


def neg(x: Variable) -> Variable:
    return mulc(x, -1.0)


def exp(x: Variable) -> Variable:
    out = np.exp(x.data)
    return _op(out, [(x, lambda g: g * out)])


def powc(x: Variable, c: float) -> Variable:
    """x ** c for a constant exponent.

    c == 0 yields ones with zero gradient; a zero base with fractional or
    sub-one exponent gets a zero (boundary) gradient instead of an infinity.
    """
    xd = x.data
    out = xd ** x.dtype.type(c)

    def vjp(g: np.ndarray) -> np.ndarray:
        if c == 0:
            return np.zeros_like(xd)
        safe = np.where(xd != 0, xd, 1.0)
        d = c * safe ** (c - 1.0)
        d = np.where(xd != 0, d, 0.0 if c < 1 else (1.0 if c == 1 else 0.0))
        return (g * d).astype(xd.dtype, copy=False)

    return _op(out, [(x, vjp)])


def sum_axes(x: Variable, axis=None, keepdims: bool = False) -> Variable:
    xd = x.data
    out = xd.sum(axis=axis, keepdims=keepdims)

    def vjp(g: np.ndarray) -> np.ndarray:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, xd.shape).astype(xd.dtype, copy=False)

    return _op(out, [(x, vjp)])


def mean_axes(x: Variable, axis=None, keepdims: bool = False) -> Variable:
    xd = x.data
    count = xd.size if axis is None else np.prod([xd.shape[a] for a in np.atleast_1d(axis)])
    out = xd.mean(axis=axis, keepdims=keepdims)

    def vjp(g: np.ndarray) -> np.ndarray:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape) / count).astype(xd.dtype, copy=False)

    return _op(out, [(x, vjp)])


def reshape(x: Variable, shape: Sequence[int]) -> Variable:
    shape = tuple(shape)
    old = x.data.shape
    return _op(x.data.reshape(shape), [(x, lambda g: g.reshape(old))])


# ---------------------------------------------------------------------------
# public network ops
# ---------------------------------------------------------------------------

def relu(x: Variable) -> Variable:
    mask = x.data > 0
    return _op(np.where(mask, x.data, x.dtype.type(0)), [(x, lambda g: g * mask)])


def add(a: Variable, b: Variable) -> Variable:
    """Strict elementwise addition (skip connections): shapes must match."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    return _op(a.data + b.data, [(a, lambda g: g), (b, lambda g: g)])


def concat_channels(xs: Sequence[Variable]) -> Variable:
    """Concatenate NCHW tensors along the channel axis."""
    if not xs:
        raise ValueError("concat_channels: need at least one input")
    base = xs[0].data.shape
    for v in xs[1:]:
        s = v.data.shape
        if len(s) != 4 or s[0] != base[0] or s[2:] != base[2:]:
            raise ValueError(
                f"concat_channels: incompatible shapes {base} vs {s} (all dims but channels must match)")
    out = np.concatenate([v.data for v in xs], axis=1)
    edges = []
    start = 0
    for v in xs:
        c = v.data.shape[1]
        lo, hi = start, start + c

        def vjp(g: np.ndarray, lo=lo, hi=hi) -> np.ndarray:
            return g[:, lo:hi]

        edges.append((v, vjp))
        start = hi
    return _op(out, edges)


def linear(x: Variable, weight: Variable, bias: Variable) -> Variable:
    """y = x @ weight.T + bias with x: (N, F), weight: (O, F), bias: (O,)."""
    xd, wd, bd = x.data, weight.data, bias.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise ValueError(
            f"linear: input features {xd.shape} do not match weight columns {wd.shape}")
    if bd.shape != (wd.shape[0],):
        raise ValueError(f"linear: bias shape {bd.shape} must be ({wd.shape[0]},)")
    out = xd @ wd.T + bd
    return _op(out, [
        (x, lambda g: g @ wd),
        (weight, lambda g: g.T @ xd),
        (bias, lambda g: g.sum(axis=0)),
    ])


def _pool_windows(xd: np.ndarray, k: int, stride: int) -> np.ndarray:
    n, c, h, w = xd.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    s0, s1, s2, s3 = xd.strides
    return np.lib.stride_tricks.as_strided(
        xd, shape=(n, c, oh, ow, k, k),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3))


def max_pool2d(x: Variable, kernel: int = 2, stride: int | None = None) -> Variable:
    """Max pooling; on ties the gradient routes to the lowest flat index in the window."""
    stride = kernel if stride is None else stride
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"max_pool2d: expected NCHW input, got shape {xd.shape}")
    n, c, h, w = xd.shape
    if h < kernel or w < kernel:
        raise ValueError(f"max_pool2d: window {kernel} exceeds input {h}x{w}")
    win = _pool_windows(xd, kernel, stride)
    oh, ow = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, oh, ow, kernel * kernel)
    amax = flat.argmax(axis=-1)  # first maximum wins ties
    out = np.take_along_axis(flat, amax[..., None], axis=-1)[..., 0]

    def vjp(g: np.ndarray) -> np.ndarray:
        gx = np.zeros_like(xd)
        for i in range(kernel):
            for j in range(kernel):
                sel = (amax == i * kernel + j)
                gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g * sel
        return gx

    return _op(out, [(x, vjp)])


def avg_pool2d(x: Variable, kernel: int = 2, stride: int | None = None) -> Variable:
    stride = kernel if stride is None else stride
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"avg_pool2d: expected NCHW input, got shape {xd.shape}")
    n, c, h, w = xd.shape
    if h < kernel or w < kernel:
        raise ValueError(f"avg_pool2d: window {kernel} exceeds input {h}x{w}")
    win = _pool_windows(xd, kernel, stride)
    oh, ow = win.shape[2], win.shape[3]
    out = win.mean(axis=(4, 5))
    scale = 1.0 / (kernel * kernel)

    def vjp(g: np.ndarray) -> np.ndarray:
        gx = np.zeros_like(xd)
        gs = (g * scale).astype(xd.dtype, copy=False)
        for i in range(kernel):
            for j in range(kernel):
                gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gs
        return gx

    return _op(out, [(x, vjp)])


def global_avg_pool(x: Variable) -> Variable:
    """(N, C, H, W) -> (N, C) spatial mean."""
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"global_avg_pool: expected NCHW input, got shape {xd.shape}")
    n, c, h, w = xd.shape
    out = xd.mean(axis=(2, 3))

    def vjp(g: np.ndarray) -> np.ndarray:
        return (np.broadcast_to(g[:, :, None, None], xd.shape) / (h * w)).astype(xd.dtype, copy=False)

    return _op(out, [(x, vjp)])


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # slice-copy per kernel offset: much faster than reshaping a 6-D strided view
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def conv2d(x: Variable, kernel: Variable, bias: Variable,
           stride: int = 1, padding: int = 0) -> Variable:
    """2-D cross-correlation (no kernel flip) with per-output-channel bias.

    x: (N, Cin, H, W), kernel: (Cout, Cin, kH, kW), bias: (Cout,).
    Output spatial dims follow the floor convention
    H' = (H + 2*padding - kH) // stride + 1 and must be >= 1.
    """
    xd, kd, bd = x.data, kernel.data, bias.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input/kernel, got {xd.shape} and {kd.shape}")
    n, cin, h, w = xd.shape
    cout, kcin, kh, kw = kd.shape
    if cin != kcin:
        raise ValueError(
            f"conv2d: input has {cin} channels but kernel expects {kcin} (kernel {kd.shape})")
    if bd.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bd.shape} must be ({cout},)")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} with stride {stride}, padding {padding} "
            f"collapses {h}x{w} input to {oh}x{ow}")

    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    cols = _im2col(xp, kh, kw, stride, oh, ow)            # (N, Cin*kh*kw, oh*ow)
    k2 = kd.reshape(cout, -1)
    out = np.matmul(k2, cols) + bd[None, :, None]          # (N, Cout, oh*ow)
    out = out.reshape(n, cout, oh, ow)

    hp, wp = xp.shape[2], xp.shape[3]

    def vjp_x(g: np.ndarray) -> np.ndarray:
        g2 = g.reshape(n, cout, oh * ow)
        gcols = np.matmul(k2.T, g2).reshape(n, cin, kh, kw, oh, ow)
        gxp = np.zeros((n, cin, hp, wp), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, :, i, j]
        if padding:
            return gxp[:, :, padding:hp - padding, padding:wp - padding]
        return gxp

    def vjp_k(g: np.ndarray) -> np.ndarray:
        g2 = g.reshape(n, cout, oh * ow)
        return np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(kd.shape)

    def vjp_b(g: np.ndarray) -> np.ndarray:
        return g.sum(axis=(0, 2, 3))

    return _op(out, [(x, vjp_x), (kernel, vjp_k), (bias, vjp_b)])


def batch_norm(x: Variable, gamma: Variable, beta: Variable,
               running_mean: np.ndarray, running_var: np.ndarray,
               train: bool, eps: float = 1e-5, momentum: float = 0.1,
               update_running: bool = True) -> Variable:
    """Per-channel batch normalization on NCHW input.

    Train mode normalizes by batch statistics (and, when `update_running`,
    folds the unbiased batch variance into the running buffers in place);
    eval mode normalizes by the running buffers. Differentiable w.r.t. the
    input, gamma, and beta.
    """
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"batch_norm: expected NCHW input, got shape {xd.shape}")
    n, c, h, w = xd.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(
            f"batch_norm: gamma/beta shapes {gamma.data.shape}/{beta.data.shape} must be ({c},)")
    gs = reshape(gamma, (1, c, 1, 1))
    bs = reshape(beta, (1, c, 1, 1))
    if train:
        m = n * h * w
        if m < 2:
            raise ValueError("batch_norm: train mode needs at least 2 values per channel")
        mu = mean_axes(x, axis=(0, 2, 3), keepdims=True)
        xc = bsub(x, mu)
        var = mean_axes(bmul(xc, xc), axis=(0, 2, 3), keepdims=True)
        inv = powc(addc(var, eps), -0.5)
        xhat = bmul(xc, inv)
        if update_running:
            bm = mu.data.reshape(c)
            bv = var.data.reshape(c) * (m / (m - 1.0))  # unbiased for the running buffer
            running_mean *= (1.0 - momentum)
            running_mean += momentum * bm
            running_var *= (1.0 - momentum)
            running_var += momentum * bv
    else:
        scale = (1.0 / np.sqrt(running_var + eps)).reshape(1, c, 1, 1).astype(xd.dtype)
        shift = running_mean.reshape(1, c, 1, 1).astype(xd.dtype)
        xhat = bmul(bsub(x, constant(shift)), constant(scale))
    return badd(bmul(xhat, gs), bs)


def log_softmax(x: Variable, axis: int = 1) -> Variable:
    """Numerically stable fused log(softmax(x)) along `axis`."""
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    s = xd - m
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    out = s - lse

    def vjp(g: np.ndarray) -> np.ndarray:
        return g - np.exp(out) * g.sum(axis=axis, keepdims=True)

    return _op(out, [(x, vjp)])


def softmax(x: Variable, axis: int = 1) -> Variable:
    return exp(log_softmax(x, axis=axis))


# ---------------------------------------------------------------------------
# backward pass and finite-difference verification
# ---------------------------------------------------------------------------

def _toposort(root: Variable) -> list[Variable]:
    order: list[Variable] = []
    seen: set[int] = set()
    stack: list[tuple[Variable, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._edges:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Variable) -> None:
    """Accumulate d(root)/d(v) into v.grad for every reachable Variable.

    The root must hold exactly one element. Propagation uses per-call
    buffers, so repeated calls add (never overwrite) gradients.
    """
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        return
    order = _toposort(root)
    buf: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = buf.get(id(node))
        if g is None:
            continue
        for parent, vjp in node._edges:
            contrib = vjp(g)
            acc = buf.get(id(parent))
            if acc is None:
                buf[id(parent)] = np.array(contrib, dtype=parent.data.dtype, copy=True)
            else:
                acc += contrib
    for node in order:
        g = buf.get(id(node))
        if g is None:
            continue
        if node._grad is None:
            node._grad = g if g.base is None else g.copy()
        else:
            node._grad = node._grad + g


def grad_check_directional(fn: Callable[[], Variable], params: Sequence[Variable],
                           h: float = 1e-3) -> float:
    """Per-tensor finite-difference check along each gradient's own direction.

    For every parameter tensor, compares ||g|| against the central difference
    of `fn` along d = g/||g||. Aggregating a whole tensor into one
    well-conditioned probe makes this robust to the relu-kink noise that
    contaminates coordinate-wise probes on deep centered networks. Returns
    the max relative error over tensors (tensors with ~zero gradient are
    skipped: there is nothing to verify against).
    """
    params = list(params)
    saved_grads = [p._grad for p in params]
    for p in params:
        p._grad = None
    out = fn()
    if out.data.size != 1:
        raise ValueError("grad_check_directional: function must produce a scalar")
    backward(out)
    grads = [np.asarray(p.grad, dtype=np.float64).copy() for p in params]
    for p, g in zip(params, saved_grads):
        p._grad = g

    worst = 0.0
    for p, g in zip(params, grads):
        norm = float(np.sqrt((g * g).sum()))
        if norm < 1e-12:
            continue
        d = (g / norm).astype(p.data.dtype)
        orig = p.data.copy()
        p.data += (h * d).astype(p.data.dtype)
        fp = fn().item()
        np.copyto(p.data, orig)
        p.data -= (h * d).astype(p.data.dtype)
        fm = fn().item()
        np.copyto(p.data, orig)
        num = (fp - fm) / (2.0 * h)
        err = abs(norm - num) / max(norm, abs(num), 1e-6)
        worst = max(worst, err)
    return worst


def grad_check(fn: Callable[[], Variable], params: Sequence[Variable],
               h: float = 1e-3, samples_per_param: int | None = None,
               rng=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn` must rebuild the same deterministic scalar from the current values
    of `params` on every call (no side effects). Parameter data and gradients
    are restored before returning. With `samples_per_param`, only that many
    randomly chosen coordinates per parameter are probed (requires `rng`).
    """
    params = list(params)
    saved_grads = [p._grad for p in params]
    for p in params:
        p._grad = None
    out = fn()
    if out.data.size != 1:
        raise ValueError("grad_check: function must produce a scalar")
    backward(out)
    analytic = [np.asarray(p.grad, dtype=np.float64).reshape(-1).copy() for p in params]
    for p, g in zip(params, saved_grads):
        p._grad = g

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        size = flat.size
        if samples_per_param is None or samples_per_param >= size:
            idxs = range(size)
        else:
            if rng is None:
                raise ValueError("grad_check: sampling coordinates requires an rng")
            idxs = sorted({rng.randint_below(size) for _ in range(samples_per_param)})
        for i in idxs:
            orig = flat[i].copy()
            flat[i] = orig + h
            step_up = float(flat[i]) - float(orig)
            fp = fn().item()
            flat[i] = orig - h
            step_dn = float(orig) - float(flat[i])
            fm = fn().item()
            flat[i] = orig
            num = (fp - fm) / (step_up + step_dn)
            err = abs(float(a[i]) - num) / max(abs(float(a[i])), abs(num), 1e-6)
            worst = max(worst, err)
    return worst
