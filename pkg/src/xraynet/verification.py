"""Finite-difference verification suites for ops, losses, and architectures.

Analytic gradients are compared against central differences. float32 runs
use h = 1e-3 against a 1e-2 relative-error threshold; float64 verification
mode uses h = 1e-5 against 1e-5.

Conditioning matters more than randomness here: probe inputs keep relu/max
arguments away from their kinks, and per-op probes use positive projections
so no gradient coordinate cancels to the FD noise floor. Full-architecture
checks probe each parameter tensor along its own gradient direction
(`grad_check_directional`), which stays well-conditioned on deep
batch-norm-centered networks, plus coordinate-wise probes of the head
(the head-to-loss path crosses no kink).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Variable, grad_check, grad_check_directional
from .dataset import one_hot
from .losses import FocalParams, cross_entropy, focal_loss
from .nn import build_model, mini_densenet, mini_resnet
from .rng import Pcg32, derive_stream

F32_H, F32_THRESHOLD = 1e-3, 1e-2
F64_H, F64_THRESHOLD = 1e-5, 1e-5


def settings(f64: bool) -> tuple[np.dtype, float, float]:
    if f64:
        return np.dtype(np.float64), F64_H, F64_THRESHOLD
    return np.dtype(np.float32), F32_H, F32_THRESHOLD


def _signed_away_from_zero(rng: Pcg32, shape, dtype, margin: float = 0.2) -> np.ndarray:
    """Uniform magnitudes in [margin, 1] with random signs: no relu kinks nearby."""
    mag = rng.uniform_array(shape, margin, 1.0)
    signs = np.where(rng.uniform_array(shape) < 0.5, -1.0, 1.0)
    return (mag * signs).astype(dtype)


def _positive(rng: Pcg32, shape, dtype, lo: float = 0.3, hi: float = 1.2) -> np.ndarray:
    return rng.uniform_array(shape, lo, hi).astype(dtype)


def check_ops(f64: bool = False, seed: int = 7) -> dict[str, float]:
    """Max FD relative error for every differentiable op, keyed by op name."""
    dtype, h, _ = settings(f64)
    rng = derive_stream(seed, "gradcheck.ops")
    errors: dict[str, float] = {}

    def check(name: str, fn, params):
        errors[name] = grad_check(fn, params, h=h)

    # positive input/kernel/projection keep every gradient coordinate well
    # above the f32 FD noise floor
    x = Variable(_positive(rng, (1, 2, 5, 5), dtype), requires_grad=True)
    k = Variable(_positive(rng, (2, 2, 3, 3), dtype), requires_grad=True)
    b = Variable(_positive(rng, (2,), dtype), requires_grad=True)
    proj = _positive(rng, (1, 2, 3, 3), dtype)
    check("conv2d", lambda: ad.sum_axes(ad.bmul(
        ad.conv2d(x, k, b, stride=2, padding=1), ad.constant(proj))), [x, k, b])

    # modest spread plus positive projection keeps the centered bn gradients
    # clear of the noise floor
    xb = Variable(rng.uniform_array((2, 2, 3, 3), -0.4, 0.4).astype(dtype), requires_grad=True)
    gamma = Variable(_positive(rng, (2,), dtype, 0.8, 1.2), requires_grad=True)
    beta = Variable(rng.uniform_array((2,), -0.1, 0.1).astype(dtype), requires_grad=True)
    rm, rv = np.zeros(2, dtype=dtype), np.ones(2, dtype=dtype)
    pbn = _positive(rng, (2, 2, 3, 3), dtype)
    check("batch_norm", lambda: ad.sum_axes(ad.bmul(
        ad.batch_norm(xb, gamma, beta, rm, rv, train=True, update_running=False),
        ad.constant(pbn))), [xb, gamma, beta])

    xr = Variable(_signed_away_from_zero(rng, (3, 5), dtype), requires_grad=True)
    pr = _positive(rng, (3, 5), dtype)
    check("relu", lambda: ad.sum_axes(ad.bmul(ad.relu(xr), ad.constant(pr))), [xr])

    # well-separated values keep the argmax stable under +-h probes
    vals = np.arange(2 * 2 * 4 * 4, dtype=np.float64)
    order = list(range(vals.size))
    rng.shuffle(order)
    xm = Variable((vals[order].reshape(2, 2, 4, 4) * 0.1).astype(dtype), requires_grad=True)
    pm = _positive(rng, (2, 2, 2, 2), dtype)
    check("max_pool2d", lambda: ad.sum_axes(ad.bmul(
        ad.max_pool2d(xm, 2), ad.constant(pm))), [xm])

    xa = Variable(rng.uniform_array((2, 2, 4, 4), -1.0, 1.0).astype(dtype), requires_grad=True)
    pa = _positive(rng, (2, 2, 2, 2), dtype)
    check("avg_pool2d", lambda: ad.sum_axes(ad.bmul(
        ad.avg_pool2d(xa, 2), ad.constant(pa))), [xa])

    xg = Variable(rng.uniform_array((2, 3, 4, 4), -1.0, 1.0).astype(dtype), requires_grad=True)
    pg = _positive(rng, (2, 3), dtype)
    check("global_avg_pool", lambda: ad.sum_axes(ad.bmul(
        ad.global_avg_pool(xg), ad.constant(pg))), [xg])

    xl = Variable(_positive(rng, (2, 4), dtype), requires_grad=True)
    wl = Variable(_positive(rng, (3, 4), dtype), requires_grad=True)
    bl = Variable(_positive(rng, (3,), dtype), requires_grad=True)
    pl = _positive(rng, (2, 3), dtype)
    check("linear", lambda: ad.sum_axes(ad.bmul(
        ad.linear(xl, wl, bl), ad.constant(pl))), [xl, wl, bl])

    a1 = Variable(rng.uniform_array((2, 2, 3, 3), -1.0, 1.0).astype(dtype), requires_grad=True)
    a2 = Variable(rng.uniform_array((2, 2, 3, 3), -1.0, 1.0).astype(dtype), requires_grad=True)
    pd = _positive(rng, (2, 2, 3, 3), dtype)
    check("add", lambda: ad.sum_axes(ad.bmul(ad.add(a1, a2), ad.constant(pd))), [a1, a2])

    c1 = Variable(rng.uniform_array((2, 2, 3, 3), -1.0, 1.0).astype(dtype), requires_grad=True)
    c2 = Variable(rng.uniform_array((2, 3, 3, 3), -1.0, 1.0).astype(dtype), requires_grad=True)
    pc = _positive(rng, (2, 5, 3, 3), dtype)
    check("concat_channels", lambda: ad.sum_axes(ad.bmul(
        ad.concat_channels([c1, c2]), ad.constant(pc))), [c1, c2])

    # moderate logits bound the softmax probabilities away from 0
    xs = Variable(rng.uniform_array((2, 3), -1.0, 1.0).astype(dtype), requires_grad=True)
    ps = _positive(rng, (2, 3), dtype)
    check("softmax", lambda: ad.sum_axes(ad.bmul(ad.softmax(xs), ad.constant(ps))), [xs])
    check("log_softmax", lambda: ad.sum_axes(ad.bmul(ad.log_softmax(xs), ad.constant(ps))), [xs])
    return errors


def check_losses(f64: bool = False, seed: int = 11) -> dict[str, float]:
    dtype, h, _ = settings(f64)
    rng = derive_stream(seed, "gradcheck.losses")
    errors: dict[str, float] = {}
    n, c = 3, 4
    logits = Variable(rng.uniform_array((n, c), -1.0, 1.0).astype(dtype), requires_grad=True)
    labels = np.array([rng.randint_below(c) for _ in range(n)])
    targets = one_hot(labels, c).astype(np.float64)
    weights = rng.uniform_array((c,), 0.5, 2.0)

    errors["cross_entropy"] = grad_check(lambda: cross_entropy(logits, targets), [logits], h=h)
    errors["cross_entropy_weighted"] = grad_check(
        lambda: cross_entropy(logits, targets, class_weights=weights), [logits], h=h)
    errors["focal_loss"] = grad_check(
        lambda: focal_loss(logits, targets, FocalParams(alpha=0.25, gamma=2.0)), [logits], h=h)
    errors["focal_loss_gamma0"] = grad_check(
        lambda: focal_loss(logits, targets, FocalParams(alpha=1.0, gamma=0.0)), [logits], h=h)

    # through a linear layer: weights, bias, and input together
    xw = Variable(_positive(rng, (2, 5), dtype), requires_grad=True)
    ww = Variable(rng.uniform_array((c, 5), -0.5, 0.5).astype(dtype), requires_grad=True)
    bw = Variable(rng.uniform_array((c,), -0.2, 0.2).astype(dtype), requires_grad=True)
    t2 = one_hot(np.array([rng.randint_below(c) for _ in range(2)]), c).astype(np.float64)
    errors["focal_through_linear"] = grad_check(
        lambda: focal_loss(ad.linear(xw, ww, bw), t2, FocalParams()), [xw, ww, bw], h=h)
    return errors


def check_architecture(family: str, f64: bool = False, seed: int = 13) -> float:
    """End-to-end FD check of a Mini backbone + focal loss on a 2-image batch.

    Every parameter tensor is probed along its own gradient direction; the
    head is additionally probed coordinate-wise (its path to the loss is
    kink-free). A probe that lands across one of the network's dense relu
    kinks is retried at a smaller step (a real gradient bug persists at
    every step size, kink contamination shrinks linearly), taking the best
    of three step sizes. Returns the max relative error over all probes.
    """
    dtype, h, threshold = settings(f64)
    builder = mini_resnet if family == "resnet" else mini_densenet
    model = build_model(builder(num_classes=4, input_size=16),
                        derive_stream(seed, f"gradcheck.{family}"), dtype=dtype)
    rng = derive_stream(seed, f"gradcheck.{family}.data")
    x = rng.uniform_array((2, 1, 16, 16), 0.0, 1.0).astype(dtype)
    targets = one_hot(np.array([rng.randint_below(4) for _ in range(2)]), 4)

    def f() -> Variable:
        logits = model.forward(x, train=True, update_stats=False)
        return focal_loss(logits, targets, FocalParams(alpha=0.25, gamma=2.0))

    worst = 0.0
    for name, p in model.trainable_params().items():
        err = np.inf
        for hk in (h, h / 8, h / 64):
            err = min(err, grad_check_directional(f, [p], h=hk))
            if err < threshold / 2:
                break
        worst = max(worst, err)
    for name in ("head.weight", "head.bias"):
        worst = max(worst, _coordinate_check_top(f, model.store.params[name], h, k=6))
    return worst


def _coordinate_check_top(f, p: Variable, h: float, k: int) -> float:
    """Coordinate-wise FD on the k largest-gradient coordinates of one tensor.

    Largest coordinates carry the verifiable signal; tiny ones sit at the
    FD noise floor and measure conditioning, not correctness.
    """
    saved = p._grad
    p._grad = None
    out = f()
    ad.backward(out)
    g = np.asarray(p.grad, dtype=np.float64).reshape(-1).copy()
    p._grad = saved
    flat = p.data.reshape(-1)
    worst = 0.0
    for i in np.argsort(-np.abs(g))[:k]:
        orig = flat[i].copy()
        flat[i] = orig + h
        up = float(flat[i]) - float(orig)
        fp = f().item()
        flat[i] = orig - h
        dn = float(orig) - float(flat[i])
        fm = f().item()
        flat[i] = orig
        num = (fp - fm) / (up + dn)
        worst = max(worst, abs(g[i] - num) / max(abs(g[i]), abs(num), 1e-6))
    return worst


def run_scope(scope: str, f64: bool = False) -> dict[str, float]:
    """Per-item max relative errors for a named scope."""
    out: dict[str, float] = {}
    if scope in ("ops", "all"):
        out.update(check_ops(f64=f64))
    if scope in ("losses", "all"):
        out.update(check_losses(f64=f64))
    if scope in ("resnet", "all"):
        out["mini_resnet"] = check_architecture("resnet", f64=f64)
    if scope in ("densenet", "all"):
        out["mini_densenet"] = check_architecture("densenet", f64=f64)
    if not out:
        raise ValueError(f"unknown gradcheck scope {scope!r} "
                         "(expected ops, losses, resnet, densenet, or all)")
    return out
