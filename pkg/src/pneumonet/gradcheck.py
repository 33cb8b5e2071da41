"""Central finite-difference verification of analytic gradients.

All checks run in float64; the probe perturbs one coordinate at a time and
rebuilds the forward graph, so op closures are exercised exactly as in
training. Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
"""

from __future__ import annotations

import numpy as np

from .errors import AutodiffError
from .tensor import Tensor


def _scalar_eval(f, x: Tensor) -> float:
    out = f(x)
    if out.data.size != 1:
        raise AutodiffError(
            f"grad_check target must return a scalar, got shape {out.shape}")
    return float(out.data)


def smoothness_margin(loss: Tensor) -> float:
    """Distance from a forward graph to its nearest relu or maxpool kink.

    Walks the graph below `loss` and returns the smallest of: any relu
    input magnitude, and any live 2x2 pool window's gap between its two
    largest entries. Windows whose maximum is exactly zero sit on a dead
    plateau already guarded by the relu margin, so they are skipped.

    Central differences are only trustworthy when eps times the local
    sensitivity stays below this margin; callers should redraw inputs or
    parameters when it is too small instead of loosening tolerances.
    """
    margin = np.inf
    stack = [loss]
    seen = set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._op == "relu":
            margin = min(margin, float(np.abs(t._parents[0].data).min()))
        elif t._op == "maxpool2d":
            x = t._parents[0].data
            n, c, h, w = x.shape
            win = (x.reshape(n, c, h // 2, 2, w // 2, 2)
                   .transpose(0, 1, 2, 4, 3, 5)
                   .reshape(n, c, h // 2, w // 2, 4))
            srt = np.sort(win, axis=-1)
            top, second = srt[..., 3], srt[..., 2]
            live = top > 0
            if np.any(live):
                margin = min(margin, float((top[live] - second[live]).min()))
        stack.extend(t._parents)
    return margin


def activation_signature(loss: Tensor) -> tuple:
    """Discrete switching state of every relu and maxpool under `loss`.

    Returns, in deterministic traversal order, the count of positive relu
    inputs per relu node and the argmax-index sum per pool node. Two forward
    passes with the same signature took identical kink branches, so a central
    difference between them measures a genuine derivative; a signature change
    means the probe stepped across a kink and the quotient is meaningless.
    """
    sig = []
    stack = [loss]
    seen = set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._op == "relu":
            sig.append(int(np.count_nonzero(t._parents[0].data > 0)))
        elif t._op == "maxpool2d":
            x = t._parents[0].data
            n, c, h, w = x.shape
            win = (x.reshape(n, c, h // 2, 2, w // 2, 2)
                   .transpose(0, 1, 2, 4, 3, 5)
                   .reshape(n, c, h // 2, w // 2, 4))
            sig.append(int(win.argmax(axis=-1).sum()))
        stack.extend(t._parents)
    return tuple(sig)


def batchnorm_batch_variances(loss: Tensor) -> list[np.ndarray]:
    """Per-channel input variances of every batchnorm node under `loss`.

    Channels whose variance is exactly zero are constant across the batch
    (dead paths) and normalize to a constant, which is harmless; small but
    nonzero variances make the normalization steep and ill-conditioned for
    finite differences."""
    out = []
    stack = [loss]
    seen = set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._op == "batchnorm2d":
            out.append(t._parents[0].data.var(axis=(0, 2, 3)))
        stack.extend(t._parents)
    return out


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and numeric df/dx over all
    coordinates of x. f must map x to a scalar Tensor; x must be float64."""
    if x.data.dtype != np.float64:
        raise AutodiffError("grad_check requires a float64 input tensor")
    if not x.requires_grad:
        raise AutodiffError("grad_check input must require grad")

    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise AutodiffError(
            f"grad_check target must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).ravel().copy()
    x.grad = None

    flat = x.data.ravel()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = _scalar_eval(f, x)
        flat[i] = orig - eps
        fm = _scalar_eval(f, x)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst


def grad_check_params(run, params, rng: np.random.Generator,
                      eps: float = 1e-5, coords_per_tensor: int = 4,
                      min_grad: float = 0.0) -> float:
    """Spot-check model parameters against finite differences.

    `run()` rebuilds the forward pass from current parameter values and
    returns a scalar loss. Every parameter tensor gets `coords_per_tensor`
    randomly sampled coordinates (or all of them if smaller). Parameters must
    be float64 and require grad. Returns the max relative error seen.

    Coordinates whose analytic gradient magnitude falls below `min_grad` are
    skipped: the difference quotient carries roundoff noise of roughly
    ulp(loss)/(2*eps), so gradients under that floor cannot be measured,
    only drowned. Biases that feed a batchnorm are the extreme case: the
    normalization is invariant to them, their true gradient is identically
    zero, and the analytic value is pure cancellation residue.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise AutodiffError("grad_check_params requires float64 parameters")
        p.grad = None

    loss = run()
    if loss.data.size != 1:
        raise AutodiffError("grad_check_params loss must be scalar")
    loss.backward()
    analytic = [None if p.grad is None else p.grad.ravel().copy() for p in params]
    for p in params:
        p.grad = None

    worst = 0.0
    for p, a in zip(params, analytic):
        if not p.requires_grad:
            continue
        flat = p.data.ravel()
        k = min(coords_per_tensor, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        for i in coords:
            av = 0.0 if a is None else a[i]
            if abs(av) < min_grad:
                continue
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(run().data)
            flat[i] = orig - eps
            fm = float(run().data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            rel = abs(av - numeric) / max(abs(av), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
