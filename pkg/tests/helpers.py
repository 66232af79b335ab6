"""Shared test utilities: finite-difference gradient checking and the
independent scalar oracles the DERIVED expectations are computed with."""

from __future__ import annotations

import math

import numpy as np

from lbmtrack import tensor as T


def fd_grad(fn, tensors, h=1e-5):
    """Central finite differences of a scalar-valued fn w.r.t. each tensor.

    `fn` must rebuild its graph from the tensors' current .data on every call
    and run without recording (values only). Tensors should be float64.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn()
            flat[i] = orig - h
            fm = fn()
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def check_gradients(build, tensors, rtol=1e-4, atol=1e-7, h=1e-5):
    """Compare analytic grads of build() (a scalar Tensor) against FD.

    `build` constructs the graph from the current .data of `tensors`.
    Returns the worst relative error seen (for reporting).
    """
    for t in tensors:
        t.grad = None
        assert t.data.dtype == np.float64, "gradient checks run in 64-bit mode"
    with T.Tape() as tape:
        loss = build()
        T.backward(loss, tape)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]

    def value():
        with T.no_grad():
            return build().item()

    numeric = fd_grad(value, tensors, h=h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(a), np.abs(n))
        err = np.abs(a - n)
        rel = err / np.maximum(denom, 1e-30)
        bad = (err > atol) & (rel > rtol)
        worst = max(worst, float(rel[err > atol].max()) if np.any(err > atol) else 0.0)
        assert not np.any(bad), (
            f"gradient mismatch: max rel {rel.max():.3e}, max abs {err.max():.3e}")
    return worst


# ---------------------------------------------------------------------------
# independent scalar oracles


def gelu_scalar(x: float) -> float:
    u = math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)
    return 0.5 * x * (1.0 + math.tanh(u))


def softmax_scalar(values):
    m = max(values)
    exps = [math.exp(v - m) for v in values]
    s = sum(exps)
    return [e / s for e in exps]


def bilinear_scalar(featmap: np.ndarray, x: float, y: float) -> np.ndarray:
    """Brute-force interpolation of a (C, H, W) array at one clamped point."""
    C, H, W = featmap.shape
    x = min(max(x, 0.0), W - 1.0)
    y = min(max(y, 0.0), H - 1.0)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    tx, ty = x - x0, y - y0
    out = np.zeros(C)
    for c in range(C):
        top = featmap[c, y0, x0] * (1 - tx) + featmap[c, y0, x1] * tx
        bot = featmap[c, y1, x0] * (1 - tx) + featmap[c, y1, x1] * tx
        out[c] = top * (1 - ty) + bot * ty
    return out


def correlation_scalar(f: np.ndarray, o: np.ndarray) -> np.ndarray:
    """Triple-loop dot products: f (N, d), o (d, H, W) -> (N, H, W)/sqrt(d)."""
    n, d = f.shape
    _, H, W = o.shape
    c = np.zeros((n, H, W))
    for i in range(n):
        for yy in range(H):
            for xx in range(W):
                acc = 0.0
                for k in range(d):
                    acc += float(f[i, k]) * float(o[k, yy, xx])
                c[i, yy, xx] = acc / math.sqrt(d)
    return c
