"""Shared test oracles: finite differences and brute-force references."""

import numpy as np

from convreg.autodiff import Tensor


def numeric_grad(f, x, step=1e-4):
    """Central finite-difference gradient of scalar f at float64 array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * step)
    return g


def check_grad(build_loss, x0, step=1e-4, rtol=1e-4, atol=1e-8):
    """Compare autodiff grad of build_loss(Tensor) against central differences.

    build_loss takes a float64 Tensor with requires_grad and returns a
    scalar Tensor. Returns the max relative error actually observed.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    t = Tensor(x0.copy(), requires_grad=True, dtype=np.float64)
    loss = build_loss(t)
    loss.backward()
    got = t.grad.copy()

    want = numeric_grad(lambda arr: float(build_loss(Tensor(arr, dtype=np.float64)).data), x0, step=step)
    scale = np.maximum(np.abs(want), np.maximum(np.abs(got), 1.0))
    err = np.abs(got - want) / scale
    assert np.all(err < rtol + atol), f"gradient mismatch: max rel err {err.max():.3e}"
    return float(err.max())


def conv3d_bruteforce(x, k, stride, pad):
    """Six-nested-loop strided cross-correlation reference."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    sd, sh, sw = stride
    pd, ph, pw = pad
    xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    co, ci, kd, kh, kw = k.shape
    D = (xp.shape[1] - kd) // sd + 1
    H = (xp.shape[2] - kh) // sh + 1
    W = (xp.shape[3] - kw) // sw + 1
    out = np.zeros((co, D, H, W))
    for o in range(co):
        for d in range(D):
            for h in range(H):
                for w in range(W):
                    acc = 0.0
                    for c in range(ci):
                        for i in range(kd):
                            for j in range(kh):
                                for l in range(kw):
                                    acc += k[o, c, i, j, l] * xp[c, d * sd + i, h * sh + j, w * sw + l]
                    out[o, d, h, w] = acc
    return out


def cubic_bspline(t):
    """Uniform cubic B-spline basis value, support (-2, 2)."""
    t = abs(float(t))
    if t < 1.0:
        return 2.0 / 3.0 - t * t + 0.5 * t**3
    if t < 2.0:
        return (2.0 - t) ** 3 / 6.0
    return 0.0
