"""Numpy implementation of the flow kernels, vectorised over rows."""

from __future__ import annotations

import numpy as np

_C = (0.0, 0.5, 0.5, 1.0)


def _stage(z, w1, b1, w2, b2):
    t = np.tanh(np.multiply.outer(z, w1) + b1)
    return b2 + t @ w2, t


def flow_forward(x, w1, b1, w2, b2, dt, substeps):
    xi = np.array(x, dtype=np.float64)
    h = dt / substeps
    for _ in range(substeps):
        k = [None] * 4
        for st in range(4):
            z = xi if st == 0 else xi + _C[st] * h * k[st - 1]
            k[st], _ = _stage(z, w1, b1, w2, b2)
        xi = xi + h / 6.0 * (k[0] + 2.0 * k[1] + 2.0 * k[2] + k[3])
    return xi


def flow_tangent(x, w1, b1, w2, b2, dt, substeps):
    xi = np.array(x, dtype=np.float64)
    dxi = np.ones_like(xi)
    h = dt / substeps
    slope = w2 * w1
    for _ in range(substeps):
        k, dk = [None] * 4, [None] * 4
        for st in range(4):
            if st == 0:
                z, dz = xi, dxi
            else:
                z = xi + _C[st] * h * k[st - 1]
                dz = dxi + _C[st] * h * dk[st - 1]
            k[st], t = _stage(z, w1, b1, w2, b2)
            dk[st] = ((1.0 - t * t) @ slope) * dz
        xi = xi + h / 6.0 * (k[0] + 2.0 * k[1] + 2.0 * k[2] + k[3])
        dxi = dxi + h / 6.0 * (dk[0] + 2.0 * dk[1] + 2.0 * dk[2] + dk[3])
    return xi, dxi


def flow_vjp(x, w1, b1, w2, b2, dt, substeps, gy):
    xi = np.array(x, dtype=np.float64)
    h = dt / substeps
    zs = []
    for _ in range(substeps):
        k = [None] * 4
        stages = []
        for st in range(4):
            z = xi if st == 0 else xi + _C[st] * h * k[st - 1]
            k[st], t = _stage(z, w1, b1, w2, b2)
            stages.append((z, t))
        zs.append(stages)
        xi = xi + h / 6.0 * (k[0] + 2.0 * k[1] + 2.0 * k[2] + k[3])
    g = np.array(gy, dtype=np.float64)
    gw1 = np.zeros_like(w1)
    gb1 = np.zeros_like(b1)
    gw2 = np.zeros_like(w2)
    gb2 = 0.0
    for stages in reversed(zs):
        kbar = [h / 6.0 * g, h / 3.0 * g, h / 3.0 * g, h / 6.0 * g]
        for st in range(3, -1, -1):
            z, t = stages[st]
            c = kbar[st]
            a = w2 * (1.0 - t * t)  # (n, H)
            gb2 += float(c.sum())
            gw2 += c @ t
            ca = c[:, None] * a
            gw1 += z @ ca
            gb1 += ca.sum(axis=0)
            zbar = c * (a @ w1)
            g = g + zbar
            if st > 0:
                kbar[st - 1] = kbar[st - 1] + _C[st] * h * zbar
    return g, gw1, gb1, gw2, gb2
