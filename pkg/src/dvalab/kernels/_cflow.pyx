# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, language_level=3
"""RK4 flow of a scalar state through a one-hidden-layer tanh field.

The field is ``f(z) = b2 + sum_j w2[j] tanh(w1[j] z + b1[j])``.  Each row of
``x`` is integrated independently over ``dt`` in ``substeps`` RK4 steps.
The inner loops run over raw pointers so gcc can vectorise ``tanh``.
"""

from libc.math cimport tanh
from libc.stdlib cimport malloc, free
import numpy as np

cdef double C[4]
C[0] = 0.0
C[1] = 0.5
C[2] = 0.5
C[3] = 1.0


cdef inline double _value(double z, const double *w1, const double *b1, const double *w2,
                          double b2, Py_ssize_t H) noexcept nogil:
    cdef double acc = b2
    cdef Py_ssize_t j
    for j in range(H):
        acc += w2[j] * tanh(w1[j] * z + b1[j])
    return acc


cdef inline double _value_slope(double z, const double *w1, const double *b1, const double *w2,
                                double b2, Py_ssize_t H, double *slope) noexcept nogil:
    cdef double acc = b2, dacc = 0.0, t
    cdef Py_ssize_t j
    for j in range(H):
        t = tanh(w1[j] * z + b1[j])
        acc += w2[j] * t
        dacc += w2[j] * w1[j] * (1.0 - t * t)
    slope[0] = dacc
    return acc


def flow_forward(const double[::1] x, const double[::1] w1, const double[::1] b1,
                 const double[::1] w2, double b2, double dt, int substeps):
    cdef Py_ssize_t n = x.shape[0], H = w1.shape[0], i, s, st
    cdef double h = dt / substeps, xi, z
    cdef double k[4]
    cdef const double *pw1 = &w1[0]
    cdef const double *pb1 = &b1[0]
    cdef const double *pw2 = &w2[0]
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            xi = x[i]
            for s in range(substeps):
                for st in range(4):
                    z = xi if st == 0 else xi + C[st] * h * k[st - 1]
                    k[st] = _value(z, pw1, pb1, pw2, b2, H)
                xi = xi + h / 6.0 * (k[0] + 2.0 * k[1] + 2.0 * k[2] + k[3])
            o[i] = xi
    return out


def flow_tangent(const double[::1] x, const double[::1] w1, const double[::1] b1,
                 const double[::1] w2, double b2, double dt, int substeps):
    """Flow value and its derivative with respect to the start state."""
    cdef Py_ssize_t n = x.shape[0], H = w1.shape[0], i, s, st
    cdef double h = dt / substeps, xi, dxi, z, dz, slope
    cdef double k[4]
    cdef double dk[4]
    cdef const double *pw1 = &w1[0]
    cdef const double *pb1 = &b1[0]
    cdef const double *pw2 = &w2[0]
    out = np.empty(n)
    der = np.empty(n)
    cdef double[::1] o = out, d = der
    with nogil:
        for i in range(n):
            xi = x[i]
            dxi = 1.0
            for s in range(substeps):
                for st in range(4):
                    if st == 0:
                        z = xi
                        dz = dxi
                    else:
                        z = xi + C[st] * h * k[st - 1]
                        dz = dxi + C[st] * h * dk[st - 1]
                    k[st] = _value_slope(z, pw1, pb1, pw2, b2, H, &slope)
                    dk[st] = slope * dz
                xi = xi + h / 6.0 * (k[0] + 2.0 * k[1] + 2.0 * k[2] + k[3])
                dxi = dxi + h / 6.0 * (dk[0] + 2.0 * dk[1] + 2.0 * dk[2] + dk[3])
            o[i] = xi
            d[i] = dxi
    return out, der


cdef inline double _pullback(double z, double c, const double *w1, const double *b1, const double *w2,
                             Py_ssize_t H, double *t, double *gw1, double *gb1, double *gw2) noexcept nogil:
    # accumulates parameter cotangents of c * f(z) and returns c * f'(z)
    cdef Py_ssize_t j
    cdef double fp = 0.0, a
    for j in range(H):
        t[j] = tanh(w1[j] * z + b1[j])
    for j in range(H):
        a = w2[j] * (1.0 - t[j] * t[j])
        fp += a * w1[j]
        gw2[j] += c * t[j]
        gw1[j] += c * a * z
        gb1[j] += c * a
    return c * fp


def flow_vjp(const double[::1] x, const double[::1] w1, const double[::1] b1,
             const double[::1] w2, double b2, double dt, int substeps, const double[::1] gy):
    """Pull ``gy`` back to the start states and the field parameters.

    Returns ``(gx, gw1, gb1, gw2, gb2)``; stage states are recomputed per row.
    """
    cdef Py_ssize_t n = x.shape[0], H = w1.shape[0], i, s, st
    cdef double h = dt / substeps, xi, z, g, c, zbar, gb2 = 0.0
    cdef double k[4]
    cdef double kbar[4]
    cdef const double *pw1 = &w1[0]
    cdef const double *pb1 = &b1[0]
    cdef const double *pw2 = &w2[0]
    cdef double *zs = <double *> malloc(4 * substeps * sizeof(double))
    cdef double *t = <double *> malloc(H * sizeof(double))
    gx = np.empty(n)
    gw1 = np.zeros(H)
    gb1 = np.zeros(H)
    gw2 = np.zeros(H)
    cdef double[::1] ogx = gx, ow1 = gw1, ob1 = gb1, ow2 = gw2
    if zs == NULL or t == NULL:
        free(zs)
        free(t)
        raise MemoryError()
    try:
        with nogil:
            for i in range(n):
                xi = x[i]
                for s in range(substeps):
                    for st in range(4):
                        z = xi if st == 0 else xi + C[st] * h * k[st - 1]
                        zs[4 * s + st] = z
                        k[st] = _value(z, pw1, pb1, pw2, b2, H)
                    xi = xi + h / 6.0 * (k[0] + 2.0 * k[1] + 2.0 * k[2] + k[3])
                g = gy[i]
                for s in range(substeps - 1, -1, -1):
                    kbar[0] = h / 6.0 * g
                    kbar[1] = h / 3.0 * g
                    kbar[2] = h / 3.0 * g
                    kbar[3] = h / 6.0 * g
                    for st in range(3, -1, -1):
                        c = kbar[st]
                        gb2 += c
                        zbar = _pullback(zs[4 * s + st], c, pw1, pb1, pw2, H, t, &ow1[0], &ob1[0], &ow2[0])
                        g = g + zbar
                        if st > 0:
                            kbar[st - 1] = kbar[st - 1] + C[st] * h * zbar
                ogx[i] = g
    finally:
        free(zs)
        free(t)
    return gx, gw1, gb1, gw2, gb2
