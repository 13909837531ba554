# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled two-photon likelihood kernels (see ``_kernels_py`` for the reference).

Complex arithmetic is spelled out on real/imaginary parts; C99 complex
multiplication goes through a slow inf/nan-safe helper.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin

cnp.import_array()

cdef int PJ[10]
cdef int PK[10]
PJ[:] = [0, 0, 0, 0, 1, 1, 1, 2, 2, 3]
PK[:] = [0, 1, 2, 3, 1, 2, 3, 2, 3, 3]


cdef struct Device:
    double qr[16]
    double qi[16]
    double ar[4]
    double ai[4]
    double br[4]
    double bi[4]
    double eff[10]
    double visibility
    double amp_scale


cdef Device _load(qout, va, vb, double visibility, eff, bint same_mode) except *:
    cdef Device dev
    cdef int j, k
    q = np.ascontiguousarray(qout, dtype=np.complex128)
    a = np.ascontiguousarray(va, dtype=np.complex128)
    b = np.ascontiguousarray(vb, dtype=np.complex128)
    e = np.ascontiguousarray(eff, dtype=np.float64)
    for j in range(4):
        for k in range(4):
            dev.qr[4 * j + k] = q[j, k].real
            dev.qi[4 * j + k] = q[j, k].imag
        dev.ar[j] = a[j].real
        dev.ai[j] = a[j].imag
        dev.br[j] = b[j].real
        dev.bi[j] = b[j].imag
    for j in range(10):
        dev.eff[j] = e[j]
    dev.visibility = visibility
    # amplitude normalization for two photons entering the same mode
    dev.amp_scale = 0.5 if same_mode else 1.0
    return dev


cdef inline void _one(const Device* dev, double pa, double pb, double pd,
                      double* out) noexcept nogil:
    cdef double lr[4]
    cdef double li[4]
    cdef double xar[4]
    cdef double xai[4]
    cdef double xbr[4]
    cdef double xbi[4]
    cdef double uar[4]
    cdef double uai[4]
    cdef double ubr[4]
    cdef double ubi[4]
    cdef double a2[4]
    cdef double b2[4]
    cdef double re, im, pind, pdist, total = 0.0
    cdef double V = dev.visibility
    cdef int j, k, d
    lr[0] = cos(pd)
    li[0] = sin(pd)
    lr[1] = 1.0
    li[1] = 0.0
    lr[2] = cos(pb)
    li[2] = sin(pb)
    lr[3] = cos(pa)
    li[3] = sin(pa)
    for j in range(4):
        xar[j] = lr[j] * dev.ar[j] - li[j] * dev.ai[j]
        xai[j] = lr[j] * dev.ai[j] + li[j] * dev.ar[j]
        xbr[j] = lr[j] * dev.br[j] - li[j] * dev.bi[j]
        xbi[j] = lr[j] * dev.bi[j] + li[j] * dev.br[j]
    for j in range(4):
        uar[j] = 0.0
        uai[j] = 0.0
        ubr[j] = 0.0
        ubi[j] = 0.0
        for k in range(4):
            uar[j] += dev.qr[4 * j + k] * xar[k] - dev.qi[4 * j + k] * xai[k]
            uai[j] += dev.qr[4 * j + k] * xai[k] + dev.qi[4 * j + k] * xar[k]
            ubr[j] += dev.qr[4 * j + k] * xbr[k] - dev.qi[4 * j + k] * xbi[k]
            ubi[j] += dev.qr[4 * j + k] * xbi[k] + dev.qi[4 * j + k] * xbr[k]
        a2[j] = uar[j] * uar[j] + uai[j] * uai[j]
        b2[j] = ubr[j] * ubr[j] + ubi[j] * ubi[j]
    for d in range(10):
        j = PJ[d]
        k = PK[d]
        re = uar[j] * ubr[k] - uai[j] * ubi[k] + uar[k] * ubr[j] - uai[k] * ubi[j]
        im = uar[j] * ubi[k] + uai[j] * ubr[k] + uar[k] * ubi[j] + uai[k] * ubr[j]
        pind = (re * re + im * im) * dev.amp_scale
        if j == k:
            pind *= 0.5
            pdist = a2[j] * b2[j]
        else:
            pdist = a2[j] * b2[k] + a2[k] * b2[j]
        out[d] = dev.eff[d] * (V * pind + (1.0 - V) * pdist)
        total += out[d]
    total = 1.0 / total
    for d in range(10):
        out[d] *= total


def two_photon_probs(qout, va, vb, phases, shift, double visibility, eff, bint same_mode):
    cdef Device dev = _load(qout, va, vb, visibility, eff, same_mode)
    cdef const double[:, ::1] ph = np.ascontiguousarray(phases, dtype=np.float64)
    cdef const double[::1] sh = np.ascontiguousarray(shift, dtype=np.float64)
    cdef Py_ssize_t n = ph.shape[0], i
    cdef double s0 = sh[0], s1 = sh[1], s2 = sh[2]
    result = np.empty((n, 10), dtype=np.float64)
    cdef double[:, ::1] out = result
    with nogil:
        for i in range(n):
            _one(&dev, ph[i, 0] + s0, ph[i, 1] + s1, ph[i, 2] + s2, &out[i, 0])
    return result


def outcome_moments(qout, va, vb, phases, shift, weights, center,
                    double visibility, eff, bint same_mode):
    cdef Device dev = _load(qout, va, vb, visibility, eff, same_mode)
    cdef const double[:, ::1] ph = np.ascontiguousarray(phases, dtype=np.float64)
    cdef const double[::1] sh = np.ascontiguousarray(shift, dtype=np.float64)
    cdef const double[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef const double[::1] c = np.ascontiguousarray(center, dtype=np.float64)
    cdef Py_ssize_t n = ph.shape[0], i
    cdef int d
    cdef double buf[10]
    cdef double p[10]
    cdef double m[30]
    cdef double wl, x0, x1, x2
    cdef double s0 = sh[0], s1 = sh[1], s2 = sh[2]
    for d in range(10):
        p[d] = 0.0
    for d in range(30):
        m[d] = 0.0
    with nogil:
        for i in range(n):
            if w[i] == 0.0:
                continue
            _one(&dev, ph[i, 0] + s0, ph[i, 1] + s1, ph[i, 2] + s2, buf)
            x0 = ph[i, 0] - c[0]
            x1 = ph[i, 1] - c[1]
            x2 = ph[i, 2] - c[2]
            for d in range(10):
                wl = w[i] * buf[d]
                p[d] += wl
                m[3 * d] += wl * x0
                m[3 * d + 1] += wl * x1
                m[3 * d + 2] += wl * x2
    p_arr = np.empty(10, dtype=np.float64)
    s1_arr = np.empty((10, 3), dtype=np.float64)
    for d in range(10):
        p_arr[d] = p[d]
        s1_arr[d, 0] = m[3 * d]
        s1_arr[d, 1] = m[3 * d + 1]
        s1_arr[d, 2] = m[3 * d + 2]
    return p_arr, s1_arr
