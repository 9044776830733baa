# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels. Must agree with the numpy backend in _kernels_py."""

import numpy as np

from libc.math cimport cos, exp, log, rint, sin

BACKEND = "cython"


def block_mean(samples, int factor):
    """Non-overlapping block mean along the last axis."""
    arr = np.ascontiguousarray(samples, dtype=np.float64)
    # wraparound is off module-wide, so avoid negative tuple indices here.
    nd = arr.ndim
    lead = tuple(arr.shape[:nd - 1])
    flat = arr.reshape(-1, arr.shape[nd - 1])
    cdef double[:, ::1] x = flat
    cdef Py_ssize_t rows = x.shape[0]
    cdef Py_ssize_t n_out = x.shape[1] // factor
    out = np.empty((rows, n_out))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t r, j, k
    cdef double acc, inv = 1.0 / factor
    for r in range(rows):
        for j in range(n_out):
            acc = 0.0
            for k in range(factor):
                acc += x[r, j * factor + k]
            o[r, j] = acc * inv
    return out.reshape(lead + (n_out,))


def steered_power(spectra, delays, freqs, weights, channel_scale):
    """Steered response power over a grid of per-channel delays. See _kernels_py."""
    cdef double complex[:, ::1] X = np.ascontiguousarray(spectra, dtype=np.complex128)
    cdef double[:, ::1] tau = np.ascontiguousarray(np.atleast_2d(delays), dtype=np.float64)
    cdef double[::1] f = np.ascontiguousarray(freqs, dtype=np.float64)
    cdef double[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef double[::1] a = np.ascontiguousarray(channel_scale, dtype=np.float64)
    cdef Py_ssize_t T = tau.shape[0], M = X.shape[0], K = X.shape[1]
    out = np.empty(T)
    cdef double[::1] o = out
    cdef Py_ssize_t t, i, k
    cdef double two_pi = 6.283185307179586
    cdef double acc, re, im, ph, c, s, xr, xi
    for t in range(T):
        acc = 0.0
        for k in range(K):
            re = 0.0
            im = 0.0
            for i in range(M):
                ph = two_pi * f[k] * tau[t, i]
                c = cos(ph)
                s = sin(ph)
                xr = a[i] * X[i, k].real
                xi = a[i] * X[i, k].imag
                re += xr * c - xi * s
                im += xr * s + xi * c
            acc += w[k] * (re * re + im * im)
        o[t] = acc
    return out


def weighted_sq_distances(psd, means, stds):
    """Per-slot inverse-variance-weighted squared distance. See _kernels_py."""
    cdef double[::1] p = np.ascontiguousarray(psd, dtype=np.float64)
    cdef double[:, ::1] mu = np.ascontiguousarray(means, dtype=np.float64)
    cdef double[:, ::1] sd = np.ascontiguousarray(stds, dtype=np.float64)
    cdef Py_ssize_t S = mu.shape[0], K = mu.shape[1]
    out = np.empty(S)
    cdef double[::1] o = out
    cdef Py_ssize_t s, k
    cdef double acc, z
    for s in range(S):
        acc = 0.0
        for k in range(K):
            z = (p[k] - mu[s, k]) / sd[s, k]
            acc += z * z
        o[s] = acc
    return out


def logamp_quantize(x, double x_min, double alpha, int code_max, dither):
    """Forward log-amp map with code-domain dither, clamped. See _kernels_py."""
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] dv = np.ascontiguousarray(dither, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0]
    if dv.shape[0] != n:
        raise ValueError("dither length must match signal length")
    out = np.empty(n, dtype=np.uint16)
    cdef unsigned short[::1] o = out
    cdef Py_ssize_t i
    cdef double x_max = x_min * exp(alpha), scale = code_max / alpha
    cdef double v, code
    for i in range(n):
        v = xv[i]
        if v < x_min:
            v = x_min
        elif v > x_max:
            v = x_max
        code = rint(scale * log(v / x_min) + dv[i])
        if code < 0.0:
            code = 0.0
        elif code > code_max:
            code = code_max
        o[i] = <unsigned short> code
    return out
