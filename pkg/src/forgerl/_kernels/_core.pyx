# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``pure.py``.

Each function mirrors the numpy reference operation-for-operation; the
quantizer paths are bit-exact, the transcendental paths agree to float
rounding.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport NAN, exp, frexp, isnan, ldexp, log, nearbyint

cnp.import_array()

cdef double _E4M3_MAX = 448.0
cdef double _MIN_NORMAL = 0.015625        # 2**-6
cdef double _SUB_SCALE = 512.0            # 1 / 2**-9


def sample_row(const double[::1] row, double inv_temp, double u):
    cdef Py_ssize_t n = row.shape[0]
    cdef Py_ssize_t i
    cdef double m = row[0]
    for i in range(1, n):
        if row[i] > m:
            m = row[i]
    cdef double total = 0.0
    for i in range(n):
        total += exp((row[i] - m) * inv_temp)
    cdef double thr = u * total
    cdef double acc = 0.0
    for i in range(n):
        acc += exp((row[i] - m) * inv_temp)
        if acc > thr:
            return i
    return n - 1


def row_probs(const double[::1] row, double inv_temp):
    cdef Py_ssize_t n = row.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i
    cdef double m = row[0]
    for i in range(1, n):
        if row[i] > m:
            m = row[i]
    cdef double total = 0.0
    for i in range(n):
        ov[i] = exp((row[i] - m) * inv_temp)
        total += ov[i]
    for i in range(n):
        ov[i] /= total
    return out


def masked_logprob_sum(const double[:, ::1] theta, const cnp.int64_t[::1] states,
                       const cnp.int64_t[::1] actions, double inv_temp):
    cdef Py_ssize_t n = states.shape[0]
    cdef Py_ssize_t a_dim = theta.shape[1]
    cdef Py_ssize_t t, j
    cdef cnp.int64_t s
    cdef double m, acc, z, total = 0.0
    for t in range(n):
        s = states[t]
        m = theta[s, 0] * inv_temp
        for j in range(1, a_dim):
            z = theta[s, j] * inv_temp
            if z > m:
                m = z
        acc = 0.0
        for j in range(a_dim):
            acc += exp(theta[s, j] * inv_temp - m)
        total += theta[s, actions[t]] * inv_temp - m - log(acc)
    return total


def add_scaled_logprob_grad(const double[:, ::1] theta, const cnp.int64_t[::1] states,
                            const cnp.int64_t[::1] actions, double inv_temp,
                            double coeff, double[:, ::1] out):
    cdef Py_ssize_t n = states.shape[0]
    cdef Py_ssize_t a_dim = theta.shape[1]
    cdef Py_ssize_t t, j
    cdef cnp.int64_t s
    cdef double m, acc, z, c = coeff * inv_temp
    cdef cnp.ndarray[cnp.float64_t, ndim=1] scratch = np.empty(a_dim, dtype=np.float64)
    cdef double[::1] w = scratch
    for t in range(n):
        s = states[t]
        m = theta[s, 0] * inv_temp
        for j in range(1, a_dim):
            z = theta[s, j] * inv_temp
            if z > m:
                m = z
        acc = 0.0
        for j in range(a_dim):
            w[j] = exp(theta[s, j] * inv_temp - m)
            acc += w[j]
        for j in range(a_dim):
            out[s, j] -= c * (w[j] / acc)
        out[s, actions[t]] += c


cdef inline int _encode_mag(double v) noexcept:
    """Byte for a non-negative magnitude; mirrors the numpy reference."""
    cdef int e2, e, m
    cdef double q, mm
    if isnan(v) or v == 0.0:
        return 0
    if v >= _E4M3_MAX:
        return 0x7E
    if v < _MIN_NORMAL:
        mm = nearbyint(v * _SUB_SCALE)
        return <int> mm
    frexp(v, &e2)
    e = e2 - 1
    q = ldexp(1.0, e - 3)
    mm = nearbyint(v / q)
    m = <int> mm
    if m == 16:
        e += 1
        m = 8
    if e > 8 or (e == 8 and m > 14):
        return 0x7E
    return ((e + 7) << 3) | (m - 8)


def e4m3_encode(const double[::1] scaled):
    cdef Py_ssize_t n = scaled.shape[0]
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] out = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] ov = out
    cdef Py_ssize_t i
    cdef int b
    for i in range(n):
        b = _encode_mag(-scaled[i] if scaled[i] < 0.0 else scaled[i])
        if b != 0 and scaled[i] < 0.0:
            b |= 0x80
        ov[i] = <cnp.uint8_t> b
    return out


cdef double[256] _DECODE


cdef void _fill_decode() noexcept:
    cdef int byte, e_field, m_field
    cdef double sign, mag
    for byte in range(256):
        sign = -1.0 if byte & 0x80 else 1.0
        e_field = (byte >> 3) & 0x0F
        m_field = byte & 0x07
        if e_field == 0:
            mag = m_field * ldexp(1.0, -9)
        elif e_field == 15 and m_field == 7:
            mag = NAN
        else:
            mag = (8 + m_field) * ldexp(1.0, e_field - 10)
        _DECODE[byte] = sign * mag


_fill_decode()


def e4m3_decode(const cnp.uint8_t[::1] codes):
    cdef Py_ssize_t n = codes.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i
    for i in range(n):
        ov[i] = _DECODE[codes[i]]
    return out


def e4m3_encode_blocks(const double[::1] x, const double[::1] scales, Py_ssize_t block_size):
    cdef Py_ssize_t n = x.shape[0]
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] out = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] ov = out
    cdef Py_ssize_t i
    cdef double s, v
    cdef int b
    for i in range(n):
        s = scales[i // block_size]
        v = x[i] / s if s > 0.0 else 0.0
        b = _encode_mag(-v if v < 0.0 else v)
        if b != 0 and v < 0.0:
            b |= 0x80
        ov[i] = <cnp.uint8_t> b
    return out


def e4m3_decode_blocks(const cnp.uint8_t[::1] codes, const double[::1] scales, Py_ssize_t block_size):
    cdef Py_ssize_t n = codes.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i
    for i in range(n):
        ov[i] = _DECODE[codes[i]] * scales[i // block_size]
    return out
