"""Numpy fallback implementations of the hot numeric kernels.

Semantics here are the reference: the compiled backend in ``_core.pyx``
mirrors these functions operation-for-operation so that results agree to
float rounding (and bit-exactly for the integer-valued quantizer).
"""

from __future__ import annotations

import numpy as np

_E4M3_MAX = 448.0
_MIN_NORMAL = 2.0 ** -6  # smallest normal magnitude on the grid
_SUB_QUANTUM = 2.0 ** -9  # subnormal step

# ── sampling / log-prob / gradient ───────────────────────────────────────


def sample_row(row: np.ndarray, inv_temp: float, u: float) -> int:
    """Draw an action index from softmax(row * inv_temp) using uniform u."""
    z = (row - row.max()) * inv_temp
    w = np.exp(z)
    c = np.cumsum(w)
    thr = u * c[-1]
    idx = int(np.searchsorted(c, thr, side="right"))
    if idx >= row.shape[0]:
        idx = row.shape[0] - 1
    return idx


def row_probs(row: np.ndarray, inv_temp: float) -> np.ndarray:
    z = (row - row.max()) * inv_temp
    w = np.exp(z)
    return w / np.sum(w)


def masked_logprob_sum(
    theta: np.ndarray, states: np.ndarray, actions: np.ndarray, inv_temp: float
) -> float:
    """Sum of log softmax(theta[s] * inv_temp)[a] over the given pairs."""
    if states.shape[0] == 0:
        return 0.0
    z = theta[states] * inv_temp
    m = z.max(axis=1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    chosen = z[np.arange(states.shape[0]), actions]
    return float(np.sum(chosen - lse))


def add_scaled_logprob_grad(
    theta: np.ndarray,
    states: np.ndarray,
    actions: np.ndarray,
    inv_temp: float,
    coeff: float,
    out: np.ndarray,
) -> None:
    """out[s] += coeff * d/d theta[s] log softmax(theta[s]*inv_temp)[a], per pair.

    The per-row derivative is inv_temp * (onehot(a) - softmax(theta[s]*inv_temp)).
    """
    n = states.shape[0]
    if n == 0:
        return
    z = theta[states] * inv_temp
    z -= z.max(axis=1)[:, None]
    w = np.exp(z)
    p = w / w.sum(axis=1)[:, None]
    g = p * (-coeff * inv_temp)
    g[np.arange(n), actions] += coeff * inv_temp
    np.add.at(out, states, g)


# ── 8-bit block quantization (E4M3-style grid) ──────────────────────────


def _decode_table() -> np.ndarray:
    vals = np.empty(256, dtype=np.float64)
    for byte in range(256):
        sign = -1.0 if byte & 0x80 else 1.0
        e_field = (byte >> 3) & 0x0F
        m_field = byte & 0x07
        if e_field == 0:
            mag = m_field * _SUB_QUANTUM
        elif e_field == 15 and m_field == 7:
            mag = np.nan  # reserved slot; never produced by the encoder
        else:
            mag = (8 + m_field) * 2.0 ** (e_field - 10)
        vals[byte] = sign * mag
    return vals


_DECODE = _decode_table()


def e4m3_encode(scaled: np.ndarray) -> np.ndarray:
    """Round finite values (already divided by the block scale) to the grid.

    Returns one byte per element: sign(1) | exponent(4) | mantissa(3), with
    magnitudes clamped to 448.  Zero encodes to byte 0; NaN is treated as 0.
    """
    v = np.abs(scaled)
    n = v.shape[0]
    out = np.zeros(n, dtype=np.uint8)

    nan = np.isnan(v)
    big = (v >= _E4M3_MAX) & ~nan
    sub = (v < _MIN_NORMAL) & ~nan
    normal = ~(big | sub | nan)

    out[big] = 0x7E  # 448

    if sub.any():
        m = np.rint(v[sub] * 512.0)  # 0..8; 8 lands on the min-normal byte
        out[sub] = m.astype(np.uint8)

    if normal.any():
        vn = v[normal]
        _, e2 = np.frexp(vn)
        e = e2 - 1  # floor(log2 v), in [-6, 8]
        q = np.ldexp(1.0, e - 3)
        m = np.rint(vn / q)
        carry = m == 16
        e = np.where(carry, e + 1, e)
        m = np.where(carry, 8, m)
        byte = ((e + 7) << 3).astype(np.int64) | (m.astype(np.int64) - 8)
        byte = np.where((e > 8) | ((e == 8) & (m > 14)), 0x7E, byte)
        out[normal] = byte.astype(np.uint8)

    neg = np.signbit(scaled) & (out != 0)
    out[neg] |= 0x80
    return out


def e4m3_decode(codes: np.ndarray) -> np.ndarray:
    return _DECODE[codes]


def e4m3_encode_blocks(x: np.ndarray, scales: np.ndarray, block_size: int) -> np.ndarray:
    rep = np.repeat(scales, block_size)[: x.shape[0]]
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(rep > 0.0, x / rep, 0.0)
    return e4m3_encode(scaled)


def e4m3_decode_blocks(codes: np.ndarray, scales: np.ndarray, block_size: int) -> np.ndarray:
    rep = np.repeat(scales, block_size)[: codes.shape[0]]
    return e4m3_decode(codes) * rep
