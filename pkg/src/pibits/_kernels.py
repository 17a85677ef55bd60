"""Compiled inner loops.

Everything here runs under numba with the GIL released so that worker
threads evaluate disjoint term ranges truly in parallel.  All arithmetic is
on uint64; mixing in signed ints silently promotes to float64 in numba, so
every constant is wrapped in ``_u``.
"""

import numba as nb
import numpy as np

_u = np.uint64
_MASK32 = _u(0xFFFFFFFF)
_ZERO = _u(0)
_ONE = _u(1)
_S32 = _u(32)
_S63 = _u(63)


_jit = nb.njit(cache=True, nogil=True)


@_jit
def mul128(a, b):
    """Full 64x64 -> 128 bit product as (hi, lo)."""
    a_lo = a & _MASK32
    a_hi = a >> _S32
    b_lo = b & _MASK32
    b_hi = b >> _S32
    p0 = a_lo * b_lo
    p1 = a_lo * b_hi
    p2 = a_hi * b_lo
    p3 = a_hi * b_hi
    mid = (p0 >> _S32) + (p1 & _MASK32) + (p2 & _MASK32)
    lo = (p0 & _MASK32) | (mid << _S32)
    hi = p3 + (p1 >> _S32) + (p2 >> _S32) + (mid >> _S32)
    return hi, lo


@_jit
def redc(t_hi, t_lo, modulus, neg_inv):
    # requires t < modulus * 2^64 and modulus < 2^63
    m = t_lo * neg_inv
    m_hi, m_lo = mul128(m, modulus)
    lo = t_lo + m_lo
    carry = _ONE if lo < t_lo else _ZERO
    hi = t_hi + m_hi + carry
    if hi >= modulus:
        hi -= modulus
    return hi


@_jit
def _bit_length(e):
    n = 0
    while e:
        e >>= _ONE
        n += 1
    return n


@_jit
def mont_pow2(exponent, modulus, neg_inv, one):
    """2**exponent mod modulus, staying in Montgomery form until the end.

    ``one`` is the Montgomery form of 1, i.e. 2^64 mod modulus.  Doubling
    commutes with the Montgomery map, so multiplying by the base is a
    modular add.
    """
    x = one
    nbits = _bit_length(exponent)
    for i in range(nbits - 1, -1, -1):
        hi, lo = mul128(x, x)
        x = redc(hi, lo, modulus, neg_inv)
        if (exponent >> _u(i)) & _ONE:
            x = x + x
            if x >= modulus:
                x -= modulus
    return redc(_ZERO, x, modulus, neg_inv)


@_jit
def plain_pow2(exponent, modulus):
    # caller guarantees modulus <= 2^32 so squares fit in 64 bits
    if modulus == _ONE:
        return _ZERO
    x = _ONE
    nbits = _bit_length(exponent)
    for i in range(nbits - 1, -1, -1):
        x = (x * x) % modulus
        if (exponent >> _u(i)) & _ONE:
            x = x + x
            if x >= modulus:
                x -= modulus
    return x


@_jit
def neg_inverse(modulus):
    """-modulus^-1 mod 2^64 by Newton iteration (modulus odd)."""
    inv = modulus  # correct to 3 bits for odd modulus
    for _ in range(5):
        inv = inv * (_u(2) - modulus * inv)
    return _ZERO - inv


@_jit
def pow2_mod(exponent, modulus, threshold):
    if modulus > threshold:
        one = (_ZERO - modulus) % modulus
        return mont_pow2(exponent, modulus, neg_inverse(modulus), one)
    return plain_pow2(exponent, modulus)


@_jit
def _add_quotient(acc, rem, modulus, nlimbs):
    """Add round-half-even(rem * 2^(64*nlimbs) / modulus) into 32-bit lanes."""
    last = 2 * nlimbs - 1
    q = _ZERO
    if modulus <= _MASK32:
        for j in range(2 * nlimbs):
            t = rem << _S32
            q = t // modulus
            rem = t - q * modulus
            acc[j] += q
    else:
        # bitwise long division; only reached for positions beyond ~2^34
        for j in range(2 * nlimbs):
            q = _ZERO
            for _ in range(32):
                rem = rem + rem
                q = q + q
                if rem >= modulus:
                    rem -= modulus
                    q |= _ONE
            acc[j] += q
    half = modulus - rem
    if rem > half or (rem == half and (q & _ONE)):
        acc[last] += _ONE


@_jit
def normalize(acc):
    """Propagate lazy carries so every lane holds 32 bits; overflow is mod 1."""
    carry = _ZERO
    for j in range(acc.shape[0] - 1, -1, -1):
        v = acc[j] + carry
        acc[j] = v & _MASK32
        carry = v >> _S32


@_jit
def head_range_sum(n, x, d, y, z, alternating, k_lo, k_hi, nlimbs, threshold, pos, neg):
    """Accumulate A_k for k in [k_lo, k_hi) into the ``pos``/``neg`` lanes.

    Each term is rounded to nearest-even at 64*nlimbs bits before it is
    added, so the sum is independent of how the range is split.  Terms go to
    ``neg`` when they carry (-1)^k with odd k; the caller applies the series
    sign.  All k in the range must satisfy n + x - d*k >= 0.  Moduli above
    ``threshold`` (at most 2^32) are exponentiated with Montgomery
    multiplication.
    """
    thr = _u(threshold)
    since_flush = 0
    for k in range(k_lo, k_hi):
        e = _u(n + x - d * k)
        m = _u(y * k + z)
        r = pow2_mod(e, m, thr)
        if r != _ZERO:
            if alternating and (k & 1):
                _add_quotient(neg, r, m, nlimbs)
            else:
                _add_quotient(pos, r, m, nlimbs)
        since_flush += 1
        if since_flush >= 1 << 30:
            normalize(pos)
            normalize(neg)
            since_flush = 0
