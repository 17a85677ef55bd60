"""Modular powers of two for word-sized odd moduli."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

WORD_BITS = 64
MAX_MODULUS = 1 << 63

# Moduli above this go through Montgomery reduction.  Not a measured
# crossover; tune with ``pibits bench`` style timing if it matters.
MONTGOMERY_THRESHOLD = 1 << 16


def mod_pow(base: int, exponent: int, modulus: int) -> int:
    """base**exponent mod modulus by left-to-right binary exponentiation."""
    if modulus < 1:
        raise ZeroDivisionError("modulus must be >= 1")
    if exponent < 0:
        raise ValueError("exponent must be non-negative")
    if modulus == 1:
        return 0
    base %= modulus
    result = 1
    for bit in bin(exponent)[2:]:
        result = result * result % modulus
        if bit == "1":
            result = result * base % modulus
    return result


@dataclass(frozen=True)
class MontgomeryContext:
    """Precomputed constants for Montgomery arithmetic with R = 2**64."""

    modulus: int
    r_squared: int = field(init=False)
    neg_inverse: int = field(init=False)

    def __post_init__(self):
        m = self.modulus
        if m < 3 or not m & 1:
            raise ValueError(f"Montgomery modulus must be odd and >= 3, got {m}")
        if m >= MAX_MODULUS:
            raise ValueError(f"modulus must be below 2^63, got {m}")
        r = 1 << WORD_BITS
        object.__setattr__(self, "r_squared", r * r % m)
        object.__setattr__(self, "neg_inverse", -pow(m, -1, r) % r)

    def to_montgomery(self, a: int) -> int:
        return self.redc(a * self.r_squared)

    def redc(self, t: int) -> int:
        """t * R^-1 mod modulus for 0 <= t < modulus * R."""
        mask = (1 << WORD_BITS) - 1
        m = ((t & mask) * self.neg_inverse) & mask
        u = (t + m * self.modulus) >> WORD_BITS
        return u - self.modulus if u >= self.modulus else u


def montgomery_pow(ctx: MontgomeryContext, exponent: int) -> int:
    """2**exponent mod ctx.modulus; equal to ``mod_pow(2, exponent, ctx.modulus)``."""
    if exponent < 0:
        raise ValueError("exponent must be non-negative")
    if exponent >= 1 << 64:
        # compiled loop takes a single-word exponent
        return _montgomery_pow_py(ctx, exponent)
    one = ctx.to_montgomery(1)
    return int(
        _kernels.mont_pow2(
            np.uint64(exponent), np.uint64(ctx.modulus), np.uint64(ctx.neg_inverse), np.uint64(one)
        )
    )


def _montgomery_pow_py(ctx: MontgomeryContext, exponent: int) -> int:
    x = ctx.to_montgomery(1)
    for bit in bin(exponent)[2:]:
        x = ctx.redc(x * x)
        if bit == "1":
            x += x
            if x >= ctx.modulus:
                x -= ctx.modulus
    return ctx.redc(x)


def pow2_mod(exponent: int, modulus: int, threshold: int = MONTGOMERY_THRESHOLD) -> int:
    """2**exponent mod modulus, choosing Montgomery above ``threshold``."""
    if modulus > threshold and modulus & 1 and modulus < MAX_MODULUS:
        return montgomery_pow(MontgomeryContext(modulus), exponent)
    return mod_pow(2, exponent, modulus)
