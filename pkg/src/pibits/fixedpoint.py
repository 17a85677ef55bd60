"""Fixed-point binary fractions in [0, 1).

A :class:`FixedFraction` holds ``p`` fractional bits and nothing else; every
sum is taken mod 1.  Addition and subtraction are exact, so any summation
tree over the same terms produces the same bits.  The only rounding happens
in :func:`div_scaled`, which rounds half to even at the last bit.
"""

from __future__ import annotations

from dataclasses import dataclass

WORD_BITS = 64
_WORD_MASK = (1 << WORD_BITS) - 1


class PrecisionMismatch(ValueError):
    """Raised when operands do not share the same precision."""


def round_up_precision(bits: int) -> int:
    """Smallest multiple of the word width that is >= ``bits``."""
    if bits < 1:
        raise ValueError(f"precision must be positive, got {bits}")
    return -(-bits // WORD_BITS) * WORD_BITS


@dataclass(frozen=True)
class FixedFraction:
    """``numerator / 2**precision_bits`` with ``0 <= numerator < 2**precision_bits``."""

    numerator: int
    precision_bits: int

    def __post_init__(self):
        p = self.precision_bits
        if p < WORD_BITS or p % WORD_BITS:
            raise ValueError(f"precision_bits must be a positive multiple of {WORD_BITS}, got {p}")
        if not 0 <= self.numerator < (1 << p):
            raise ValueError("numerator out of range for a fraction in [0, 1)")

    @classmethod
    def zero(cls, precision_bits: int) -> FixedFraction:
        return cls(0, precision_bits)

    @classmethod
    def wrap(cls, value: int, precision_bits: int) -> FixedFraction:
        """Reduce an arbitrary integer multiple of one ulp mod 1."""
        return cls(value & ((1 << precision_bits) - 1), precision_bits)

    @classmethod
    def from_limbs(cls, limbs, precision_bits: int | None = None) -> FixedFraction:
        limbs = list(limbs)
        if precision_bits is None:
            precision_bits = WORD_BITS * len(limbs)
        if precision_bits != WORD_BITS * len(limbs):
            raise ValueError("precision_bits must equal word width times limb count")
        value = 0
        for w in limbs:
            if not 0 <= w <= _WORD_MASK:
                raise ValueError(f"limb {w!r} is not a {WORD_BITS}-bit word")
            value = (value << WORD_BITS) | w
        return cls(value, precision_bits)

    @property
    def limbs(self) -> tuple[int, ...]:
        """Machine words, most significant first."""
        count = self.precision_bits // WORD_BITS
        return tuple(
            (self.numerator >> (WORD_BITS * (count - 1 - i))) & _WORD_MASK for i in range(count)
        )

    @property
    def ulp(self) -> float:
        return 2.0 ** -self.precision_bits

    def __float__(self) -> float:
        return self.numerator / (1 << self.precision_bits)

    def __add__(self, other: FixedFraction) -> FixedFraction:
        return add_mod1(self, other)

    def __sub__(self, other: FixedFraction) -> FixedFraction:
        return sub_mod1(self, other)

    def __neg__(self) -> FixedFraction:
        return sub_mod1(FixedFraction.zero(self.precision_bits), self)

    def to_hex(self) -> str:
        """Serialized form ``p=<bits>:<lowercase hex of all limbs>``."""
        digits = self.precision_bits // 4
        return f"p={self.precision_bits}:{self.numerator:0{digits}x}"

    @classmethod
    def from_hex(cls, text: str) -> FixedFraction:
        head, sep, body = text.strip().partition(":")
        if not sep or not head.startswith("p="):
            raise ValueError(f"malformed fraction record: {text!r}")
        p = int(head[2:])
        if len(body) != p // 4 or body != body.lower():
            raise ValueError(f"expected {p // 4} lowercase hex digits for p={p}")
        return cls(int(body, 16), p)

    def __repr__(self) -> str:
        return f"FixedFraction({self.to_hex()})"


def _check_same(a: FixedFraction, b: FixedFraction) -> int:
    if a.precision_bits != b.precision_bits:
        raise PrecisionMismatch(f"precision {a.precision_bits} != {b.precision_bits}")
    return a.precision_bits


def add_mod1(a: FixedFraction, b: FixedFraction) -> FixedFraction:
    p = _check_same(a, b)
    return FixedFraction((a.numerator + b.numerator) & ((1 << p) - 1), p)


def sub_mod1(a: FixedFraction, b: FixedFraction) -> FixedFraction:
    p = _check_same(a, b)
    return FixedFraction((a.numerator - b.numerator) & ((1 << p) - 1), p)


def sum_mod1(terms, precision_bits: int) -> FixedFraction:
    total = 0
    for t in terms:
        if t.precision_bits != precision_bits:
            raise PrecisionMismatch(f"precision {t.precision_bits} != {precision_bits}")
        total += t.numerator
    return FixedFraction.wrap(total, precision_bits)


def round_half_even(numerator: int, denominator: int) -> int:
    """Nearest integer to numerator/denominator, ties to even (both >= 0)."""
    q, r = divmod(numerator, denominator)
    twice = 2 * r
    if twice > denominator or (twice == denominator and q & 1):
        q += 1
    return q


def div_scaled(numerator: int, modulus: int, shift_bits: int, precision_bits: int) -> FixedFraction:
    """``numerator / (2**shift_bits * modulus)`` rounded to ``precision_bits``.

    The shift is applied first and only ``precision_bits - shift_bits``
    quotient bits are developed by the division.  A shift of at least the
    precision leaves nothing to divide; the result is then 0 or 1 ulp
    depending on rounding.  A result that rounds up to exactly 1 wraps to 0.
    """
    if modulus < 1:
        raise ZeroDivisionError("modulus must be >= 1")
    if shift_bits < 0:
        raise ValueError("shift_bits must be non-negative")
    if not 0 <= numerator < modulus << shift_bits:
        raise ValueError(f"{numerator}/(2^{shift_bits}*{modulus}) is not in [0, 1)")
    working = precision_bits - shift_bits
    if working >= 0:
        q = round_half_even(numerator << working, modulus)
    else:
        q = round_half_even(numerator, modulus << -working)
    return FixedFraction.wrap(q, precision_bits)


def bits_to_hex(bits: str) -> str:
    """Uppercase hex of a bit string; a trailing partial nibble is zero-padded."""
    if not bits:
        return ""
    padded = bits + "0" * (-len(bits) % 4)
    return f"{int(padded, 2):0{len(padded) // 4}X}"


def group_hex(digits: str, block: int = 8) -> str:
    return " ".join(digits[i : i + block] for i in range(0, len(digits), block))


def to_bits(f: FixedFraction, count: int) -> str:
    """Leading ``count`` bits of ``f`` as a '0'/'1' string."""
    if not 0 <= count <= f.precision_bits:
        raise ValueError(f"count must be in [0, {f.precision_bits}], got {count}")
    if count == 0:
        return ""
    return format(f.numerator >> (f.precision_bits - count), f"0{count}b")


def to_hex(f: FixedFraction, count: int) -> str:
    """Leading ``count`` bits as uppercase hex in space-separated 8-digit blocks."""
    return group_hex(bits_to_hex(to_bits(f, count)))
