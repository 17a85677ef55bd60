"""BBP-type series as data, and evaluation of their terms mod 1.

A series contributes ``sign * sum_k (+-1)^k 2^(n + x - d*k) / (y*k + z)`` to
the fractional part of ``2^n * pi``.  Terms with a non-negative power of two
(the head) reduce to a modular exponentiation followed by one division;
terms with a negative power (the tail) are plain reciprocals that shrink
geometrically and are cut off once they fall below half an ulp.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .fixedpoint import WORD_BITS, FixedFraction, div_scaled, bits_to_hex, group_hex, to_bits
from .modmath import MAX_MODULUS, MONTGOMERY_THRESHOLD, pow2_mod


@dataclass(frozen=True)
class SeriesSpec:
    sign: int
    alternating: bool
    exp_offset: int
    exp_stride: int
    mod_stride: int
    mod_offset: int

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")
        if self.exp_stride < 1 or self.mod_stride < 1 or self.mod_offset < 1:
            raise ValueError("strides and modulus offset must be positive")
        # every modulus y*k + z must be odd so Montgomery reduction applies
        if not self.mod_offset & 1 or self.mod_stride & 1:
            raise ValueError("need an odd modulus offset and an even modulus stride")

    def modulus(self, k: int) -> int:
        return self.mod_stride * k + self.mod_offset

    def exponent(self, n: int, k: int) -> int:
        """Power of two carried by term k; negative in the tail."""
        return n + self.exp_offset - self.exp_stride * k

    def head_end(self, n: int) -> int:
        """Number of head terms, i.e. the first k whose exponent is negative."""
        top = n + self.exp_offset
        return top // self.exp_stride + 1 if top >= 0 else 0

    def term_sign(self, k: int) -> int:
        return -self.sign if self.alternating and k & 1 else self.sign


@dataclass(frozen=True)
class Formula:
    name: str
    series: tuple[SeriesSpec, ...]


def _s(sign, x, d, y, z, alternating):
    return SeriesSpec(sign, alternating, x, d, y, z)


# pi = sum_k 16^-k (4/(8k+1) - 2/(8k+4) - 1/(8k+5) - 1/(8k+6)), with the
# even denominators reduced so every modulus is odd.
BBP16 = Formula(
    "bbp16",
    (
        _s(+1, 2, 4, 8, 1, False),
        _s(-1, -1, 4, 2, 1, False),
        _s(-1, 0, 4, 8, 5, False),
        _s(-1, -1, 4, 4, 3, False),
    ),
)

# pi = sum_k (-1)^k 2^-10k (2^2/(10k+1) - 1/(10k+3) - 2^-4/(10k+5)
#      - 2^-4/(10k+7) + 2^-6/(10k+9) - 2^-1/(4k+1) - 2^-6/(4k+3))
BELLARD = Formula(
    "bellard",
    (
        _s(+1, 2, 10, 10, 1, True),
        _s(-1, 0, 10, 10, 3, True),
        _s(-1, -4, 10, 10, 5, True),
        _s(-1, -4, 10, 10, 7, True),
        _s(+1, -6, 10, 10, 9, True),
        _s(-1, -1, 10, 4, 1, True),
        _s(-1, -6, 10, 4, 3, True),
    ),
)

FORMULAS = {f.name: f for f in (BBP16, BELLARD)}


def get_formula(name: str) -> Formula:
    try:
        return FORMULAS[name]
    except KeyError:
        raise ValueError(f"unknown formula {name!r}; choose from {sorted(FORMULAS)}") from None


@dataclass(frozen=True)
class ExtractionRequest:
    """Bits of pi starting at the 1-based ``start_position`` after the point."""

    start_position: int
    precision_bits: int
    guard_bits: int
    formula: Formula = BELLARD

    def __post_init__(self):
        if self.start_position < 1:
            raise ValueError("start_position is 1-based and must be >= 1")
        p = self.precision_bits
        if p < WORD_BITS or p % WORD_BITS:
            raise ValueError(f"precision must be a positive multiple of {WORD_BITS}, got {p}")
        if not 0 <= self.guard_bits < p:
            raise ValueError("guard_bits must be in [0, precision_bits)")

    @property
    def n(self) -> int:
        return self.start_position - 1

    @property
    def reported_bits(self) -> int:
        return self.precision_bits - self.guard_bits


@dataclass(frozen=True)
class ExtractionResult:
    fraction: FixedFraction
    start_position: int
    reported_bits: int
    stats: object = field(default=None, compare=False, repr=False)

    @property
    def bits(self) -> str:
        return to_bits(self.fraction, self.reported_bits)

    @property
    def hex(self) -> str:
        return bits_to_hex(self.bits)

    @property
    def blocks(self) -> str:
        return group_hex(self.hex)


def make_result(request: ExtractionRequest, fraction: FixedFraction, stats=None) -> ExtractionResult:
    return ExtractionResult(fraction, request.start_position, request.reported_bits, stats)


def head_term(spec: SeriesSpec, n: int, k: int, p: int, threshold: int = MONTGOMERY_THRESHOLD) -> FixedFraction:
    """(2^e mod M) / M for e = n + x - d*k >= 0, M = y*k + z.  Unsigned."""
    e = spec.exponent(n, k)
    if e < 0:
        raise ValueError(f"term {k} is in the tail (exponent {e})")
    m = spec.modulus(k)
    return div_scaled(pow2_mod(e, m, threshold), m, 0, p)


def tail_term(spec: SeriesSpec, n: int, k: int, p: int) -> FixedFraction:
    """1 / (2^b * M) for b = d*k - n - x > 0.  Unsigned."""
    b = -spec.exponent(n, k)
    if b <= 0:
        raise ValueError(f"term {k} is in the head (shift {b})")
    return div_scaled(1, spec.modulus(k), b, p)


def tail_cutoff(spec: SeriesSpec, n: int, p: int) -> int:
    """One past the last k whose term exceeds 2^-(p+1).

    Head terms are always evaluated, so the result is never below
    ``spec.head_end(n)``.  Tail terms decrease with k, hence a bisection.
    """
    start = spec.head_end(n)
    threshold = 1 << (p + 1)

    def negligible(k):
        return spec.modulus(k) << -spec.exponent(n, k) >= threshold

    lo, hi = start, start + -(-(p + 1) // spec.exp_stride)
    while lo < hi:
        mid = (lo + hi) // 2
        if negligible(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo


def _kernel_head_sum(spec, n, k_lo, k_hi, p, threshold):
    nlimbs = p // WORD_BITS
    pos = np.zeros(2 * nlimbs, dtype=np.uint64)
    neg = np.zeros(2 * nlimbs, dtype=np.uint64)
    _kernels.head_range_sum(
        n, spec.exp_offset, spec.exp_stride, spec.mod_stride, spec.mod_offset,
        spec.alternating, k_lo, k_hi, nlimbs, min(threshold, 1 << 32), pos, neg,
    )
    total = 0
    for a, b in zip(pos.tolist(), neg.tolist()):
        total = (total << 32) + a - b
    return total


def sum_series_range(
    spec: SeriesSpec,
    n: int,
    k_lo: int,
    k_hi: int,
    p: int,
    threshold: int = MONTGOMERY_THRESHOLD,
) -> FixedFraction:
    """Sum of the rounded terms k in [k_lo, k_hi) mod 1, with (-1)^k but not the series sign."""
    if k_lo < 0 or k_hi < k_lo:
        raise ValueError(f"bad term range [{k_lo}, {k_hi})")
    split = min(max(spec.head_end(n), k_lo), k_hi)
    total = 0
    if split > k_lo:
        if spec.modulus(split - 1) >= MAX_MODULUS or n + spec.exp_offset >= 1 << 63:
            raise OverflowError("position too large for single-word moduli")
        total = _kernel_head_sum(spec, n, k_lo, split, p, threshold)
    for k in range(split, k_hi):
        t = tail_term(spec, n, k, p).numerator
        total += -t if spec.alternating and k & 1 else t
    return FixedFraction.wrap(total, p)


def signed_range_sum(spec: SeriesSpec, n: int, k_lo: int, k_hi: int, p: int, **kw) -> FixedFraction:
    s = sum_series_range(spec, n, k_lo, k_hi, p, **kw)
    return s if spec.sign > 0 else -s


def series_cutoffs(formula: Formula, n: int, p: int) -> list[int]:
    return [tail_cutoff(s, n, p) for s in formula.series]


def extract(request: ExtractionRequest, threshold: int = MONTGOMERY_THRESHOLD) -> ExtractionResult:
    """Evaluate every series in one process and combine them mod 1."""
    n, p = request.n, request.precision_bits
    total = FixedFraction.zero(p)
    for spec, cutoff in zip(request.formula.series, series_cutoffs(request.formula, n, p)):
        total = total + signed_range_sum(spec, n, 0, cutoff, p, threshold=threshold)
    return make_result(request, total)
