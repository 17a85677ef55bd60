from __future__ import annotations

from fractions import Fraction

import mpmath
import pytest

_ACCEPTANCE: list[tuple[str, bool, str]] = []


def pi_bits(start: int, count: int) -> str:
    """Bits ``start .. start+count-1`` after the binary point, from mpmath."""
    with mpmath.workprec(start + count + 128):
        scaled = mpmath.floor(mpmath.pi * mpmath.mpf(2) ** (start - 1 + count))
    value = int(scaled) % (1 << count)
    return format(value, f"0{count}b")


def pi_hex(start: int, count_bits: int) -> str:
    bits = pi_bits(start, count_bits)
    return f"{int(bits, 2):0{count_bits // 4}X}"


def long_division_bits(numerator: int, denominator: int, nbits: int) -> tuple[str, int]:
    """Schoolbook binary long division: first nbits of numerator/denominator (< 1) and the remainder."""
    out = []
    r = numerator
    for _ in range(nbits):
        r *= 2
        if r >= denominator:
            out.append("1")
            r -= denominator
        else:
            out.append("0")
    return "".join(out), r


def rounded_by_long_division(numerator: int, denominator: int, p: int) -> int:
    bits, rem = long_division_bits(numerator, denominator, p)
    q = int(bits, 2) if bits else 0
    if 2 * rem > denominator or (2 * rem == denominator and q & 1):
        q += 1
    return q % (1 << p)


def bbp_fraction_of_2n_pi(n: int, extra_bits: int) -> Fraction:
    """<2^n pi> from the 16-ary series with exact rationals, truncated far past the ulp."""
    total = Fraction(0)
    k = 0
    while True:
        term = Fraction(4, 8 * k + 1) - Fraction(2, 8 * k + 4) - Fraction(1, 8 * k + 5) - Fraction(1, 8 * k + 6)
        total += term * Fraction(2**n, 16**k)
        if 4 * k - n > extra_bits + 8:
            break
        k += 1
    return total - (total.numerator // total.denominator)


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion for the summary."""

    def record(name: str, ok: bool, detail: str = ""):
        _ACCEPTANCE.append((name, ok, detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
