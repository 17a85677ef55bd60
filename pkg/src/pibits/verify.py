"""Dual-run overlap checking and the statistical rounding-error model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fixedpoint import bits_to_hex, group_hex
from .series import ExtractionResult, Formula, series_cutoffs


class DisjointRanges(ValueError):
    pass


@dataclass(frozen=True)
class OverlapReport:
    run_a: ExtractionResult
    run_b: ExtractionResult
    overlap_start: int
    overlap_bits: int
    verified_bits: int
    verified_bit_string: str
    first_disagreement: int | None

    @property
    def verified_hex(self) -> str:
        return bits_to_hex(self.verified_bit_string)

    @property
    def agrees(self) -> bool:
        return self.first_disagreement is None

    @property
    def verified_end(self) -> int:
        """Last verified position (inclusive); ``overlap_start - 1`` if none."""
        return self.overlap_start + self.verified_bits - 1


def overlap_check(a: ExtractionResult, b: ExtractionResult) -> OverlapReport:
    """Compare the bit positions covered by both runs.

    Only the agreeing prefix of the common range counts as verified; the
    first position where the runs differ is reported.
    """
    lo = max(a.start_position, b.start_position)
    hi = min(a.start_position + a.reported_bits, b.start_position + b.reported_bits)
    if lo >= hi:
        raise DisjointRanges(
            f"runs at {a.start_position} (+{a.reported_bits}) and "
            f"{b.start_position} (+{b.reported_bits}) share no positions"
        )
    bits_a = a.bits[lo - a.start_position : hi - a.start_position]
    bits_b = b.bits[lo - b.start_position : hi - b.start_position]
    agree = next((i for i, (x, y) in enumerate(zip(bits_a, bits_b)) if x != y), len(bits_a))
    return OverlapReport(
        run_a=a,
        run_b=b,
        overlap_start=lo,
        overlap_bits=hi - lo,
        verified_bits=agree,
        verified_bit_string=bits_a[:agree],
        first_disagreement=None if agree == len(bits_a) else lo + agree,
    )


def render_report(report: OverlapReport) -> str:
    lines = [
        f"Run A     : {report.run_a.start_position:,} (+{report.run_a.reported_bits} bits)",
        f"Run B     : {report.run_b.start_position:,} (+{report.run_b.reported_bits} bits)",
        f"Overlap   : {report.overlap_start:,} .. {report.overlap_start + report.overlap_bits - 1:,}",
        f"Verified  : {report.verified_bits} bits",
        f"Hex       : {group_hex(report.verified_hex)}",
    ]
    if report.first_disagreement is not None:
        lines.append(f"MISMATCH  : first disagreement at bit {report.first_disagreement:,}")
    return "\n".join(lines)


def term_count(formula: Formula, n: int, p: int) -> int:
    """Number of rounded terms evaluated for position n at precision p."""
    return sum(series_cutoffs(formula, n, p))


@dataclass(frozen=True)
class ErrorModel:
    """Sum of ``term_count`` independent U(-eps, eps) errors, eps = 2^-(p+1)."""

    term_count: int
    precision: int

    def __post_init__(self):
        if self.term_count < 1:
            raise ValueError("term_count must be >= 1")

    @property
    def ulp_half(self) -> float:
        return math.ldexp(1.0, -self.precision - 1)

    @property
    def variance(self) -> float:
        return self.term_count * self.ulp_half**2 / 3

    @property
    def sigma(self) -> float:
        return self.ulp_half * math.sqrt(self.term_count / 3)

    @property
    def worst_case(self) -> float:
        return self.term_count * self.ulp_half


def confidence(model: ErrorModel, bound_exponent: int) -> float:
    """P(|E| < 2^-b) under the normal approximation N(0, m eps^2 / 3)."""
    bound = math.ldexp(1.0, -bound_exponent)
    return math.erf(bound / (model.sigma * math.sqrt(2)))


@dataclass(frozen=True)
class MonteCarloSummary:
    model: ErrorModel
    errors: np.ndarray  # simulated E, one per trial

    @property
    def trials(self) -> int:
        return len(self.errors)

    @property
    def mean(self) -> float:
        return float(self.errors.mean())

    @property
    def variance(self) -> float:
        return float(self.errors.var())

    def fraction_within(self, bound_exponent: int) -> float:
        """Empirical P(|E| < 2^-b)."""
        return float(np.mean(np.abs(self.errors) < math.ldexp(1.0, -bound_exponent)))


def monte_carlo_error(model: ErrorModel, trials: int, seed=0, batch_elements: int = 1 << 22) -> MonteCarloSummary:
    """Draw ``trials`` sums of ``model.term_count`` uniform rounding errors."""
    m = model.term_count
    rng = np.random.default_rng(seed)
    out = np.empty(trials, dtype=np.float64)
    chunk = 1 << 20
    if m > chunk:
        # one trial at a time, summed over sub-chunks
        for t in range(trials):
            acc = 0.0
            left = m
            while left:
                c = min(left, chunk)
                acc += rng.uniform(-1.0, 1.0, c).sum()
                left -= c
            out[t] = acc
    else:
        rows = max(1, batch_elements // m)
        for start in range(0, trials, rows):
            r = min(rows, trials - start)
            out[start : start + r] = rng.uniform(-1.0, 1.0, (r, m)).sum(axis=1)
    return MonteCarloSummary(model, out * model.ulp_half)
