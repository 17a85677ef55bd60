"""Bits of pi at arbitrary positions by BBP-type digit extraction."""

from .engine import ClusterConfig, PartitionPlan, resume, run
from .fixedpoint import FixedFraction
from .series import BBP16, BELLARD, ExtractionRequest, ExtractionResult, extract, get_formula

__all__ = [
    "BBP16",
    "BELLARD",
    "ClusterConfig",
    "ExtractionRequest",
    "ExtractionResult",
    "FixedFraction",
    "PartitionPlan",
    "extract",
    "get_formula",
    "resume",
    "run",
]
