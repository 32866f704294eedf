"""Linguistic OWA pooling CNNs and sliding-window fault diagnosis."""

from .quantifiers import (
    Kind,
    OwaWeights,
    Quantifier,
    discrete_orness,
    evaluate,
    owa_aggregate,
    parse_quantifier,
    quantifier_orness,
    rim_weights,
)

__version__ = "0.1.0"

__all__ = [
    "Kind",
    "OwaWeights",
    "Quantifier",
    "discrete_orness",
    "evaluate",
    "owa_aggregate",
    "parse_quantifier",
    "quantifier_orness",
    "rim_weights",
]
