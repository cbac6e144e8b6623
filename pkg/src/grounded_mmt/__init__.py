"""Visually grounded neural machine translation with adversarial feature reconstruction."""

__version__ = "0.1.0"
