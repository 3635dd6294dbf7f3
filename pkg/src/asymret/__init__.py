"""Asymmetric dense retrieval at desk scale: a small query encoder distilled
from a larger contrastively trained teacher, then pruned and refined."""

__version__ = "0.1.0"
