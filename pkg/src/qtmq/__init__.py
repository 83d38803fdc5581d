"""Quantum transfer matrix, Baxter Q-operators and Wronskian systems for XXZ."""
from .params import ModelParams

__version__ = "0.1.0"
__all__ = ["ModelParams"]
