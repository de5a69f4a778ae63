"""Explanation-guided model stealing against explainable graph classifiers."""

__version__ = "0.1.0"
