"""Counterfactual explanation methods for binary text classifiers, with a benchmark harness."""

__version__ = "0.1.0"
