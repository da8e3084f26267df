"""Worst-case mutual information of representations: estimation, training and evaluation."""

__version__ = "0.1.0"
