"""Selective multimodal sensor fusion laboratory.

Trains and evaluates pose-regression models that combine two synthetic
sensor streams through direct concatenation, deterministic soft masking,
or stochastic hard (Gumbel-Softmax) masking, and measures how each fusion
strategy copes with degraded sensor data.
"""

__version__ = "0.1.0"
