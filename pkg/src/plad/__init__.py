"""Perturbation-learning anomaly detection.

A perturbator network maps each normal sample to small multiplicative and
additive perturbations; a binary classifier is trained jointly to separate
the normal samples from their perturbed versions. The classifier's sigmoid
output is the anomaly score. The package ships the training objective, the
data/split harness, rank-based metrics and a CLI for reproducible runs.
"""

__version__ = "0.1.0"
