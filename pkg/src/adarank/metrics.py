"""Classification metrics: accuracy and rank-sum AUC."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels must have identical shape")
    if labels.size == 0:
        raise ValueError("empty labels")
    return float(np.mean(predictions == labels))


def binary_auc(scores, labels) -> float:
    """Mann-Whitney AUC of class-1 scores over class-0 scores, ties averaged.

    Equals the probability that a random positive outscores a random
    negative, counting ties as half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be aligned 1-D arrays")
    classes = np.unique(labels)
    if not np.isin(classes, (0, 1)).all():
        raise ValueError("AUC is defined for binary labels 0/1 only")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one sample of each class")
    ranks = rankdata(scores)  # average ranks on ties
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
