"""Rank-based ROC AUC, contamination-threshold F1, aggregation and exports."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import classifier as clf


class MetricError(ValueError):
    pass


@dataclass
class EvalReport:
    """Per-run metric values with their mean and sample standard deviation."""

    metric: str
    per_run: list
    mean: float
    std: float
    aborted_runs: list = field(default_factory=list)

    def render(self):
        return f"{self.metric} = {format_mean_std(self.mean, self.std)}"


def _check_binary(labels):
    labels = np.asarray(labels)
    pos = int(np.sum(labels == 1))
    neg = int(np.sum(labels == 0))
    if pos + neg != labels.size:
        raise MetricError("labels must be 0 (normal) or 1 (abnormal)")
    if pos == 0 or neg == 0:
        raise MetricError("both classes must be present")
    return labels, pos, neg


def roc_auc(scores, labels):
    """Mann-Whitney AUC with midrank tie handling.

    Equals the mean over (abnormal, normal) pairs of
    [score_abnormal > score_normal] + 0.5 * [scores equal].
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels, pos, neg = _check_binary(labels)
    if scores.shape != labels.shape:
        raise MetricError(f"scores {scores.shape} and labels {labels.shape} differ")

    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg)


def contamination_flags(scores, ratio):
    """Boolean mask flagging the top ceil(ratio * N) scores as anomalies.

    Ties break by descending score then ascending index.
    """
    if not 0 < ratio <= 1:
        raise MetricError(f"contamination ratio must lie in (0, 1], got {ratio}")
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    k = math.ceil(ratio * n)
    order = np.lexsort((np.arange(n), -scores))
    predicted = np.zeros(n, dtype=bool)
    predicted[order[:k]] = True
    return predicted


def f1_at_contamination(scores, labels, ratio):
    """F1 after flagging the known contamination fraction; 0 when P+R is 0."""
    labels, _, _ = _check_binary(labels)
    predicted = contamination_flags(scores, ratio)

    tp = int(np.sum(predicted & (labels == 1)))
    fp = int(np.sum(predicted & (labels == 0)))
    fn = int(np.sum(~predicted & (labels == 1)))
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall)


def aggregate_runs(values):
    """Mean and sample (n-1) standard deviation; std is 0 for one value."""
    if len(values) == 0:
        raise MetricError("no values to aggregate")
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, std


def format_mean_std(mean, std, percent=True):
    """Render like a results table entry, e.g. ``76.6 ± 0.6``."""
    scale = 100.0 if percent else 1.0
    return f"{scale * mean:.1f} ± {scale * std:.1f}"


def export_scores(model, test_x, test_y, path, embeddings_path=None):
    """Write index,score,label rows; scores re-parse to the exact floats.

    Optionally also writes the classifier's penultimate-layer activations
    (index, e_1..e_k, label) for external embedding tools. Returns the
    number of data rows written.
    """
    test_x = np.asarray(test_x, dtype=np.float64)
    test_y = np.asarray(test_y)
    if test_x.shape[0] != test_y.size or test_x.shape[0] == 0:
        raise MetricError("test split is empty or misaligned")
    scores = clf.anomaly_score(model.classifier, test_x)
    with open(path, "w") as fh:
        fh.write("index,score,label\n")
        for i, (s, y) in enumerate(zip(scores, test_y)):
            fh.write(f"{i},{float(s)!r},{int(y)}\n")
    if embeddings_path is not None:
        emb = clf.penultimate_embedding(model.classifier, test_x)
        with open(embeddings_path, "w") as fh:
            fh.write("index," + ",".join(f"e_{j + 1}" for j in range(emb.shape[1])) + ",label\n")
            for i, (row, y) in enumerate(zip(emb, test_y)):
                fh.write(f"{i}," + ",".join(repr(float(v)) for v in row) + f",{int(y)}\n")
    return len(scores)
