"""Classification and ranking metrics.

Implemented directly from the definitions; the test suite cross-checks
every function against independent brute-force oracles.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError


def micro_macro_f1(predictions, golds, class_set) -> tuple[float, float]:
    """Micro- and macro-averaged F1 for single-label multiclass predictions.

    Micro counts global TP/FP/FN (equals accuracy when every prediction is
    in the class set). Macro averages per-class F1 over the declared class
    set, so classes absent from both golds and predictions contribute zero.
    A prediction outside the class set counts as a false negative for the
    gold class only (scored wrong, assigned to no class).
    """
    if len(predictions) != len(golds):
        raise DataError("predictions and golds length mismatch")
    if not predictions:
        raise DataError("empty input")
    classes = list(class_set)
    if not classes:
        raise DataError("empty class set")
    for g in golds:
        if g not in classes:
            raise DataError(f"gold label {g!r} not in class set")
    tp = {c: 0 for c in classes}
    fp = {c: 0 for c in classes}
    fn = {c: 0 for c in classes}
    for p, g in zip(predictions, golds):
        if p == g:
            tp[g] += 1
        else:
            fn[g] += 1
            if p in tp:
                fp[p] += 1
    tp_all = sum(tp.values())
    fp_all = sum(fp.values())
    fn_all = sum(fn.values())
    micro = _f1(tp_all, fp_all, fn_all)
    macro = sum(_f1(tp[c], fp[c], fn[c]) for c in classes) / len(classes)
    return micro, macro


def _f1(tp, fp, fn) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def per_class_report(predictions, golds, class_set) -> dict[str, dict[str, float]]:
    """Per-class precision/recall/F1 and support counts."""
    report = {}
    for c in class_set:
        tp = sum(1 for p, g in zip(predictions, golds) if p == c and g == c)
        fp = sum(1 for p, g in zip(predictions, golds) if p == c and g != c)
        fn = sum(1 for p, g in zip(predictions, golds) if p != c and g == c)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        report[c] = {
            "precision": precision,
            "recall": recall,
            "f1": _f1(tp, fp, fn),
            "support": tp + fn,
        }
    return report


def auc_ap(scores, labels) -> tuple[float, float]:
    """ROC AUC (rank statistic with tie-averaging) and average precision.

    labels are binary (0/1); needs at least one positive and one negative.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DataError("scores and labels must be equal-length 1-D sequences")
    if not set(np.unique(labels)) <= {0, 1}:
        raise DataError("labels must be binary")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("need at least one positive and one negative label")

    ranks = _average_ranks(scores)
    auc = (ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    # AP by precision-recall step integration, processing score ties as blocks.
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    ap = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            j += 1
        tp += int(sorted_labels[i:j].sum())
        fp += (j - i) - int(sorted_labels[i:j].sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return float(auc), float(ap)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties receiving the average of their positions."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j < len(x) and x[order[j]] == x[order[i]]:
            j += 1
        ranks[order[i:j]] = (i + j + 1) / 2.0
        i = j
    return ranks
