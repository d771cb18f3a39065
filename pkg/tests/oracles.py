"""Independent brute-force oracles used by the metric tests and the
acceptance suite. These deliberately share no code with the library
implementations they check."""

import numpy as np


def auroc_pair_counting(scores, is_outlier):
    """O(n^2) oracle: (#correctly ordered pairs + 0.5 * #ties) / (pos * neg)."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(is_outlier, dtype=bool)
    sp = scores[pos][:, None]
    sn = scores[~pos][None, :]
    wins = np.sum(sp > sn) + 0.5 * np.sum(sp == sn)
    return wins / (sp.shape[0] * sn.shape[1])


def aupr_exhaustive_sweep(scores, is_outlier):
    """Oracle: recompute precision/recall from scratch at every distinct
    threshold, descending, and accumulate the step-interpolated area."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(is_outlier, dtype=bool)
    n_pos = int(pos.sum())
    ap = 0.0
    prev_recall = 0.0
    for tau in sorted(set(scores.tolist()), reverse=True):
        predicted = scores >= tau
        tp = float(np.sum(predicted & pos))
        fp = float(np.sum(predicted & ~pos))
        precision = tp / (tp + fp)
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap
