"""Ranking and scoring statistics.

NDCG uses graded relevance that falls linearly from 1.0 at the ideal top
position to 0.5 at the bottom.  Correlations are computed on raw scores (no
logistic remapping before PLCC).
"""

from __future__ import annotations

import numpy as np
from scipy import stats

from .errors import DataError


class UndefinedCorrelation(DataError):
    pass


def relevance(position, k: int):
    """Graded relevance of the item whose ideal position is ``position``
    (1-based) in a list of ``k``."""
    if k < 2:
        raise DataError("relevance needs k >= 2")
    position = np.asarray(position, dtype=np.float64)
    return 0.5 + 0.5 * (k - position) / (k - 1)


def dcg(ideal_positions) -> float:
    """DCG of a predicted ranking given, per predicted slot, the 1-based ideal
    position of the item placed there."""
    ideal_positions = np.asarray(ideal_positions)
    k = len(ideal_positions)
    slots = np.arange(1, k + 1)
    return float((relevance(ideal_positions, k) / np.log2(slots + 1)).sum())


def ndcg(predicted, ideal=None) -> float:
    """NDCG of ``predicted`` (item ids, best first) against ``ideal`` (item ids
    in ground-truth order; defaults to ``0..k-1``)."""
    predicted = list(predicted)
    k = len(predicted)
    if k < 2:
        raise DataError("NDCG needs a list of at least 2 items")
    if ideal is None:
        ideal = list(range(k))
    if sorted(predicted) != sorted(ideal) or len(set(predicted)) != k:
        raise DataError("predicted ranking is not a permutation of the ideal ranking")
    position = {item: i + 1 for i, item in enumerate(ideal)}
    return dcg([position[item] for item in predicted]) / dcg(np.arange(1, k + 1))


def ranking_from_scores(scores, higher_is_better: bool = True):
    """Item ids sorted best first; equal scores keep ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    key = -scores if higher_is_better else scores
    return [int(i) for i in np.lexsort((np.arange(len(scores)), key))]


def _pairs(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise DataError("score sequences must be 1-D and of equal length")
    if len(pred) < 2:
        raise DataError("need at least 2 score pairs")
    return pred, truth


def _check_variance(pred, truth):
    if np.ptp(pred) == 0 or np.ptp(truth) == 0:
        raise UndefinedCorrelation("correlation undefined for a constant sequence")


def rmse(pred, truth) -> float:
    pred, truth = _pairs(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def plcc(pred, truth) -> float:
    pred, truth = _pairs(pred, truth)
    _check_variance(pred, truth)
    return float(stats.pearsonr(pred, truth)[0])


def srcc(pred, truth) -> float:
    pred, truth = _pairs(pred, truth)
    _check_variance(pred, truth)
    return float(stats.spearmanr(pred, truth)[0])


def krcc(pred, truth) -> float:
    """Kendall tau-b."""
    pred, truth = _pairs(pred, truth)
    _check_variance(pred, truth)
    return float(stats.kendalltau(pred, truth, variant="b")[0])


def score_report(pred, truth) -> dict:
    return {"RMSE": rmse(pred, truth), "PLCC": plcc(pred, truth),
            "KRCC": krcc(pred, truth), "SRCC": srcc(pred, truth)}
