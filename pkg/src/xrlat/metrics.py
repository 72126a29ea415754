"""Multi-label evaluation: macro/micro AUC, macro/micro F1, and precision@k.

Macro metrics average per-code values (AUC skips codes whose test column is
single-class and reports the skip count; F1 counts such codes as 0). Micro
metrics pool true/false positives and negatives over every (instance, code)
cell. P@k averages the precision of each document's k highest-scoring codes,
ties broken toward lower code indices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .util import DataError


@dataclass
class PredictionSet:
    scores: np.ndarray  # (N, L) float
    gold: np.ndarray  # (N, L) binary
    decision_threshold: float = 0.5

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.gold = np.asarray(self.gold)
        if self.scores.shape != self.gold.shape:
            raise DataError(
                f"scores {self.scores.shape} and gold {self.gold.shape} shapes differ"
            )
        if not np.all(np.isfinite(self.scores)):
            raise DataError("scores must be finite")


def auc(scores, labels) -> float:
    """Rank-based (Mann-Whitney) AUC with half credit for ties.

    Raises DataError when labels are single-class, where AUC is undefined.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC is undefined for single-class labels")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    rank_sum = ranks[labels].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _confusion(pred: PredictionSet):
    yhat = pred.scores >= pred.decision_threshold
    y = pred.gold.astype(bool)
    tp = (yhat & y).sum(axis=0).astype(np.int64)
    fp = (yhat & ~y).sum(axis=0).astype(np.int64)
    fn = (~yhat & y).sum(axis=0).astype(np.int64)
    return tp, fp, fn


def micro_f1(pred: PredictionSet):
    """(F1, precision, recall) pooled over every (instance, code) cell.

    F1 comes straight from the integer counts (2TP / (2TP + FP + FN)) so the
    value is the exactly-rounded rational, not a chain of float divisions.
    """
    tp, fp, fn = (int(x.sum()) for x in _confusion(pred))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
    return f1, precision, recall


def macro_f1(pred: PredictionSet) -> float:
    """Unweighted mean of per-code F1 over all codes; empty codes count as 0."""
    tp, fp, fn = _confusion(pred)
    denom = 2 * tp + fp + fn
    per_code = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 0.0)
    return float(per_code.mean())


def macro_micro_auc(pred: PredictionSet):
    """(macro AUC, micro AUC, skipped-code count).

    Macro averages per-code AUC over codes with both classes present; micro is
    the AUC of all N*L cells flattened. Raises if nothing is evaluable.
    """
    n, l = pred.scores.shape
    values = []
    skipped = 0
    for j in range(l):
        try:
            values.append(auc(pred.scores[:, j], pred.gold[:, j]))
        except DataError:
            skipped += 1
    if not values:
        raise DataError("macro AUC: no code has both classes present")
    micro = auc(pred.scores.reshape(-1), pred.gold.reshape(-1))
    return float(np.mean(values)), micro, skipped


def precision_at_k(pred: PredictionSet, k: int) -> float:
    """Mean over instances of (gold hits among the k top-scored codes) / k."""
    n, l = pred.scores.shape
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if k > l:
        raise DataError(f"k={k} exceeds the number of codes {l}")
    hits = 0
    idx = np.arange(l)
    for i in range(n):
        top = np.lexsort((idx, -pred.scores[i]))[:k]
        hits += int(pred.gold[i, top].sum())
    # integer accumulation, single division: the exact rational value rounded once
    return hits / (n * k) if n else 0.0


@dataclass
class MetricsReport:
    macro_auc: float
    micro_auc: float
    macro_f1: float
    micro_f1: float
    p5: float
    p8: float
    p15: float
    macro_auc_skipped: int

    def to_text(self) -> str:
        lines = [
            f"macro_auc\t{self.macro_auc:.4f}",
            f"micro_auc\t{self.micro_auc:.4f}",
            f"macro_f1\t{self.macro_f1:.4f}",
            f"micro_f1\t{self.micro_f1:.4f}",
            f"p@5\t{self.p5:.4f}",
            f"p@8\t{self.p8:.4f}",
            f"p@15\t{self.p15:.4f}",
            f"macro_auc_skipped\t{self.macro_auc_skipped}",
        ]
        return "\n".join(lines) + "\n"


def compute_metrics(scores, gold, decision_threshold: float = 0.5) -> MetricsReport:
    pred = PredictionSet(scores, gold, decision_threshold)
    mac_auc, mic_auc, skipped = macro_micro_auc(pred)
    mic_f1, _, _ = micro_f1(pred)
    return MetricsReport(
        macro_auc=mac_auc,
        micro_auc=mic_auc,
        macro_f1=macro_f1(pred),
        micro_f1=mic_f1,
        p5=precision_at_k(pred, 5),
        p8=precision_at_k(pred, 8),
        p15=precision_at_k(pred, 15),
        macro_auc_skipped=skipped,
    )
