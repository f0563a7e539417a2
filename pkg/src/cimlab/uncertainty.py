"""Uncertainty scores, calibration error and OOD-detection metrics (natural log throughout)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from scipy.stats import rankdata

from .bayesian import PredictiveResult

IN_DISTRIBUTION = "in"
OOD = "ood"


def _entropy(p: np.ndarray, axis: int = -1) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=axis)


def predictive_entropy(r: PredictiveResult) -> np.ndarray:
    """Entropy of the MC-averaged distribution, one value per input."""
    return _entropy(r.mean_probs)


def mutual_information(r: PredictiveResult) -> np.ndarray:
    """Predictive entropy minus mean per-sample entropy, clipped at 0."""
    if r.T < 2:
        raise ValueError("mutual information needs T >= 2 samples")
    expected = _entropy(r.samples).mean(axis=0)
    return np.maximum(predictive_entropy(r) - expected, 0.0)


def ece(probs: np.ndarray, labels: np.ndarray, bins: int = 15) -> float:
    """Equal-width confidence-binned expected calibration error."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    conf = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    # bin k holds (k/bins, (k+1)/bins]; zero confidence falls in bin 0
    idx = np.clip(np.ceil(conf * bins).astype(int) - 1, 0, bins - 1)
    total = 0.0
    for k in range(bins):
        sel = idx == k
        if sel.any():
            total += sel.sum() * abs(correct[sel].mean() - conf[sel].mean())
    return float(total / len(conf))


@dataclass
class ScoredSet:
    scores: np.ndarray
    origin: str = IN_DISTRIBUTION
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if self.labels is not None and len(self.labels) != len(self.scores):
            raise ValueError("labels and scores differ in length")


def auroc(in_scores: np.ndarray, ood_scores: np.ndarray) -> float:
    """Probability that a random OOD score beats a random in-distribution score (ties count half)."""
    a = np.asarray(in_scores, dtype=np.float64)
    b = np.asarray(ood_scores, dtype=np.float64)
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[len(a):].sum() - len(b) * (len(b) + 1) / 2.0
    return float(u / (len(a) * len(b)))


def ood_eval(in_set: ScoredSet, ood_set: ScoredSet) -> Dict[str, float]:
    """AUROC plus detection rate at the 95th in-distribution percentile (5% FPR)."""
    if len(in_set.scores) == 0 or len(ood_set.scores) == 0:
        raise ValueError("both score sets must be non-empty")
    # an observed score, so the decision is invariant under monotone rescaling
    threshold = float(np.percentile(in_set.scores, 95, method="higher"))
    return {
        "auroc": auroc(in_set.scores, ood_set.scores),
        "detection_rate_at_5pct_fpr": float((ood_set.scores > threshold).mean()),
        "threshold": threshold,
    }
