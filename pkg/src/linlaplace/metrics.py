"""Evaluation metrics for predictive distributions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.special import xlogy
from scipy.stats import rankdata

FloatArray = NDArray[np.float64]

__all__ = [
    "EvalReport",
    "evaluate",
    "predictive_entropy",
    "ood_auc",
    "variance_decomposition",
]

NUM_ECE_BINS = 10


@dataclass
class EvalReport:
    nll: float
    accuracy: float
    ece: float
    entropies: FloatArray  # per-point predictive entropy
    num_points: int

    def to_dict(self) -> dict:
        return {
            "nll": self.nll,
            "accuracy": self.accuracy,
            "ece": self.ece,
            "num_points": self.num_points,
        }


def evaluate(probs: FloatArray, labels) -> EvalReport:
    """Classification metrics from predictive probabilities.

    nll = -mean log p(y_n); accuracy by argmax with ties to the lowest
    class index; ECE over 10 equal-width max-probability bins, right-open
    except the last, empty bins skipped.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n, c = probs.shape
    if labels.shape[0] != n:
        raise ValueError("labels length does not match probs rows")
    row_sums = probs.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > 1e-9:
        worst = int(np.abs(row_sums - 1.0).argmax())
        raise ValueError(f"probability row {worst} sums to {row_sums[worst]!r}, not 1")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("label outside [0, C)")
    p_true = probs[np.arange(n), labels]
    nll = float(-np.log(np.clip(p_true, 1e-300, None)).mean())
    predictions = probs.argmax(axis=1)
    accuracy = float((predictions == labels).mean())
    conf = probs.max(axis=1)
    correct = predictions == labels
    bin_idx = np.minimum((conf * NUM_ECE_BINS).astype(np.int64), NUM_ECE_BINS - 1)
    ece = 0.0
    for b in range(NUM_ECE_BINS):
        members = bin_idx == b
        nb = int(members.sum())
        if nb == 0:
            continue
        ece += (nb / n) * abs(correct[members].mean() - conf[members].mean())
    return EvalReport(nll, accuracy, float(ece), predictive_entropy(probs), n)


def predictive_entropy(probs: FloatArray) -> FloatArray:
    """Shannon entropy -sum_c p_c log p_c per row (0 log 0 = 0)."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    return -xlogy(probs, probs).sum(axis=1)


def ood_auc(entropies_id, entropies_ood) -> float:
    """P(random OOD entropy > random ID entropy), ties counted one half.

    Exact Mann-Whitney statistic via average ranks.
    """
    e_id = np.asarray(entropies_id, dtype=np.float64).ravel()
    e_ood = np.asarray(entropies_ood, dtype=np.float64).ravel()
    if e_id.size == 0 or e_ood.size == 0:
        raise ValueError("both entropy sets must be nonempty")
    ranks = rankdata(np.concatenate([e_ood, e_id]))
    n_ood = e_ood.size
    u = ranks[:n_ood].sum() - n_ood * (n_ood + 1) / 2.0
    return float(u / (n_ood * e_id.size))


def variance_decomposition(p_samples) -> tuple[FloatArray, FloatArray, FloatArray]:
    """Split Bernoulli predictive variance into aleatoric and epistemic parts.

    For probability draws p_s: aleatoric = mean p_s(1-p_s), epistemic =
    mean (p_s - pbar)^2, total = pbar(1 - pbar); the identity total =
    aleatoric + epistemic is exact. Reduces over axis 0; scalar outputs for
    1-d input.
    """
    p = np.asarray(p_samples, dtype=np.float64)
    if p.shape[0] < 2:
        raise ValueError("need at least 2 probability samples")
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("probability samples must lie in [0, 1]")
    pbar = p.mean(axis=0)
    aleatoric = (p * (1.0 - p)).mean(axis=0)
    epistemic = ((p - pbar) ** 2).mean(axis=0)
    total = pbar * (1.0 - pbar)
    if p.ndim == 1:
        return float(aleatoric), float(epistemic), float(total)
    return aleatoric, epistemic, total
