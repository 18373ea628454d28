"""Shared math kernels: temperature-softmax prediction over semantic centers,
entropy, and the information-maximization clustering objective.

All reductions accumulate in float64 regardless of input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_TAU = 0.02
DEFAULT_LAMBDA_DIV = 0.6

# floor applied inside log() for cross-entropy only; avoids -inf from
# float underflow at small temperatures
CE_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class PredictionConfig:
    """Softmax temperature and diversity trade-off weight."""

    tau: float = DEFAULT_TAU
    lambda_div: float = DEFAULT_LAMBDA_DIV

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.lambda_div < 0:
            raise ValueError(f"lambda_div must be >= 0, got {self.lambda_div}")


def xlogx(p):
    """Elementwise p*log(p) with the 0*log(0)=0 convention."""
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros_like(p)
    mask = p > 0
    out[mask] = p[mask] * np.log(p[mask])
    return out


def softmax(logits):
    """Row-wise stable softmax (max-subtraction), float64."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict(z, centers, cfg: PredictionConfig):
    """Probability vector of one embedding against a set of semantic centers.

    Softmax of cosine similarities divided by the temperature. `z` must be a
    unit vector and `centers` a non-empty (K, d) array of unit rows, so the
    dot products are the cosine similarities.
    """
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[0] == 0:
        raise ValueError("centers must be a non-empty (K, d) array")
    sims = centers @ np.asarray(z, dtype=np.float64)
    return softmax(sims / cfg.tau)


def predict_batch(Z, centers, cfg: PredictionConfig):
    """Row-wise `predict` for a (n, d) batch of unit embeddings."""
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[0] == 0:
        raise ValueError("centers must be a non-empty (K, d) array")
    sims = np.asarray(Z, dtype=np.float64) @ centers.T
    return softmax(sims / cfg.tau)


def entropy(p):
    """Shannon entropy -sum(p*log(p)) in nats, 0*log(0)=0."""
    return float(-xlogx(p).sum())


def entropy_rows(P):
    """Per-row entropies of a (n, K) probability matrix."""
    return -xlogx(P).sum(axis=-1)


def normalized_entropy(p):
    """Entropy divided by log(K), in [0, 1]; defined as 0 for K == 1."""
    p = np.asarray(p, dtype=np.float64)
    k = p.shape[-1]
    if k <= 1:
        return 0.0
    return entropy(p) / np.log(k)


def normalized_entropy_rows(P):
    """Row-wise normalized entropy; 0 when there is a single column."""
    P = np.asarray(P, dtype=np.float64)
    k = P.shape[-1]
    if k <= 1:
        return np.zeros(P.shape[0])
    return entropy_rows(P) / np.log(k)


def im_loss(preds, cfg: PredictionConfig):
    """Information-maximization clustering loss.

    Mean per-sample entropy minus lambda_div times the entropy of the mean
    prediction: low per-sample entropy demands confident assignments, high
    mean-prediction entropy demands use of all centers.
    """
    P = np.asarray(preds, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] == 0:
        raise ValueError("preds must be a non-empty (n, K) array")
    ent = entropy_rows(P).mean()
    div = entropy(P.mean(axis=0))
    return float(ent - cfg.lambda_div * div)


def cross_entropy(preds, labels):
    """Mean -log p[y] with probabilities floored at 1e-12 before the log."""
    P = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels)
    if P.ndim != 2 or P.shape[0] == 0:
        raise ValueError("preds must be a non-empty (n, K) array")
    if labels.shape[0] != P.shape[0]:
        raise ValueError("labels length must match preds rows")
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= P.shape[1]:
        raise ValueError("labels must lie in [0, K)")
    picked = P[np.arange(P.shape[0]), labels]
    return float(-np.log(np.maximum(picked, CE_PROB_FLOOR)).mean())
