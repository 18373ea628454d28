"""Stage-2 continuous optimization: a square linear adapter on image
embeddings, trained by plain gradient descent on source cross-entropy plus
the information-maximization loss against the searched target centers.

Gradients are analytic (softmax, entropy, and the row normalization of W@z
differentiated by hand) and accumulate in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import CE_PROB_FLOOR, PredictionConfig, softmax
from .store import EmbeddingMatrix, Manifest, load_embeddings, save_embeddings

_NORM_TOL = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    eta0: float = 1e-4
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not self.eta0 > 0:
            raise ValueError("eta0 must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")


@dataclass
class Adapter:
    """d x d linear map applied to image embeddings before re-normalization."""

    W: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float32)
        if self.W.ndim != 2 or self.W.shape[0] != self.W.shape[1]:
            raise ValueError("adapter weight must be square")
        if not np.isfinite(self.W).all():
            raise ValueError("adapter weight has non-finite entries")

    @classmethod
    def identity(cls, dims: int):
        return cls(np.eye(dims, dtype=np.float32))

    @property
    def dims(self):
        return self.W.shape[0]


def forward(adapter: Adapter, Z):
    """Adapted unit embeddings: row-normalize(Z @ W.T)."""
    U = np.asarray(Z, dtype=np.float64) @ adapter.W.astype(np.float64).T
    norms = np.linalg.norm(U, axis=-1, keepdims=True)
    if (norms < _NORM_TOL).any():
        raise ValueError("adapter maps an embedding to (near) zero")
    return U / norms


def _adapt(W, Z):
    U = np.asarray(Z, dtype=np.float64) @ W.T
    norms = np.linalg.norm(U, axis=1)
    if (norms < _NORM_TOL).any():
        raise ValueError("adapter maps an embedding to (near) zero")
    return U / norms[:, None], norms


def _masked_log(P):
    # log with zeros passed through; callers only use it multiplied by P
    return np.log(np.where(P > 0, P, 1.0))


def _ce_terms(A, centers, labels, tau):
    """Cross-entropy value and its gradient w.r.t. the logits, per sample."""
    n = A.shape[0]
    P = softmax(A @ centers.T / tau)
    picked = P[np.arange(n), labels]
    floored = picked < CE_PROB_FLOOR
    value = float(-np.log(np.maximum(picked, CE_PROB_FLOOR)).mean())
    G = P.copy()
    G[np.arange(n), labels] -= 1.0
    # where the floor clips the log, the loss is locally flat in the logits
    G[floored] = 0.0
    return value, G / n


def _im_terms(A, centers, tau, lambda_div):
    """IM loss value and gradient w.r.t. the logits, per sample.

    Per-sample entropy pushes assignments to sharpen; the mean-prediction
    entropy (computed over this batch) pushes them to spread across centers.
    """
    n = A.shape[0]
    P = softmax(A @ centers.T / tau)
    logP = _masked_log(P)
    H_rows = -(P * logP).sum(axis=1)
    p_bar = P.mean(axis=0)
    log_pbar = _masked_log(p_bar)
    value = float(H_rows.mean() + lambda_div * (p_bar * log_pbar).sum())
    g_ent = -P * (logP + H_rows[:, None])
    s = (P * log_pbar[None, :]).sum(axis=1)
    g_div = P * (log_pbar[None, :] - s[:, None])
    return value, (g_ent + lambda_div * g_div) / n


def _backprop_to_weight(G_logits, centers, A, norms, Z, tau):
    """Chain a per-sample logit gradient back to the adapter weight."""
    V = G_logits @ centers / tau
    proj = (V * A).sum(axis=1, keepdims=True)
    dU = (V - proj * A) / norms[:, None]
    return dU.T @ np.asarray(Z, dtype=np.float64)


def _loss_and_grad(W, src_Z, src_labels, tgt_Z, src_centers, tgt_centers,
                   cfg: PredictionConfig):
    src_centers = np.asarray(src_centers, dtype=np.float64)
    tgt_centers = np.asarray(tgt_centers, dtype=np.float64)
    A_s, norms_s = _adapt(W, src_Z)
    A_t, norms_t = _adapt(W, tgt_Z)
    ce, g_ce = _ce_terms(A_s, src_centers, np.asarray(src_labels), cfg.tau)
    im, g_im = _im_terms(A_t, tgt_centers, cfg.tau, cfg.lambda_div)
    grad = (_backprop_to_weight(g_ce, src_centers, A_s, norms_s, src_Z, cfg.tau)
            + _backprop_to_weight(g_im, tgt_centers, A_t, norms_t, tgt_Z, cfg.tau))
    return ce + im, grad


def _check_batches(src_Z, src_labels, tgt_Z, n_src_centers):
    src_Z = np.asarray(src_Z, dtype=np.float64)
    tgt_Z = np.asarray(tgt_Z, dtype=np.float64)
    labels = np.asarray(src_labels)
    if src_Z.shape[0] == 0:
        raise ValueError("source batch is empty")
    if tgt_Z.shape[0] == 0:
        raise ValueError("target batch is empty")
    if labels.shape[0] != src_Z.shape[0]:
        raise ValueError("labels length != source batch size")
    if labels.min() < 0 or labels.max() >= n_src_centers:
        raise ValueError("source label out of range")
    return src_Z, labels, tgt_Z


def loss_all(adapter: Adapter, src_Z, src_labels, tgt_Z, src_centers,
             tgt_centers, cfg: PredictionConfig):
    """Source cross-entropy against the class-name centers plus target IM
    loss against the searched centers, both through the adapter."""
    src_Z, labels, tgt_Z = _check_batches(
        src_Z, src_labels, tgt_Z, np.asarray(src_centers).shape[0])
    value, _ = _loss_and_grad(adapter.W.astype(np.float64), src_Z, labels,
                              tgt_Z, src_centers, tgt_centers, cfg)
    return value


def grad_loss_all(adapter: Adapter, src_Z, src_labels, tgt_Z, src_centers,
                  tgt_centers, cfg: PredictionConfig):
    """Exact gradient of loss_all with respect to the adapter weight."""
    src_Z, labels, tgt_Z = _check_batches(
        src_Z, src_labels, tgt_Z, np.asarray(src_centers).shape[0])
    _, grad = _loss_and_grad(adapter.W.astype(np.float64), src_Z, labels,
                             tgt_Z, src_centers, tgt_centers, cfg)
    return grad


def train(adapter: Adapter, src_Z, src_labels, tgt_Z, src_centers, tgt_centers,
          train_cfg: TrainConfig, pred_cfg: PredictionConfig):
    """Mini-batch gradient descent with the polynomial-decay schedule
    eta = eta0 * (1 + 10*p)^-0.75, p = step/total_steps.

    Epochs run over the target set; each step pairs one target batch with one
    source batch from an independently shuffled cycle. Returns the trained
    adapter and the per-epoch mean loss.
    """
    src_Z, labels, tgt_Z = _check_batches(
        src_Z, src_labels, tgt_Z, np.asarray(src_centers).shape[0])
    if train_cfg.epochs == 0:
        return Adapter(adapter.W.copy()), []

    rng = np.random.default_rng(train_cfg.seed)
    W = adapter.W.astype(np.float64).copy()
    n_t, n_s = tgt_Z.shape[0], src_Z.shape[0]
    tgt_bs = min(train_cfg.batch_size, n_t)
    src_bs = min(train_cfg.batch_size, n_s)
    steps_per_epoch = math.ceil(n_t / tgt_bs)
    total_steps = train_cfg.epochs * steps_per_epoch

    src_order = rng.permutation(n_s)
    src_pos = 0
    curve = []
    step = 0
    for _ in range(train_cfg.epochs):
        perm = rng.permutation(n_t)
        epoch_losses = []
        for b in range(steps_per_epoch):
            t_idx = perm[b * tgt_bs:(b + 1) * tgt_bs]
            if src_pos + src_bs > n_s:
                src_order = rng.permutation(n_s)
                src_pos = 0
            s_idx = src_order[src_pos:src_pos + src_bs]
            src_pos += src_bs

            loss, grad = _loss_and_grad(W, src_Z[s_idx], labels[s_idx],
                                        tgt_Z[t_idx], src_centers, tgt_centers,
                                        pred_cfg)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss {loss} at step {step}/{total_steps}")
            p = step / total_steps
            eta = train_cfg.eta0 * (1.0 + 10.0 * p) ** -0.75
            W -= eta * grad
            epoch_losses.append(loss)
            step += 1
        curve.append(float(np.mean(epoch_losses)))
    return Adapter(W.astype(np.float32)), curve


def save_adapter(path, adapter: Adapter):
    """Checkpoint the adapter as a d x d embedding file with role 'adapter'."""
    matrix = EmbeddingMatrix(adapter.W, normalized=False)
    save_embeddings(path, matrix, Manifest(role="adapter", names=[],
                                           labels=None, count=adapter.dims))


def load_adapter(path) -> Adapter:
    matrix, manifest = load_embeddings(path)
    if manifest.role != "adapter":
        raise ValueError(f"expected role 'adapter', got {manifest.role!r}")
    return Adapter(matrix.data)
