"""Synthetic adaptation instances with known ground truth.

A noun vocabulary of well-separated unit vectors plays the role of the text
embedding space; class anchors are vocabulary entries; image embeddings are
angular perturbations of their anchors. The target domain additionally gets
a rotation in a random 2-plane plus isotropic noise. Defaults use CLIP-like
dimensionality (512): the protected-source entropy rule discriminates
through the concentration of non-matching similarities, which scales as
1/sqrt(dims).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import ScenarioSplit
from .store import EmbeddingMatrix, Manifest, save_embeddings

ROLE_ORDER = ("source_images", "target_images", "source_classnames", "noun_vocab")

_MAX_DRAWS_PER_VECTOR = 1000


class GenerationError(Exception):
    """Vocabulary rejection sampling could not satisfy the similarity cap."""


@dataclass(frozen=True)
class SynthConfig:
    split: ScenarioSplit = field(
        default_factory=lambda: ScenarioSplit(10, 5, 15))
    dims: int = 512
    vocab_size: int = 400
    samples_per_class: int = 30
    cluster_spread: float = 0.05
    shift_angle: float = 0.2
    shift_noise: float = 0.02
    similarity_cap: float = 0.5
    seed: int = 0

    def __post_init__(self):
        n_classes = (self.split.n_common + self.split.n_source_private
                     + self.split.n_target_private)
        if n_classes > self.vocab_size:
            raise ValueError("more classes than vocabulary entries")
        if self.cluster_spread < 0 or self.shift_noise < 0:
            raise ValueError("noise scales must be non-negative")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if not 0 < self.similarity_cap <= 1:
            raise ValueError("similarity_cap must lie in (0, 1]")


@dataclass
class SynthResult:
    """Generated bundle keyed by role, plus the ground-truth anchor map."""

    bundle: dict
    anchor_indices: np.ndarray
    split: ScenarioSplit


def _unit(v):
    return v / np.linalg.norm(v)


def _sample_vocabulary(rng, n, dims, cap):
    vecs = np.empty((n, dims), dtype=np.float64)
    count = 0
    budget = n * _MAX_DRAWS_PER_VECTOR
    while count < n:
        if budget == 0:
            raise GenerationError(
                f"could not place {n} vectors under similarity cap {cap}")
        budget -= 1
        v = _unit(rng.standard_normal(dims))
        if count == 0 or (vecs[:count] @ v).max() <= cap:
            vecs[count] = v
            count += 1
    return vecs


def _cluster(rng, anchor, n, spread, dims):
    if spread == 0.0:
        return np.tile(anchor, (n, 1))
    pts = anchor[None, :] + spread * rng.standard_normal((n, dims))
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def _plane_rotation(rng, X, angle, dims):
    e1 = _unit(rng.standard_normal(dims))
    e2 = rng.standard_normal(dims)
    e2 = _unit(e2 - (e2 @ e1) * e1)
    c1 = X @ e1
    c2 = X @ e2
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    return (X + (cos_a - 1.0) * (np.outer(c1, e1) + np.outer(c2, e2))
            + sin_a * (np.outer(c1, e2) - np.outer(c2, e1)))


def generate(cfg: SynthConfig) -> SynthResult:
    """Build the four embedding matrices and their manifests.

    Source class ids: common classes first, then source-private. Target
    labels reuse the common ids and place target-private classes at ids
    >= |source classes|, for evaluation only.
    """
    rng = np.random.default_rng(cfg.seed)
    split = cfg.split
    n_common, n_sp, n_tp = (split.n_common, split.n_source_private,
                            split.n_target_private)
    n_src_classes = n_common + n_sp
    n_classes = n_src_classes + n_tp

    vocab = _sample_vocabulary(rng, cfg.vocab_size, cfg.dims, cfg.similarity_cap)
    anchor_idx = rng.choice(cfg.vocab_size, size=n_classes, replace=False)
    anchors = vocab[anchor_idx]

    src_rows, src_labels = [], []
    for cls in range(n_src_classes):
        src_rows.append(_cluster(rng, anchors[cls], cfg.samples_per_class,
                                 cfg.cluster_spread, cfg.dims))
        src_labels.extend([cls] * cfg.samples_per_class)
    source = np.vstack(src_rows)

    tgt_class_ids = list(range(n_common)) + list(
        range(n_src_classes, n_src_classes + n_tp))
    tgt_anchor_rows = list(range(n_common)) + list(
        range(n_src_classes, n_classes))
    tgt_rows, tgt_labels = [], []
    for cls_id, anchor_row in zip(tgt_class_ids, tgt_anchor_rows):
        tgt_rows.append(_cluster(rng, anchors[anchor_row], cfg.samples_per_class,
                                 cfg.cluster_spread, cfg.dims))
        tgt_labels.extend([cls_id] * cfg.samples_per_class)
    target = np.vstack(tgt_rows)
    if cfg.shift_angle != 0.0:
        target = _plane_rotation(rng, target, cfg.shift_angle, cfg.dims)
    if cfg.shift_noise != 0.0:
        target = target + cfg.shift_noise * rng.standard_normal(target.shape)
    if cfg.shift_angle != 0.0 or cfg.shift_noise != 0.0:
        target = target / np.linalg.norm(target, axis=1, keepdims=True)

    noun_names = [f"noun_{i:04d}" for i in range(cfg.vocab_size)]
    class_names = [noun_names[anchor_idx[c]] for c in range(n_src_classes)]

    bundle = {
        "source_images": (
            EmbeddingMatrix(source.astype(np.float32)),
            Manifest(role="source_images", names=[], labels=src_labels,
                     count=source.shape[0])),
        "target_images": (
            EmbeddingMatrix(target.astype(np.float32)),
            Manifest(role="target_images", names=[], labels=tgt_labels,
                     count=target.shape[0])),
        "source_classnames": (
            EmbeddingMatrix(anchors[:n_src_classes].astype(np.float32)),
            Manifest(role="source_classnames", names=class_names,
                     labels=list(range(n_src_classes)), count=n_src_classes)),
        "noun_vocab": (
            EmbeddingMatrix(vocab.astype(np.float32)),
            Manifest(role="noun_vocab", names=noun_names, labels=None,
                     count=cfg.vocab_size)),
    }
    return SynthResult(bundle=bundle, anchor_indices=anchor_idx, split=split)


def write_bundle(bundle: dict, outdir):
    """Write the four EMBX files with role-named basenames."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for role in ROLE_ORDER:
        matrix, manifest = bundle[role]
        path = outdir / f"{role}.embx"
        save_embeddings(path, matrix, manifest)
        paths[role] = path
    return paths
