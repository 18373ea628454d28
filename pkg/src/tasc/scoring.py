"""Known-ness scoring for open-set detection.

Two entropy vectors measure how sharply each source class name classifies
against the searched target centers and vice versa; low entropy marks a
center as common-class. The UniMS score of a target sample is its
entropy-weighted best similarity to source centers minus its
entropy-weighted best similarity to target centers, so samples near a
common-class name score high and samples near a discovered private-class
noun score low. Unweighted and single-sided variants of the score are kept
for ablations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import normalized_entropy_rows, softmax

VARIANTS = ("unims", "ms-s", "ms-t", "ms-s-weighted", "ms-t-weighted")


@dataclass
class EntropyVectors:
    """ent_s[i]: source name i vs. target centers; ent_t[j]: target center j
    vs. source names. Both normalized into [0, 1]."""

    ent_s: np.ndarray
    ent_t: np.ndarray


@dataclass
class ScoreSet:
    scores: np.ndarray
    variant: str


def entropy_vectors(src_centers, tgt_centers, tau: float) -> EntropyVectors:
    """Cross-classification entropies between the two center sets."""
    src = np.asarray(src_centers, dtype=np.float64)
    tgt = np.asarray(tgt_centers, dtype=np.float64)
    if src.ndim != 2 or src.shape[0] == 0 or tgt.ndim != 2 or tgt.shape[0] == 0:
        raise ValueError("both center sets must be non-empty (K, d) arrays")
    if src.shape[1] != tgt.shape[1]:
        raise ValueError("center sets have mismatched dims")
    sims = src @ tgt.T
    ent_s = normalized_entropy_rows(softmax(sims / tau))
    ent_t = normalized_entropy_rows(softmax(sims.T / tau))
    return EntropyVectors(ent_s=ent_s, ent_t=ent_t)


def _source_term(sims_s, ent_s):
    return (sims_s * (1.0 - ent_s)[None, :]).max(axis=1)


def _target_term(sims_t, ent_t):
    return -(sims_t * ent_t[None, :]).max(axis=1)


def score(Z, src_centers, tgt_centers, ev: EntropyVectors,
          variant: str = "unims") -> ScoreSet:
    """Per-sample score under the chosen variant; higher means more likely
    a known-class sample."""
    variant = variant.lower()
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    Z = np.asarray(Z, dtype=np.float64)
    src = np.asarray(src_centers, dtype=np.float64)
    tgt = np.asarray(tgt_centers, dtype=np.float64)
    if Z.shape[1] != src.shape[1] or Z.shape[1] != tgt.shape[1]:
        raise ValueError("embedding dims do not match center dims")
    if ev.ent_s.shape[0] != src.shape[0] or ev.ent_t.shape[0] != tgt.shape[0]:
        raise ValueError("entropy vector lengths do not match center counts")

    sims_s = Z @ src.T
    sims_t = Z @ tgt.T
    if variant == "ms-s":
        values = sims_s.max(axis=1)
    elif variant == "ms-t":
        values = -sims_t.max(axis=1)
    elif variant == "ms-s-weighted":
        values = _source_term(sims_s, ev.ent_s)
    elif variant == "ms-t-weighted":
        values = _target_term(sims_t, ev.ent_t)
    else:
        values = _source_term(sims_s, ev.ent_s) + _target_term(sims_t, ev.ent_t)
    return ScoreSet(scores=values, variant=variant)


def write_scores_csv(path, score_set: ScoreSet):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_index", "score", "variant"])
        for i, s in enumerate(score_set.scores):
            writer.writerow([i, repr(float(s)), score_set.variant])


def read_scores_csv(path) -> ScoreSet:
    with open(path, "r", newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"{path}: empty score file")
    scores = np.array([float(r["score"]) for r in rows])
    return ScoreSet(scores=scores, variant=rows[0]["variant"])
