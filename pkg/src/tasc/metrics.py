"""Evaluation metrics: per-class accuracies, harmonic-mean scores, AUROC,
and private-cluster NMI.

Per-class accuracy over common classes is macro-averaged; a common-class
sample rejected as unknown counts as wrong. The unknown side is the fraction
of private samples actually rejected. H-score is the harmonic mean of the
two; the three-way variant folds in the NMI of K-means clusters over the
private samples.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata
from sklearn.cluster import KMeans
from sklearn.metrics import normalized_mutual_info_score

SCENARIOS = ("OPDA", "ODA", "PDA", "CDA")


@dataclass(frozen=True)
class ScenarioSplit:
    """Category-shift split: counts of common, source-private, and
    target-private classes."""

    n_common: int
    n_source_private: int
    n_target_private: int

    def __post_init__(self):
        if min(self.n_common, self.n_source_private, self.n_target_private) < 0:
            raise ValueError("split counts must be non-negative")
        if self.n_common == 0:
            raise ValueError("at least one common class is required")

    @property
    def scenario(self):
        if self.n_source_private > 0 and self.n_target_private > 0:
            return "OPDA"
        if self.n_target_private > 0:
            return "ODA"
        if self.n_source_private > 0:
            return "PDA"
        return "CDA"

    @property
    def n_source(self):
        return self.n_common + self.n_source_private

    @property
    def n_target(self):
        return self.n_common + self.n_target_private


@dataclass
class EvalReport:
    """All reported quantities in percent; fields not defined for the
    scenario stay None."""

    scenario: str
    a_c: float | None = None
    a_c_no_unk: float | None = None
    a_priv: float | None = None
    h_score: float | None = None
    h3_score: float | None = None
    auroc: float | None = None
    nmi: float | None = None
    overall_acc: float | None = None

    def to_json(self):
        return {k: (None if v is None else float(v) if not isinstance(v, str) else v)
                for k, v in self.__dict__.items()}

    CSV_FIELDS = ("scenario", "a_c", "a_c_no_unk", "a_priv", "h_score",
                  "h3_score", "auroc", "nmi", "overall_acc")

    def to_csv_row(self):
        return [self.__dict__[k] if self.__dict__[k] is not None else ""
                for k in self.CSV_FIELDS]


def _check_percent(name, value):
    if not 0.0 <= value <= 100.0:
        raise ValueError(f"{name} must lie in [0, 100], got {value}")


def h_score(a_common: float, a_private: float) -> float:
    """Harmonic mean of common-class and unknown-class accuracy (percent)."""
    _check_percent("a_common", a_common)
    _check_percent("a_private", a_private)
    if a_common == 0.0 or a_private == 0.0:
        return 0.0
    return 2.0 / (1.0 / a_common + 1.0 / a_private)


def h3_score(a_common: float, a_private: float, nmi: float) -> float:
    """Three-way harmonic mean adding private-cluster NMI (percent)."""
    for name, v in (("a_common", a_common), ("a_private", a_private), ("nmi", nmi)):
        _check_percent(name, v)
    if a_common == 0.0 or a_private == 0.0 or nmi == 0.0:
        return 0.0
    return 3.0 / (1.0 / a_common + 1.0 / a_private + 1.0 / nmi)


def per_class_accuracy(preds, gt_labels, known_mask, n_source_classes: int,
                       common_ids=None):
    """Macro common-class accuracy with and without the unknown mask, plus
    the rejection rate on private samples.

    Returns (a_c, a_c_no_unk, a_priv), each in percent; a_priv is None when
    the ground truth has no private samples. A listed common class with no
    samples is excluded from the macro mean with a warning.
    """
    preds = np.asarray(preds)
    gt = np.asarray(gt_labels)
    mask = np.asarray(known_mask, dtype=bool)
    if not (preds.shape == gt.shape == mask.shape):
        raise ValueError("preds, labels, and mask must have equal shapes")
    if preds.min(initial=0) < 0 or preds.max(initial=-1) >= n_source_classes:
        raise ValueError("predictions must be source class ids")
    if common_ids is None:
        common_ids = sorted(int(c) for c in np.unique(gt) if c < n_source_classes)
    if not common_ids:
        raise ValueError("no common classes present in ground truth")

    recalls, recalls_no_unk = [], []
    for c in common_ids:
        sel = gt == c
        if not sel.any():
            warnings.warn(f"common class {c} has no samples; excluded from a_c")
            continue
        recalls.append(float((mask[sel] & (preds[sel] == c)).mean()))
        recalls_no_unk.append(float((preds[sel] == c).mean()))
    if not recalls:
        raise ValueError("all common classes were empty")
    a_c = 100.0 * float(np.mean(recalls))
    a_c_no_unk = 100.0 * float(np.mean(recalls_no_unk))

    private = gt >= n_source_classes
    a_priv = 100.0 * float((~mask[private]).mean()) if private.any() else None
    return a_c, a_c_no_unk, a_priv


def auroc(scores, is_known) -> float:
    """Rank-based probability that a known sample outscores an unknown one,
    ties counted half; in percent."""
    scores = np.asarray(scores, dtype=np.float64)
    known = np.asarray(is_known, dtype=bool)
    n_k = int(known.sum())
    n_u = int((~known).sum())
    if n_k == 0 or n_u == 0:
        raise ValueError("AUROC needs both known and unknown samples")
    ranks = rankdata(scores)
    u_stat = ranks[known].sum() - n_k * (n_k + 1) / 2.0
    return 100.0 * u_stat / (n_k * n_u)


def nmi_private(embeddings, labels, seed: int):
    """NMI between K-means clusters of the private samples and their labels.

    K equals the number of distinct private labels; k-means++ with 10
    restarts, best inertia. Returns None (metric omitted) with fewer than two
    private classes.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.shape[0] < 2:
        return None
    X = np.asarray(embeddings, dtype=np.float64)
    if X.shape[0] != labels.shape[0]:
        raise ValueError("embeddings and labels must align")
    km = KMeans(n_clusters=classes.shape[0], init="k-means++", n_init=10,
                random_state=int(seed))
    assignment = km.fit_predict(X)
    return 100.0 * float(normalized_mutual_info_score(labels, assignment))


def overall_accuracy(preds, gt_labels, known_mask=None) -> float:
    """Plain accuracy over all target samples (closed/partial scenarios);
    samples rejected as unknown count as wrong when a mask is given."""
    preds = np.asarray(preds)
    gt = np.asarray(gt_labels)
    correct = preds == gt
    if known_mask is not None:
        correct = correct & np.asarray(known_mask, dtype=bool)
    return 100.0 * float(correct.mean())


def evaluate(preds, gt_labels, known_mask, scores, private_embeddings,
             split: ScenarioSplit, seed: int) -> EvalReport:
    """Assemble the full report for one adaptation run.

    `private_embeddings` are the (already adapted) embeddings of the ground
    truth private samples, used only for the NMI metric; pass None to skip.
    """
    gt = np.asarray(gt_labels)
    n_src = split.n_source
    report = EvalReport(scenario=split.scenario)
    if split.scenario in ("PDA", "CDA"):
        report.overall_acc = overall_accuracy(preds, gt, known_mask)

    a_c, a_c_no_unk, a_priv = per_class_accuracy(preds, gt, known_mask, n_src)
    report.a_c, report.a_c_no_unk, report.a_priv = a_c, a_c_no_unk, a_priv
    if a_priv is not None:
        report.h_score = h_score(a_c, a_priv)

    is_known_gt = gt < n_src
    if is_known_gt.any() and (~is_known_gt).any():
        report.auroc = auroc(scores, is_known_gt)

    if private_embeddings is not None and (~is_known_gt).any():
        report.nmi = nmi_private(private_embeddings, gt[~is_known_gt], seed)
        if report.nmi is not None and a_priv is not None:
            report.h3_score = h3_score(a_c, a_priv, report.nmi)
    return report
