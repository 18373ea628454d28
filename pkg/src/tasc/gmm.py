"""Two-component Gaussian mixture over known-ness scores and the decision
threshold for unknown rejection.

The mixture weights are not estimated: they are fixed to the class
proportions reported by the search stage, which steers the EM means and
variances under imbalanced category shift. For the decision itself the
weights are reset to uniform and the threshold is the intersection point of
the two component densities, which minimizes the balanced misclassification
error of known vs. unknown.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

SIGMA_FLOOR = 1e-4
MIN_SCORES = 10
WEIGHT_CLAMP = 0.01

MODE_INTERSECTION = "intersection"
MODE_MIDPOINT = "midpoint-fallback"
MODE_DISABLED = "disabled"          # no private classes estimated: all known
MODE_ALL_UNKNOWN = "all-unknown"    # no common classes estimated


@dataclass
class GmmParams:
    p_k: float
    p_u: float
    mu_k: float
    mu_u: float
    sigma_k: float
    sigma_u: float


@dataclass
class Threshold:
    gamma: float
    mode: str


@dataclass
class ThresholdReport:
    weights: tuple
    params: GmmParams | None
    threshold: Threshold
    loglik_trace: list = field(default_factory=list)


def _log_density(x, mu, sigma):
    return -0.5 * ((x - mu) / sigma) ** 2 - math.log(sigma) - 0.5 * math.log(2 * math.pi)


def fit_gmm(scores, weights, max_iter: int = 500, tol: float = 1e-8):
    """EM with fixed mixture weights; only means and sigmas are updated.

    Returns (params, loglik_trace). A zero weight on either side is the
    degenerate no-mixture case and yields (None, []) as the disabled-threshold
    signal. The component with the larger fitted mean is "known"; tuples are
    swapped if EM ends with the order reversed.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.shape[0] < MIN_SCORES:
        raise ValueError(f"need at least {MIN_SCORES} scores, got {scores.shape[0]}")
    if not np.isfinite(scores).all():
        raise ValueError("scores contain non-finite values")
    p_k, p_u = float(weights[0]), float(weights[1])
    if not (0.0 <= p_k <= 1.0 and 0.0 <= p_u <= 1.0 and abs(p_k + p_u - 1.0) < 1e-9):
        raise ValueError(f"weights must be in [0,1] and sum to 1, got {weights}")
    if p_k == 0.0 or p_u == 0.0:
        return None, []
    if np.ptp(scores) == 0.0:
        raise ValueError("degenerate scores: all values identical")

    # deterministic weight-consistent init from quantile blocks
    srt = np.sort(scores)
    n = srt.shape[0]
    n_u = int(np.clip(round(n * p_u), 1, n - 1))
    low, high = srt[:n_u], srt[n_u:]
    mu_u, mu_k = float(low.mean()), float(high.mean())
    sigma_u = max(float(low.std()), SIGMA_FLOOR)
    sigma_k = max(float(high.std()), SIGMA_FLOOR)

    log_pk, log_pu = math.log(p_k), math.log(p_u)
    trace = []
    prev = None
    for _ in range(max_iter):
        lk = log_pk + _log_density(scores, mu_k, sigma_k)
        lu = log_pu + _log_density(scores, mu_u, sigma_u)
        m = np.maximum(lk, lu)
        log_total = m + np.log(np.exp(lk - m) + np.exp(lu - m))
        ll = float(log_total.sum())
        trace.append(ll)
        if prev is not None and ll - prev < tol:
            break
        prev = ll

        resp_k = np.exp(lk - log_total)
        resp_u = 1.0 - resp_k
        for resp, which in ((resp_k, "k"), (resp_u, "u")):
            total = resp.sum()
            if total <= 0.0:
                continue  # component starved; keep its parameters
            mu = float((resp * scores).sum() / total)
            var = float((resp * (scores - mu) ** 2).sum() / total)
            sigma = max(math.sqrt(var), SIGMA_FLOOR)
            if which == "k":
                mu_k, sigma_k = mu, sigma
            else:
                mu_u, sigma_u = mu, sigma

    if mu_k < mu_u:
        p_k, p_u = p_u, p_k
        mu_k, mu_u = mu_u, mu_k
        sigma_k, sigma_u = sigma_u, sigma_k
    return GmmParams(p_k=p_k, p_u=p_u, mu_k=mu_k, mu_u=mu_u,
                     sigma_k=sigma_k, sigma_u=sigma_u), trace


def balanced_error(gamma, params: GmmParams):
    """Mean of the two error rates under equal-weight components: knowns
    below gamma plus unknowns at or above gamma."""
    miss_known = ndtr((gamma - params.mu_k) / params.sigma_k)
    false_known = 1.0 - ndtr((gamma - params.mu_u) / params.sigma_u)
    return 0.5 * (miss_known + false_known)


def intersection_threshold(params: GmmParams) -> Threshold:
    """Equal-weight density intersection between the component means.

    Equal sigmas give the midpoint. Otherwise the equal-density condition is
    a quadratic; the root inside [mu_u, mu_k] is returned (the one with the
    lower balanced error if both land inside). With no interior root the
    midpoint is returned with the fallback mode flag.
    """
    mu_k, mu_u = params.mu_k, params.mu_u
    s_k, s_u = params.sigma_k, params.sigma_u
    midpoint = 0.5 * (mu_k + mu_u)
    if abs(s_k - s_u) < 1e-12:
        return Threshold(gamma=midpoint, mode=MODE_INTERSECTION)

    a = s_k ** 2 - s_u ** 2
    b = -2.0 * (s_k ** 2 * mu_u - s_u ** 2 * mu_k)
    c = (s_k ** 2 * mu_u ** 2 - s_u ** 2 * mu_k ** 2
         - 2.0 * (s_u * s_k) ** 2 * math.log(s_k / s_u))
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return Threshold(gamma=midpoint, mode=MODE_MIDPOINT)
    root = math.sqrt(disc)
    eps = 1e-9 * (1.0 + abs(mu_k - mu_u))
    inside = [g for g in ((-b - root) / (2 * a), (-b + root) / (2 * a))
              if mu_u - eps <= g <= mu_k + eps]
    if not inside:
        return Threshold(gamma=midpoint, mode=MODE_MIDPOINT)
    gamma = min(inside, key=lambda g: balanced_error(g, params))
    return Threshold(gamma=float(gamma), mode=MODE_INTERSECTION)


def predict_known(scores, threshold: Threshold):
    """Boolean known-mask: score >= gamma counts as known."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(scores).all():
        raise ValueError("scores contain non-finite values")
    if threshold.mode == MODE_DISABLED:
        return np.ones(scores.shape[0], dtype=bool)
    if threshold.mode == MODE_ALL_UNKNOWN:
        return np.zeros(scores.shape[0], dtype=bool)
    return scores >= threshold.gamma


def select_threshold(scores, k_com: int, k_pri: int) -> ThresholdReport:
    """Fit the mixture with search-estimated proportions and pick the
    threshold; degenerate estimates bypass the fit entirely.

    k_pri = 0 disables unknown detection (everything known); k_com = 0 marks
    everything unknown. Otherwise the private proportion is clamped to
    [0.01, 0.99] before EM.
    """
    if k_com < 0 or k_pri < 0 or k_com + k_pri == 0:
        raise ValueError(f"invalid class counts ({k_com}, {k_pri})")
    if k_pri == 0:
        return ThresholdReport(weights=(1.0, 0.0), params=None,
                               threshold=Threshold(gamma=-math.inf, mode=MODE_DISABLED))
    if k_com == 0:
        return ThresholdReport(weights=(0.0, 1.0), params=None,
                               threshold=Threshold(gamma=math.inf, mode=MODE_ALL_UNKNOWN))
    p_u = k_pri / (k_com + k_pri)
    p_u = min(max(p_u, WEIGHT_CLAMP), 1.0 - WEIGHT_CLAMP)
    weights = (1.0 - p_u, p_u)
    params, trace = fit_gmm(scores, weights)
    return ThresholdReport(weights=weights, params=params,
                           threshold=intersection_threshold(params),
                           loglik_trace=trace)
