"""Stage-1 discrete optimization: greedy coordinate search for target-domain
semantic centers over a noun vocabulary.

The searched variables are a tuple T of K0 text columns (the first n_source
slots are pinned to the source class names) and a retain/discard bit vector
r; the active number of clusters K = sum(r) is itself a searched quantity.
Each step re-samples one slot from a candidate pool and keeps or drops it by
comparing the information-maximization loss of the best candidate against the
loss with the slot discarded. Source slots additionally obey a protection
rule: when the class-name embedding classifies sharply against the current
target prototypes, the slot is forced active.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import PredictionConfig, normalized_entropy, predict, xlogx
from .store import SimilarityCache

# losses are O(log K); differences below this are float noise from the two
# evaluation paths (batched candidates vs. base set) and count as a tie
TIE_EPS = 1e-12

_PROTO_NORM_TOL = 1e-12


@dataclass(frozen=True)
class SearchConfig:
    """Knobs of the greedy search."""

    k0: int = 100
    n_c: int = 300
    gamma_ent: float = 0.3
    n_outer: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.k0 < 1:
            raise ValueError("k0 must be >= 1")
        if self.n_c < 1:
            raise ValueError("n_c must be >= 1")
        if not 0.0 < self.gamma_ent < 1.0:
            raise ValueError("gamma_ent must lie in (0, 1)")
        if self.n_outer < 1:
            raise ValueError("n_outer must be >= 1")


@dataclass
class SearchState:
    """Slot columns T, retain bits r, and the pinned source prefix length."""

    T: np.ndarray
    r: np.ndarray
    n_source: int

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=np.int64)
        self.r = np.asarray(self.r, dtype=np.int8)

    @property
    def k0(self):
        return self.T.shape[0]

    @property
    def K(self):
        return int(self.r.sum())

    @property
    def K_com(self):
        return int(self.r[: self.n_source].sum())

    @property
    def K_pri(self):
        return int(self.r[self.n_source:].sum())

    def active_columns(self):
        """Columns of retained slots, in slot order (source slots first)."""
        return self.T[self.r == 1]

    def copy(self):
        return SearchState(self.T.copy(), self.r.copy(), self.n_source)


@dataclass(frozen=True)
class ClassCountEstimate:
    K: int
    K_com: int
    K_pri: int


@dataclass
class SearchTrace:
    """Loss and K after each outer iteration; optional per-step records.

    step_forced marks steps where the protected-source rule overrode the
    loss comparison; only those steps may raise the loss.
    """

    losses: list = field(default_factory=list)
    k_values: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    step_forced: list = field(default_factory=list)


class LossEvaluator:
    """Information-maximization loss over cached similarities.

    Works on shifted logits (sim - 1)/tau: similarities lie in [-1, 1], so
    exp never overflows and never underflows to zero in float64, and the
    shift cancels inside the softmax. The exp table is precomputed once (it
    dominates repeated evaluation cost); logit slices are recomputed from
    the similarity cache on demand to avoid a second cache-sized matrix.
    Candidate evaluation for one slot then needs only the base-set partial
    sums plus one column gather.
    """

    def __init__(self, cache: SimilarityCache, cfg: PredictionConfig):
        self.lambda_div = cfg.lambda_div
        self._tau = cfg.tau
        self._sims = cache.matrix
        self._E = np.exp((cache.matrix - 1.0) / cfg.tau)
        self.n = cache.matrix.shape[0]
        if self.n == 0:
            raise ValueError("cache has no target samples")

    def _logits(self, columns):
        return (self._sims[:, columns] - 1.0) / self._tau

    def loss(self, columns):
        """Loss of the active set given by `columns` over all target samples."""
        columns = np.asarray(columns, dtype=np.int64)
        if columns.size == 0:
            raise ValueError("active set is empty (K = 0)")
        E = self._E[:, columns]
        Z = E.sum(axis=1)
        G = (E * self._logits(columns)).sum(axis=1)
        ent = float((np.log(Z) - G / Z).mean())
        p_bar = (E / Z[:, None]).mean(axis=0)
        return ent - self.lambda_div * float(-xlogx(p_bar).sum())

    def _base(self, base_columns):
        Eb = self._E[:, base_columns]
        return Eb, Eb.sum(axis=1), (Eb * self._logits(base_columns)).sum(axis=1)

    def loss_of_base(self, Eb, Zb, Gb):
        ent = float((np.log(Zb) - Gb / Zb).mean())
        p_bar = (Eb / Zb[:, None]).mean(axis=0)
        return ent - self.lambda_div * float(-xlogx(p_bar).sum())

    def candidate_losses(self, base_columns, cand_columns):
        """Loss for each candidate column added on top of the base set.

        Returns an array of losses aligned with `cand_columns`. The base set
        may be empty, in which case each candidate is evaluated alone.
        """
        cand_columns = np.asarray(cand_columns, dtype=np.int64)
        Eb, Zb, Gb = self._base(np.asarray(base_columns, dtype=np.int64))
        Ec = self._E[:, cand_columns]
        Z = Zb[:, None] + Ec
        G = Gb[:, None] + Ec * self._logits(cand_columns)
        ent_mean = (np.log(Z) - G / Z).mean(axis=0)
        Dinv = 1.0 / Z
        p_base = Eb.T @ Dinv / self.n
        p_cand = (Ec * Dinv).mean(axis=0)
        div = -(xlogx(p_base).sum(axis=0) + xlogx(p_cand))
        return ent_mean - self.lambda_div * div


def loss_for(state: SearchState, cache: SimilarityCache, cfg: PredictionConfig):
    """Loss of a search state; convenience wrapper building a fresh evaluator."""
    if state.K < 1:
        raise ValueError("state has no active centers")
    return LossEvaluator(cache, cfg).loss(state.active_columns())


def init_state(n_source: int, n_nouns: int, cfg: SearchConfig,
               rng: np.random.Generator) -> SearchState:
    """All slots active; source names pinned in front, random distinct nouns after."""
    n_random = cfg.k0 - n_source
    if n_random < 0:
        raise ValueError(f"k0={cfg.k0} smaller than n_source={n_source}")
    if n_nouns < n_random:
        raise ValueError(
            f"vocabulary too small: {n_nouns} nouns < {n_random} free slots")
    noun_cols = n_source + rng.choice(n_nouns, size=n_random, replace=False)
    T = np.concatenate([np.arange(n_source, dtype=np.int64),
                        noun_cols.astype(np.int64)])
    return SearchState(T=T, r=np.ones(cfg.k0, dtype=np.int8), n_source=n_source)


def target_prototypes(state: SearchState, cache: SimilarityCache):
    """Unit-mean prototypes of the non-empty argmax clusters under T^r.

    Each target sample is assigned to its most similar active center (ties to
    the lowest slot); a cluster with no samples contributes no prototype.
    Returns a (K', d) array with K' >= 1 whenever there is at least one
    target sample.
    """
    active = state.active_columns()
    sims = cache.matrix[:, active]
    assign = sims.argmax(axis=1)
    targets = cache.targets.data.astype(np.float64)
    protos = []
    for j in range(active.shape[0]):
        rows = assign == j
        if not rows.any():
            continue
        mu = targets[rows].mean(axis=0)
        nrm = np.linalg.norm(mu)
        if nrm < _PROTO_NORM_TOL:
            continue
        protos.append(mu / nrm)
    return np.asarray(protos)


def protected_source_rule(state: SearchState, i: int, cache: SimilarityCache,
                          pred_cfg: PredictionConfig, gamma_ent: float) -> bool:
    """True when source slot i must stay active.

    Classifies the class-name embedding against the current target
    prototypes; a normalized entropy below gamma_ent means the class has a
    sharply matching target cluster and the slot is pinned. A single
    prototype yields normalized entropy 0, hence forced.
    """
    if i >= state.n_source:
        raise ValueError(f"slot {i} is not a source position")
    protos = target_prototypes(state, cache)
    if protos.shape[0] == 0:
        return True
    text = cache.texts.data[state.T[i]].astype(np.float64)
    p = predict(text, protos, pred_cfg)
    return normalized_entropy(p) < gamma_ent


def _sample_candidates(state: SearchState, i: int, n_columns: int,
                       n_c: int, rng: np.random.Generator):
    """Candidate noun columns for slot i: incumbent plus a uniform sample.

    Sampling is without replacement from noun columns not active at other
    slots. The incumbent is always included unless it is itself active at
    another slot (possible only while r_i = 0), which would create an active
    duplicate if retained.
    """
    incumbent = int(state.T[i])
    pool = np.zeros(n_columns, dtype=bool)
    pool[state.n_source:] = True
    others = state.T[(state.r == 1) & (np.arange(state.k0) != i)]
    pool[others] = False
    include_incumbent = bool(pool[incumbent])
    pool[incumbent] = False
    eligible = np.flatnonzero(pool)
    budget = n_c - 1 if include_incumbent else n_c
    take = min(budget, eligible.shape[0])
    picked = rng.choice(eligible, size=take, replace=False) if take > 0 else \
        np.empty(0, dtype=np.int64)
    if include_incumbent:
        picked = np.append(picked, incumbent)
    return np.sort(picked.astype(np.int64))


def _greedy_step(state: SearchState, i: int, evaluator: LossEvaluator,
                 cache: SimilarityCache, search_cfg: SearchConfig,
                 pred_cfg: PredictionConfig, rng: np.random.Generator):
    """One coordinate update of slot i; returns (state, forced).

    `forced` is True when the protected-source rule set r_i without a loss
    comparison; such overrides are the only steps allowed to raise the loss
    (the rule deliberately pins common-class names even when a synonym noun
    could stand in for them). Ties between keeping the best candidate and
    discarding the slot resolve to discard, which biases toward smaller K.
    Discarding is rejected when it would leave no active center.
    """
    if not 0 <= i < state.k0:
        raise ValueError(f"position {i} out of range [0, {state.k0})")
    state = state.copy()

    keep = state.r == 1
    keep[i] = False
    base = state.T[keep]

    if i < state.n_source:
        if protected_source_rule(state, i, cache, pred_cfg, search_cfg.gamma_ent):
            forced = state.r[i] == 0  # re-activation bypasses the comparison
            state.r[i] = 1
            return state, bool(forced)
        cands = np.array([state.T[i]], dtype=np.int64)
    else:
        cands = _sample_candidates(state, i, cache.n_columns, search_cfg.n_c, rng)
        if cands.size == 0:
            # incumbent active elsewhere and no free noun left: only r_i=0 is legal
            state.r[i] = 0 if base.size > 0 else 1
            return state, False

    losses = evaluator.candidate_losses(base, cands)
    best = int(np.argmin(losses))  # candidates sorted: ties pick lowest column
    l_min = float(losses[best])
    if base.size == 0:
        l_dis = np.inf  # discarding the last center is never allowed
    else:
        Eb, Zb, Gb = evaluator._base(base)
        l_dis = evaluator.loss_of_base(Eb, Zb, Gb)

    if i >= state.n_source:
        state.T[i] = cands[best]
    state.r[i] = 1 if l_min < l_dis - TIE_EPS else 0
    return state, False


def greedy_step(state: SearchState, i: int, evaluator: LossEvaluator,
                cache: SimilarityCache, search_cfg: SearchConfig,
                pred_cfg: PredictionConfig, rng: np.random.Generator) -> SearchState:
    """One coordinate update of slot i; returns the updated state."""
    new_state, _ = _greedy_step(state, i, evaluator, cache, search_cfg,
                                pred_cfg, rng)
    return new_state


def run_search(cache: SimilarityCache, search_cfg: SearchConfig,
               pred_cfg: PredictionConfig, rng: np.random.Generator | None = None,
               track_steps: bool = False):
    """Full greedy search: n_outer sweeps over all K0 slots.

    Returns (final state, class-count estimate, trace). The trace records the
    loss and K after each outer iteration; with track_steps it also records
    the loss after every accepted step, grouped per outer iteration.
    """
    if rng is None:
        rng = np.random.default_rng(search_cfg.seed)
    state = init_state(cache.n_source, cache.n_nouns, search_cfg, rng)
    evaluator = LossEvaluator(cache, pred_cfg)
    trace = SearchTrace()
    for _ in range(search_cfg.n_outer):
        per_step, per_forced = [], []
        for i in range(search_cfg.k0):
            state, forced = _greedy_step(state, i, evaluator, cache,
                                         search_cfg, pred_cfg, rng)
            if track_steps:
                per_step.append(evaluator.loss(state.active_columns()))
                per_forced.append(forced)
        trace.losses.append(evaluator.loss(state.active_columns()))
        trace.k_values.append(state.K)
        if track_steps:
            trace.step_losses.append(per_step)
            trace.step_forced.append(per_forced)
    estimate = ClassCountEstimate(K=state.K, K_com=state.K_com, K_pri=state.K_pri)
    return state, estimate, trace
