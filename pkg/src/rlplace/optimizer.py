"""Placement search over a finite set of candidate mounts.

Selectors: perceptual-gain greedy, exhaustive brute force, seeded random
subsets and a coverage-then-density greedy baseline. Every selector talks to
a :class:`Scorer`, a deterministic set function with ``score(()) == 0``.
"""

import itertools
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import BudgetError, ParameterError
from .lidar import WORLD, SweepCache, strip_vehicle_points, transform_cloud, worker_count
from .perception import (PerceptionPredictor, XhatConfig, ability_for_placement, noisy_or,
                         perception_score, predict_ability, extract_features,
                         vehicle_free_cloud)

DEFAULT_BUDGET = 10**6
AUDIT_TOL = 1e-9


class Scorer:
    """Set-function wrapper: counts evaluations and pins the empty placement to 0."""

    def __init__(self):
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, placement):
        with self._lock:
            self.calls += 1
        placement = tuple(int(p) for p in placement)
        if not placement:
            return 0.0
        return float(self.score(placement))

    def score(self, placement):
        raise NotImplementedError


class FunctionScorer(Scorer):
    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def score(self, placement):
        return self.fn(placement)


class NoisyOrMapScorer(Scorer):
    """Noisy-OR perception score over fixed per-mount ability maps."""

    def __init__(self, maps):
        super().__init__()
        self.maps = {int(k): np.asarray(v, dtype=float) for k, v in maps.items()}

    def score(self, placement):
        # ascending ids so the float product does not depend on selection order
        return perception_score(noisy_or([self.maps[p] for p in sorted(placement)]))


def default_frames(n_frames, count=5):
    """``count`` evenly spaced frame indices (all frames when there are fewer)."""
    if n_frames <= count:
        return tuple(range(n_frames))
    return tuple(int(v) for v in np.unique(np.round(np.linspace(0, n_frames - 1, count))))


class PerceptionScorer(Scorer):
    """Mean perception score of a placement over a frame subset.

    ``mode="noisyor"`` combines cached single-mount ability maps; ``"fused"``
    predicts on the placement's fused vehicle-free cloud (ego = first mount).
    """

    def __init__(self, scenario, model, mode="noisyor", frames=None, spec=None, cache=None,
                 xhat=None):
        super().__init__()
        if mode not in ("noisyor", "fused"):
            raise ParameterError(f"unknown scorer mode {mode!r}")
        self.scenario = scenario
        self.model = model
        self.mode = mode
        self.frames = tuple(frames) if frames is not None else default_frames(len(scenario.frames))
        for f in self.frames:
            scenario.frame(f)
        self.cache = cache or SweepCache(scenario, spec)
        self.xhat = xhat
        self._single = {}
        self._fused = {}
        self._memo_lock = threading.Lock()

    def single_map(self, frame_index, mount_id):
        key = (frame_index, mount_id)
        if key not in self._single:
            xh = vehicle_free_cloud(self.cache, frame_index, [mount_id], self.xhat)
            a = predict_ability(self.model, extract_features(xh, self.scenario.grid)).values
            with self._memo_lock:
                self._single[key] = a
        return self._single[key]

    def prepare(self, mount_ids=None):
        """Pre-compute sweeps (and single-mount maps for noisy-OR)."""
        ids = list(mount_ids) if mount_ids is not None else self.scenario.mount_ids
        frames = set(self.frames)
        if self.xhat is not None:
            frames |= set(self.xhat.fusion_frames)
        self.cache.warm(sorted(frames), ids)
        if self.mode == "noisyor":
            for f in self.frames:
                for mid in ids:
                    self.single_map(f, mid)
        return self

    def frame_score(self, frame_index, placement):
        if self.mode == "noisyor":
            return perception_score(noisy_or([self.single_map(frame_index, p)
                                              for p in sorted(placement)]))
        a = ability_for_placement(self.scenario, frame_index, placement, self.model, "fused",
                                  cache=self.cache, xhat=self.xhat)
        return perception_score(a)

    def score(self, placement):
        if self.mode == "fused" and placement in self._fused:
            return self._fused[placement]
        value = float(np.mean([self.frame_score(f, placement) for f in self.frames]))
        if self.mode == "fused":
            with self._memo_lock:
                self._fused[placement] = value
        return value


@dataclass(frozen=True)
class GainStep:
    step: int
    chosen_id: int
    k_before: float
    k_after: float
    gain: float


def _check_candidates(candidates, m, scenario=None):
    ids = sorted(int(c) for c in candidates)
    if len(set(ids)) != len(ids):
        raise ParameterError("candidate ids must be distinct")
    if scenario is not None:
        known = set(scenario.mount_ids)
        missing = [c for c in ids if c not in known]
        if missing:
            raise ParameterError(f"unknown mount ids {missing}")
    if not 1 <= m <= len(ids):
        raise ParameterError(f"M must satisfy 1 <= M <= {len(ids)}, got {m}")
    return ids


def perceptual_gain(scorer, placement, p):
    """k(S + p) - k(S)."""
    placement = tuple(int(q) for q in placement)
    if int(p) in placement:
        raise ParameterError(f"mount {p} already in the placement")
    return scorer(placement + (int(p),)) - scorer(placement)


def greedy_select(scenario, candidates, m, scorer, n_jobs=None):
    """Add, M times, the candidate with the largest perceptual gain.

    Each round costs one evaluation of the current placement plus one per
    remaining candidate. Ties go to the smallest mount id. Returns the ordered
    placement and the per-step gain trace.
    """
    remaining = _check_candidates(candidates, m, scenario)
    workers = min(n_jobs or worker_count(), len(remaining))
    selected = ()
    trace = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for step in range(1, m + 1):
            k_before = scorer(selected)
            trial = [selected + (p,) for p in remaining]
            if pool is not None:
                scores = list(pool.map(scorer, trial))
            else:
                scores = [scorer(t) for t in trial]
            best, best_gain, best_k = None, -math.inf, None
            for p, k_after in zip(remaining, scores):
                gain = k_after - k_before
                if gain > best_gain:
                    best, best_gain, best_k = p, gain, k_after
            selected = selected + (best,)
            remaining.remove(best)
            trace.append(GainStep(step, best, k_before, best_k, best_gain))
    finally:
        if pool is not None:
            pool.shutdown()
    return selected, trace


def check_budget(n, m, budget=DEFAULT_BUDGET):
    """Raise :class:`BudgetError` when C(n, m) exceeds ``budget``; return C(n, m)."""
    total = math.comb(n, m)
    if total > budget:
        raise BudgetError(f"C({n},{m}) = {total} evaluations exceeds budget {budget}")
    return total


def brute_force_select(scenario, candidates, m, scorer, budget=DEFAULT_BUDGET, return_score=False):
    """Best M-subset by exhaustive lexicographic enumeration (ties: first found)."""
    ids = _check_candidates(candidates, m, scenario)
    check_budget(len(ids), m, budget)
    best, best_score = None, -math.inf
    for combo in itertools.combinations(ids, m):
        value = scorer(combo)
        if value > best_score:
            best, best_score = combo, value
    return (best, best_score) if return_score else best


def random_select(candidates, m, seed):
    """Uniform M-subset: the first M slots of a seeded Fisher-Yates shuffle."""
    ids = _check_candidates(candidates, m)
    rng = np.random.default_rng(np.uint64(int(seed) % 2**64))
    for i in range(m):
        j = int(rng.integers(i, len(ids)))
        ids[i], ids[j] = ids[j], ids[i]
    return tuple(ids[:m])


def coverage_footprints(scenario, candidates, frames=(0,), spec=None, cache=None):
    """Per mount: (covered cells per frame, static point count) in the scene grid."""
    cache = cache or SweepCache(scenario, spec)
    grid = scenario.grid
    out = {}
    for mid in candidates:
        mount = scenario.mount(mid)
        cells, count = [], 0
        for f in frames:
            static = strip_vehicle_points(transform_cloud(cache.sweep(f, mid), mount.pose, WORLD))
            i, j = grid.cells_of(static.xyz[:, :2])
            inside = i >= 0
            cells.append(set((i[inside] * grid.width + j[inside]).tolist()))
            count += len(static)
        out[mid] = (cells, count)
    return out


def coverage_density_select(scenario, candidates, m, spec=None, frames=(0,), cache=None,
                            footprints=None):
    """Greedy on covered-cell count, ties by total static points, then smallest id."""
    ids = _check_candidates(candidates, m, scenario)
    footprints = footprints or coverage_footprints(scenario, ids, frames, spec, cache)
    n_frames = len(next(iter(footprints.values()))[0])
    covered = [set() for _ in range(n_frames)]
    density = 0
    selected = []
    for _ in range(m):
        best, best_key = None, None
        for p in ids:
            cells, count = footprints[p]
            cov = sum(len(covered[f] | cells[f]) for f in range(n_frames))
            key = (cov, density + count)
            if best_key is None or key > best_key:
                best, best_key = p, key
        cells, count = footprints[best]
        for f in range(n_frames):
            covered[f] |= cells[f]
        density += count
        selected.append(best)
        ids.remove(best)
    return tuple(selected)


def submodularity_audit(scorer, candidates, n_samples, seed, tol=AUDIT_TOL):
    """Sample (S subset of T, p not in T) triples and count diminishing-returns breaches.

    Placements are evaluated in ascending id order. Also reports how often
    adding ``p`` to ``T`` lowered the score (monotonicity breaches).
    """
    ids = sorted(int(c) for c in candidates)
    if len(ids) < 3:
        raise ParameterError("audit needs at least 3 candidates")
    rng = np.random.default_rng(np.uint64(int(seed) % 2**64))
    violations = mono = 0
    max_violation = 0.0
    for _ in range(n_samples):
        p = ids[int(rng.integers(0, len(ids)))]
        rest = [q for q in ids if q != p]
        t_size = int(rng.integers(1, len(rest) + 1))
        T = sorted(rng.choice(rest, size=t_size, replace=False).tolist())
        s_size = int(rng.integers(0, t_size))
        S = sorted(rng.choice(T, size=s_size, replace=False).tolist()) if s_size else []
        k_s, k_sp = scorer(tuple(S)), scorer(tuple(sorted(S + [p])))
        k_t, k_tp = scorer(tuple(T)), scorer(tuple(sorted(T + [p])))
        excess = (k_tp - k_t) - (k_sp - k_s)
        if excess > tol:
            violations += 1
            max_violation = max(max_violation, excess)
        if k_tp < k_t - tol:
            mono += 1
    return {"violations": violations, "checks": int(n_samples), "max_violation": max_violation,
            "monotonicity_violations": mono,
            "violation_rate": violations / n_samples if n_samples else 0.0}


class PlacementSelector(BaseEstimator):
    """Estimator front-end: ``fit(scenario)`` picks ``n_lidars`` mounts.

    When ``model`` is None and the method needs a scorer, a perception
    predictor is trained on the scenario first (``n_train`` random samples).

    Fitted attributes: ``placement_``, ``score_``, ``trace_`` (greedy only),
    ``scorer_`` and ``model_``.
    """

    def __init__(self, n_lidars=2, method="greedy", scorer_mode="noisyor", frames=None,
                 seed=0, model=None, spec=None, budget=DEFAULT_BUDGET, n_train=32,
                 gamma=0.1, threshold=0.2, lr=0.1, epochs=200, xhat=None):
        self.n_lidars = n_lidars
        self.method = method
        self.scorer_mode = scorer_mode
        self.frames = frames
        self.seed = seed
        self.model = model
        self.spec = spec
        self.budget = budget
        self.n_train = n_train
        self.gamma = gamma
        self.threshold = threshold
        self.lr = lr
        self.epochs = epochs
        self.xhat = xhat

    def _train(self, scenario, cache):
        from .perception import build_training_samples
        samples = build_training_samples(scenario, self.n_train, self.seed, cache=cache,
                                         xhat=self.xhat)
        X = [extract_features(x, scenario.grid) for x, _ in samples]
        y = [c for _, c in samples]
        est = PerceptionPredictor(self.gamma, self.threshold, self.lr, self.epochs, self.seed)
        return est.fit(X, y).model_

    def fit(self, scenario, y=None):
        if self.method not in ("greedy", "brute", "random", "covdens"):
            raise ParameterError(f"unknown method {self.method!r}")
        if self.method == "brute":
            check_budget(len(scenario.mount_ids), self.n_lidars, self.budget)
        cache = SweepCache(scenario, self.spec)
        ids = scenario.mount_ids
        self.model_ = self.model
        self.trace_ = None
        frames = tuple(self.frames) if self.frames is not None else default_frames(len(scenario.frames))
        if self.method in ("greedy", "brute") or self.model is not None:
            if self.model_ is None:
                self.model_ = self._train(scenario, cache)
            self.scorer_ = PerceptionScorer(scenario, self.model_, self.scorer_mode, frames,
                                            cache=cache, xhat=self.xhat)
        else:
            self.scorer_ = None
        if self.method == "greedy":
            self.placement_, self.trace_ = greedy_select(scenario, ids, self.n_lidars, self.scorer_)
        elif self.method == "brute":
            self.placement_ = brute_force_select(scenario, ids, self.n_lidars, self.scorer_,
                                                 self.budget)
        elif self.method == "random":
            self.placement_ = random_select(ids, self.n_lidars, self.seed)
        else:
            self.placement_ = coverage_density_select(scenario, ids, self.n_lidars,
                                                      frames=frames, cache=cache)
        self.score_ = self.scorer_(self.placement_) if self.scorer_ is not None else None
        return self
