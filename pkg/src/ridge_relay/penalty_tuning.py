"""Cross-validated choice of the update penalty.

Each update must pick how hard to shrink toward the previous estimate.
Candidates come from a fixed log-spaced grid and are scored by K-fold
cross-validation on the incoming batch alone. In constrained mode a
candidate is additionally required to keep enough of the previous
estimate's explanatory power on the batches already seen: with f the
fraction of all accumulated samples contributed by the new batch, a
penalty is feasible when

    (1 - f) * mean_k crit_hist(fold-fit_k)  <=  crit_hist(previous estimate)

where crit_hist is the residual sum of squares (linear) or minus the
log-likelihood (logistic) summed over all retained batches. Very large
penalties pin the fold fits to the previous estimate, which drives the
left side to (1 - f) times the right, so the constraint is always
satisfiable for large enough candidates; if no grid point is feasible
the selector falls back to the largest one and flags it.

Scores are compared on exactly the values ``cv_score`` returns, ties
prefer the larger penalty (more stability at equal predictive loss), and
all randomness comes from the fold seed, so selection is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Sequence

import numpy as np

from .errors import ConvergenceError, SelectionError, SingularMatrixError, ValidationError
from .model_core import (
    Batch,
    CoefficientVector,
    EstimatorState,
    TargetSpec,
    align_batch,
    assemble_target,
    mixture_target,
)
from .linear_estimator import fit_targeted_ridge
from .logistic_estimator import irls_fit, logistic_loglik
from .parallel import parallel_map

__all__ = [
    "DEFAULT_GRID_MIN",
    "DEFAULT_GRID_MAX",
    "DEFAULT_GRID_POINTS",
    "default_grid",
    "FoldPlan",
    "make_folds",
    "cv_score",
    "ConstraintTerms",
    "constraint_terms",
    "Candidate",
    "PenaltySearchConfig",
    "SelectionReport",
    "select_penalty",
]

DEFAULT_GRID_MIN = 1e-4
DEFAULT_GRID_MAX = 1e6
DEFAULT_GRID_POINTS = 50


def default_grid(grid_min: float = DEFAULT_GRID_MIN, grid_max: float = DEFAULT_GRID_MAX,
                 points: int = DEFAULT_GRID_POINTS) -> tuple[float, ...]:
    """Log-spaced penalty grid, ascending."""
    if not (0 < grid_min < grid_max):
        raise ValidationError("need 0 < grid_min < grid_max")
    if points < 1:
        raise ValidationError("points must be >= 1")
    if points == 1:
        return (float(grid_max),)
    return tuple(np.geomspace(grid_min, grid_max, points).tolist())


@dataclass(frozen=True)
class FoldPlan:
    """Assignment of observations to cross-validation folds, labels 1..k."""

    assignments: np.ndarray
    k: int

    def __post_init__(self) -> None:
        arr = np.asarray(self.assignments, dtype=int)
        if arr.ndim != 1:
            raise ValidationError("fold assignments must be 1-dimensional")
        if self.k < 2:
            raise ValidationError("need at least 2 folds")
        if arr.size < self.k:
            raise ValidationError("more folds than observations")
        present = np.unique(arr)
        if present.min() < 1 or present.max() > self.k or present.size != self.k:
            raise ValidationError("every fold label in 1..k must occur")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "assignments", arr)

    @property
    def n(self) -> int:
        return self.assignments.shape[0]

    def split(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """(train mask, test mask) for fold label ``fold``."""
        test = self.assignments == fold
        return ~test, test


def make_folds(n: int, k: int, seed: int, strata: Sequence | None = None) -> FoldPlan:
    """Seeded fold assignment; round-robin within shuffled strata.

    With ``strata`` (e.g. a binary response), each stratum is shuffled and
    dealt round-robin so folds keep roughly the stratum proportions. Fold
    sizes differ by at most one either way.
    """
    if k < 2 or k > n:
        raise ValidationError(f"fold count must satisfy 2 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    assignments = np.empty(n, dtype=int)
    counter = 0
    if strata is None:
        order = rng.permutation(n)
        for i, row in enumerate(order):
            assignments[row] = i % k + 1
    else:
        strata = np.asarray(strata)
        if strata.shape[0] != n:
            raise ValidationError("strata must have one label per observation")
        for label in np.unique(strata):
            rows = np.flatnonzero(strata == label)
            for row in rows[rng.permutation(rows.size)]:
                assignments[row] = counter % k + 1
                counter += 1
    return FoldPlan(assignments=assignments, k=k)


def _heldout_criterion(family: str, X_test: np.ndarray, y_test: np.ndarray,
                       coef: np.ndarray) -> float:
    if family == "linear":
        resid = y_test - X_test @ coef
        return float(resid @ resid)
    return -logistic_loglik(X_test, y_test, coef)


def _fit_coef(family: str, X: np.ndarray, y: np.ndarray, lam: float,
              target: np.ndarray) -> np.ndarray:
    if family == "linear":
        return fit_targeted_ridge(X, y, lam, target).coef
    return irls_fit(X, y, lam, target).coef


def cv_score(family: str, batch: Batch, lam: float, target, folds: FoldPlan) -> float:
    """Mean over folds of the held-out criterion of the fold fits.

    ``target`` is laid out over the batch's own columns. The criterion is
    the held-out residual sum of squares (linear) or minus the held-out
    log-likelihood (logistic); lower is better for both. Fold fits that
    fail to converge, or are singular, make the score infinite instead of
    raising: an unusable candidate should lose the comparison, not abort
    it.
    """
    target = np.asarray(target, dtype=float)
    if target.shape != (batch.p,):
        raise ValidationError(f"target must have length {batch.p}")
    if folds.n != batch.n:
        raise ValidationError(f"fold plan covers {folds.n} rows, the batch has {batch.n}")
    X, y = batch.X, batch.y
    total = 0.0
    for fold in range(1, folds.k + 1):
        train, test = folds.split(fold)
        try:
            coef = _fit_coef(family, X[train], y[train], lam, target)
        except (ConvergenceError, SingularMatrixError):
            return float("inf")
        total += _heldout_criterion(family, X[test], y[test], coef)
    return total / folds.k


@dataclass(frozen=True)
class ConstraintTerms:
    """Both sides of the historic-fit feasibility inequality."""

    lhs: float
    rhs: float
    new_fraction: float

    @property
    def feasible(self) -> bool:
        return self.lhs <= self.rhs


def constraint_terms(state: EstimatorState, batch: Batch, lam: float,
                     target: CoefficientVector, folds: FoldPlan) -> ConstraintTerms:
    """Evaluate the historic-fit constraint for one candidate penalty.

    The fold fits run over the full registry (historic designs are
    zero-filled for covariates they never carried) and reuse the same
    fold plan as scoring, so the two views of a candidate describe the
    same estimators. Raises if the state retains no batches: the
    constraint is vacuous at the first update and the selector simply
    skips it there.
    """
    if not state.retained:
        raise ValidationError("no retained batches: the constraint is vacuous at t=1")
    registry = state.registry.extended(batch.covariates)
    names = registry.names
    target_arr = target.as_array(names)
    X_new = align_batch(batch, registry)
    hist_X = np.vstack([align_batch(b, registry) for b in state.retained])
    hist_y = np.concatenate([b.y for b in state.retained])
    prev = assemble_target(state, names).as_array(names)
    rhs = _heldout_criterion(state.family, hist_X, hist_y, prev)
    f_new = batch.n / (batch.n + hist_y.shape[0])
    total = 0.0
    for fold in range(1, folds.k + 1):
        train, _ = folds.split(fold)
        try:
            coef = _fit_coef(state.family, X_new[train], batch.y[train], lam, target_arr)
        except (ConvergenceError, SingularMatrixError):
            total = float("inf")
            break
        total += _heldout_criterion(state.family, hist_X, hist_y, coef)
    lhs = (1.0 - f_new) * (total / folds.k if np.isfinite(total) else total)
    return ConstraintTerms(lhs=lhs, rhs=rhs, new_fraction=f_new)


@dataclass(frozen=True)
class Candidate:
    """One evaluated grid point of the selection curve."""

    lam: float
    weights: tuple[float, ...] | None
    score: float
    feasible: bool
    lhs: float | None = None
    rhs: float | None = None


@dataclass(frozen=True)
class PenaltySearchConfig:
    """How to run a selection: folds, grid, constraint mode, seed.

    ``k_folds=None`` means leave-one-out. The weight lattice for mixture
    tuning uses ``weight_points`` values per coordinate (default step 0.1).
    """

    k_folds: int | None = 5
    constrained: bool = True
    grid: tuple[float, ...] = field(default_factory=default_grid)
    seed: int = 0
    fallback: "float | CoefficientVector | None" = None
    weight_points: int = 11

    def __post_init__(self) -> None:
        grid = tuple(float(v) for v in self.grid)
        if not grid:
            raise ValidationError("the penalty grid must be non-empty")
        if any(not np.isfinite(v) or v <= 0 for v in grid):
            raise ValidationError("grid penalties must be finite and positive")
        if sorted(grid) != list(grid) or len(set(grid)) != len(grid):
            raise ValidationError("the grid must be strictly increasing")
        object.__setattr__(self, "grid", grid)
        if self.k_folds is not None and self.k_folds < 2:
            raise ValidationError("k_folds must be >= 2 (or None for leave-one-out)")
        if self.weight_points < 2:
            raise ValidationError("weight_points must be >= 2")


@dataclass(frozen=True)
class SelectionReport:
    """Outcome of a grid selection, with the full evaluated curve."""

    chosen_lambda: float
    chosen_weights: tuple[float, ...] | None
    score: float
    constrained: bool
    fallback_used: bool
    new_fraction: float | None
    k_folds: int
    seed: int
    cv_curve: tuple[Candidate, ...]

    def to_dict(self) -> dict:
        def num(v):
            if v is None:
                return None
            v = float(v)
            return v if np.isfinite(v) else repr(v)

        return {
            "chosen_lambda": num(self.chosen_lambda),
            "chosen_weights": list(self.chosen_weights)
                if self.chosen_weights is not None else None,
            "score": num(self.score),
            "constrained": self.constrained,
            "fallback_used": self.fallback_used,
            "new_fraction": num(self.new_fraction),
            "k_folds": self.k_folds,
            "seed": self.seed,
            "cv_curve": [
                {
                    "lam": num(c.lam),
                    "weights": list(c.weights) if c.weights is not None else None,
                    "score": num(c.score),
                    "feasible": c.feasible,
                    "lhs": num(c.lhs),
                    "rhs": num(c.rhs),
                }
                for c in self.cv_curve
            ],
        }


def _weight_lattice(size: int, points: int) -> list[tuple[float, ...]]:
    """All simplex weights with entries at multiples of 1/(points-1)."""
    m = points - 1
    combos = []
    for slots in combinations_with_replacement(range(size), m):
        counts = [0] * size
        for s in slots:
            counts[s] += 1
        combos.append(tuple(c / m for c in counts))
    return sorted(set(combos), reverse=True)


def select_penalty(state: EstimatorState, batch: Batch,
                   config: PenaltySearchConfig | None = None,
                   targets: TargetSpec | None = None) -> SelectionReport:
    """Pick the update penalty (and mixture weights, if tuning) by grid search.

    Every (penalty, weights) pair on the grid is scored; in constrained
    mode infeasible pairs are excluded before comparison, except at the
    first update where there is no history to constrain against. Ties in
    score go to the larger penalty. With no feasible pair the selector
    falls back to the largest grid penalty and marks ``fallback_used``.
    """
    cfg = config or PenaltySearchConfig()
    if batch.family != state.family:
        raise ValidationError("batch family differs from state family")
    n = batch.n
    k = n if cfg.k_folds is None else cfg.k_folds
    if k > n:
        raise ValidationError(f"k_folds={k} exceeds the batch size {n}")
    strata = batch.y if state.family == "logistic" else None
    folds = make_folds(n, k, cfg.seed, strata)

    registry = state.registry.extended(batch.covariates)
    names = registry.names

    if targets is None:
        weight_options: list[tuple[float, ...] | None] = [None]
        target_map = {None: assemble_target(state, names, cfg.fallback)}
    else:
        expanded = TargetSpec(
            tuple(assemble_target(t, names, cfg.fallback) for t in targets.targets),
            targets.weights)
        if expanded.weights is not None:
            weight_options = [expanded.weights]
        else:
            weight_options = _weight_lattice(expanded.size, cfg.weight_points)
        target_map = {w: mixture_target(expanded, w) for w in weight_options}

    constrain = cfg.constrained and bool(state.retained)
    new_fraction: float | None = None

    def evaluate(lam: float) -> list[Candidate]:
        rows = []
        for w in weight_options:
            target = target_map[w]
            score = cv_score(state.family, batch, lam,
                             target.as_array(batch.covariates), folds)
            if constrain:
                terms = constraint_terms(state, batch, lam, target, folds)
                rows.append(Candidate(lam=lam, weights=w, score=score,
                                      feasible=terms.feasible, lhs=terms.lhs,
                                      rhs=terms.rhs))
            else:
                rows.append(Candidate(lam=lam, weights=w, score=score, feasible=True))
        return rows

    curve: list[Candidate] = [c for rows in parallel_map(evaluate, cfg.grid) for c in rows]
    if constrain:
        new_fraction = batch.n / (batch.n + sum(b.n for b in state.retained))

    def pick(cands: list[Candidate]) -> Candidate | None:
        best = None
        for c in cands:
            if not np.isfinite(c.score):
                continue
            if best is None or c.score < best.score or (c.score == best.score
                                                        and c.lam > best.lam):
                best = c
        return best

    chosen = pick([c for c in curve if c.feasible])
    fallback_used = False
    if chosen is None and constrain:
        top = cfg.grid[-1]
        chosen = pick([c for c in curve if c.lam == top])
        fallback_used = chosen is not None
    if chosen is None:
        raise SelectionError("no usable penalty: every grid candidate scored infinite")
    return SelectionReport(
        chosen_lambda=chosen.lam,
        chosen_weights=chosen.weights,
        score=chosen.score,
        constrained=cfg.constrained,
        fallback_used=fallback_used,
        new_fraction=new_fraction,
        k_folds=k,
        seed=cfg.seed,
        cv_curve=tuple(curve),
    )
