"""Reference estimators the sequential update is compared against.

The main baseline refits on all retained batches at once under a mixed
model: stacking batches 1..t as (Y, X) with a per-batch random deviation
of the coefficients, the marginal covariance of Y is block diagonal with
blocks

    Omega_tau = I + xi * X_tau X_tau',

where xi is the ratio of the deviation variance to the noise variance.
The fixed effects solve the generalized least squares equations

    [sum_tau X_tau' Omega_tau^{-1} X_tau] b = sum_tau X_tau' Omega_tau^{-1} y_tau.

Each block satisfies X' Omega^{-1} = (I_p + xi X'X)^{-1} X', so all
solves can run either in p-space (the Woodbury route, cheap when batches
are tall) or on the n_tau-sized blocks directly; both paths are exposed
and must agree. ``estimate_xi`` picks xi by maximizing the Gaussian
likelihood profiled over the noise variance, using the determinant
identity det(I_n + xi XX') = det(I_p + xi X'X).

A state-space variant in which the coefficients themselves drift from
batch to batch by a random walk leads to the same maximum likelihood
fixed-effects estimator as this model, so it gets no separate solver.

``plain_ridge`` is the zero-target ridge refit on a single batch, the
no-memory baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import EstimationError, SingularMatrixError, ValidationError
from .model_core import Batch
from .linear_estimator import LinearFit, MomentReport, fit_targeted_ridge

__all__ = [
    "StackedData",
    "stack_batches",
    "MixedFit",
    "mixed_fixed_effects",
    "mixed_moments",
    "estimate_xi",
    "default_xi_grid",
    "plain_ridge",
]


@dataclass(frozen=True)
class StackedData:
    """Batches 1..t stacked for a pooled refit, block structure kept.

    ``batch_boundaries`` holds the half-open row range of each batch
    inside the stack, in batch order and covering every row exactly once.
    """

    y_stack: np.ndarray
    x_stack: np.ndarray
    batch_boundaries: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        X = np.asarray(self.x_stack, dtype=float)
        y = np.asarray(self.y_stack, dtype=float)
        if X.ndim != 2:
            raise ValidationError("x_stack must be 2-dimensional")
        if y.shape != (X.shape[0],):
            raise ValidationError(
                f"y_stack has shape {y.shape} for {X.shape[0]} stacked rows")
        bounds = tuple((int(a), int(b)) for a, b in self.batch_boundaries)
        if not bounds:
            raise ValidationError("stacked data needs at least one batch")
        expect = 0
        for start, stop in bounds:
            if start != expect or stop <= start:
                raise ValidationError(
                    "batch boundaries must be consecutive non-empty row ranges")
            expect = stop
        if expect != X.shape[0]:
            raise ValidationError("batch boundaries must cover every stacked row")
        object.__setattr__(self, "y_stack", y)
        object.__setattr__(self, "x_stack", X)
        object.__setattr__(self, "batch_boundaries", bounds)

    @property
    def n(self) -> int:
        return self.y_stack.shape[0]

    @property
    def p(self) -> int:
        return self.x_stack.shape[1]

    @property
    def n_batches(self) -> int:
        return len(self.batch_boundaries)

    @property
    def blocks(self) -> tuple[np.ndarray, ...]:
        return tuple(self.x_stack[a:b] for a, b in self.batch_boundaries)

    def y_blocks(self) -> list[np.ndarray]:
        return [self.y_stack[a:b] for a, b in self.batch_boundaries]

    @property
    def z_block(self) -> np.ndarray:
        """Dense random-effect design: batch tau's rows hit coefficient block tau."""
        t, p = self.n_batches, self.p
        Z = np.zeros((self.n, t * p))
        for tau, (a, b) in enumerate(self.batch_boundaries):
            Z[a:b, tau * p:(tau + 1) * p] = self.x_stack[a:b]
        return Z


def stack_batches(batches: Sequence[Batch]) -> StackedData:
    """Stack linear batches that share one covariate layout."""
    if not batches:
        raise ValidationError("need at least one batch")
    names = batches[0].covariates
    for b in batches:
        if b.family != "linear":
            raise ValidationError("the mixed baseline handles the linear family only")
        if b.covariates != names:
            raise ValidationError("all stacked batches must share one covariate layout")
    bounds = []
    start = 0
    for b in batches:
        bounds.append((start, start + b.n))
        start += b.n
    return StackedData(y_stack=np.concatenate([b.y for b in batches]),
                       x_stack=np.vstack([b.X for b in batches]),
                       batch_boundaries=tuple(bounds))


@dataclass(frozen=True)
class MixedFit:
    """Mixed-model refit at the likelihood-chosen variance ratio.

    ``xi`` is the ratio of the per-batch coefficient-deviation variance
    ``sigma_gamma_sq`` to the noise variance ``sigma_eps_sq``.
    """

    fixed_effects: np.ndarray
    xi: float
    sigma_eps_sq: float
    sigma_gamma_sq: float
    profile_loglik: float


def _check_ratio(xi: float) -> float:
    xi = float(xi)
    if not np.isfinite(xi) or xi < 0:
        raise ValidationError(f"variance ratio must be finite and >= 0, got {xi!r}")
    return xi


def _gls_blocks(data: StackedData, xi: float, method: str):
    """Per-block X'Omega^{-1}X and X'Omega^{-1}y, plus log det Omega."""
    if method == "auto":
        method = "woodbury" if data.n_batches * data.p < data.n else "direct"
    if method not in ("woodbury", "direct"):
        raise ValidationError(f"unknown method {method!r}")
    C = np.zeros((data.p, data.p))
    b = np.zeros(data.p)
    logdet = 0.0
    for X, y in zip(data.blocks, data.y_blocks()):
        gram = X.T @ X
        inner = np.eye(data.p) + xi * gram
        sign, ld = np.linalg.slogdet(inner)
        if sign <= 0:
            raise SingularMatrixError("I + xi X'X has non-positive determinant")
        logdet += ld
        if method == "woodbury":
            try:
                factor = cho_factor(inner, lower=True)
            except LinAlgError as exc:
                raise SingularMatrixError("I + xi X'X is numerically singular") from exc
            C += cho_solve(factor, gram)
            b += cho_solve(factor, X.T @ y)
        else:
            omega = np.eye(X.shape[0]) + xi * (X @ X.T)
            try:
                factor = cho_factor(omega, lower=True)
            except LinAlgError as exc:
                raise SingularMatrixError("a marginal covariance block is singular") from exc
            S = cho_solve(factor, X)
            C += X.T @ S
            b += S.T @ y
    return C, b, logdet


def _solve_spd(C: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    try:
        factor = cho_factor(0.5 * (C + C.T), lower=True)
    except LinAlgError as exc:
        raise SingularMatrixError(f"{what} is numerically singular") from exc
    pivots = np.abs(np.diag(factor[0]))
    if pivots.size and pivots.min() <= 1e-10 * max(pivots.max(), 1e-300):
        raise SingularMatrixError(f"{what} is numerically singular")
    return cho_solve(factor, rhs)


def mixed_fixed_effects(data: StackedData, xi: float,
                        method: str = "auto") -> np.ndarray:
    """GLS fixed effects at a known variance ratio ``xi``.

    ``method`` picks how the block systems are solved: ``"woodbury"``
    works in p-space, ``"direct"`` factors each n_tau block, ``"auto"``
    uses Woodbury when t*p < n. The two routes agree to solver precision.
    """
    xi = _check_ratio(xi)
    if data.n < data.p:
        raise SingularMatrixError(
            f"{data.n} stacked rows cannot identify {data.p} fixed effects")
    C, b, _ = _gls_blocks(data, xi, method)
    return _solve_spd(C, b, "the GLS normal matrix")


def mixed_moments(data: StackedData, xi: float, sigma_eps_sq: float,
                  sigma_gamma_sq: float, coef) -> MomentReport:
    """Exact sampling moments of the GLS fixed effects.

    The generating model has coefficient vector ``coef``, noise variance
    ``sigma_eps_sq`` and per-batch coefficient-deviation variance
    ``sigma_gamma_sq``; the estimator runs at ``xi``, which need not
    equal their quotient, so the covariance is the two-sided sandwich
    rather than the oracle form. The mean is evaluated from the
    unsimplified weighting-matrix product, which collapses to ``coef``
    whenever the normal matrix is invertible.
    """
    xi = _check_ratio(xi)
    sigma_eps_sq = float(sigma_eps_sq)
    sigma_gamma_sq = float(sigma_gamma_sq)
    if sigma_eps_sq < 0 or sigma_gamma_sq < 0:
        raise ValidationError("variances must be >= 0")
    coef = np.asarray(coef, dtype=float)
    if coef.shape != (data.p,):
        raise ValidationError(f"coef must have length {data.p}")
    p = data.p
    C = np.zeros((p, p))
    M = np.zeros((p, p))
    for X in data.blocks:
        gram = X.T @ X
        inner = np.eye(p) + xi * gram
        try:
            factor = cho_factor(inner, lower=True)
        except LinAlgError as exc:
            raise SingularMatrixError("I + xi X'X is numerically singular") from exc
        HG = cho_solve(factor, gram)
        C += HG
        M += sigma_eps_sq * cho_solve(factor, HG.T) + sigma_gamma_sq * HG @ HG
    mean = _solve_spd(C, C @ coef, "the GLS normal matrix")
    inv_C = _solve_spd(C, np.eye(p), "the GLS normal matrix")
    cov = inv_C @ M @ inv_C
    return MomentReport(mean=mean, covariance=0.5 * (cov + cov.T),
                        noise_var=sigma_eps_sq)


def default_xi_grid(points: int = 25) -> tuple[float, ...]:
    """Log-spaced candidate variance ratios for ``estimate_xi``."""
    return tuple(np.geomspace(1e-4, 1e4, points).tolist())


def estimate_xi(data: StackedData, grid: Sequence[float] | None = None,
                method: str = "auto") -> MixedFit:
    """Choose the variance ratio by profiled Gaussian maximum likelihood.

    For each candidate xi the noise variance has the closed form
    q(xi)/n with q the GLS quadratic form of the residuals, leaving a
    one-dimensional profile likelihood evaluated over the grid. Grid
    points where the solve fails are skipped; if all fail this raises.
    """
    candidates = default_xi_grid() if grid is None else tuple(float(v) for v in grid)
    if not candidates:
        raise ValidationError("the ratio grid must be non-empty")
    if data.n < data.p:
        raise EstimationError(
            f"{data.n} stacked rows cannot identify {data.p} fixed effects")
    best: MixedFit | None = None
    failures = 0
    for xi in candidates:
        xi = _check_ratio(xi)
        try:
            C, b, logdet = _gls_blocks(data, xi, method)
            beta = _solve_spd(C, b, "the GLS normal matrix")
            quad = 0.0
            for X, y in zip(data.blocks, data.y_blocks()):
                r = y - X @ beta
                gram_r = X.T @ r
                inner = np.eye(data.p) + xi * (X.T @ X)
                quad += float(r @ r) - xi * float(gram_r @ cho_solve(
                    cho_factor(inner, lower=True), gram_r))
        except (SingularMatrixError, LinAlgError):
            failures += 1
            continue
        if quad <= 0:
            failures += 1
            continue
        sigma_sq = quad / data.n
        loglik = -0.5 * (data.n * np.log(2.0 * np.pi * sigma_sq) + logdet + data.n)
        if best is None or loglik > best.profile_loglik:
            best = MixedFit(fixed_effects=beta, xi=xi,
                            sigma_eps_sq=sigma_sq, sigma_gamma_sq=xi * sigma_sq,
                            profile_loglik=float(loglik))
    if best is None:
        raise EstimationError(
            f"the mixed-model fit failed at all {failures} grid ratios")
    return best


def plain_ridge(X, y, lam: float) -> LinearFit:
    """Zero-target ridge on a single batch: the no-memory baseline."""
    X = np.asarray(X, dtype=float)
    return fit_targeted_ridge(X, y, lam, np.zeros(X.shape[1]))
