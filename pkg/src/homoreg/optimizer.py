"""Blockwise majorize-minimize solver.

Each outer iteration majorizes the loss by a least-squares surrogate and
then updates, in order, the sparse factor ``U`` (one projected gradient step
with row hard-thresholding), the orthonormal factor ``V`` (orthogonal
Procrustes), the heterogeneous coefficients ``A`` (least squares) and the
column memberships ``g`` (K-means in the metric induced by ``U``).  All four
updates are non-increasing on the surrogate, so the penalized likelihood
decreases whenever the majorization holds over the step; a guard that
inflates the curvature weight enforces this when it does not.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logit

from .families import curvature_weight, get_family, neg_log_likelihood
from .penalty import Membership, fusion_penalty, group_means, kmeans
from .surrogate import W_FLOOR, build_surrogate, check_orthonormal, quadratic_term

logger = logging.getLogger(__name__)

# objective increase tolerated before an iterate is rejected
ACCEPT_SLACK = 1e-12
# relative increase beyond which an exhausted guard is reported as divergence
DIVERGENCE_TOL = 1e-6


class DivergenceError(RuntimeError):
    """The objective increased even after the descent guard was exhausted."""

    def __init__(self, message, objective_trace):
        super().__init__(message)
        self.objective_trace = np.asarray(objective_trace)


@dataclass
class ModelState:
    A: np.ndarray
    U: np.ndarray
    V: np.ndarray
    g: Membership
    M: np.ndarray

    @property
    def B(self):
        return self.U @ self.V.T

    def copy(self):
        return ModelState(self.A.copy(), self.U.copy(), self.V.copy(), self.g, self.M.copy())


@dataclass(frozen=True)
class FixedStep:
    value: float


@dataclass(frozen=True)
class Backtracking:
    init: float | None = None  # None -> 1 / (w * sigma_max(X)^2 + 2 * lam)
    shrink: float = 0.5
    max_tries: int = 30


@dataclass(frozen=True)
class Hyperparams:
    s: int
    r: int
    K: int
    lam: float = 0.0
    step: FixedStep | Backtracking = field(default_factory=Backtracking)
    tol_rel_obj: float = 1e-6
    max_iter: int = 500
    seed: int = 0
    kmeans_restarts: int = 2
    max_inflate: int = 40

    def validate(self, p, m):
        if not 1 <= self.s <= p:
            raise ValueError(f"s={self.s} must lie in [1, p={p}]")
        if not 1 <= self.r <= min(p, m):
            raise ValueError(f"r={self.r} must lie in [1, min(p, m)={min(p, m)}]")
        if not 1 <= self.K <= m:
            raise ValueError(f"K={self.K} must lie in [1, m={m}]")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.tol_rel_obj <= 0:
            raise ValueError("tol_rel_obj must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if isinstance(self.step, FixedStep) and self.step.value < 0:
            raise ValueError("step size must be non-negative")
        if isinstance(self.step, Backtracking) and not 0 < self.step.shrink < 1:
            raise ValueError("backtracking shrink must lie in (0, 1)")


@dataclass
class FitReport:
    """Outcome of :func:`fit`.

    ``surrogate_trace[t]`` holds the surrogate value at the start of iteration
    ``t`` and after each of the U, V, A and cluster updates (five entries).
    """

    state: ModelState
    objective_trace: np.ndarray
    surrogate_trace: list
    w_trace: np.ndarray
    n_iter: int
    converged: bool


def derive_seed(*keys):
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def nonzero_rows(U):
    return int(np.count_nonzero(np.any(U != 0, axis=1)))


def hard_threshold_rows(U, s):
    """Keep the ``s`` rows of largest Euclidean norm and zero the rest.

    Ties are broken in favour of the lower row index.
    """
    U = np.asarray(U, dtype=float)
    p = U.shape[0]
    if not 1 <= s <= p:
        raise ValueError(f"s={s} must lie in [1, {p}]")
    if s == p:
        return U.copy()
    norms = np.sqrt(np.sum(U * U, axis=1))
    keep = np.argsort(-norms, kind="stable")[:s]
    out = np.zeros_like(U)
    out[keep] = U[keep]
    return out


def _u_objective(sp, A, U, V, g):
    B = U @ V.T
    value = quadratic_term(sp, A, B)
    if sp.lam:
        value += 0.5 * sp.lam * fusion_penalty(B, g)
    return value


def surrogate_gradient_U(sp, state, U=None):
    """Gradient of the surrogate with respect to ``U`` at fixed A, V, g."""
    U = state.U if U is None else U
    X, Z = sp.data.X, sp.data.Z
    V = state.V
    R0 = sp.Y_work - Z @ state.A
    grad = sp.w * (X.T @ (X @ U) - X.T @ (R0 @ V))
    if sp.lam:
        # V' L V with L = 2 (I - P): P V stacks each row's group mean
        centers = group_means(V, state.g)[state.g.labels]
        grad = grad + sp.lam * U @ (2.0 * V.T @ (V - centers))
    return grad


def default_step(sp, lam, sigma2=None):
    if sigma2 is None:
        sigma2 = np.linalg.norm(sp.data.X, 2) ** 2
    denom = sp.w * sigma2 + 2.0 * lam
    return 1.0 / denom if denom > 0 else 1.0


def update_U(sp, state, hp, sigma2=None):
    """One hard-thresholded gradient step on ``U``.

    Returns ``(U_new, eta)``.  Under backtracking the step is halved until the
    surrogate does not increase; if that never happens ``eta`` is 0 and ``U``
    is returned unchanged.
    """
    grad = surrogate_gradient_U(sp, state)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient in U update")
    U = state.U
    if isinstance(hp.step, FixedStep):
        eta = hp.step.value
        return hard_threshold_rows(U - eta * grad, hp.s), eta

    eta = hp.step.init if hp.step.init is not None else default_step(sp, hp.lam, sigma2)
    base = _u_objective(sp, state.A, U, state.V, state.g)
    for _ in range(hp.step.max_tries):
        cand = hard_threshold_rows(U - eta * grad, hp.s)
        if _u_objective(sp, state.A, cand, state.V, state.g) <= base:
            return cand, eta
        eta *= hp.step.shrink
    return U.copy(), 0.0


def procrustes_max(S):
    """``argmax tr(V S)`` over ``V`` with orthonormal columns (``S`` is r x m)."""
    S = np.asarray(S, dtype=float)
    try:
        Q1, _, Q2t = np.linalg.svd(S.T, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"SVD failed in V update: {exc}") from exc
    return Q1 @ Q2t


def update_V(sp, state, U):
    """Procrustes update of ``V`` given the fresh ``U``, then recentre.

    Returns ``(V_new, M_new)`` where ``M_new`` holds the group means of the
    rows of ``V_new`` under the current memberships.
    """
    X, Z = sp.data.X, sp.data.Z
    R0 = sp.Y_work - Z @ state.A
    S = sp.w * (U.T @ (X.T @ R0))
    if sp.lam:
        S = S + 2.0 * sp.lam * (U.T @ U) @ state.M[state.g.labels].T
    V = procrustes_max(S)
    return V, group_means(V, state.g)


class _ZSolver:
    """Least squares in ``Z`` through a cached thin QR factorization."""

    def __init__(self, Z):
        Z = np.asarray(Z, dtype=float)
        Q, R = np.linalg.qr(Z)
        diag = np.abs(np.diag(R))
        tol = max(Z.shape) * np.finfo(float).eps * (diag.max() if diag.size else 0.0)
        if diag.size == 0 or np.any(diag <= tol):
            rank = int(np.sum(diag > tol))
            raise np.linalg.LinAlgError(
                f"Z is rank deficient (rank {rank} < {Z.shape[1]} columns)"
            )
        self.Q, self.R = Q, R

    def solve(self, T):
        return solve_triangular(self.R, self.Q.T @ T)


def update_A(sp, B_next, Z=None, solver=None):
    """``argmin_A ||Y_work - X B_next - Z A||_F``."""
    Z = sp.data.Z if Z is None else Z
    solver = solver or _ZSolver(Z)
    return solver.solve(sp.Y_work - sp.data.X @ B_next)


def update_clusters(U, V, K, seed=0, restarts=2, init=None):
    """K-means on the rows of ``V`` in the metric ``||U (v - m)||``.

    Returns ``(Membership, M)``; ``M`` (K x r) holds the plain means of the
    member rows of ``V``.
    """
    U = np.asarray(U, dtype=float)
    V = np.asarray(V, dtype=float)
    m = V.shape[0]
    if K > m:
        raise ValueError(f"K={K} exceeds m={m}")
    # ||U x|| = ||R x|| for U = Q R, so cluster the r-dimensional points V R'
    R = np.linalg.qr(U, mode="r")
    points = V @ R.T
    init_labels = None if init is None else init.labels
    _, g = kmeans(points, K, restarts=restarts, seed=seed, init_labels=init_labels)
    return g, group_means(V, g)


def full_objective(family, data, state, lam):
    """Penalized negative log-likelihood ``l(A, UV') + (lam/2) tr(UV' L VU')``."""
    B = state.B
    value = neg_log_likelihood(family, data, state.A, B)
    if lam:
        value += 0.5 * lam * fusion_penalty(B, state.g)
    return value


def _intercepts(family, Y):
    ybar = Y.mean(axis=0)
    name = family.name
    if name == "normal":
        return ybar
    if name == "bernoulli":
        return logit(np.clip(ybar, 1e-3, 1 - 1e-3))
    if name == "poisson":
        return np.log(np.maximum(ybar, 1e-3))
    ref = max(1.0 - ybar.sum(), 1e-3)
    return np.log(np.maximum(ybar, 1e-3) / ref)


def default_init(family, data, hp, seed=None):
    """Starting point: intercept-only fit for ``A``, one ridge least-squares
    pass on the surrogate for ``B``, truncated SVD for ``(U, V)``, then row
    thresholding and clustering."""
    family = get_family(family)
    hp.validate(data.p, data.m)
    seed = hp.seed if seed is None else seed
    A = np.zeros((data.q, data.m))
    A[0] = _intercepts(family, data.Y)
    Theta = data.Z @ A
    w = curvature_weight(family, Theta, floor=W_FLOOR)
    Y_work = Theta + (data.Y - family.mean(Theta)) / w
    X = data.X
    XtX = X.T @ X
    ridge = 1e-3 * max(np.linalg.norm(XtX, 2), 1e-12)
    B0 = np.linalg.solve(XtX + ridge * np.eye(data.p), X.T @ (Y_work - Theta))
    A = _ZSolver(data.Z).solve(Y_work - X @ B0)
    P, sv, Qt = np.linalg.svd(B0, full_matrices=False)
    U = hard_threshold_rows(P[:, : hp.r] * sv[: hp.r], hp.s)
    V = Qt[: hp.r].T.copy()
    g, M = update_clusters(U, V, hp.K, seed=derive_seed(seed, 0xC1), restarts=max(hp.kmeans_restarts, 5))
    return ModelState(A=A, U=U, V=V, g=g, M=M)


def _check_state(state, data, hp):
    if state.A.shape != (data.q, data.m):
        raise ValueError(f"initial A has shape {state.A.shape}")
    if state.U.shape != (data.p, hp.r) or state.V.shape != (data.m, hp.r):
        raise ValueError(f"initial U/V shapes {state.U.shape}/{state.V.shape} do not match r={hp.r}")
    check_orthonormal(state.V)
    if nonzero_rows(state.U) > hp.s:
        raise ValueError("initial U has more than s nonzero rows")
    if state.g.m != data.m or state.g.n_clusters != hp.K:
        raise ValueError("initial membership does not match (m, K)")


def _mm_iteration(sp, state, hp, seed, sigma2, zsolver):
    values = [_u_objective(sp, state.A, state.U, state.V, state.g)]
    U, _ = update_U(sp, state, hp, sigma2=sigma2)
    values.append(_u_objective(sp, state.A, U, state.V, state.g))
    V, M = update_V(sp, state, U)
    after_v = ModelState(state.A, U, V, state.g, M)
    values.append(_u_objective(sp, state.A, U, V, state.g))
    A = update_A(sp, U @ V.T, solver=zsolver)
    values.append(_u_objective(sp, A, U, V, state.g))
    if hp.lam and hp.K < sp.data.m:
        g, M = update_clusters(U, V, hp.K, seed=seed, restarts=hp.kmeans_restarts, init=state.g)
    else:
        g, M = after_v.g, after_v.M
    values.append(_u_objective(sp, A, U, V, g))
    return ModelState(A, U, V, g, M), np.array(values)


def fit(family, data, hp, init=None):
    """Run the blockwise MM algorithm until the relative objective change
    falls below ``hp.tol_rel_obj`` or ``hp.max_iter`` iterations."""
    family = get_family(family)
    family.check_response(data.Y)
    hp.validate(data.p, data.m)
    state = default_init(family, data, hp) if init is None else init.copy()
    _check_state(state, data, hp)
    state.M = group_means(state.V, state.g)

    sigma2 = np.linalg.norm(data.X, 2) ** 2
    zsolver = _ZSolver(data.Z)
    obj = full_objective(family, data, state, hp.lam)
    objectives, surrogates, weights = [obj], [], []
    converged = False
    n_iter = 0
    for t in range(hp.max_iter):
        seed = derive_seed(hp.seed, t)
        worst = None
        for attempt in range(hp.max_inflate + 1):
            sp = build_surrogate(family, data, state, hp.lam, inflate=2.0**attempt)
            cand, values = _mm_iteration(sp, state, hp, seed, sigma2, zsolver)
            new_obj = full_objective(family, data, cand, hp.lam)
            if new_obj <= obj + ACCEPT_SLACK * (1.0 + abs(obj)):
                break
            worst = new_obj
            logger.debug("iter %d: objective rose to %.10g, inflating w", t, new_obj)
        else:
            rel = (worst - obj) / (1.0 + abs(obj))
            if rel > DIVERGENCE_TOL:
                raise DivergenceError(
                    f"objective increased by {rel:.3g} (relative) at iteration {t}",
                    objectives,
                )
            # no admissible move at machine precision: stationary
            converged = True
            break
        n_iter = t + 1
        change = abs(obj - new_obj) / (1.0 + abs(obj))
        state, obj = cand, new_obj
        objectives.append(obj)
        surrogates.append(values)
        weights.append(sp.w)
        logger.debug("iter %d: objective %.10g, w %.4g", t, obj, sp.w)
        if change < hp.tol_rel_obj:
            converged = True
            break
    return FitReport(
        state=state,
        objective_trace=np.array(objectives),
        surrogate_trace=surrogates,
        w_trace=np.array(weights),
        n_iter=n_iter,
        converged=converged,
    )
