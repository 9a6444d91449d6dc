"""Quadratic majorizer of the negative log-likelihood.

At an expansion point ``Theta_t`` the loss is bounded (locally) by

    (w/2) ||Y_work - Z A - X B||_F^2 + const,
    Y_work = Theta_t + (Y - mean(Theta_t)) / w,

with ``w`` the curvature weight.  The constant is never formed; descent
checks compare values at matched points.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .families import Dataset, GlmFamily, curvature_weight, get_family
from .penalty import Membership, fusion_penalty

W_FLOOR = 1e-8
ORTHO_TOL = 1e-8


@dataclass(frozen=True)
class SurrogateProblem:
    data: Dataset
    Theta: np.ndarray
    Y_work: np.ndarray
    w: float
    lam: float
    family: GlmFamily


def build_surrogate(family, data, state, lam, inflate=1.0):
    """Majorize the loss at ``(state.A, state.U @ state.V.T)``.

    ``inflate`` scales the curvature weight up; values above one give a more
    conservative majorizer and are used by the optimizer's descent guard.
    """
    family = get_family(family)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if inflate < 1.0:
        raise ValueError("inflate must be >= 1")
    B = state.U @ state.V.T
    Theta = data.Z @ state.A + data.X @ B
    w = inflate * curvature_weight(family, Theta, floor=W_FLOOR)
    Y_work = Theta + (data.Y - family.mean(Theta)) / w
    return SurrogateProblem(
        data=data, Theta=Theta, Y_work=Y_work, w=w, lam=float(lam), family=family
    )


def quadratic_term(sp, A, B):
    R = sp.Y_work - sp.data.Z @ A - sp.data.X @ B
    return 0.5 * sp.w * float(np.sum(R * R))


def check_orthonormal(V, tol=ORTHO_TOL):
    V = np.asarray(V, dtype=float)
    err = np.linalg.norm(V.T @ V - np.eye(V.shape[1]))
    if err > tol:
        raise ValueError(f"V columns are not orthonormal (||V'V - I||_F = {err:.3g})")


def surrogate_objective(sp, A, U, V, g):
    """``(w/2)||Y_work - ZA - XUV'||^2 + (lam/2) tr(U V' L V U')``."""
    A = np.asarray(A, dtype=float)
    U = np.asarray(U, dtype=float)
    V = np.asarray(V, dtype=float)
    data = sp.data
    if A.shape != (data.q, data.m) or U.shape[0] != data.p or V.shape[0] != data.m:
        raise ValueError(
            f"shape mismatch: A {A.shape}, U {U.shape}, V {V.shape} "
            f"for q={data.q}, p={data.p}, m={data.m}"
        )
    if U.shape[1] != V.shape[1]:
        raise ValueError("U and V must share the rank dimension")
    if not isinstance(g, Membership) or g.m != data.m:
        raise ValueError("membership does not match the number of responses")
    check_orthonormal(V)
    B = U @ V.T
    value = quadratic_term(sp, A, B)
    if sp.lam:
        value += 0.5 * sp.lam * fusion_penalty(B, g)
    return value
