"""Exponential-family machinery for multi-response GLMs.

Every family exposes the cumulant ``b`` evaluated row-wise on a matrix of
natural parameters, its gradient (the mean map) and the diagonal of its
Hessian.  Dispersion is fixed to one throughout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

# |theta| clamp for exponentials that have no stable closed form
THETA_CLAMP = 700.0


def _check_finite(theta):
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("natural parameters must be finite")
    return theta


class GlmFamily:
    """Base class for the response distributions.

    Subclasses implement the three kernels on a 2-d array ``Theta`` of shape
    ``(n, m)``.  ``curvature_factor`` is the multiplier applied to the maximal
    diagonal curvature when forming the majorization weight: the multinomial
    Hessian is not diagonal, so its diagonal must be doubled to dominate it.
    """

    name = "base"
    separable = True
    curvature_factor = 1.0

    def row_cumulant(self, Theta):
        raise NotImplementedError

    def mean(self, Theta):
        raise NotImplementedError

    def curvature(self, Theta):
        raise NotImplementedError

    def check_response(self, Y):
        pass

    def __repr__(self):
        return f"{type(self).__name__}()"

    def __eq__(self, other):
        return type(self) is type(other)

    def __hash__(self):
        return hash(type(self))


class Normal(GlmFamily):
    name = "normal"

    def row_cumulant(self, Theta):
        return 0.5 * np.sum(Theta**2, axis=1)

    def mean(self, Theta):
        return Theta.copy()

    def curvature(self, Theta):
        return np.ones_like(Theta)


class Bernoulli(GlmFamily):
    name = "bernoulli"

    def row_cumulant(self, Theta):
        return np.sum(np.logaddexp(0.0, Theta), axis=1)

    def mean(self, Theta):
        return expit(Theta)

    def curvature(self, Theta):
        p = expit(Theta)
        return p * (1.0 - p)

    def check_response(self, Y):
        if not np.all((Y == 0) | (Y == 1)):
            raise ValueError("Bernoulli responses must be 0/1")


class Poisson(GlmFamily):
    name = "poisson"

    def row_cumulant(self, Theta):
        return np.sum(np.exp(np.minimum(Theta, THETA_CLAMP)), axis=1)

    def mean(self, Theta):
        return np.exp(np.minimum(Theta, THETA_CLAMP))

    def curvature(self, Theta):
        return np.exp(np.minimum(Theta, THETA_CLAMP))

    def check_response(self, Y):
        if np.any(Y < 0) or not np.all(Y == np.round(Y)):
            raise ValueError("Poisson responses must be non-negative integers")


class MultinomialLogit(GlmFamily):
    """Multinomial logit with an implicit reference category of logit zero.

    ``Y`` carries the ``m`` non-reference indicators; a row of zeros means the
    observation fell in the reference category.
    """

    name = "multinomial"
    separable = False
    curvature_factor = 2.0

    @staticmethod
    def _shifted(Theta):
        # log-sum-exp over [Theta_i, 0], shifted by the row max (at least 0)
        top = Theta.max(axis=1, initial=0.0)
        E = np.exp(Theta - top[:, None])
        return top, E, np.exp(-top) + E.sum(axis=1)

    def row_cumulant(self, Theta):
        top, _, total = self._shifted(Theta)
        return top + np.log(total)

    def mean(self, Theta):
        _, E, total = self._shifted(Theta)
        return E / total[:, None]

    def curvature(self, Theta):
        p = self.mean(Theta)
        return p * (1.0 - p)

    def check_response(self, Y):
        if not np.all((Y == 0) | (Y == 1)) or np.any(Y.sum(axis=1) > 1):
            raise ValueError(
                "multinomial responses must be one-hot rows (all-zero = reference)"
            )


FAMILIES = {
    cls.name: cls for cls in (Normal, Bernoulli, Poisson, MultinomialLogit)
}


def get_family(family):
    """Return a family instance from a name or pass an instance through."""
    if isinstance(family, GlmFamily):
        return family
    try:
        return FAMILIES[str(family).lower()]()
    except KeyError:
        raise ValueError(
            f"unknown family {family!r}; expected one of {sorted(FAMILIES)}"
        ) from None


@dataclass(frozen=True)
class Dataset:
    """Responses ``Y`` (n x m), heterogeneous covariates ``Z`` (n x q, first
    column the intercept) and homogeneous covariates ``X`` (n x p)."""

    Y: np.ndarray
    Z: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        for name in ("Y", "Z", "X"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 2:
                raise ValueError(f"{name} must be 2-d, got shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)
        n = self.Y.shape[0]
        if n < 1:
            raise ValueError("dataset needs at least one observation")
        if self.Z.shape[0] != n or self.X.shape[0] != n:
            raise ValueError(
                f"row counts disagree: Y {n}, Z {self.Z.shape[0]}, X {self.X.shape[0]}"
            )
        if self.Z.shape[1] < 1 or not np.all(self.Z[:, 0] == 1.0):
            raise ValueError("first column of Z must be the all-ones intercept")

    @property
    def n(self):
        return self.Y.shape[0]

    @property
    def m(self):
        return self.Y.shape[1]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def q(self):
        return self.Z.shape[1]

    def subset(self, rows):
        return Dataset(self.Y[rows], self.Z[rows], self.X[rows])


def link_value(family, theta):
    """Cumulant ``b(theta)`` for a single natural-parameter vector."""
    family = get_family(family)
    theta = _check_finite(theta)
    if theta.ndim != 1:
        raise ValueError("theta must be a vector")
    return float(family.row_cumulant(theta[None, :])[0])


def mean_map(family, theta):
    """Gradient of the cumulant, i.e. the response mean."""
    family = get_family(family)
    theta = _check_finite(theta)
    if theta.ndim != 1:
        raise ValueError("theta must be a vector")
    return family.mean(theta[None, :])[0]


def curvature_weight(family, Theta, floor=0.0):
    """Majorization weight: the largest diagonal curvature over all entries,
    doubled for the multinomial family."""
    family = get_family(family)
    Theta = np.atleast_2d(_check_finite(Theta))
    w = family.curvature_factor * float(np.max(family.curvature(Theta)))
    w = max(w, floor)
    if not np.isfinite(w) or w <= 0.0:
        raise ValueError(f"degenerate curvature weight {w!r}")
    return w


def _check_coefs(data, A, B):
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != (data.q, data.m):
        raise ValueError(f"A has shape {A.shape}, expected {(data.q, data.m)}")
    if B.shape != (data.p, data.m):
        raise ValueError(f"B has shape {B.shape}, expected {(data.p, data.m)}")
    return A, B


def natural_parameters(data, A, B):
    A, B = _check_coefs(data, A, B)
    return data.Z @ A + data.X @ B


def neg_log_likelihood(family, data, A, B):
    """``sum_i b(theta_i) - tr(Y' Theta)`` with ``Theta = Z A + X B``."""
    family = get_family(family)
    Theta = natural_parameters(data, A, B)
    return float(np.sum(family.row_cumulant(Theta)) - np.sum(data.Y * Theta))


def nll_gradient(family, data, A, B):
    """Gradients of :func:`neg_log_likelihood` with respect to ``A`` and ``B``."""
    family = get_family(family)
    Theta = natural_parameters(data, A, B)
    R = family.mean(Theta) - data.Y
    return data.Z.T @ R, data.X.T @ R
