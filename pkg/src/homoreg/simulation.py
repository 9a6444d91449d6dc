"""Synthetic designs, evaluation metrics, cross-validation and the
convergence-rate diagnostic."""
from __future__ import annotations

import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import log_softmax

from .families import Dataset, get_family, neg_log_likelihood
from .optimizer import DivergenceError, Hyperparams, derive_seed, fit
from .penalty import Membership

# named RNG substreams
STREAM_COEFS, STREAM_COVARIATES, STREAM_RESPONSES, STREAM_FOLDS = 1, 2, 3, 4


@dataclass(frozen=True)
class SimConfig:
    """Simulation design.

    ``q`` counts the random heterogeneous covariates; the generated ``Z`` has
    ``q + 1`` columns with the intercept first.  For the multinomial family
    ``n`` may be left unset and derived as ``n_ratio * m``.
    """

    p: int
    s_true: int
    r_true: int = 3
    K: int = 3
    csize: int = 10
    n: int | None = None
    n_ratio: int | None = None
    q: int = 1
    epsilon: float = 0.1
    delta: float = 3.0
    d: float = 2.0
    snr: float = 3.0
    family: str = "normal"
    seed: int = 0

    def __post_init__(self):
        get_family(self.family)
        if self.K < 1 or self.csize < 1:
            raise ValueError("K and csize must be positive")
        if not 1 <= self.s_true <= self.p:
            raise ValueError("need 1 <= s_true <= p")
        if not 1 <= self.r_true <= min(self.s_true, self.m):
            raise ValueError("need 1 <= r_true <= min(s_true, m)")
        if self.q < 0:
            raise ValueError("q must be non-negative")
        if self.n is None and self.n_ratio is None:
            raise ValueError("set n or n_ratio")
        if self.sample_size < 1:
            raise ValueError("sample size must be positive")

    @property
    def m(self):
        return self.K * self.csize

    @property
    def sample_size(self):
        return self.n if self.n is not None else self.n_ratio * self.m

    def rng(self, stream):
        return np.random.default_rng([self.seed, stream])


@dataclass(frozen=True)
class EvalResult:
    err: float
    prediction: float | None = None
    kl: float | None = None
    clamped: bool = False


def segment_centers(K, delta):
    """Scalar centers ``(-1)^(k+1) * floor((k+1)/2) * delta`` for k = 1..K."""
    k = np.arange(1, K + 1)
    return (-1.0) ** (k + 1) * np.floor((k + 1) / 2) * delta


def _ar_cholesky(dim, rho=0.5):
    idx = np.arange(dim)
    return np.linalg.cholesky(rho ** np.abs(idx[:, None] - idx[None, :]))


def gen_covariates(cfg):
    """``Z = [1, z]`` (n x (q+1)) and ``X`` (n x p); rows of ``z`` and ``X``
    are independent N(0, Sigma) draws with ``Sigma_jk = 0.5^|j-k|``."""
    rng = cfg.rng(STREAM_COVARIATES)
    n = cfg.sample_size
    X = rng.standard_normal((n, cfg.p)) @ _ar_cholesky(cfg.p).T
    if cfg.q:
        z = rng.standard_normal((n, cfg.q)) @ _ar_cholesky(cfg.q).T
    else:
        z = np.empty((n, 0))
    Z = np.hstack([np.ones((n, 1)), z])
    return Z, X


def gen_coefficients(cfg, Z=None, X=None):
    """Clustered, low-rank, row-sparse truth.

    Returns ``(A_star, B_star, g_star)`` with ``A_star`` of shape
    ``(q+1, m)`` (intercept row first).  The multinomial intercepts centre each
    category's log-intensity on the reference using the covariate sample
    means, which default to zero when ``Z``/``X`` are not supplied.
    """
    rng = cfg.rng(STREAM_COEFS)
    m, r, s, p, q = cfg.m, cfg.r_true, cfg.s_true, cfg.p, cfg.q
    labels = np.repeat(np.arange(cfg.K), cfg.csize)
    centers = segment_centers(cfg.K, cfg.delta)
    V_tilde = centers[labels][:, None] + cfg.epsilon * rng.standard_normal((m, r))
    Q = rng.standard_normal((s, s))
    U_top = np.linalg.svd(Q)[0][:, :r]
    U_tilde = np.vstack([U_top, np.zeros((p - s, r))])
    B_tilde = U_tilde @ V_tilde.T
    A_tilde = rng.standard_normal((q, m))

    if cfg.family == "multinomial":
        xbar = np.zeros(p) if X is None else np.asarray(X).mean(axis=0)
        zbar = np.zeros(q) if Z is None else np.asarray(Z)[:, 1:].mean(axis=0)
        alpha0 = 0.0 - zbar @ A_tilde - xbar @ B_tilde  # log(rho_0) = 0
    else:
        mag = rng.uniform(0.5, 1.0, size=m)
        alpha0 = np.where(rng.random(m) < 0.5, -mag, mag)

    stacked = np.vstack([alpha0[None, :], A_tilde, B_tilde])
    d_max = np.linalg.norm(stacked, 2)
    A_star = cfg.d * np.vstack([alpha0[None, :], A_tilde]) / d_max
    B_star = cfg.d * B_tilde / d_max
    return A_star, B_star, Membership(labels, cfg.K)


def noise_sd(signal, snr):
    if not np.isfinite(snr):
        return 0.0
    n, m = signal.shape
    return float(np.linalg.norm(signal) / (snr * math.sqrt(n * m)))


def gen_responses_linear(cfg, Z, X, A_star, B_star):
    """``Y = Z A* + X B* + E`` with the noise level calibrated to ``cfg.snr``."""
    rng = cfg.rng(STREAM_RESPONSES)
    signal = Z @ A_star + X @ B_star
    sigma = noise_sd(signal, cfg.snr)
    return signal + sigma * rng.standard_normal(signal.shape)


def category_probabilities(Theta):
    """(n, m+1) softmax over ``[Theta, 0]``; the last column is the reference."""
    aug = np.hstack([Theta, np.zeros((Theta.shape[0], 1))])
    return np.exp(log_softmax(aug, axis=1))


def gen_responses_multinomial(cfg, Z, X, A_star, B_star, rng=None):
    """One categorical draw per row, one-hot encoded (reference = zero row)."""
    rng = cfg.rng(STREAM_RESPONSES) if rng is None else rng
    P = category_probabilities(Z @ A_star + X @ B_star)
    cum = np.cumsum(P, axis=1)
    u = rng.random(P.shape[0]) * cum[:, -1]
    cat = np.minimum((cum < u[:, None]).sum(axis=1), P.shape[1] - 1)
    m = P.shape[1] - 1
    Y = np.zeros((P.shape[0], m))
    real = cat < m
    Y[np.flatnonzero(real), cat[real]] = 1.0
    return Y


def gen_responses_glm(cfg, Z, X, A_star, B_star):
    """Independent Bernoulli or Poisson draws with canonical links."""
    rng = cfg.rng(STREAM_RESPONSES)
    mean = get_family(cfg.family).mean(Z @ A_star + X @ B_star)
    if cfg.family == "bernoulli":
        return (rng.random(mean.shape) < mean).astype(float)
    if cfg.family == "poisson":
        return rng.poisson(mean).astype(float)
    raise ValueError(f"use the dedicated generator for family {cfg.family!r}")


def simulate(cfg):
    """Full draw: ``(Dataset, (A_star, B_star, g_star))``."""
    Z, X = gen_covariates(cfg)
    A_star, B_star, g_star = gen_coefficients(cfg, Z, X)
    if cfg.family == "normal":
        Y = gen_responses_linear(cfg, Z, X, A_star, B_star)
    elif cfg.family == "multinomial":
        Y = gen_responses_multinomial(cfg, Z, X, A_star, B_star)
    else:
        Y = gen_responses_glm(cfg, Z, X, A_star, B_star)
    return Dataset(Y, Z, X), (A_star, B_star, g_star)


def kl_divergence(Theta_hat, Theta_true):
    """Mean over rows of ``sum_j P_hat log(P_hat / P)`` across all m+1
    categories.  Returns ``(kl, clamped)``; ``clamped`` flags true
    probabilities below 1e-300."""
    pad = lambda T: np.hstack([T, np.zeros((T.shape[0], 1))])
    log_hat = log_softmax(pad(Theta_hat), axis=1)
    log_true = log_softmax(pad(Theta_true), axis=1)
    floor = math.log(1e-300)
    clamped = bool(np.any(log_true < floor))
    log_true = np.maximum(log_true, floor)
    kl = np.sum(np.exp(log_hat) * (log_hat - log_true)) / Theta_hat.shape[0]
    return float(kl), clamped


def evaluate(family, truth, estimate, Z, X):
    """Estimation error, plus prediction error (Gaussian) or KL (multinomial)."""
    family = get_family(family)
    A_star, B_star = (np.asarray(a, dtype=float) for a in truth)
    A_hat, B_hat = (np.asarray(a, dtype=float) for a in estimate)
    if A_hat.shape != A_star.shape or B_hat.shape != B_star.shape:
        raise ValueError("estimate and truth shapes differ")
    dA, dB = A_hat - A_star, B_hat - B_star
    err = float(np.sum(dA**2) + np.sum(dB**2))
    if family.name == "multinomial":
        kl, clamped = kl_divergence(Z @ A_hat + X @ B_hat, Z @ A_star + X @ B_star)
        return EvalResult(err=err, kl=kl, clamped=clamped)
    if family.name == "normal":
        pred = float(np.sum((Z @ dA + X @ dB) ** 2))
        return EvalResult(err=err, prediction=pred)
    return EvalResult(err=err)


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


def seq_e(a, b, c):
    """``c`` equally spaced points on ``[a, b]``, exponentiated."""
    return np.exp(np.linspace(a, b, int(c)))


@dataclass(frozen=True)
class CvGrid:
    ranks: tuple = tuple(range(2, 11))
    sparsities: tuple = tuple(range(10, 21))
    Ks: tuple = tuple(range(2, 11))
    lambdas: tuple = field(default_factory=lambda: tuple(seq_e(-2 * math.log(10), 0, 50)))


def resolve_threads(threads=None):
    if threads is None:
        threads = os.environ.get("HOMOREG_THREADS")
    return max(1, int(threads)) if threads else 1


def make_folds(n, folds, seed, labels=None):
    """Fold index per observation: seeded shuffle, then contiguous blocks.

    With ``labels`` the shuffled rows are stably sorted by label and dealt
    round-robin so every fold sees each category in proportion.
    """
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if folds > n:
        raise ValueError(f"cannot split {n} observations into {folds} folds")
    order = np.random.default_rng([seed, STREAM_FOLDS]).permutation(n)
    assign = np.empty(n, dtype=np.int64)
    if labels is None:
        assign[order] = np.arange(n) * folds // n
    else:
        order = order[np.argsort(np.asarray(labels)[order], kind="stable")]
        assign[order] = np.arange(n) % folds
    return assign


def _category(Y):
    m = Y.shape[1]
    return np.where(Y.sum(axis=1) > 0, np.argmax(Y, axis=1), m)


def _cv_score(family, data, train, test, hp):
    report = fit(family, data.subset(train), hp)
    st = report.state
    return neg_log_likelihood(family, data.subset(test), st.A, st.B) / test.size


def cross_validate(family, data, grids=None, folds=5, seed=0, base=None, threads=None):
    """Two-stage CV.

    Stage 1 picks ``(s, r)`` with ``lam = 0``; stage 2 picks ``(K, lam)`` with
    ``(s, r)`` fixed at the stage-1 choice.  Scores are held-out negative
    log-likelihood per observation, averaged over folds.  Returns
    ``(best Hyperparams, rows)`` with one row per grid point and fold.
    """
    family = get_family(family)
    grids = grids or CvGrid()
    base = base or Hyperparams(s=1, r=1, K=1)
    labels = _category(data.Y) if family.name == "multinomial" else None
    assign = make_folds(data.n, folds, seed, labels)
    splits = []
    for k in range(folds):
        test = np.flatnonzero(assign == k)
        train = np.flatnonzero(assign != k)
        if test.size == 0 or train.size < max(data.q + 1, 2):
            raise ValueError(f"fold {k} is too small to fit ({train.size} training rows)")
        splits.append((train, test))

    pool = ThreadPoolExecutor(resolve_threads(threads))

    def run(stage, points):
        jobs = []
        for gi, hp in enumerate(points):
            for k, (train, test) in enumerate(splits):
                hp_k = replace(hp, seed=derive_seed(seed, stage, gi, k))
                jobs.append((hp, k, pool.submit(_score_or_inf, family, data, train, test, hp_k)))
        rows = []
        for hp, k, fut in jobs:
            rows.append(dict(stage=stage, s=hp.s, r=hp.r, K=hp.K, lam=hp.lam, fold=k, score=fut.result()))
        means = [np.mean([row["score"] for row in rows[i * folds:(i + 1) * folds]]) for i in range(len(points))]
        return rows, points[int(np.argmin(means))]

    with pool:
        stage1 = [
            replace(base, s=s, r=r, K=1, lam=0.0)
            for r, s in itertools.product(grids.ranks, grids.sparsities)
            if s <= data.p and r <= min(data.p, data.m)
        ]
        if not stage1:
            raise ValueError("no feasible (s, r) grid point")
        rows1, best1 = run(1, stage1)
        stage2 = [
            replace(best1, K=K, lam=float(lam))
            for K, lam in itertools.product(grids.Ks, grids.lambdas)
            if K <= data.m
        ]
        if not stage2:
            raise ValueError("no feasible (K, lam) grid point")
        rows2, best2 = run(2, stage2)
    return replace(best2, seed=base.seed), rows1 + rows2


def _score_or_inf(family, data, train, test, hp):
    try:
        return _cv_score(family, data, train, test, hp)
    except DivergenceError:
        return math.inf


# ---------------------------------------------------------------------------
# rate diagnostic
# ---------------------------------------------------------------------------


def theoretical_rate(m, K, s, p, r, gamma):
    """``sqrt(r gamma (s+m)) + sqrt(s log p + m log K)
    + sqrt((s + min(K^2, m)) min(r, K) log m)`` with natural logs."""
    if min(m, K, s, p, r) <= 0 or gamma < 0:
        raise ValueError("m, K, s, p, r must be positive and gamma non-negative")
    return (
        math.sqrt(r * gamma * (s + m))
        + math.sqrt(s * math.log(p) + m * math.log(K))
        + math.sqrt((s + min(K * K, m)) * min(r, K) * math.log(m))
    )


def sparse_operator_norm(Z, X, s, exact=None):
    """``sup ||[Z, X] v|| / ||v||`` over ``v`` whose X-part has at most ``s``
    nonzeros.

    Exact by enumerating supports when ``exact`` is true (default when the
    number of supports is at most 5000); otherwise the full spectral norm,
    which upper-bounds it.
    """
    Z = np.asarray(Z, dtype=float)
    X = np.asarray(X, dtype=float)
    p = X.shape[1]
    s = min(s, p)
    if exact is None:
        exact = math.comb(p, s) <= 5000
    if not exact:
        return float(np.linalg.norm(np.hstack([Z, X]), 2))
    best = 0.0
    for support in itertools.combinations(range(p), s):
        best = max(best, float(np.linalg.norm(np.hstack([Z, X[:, support]]), 2)))
    return best


def zeta_n_sq(n, m, K, s, p, r, x_norm):
    """Threshold on the within-group scatter separating the two rate regimes;
    ``x_norm`` is the 2s-sparse operator norm of ``[Z, X]``."""
    terms = (
        s * math.log(p) + m * math.log(K),
        (s + min(K * K, m)) * min(r, K) * math.log(m),
        r * (s + m),
    )
    return min(terms) * x_norm**2 / n**2
