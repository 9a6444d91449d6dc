"""Acceptance criteria, one test each.  Every test records a PASS/FAIL line
that is repeated in the pytest terminal summary."""
import itertools
import json
import math
import time
from dataclasses import replace

import numpy as np
from scipy.stats import ortho_group

from homoreg.cli import main
from homoreg.families import FAMILIES, Dataset, get_family, natural_parameters, neg_log_likelihood, nll_gradient
from homoreg.optimizer import Hyperparams, ModelState, fit, hard_threshold_rows, update_clusters, update_V
from homoreg.penalty import Membership, build_laplacian, fusion_penalty, group_means, kmeans_penalty
from homoreg.simulation import (
    CvGrid,
    SimConfig,
    cross_validate,
    evaluate,
    gen_coefficients,
    gen_covariates,
    segment_centers,
    seq_e,
    simulate,
    theoretical_rate,
)
from homoreg.surrogate import build_surrogate, quadratic_term


def _one_hot(rng, n, m):
    cats = rng.integers(0, m + 1, size=n)
    Y = np.zeros((n, m))
    Y[np.flatnonzero(cats < m), cats[cats < m]] = 1.0
    return Y


def _partition_optimum(points, K):
    best = np.inf
    for labels in itertools.product(range(K), repeat=points.shape[0]):
        labels = np.array(labels)
        if np.unique(labels).size == K:
            g = Membership(labels, K)
            best = min(best, float(np.sum((points - group_means(points, g)[labels]) ** 2)))
    return best


def _non_increasing(values, slack=1e-8):
    values = np.asarray(values)
    return bool(np.all(np.diff(values) <= slack * (1 + np.abs(values[:-1]))))


def test_criterion_01_monotone_descent(acceptance):
    start = time.perf_counter()
    families = ["normal", "bernoulli", "poisson", "multinomial"]
    failures = []
    for seed in range(50):
        family = families[seed % 4]
        p = (10, 40, 100)[seed % 3]
        K, csize = (3, 10) if family != "multinomial" else (2, 5)
        cfg = SimConfig(p=p, s_true=min(p, 10), r_true=3, K=K, csize=csize, n=150 + 3 * seed,
                        epsilon=0.1, family=family, seed=seed)
        data, _ = simulate(cfg)
        hp = Hyperparams(s=min(p, 10), r=3, K=K, lam=(0.0, 0.1, 1.0, 10.0)[seed % 4], seed=seed, max_iter=150)
        report = fit(family, data, hp)
        ok = _non_increasing(report.objective_trace) and all(_non_increasing(v) for v in report.surrogate_trace)
        if not ok:
            failures.append(seed)
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 300
    acceptance(1, "monotone objective and surrogate traces on 50 fits", ok,
               f"failures={failures}, {elapsed:.0f}s")
    assert ok


def test_criterion_02_fusion_trace_identity(acceptance):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        p, m = int(rng.integers(1, 21)), int(rng.integers(1, 21))
        K = int(rng.integers(1, m + 1))
        g = Membership(rng.permutation(np.concatenate([np.arange(K), rng.integers(0, K, m - K)])), K)
        B = rng.normal(size=(p, m))
        trace = np.trace(B @ build_laplacian(g).L @ B.T)
        value = fusion_penalty(B, g)
        worst = max(worst, abs(value - trace) / max(abs(trace), 1e-300) if trace else abs(value))
    ok = worst < 1e-10
    acceptance(2, "fusion_penalty(B, g) == tr(B L B')", ok, f"max rel err {worst:.2e}")
    assert ok


def test_criterion_03_majorization(acceptance):
    rng = np.random.default_rng(3)
    worst_gap = -np.inf
    for _ in range(100):
        n, p, m = int(rng.integers(5, 30)), int(rng.integers(1, 5)), int(rng.integers(1, 6))
        Z = np.hstack([np.ones((n, 1)), rng.normal(size=(n, 1))])
        data = Dataset(_one_hot(rng, n, m), Z, rng.normal(size=(n, p)))
        V = np.linalg.qr(rng.normal(size=(m, 1)))[0]
        state = ModelState(rng.normal(scale=0.5, size=(2, m)), rng.normal(scale=0.5, size=(p, 1)), V,
                           Membership(np.zeros(m, dtype=int), 1), np.zeros((1, 1)))
        sp = build_surrogate("multinomial", data, state, 0.0)
        A2 = state.A + rng.normal(scale=0.05, size=state.A.shape)
        B2 = state.B + rng.normal(scale=0.05, size=state.B.shape)
        dl = neg_log_likelihood("multinomial", data, A2, B2) - neg_log_likelihood("multinomial", data, state.A, state.B)
        dq = quadratic_term(sp, A2, B2) - quadratic_term(sp, state.A, state.B)
        worst_gap = max(worst_gap, dl - dq)

    n = 15
    Z = np.hstack([np.ones((n, 1)), rng.normal(size=(n, 1))])
    data = Dataset(rng.normal(size=(n, 4)), Z, rng.normal(size=(n, 3)))
    V = np.linalg.qr(rng.normal(size=(4, 2)))[0]
    state = ModelState(rng.normal(size=(2, 4)), rng.normal(size=(3, 2)), V, Membership([0, 0, 1, 1], 2), np.zeros((2, 2)))
    sp = build_surrogate("normal", data, state, 0.0)
    diffs = []
    for _ in range(100):
        A2, B2 = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
        diffs.append(neg_log_likelihood("normal", data, A2, B2) - quadratic_term(sp, A2, B2))
    spread = float(np.ptp(diffs))
    ok = worst_gap <= 1e-8 and spread < 1e-9
    acceptance(3, "multinomial tangency inequality and Gaussian exactness", ok,
               f"max gap {worst_gap:.2e}, Gaussian spread {spread:.2e}")
    assert ok


def test_criterion_04_gradient_oracles(acceptance):
    rng = np.random.default_rng(4)
    worst = 0.0
    h = 1e-6
    for name in sorted(FAMILIES):
        for _ in range(100):
            n, m, p = int(rng.integers(3, 7)), int(rng.integers(1, 4)), 2
            Z = np.hstack([np.ones((n, 1)), rng.normal(size=(n, 1))])
            X = rng.normal(size=(n, p))
            if name == "normal":
                Y = rng.normal(size=(n, m))
            elif name == "bernoulli":
                Y = rng.integers(0, 2, size=(n, m)).astype(float)
            elif name == "poisson":
                Y = rng.poisson(2.0, size=(n, m)).astype(float)
            else:
                Y = _one_hot(rng, n, m)
            data = Dataset(Y, Z, X)
            A, B = rng.normal(scale=0.5, size=(2, m)), rng.normal(scale=0.5, size=(p, m))
            gA, gB = nll_gradient(name, data, A, B)
            analytic = np.concatenate([gA.ravel(), gB.ravel()])
            x = np.concatenate([A.ravel(), B.ravel()])
            f = lambda v: neg_log_likelihood(name, data, v[: A.size].reshape(A.shape), v[A.size :].reshape(B.shape))
            fd = np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(x.size)])
            worst = max(worst, np.linalg.norm(analytic - fd) / (1 + np.linalg.norm(analytic)))

    hess_err = 0.0
    for n, p, m in [(4, 3, 2), (3, 2, 2), (4, 3, 1)]:
        X = rng.normal(size=(n, p))
        data = Dataset(_one_hot(rng, n, m), np.ones((n, 1)), X)
        A, B = np.zeros((1, m)), rng.normal(size=(p, m))
        P = get_family("multinomial").mean(natural_parameters(data, A, B))
        oracle = sum(np.kron(np.diag(P[i]) - np.outer(P[i], P[i]), np.outer(X[i], X[i])) for i in range(n))
        vec = B.ravel(order="F")
        numeric = np.empty((p * m, p * m))
        for k in range(p * m):
            e = np.zeros(p * m)
            e[k] = 1e-5
            up = nll_gradient("multinomial", data, A, (vec + e).reshape((p, m), order="F"))[1]
            dn = nll_gradient("multinomial", data, A, (vec - e).reshape((p, m), order="F"))[1]
            numeric[:, k] = (up - dn).ravel(order="F") / 2e-5
        hess_err = max(hess_err, np.linalg.norm(numeric - oracle) / np.linalg.norm(oracle))
    ok = worst < 1e-5 and hess_err < 1e-4
    acceptance(4, "analytic gradients and multinomial Hessian vs finite differences", ok,
               f"grad rel err {worst:.2e}, Hessian rel err {hess_err:.2e}")
    assert ok


def test_criterion_05_procrustes_and_threshold(acceptance):
    rng = np.random.default_rng(5)
    beaten = 0
    for _ in range(20):
        n, p, m = 40, int(rng.integers(2, 6)), int(rng.integers(2, 8))
        r = int(rng.integers(1, min(p, m) + 1))
        K = int(rng.integers(1, m + 1))
        Z = np.hstack([np.ones((n, 1)), rng.normal(size=(n, 1))])
        data = Dataset(rng.normal(size=(n, m)), Z, rng.normal(size=(n, p)))
        g = Membership(np.arange(m) % K, K)
        V0 = np.linalg.qr(rng.normal(size=(m, r)))[0]
        state = ModelState(rng.normal(size=(2, m)), rng.normal(size=(p, r)), V0, g, group_means(V0, g))
        sp = build_surrogate("normal", data, state, 0.7)
        U = rng.normal(size=(p, r))
        V, _ = update_V(sp, state, U)
        S = sp.w * U.T @ data.X.T @ (sp.Y_work - Z @ state.A) + 1.4 * U.T @ U @ state.M[g.labels].T
        best = np.trace(V @ S)
        for Q in ortho_group.rvs(m, size=1000, random_state=rng):
            beaten += np.trace(Q[:, :r] @ S) > best + 1e-10
    mismatches = 0
    for _ in range(200):
        p, r = int(rng.integers(1, 15)), int(rng.integers(1, 4))
        s = int(rng.integers(1, p + 1))
        U = rng.normal(size=(p, r))
        norms = np.sqrt((U**2).sum(axis=1))
        oracle = set(sorted(range(p), key=lambda i: (-norms[i], i))[:s])
        mismatches += set(np.flatnonzero(np.any(hard_threshold_rows(U, s) != 0, axis=1))) != oracle
    ok = beaten == 0 and mismatches == 0
    acceptance(5, "update_V beats 1000 random candidates; threshold support equals sort oracle", ok,
               f"beaten {beaten}, support mismatches {mismatches}")
    assert ok


def test_criterion_06_kmeans_exactness(acceptance):
    rng = np.random.default_rng(6)
    misses = 0
    for trial in range(50):
        m = int(rng.integers(2, 7))
        K = int(rng.integers(1, min(3, m) + 1))
        B = rng.normal(size=(int(rng.integers(1, 4)), m))
        value, _ = kmeans_penalty(B, K, restarts=20, seed=trial)
        misses += not math.isclose(value, _partition_optimum(B.T, K), rel_tol=1e-9, abs_tol=1e-12)
        r = int(rng.integers(1, 3))
        U = rng.normal(size=(int(rng.integers(1, 4)), r))
        V = np.linalg.qr(rng.normal(size=(m, r)))[0] if r <= m else rng.normal(size=(m, r))
        g, M = update_clusters(U, V, K, seed=trial, restarts=20)
        R = np.linalg.qr(U, mode="r")
        got = float(np.sum(((V - M[g.labels]) @ U.T) ** 2))
        misses += not math.isclose(got, _partition_optimum(V @ R.T, K), rel_tol=1e-9, abs_tol=1e-12)
    ok = misses == 0
    acceptance(6, "kmeans_penalty and update_clusters match exhaustive partitions", ok, f"misses {misses}")
    assert ok


def test_criterion_07_linear_direction(acceptance):
    start = time.perf_counter()
    grid = CvGrid(ranks=(2, 3, 4, 5, 6), sparsities=(10,), Ks=(2, 3, 4),
                  lambdas=tuple(seq_e(-2 * math.log(10), 0, 5)))
    medians_lap, medians_srrr = [], []
    for n in (100, 150, 200):
        lap, srrr = [], []
        for seed in range(20):
            data, (A, B, _) = simulate(SimConfig(p=10, s_true=10, r_true=3, K=3, n=n, epsilon=0.1, seed=seed))
            best, _ = cross_validate("normal", data, grid, folds=3, seed=seed,
                                     base=Hyperparams(s=10, r=3, K=3, seed=seed))
            st = fit("normal", data, best).state
            lap.append(evaluate("normal", (A, B), (st.A, st.B), data.Z, data.X).err)
            st = fit("normal", data, replace(best, lam=0.0, K=1)).state
            srrr.append(evaluate("normal", (A, B), (st.A, st.B), data.Z, data.X).err)
        medians_lap.append(float(np.median(lap)))
        medians_srrr.append(float(np.median(srrr)))
    elapsed = time.perf_counter() - start
    monotone = medians_lap[0] > medians_lap[1] > medians_lap[2]
    ordered = medians_lap[0] <= medians_srrr[0]
    ok = monotone and ordered and elapsed < 900
    detail = ("median Err Laplacian " + ", ".join(f"{v:.4f}" for v in medians_lap)
              + "; SRRR " + ", ".join(f"{v:.4f}" for v in medians_srrr) + f"; {elapsed:.0f}s")
    acceptance(7, "linear: median Err falls with n and Laplacian <= SRRR", ok, detail)
    assert ok


def test_criterion_08_multinomial_direction(acceptance):
    start = time.perf_counter()
    grid = CvGrid(ranks=(3,), sparsities=(10,), Ks=(3,), lambdas=tuple(seq_e(-2 * math.log(10), 0, 3)))
    lap, srrr = [], []
    for seed in range(20):
        cfg = SimConfig(p=10, s_true=10, r_true=3, K=3, n_ratio=100, epsilon=0.1, family="multinomial", seed=seed)
        data, (A, B, _) = simulate(cfg)
        base = Hyperparams(s=10, r=3, K=3, seed=seed)
        best, _ = cross_validate("multinomial", data, grid, folds=3, seed=seed, base=base)
        st = fit("multinomial", data, best).state
        lap.append(evaluate("multinomial", (A, B), (st.A, st.B), data.Z, data.X).kl)
        st = fit("multinomial", data, base).state
        srrr.append(evaluate("multinomial", (A, B), (st.A, st.B), data.Z, data.X).kl)
    elapsed = time.perf_counter() - start
    ok = np.median(lap) <= np.median(srrr) and elapsed < 1200
    acceptance(8, "multinomial: median KL Laplacian <= lambda=0", ok,
               f"{np.median(lap):.4f} vs {np.median(srrr):.4f}; {elapsed:.0f}s")
    assert ok


def test_criterion_09_coefficient_generator(acceptance):
    bad = 0
    for seed in range(20):
        for family in ("normal", "multinomial"):
            cfg = SimConfig(p=15, s_true=6, r_true=3, K=3, n=60, family=family, seed=seed)
            Z, X = gen_covariates(cfg)
            A, B, _ = gen_coefficients(cfg, Z, X)
            bad += np.count_nonzero(np.any(B != 0, axis=1)) > 6
            bad += np.linalg.matrix_rank(B) > 3
            bad += abs(np.linalg.norm(np.vstack([A, B]), 2) - 2.0) > 1e-10
    centers = segment_centers(4, 3.0)
    expected = [(-1) ** (k + 1) * ((k + 1) // 2) * 3.0 for k in range(1, 5)]
    ok = bad == 0 and list(centers) == expected
    acceptance(9, "generator sparsity, rank, top singular value 2, segment centers", ok,
               f"violations {bad}, centers {[float(c) for c in centers]}")
    assert ok


def test_criterion_10_theoretical_rate(acceptance):
    rng = np.random.default_rng(10)
    spot = theoretical_rate(m=20, K=1, s=10, p=100, r=3, gamma=0.0)
    oracle = math.sqrt(10 * math.log(100)) + math.sqrt(11 * math.log(20))
    reduction_ok = all(
        math.isclose(theoretical_rate(m, 1, s, p, r, 0.0),
                     math.sqrt(s * math.log(p)) + math.sqrt((s + 1) * math.log(m)), rel_tol=1e-14)
        for m, s, p, r in rng.integers(2, 60, size=(50, 4))
    )
    monotone_ok = True
    for _ in range(200):
        args = dict(m=int(rng.integers(2, 40)), K=int(rng.integers(1, 10)), s=int(rng.integers(1, 30)),
                    p=int(rng.integers(2, 100)), r=int(rng.integers(1, 10)), gamma=float(rng.uniform(0, 5)))
        base = theoretical_rate(**args)
        for key, bump in (("gamma", 0.5), ("K", 1), ("r", 1), ("s", 1), ("m", 1)):
            monotone_ok &= theoretical_rate(**{**args, key: args[key] + bump}) >= base - 1e-12
    ok = abs(spot - oracle) < 1e-9 and round(spot, 2) == 12.53 and reduction_ok and monotone_ok
    acceptance(10, "rate formula: spot value, K=1 reduction, monotonicity", ok, f"spot {spot:.10f}")
    assert ok


def test_criterion_11_cli_reproducible(acceptance, tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    config = {
        "family": "normal",
        "seed": 2024,
        "data_dir": "data",
        "simulate": {"p": 10, "s_true": 10, "n": 100},
        "fit": {"s": 10, "r": 3, "K": 3, "lam": 0.5},
        "eval": {"artifact": "out/fit.json", "truth": "data/truth.json", "rate_diagnostic": True},
    }
    outputs = []
    codes = []
    for name in ("first", "second"):
        root = tmp_path / name
        (root / "data").mkdir(parents=True)
        (root / "out").mkdir()
        (root / "config.json").write_text(json.dumps(config))
        cfg = str(root / "config.json")
        codes.append(main(["simulate", "--config", cfg, "--out", str(root / "data"), "--quiet"]))
        codes.append(main(["fit", "--config", cfg, "--out", str(root / "out"), "--quiet"]))
        codes.append(main(["eval", "--config", cfg, "--out", str(root / "out"), "--quiet"]))
        outputs.append({p.relative_to(root).as_posix(): p.read_bytes()
                        for p in sorted(root.rglob("*")) if p.is_file() and p.name != "config.json"})
    identical = outputs[0] == outputs[1] and len(outputs[0]) == 6

    root = tmp_path / "first"
    cfg = str(root / "config.json")
    contract = codes == [0] * 6
    contract &= main(["fit", "--config", cfg, "--out", str(root / "missing"), "--quiet"]) == 1
    contract &= main(["fit", "--config", str(root / "absent.json"), "--out", str(root / "out")]) == 2
    bad = dict(config, fit={"s": 10, "r": 3, "K": 3, "speed": 1})
    (root / "bad.json").write_text(json.dumps(bad))
    contract &= main(["fit", "--config", str(root / "bad.json"), "--out", str(root / "out")]) == 2
    (root / "data" / "Y.csv").write_text("1,2\nnot,a,number\n")
    contract &= main(["fit", "--config", cfg, "--out", str(root / "out"), "--quiet"]) == 1
    (root / "data" / "truth.json").unlink()
    contract &= main(["eval", "--config", cfg, "--out", str(root / "out"), "--quiet"]) == 1
    try:
        main(["fit"])
        usage = False
    except SystemExit as exc:
        usage = exc.code == 2
    ok = identical and contract and usage
    acceptance(11, "simulate -> fit -> eval byte-reproducible; exit codes 0/1/2", ok,
               f"identical={identical}, contract={contract and usage}")
    assert ok
