"""``homoreg`` command line: simulate, fit, cv and eval workflows.

Exit codes: 0 on success, 1 on runtime or data errors, 2 on usage or
configuration errors.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .artifacts import (
    DataError,
    atomic_write,
    format_matrix_csv,
    load_fit_artifact,
    load_truth,
    read_matrix_csv,
    save_fit_artifact,
    save_truth,
    write_matrix_csv,
)
from .config import ConfigError, hyperparams_to_dict, load_config
from .families import Dataset, get_family, neg_log_likelihood
from .optimizer import DivergenceError, fit, full_objective, nonzero_rows
from .penalty import kmeans_penalty
from .simulation import (
    cross_validate,
    evaluate,
    resolve_threads,
    simulate,
    sparse_operator_norm,
    theoretical_rate,
    zeta_n_sq,
)

DATA_FILES = ("Y.csv", "Z.csv", "X.csv")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _seed(text):
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _threads(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("threads must be positive")
    return value


def build_parser():
    parser = _Parser(prog="homoreg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "simulate": "draw a synthetic dataset and its true coefficients",
        "fit": "fit the penalized model to CSV data",
        "cv": "two-stage cross-validation over the configured grids",
        "eval": "score a fit artifact against truth or held-out data",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, type=Path, help="JSON run configuration")
        p.add_argument("--out", required=True, type=Path, help="existing output directory")
        p.add_argument("--seed", type=_seed, help="override the configuration seed")
        p.add_argument("--threads", type=_threads, help="worker threads (default: $HOMOREG_THREADS or 1)")
        p.add_argument("--quiet", action="store_true", help="suppress the printed summary")
    return parser


# ---------------------------------------------------------------------------
# data loading
# ---------------------------------------------------------------------------


def _require_file(path, what):
    if not path.is_file():
        raise DataError(f"{what} not found: {path}")
    return path


def _data_dir(cfg):
    if cfg.data_dir is None:
        raise ConfigError("configuration needs 'data_dir' for this command")
    directory = cfg.path(cfg.data_dir)
    for name in DATA_FILES:
        _require_file(directory / name, "data file")
    return directory


def _responses_to_csv(family, Y):
    # multinomial responses are stored one-hot over all m + 1 categories
    if family.name == "multinomial":
        return np.hstack([Y, 1.0 - Y.sum(axis=1, keepdims=True)])
    return Y


def load_dataset(family, directory):
    """Read ``Y.csv``, ``Z.csv`` and ``X.csv`` and check they agree."""
    directory = Path(directory)
    Y, Z, X = (read_matrix_csv(directory / name) for name in DATA_FILES)
    n = Y.shape[0]
    for M, name in ((Z, "Z.csv"), (X, "X.csv")):
        if M.shape[0] != n:
            raise DataError(f"{directory / name}: {M.shape[0]} rows, but Y.csv has {n}")
    if not np.all(Z[:, 0] == 1.0):
        raise DataError(f"{directory / 'Z.csv'}: first column must be all ones")
    if family.name == "multinomial":
        if Y.shape[1] < 2 or not np.all((Y == 0) | (Y == 1)) or not np.all(Y.sum(axis=1) == 1):
            raise DataError(f"{directory / 'Y.csv'}: multinomial rows must be one-hot over all categories")
        Y = Y[:, :-1]
    else:
        try:
            family.check_response(Y)
        except ValueError as exc:
            raise DataError(f"{directory / 'Y.csv'}: {exc}") from None
    return Dataset(Y, Z, X)


def _check_dims(cfg, data, hp, directory):
    if cfg.simulate is not None:
        sim = cfg.sim_config()
        if data.p != sim.p:
            raise DataError(f"{directory / 'X.csv'}: {data.p} columns, configuration says p={sim.p}")
        if data.m != sim.m:
            raise DataError(f"{directory / 'Y.csv'}: {data.m} responses, configuration says m={sim.m}")
    if hp is not None:
        if hp.s > data.p:
            raise DataError(f"{directory / 'X.csv'}: p={data.p} is smaller than s={hp.s}")
        if hp.r > min(data.p, data.m):
            raise DataError(f"{directory / 'Y.csv'}: rank r={hp.r} exceeds min(p, m)={min(data.p, data.m)}")
        if hp.K > data.m:
            raise DataError(f"{directory / 'Y.csv'}: m={data.m} is smaller than K={hp.K}")


def _check_out(out):
    if not out.is_dir():
        raise DataError(f"output directory does not exist: {out}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg, args, say):
    sim = cfg.sim_config(seed=args.seed)
    _check_out(args.out)
    family = get_family(sim.family)
    data, (A_star, B_star, g_star) = simulate(sim)
    write_matrix_csv(args.out / "Y.csv", _responses_to_csv(family, data.Y))
    write_matrix_csv(args.out / "Z.csv", data.Z)
    write_matrix_csv(args.out / "X.csv", data.X)
    save_truth(args.out / "truth.json", family.name, A_star, B_star, g_star, sim=dict(cfg.simulate, seed=sim.seed))
    say(f"simulated {family.name}: n={data.n} m={data.m} p={data.p} q={data.q - 1} -> {args.out}")


def cmd_fit(cfg, args, say):
    seed = cfg.seed if args.seed is None else args.seed
    hp = cfg.hyperparams(seed=seed)
    family = get_family(cfg.family)
    directory = _data_dir(cfg)
    _check_out(args.out)
    data = load_dataset(family, directory)
    _check_dims(cfg, data, hp, directory)
    report = fit(family, data, hp)
    save_fit_artifact(args.out / "fit.json", family.name, report, hp, seed)
    st = report.state
    sizes = ", ".join(str(int(v)) for v in st.g.sizes())
    say(
        f"iterations      {report.n_iter}\n"
        f"final objective {report.objective_trace[-1]:.10g}\n"
        f"converged       {str(report.converged).lower()}\n"
        f"nonzero rows    {nonzero_rows(st.U)} of {data.p}\n"
        f"cluster sizes   {sizes}"
    )


def _scores_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    cols = ["stage", "s", "r", "K", "lam", "fold", "score"]
    writer.writerow(cols)
    for row in rows:
        writer.writerow([format(row[c], ".17g") if isinstance(row[c], float) else row[c] for c in cols])
    return buf.getvalue()


def cmd_cv(cfg, args, say):
    if cfg.cv is None:
        raise ConfigError("configuration has no 'cv' section")
    seed = cfg.seed if args.seed is None else args.seed
    base = cfg.hyperparams(seed=seed) if cfg.fit is not None else None
    family = get_family(cfg.family)
    directory = _data_dir(cfg)
    _check_out(args.out)
    data = load_dataset(family, directory)
    _check_dims(cfg, data, None, directory)
    threads = resolve_threads(args.threads)
    kwargs = {} if base is None else {"base": base}
    best, rows = cross_validate(family, data, cfg.cv.grid, folds=cfg.cv.folds, seed=seed, threads=threads, **kwargs)
    best = replace(best, seed=seed)
    means = {}
    for row in rows:
        means.setdefault((row["stage"], row["s"], row["r"], row["K"], row["lam"]), []).append(row["score"])
    key = (2, best.s, best.r, best.K, best.lam)
    payload = {"family": family.name, "seed": seed, "folds": cfg.cv.folds,
               "best": hyperparams_to_dict(best), "mean_score": float(np.mean(means[key]))}
    atomic_write(args.out / "cv_best.json", json.dumps(payload, indent=1) + "\n")
    atomic_write(args.out / "cv_scores.csv", _scores_csv(rows))
    say(f"selected s={best.s} r={best.r} K={best.K} lam={best.lam:.6g} "
        f"(mean held-out score {payload['mean_score']:.6g}, {len(rows)} fits)")


def cmd_eval(cfg, args, say):
    ev = cfg.eval
    if ev is None or ev.artifact is None:
        raise ConfigError("configuration needs 'eval.artifact'")
    if (ev.truth is None) == (ev.heldout_dir is None):
        raise ConfigError("set exactly one of 'eval.truth' and 'eval.heldout_dir'")
    art_path = _require_file(cfg.path(ev.artifact), "fit artifact")
    truth_path = _require_file(cfg.path(ev.truth), "truth file") if ev.truth else None
    _check_out(args.out)
    fam_name, report, hp, _ = load_fit_artifact(art_path)
    if fam_name != cfg.family:
        raise DataError(f"{art_path}: artifact family {fam_name!r} does not match configuration family {cfg.family!r}")
    family = get_family(fam_name)
    st = report.state
    A_hat, B_hat = st.A, st.B
    metrics = {"family": fam_name}

    if truth_path is not None:
        t_family, A_star, B_star, _ = load_truth(truth_path)
        if t_family != fam_name:
            raise DataError(f"{truth_path}: truth family {t_family!r} does not match artifact family {fam_name!r}")
        if A_star.shape != A_hat.shape or B_star.shape != B_hat.shape:
            raise DataError(f"{truth_path}: coefficient shapes do not match {art_path}")
        directory = _data_dir(cfg)
        data = load_dataset(family, directory)
        if data.q != A_hat.shape[0] or data.p != B_hat.shape[0] or data.m != B_hat.shape[1]:
            raise DataError(f"{directory}: data dimensions do not match {art_path}")
        res = evaluate(family, (A_star, B_star), (A_hat, B_hat), data.Z, data.X)
        metrics["err"] = res.err
        if res.prediction is not None:
            metrics["prediction"] = res.prediction
        if res.kl is not None:
            metrics["kl"] = res.kl
            metrics["kl_clamped"] = res.clamped
    else:
        directory = cfg.path(ev.heldout_dir)
        for name in DATA_FILES:
            _require_file(directory / name, "held-out data file")
        data = load_dataset(family, directory)
        if data.q != A_hat.shape[0] or data.p != B_hat.shape[0] or data.m != B_hat.shape[1]:
            raise DataError(f"{directory}: data dimensions do not match {art_path}")
        metrics["heldout_nll"] = neg_log_likelihood(family, data, A_hat, B_hat) / data.n
        if family.name == "normal":
            resid = data.Y - data.Z @ A_hat - data.X @ B_hat
            metrics["heldout_mse"] = float(np.sum(resid**2) / data.n)

    metrics["objective"] = full_objective(family, data, st, hp.lam)
    if ev.rate_diagnostic:
        gamma, _ = kmeans_penalty(B_hat, hp.K, seed=hp.seed)
        x_norm = sparse_operator_norm(data.Z, data.X, 2 * hp.s)
        metrics["rate"] = {
            "gamma_proxy": gamma,
            "xi": theoretical_rate(data.m, hp.K, hp.s, data.p, hp.r, gamma),
            "zeta_n_sq": zeta_n_sq(data.n, data.m, hp.K, hp.s, data.p, hp.r, x_norm),
        }
    atomic_write(args.out / "metrics.json", json.dumps(metrics, indent=1) + "\n")
    say("\n".join(f"{k:<12} {v}" for k, v in metrics.items() if k != "rate"))


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "cv": cmd_cv, "eval": cmd_eval}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    say = (lambda text: None) if args.quiet else print
    try:
        cfg = load_config(args.config)
        COMMANDS[args.command](cfg, args, say)
    except ConfigError as exc:
        print(f"homoreg: configuration error: {exc}", file=sys.stderr)
        return 2
    except (DataError, DivergenceError, OSError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"homoreg: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
