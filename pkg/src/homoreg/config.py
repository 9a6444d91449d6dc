"""JSON run configuration shared by the command-line workflows.

A configuration document looks like::

    {
      "family": "normal",
      "seed": 7,
      "data_dir": "data",
      "simulate": {"p": 10, "s_true": 10, "n": 200},
      "fit": {"s": 10, "r": 3, "K": 3, "lam": 0.5},
      "cv": {"ranks": [2, 3], "sparsities": [10], "Ks": [3],
             "lambdas": {"seq_e": [-4.605170185988091, 0.0, 5]}, "folds": 3},
      "eval": {"artifact": "out/fit.json", "truth": "data/truth.json"}
    }

Every section is optional; each command checks for the ones it needs.
Unknown keys anywhere are rejected.  Relative paths resolve against the
directory holding the configuration file.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .families import FAMILIES
from .optimizer import Backtracking, FixedStep, Hyperparams
from .simulation import CvGrid, SimConfig, seq_e


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (usage error)."""


def _reject_unknown(section, payload, allowed):
    if not isinstance(payload, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    unknown = sorted(set(payload) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")


def _names(cls):
    return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class CvSettings:
    ranks: tuple
    sparsities: tuple
    Ks: tuple
    lambdas: tuple
    folds: int = 5

    @property
    def grid(self):
        return CvGrid(self.ranks, self.sparsities, self.Ks, self.lambdas)


@dataclass(frozen=True)
class EvalSettings:
    artifact: str | None = None
    truth: str | None = None
    heldout_dir: str | None = None
    rate_diagnostic: bool = False


@dataclass(frozen=True)
class RunConfig:
    family: str = "normal"
    seed: int = 0
    data_dir: str | None = None
    simulate: dict | None = None
    fit: dict | None = None
    cv: CvSettings | None = None
    eval: EvalSettings | None = field(default=None)
    base_dir: str = "."

    # -- section accessors --------------------------------------------------

    def sim_config(self, seed=None):
        if self.simulate is None:
            raise ConfigError("configuration has no 'simulate' section")
        try:
            return SimConfig(family=self.family, seed=self.seed if seed is None else seed, **self.simulate)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid 'simulate' section: {exc}") from None

    def hyperparams(self, seed=None):
        if self.fit is None:
            raise ConfigError("configuration has no 'fit' section")
        return hyperparams_from_dict(self.fit, self.seed if seed is None else seed)

    def path(self, value):
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    # -- (de)serialization --------------------------------------------------

    def to_dict(self):
        out = {"family": self.family, "seed": self.seed}
        if self.data_dir is not None:
            out["data_dir"] = self.data_dir
        if self.simulate is not None:
            out["simulate"] = dict(self.simulate)
        if self.fit is not None:
            out["fit"] = json.loads(json.dumps(self.fit))
        if self.cv is not None:
            out["cv"] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.cv).items()}
        if self.eval is not None:
            out["eval"] = asdict(self.eval)
        return out

    @classmethod
    def from_dict(cls, payload, base_dir="."):
        _reject_unknown("<root>", payload, ["family", "seed", "data_dir", "simulate", "fit", "cv", "eval"])
        family = payload.get("family", "normal")
        if family not in FAMILIES:
            raise ConfigError(f"unknown family {family!r}")
        seed = payload.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")

        simulate = payload.get("simulate")
        if simulate is not None:
            allowed = [n for n in _names(SimConfig) if n not in ("family", "seed")]
            _reject_unknown("simulate", simulate, allowed)
            simulate = dict(simulate)

        fit = payload.get("fit")
        if fit is not None:
            hyperparams_from_dict(fit, seed)  # validates
            fit = json.loads(json.dumps(fit))

        cv = payload.get("cv")
        if cv is not None:
            _reject_unknown("cv", cv, _names(CvSettings))
            cv = _cv_from_dict(cv)

        ev = payload.get("eval")
        if ev is not None:
            _reject_unknown("eval", ev, _names(EvalSettings))
            ev = EvalSettings(**ev)

        config = cls(
            family=family,
            seed=seed,
            data_dir=payload.get("data_dir"),
            simulate=simulate,
            fit=fit,
            cv=cv,
            eval=ev,
            base_dir=str(base_dir),
        )
        if simulate is not None:
            config.sim_config()
        return config

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.to_dict() == other.to_dict()


def _int_list(section, key, values):
    if not isinstance(values, list) or not values or not all(isinstance(v, int) and not isinstance(v, bool) for v in values):
        raise ConfigError(f"'{section}.{key}' must be a non-empty list of integers")
    return tuple(values)


def _cv_from_dict(cv):
    defaults = CvGrid()
    lambdas = cv.get("lambdas", list(defaults.lambdas))
    if isinstance(lambdas, dict):
        _reject_unknown("cv.lambdas", lambdas, ["seq_e"])
        try:
            a, b, c = lambdas["seq_e"]
        except (KeyError, TypeError, ValueError):
            raise ConfigError("'cv.lambdas.seq_e' must be [start, stop, count]") from None
        lambdas = [float(v) for v in seq_e(a, b, c)]
    if not isinstance(lambdas, list) or not lambdas or not all(isinstance(v, (int, float)) and v >= 0 for v in lambdas):
        raise ConfigError("'cv.lambdas' must be a non-empty list of non-negative numbers")
    folds = cv.get("folds", 5)
    if not isinstance(folds, int) or folds < 2:
        raise ConfigError("'cv.folds' must be an integer >= 2")
    return CvSettings(
        ranks=_int_list("cv", "ranks", cv.get("ranks", list(defaults.ranks))),
        sparsities=_int_list("cv", "sparsities", cv.get("sparsities", list(defaults.sparsities))),
        Ks=_int_list("cv", "Ks", cv.get("Ks", list(defaults.Ks))),
        lambdas=tuple(float(v) for v in lambdas),
        folds=folds,
    )


_FIT_KEYS = ["s", "r", "K", "lam", "step", "tol_rel_obj", "max_iter", "kmeans_restarts", "max_inflate"]


def hyperparams_from_dict(payload, seed=0):
    _reject_unknown("fit", payload, _FIT_KEYS)
    values = dict(payload)
    for key in ("s", "r", "K"):
        if key not in values:
            raise ConfigError(f"'fit.{key}' is required")
    step = values.pop("step", None)
    if step is None:
        step = Backtracking()
    else:
        step = dict(step) if isinstance(step, dict) else step
        if not isinstance(step, dict):
            raise ConfigError("'fit.step' must be an object")
        kind = step.pop("kind", "backtracking")
        try:
            if kind == "fixed":
                _reject_unknown("fit.step", step, ["value"])
                step = FixedStep(float(step["value"]))
            elif kind == "backtracking":
                _reject_unknown("fit.step", step, ["init", "shrink", "max_tries"])
                step = Backtracking(**step)
            else:
                raise ConfigError(f"unknown step kind {kind!r}")
        except KeyError as exc:
            raise ConfigError(f"'fit.step' is missing {exc}") from None
    try:
        hp = Hyperparams(step=step, seed=seed, **values)
    except TypeError as exc:
        raise ConfigError(f"invalid 'fit' section: {exc}") from None
    for key in ("s", "r", "K", "max_iter", "kmeans_restarts", "max_inflate"):
        v = getattr(hp, key)
        if not isinstance(v, int) or isinstance(v, bool) or v < (0 if key in ("kmeans_restarts", "max_inflate") else 1):
            raise ConfigError(f"'fit.{key}' must be a positive integer")
    if not isinstance(hp.lam, (int, float)) or hp.lam < 0 or not math.isfinite(hp.lam):
        raise ConfigError("'fit.lam' must be a finite non-negative number")
    if not isinstance(hp.tol_rel_obj, (int, float)) or hp.tol_rel_obj <= 0:
        raise ConfigError("'fit.tol_rel_obj' must be positive")
    return hp


def hyperparams_to_dict(hp):
    if isinstance(hp.step, FixedStep):
        step = {"kind": "fixed", "value": hp.step.value}
    else:
        step = {"kind": "backtracking", **asdict(hp.step)}
    return {
        "s": hp.s, "r": hp.r, "K": hp.K, "lam": hp.lam, "step": step,
        "tol_rel_obj": hp.tol_rel_obj, "max_iter": hp.max_iter,
        "kmeans_restarts": hp.kmeans_restarts, "max_inflate": hp.max_inflate,
    }


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(payload, base_dir=path.parent)
