"""Matrix CSV files and JSON artifacts.

CSV matrices have no header, one row per line, and every value written with
17 significant digits so doubles survive a round trip bit for bit.  JSON
artifacts store matrices as ``{"shape": [rows, cols], "data": [...]}`` in
row-major order; Python's float repr is already round-trip exact.
"""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
import time
from datetime import datetime, timezone
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from .config import hyperparams_from_dict, hyperparams_to_dict
from .optimizer import FitReport, ModelState
from .penalty import Membership

ARTIFACT_FORMAT = "homoreg-fit/1"
TRUTH_FORMAT = "homoreg-truth/1"


class DataError(ValueError):
    """Unreadable, malformed or inconsistent input data."""


def library_version():
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def atomic_write(path, text):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_matrix_csv(M):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    for row in M:
        writer.writerow([format(float(v), ".17g") for v in row])
    return buf.getvalue()


def write_matrix_csv(path, M):
    atomic_write(path, format_matrix_csv(M))


def read_matrix_csv(path):
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    rows = []
    with fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                raise DataError(f"{path}: line {lineno}: empty row")
            try:
                values = [float(v) for v in row]
            except ValueError:
                raise DataError(f"{path}: line {lineno}: non-numeric value") from None
            if rows and len(values) != len(rows[0]):
                raise DataError(
                    f"{path}: line {lineno}: expected {len(rows[0])} fields, found {len(values)}"
                )
            if not all(np.isfinite(values)):
                raise DataError(f"{path}: line {lineno}: non-finite value")
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return np.array(rows, dtype=float)


def matrix_to_json(M):
    M = np.asarray(M, dtype=float)
    return {"shape": list(M.shape), "data": [float(v) for v in M.ravel()]}


def matrix_from_json(obj, name="matrix"):
    try:
        shape = tuple(int(v) for v in obj["shape"])
        return np.array(obj["data"], dtype=float).reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed {name}: {exc}") from None


def _dump(payload):
    return json.dumps(payload, indent=1) + "\n"


def _timestamp():
    # SOURCE_DATE_EPOCH pins the timestamp for reproducible artifacts
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    stamp = int(epoch) if epoch is not None else int(time.time())
    return datetime.fromtimestamp(stamp, tz=timezone.utc).isoformat()


def save_fit_artifact(path, family, report, hp, seed):
    st = report.state
    payload = {
        "format": ARTIFACT_FORMAT,
        "family": family,
        "state": {
            "A": matrix_to_json(st.A),
            "U": matrix_to_json(st.U),
            "V": matrix_to_json(st.V),
            "g": [int(v) for v in st.g.labels],
            "K": st.g.n_clusters,
            "M": matrix_to_json(st.M),
        },
        "hyperparams": hyperparams_to_dict(hp),
        "objective_trace": [float(v) for v in report.objective_trace],
        "w_trace": [float(v) for v in report.w_trace],
        "n_iter": report.n_iter,
        "converged": bool(report.converged),
        "metadata": {"seed": seed, "created": _timestamp(), "library_version": library_version()},
    }
    atomic_write(path, _dump(payload))


def _load_json(path, what):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read {what} {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def load_fit_artifact(path):
    """Returns ``(family, FitReport, Hyperparams, metadata)``."""
    payload = _load_json(path, "fit artifact")
    if payload.get("format") != ARTIFACT_FORMAT:
        raise DataError(f"{path}: not a fit artifact")
    try:
        st = payload["state"]
        state = ModelState(
            A=matrix_from_json(st["A"], "A"),
            U=matrix_from_json(st["U"], "U"),
            V=matrix_from_json(st["V"], "V"),
            g=Membership(np.array(st["g"], dtype=np.int64), st["K"]),
            M=matrix_from_json(st["M"], "M"),
        )
        meta = payload["metadata"]
        hp = hyperparams_from_dict(payload["hyperparams"], meta.get("seed", 0))
        report = FitReport(
            state=state,
            objective_trace=np.array(payload["objective_trace"], dtype=float),
            surrogate_trace=[],
            w_trace=np.array(payload["w_trace"], dtype=float),
            n_iter=int(payload["n_iter"]),
            converged=bool(payload["converged"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed fit artifact ({exc})") from None
    return payload["family"], report, hp, meta


def save_truth(path, family, A_star, B_star, g_star, sim=None):
    payload = {
        "format": TRUTH_FORMAT,
        "family": family,
        "A_star": matrix_to_json(A_star),
        "B_star": matrix_to_json(B_star),
        "g_star": [int(v) for v in g_star.labels],
        "K": g_star.n_clusters,
    }
    if sim is not None:
        payload["simulate"] = sim
    atomic_write(path, _dump(payload))


def load_truth(path):
    """Returns ``(family, A_star, B_star, g_star)``."""
    payload = _load_json(path, "truth file")
    if payload.get("format") != TRUTH_FORMAT:
        raise DataError(f"{path}: not a truth file")
    try:
        return (
            payload["family"],
            matrix_from_json(payload["A_star"], "A_star"),
            matrix_from_json(payload["B_star"], "B_star"),
            Membership(np.array(payload["g_star"], dtype=np.int64), payload["K"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed truth file ({exc})") from None
