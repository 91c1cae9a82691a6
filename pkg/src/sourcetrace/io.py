"""JSON/CSV serialization of W tensors, end models, influence tensors and reports."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from typing import Optional

import numpy as np

from .endmodel import EndModel
from .exceptions import ParseError, ShapeError
from .influence import InfluenceTensor
from .labelmodel import WTensor


def to_jsonable(obj):
    """Recursively turn numpy containers and scalars into JSON-friendly values."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        if math.isnan(f):
            return None
        return f
    return obj


def write_json(path, obj):
    Path(path).write_text(json.dumps(to_jsonable(obj), indent=1) + "\n")


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc.msg})", exc.lineno, exc.colno) from exc


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def save_wtensor(w: WTensor, path):
    write_json(
        path,
        {
            "sigma": w.sigma,
            "M": w.n_lfs,
            "C": w.n_classes,
            "class_prior": None if w.class_prior is None else w.class_prior,
            "weights": w.weights,
        },
    )
    write_json(_sidecar(path), w.metadata)


def load_wtensor(path) -> WTensor:
    d = read_json(path)
    try:
        weights = np.asarray(d["weights"], dtype=np.float64)
        sigma, m, c = d["sigma"], int(d["M"]), int(d["C"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: not a W tensor file ({exc})") from exc
    if weights.shape != (m, c + 1, c):
        raise ShapeError(f"{path}: weights have shape {weights.shape}, header says M={m}, C={c}")
    side = _sidecar(path)
    meta = read_json(side) if side.exists() else {}
    return WTensor(weights, sigma, d.get("class_prior"), meta)


def save_end_model(model: EndModel, path):
    write_json(path, {"theta": model.theta, "l2": model.l2, "metadata": model.metadata})


def load_end_model(path) -> EndModel:
    d = read_json(path)
    try:
        theta = np.asarray(d["theta"], dtype=np.float64)
        l2 = float(d["l2"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: not an end-model file ({exc})") from exc
    if theta.ndim != 2:
        raise ShapeError(f"{path}: theta must be a C x (d+1) grid")
    return EndModel(theta, l2, d.get("metadata", {}))


def save_influence(t: InfluenceTensor, path):
    """``path`` names the JSON metadata; scores go to a sibling ``.csv`` with rows i,j,c,score."""
    path = Path(path)
    csv_path = path.with_suffix(".csv")
    n, s, c = t.shape
    write_json(
        path,
        {
            "method": t.method,
            "holdout_id": t.holdout_id,
            "solver": t.solver,
            "shape": [n, s, c],
            "n_lfs": t.n_lfs,
            "scores_file": csv_path.name,
        },
    )
    idx = np.indices(t.shape).reshape(3, -1).T
    with open(csv_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["i", "j", "c", "score"])
        for (i, j, k), v in zip(idx, t.scores.ravel()):
            wr.writerow([int(i), int(j), int(k), repr(float(v))])


def load_influence(path) -> InfluenceTensor:
    path = Path(path)
    meta = read_json(path)
    shape = tuple(int(x) for x in meta["shape"])
    scores = np.zeros(shape)
    with open(path.with_name(meta["scores_file"]), newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != ["i", "j", "c", "score"]:
            raise ParseError(f"{path}: unexpected influence CSV header {header}", 1, 1)
        for row_no, row in enumerate(rd, start=2):
            try:
                i, j, k = (int(x) for x in row[:3])
                scores[i, j, k] = float(row[3])
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{path}: bad influence row {row_no}: {exc}", row_no, 1) from exc
    return InfluenceTensor(scores, meta["method"], meta["holdout_id"], meta.get("solver", {}), meta.get("n_lfs"))


def write_ranked_csv(path, header, rows, score_col: int = -1):
    """Rows sorted by descending score (stable), written with a header line."""
    rows = sorted(rows, key=lambda r: -float(r[score_col]))
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for r in rows:
            wr.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def write_summary(path, entries, extra: Optional[dict] = None):
    """JSON summary: a list of {method, metric, value} records."""
    out = {"results": [{"method": m, "metric": k, "value": v} for m, k, v in entries]}
    if extra:
        out.update(extra)
    write_json(path, out)
