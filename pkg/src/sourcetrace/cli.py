"""``sourcetrace`` command line: fit -> approximate -> train -> influence -> reports."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .apps import (
    MISLABEL_METHODS,
    discrepancy_scores,
    explain_test_point,
    group_if_lf_removal,
    knn_discrepancy_scores,
    mislabel_report,
    mislabel_scores,
    actual_lf_effects,
    sweep_alpha,
    sweep_alpha_points,
)
from .data import BUNDLE_FILES, SyntheticSpec, generate_synthetic, load_bundle, save_bundle
from .endmodel import TrainConfig, holdout_loss, train_end_model
from .exceptions import InputError, NumericalError, SourceTraceError, UndefinedMetricError
from .influence import (
    Holdout,
    IhvpSolverConfig,
    InverseHessian,
    aggregate_influence,
    ordinary_influence,
    relatif,
    rw_influence,
    rw_influence_exp,
    self_influence_tensor,
    wm_influence,
)
from .io import (
    file_checksum,
    load_end_model,
    load_influence,
    load_wtensor,
    read_json,
    save_end_model,
    save_influence,
    save_wtensor,
    to_jsonable,
    write_json,
    write_ranked_csv,
    write_summary,
)
from .labelmodel import (
    approximate_identity,
    approximation_objective,
    degenerate_rows,
    fit_label_model,
    infer_labels,
)
from .metrics import spearman

logger = logging.getLogger("sourcetrace")

EXIT_OK, EXIT_INPUT, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 64, 70

DEFAULTS = {
    "data": None,
    "out": "sourcetrace_out",
    "votes": None,
    "features": None,
    "gold": None,
    "valid_features": None,
    "valid_gold": None,
    "test_features": None,
    "test_gold": None,
    "seed": 0,
    "threads": None,
    "label_model": "ds",
    "approximate": True,
    "lm.max_iter": 100,
    "approx.max_iter": 3000,
    "train.lr": 0.001,
    "train.epochs": 10000,
    "train.l2": 1e-4,
    "train.solver": "gd",
    "train.tol": 1e-6,
    "train.wtensor": "auto",
    "influence.method": "rw",
    "influence.relatif": False,
    "influence.solver": "exact",
    "influence.damping": 1e-3,
    "lissa.batch_size": 16,
    "lissa.depth": 5000,
    "lissa.repeats": 10,
    "lissa.scale": None,
    "apps.alpha_grid": None,
    "apps.knn_k": 10,
    "apps.k_max": None,
    "apps.pooled": False,
}

W_FILE = "wtensor.json"
W_ID_FILE = "wtensor_identity.json"
MODEL_FILE = "end_model.json"
INFLUENCE_FILE = "influence.json"
MANIFEST = "MANIFEST.json"

ACCEPTANCE_ACCURACIES = [0.95] * 5 + [0.7] * 2 + [0.34]


class UsageParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Config and manifest


def load_config(path) -> dict:
    """Flat dotted-key JSON; a MANIFEST file is accepted and its ``config`` block used."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    d = read_json(path)
    if not isinstance(d, dict):
        raise InputError(f"{path}: config must be a JSON object")
    if "config" in d and isinstance(d["config"], dict):
        d = d["config"]
    unknown = sorted(set(d) - set(DEFAULTS))
    if unknown:
        raise InputError(f"{path}: unknown config keys {unknown}")
    return d


def resolve_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(load_config(args.config))
    for key, val in vars(args).items():
        if key in DEFAULTS and val is not None:
            cfg[key] = val
    if cfg["data"] is not None and not Path(cfg["data"]).is_dir():
        raise FileNotFoundError(f"data directory not found: {cfg['data']}")
    return cfg


def resolve_threads(cfg) -> int:
    t = cfg.get("threads")
    if t is None:
        env = os.environ.get("SOURCETRACE_THREADS")
        if env:
            try:
                t = int(env)
            except ValueError:
                raise InputError(f"SOURCETRACE_THREADS must be an integer, got {env!r}") from None
        else:
            t = os.cpu_count() or 1
    if int(t) < 1:
        raise InputError("thread count must be >= 1")
    return int(t)


def _versions():
    import scipy
    import sklearn

    return {
        "sourcetrace": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
    }


class Manifest:
    """Tracks stage status and output checksums in ``<out>/MANIFEST.json``."""

    def __init__(self, out: Path, cfg: dict):
        self.path = out / MANIFEST
        self.data = read_json(self.path) if self.path.exists() else {"stages": {}}
        self.data["config"] = cfg
        self.data["seeds"] = {"seed": cfg["seed"], "lissa": cfg["seed"]}
        self.data["versions"] = _versions()
        self.out = out

    def record(self, stage, outputs, status="complete", error=None):
        entry = {"status": status, "outputs": {}}
        for name in outputs:
            p = self.out / name
            if p.exists():
                entry["outputs"][name] = file_checksum(p)
        if error:
            entry["error"] = error
        self.data["stages"][stage] = entry
        self.data["complete"] = all(s["status"] == "complete" for s in self.data["stages"].values())
        write_json(self.path, self.data)


# ---------------------------------------------------------------------------
# Stages


def _bundle(cfg):
    overrides = {
        "train_votes": cfg["votes"],
        "train_features": cfg["features"],
        "train_gold": cfg["gold"],
        "valid_features": cfg["valid_features"],
        "valid_gold": cfg["valid_gold"],
        "test_features": cfg["test_features"],
        "test_gold": cfg["test_gold"],
    }
    if cfg["data"] is None and overrides["train_features"] is None:
        raise InputError("pass --data DIR or the individual file flags")
    return load_bundle(cfg["data"], **{k: v for k, v in overrides.items() if v is not None})


def _need(out: Path, name: str, hint: str) -> Path:
    p = out / name
    if not p.exists():
        raise FileNotFoundError(f"{name} not found in {out}; run `sourcetrace {hint}` first")
    return p


def _train_config(cfg) -> TrainConfig:
    return TrainConfig(
        lr=float(cfg["train.lr"]),
        epochs=int(cfg["train.epochs"]),
        l2=float(cfg["train.l2"]),
        solver=cfg["train.solver"],
        tol=float(cfg["train.tol"]),
        seed=int(cfg["seed"]),
    )


def _solver_config(cfg) -> IhvpSolverConfig:
    return IhvpSolverConfig(
        kind=cfg["influence.solver"],
        batch_size=int(cfg["lissa.batch_size"]),
        depth=int(cfg["lissa.depth"]),
        repeats=int(cfg["lissa.repeats"]),
        scale=None if cfg["lissa.scale"] is None else float(cfg["lissa.scale"]),
        seed=int(cfg["seed"]),
    )


def stage_fit_lm(cfg, out: Path):
    bundle = _bundle(cfg)
    kw = {"max_iter": int(cfg["lm.max_iter"])} if cfg["label_model"] == "ds" else {}
    w = fit_label_model(cfg["label_model"], bundle.train.L, **kw)
    w.metadata["degenerate_rows"] = np.flatnonzero(degenerate_rows(w, bundle.train.L)).tolist()
    save_wtensor(w, out / W_FILE)
    return {"label_model": cfg["label_model"], "sigma": w.sigma}, [W_FILE, "wtensor.meta.json"]


def stage_approx(cfg, out: Path):
    bundle = _bundle(cfg)
    w = load_wtensor(_need(out, W_FILE, "fit-lm"))
    if w.is_identity:
        w_id, obj = w, 0.0
    else:
        w_id = approximate_identity(w, bundle.train.L, max_iter=int(cfg["approx.max_iter"]))
        obj = approximation_objective(w, w_id, bundle.train.L)
    save_wtensor(w_id, out / W_ID_FILE)
    return {"approximation_objective": obj}, [W_ID_FILE, "wtensor_identity.meta.json"]


def _pick_w_file(cfg, out: Path) -> str:
    choice = cfg["train.wtensor"]
    if choice == "identity":
        _need(out, W_ID_FILE, "approx")
        return W_ID_FILE
    if choice == "original":
        _need(out, W_FILE, "fit-lm")
        return W_FILE
    if choice != "auto":
        raise InputError(f"train.wtensor must be auto, identity or original, got {choice!r}")
    if (out / W_ID_FILE).exists() and cfg["approximate"]:
        return W_ID_FILE
    _need(out, W_FILE, "fit-lm")
    return W_FILE


def stage_train(cfg, out: Path):
    bundle = _bundle(cfg)
    w_file = _pick_w_file(cfg, out)
    w = load_wtensor(out / w_file)
    Y = w.label_weights(bundle.train.L)
    model = train_end_model(bundle.train.X, Y, _train_config(cfg))
    model.metadata["wtensor_file"] = w_file
    save_end_model(model, out / MODEL_FILE)
    info = {
        "final_training_loss": model.metadata["final_objective"],
        "valid_loss": holdout_loss(model, bundle.valid.X, bundle.valid.y),
        "test_loss": holdout_loss(model, bundle.test.X, bundle.test.y),
    }
    return info, [MODEL_FILE]


def _load_trained(cfg, out: Path):
    bundle = _bundle(cfg)
    model = load_end_model(_need(out, MODEL_FILE, "train"))
    w_file = model.metadata.get("wtensor_file", W_FILE)
    w = load_wtensor(_need(out, w_file, "fit-lm"))
    Y = w.label_weights(bundle.train.L)
    h = InverseHessian(model, bundle.train.X, Y, float(cfg["influence.damping"]), _solver_config(cfg))
    return bundle, model, w, Y, h


def _tensor(method, model, h, w, bundle, Y, holdout, use_relatif=False, damping=1e-3):
    X, L = bundle.train.X, bundle.train.L
    if method == "rw":
        if not w.is_identity:
            raise InputError(
                "the trained W is exponential-kind; use --method rw-exp or run `sourcetrace approx` and retrain"
            )
        t = rw_influence(model, h, w, L, X, holdout)
    elif method == "rw-exp":
        if w.is_identity:
            raise InputError("the trained W is identity-kind; use --method rw")
        t = rw_influence_exp(model, h, w, L, X, holdout)
    elif method == "wm":
        t = wm_influence(model, h, w, L, X, holdout, Y)
    else:
        raise InputError(f"unknown influence method {method!r}")
    if use_relatif:
        if not w.is_identity or method == "rw-exp":
            raise InputError("--relatif needs an identity-kind W with --method rw or wm")
        exact = InverseHessian(model, X, Y, damping)
        t = relatif(t, self_influence_tensor(model, exact, w, L, X))
    return t


def stage_influence(cfg, out: Path):
    bundle, model, w, Y, h = _load_trained(cfg, out)
    holdout = Holdout(bundle.valid.X, bundle.valid.y, "valid")
    method = cfg["influence.method"]
    if method == "ordinary":
        phi = ordinary_influence(model, h, bundle.train.X, Y, holdout)
        write_ranked_csv(out / "influence_ordinary.csv", ["i", "score"], [(i, float(s)) for i, s in enumerate(phi)])
        return {"method": method, "top_points": np.argsort(-phi, kind="stable")[:5].tolist()}, [
            "influence_ordinary.csv"
        ]
    t = _tensor(method, model, h, w, bundle, Y, holdout, cfg["influence.relatif"], float(cfg["influence.damping"]))
    save_influence(t, out / INFLUENCE_FILE)
    lf = aggregate_influence(t, "lf")
    names = [f"lf_{j}" for j in range(w.n_lfs)] + (["prior"] if len(lf) > w.n_lfs else [])
    write_ranked_csv(out / "lf_influence.csv", ["lf", "score"], list(zip(names, map(float, lf))))
    vote = aggregate_influence(t, "vote")
    v = bundle.train.L.votes
    rows = [(i, j, int(v[i, j]), float(vote[i, j])) for i, j in zip(*np.nonzero(v != -1))]
    write_ranked_csv(out / "vote_influence.csv", ["i", "j", "vote", "score"], rows)
    top = np.argsort(-lf[: w.n_lfs], kind="stable")[:5]
    return {"method": t.method, "top_harmful_lfs": [(int(j), float(lf[j])) for j in top]}, [
        INFLUENCE_FILE,
        "influence.csv",
        "lf_influence.csv",
        "vote_influence.csv",
    ]


def _validation_tensor(cfg, out, bundle, model, h, w, Y):
    """Stored validation tensor if its method fits, otherwise a fresh reweighting tensor."""
    p = out / INFLUENCE_FILE
    if p.exists():
        t = load_influence(p)
        if t.holdout_id == "valid" and t.scores.shape[0] == len(bundle.train.L):
            return t
    holdout = Holdout(bundle.valid.X, bundle.valid.y, "valid")
    return _tensor("rw" if w.is_identity else "rw-exp", model, h, w, bundle, Y, holdout)


def stage_mislabels(cfg, out: Path):
    bundle, model, w, Y, h = _load_trained(cfg, out)
    L = bundle.train.L
    t = _validation_tensor(cfg, out, bundle, model, h, w, Y)
    grids = {
        "SIF": mislabel_scores(t, L),
        "LM": discrepancy_scores(L, infer_labels(w, L)),
        "EM": discrepancy_scores(L, model.predict_proba(bundle.train.X)),
        "KNN": knn_discrepancy_scores(L, bundle.train.X, bundle.valid.X, bundle.valid.y, int(cfg["apps.knn_k"]), L.n_classes),
    }
    v = L.votes
    cells = list(zip(*np.nonzero(v != -1)))
    with open(out / "mislabels.csv", "w") as fh:
        fh.write("i,j,vote," + ",".join(MISLABEL_METHODS) + "\n")
        for i, j in cells:
            fh.write(f"{i},{j},{v[i, j]}," + ",".join(repr(float(grids[m][i, j])) for m in MISLABEL_METHODS) + "\n")
    info = {"sif_method": t.method}
    entries = []
    if bundle.train.y is not None:
        for m in MISLABEL_METHODS:
            rep = mislabel_report(grids[m], L, bundle.train.y, m)
            value = rep.pooled_ap if cfg["apps.pooled"] else rep.macro_ap
            entries.append((m, "pooled_ap" if cfg["apps.pooled"] else "macro_ap", value))
            info[m] = value
            info[f"{m}_skipped_lfs"] = rep.skipped
    else:
        info["note"] = "no train gold labels; AP not computed"
    write_summary(out / "mislabels_summary.json", entries, {"sif_method": t.method})
    return info, ["mislabels.csv", "mislabels_summary.json"]


def stage_prune(cfg, out: Path):
    bundle, model, w, Y, h = _load_trained(cfg, out)
    if not w.is_identity:
        raise InputError("pruning needs an identity-kind W; run `sourcetrace approx` and retrain")
    holdout = Holdout(bundle.valid.X, bundle.valid.y, "valid")
    t = rw_influence(model, h, w, bundle.train.L, bundle.train.X, holdout)
    threads = resolve_threads(cfg)
    tcfg = _train_config(cfg)
    grid = cfg["apps.alpha_grid"]
    grid = None if grid is None else [math.inf if a in ("inf", math.inf) else float(a) for a in grid]
    res = sweep_alpha(bundle, w, bundle.train.L, t, grid, tcfg, threads)
    phi = ordinary_influence(model, h, bundle.train.X, Y, holdout)
    res_data = sweep_alpha_points(bundle, w, bundle.train.L, phi, None, tcfg, threads)
    save_end_model(res.model, out / "end_model_pruned.json")
    with open(out / "prune_sweep.csv", "w") as fh:
        fh.write("method,alpha,valid_loss,test_loss,n_discarded\n")
        for name, r in (("SIF", res), ("IF", res_data)):
            for a, vl, tl, n in r.sweep:
                fh.write(f"{name},{a!r},{vl!r},{tl!r},{n}\n")
    info = {"sif": res.summary(), "data_if": res_data.summary()}
    write_summary(
        out / "prune_summary.json",
        [("SIF", "test_loss", res.test_loss_after), ("IF", "test_loss", res_data.test_loss_after),
         ("ERM", "test_loss", res.test_loss_before)],
        info,
    )
    return info, ["end_model_pruned.json", "prune_sweep.csv", "prune_summary.json"]


def stage_group_if(cfg, out: Path):
    bundle, model, w, Y, h = _load_trained(cfg, out)
    k_max = cfg["apps.k_max"]
    res = group_if_lf_removal(
        model, h, bundle, w, bundle.train.L, None if k_max is None else int(k_max), _train_config(cfg),
        resolve_threads(cfg),
    )
    info = res.summary()
    info["k"] = int(res.alpha)
    info["removed_lfs"] = np.flatnonzero(res.discarded).tolist()
    info["sweep"] = res.sweep
    write_json(out / "group_if.json", info)
    return info, ["group_if.json"]


def stage_correlate(cfg, out: Path):
    bundle, model, w, Y, h = _load_trained(cfg, out)
    if not w.is_identity:
        raise InputError("correlation studies need an identity-kind W; run `sourcetrace approx` and retrain")
    holdout = Holdout(bundle.valid.X, bundle.valid.y, "valid")
    L, X = bundle.train.L, bundle.train.X
    t = rw_influence(model, h, w, L, X, holdout)
    phi = ordinary_influence(model, h, X, Y, holdout)
    agg = aggregate_influence(t, "data")
    rho_data = spearman(agg, phi)
    lf_est = aggregate_influence(t, "lf")
    effects = actual_lf_effects(bundle, w, L, _train_config(cfg), resolve_threads(cfg))
    try:
        rho_lf = spearman(lf_est, -effects)
        lf_corr = {"rho": rho_lf.rho, "pvalue": rho_lf.pvalue}
    except UndefinedMetricError as exc:
        lf_corr = {"rho": None, "note": str(exc)}
    info = {
        "data_vs_ordinary": {"rho": rho_data.rho, "pvalue": rho_data.pvalue},
        "lf_vs_actual": lf_corr,
        "lf_estimated": lf_est,
        "lf_actual_change": effects,
    }
    write_json(out / "correlate.json", info)
    return {k: info[k] for k in ("data_vs_ordinary", "lf_vs_actual")}, ["correlate.json"]


def stage_explain(cfg, out: Path, index: int):
    bundle, model, w, Y, h = _load_trained(cfg, out)
    n_test = len(bundle.test.y)
    if not 0 <= index < n_test:
        raise InputError(f"test index {index} out of range [0, {n_test})")
    rep = explain_test_point(
        model, h, w, bundle.train.L, bundle.train.X, bundle.test.X[index], bundle.test.y[index]
    )
    rep["test_index"] = index
    name = f"explain_{index}.json"
    write_json(out / name, rep)
    return rep, [name]


# ---------------------------------------------------------------------------
# Synthetic fixtures


def synth(preset: str, out: Path, seed: int):
    out.mkdir(parents=True, exist_ok=True)
    if preset == "acceptance":
        written = []
        for s in range(5):
            b = generate_synthetic(SyntheticSpec(lf_accuracy=ACCEPTANCE_ACCURACIES, seed=s))
            save_bundle(b, out / f"seed_{s}")
            written.append(f"seed_{s}")
        return written
    if preset == "demo":
        b = generate_synthetic(SyntheticSpec(lf_accuracy=ACCEPTANCE_ACCURACIES, seed=seed))
        save_bundle(b, out / "data")
        write_json(
            out / "demo.json",
            {"data": str(out / "data"), "out": str(out / "run"), "label_model": "ds", "approximate": True, "seed": seed},
        )
        return ["data", "demo.json"]
    raise InputError(f"unknown preset {preset!r}")


# ---------------------------------------------------------------------------
# Argument parsing


def _add_common(p, data=True):
    p.add_argument("--config", help="JSON config with flat dotted keys; flags override it")
    p.add_argument("--out", help="output directory (default: sourcetrace_out)")
    p.add_argument("--threads", type=int, help="worker threads (default: $SOURCETRACE_THREADS or CPU count)")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    if data:
        p.add_argument("--data", help="directory with " + ", ".join(BUNDLE_FILES.values()))
        p.add_argument("--votes", help="train label-matrix CSV (overrides --data)")
        p.add_argument("--features", help="train feature CSV (overrides --data)")
        p.add_argument("--gold", help="train gold CSV, used only for evaluation")
        p.add_argument("--valid-features", dest="valid_features")
        p.add_argument("--valid-gold", dest="valid_gold")
        p.add_argument("--test-features", dest="test_features")
        p.add_argument("--test-gold", dest="test_gold")


def _add_lm(p):
    p.add_argument("--label-model", dest="label_model", choices=["mv", "ds", "metal"])
    p.add_argument("--lm-max-iter", dest="lm.max_iter", type=int)


def _add_approx(p):
    p.add_argument("--approx-max-iter", dest="approx.max_iter", type=int)


def _add_train(p):
    p.add_argument("--lr", dest="train.lr", type=float)
    p.add_argument("--epochs", dest="train.epochs", type=int)
    p.add_argument("--l2", dest="train.l2", type=float)
    p.add_argument("--solver-train", dest="train.solver", choices=["gd", "newton"])
    p.add_argument("--wtensor", dest="train.wtensor", choices=["auto", "identity", "original"])


def _add_influence(p, with_method=True):
    if with_method:
        p.add_argument("--method", dest="influence.method", choices=["ordinary", "rw", "rw-exp", "wm"])
        p.add_argument("--relatif", dest="influence.relatif", action="store_const", const=True)
    p.add_argument("--solver", dest="influence.solver", choices=["exact", "lissa"])
    p.add_argument("--damping", dest="influence.damping", type=float)
    p.add_argument("--lissa-batch", dest="lissa.batch_size", type=int)
    p.add_argument("--lissa-depth", dest="lissa.depth", type=int)
    p.add_argument("--lissa-repeats", dest="lissa.repeats", type=int)
    p.add_argument("--lissa-scale", dest="lissa.scale", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = UsageParser(prog="sourcetrace", description=__doc__)
    parser.add_argument("--version", action="version", version=f"sourcetrace {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=UsageParser)
    sub.required = True

    p = sub.add_parser("run", help="all stages: fit-lm, approx, train, influence, mislabels, prune")
    _add_common(p)
    _add_lm(p)
    _add_approx(p)
    _add_train(p)
    _add_influence(p)
    p.add_argument("--no-approx", dest="approximate", action="store_const", const=False)

    p = sub.add_parser("synth", help="write synthetic fixtures")
    _add_common(p, data=False)
    p.add_argument("--preset", choices=["acceptance", "demo"], default="demo")

    p = sub.add_parser("fit-lm", help="fit a label model and write its W tensor")
    _add_common(p)
    _add_lm(p)

    p = sub.add_parser("approx", help="identity-sigma approximation of the fitted W")
    _add_common(p)
    _add_approx(p)

    p = sub.add_parser("train", help="train the end model on the label-model output")
    _add_common(p)
    _add_train(p)
    p.add_argument("--no-approx", dest="approximate", action="store_const", const=False)

    p = sub.add_parser("influence", help="influence tensor against the validation set")
    _add_common(p)
    _add_influence(p)

    p = sub.add_parser(
        "mislabels",
        help="LF mislabel detection",
        description="Score every LF vote for being a mislabel with four methods: "
        "SIF (vote-level source-aware influence), LM (label-model discrepancy), "
        "EM (end-model discrepancy) and KNN (K-nearest-neighbour discrepancy on the validation set). "
        "Reports per-LF and macro average precision when train gold labels are available.",
    )
    _add_common(p)
    _add_influence(p, with_method=False)
    p.add_argument("--knn-k", dest="apps.knn_k", type=int, help="neighbours for KNN (default 10)")
    p.add_argument("--pooled", dest="apps.pooled", action="store_const", const=True, help="pooled instead of macro AP")

    p = sub.add_parser("prune", help="discard harmful loss terms, alpha tuned on validation loss")
    _add_common(p)
    _add_train(p)
    _add_influence(p, with_method=False)
    p.add_argument("--alpha", dest="apps.alpha_grid", type=float, nargs="+", help="alpha grid (+inf is always added)")

    p = sub.add_parser("group-if", help="remove the k most harmful LFs, k tuned on validation loss")
    _add_common(p)
    _add_train(p)
    _add_influence(p, with_method=False)
    p.add_argument("--k-max", dest="apps.k_max", type=int)

    p = sub.add_parser("correlate", help="Spearman studies: aggregated vs ordinary IF, LF influence vs retraining")
    _add_common(p)
    _add_train(p)
    _add_influence(p, with_method=False)

    p = sub.add_parser("explain", help="most responsible data point, LF and vote for one test point")
    _add_common(p)
    _add_influence(p, with_method=False)
    p.add_argument("--test-index", dest="test_index", type=int, required=True)
    return parser


STAGES = {
    "fit-lm": stage_fit_lm,
    "approx": stage_approx,
    "train": stage_train,
    "influence": stage_influence,
    "mislabels": stage_mislabels,
    "prune": stage_prune,
    "group-if": stage_group_if,
    "correlate": stage_correlate,
}


def _print(stage, info):
    print(f"[{stage}] " + json.dumps(to_jsonable(info), sort_keys=True))


def run_stage(name, fn, cfg, out, manifest, *extra):
    try:
        info, outputs = fn(cfg, out, *extra)
    except BaseException as exc:
        manifest.record(name, [], status="failed", error=f"{type(exc).__name__}: {exc}")
        raise
    manifest.record(name, outputs)
    return info


def run_pipeline(cfg, out, manifest):
    summary = {}
    info = run_stage("fit-lm", stage_fit_lm, cfg, out, manifest)
    summary["label_model"] = info["label_model"]
    if cfg["approximate"]:
        summary["approximation_objective"] = run_stage("approx", stage_approx, cfg, out, manifest)[
            "approximation_objective"
        ]
    info = run_stage("train", stage_train, cfg, out, manifest)
    summary["final_training_loss"] = info["final_training_loss"]
    info = run_stage("influence", stage_influence, cfg, out, manifest)
    summary["top_harmful_lfs"] = info.get("top_harmful_lfs")
    run_stage("mislabels", stage_mislabels, cfg, out, manifest)
    w = load_wtensor(out / load_end_model(out / MODEL_FILE).metadata["wtensor_file"])
    if w.is_identity:
        info = run_stage("prune", stage_prune, cfg, out, manifest)
        summary["selected_alpha"] = info["sif"]["alpha"]
        summary["test_loss_before"] = info["sif"]["test_loss_before"]
        summary["test_loss_after"] = info["sif"]["test_loss_after"]
    return summary


def _print_summary(s):
    print(f"label model          : {s['label_model']}")
    if "approximation_objective" in s:
        print(f"approximation obj.   : {s['approximation_objective']:.6g}")
    print(f"final training loss  : {s['final_training_loss']:.6g}")
    if s.get("top_harmful_lfs"):
        print("top harmful LFs      : " + ", ".join(f"lf_{j} ({v:+.4g})" for j, v in s["top_harmful_lfs"]))
    if "selected_alpha" in s:
        print(f"selected alpha       : {s['selected_alpha']:.6g}")
        print(f"test loss before/after: {s['test_loss_before']:.6g} / {s['test_loss_after']:.6g}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "synth":
            out = Path(args.out or "sourcetrace_synth")
            written = synth(args.preset, out, args.seed or 0)
            print(f"[synth] wrote {', '.join(written)} under {out}")
            return EXIT_OK
        cfg = resolve_config(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        manifest = Manifest(out, cfg)
        if args.command == "run":
            _print_summary(run_pipeline(cfg, out, manifest))
        elif args.command == "explain":
            _print("explain", run_stage("explain", stage_explain, cfg, out, manifest, args.test_index))
        else:
            _print(args.command, run_stage(args.command, STAGES[args.command], cfg, out, manifest))
        return EXIT_OK
    except FileNotFoundError as exc:
        print(f"sourcetrace: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"sourcetrace: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, UndefinedMetricError, SourceTraceError) as exc:
        print(f"sourcetrace: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
