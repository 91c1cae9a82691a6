"""Downstream uses of the influence tensors: LF mislabel detection, loss-term pruning,
LF removal, retraining oracles and per-test-point explanations."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist
from threadpoolctl import threadpool_limits

from .data import ABSTAIN, DatasetBundle, LabelMatrix
from .endmodel import EndModel, TrainConfig, holdout_loss, train_end_model
from .exceptions import DomainError, ShapeError, UndefinedMetricError
from .influence import (
    Holdout,
    InfluenceTensor,
    InverseHessian,
    aggregate_influence,
    rw_influence,
    rw_influence_exp,
)
from .labelmodel import WTensor, infer_labels
from .metrics import average_precision

logger = logging.getLogger(__name__)

DEFAULT_QUANTILES = (0.0, 0.5, 0.8, 0.9, 0.95, 0.99)
MISLABEL_METHODS = ("SIF", "LM", "EM", "KNN")


def _votes(votes) -> np.ndarray:
    return votes.votes if isinstance(votes, LabelMatrix) else np.asarray(votes)


def parallel_map(fn: Callable, items: Sequence, threads: int = 1) -> list:
    """Ordered map; BLAS pinned to one thread per job so results do not depend on ``threads``."""
    with threadpool_limits(limits=1):
        if threads <= 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Mislabel detection


@dataclass
class MislabelReport:
    scores: np.ndarray  # N x M, NaN on abstain cells
    method: str
    per_lf_ap: np.ndarray  # NaN for LFs without positives
    macro_ap: float
    skipped: list = field(default_factory=list)
    pooled_ap: Optional[float] = None


def mislabel_scores(t: InfluenceTensor, votes) -> np.ndarray:
    """Vote-level influence per (i, j); abstain cells are NaN."""
    v = _votes(votes)
    out = aggregate_influence(t, "vote").copy()
    if out.shape != v.shape:
        raise ShapeError("influence tensor and votes disagree on N x M")
    out[v == ABSTAIN] = np.nan
    return out


def discrepancy_scores(votes, probs) -> np.ndarray:
    """``1 - probs[i, L_ij]`` on voted cells, NaN on abstains."""
    v = _votes(votes)
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != v.shape[0]:
        raise ShapeError(f"probabilities have shape {p.shape}, votes {v.shape}")
    if v.max(initial=0) > p.shape[1]:
        raise ShapeError("votes exceed the number of probability columns")
    cols = np.where(v == ABSTAIN, 0, v - 1)
    out = 1.0 - np.take_along_axis(p, cols, axis=1)
    out[v == ABSTAIN] = np.nan
    return out


def knn_probabilities(train_X, valid_X, valid_y, n_classes: int, k: int = 10) -> np.ndarray:
    """Uniform-weight KNN class probabilities; distance ties go to the lower validation index."""
    train_X = np.atleast_2d(np.asarray(train_X, dtype=np.float64))
    valid_X = np.atleast_2d(np.asarray(valid_X, dtype=np.float64))
    valid_y = np.asarray(valid_y)
    if not 1 <= k <= len(valid_X):
        raise DomainError(f"K={k} must lie in [1, {len(valid_X)}] (validation size)")
    d2 = cdist(train_X, valid_X, "sqeuclidean")
    nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
    probs = np.zeros((len(train_X), n_classes))
    rows = np.repeat(np.arange(len(train_X)), k)
    np.add.at(probs, (rows, valid_y[nn].ravel() - 1), 1.0 / k)
    return probs


def knn_discrepancy_scores(votes, train_X, valid_X, valid_y, k: int = 10, n_classes=None) -> np.ndarray:
    v = _votes(votes)
    if n_classes is None:
        n_classes = votes.n_classes if isinstance(votes, LabelMatrix) else int(max(v.max(), np.max(valid_y)))
    return discrepancy_scores(v, knn_probabilities(train_X, valid_X, valid_y, n_classes, k))


def mislabel_truth(votes, gold) -> np.ndarray:
    v = _votes(votes)
    return (v != ABSTAIN) & (v != np.asarray(gold)[:, None])


def mislabel_report(scores, votes, gold, method: str) -> MislabelReport:
    """Per-LF AP over voted cells, macro-averaged over LFs that have a mislabel."""
    v = _votes(votes)
    scores = np.asarray(scores, dtype=np.float64)
    truth = mislabel_truth(v, gold)
    voted = v != ABSTAIN
    per_lf = np.full(v.shape[1], np.nan)
    skipped = []
    for j in range(v.shape[1]):
        m = voted[:, j]
        try:
            per_lf[j] = average_precision(scores[m, j], truth[m, j])
        except UndefinedMetricError:
            skipped.append(j)
    macro = float(np.nanmean(per_lf)) if np.any(~np.isnan(per_lf)) else math.nan
    try:
        pooled = average_precision(scores[voted], truth[voted])
    except UndefinedMetricError:
        pooled = None
    return MislabelReport(np.where(voted, scores, np.nan), method, per_lf, macro, skipped, pooled)


# ---------------------------------------------------------------------------
# Pruning harmful loss terms


@dataclass
class PruneResult:
    alpha: float
    discarded: np.ndarray  # boolean N x S x C (or N x M LF/point masks expanded)
    model: EndModel
    valid_loss_before: float
    valid_loss_after: float
    test_loss_before: float
    test_loss_after: float
    zeroed_points: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    sweep: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "alpha": self.alpha,
            "n_discarded": int(self.discarded.sum()),
            "valid_loss_before": self.valid_loss_before,
            "valid_loss_after": self.valid_loss_after,
            "test_loss_before": self.test_loss_before,
            "test_loss_after": self.test_loss_after,
            "n_zeroed_points": int(len(self.zeroed_points)),
        }


def select_harmful_terms(t: InfluenceTensor, alpha: float) -> np.ndarray:
    """Boolean mask of active terms whose score exceeds ``alpha``."""
    if t.method not in ("rw", "relatif_rw"):
        raise DomainError(f"term discarding is defined for reweighting tensors, got {t.method!r}")
    return t.active & (t.scores > alpha)


def pruned_label_weights(w: WTensor, votes, discarded) -> np.ndarray:
    """Label weights with the discarded terms removed and the denominators left as they were."""
    A = w.term_weights(votes)
    discarded = np.asarray(discarded, dtype=bool)
    if discarded.shape != A.shape:
        raise ShapeError(f"discard mask has shape {discarded.shape}, terms have {A.shape}")
    return np.where(discarded, 0.0, A).sum(axis=1)


def _losses(model, bundle):
    return (
        holdout_loss(model, bundle.valid.X, bundle.valid.y),
        holdout_loss(model, bundle.test.X, bundle.test.y),
    )


def fit_baseline(bundle: DatasetBundle, w: WTensor, cfg: Optional[TrainConfig] = None, votes=None) -> EndModel:
    votes = bundle.train.L if votes is None else votes
    return train_end_model(bundle.train.X, w.label_weights(votes), cfg)


def discard_and_retrain(
    bundle: DatasetBundle,
    w: WTensor,
    votes,
    discarded,
    cfg: Optional[TrainConfig] = None,
    baseline: Optional[EndModel] = None,
    alpha: float = math.nan,
) -> PruneResult:
    """Drop the selected loss terms and retrain from scratch."""
    baseline = baseline or fit_baseline(bundle, w, cfg, votes)
    Y = pruned_label_weights(w, votes, discarded)
    had_weight = w.label_weights(votes).sum(axis=1) > 0
    zeroed = np.flatnonzero(had_weight & (Y.sum(axis=1) <= 0))
    if len(zeroed):
        logger.info("%d points lost all their loss terms", len(zeroed))
    model = train_end_model(bundle.train.X, Y, cfg)
    vb, tb = _losses(baseline, bundle)
    va, ta = _losses(model, bundle)
    return PruneResult(alpha, np.asarray(discarded, dtype=bool), model, vb, va, tb, ta, zeroed)


def default_alpha_grid(scores, quantiles=DEFAULT_QUANTILES) -> list:
    s = np.asarray(scores, dtype=np.float64).ravel()
    pos = s[s > 0]
    grid = [float(np.quantile(pos, q)) for q in quantiles] if pos.size else []
    # the 0% quantile of positive scores would keep the smallest positive term
    if pos.size:
        grid[0] = 0.0
    return sorted(set(grid)) + [math.inf]


def _sweep(bundle, w, votes, mask_for, grid, cfg, threads):
    if grid is None or len(grid) == 0:
        raise DomainError("alpha grid must not be empty")
    grid = list(grid)
    if math.inf not in grid:
        grid.append(math.inf)
    baseline = fit_baseline(bundle, w, cfg, votes)

    def job(alpha):
        if alpha == math.inf:
            mask = np.zeros(w.term_weights(votes).shape, dtype=bool)
        else:
            mask = mask_for(alpha)
        return discard_and_retrain(bundle, w, votes, mask, cfg, baseline, alpha)

    results = parallel_map(job, grid, threads)
    best = min(range(len(results)), key=lambda k: (results[k].valid_loss_after, k))
    chosen = results[best]
    chosen.sweep = [(r.alpha, r.valid_loss_after, r.test_loss_after, int(r.discarded.sum())) for r in results]
    return chosen


def sweep_alpha(
    bundle: DatasetBundle,
    w: WTensor,
    votes,
    t: InfluenceTensor,
    grid=None,
    cfg: Optional[TrainConfig] = None,
    threads: int = 1,
) -> PruneResult:
    """Tune the discard threshold on validation loss; the grid always contains +inf (no pruning)."""
    if grid is None:
        grid = default_alpha_grid(t.scores[t.active])
    return _sweep(bundle, w, votes, lambda a: select_harmful_terms(t, a), grid, cfg, threads)


def sweep_alpha_points(
    bundle: DatasetBundle,
    w: WTensor,
    votes,
    point_scores,
    grid=None,
    cfg: Optional[TrainConfig] = None,
    threads: int = 1,
) -> PruneResult:
    """Data-level counterpart: discard whole training points whose influence exceeds alpha."""
    phi = np.asarray(point_scores, dtype=np.float64)
    shape = w.term_weights(votes).shape
    if phi.shape != (shape[0],):
        raise ShapeError("point scores must have one entry per training point")
    if grid is None:
        grid = default_alpha_grid(phi)

    def mask_for(alpha):
        return np.broadcast_to((phi > alpha)[:, None, None], shape).copy()

    return _sweep(bundle, w, votes, mask_for, grid, cfg, threads)


def weight_moving_labels(w: WTensor, votes, moved) -> np.ndarray:
    """Training labels with the selected entries masked from each point's label and renormalized."""
    from .influence import _normalize, _source_scores

    s, sel = _source_scores(w, votes)
    moved = np.asarray(moved, dtype=bool)
    if moved.shape != sel.shape:
        raise ShapeError(f"mask has shape {moved.shape}, terms have {sel.shape}")
    masked = s - np.where(moved, sel, 0.0).sum(axis=1)
    out, bad = _normalize(masked, w.sigma, w.n_classes)
    Y = w.label_weights(votes)
    touched = moved.any(axis=(1, 2))
    Y[touched] = out[touched]
    Y[touched & bad] = 0.0
    return Y


# ---------------------------------------------------------------------------
# LF removal


def lf_influence(model, h_solver: InverseHessian, bundle: DatasetBundle, w: WTensor, votes) -> np.ndarray:
    """LF-level influence on the validation set (real LFs only)."""
    holdout = Holdout(bundle.valid.X, bundle.valid.y, "valid")
    if w.is_identity:
        t = rw_influence(model, h_solver, w, votes, bundle.train.X, holdout)
    else:
        t = rw_influence_exp(model, h_solver, w, votes, bundle.train.X, holdout)
    return aggregate_influence(t, "lf")[: w.n_lfs]


def group_if_lf_removal(
    model,
    h_solver: InverseHessian,
    bundle: DatasetBundle,
    w: WTensor,
    votes,
    k_max: Optional[int] = None,
    cfg: Optional[TrainConfig] = None,
    threads: int = 1,
    lf_scores=None,
) -> PruneResult:
    """Remove the k most harmful LFs (labels refit from the reduced W), k tuned on validation loss.

    ``alpha`` of the result holds the selected k; ``discarded`` is a length-M LF mask.
    """
    m = w.n_lfs
    if m < 2:
        raise DomainError("group-IF removal needs at least two LFs")
    scores = lf_influence(model, h_solver, bundle, w, votes) if lf_scores is None else np.asarray(lf_scores)
    order = np.argsort(-scores, kind="stable")
    k_hi = m - 1 if k_max is None else min(m - 1, int(k_max))
    if k_hi < 0:
        raise DomainError("k_max must be non-negative")
    vb, tb = _losses(model, bundle)

    def job(k):
        removed = order[:k]
        wk = w.without_lfs(removed)
        mk = model if k == 0 else train_end_model(bundle.train.X, wk.label_weights(votes), cfg)
        mask = np.zeros(m, dtype=bool)
        mask[removed] = True
        va, ta = _losses(mk, bundle)
        return PruneResult(float(k), mask, mk, vb, va, tb, ta)

    results = parallel_map(job, list(range(k_hi + 1)), threads)
    best = min(range(len(results)), key=lambda k: (results[k].valid_loss_after, k))
    chosen = results[best]
    chosen.sweep = [(r.alpha, r.valid_loss_after, r.test_loss_after, int(r.discarded.sum())) for r in results]
    return chosen


# ---------------------------------------------------------------------------
# Retraining oracles


def actual_effect_retrain(
    bundle: DatasetBundle,
    w: WTensor,
    votes,
    component: int,
    kind: str = "lf",
    cfg: Optional[TrainConfig] = None,
    baseline: Optional[EndModel] = None,
    holdout: Optional[Holdout] = None,
) -> float:
    """Holdout-loss change from dropping one component's loss terms and retraining.

    Negative values mean the component was harmful. Denominators stay frozen, so
    this is the removal the reweighting influence predicts.
    """
    holdout = holdout or Holdout(bundle.valid.X, bundle.valid.y, "valid")
    shape = w.term_weights(votes).shape
    mask = np.zeros(shape, dtype=bool)
    if kind == "lf":
        if not 0 <= component < shape[1]:
            raise DomainError(f"LF index {component} out of range")
        mask[:, component, :] = True
    elif kind == "data":
        if not 0 <= component < shape[0]:
            raise DomainError(f"data index {component} out of range")
        mask[component] = True
    else:
        raise DomainError(f"unknown component kind {kind!r}")
    baseline = baseline or fit_baseline(bundle, w, cfg, votes)
    model = train_end_model(bundle.train.X, pruned_label_weights(w, votes, mask), cfg)
    return holdout_loss(model, holdout.X, holdout.y) - holdout_loss(baseline, holdout.X, holdout.y)


def actual_lf_effects(bundle, w, votes, cfg=None, threads: int = 1) -> np.ndarray:
    baseline = fit_baseline(bundle, w, cfg, votes)
    return np.array(
        parallel_map(
            lambda j: actual_effect_retrain(bundle, w, votes, j, "lf", cfg, baseline),
            list(range(w.n_sources)),
            threads,
        )
    )


# ---------------------------------------------------------------------------
# Explanations


def explain_test_point(model, h_solver: InverseHessian, w: WTensor, votes, train_X, x, y, top: int = 5) -> dict:
    """Most responsible training point, LF and vote for one test prediction."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    holdout = Holdout(x, np.atleast_1d(y), "test-point")
    if w.is_identity:
        t = rw_influence(model, h_solver, w, votes, train_X, holdout)
    else:
        t = rw_influence_exp(model, h_solver, w, votes, train_X, holdout)
    v = _votes(votes)
    data = aggregate_influence(t, "data")
    lf = aggregate_influence(t, "lf")[: w.n_lfs]
    vote = aggregate_influence(t, "vote")
    vote = np.where(v == ABSTAIN, -np.inf, vote)
    pred = int(model.predict(x)[0])
    ranked_data = np.argsort(-data, kind="stable")[:top]
    ranked_lf = np.argsort(-lf, kind="stable")[:top]
    flat = np.argsort(-vote.ravel(), kind="stable")[:top]
    votes_out = []
    for f in flat:
        i, j = divmod(int(f), v.shape[1])
        if not np.isfinite(vote[i, j]):
            break
        votes_out.append({"data": i, "lf": j, "vote": int(v[i, j]), "score": float(vote[i, j])})
    return {
        "gold": int(np.atleast_1d(y)[0]),
        "predicted": pred,
        "misclassified": pred != int(np.atleast_1d(y)[0]),
        "method": t.method,
        "data": [{"index": int(i), "score": float(data[i])} for i in ranked_data],
        "lf": [{"index": int(j), "score": float(lf[j])} for j in ranked_lf],
        "vote": votes_out,
    }
