"""Inverse-HVP solvers and influence scores over decomposed (data, source, class) loss terms.

Sign convention: a score is the derivative of the mean holdout loss with respect to
the weight ``eps`` of the perturbed term, ``-grad L_holdout^T H^{-1} grad term``.
Removing a term corresponds to ``eps = -1/N`` and changes the holdout loss by about
``-score / N``, so a positive score marks a harmful component.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import softmax

from .data import LabelMatrix, vote_rows
from .endmodel import EndModel, HessianOperator, augment, hessian, hvp, loss_gradient, one_hot
from .exceptions import DomainError, NumericalError, ShapeError
from .labelmodel import EXPONENTIAL, WTensor, infer_labels

logger = logging.getLogger(__name__)

METHODS = ("ordinary", "rw", "rw_exp", "wm", "relatif_rw", "relatif_wm")
LEVELS = ("data", "lf", "vote", "parameter")


@dataclass
class IhvpSolverConfig:
    kind: str = "exact"
    batch_size: int = 16
    depth: int = 5000
    repeats: int = 10
    scale: Optional[float] = None
    seed: int = 0

    def validate(self):
        if self.kind not in ("exact", "lissa"):
            raise DomainError(f"unknown iHVP solver {self.kind!r}")
        if self.batch_size < 1 or self.depth < 1 or self.repeats < 1:
            raise DomainError("LiSSA batch size, depth and repeats must be >= 1")
        if self.scale is not None and self.scale < 1:
            raise DomainError("LiSSA scale must be >= 1")


@dataclass(frozen=True, eq=False)
class Holdout:
    X: np.ndarray
    y: np.ndarray
    name: str = "valid"

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        y = np.atleast_1d(np.asarray(self.y, dtype=np.int64))
        if X.shape[0] == 0:
            raise DomainError("holdout set is empty")
        if X.shape[0] != y.shape[0]:
            raise ShapeError("holdout features and labels disagree on size")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.X.shape[0]


def holdout_gradient(model: EndModel, holdout: Holdout) -> np.ndarray:
    """Mean gradient of the holdout cross-entropy (flattened, length P)."""
    Y = one_hot(holdout.y, model.n_classes)
    return loss_gradient(model.theta, holdout.X, Y).mean(axis=0)


# ---------------------------------------------------------------------------
# Inverse Hessian-vector products


def ihvp_exact(h: HessianOperator, v) -> np.ndarray:
    """Solve ``H u = v`` by Cholesky with one step of iterative refinement."""
    v = np.asarray(v, dtype=np.float64)
    if not np.any(v):
        return np.zeros_like(v)
    try:
        factor = cho_factor(h.matrix, lower=True, check_finite=True)
    except (LinAlgError, ValueError) as exc:
        cond = np.linalg.cond(h.matrix)
        raise NumericalError(f"Hessian factorization failed (condition number {cond:.3g}): {exc}") from exc
    return _refined_solve(h.matrix, factor, v)


def _refined_solve(H, factor, v):
    u = cho_solve(factor, v)
    u = u + cho_solve(factor, v - H @ u)
    res = np.linalg.norm(H @ u - v, axis=0)
    if np.any(res > 1e-8 * np.maximum(np.linalg.norm(v, axis=0), 1e-300)):
        raise NumericalError(
            f"iHVP residual {res.max():.3g} too large (condition number {np.linalg.cond(H):.3g})"
        )
    return u


def lissa_scale(X, l2: float, damping: float) -> float:
    """Upper bound on the spectral norm of any single-point damped Hessian (>= 1)."""
    Xa = augment(X)
    # softmax curvature has spectral norm <= 1/2; weights of 1 for simplex labels
    return max(1.0, 0.5 * float(np.max(np.sum(Xa * Xa, axis=1))) + l2 + damping)


def ihvp_lissa(model: EndModel, X, Y, v, cfg: IhvpSolverConfig, damping: float = 1e-3) -> np.ndarray:
    """Stochastic inverse-HVP by the truncated Neumann recursion.

    ``u_t = v + (I - H_batch / scale) u_{t-1}``, ``u_0 = v``; returns ``u_J / scale``
    averaged over ``repeats`` independent runs.
    """
    cfg.validate()
    v = np.asarray(v, dtype=np.float64)
    if not np.any(v):
        return np.zeros_like(v)
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n = X.shape[0]
    scale = cfg.scale if cfg.scale is not None else 10.0 * (1.0 + damping)
    rng = np.random.default_rng(cfg.seed)
    full = cfg.batch_size >= n  # a batch covering the data uses every point once
    total = np.zeros_like(v)
    for _ in range(cfg.repeats):
        u = v.copy()
        for step in range(cfg.depth):
            idx = slice(None) if full else rng.integers(0, n, size=cfg.batch_size)
            hu = hvp(model.theta, X[idx], Y[idx], u, model.l2, damping)
            u = v + u - hu / scale
            if step % 100 == 0 and not np.linalg.norm(u) < 1e8:
                raise NumericalError(
                    f"LiSSA diverged at step {step} (|u| > 1e8); increase the scale factor (now {scale})"
                )
        total += u / scale
    return total / cfg.repeats


class InverseHessian:
    """Inverse of the damped training-objective Hessian at a trained model.

    ``solve`` dispatches to the exact or LiSSA solver; the dense inverse (exact
    solver only) backs self-influence quadratic forms.
    """

    def __init__(self, model: EndModel, X, Y, damping: float = 1e-3, config: Optional[IhvpSolverConfig] = None):
        self.model = model
        self.X = np.asarray(X, dtype=np.float64)
        self.Y = np.asarray(Y, dtype=np.float64)
        self.damping = float(damping)
        self.config = config or IhvpSolverConfig()
        self.config.validate()
        self._hessian = None
        self._factor = None

    @property
    def hessian(self) -> HessianOperator:
        if self._hessian is None:
            self._hessian = hessian(self.model.theta, self.X, self.Y, self.model.l2, self.damping)
        return self._hessian

    def _exact_solve(self, v):
        if self._factor is None:
            try:
                self._factor = cho_factor(self.hessian.matrix, lower=True)
            except LinAlgError as exc:
                raise NumericalError(f"Hessian factorization failed: {exc}") from exc
        return _refined_solve(self.hessian.matrix, self._factor, v)

    def solve(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if self.config.kind == "lissa":
            return ihvp_lissa(self.model, self.X, self.Y, v, self.config, self.damping)
        if not np.any(v):
            return np.zeros_like(v)
        return self._exact_solve(v)

    def dense_inverse(self) -> np.ndarray:
        eye = np.eye(self.hessian.dim)
        return self._exact_solve(eye)

    def describe(self) -> dict:
        d = asdict(self.config)
        d["damping"] = self.damping
        return d


# ---------------------------------------------------------------------------
# Influence tensors


@dataclass(frozen=True, eq=False)
class InfluenceTensor:
    """N x S x C scores; S = n_lfs, plus one trailing slab for an identity prior pseudo-LF."""

    scores: np.ndarray
    method: str
    holdout_id: str
    solver: dict = field(default_factory=dict)
    n_lfs: Optional[int] = None
    active: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise DomainError(f"unknown influence method {self.method!r}")
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 3:
            raise ShapeError("influence scores must be N x S x C")
        if not np.all(np.isfinite(s)):
            raise NumericalError("influence scores contain non-finite values")
        object.__setattr__(self, "scores", s)
        if self.n_lfs is None:
            object.__setattr__(self, "n_lfs", s.shape[1])
        if self.active is None:
            object.__setattr__(self, "active", s != 0)

    @property
    def shape(self):
        return self.scores.shape

    @property
    def lf_scores(self) -> np.ndarray:
        """Scores restricted to the real LFs (N x M x C)."""
        return self.scores[:, : self.n_lfs, :]

    def with_scores(self, scores, method) -> "InfluenceTensor":
        return InfluenceTensor(scores, method, self.holdout_id, dict(self.solver), self.n_lfs, self.active)


def _test_direction(model, h_solver: InverseHessian, holdout: Holdout) -> np.ndarray:
    """``U = H^{-1} grad L_holdout`` reshaped to C x (d+1)."""
    g = holdout_gradient(model, holdout)
    return h_solver.solve(g).reshape(model.theta.shape)


def _projections(model, X, U):
    """``z_i = U x~_i`` (N x C) and ``f_i`` (N x C) at the trained model."""
    Xa = augment(X)
    return Xa @ U.T, softmax(Xa @ model.theta.T, axis=1)


def ordinary_influence(model, h_solver: InverseHessian, X, Y, holdout: Holdout, index=None):
    """Data-level influence of each training point's noise-aware loss on the holdout mean loss.

    Returns the length-N vector, or a scalar when ``index`` is given.
    """
    U = _test_direction(model, h_solver, holdout)
    z, f = _projections(model, X, U)
    Y = np.asarray(Y, dtype=np.float64)
    # grad loss_i . u = sum_c (f_c s_i - Y_ic) z_ic
    dots = np.sum((f * Y.sum(axis=1, keepdims=True) - Y) * z, axis=1)
    phi = -dots
    return float(phi[index]) if index is not None else phi


def _active_mask(w: WTensor, votes) -> np.ndarray:
    sel = w.selected(votes)
    if w.is_identity and w.has_prior:
        sel = np.concatenate([sel, np.broadcast_to(w.class_prior, (sel.shape[0], 1, w.n_classes))], axis=1)
    return sel != 0


def rw_influence(model, h_solver: InverseHessian, w: WTensor, votes, X, holdout: Holdout) -> InfluenceTensor:
    """Reweighting influence of each decomposed loss term (identity-kind W)."""
    if not w.is_identity:
        raise DomainError("rw influence needs an identity-kind W; use rw_influence_exp or approximate_identity")
    A = w.term_weights(votes)  # N x S x C
    U = _test_direction(model, h_solver, holdout)
    z, f = _projections(model, X, U)
    # grad of -log f_c at x_i dotted with u: f_i . z_i - z_ic
    g = np.sum(f * z, axis=1, keepdims=True) - z  # N x C
    scores = -A * g[:, None, :]
    return InfluenceTensor(scores, "rw", holdout.name, h_solver.describe(), w.n_lfs, _active_mask(w, votes))


def rw_influence_exp(model, h_solver: InverseHessian, w: WTensor, votes, X, holdout: Holdout) -> InfluenceTensor:
    """Reweighting influence for exponential-kind W.

    Each score is ``-grad L^T H^{-1} grad(-y_c log f_c(x_i)) * W[j, L_ij, c]``.
    """
    if w.sigma != EXPONENTIAL:
        raise DomainError("rw_influence_exp needs an exponential-kind W; use rw_influence")
    sel = w.selected(votes)  # N x M x C
    probs = infer_labels(w, votes)
    U = _test_direction(model, h_solver, holdout)
    z, f = _projections(model, X, U)
    g = np.sum(f * z, axis=1, keepdims=True) - z
    scores = -sel * (probs * g)[:, None, :]
    return InfluenceTensor(scores, "rw_exp", holdout.name, h_solver.describe(), w.n_lfs, sel != 0)


def _source_scores(w: WTensor, votes):
    """Pre-sigma scores N x C and the masked entries N x S x C."""
    sel = w.selected(votes)
    if w.is_identity and w.has_prior:
        sel = np.concatenate([sel, np.broadcast_to(w.class_prior, (sel.shape[0], 1, w.n_classes))], axis=1)
    return w.scores(votes), sel


def _normalize(scores_masked, sigma, n_classes):
    """Apply sigma and normalize along the last axis; identity rows with zero mass -> uniform."""
    if sigma == EXPONENTIAL:
        return softmax(scores_masked, axis=-1), np.zeros(scores_masked.shape[:-1], dtype=bool)
    tot = scores_masked.sum(axis=-1, keepdims=True)
    bad = tot[..., 0] <= 0
    safe = np.where(tot > 0, tot, 1.0)
    out = np.where(bad[..., None], 1.0 / n_classes, scores_masked / safe)
    return out, bad


def labels_without_all(w: WTensor, votes) -> Tuple[np.ndarray, np.ndarray]:
    """Every relabelled ``y_{-jc}``: array N x S x C(masked class) x C, plus degenerate flags."""
    s, sel = _source_scores(w, votes)
    n, S, C = sel.shape
    masked = np.broadcast_to(s[:, None, None, :], (n, S, C, C)).copy()
    ci = np.arange(C)
    masked[:, :, ci, ci] -= sel
    return _normalize(masked, w.sigma, C)


def label_without(w: WTensor, votes, i: int, j: int, c: int) -> np.ndarray:
    """Label of point ``i`` with the single parameter occurrence ``W[j, L_ij, c]`` removed.

    The entry is dropped from the class-c score (numerator of class c and its
    summand in the denominator) before sigma and renormalization. ``j == M``
    addresses the identity prior pseudo-LF.
    """
    v = np.asarray(votes.votes if isinstance(votes, LabelMatrix) else votes)
    row = v[i : i + 1]
    s, sel = _source_scores(w, row)
    masked = s[0].copy()
    masked[c] -= sel[0, j, c]
    out, _ = _normalize(masked[None, :], w.sigma, w.n_classes)
    return out[0]


def wm_influence(model, h_solver: InverseHessian, w: WTensor, votes, X, holdout: Holdout, Y=None) -> InfluenceTensor:
    """Weight-moving influence: move point i's loss weight onto its relabelled ``y_{-jc}``.

    ``Y`` are the training labels the model was fitted on (defaults to
    ``w.label_weights(votes)``).
    """
    Y = w.label_weights(votes) if Y is None else np.asarray(Y, dtype=np.float64)
    without, _ = labels_without_all(w, votes)
    active = _active_mask(w, votes)
    # masking a zero entry changes nothing, including on degenerate rows
    delta = np.where(active[..., None], Y[:, None, None, :] - without, 0.0)  # N x S x C x C
    U = _test_direction(model, h_solver, holdout)
    z, f = _projections(model, X, U)
    # grad loss(delta) . u = sum_c (f_c * sum(delta) - delta_c) z_c
    sdelta = delta.sum(axis=-1, keepdims=True)
    dots = np.sum((f[:, None, None, :] * sdelta - delta) * z[:, None, None, :], axis=-1)
    scores = -dots
    return InfluenceTensor(scores, "wm", holdout.name, h_solver.describe(), w.n_lfs, active)


# ---------------------------------------------------------------------------
# Self-influence and RelatIF


def _per_point_blocks(model, h_solver: InverseHessian, X) -> np.ndarray:
    """``B_i = (I_C (x) x~_i)^T H^{-1} (I_C (x) x~_i)``, N x C x C."""
    Hinv = h_solver.dense_inverse()
    C, da = model.theta.shape
    Hr = Hinv.reshape(C, da, C, da)
    Xa = augment(X)
    return np.einsum("ia,cadb,ib->icd", Xa, Hr, Xa, optimize=True)


def self_influence_tensor(model, h_solver: InverseHessian, w: WTensor, votes, X) -> InfluenceTensor:
    """``grad l_ijc^T H^{-1} grad l_ijc`` for every term, stored non-negative."""
    A = w.term_weights(votes)
    B = _per_point_blocks(model, h_solver, X)
    f = model.predict_proba(np.asarray(X))
    f = np.atleast_2d(f)
    C = f.shape[1]
    R = f[:, None, :] - np.eye(C)[None, :, :]  # N x C(term class) x C
    quad = np.einsum("ice,ief,icf->ic", R, B, R)
    scores = np.maximum(A**2 * quad[:, None, :], 0.0)
    return InfluenceTensor(scores, "rw", "self", h_solver.describe(), w.n_lfs, _active_mask(w, votes))


def self_influence(model, h_solver: InverseHessian, w: WTensor, votes, X, i: int, j: int, c: int) -> float:
    A = w.term_weights(votes)[i, j, c]
    if A == 0:
        return 0.0
    x = np.asarray(X)[i]
    f = model.predict_proba(x)
    g = A * (np.outer(f - np.eye(len(f))[c], augment(x)[0])).ravel()
    return float(max(g @ h_solver.solve(g), 0.0))


def data_self_influence(model, h_solver: InverseHessian, X, Y) -> np.ndarray:
    """Self-influence of each training point's full noise-aware loss."""
    B = _per_point_blocks(model, h_solver, X)
    f = np.atleast_2d(model.predict_proba(np.asarray(X)))
    Y = np.asarray(Y, dtype=np.float64)
    r = f * Y.sum(axis=1, keepdims=True) - Y
    return np.maximum(np.einsum("ic,icd,id->i", r, B, r), 0.0)


def relatif(influence, selfinf, eps: float = 1e-12):
    """``influence / sqrt(self + eps)``; entries with zero self-influence map to 0.

    Accepts InfluenceTensor pairs or plain arrays (data-level RelatIF).
    """
    if isinstance(influence, InfluenceTensor):
        if influence.shape != selfinf.shape:
            raise ShapeError("influence and self-influence tensors differ in shape")
        vals = _relatif_array(influence.scores, selfinf.scores, eps)
        method = {"rw": "relatif_rw", "wm": "relatif_wm"}.get(influence.method)
        if method is None:
            raise DomainError(f"RelatIF is defined for rw and wm tensors, not {influence.method!r}")
        return influence.with_scores(vals, method)
    return _relatif_array(np.asarray(influence, dtype=np.float64), np.asarray(selfinf, dtype=np.float64), eps)


def _relatif_array(phi, self_, eps):
    if np.any(self_ < 0):
        raise DomainError("self-influence must be non-negative")
    out = np.zeros_like(phi)
    nz = self_ > 0
    out[nz] = phi[nz] / np.sqrt(self_[nz] + eps)
    return out


# ---------------------------------------------------------------------------
# Aggregation over PWS components


def aggregate_influence(t: InfluenceTensor, level: str, votes=None) -> np.ndarray:
    """Sum the term scores up to one pipeline component.

    data -> N (all sources incl. prior slab); lf -> S (trailing prior slab if present);
    vote -> N x M; parameter -> M x (C+1) x C (needs votes).
    """
    s = t.scores
    if level == "data":
        return s.sum(axis=(1, 2))
    if level == "lf":
        return s.sum(axis=(0, 2))
    if level == "vote":
        return t.lf_scores.sum(axis=2)
    if level == "parameter":
        if votes is None:
            raise DomainError("parameter-level aggregation requires the label matrix")
        v = votes.votes if isinstance(votes, LabelMatrix) else np.asarray(votes)
        rows = vote_rows(v)
        m = t.n_lfs
        C = s.shape[2]
        out = np.zeros((m, C + 1, C))
        for j in range(m):
            np.add.at(out[j], rows[:, j], t.lf_scores[:, j, :])
        return out
    raise DomainError(f"unknown aggregation level {level!r}; choose from {LEVELS}")


def compute_influence(
    method: str,
    model: EndModel,
    w: WTensor,
    votes,
    X,
    holdout: Holdout,
    damping: float = 1e-3,
    solver: Optional[IhvpSolverConfig] = None,
    Y=None,
) -> InfluenceTensor:
    """Convenience dispatcher used by the CLI and the applications."""
    Y = w.label_weights(votes) if Y is None else Y
    h = InverseHessian(model, X, Y, damping, solver)
    if method == "rw":
        return rw_influence(model, h, w, votes, X, holdout)
    if method == "rw_exp":
        return rw_influence_exp(model, h, w, votes, X, holdout)
    if method == "wm":
        return wm_influence(model, h, w, votes, X, holdout, Y)
    if method in ("relatif_rw", "relatif_wm"):
        base = rw_influence(model, h, w, votes, X, holdout) if method == "relatif_rw" else wm_influence(
            model, h, w, votes, X, holdout, Y
        )
        return relatif(base, self_influence_tensor(model, InverseHessian(model, X, Y, damping), w, votes, X))
    raise DomainError(f"unknown tensor method {method!r}")
