"""Label models expressed as a unified ``M x (C+1) x C`` parameter tensor.

Every label model here produces probabilistic labels of the form

    y_c  =  sigma(sum_j W[j, L_ij, c] + prior_c) / sum_k sigma(sum_j W[j, L_ij, k] + prior_k)

with ``sigma`` either the identity (majority vote and its variants) or ``exp``
(Dawid-Skene, MeTaL). For ``exp`` the prior term is ``log p_c``; for the identity
it is an additive pseudo-LF that always votes.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp, softmax
from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_is_fitted

from .data import LabelMatrix, vote_rows
from .exceptions import DomainError, ShapeError

logger = logging.getLogger(__name__)

IDENTITY = "identity"
EXPONENTIAL = "exponential"
SMOOTHING = 1e-6
MIN_WEIGHT = 1e-9


@dataclass(frozen=True, eq=False)
class WTensor:
    weights: np.ndarray
    sigma: str
    class_prior: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 3 or w.shape[1] != w.shape[2] + 1:
            raise ShapeError(f"W must have shape M x (C+1) x C, got {w.shape}")
        if self.sigma not in (IDENTITY, EXPONENTIAL):
            raise DomainError(f"unknown sigma kind {self.sigma!r}")
        if not np.all(np.isfinite(w)):
            raise DomainError("W entries must be finite")
        if self.sigma == IDENTITY and np.any(w < 0):
            raise DomainError("identity-kind W entries must be non-negative")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        if self.class_prior is not None:
            p = np.array(self.class_prior, dtype=np.float64)
            if p.shape != (w.shape[2],):
                raise ShapeError(f"class_prior must have length C={w.shape[2]}")
            if self.sigma == EXPONENTIAL and (np.any(p <= 0) or abs(p.sum() - 1) > 1e-6):
                raise DomainError("exponential-kind class_prior must be a positive simplex vector")
            if self.sigma == IDENTITY and np.any(p < 0):
                raise DomainError("identity-kind prior weights must be non-negative")
            p.setflags(write=False)
            object.__setattr__(self, "class_prior", p)

    @property
    def n_lfs(self) -> int:
        return self.weights.shape[0]

    @property
    def n_classes(self) -> int:
        return self.weights.shape[2]

    @property
    def is_identity(self) -> bool:
        return self.sigma == IDENTITY

    @property
    def has_prior(self) -> bool:
        return self.class_prior is not None

    @property
    def n_sources(self) -> int:
        """LF count plus one for an absorbed identity prior pseudo-LF."""
        return self.n_lfs + int(self.is_identity and self.has_prior)

    def prior_term(self) -> np.ndarray:
        if self.class_prior is None:
            return np.zeros(self.n_classes)
        if self.sigma == EXPONENTIAL:
            return np.log(self.class_prior)
        return self.class_prior

    def selected(self, votes) -> np.ndarray:
        """``W[j, L_ij, :]`` for every (i, j): an N x M x C array."""
        rows = vote_rows(_votes(votes))
        self._check_votes(rows)
        return self.weights[np.arange(self.n_lfs)[None, :], rows, :]

    def scores(self, votes) -> np.ndarray:
        """Pre-sigma class scores, N x C."""
        return self.selected(votes).sum(axis=1) + self.prior_term()[None, :]

    def _check_votes(self, rows):
        if rows.shape[1] != self.n_lfs:
            raise ShapeError(f"votes have {rows.shape[1]} LFs, W has {self.n_lfs}")
        if rows.max(initial=0) > self.n_classes:
            raise ShapeError(f"votes exceed C={self.n_classes}")

    def term_weights(self, votes) -> np.ndarray:
        """Per-(i, j, c) loss-term weights of the decomposed noise-aware loss.

        Shape N x S x C where S = :attr:`n_sources`; the trailing slab (if any) holds
        the prior pseudo-LF. Rows with a zero denominator get all-zero weights.
        Identity kind only.
        """
        if not self.is_identity:
            raise DomainError("loss decomposition requires an identity-kind W; run approximate_identity first")
        sel = self.selected(votes)
        if self.has_prior:
            n = sel.shape[0]
            sel = np.concatenate([sel, np.broadcast_to(self.class_prior, (n, 1, self.n_classes))], axis=1)
        denom = sel.sum(axis=(1, 2))
        out = np.zeros_like(sel)
        ok = denom > 0
        out[ok] = sel[ok] / denom[ok, None, None]
        return out

    def label_weights(self, votes) -> np.ndarray:
        """Training label weights: probabilistic labels, zero rows where degenerate."""
        if self.is_identity:
            return self.term_weights(votes).sum(axis=1)
        return infer_labels(self, votes)

    def scaled(self, factor: float) -> "WTensor":
        if self.sigma == EXPONENTIAL:
            raise DomainError("scaling is only meaningful for identity-kind W")
        prior = None if self.class_prior is None else self.class_prior * factor
        return WTensor(self.weights * factor, self.sigma, prior, dict(self.metadata))

    def without_lfs(self, lfs) -> "WTensor":
        """Copy with the given LF slabs zeroed (identity) or flattened to no-ops (exponential)."""
        w = self.weights.copy()
        w[list(lfs)] = 0.0
        return WTensor(w, self.sigma, self.class_prior, dict(self.metadata))


def _votes(votes) -> np.ndarray:
    if isinstance(votes, LabelMatrix):
        return votes.votes
    return np.asarray(votes)


def degenerate_rows(w: WTensor, votes) -> np.ndarray:
    """Boolean mask of rows whose identity-sigma denominator is zero."""
    if not w.is_identity:
        return np.zeros(len(_votes(votes)), dtype=bool)
    return w.scores(votes).sum(axis=1) <= 0


def infer_labels(w: WTensor, votes) -> np.ndarray:
    """Probabilistic labels (N x C) generated by ``w`` from ``votes``.

    Identity rows with an all-zero numerator come back uniform; use
    :func:`degenerate_rows` to find them.
    """
    s = w.scores(votes)
    if w.sigma == EXPONENTIAL:
        return softmax(s, axis=1)
    total = s.sum(axis=1, keepdims=True)
    bad = total[:, 0] <= 0
    out = np.empty_like(s)
    out[~bad] = s[~bad] / total[~bad]
    out[bad] = 1.0 / w.n_classes
    # renormalize to machine precision
    out /= out.sum(axis=1, keepdims=True)
    return out


# ---------------------------------------------------------------------------
# Fitting


def fit_majority_vote(votes: LabelMatrix) -> WTensor:
    m, c = votes.n_lfs, votes.n_classes
    w = np.zeros((m, c + 1, c))
    w[:, np.arange(1, c + 1), np.arange(c)] = 1.0
    return WTensor(w, IDENTITY)


def _vote_onehot(votes: LabelMatrix) -> np.ndarray:
    rows = votes.rows
    onehot = np.zeros(rows.shape + (votes.n_classes + 1,))
    np.put_along_axis(onehot, rows[..., None], 1.0, axis=2)
    return onehot


def ds_m_step(votes: LabelMatrix, posteriors: np.ndarray, smoothing: float = SMOOTHING):
    """Confusion tensor ``pi[j, c, l]`` and prior ``p`` from posteriors over true classes.

    ``pi[j, c, l]`` is the (smoothed) fraction of points with true class c on which
    LF j emitted vote row l; abstain is the value at l=0.
    """
    post = np.asarray(posteriors, dtype=np.float64)
    if post.shape != (len(votes), votes.n_classes):
        raise ShapeError(f"posteriors must be N x C = {(len(votes), votes.n_classes)}, got {post.shape}")
    onehot = _vote_onehot(votes)
    counts = np.einsum("ic,ijl->jcl", post, onehot) + smoothing
    pi = counts / counts.sum(axis=2, keepdims=True)
    prior = post.sum(axis=0) + smoothing
    prior /= prior.sum()
    return pi, prior


def ds_posteriors(votes: LabelMatrix, pi: np.ndarray, prior: np.ndarray):
    """E-step: posteriors and marginal log-likelihood under (pi, prior)."""
    rows = votes.rows
    m = votes.n_lfs
    log_pi = np.log(pi)
    # log_pi[j, :, rows[i, j]] summed over j -> N x C
    contrib = log_pi[np.arange(m)[None, :], :, rows]  # N x M x C
    joint = contrib.sum(axis=1) + np.log(prior)[None, :]
    norm = logsumexp(joint, axis=1)
    return np.exp(joint - norm[:, None]), float(norm.sum())


def fit_dawid_skene(
    votes: LabelMatrix, max_iter: int = 100, tol: float = 1e-6, smoothing: float = SMOOTHING
) -> WTensor:
    """Dawid-Skene by EM, initialised from majority-vote posteriors."""
    if max_iter < 1 or not tol > 0:
        raise DomainError("max_iter must be >= 1 and tol > 0")
    post = infer_labels(fit_majority_vote(votes), votes)
    history = []
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        pi, prior = ds_m_step(votes, post, smoothing)
        new_post, ll = ds_posteriors(votes, pi, prior)
        history.append(ll)
        delta = np.max(np.abs(new_post - post))
        post = new_post
        if delta < tol:
            converged = True
            break
    pi, prior = ds_m_step(votes, post, smoothing)
    _, ll = ds_posteriors(votes, pi, prior)
    history.append(ll)
    hard = np.bincount(post.argmax(axis=1), minlength=votes.n_classes)
    single_class = int((hard > 0).sum()) <= 1
    if single_class:
        warnings.warn("Dawid-Skene posterior collapsed onto a single class", RuntimeWarning)
    w = np.transpose(np.log(pi), (0, 2, 1))  # W[j, l, c] = log pi[j, c, l]
    meta = {
        "model": "ds",
        "iterations": n_iter,
        "converged": converged,
        "log_likelihood": history,
        "degenerate_single_class": single_class,
    }
    return WTensor(w, EXPONENTIAL, prior, meta)


def fit_metal(votes: LabelMatrix, posteriors: np.ndarray, smoothing: float = SMOOTHING) -> WTensor:
    """MeTaL-style parameters from the joint moments ``mu[j, c, k] = p(y=c, lambda_j=k)``.

    The moments are estimated from posteriors over the true class rather than by
    matrix completion; ``W[j, k, c] = log(mu[j, c, k] / p_c)``.
    """
    post = np.asarray(posteriors, dtype=np.float64)
    if post.shape != (len(votes), votes.n_classes):
        raise ShapeError(f"posteriors must be N x C = {(len(votes), votes.n_classes)}, got {post.shape}")
    mu, prior = metal_moments(votes, post, smoothing)
    w = np.log(mu / prior[None, :, None])  # j, c, k
    meta = {"model": "metal", "mu": mu.tolist()}
    return WTensor(np.transpose(w, (0, 2, 1)), EXPONENTIAL, prior, meta)


def metal_moments(votes: LabelMatrix, posteriors: np.ndarray, smoothing: float = SMOOTHING):
    n = len(votes)
    c = votes.n_classes
    mu = np.einsum("ic,ijk->jck", posteriors, _vote_onehot(votes)) / n
    mu = (mu + smoothing) / (1.0 + smoothing * c * (c + 1))
    prior = (posteriors.sum(axis=0) / n + smoothing) / (1.0 + smoothing * c)
    return mu, prior


# ---------------------------------------------------------------------------
# Identity approximation of exponential label models


def _unique_patterns(rows: np.ndarray):
    patterns, inverse, counts = np.unique(rows, axis=0, return_inverse=True, return_counts=True)
    return patterns, inverse.reshape(-1), counts.astype(np.float64)


class _ApproxObjective:
    """Weighted squared error between target labels and identity-sigma labels."""

    def __init__(self, rows, target, counts, n_lfs, n_classes, with_prior):
        self.rows = rows
        self.target = target
        self.counts = counts
        self.m = n_lfs
        self.c = n_classes
        self.with_prior = with_prior
        self.lf_idx = np.arange(n_lfs)[None, :]

    def split(self, theta):
        w = theta[: self.m * (self.c + 1) * self.c].reshape(self.m, self.c + 1, self.c)
        b = theta[self.m * (self.c + 1) * self.c :] if self.with_prior else None
        return w, b

    def value_and_grad(self, theta, need_grad=True):
        w, b = self.split(theta)
        s = w[self.lf_idx, self.rows, :].sum(axis=1)
        if b is not None:
            s = s + b[None, :]
        tot = s.sum(axis=1, keepdims=True)
        ratio = s / tot
        r = self.target - ratio
        f = float(np.sum(self.counts[:, None] * r * r))
        if not need_grad:
            return f, None
        g_s = -2.0 * self.counts[:, None] * (r / tot - np.sum(r * s, axis=1, keepdims=True) / tot**2)
        gw = np.zeros_like(w)
        for j in range(self.m):
            np.add.at(gw[j], self.rows[:, j], g_s)
        parts = [gw.ravel()]
        if b is not None:
            parts.append(g_s.sum(axis=0))
        return f, np.concatenate(parts)


def approximate_identity(
    w: WTensor,
    votes,
    max_iter: int = 3000,
    step: float = 1.0,
    tol: float = 1e-12,
    absorb_prior: bool = True,
) -> WTensor:
    """Least-squares refit of an exponential-kind W as an identity-kind W.

    Projected gradient descent (projection onto entries >= 1e-9) with backtracking,
    so the objective never increases. Initialised at the per-(j, k) softmax of W;
    the prior, when present and ``absorb_prior`` is set, becomes an additive
    pseudo-LF initialised at ``p``.
    """
    if w.sigma != EXPONENTIAL:
        raise DomainError("approximate_identity expects an exponential-kind W")
    v = _votes(votes)
    target_full = infer_labels(w, v)
    patterns, inverse, counts = _unique_patterns(vote_rows(v))
    target = target_full[np.unique(inverse, return_index=True)[1]]
    with_prior = absorb_prior and w.has_prior
    obj = _ApproxObjective(patterns, target, counts, w.n_lfs, w.n_classes, with_prior)

    init_w = softmax(w.weights, axis=2)
    parts = [init_w.ravel()]
    if with_prior:
        parts.append(np.asarray(w.class_prior, dtype=np.float64).copy())
    theta = np.maximum(np.concatenate(parts), MIN_WEIGHT)

    f, g = obj.value_and_grad(theta)
    history = [f]
    eta = step
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        accepted = False
        while eta > 1e-16:
            cand = np.maximum(theta - eta * g, MIN_WEIGHT)
            f_new, _ = obj.value_and_grad(cand, need_grad=False)
            if f_new <= f:
                accepted = True
                break
            eta *= 0.5
        if not accepted:
            break
        decrease = f - f_new
        theta = cand
        f, g = obj.value_and_grad(theta)
        history.append(f)
        eta = min(eta * 1.5, 1e6)
        if decrease <= tol * max(f, 1e-300) or f == 0.0:
            break

    w_bar, b = obj.split(theta)
    # rescale so the largest entry is 1; the labels are scale-invariant
    scale = max(w_bar.max(), b.max() if b is not None else 0.0)
    meta = {
        "model": f"{w.metadata.get('model', 'exp')}-approx",
        "iterations": n_iter,
        "objective": f,
        "objective_history": history,
    }
    return WTensor(w_bar / scale, IDENTITY, None if b is None else b / scale, meta)


def approximation_objective(w_exp: WTensor, w_id: WTensor, votes) -> float:
    """Sum over points and classes of the squared label difference."""
    return float(np.sum((infer_labels(w_exp, votes) - infer_labels(w_id, votes)) ** 2))


# ---------------------------------------------------------------------------
# Estimator wrappers


def _as_label_matrix(L, n_classes) -> LabelMatrix:
    if isinstance(L, LabelMatrix):
        if n_classes is not None and n_classes != L.n_classes:
            raise DomainError(f"n_classes={n_classes} disagrees with label matrix C={L.n_classes}")
        return L
    if n_classes is None:
        arr = np.asarray(L)
        n_classes = int(max(arr.max(initial=1), 2))
    return LabelMatrix(np.asarray(L), n_classes)


class _LabelModel(BaseEstimator):
    def predict_proba(self, L):
        check_is_fitted(self, "W_")
        return infer_labels(self.W_, _as_label_matrix(L, self.W_.n_classes))

    def predict(self, L):
        return self.predict_proba(L).argmax(axis=1) + 1

    @property
    def classes_(self):
        check_is_fitted(self, "W_")
        return np.arange(1, self.W_.n_classes + 1)


class MajorityVote(_LabelModel):
    def __init__(self, n_classes=None):
        self.n_classes = n_classes

    def fit(self, L, y=None):
        self.W_ = fit_majority_vote(_as_label_matrix(L, self.n_classes))
        return self


class DawidSkene(_LabelModel):
    def __init__(self, n_classes=None, max_iter=100, tol=1e-6, smoothing=SMOOTHING):
        self.n_classes = n_classes
        self.max_iter = max_iter
        self.tol = tol
        self.smoothing = smoothing

    def fit(self, L, y=None):
        lm = _as_label_matrix(L, self.n_classes)
        self.W_ = fit_dawid_skene(lm, self.max_iter, self.tol, self.smoothing)
        self.n_iter_ = self.W_.metadata["iterations"]
        return self


class MeTaL(_LabelModel):
    """Posterior-moment MeTaL; posteriors default to a Dawid-Skene fit."""

    def __init__(self, n_classes=None, smoothing=SMOOTHING):
        self.n_classes = n_classes
        self.smoothing = smoothing

    def fit(self, L, y=None, posteriors=None):
        lm = _as_label_matrix(L, self.n_classes)
        if posteriors is None:
            posteriors = infer_labels(fit_dawid_skene(lm, smoothing=self.smoothing), lm)
        self.W_ = fit_metal(lm, posteriors, self.smoothing)
        return self


class IdentityApproximation(_LabelModel):
    """Fit ``label_model`` and refit its W as an identity-sigma tensor."""

    def __init__(self, label_model=None, max_iter=3000, step=1.0, tol=1e-12, absorb_prior=True):
        self.label_model = label_model
        self.max_iter = max_iter
        self.step = step
        self.tol = tol
        self.absorb_prior = absorb_prior

    def fit(self, L, y=None):
        base = clone(self.label_model) if self.label_model is not None else DawidSkene()
        lm = _as_label_matrix(L, getattr(base, "n_classes", None))
        base.fit(lm)
        self.base_ = base
        if base.W_.is_identity:
            self.W_ = base.W_
        else:
            self.W_ = approximate_identity(
                base.W_, lm, self.max_iter, self.step, self.tol, self.absorb_prior
            )
        return self


LABEL_MODELS = {"mv": MajorityVote, "ds": DawidSkene, "metal": MeTaL}


def fit_label_model(kind: str, votes: LabelMatrix, **kwargs) -> WTensor:
    try:
        cls = LABEL_MODELS[kind]
    except KeyError:
        raise DomainError(f"unknown label model {kind!r}; choose from {sorted(LABEL_MODELS)}") from None
    return cls(n_classes=votes.n_classes, **kwargs).fit(votes).W_
