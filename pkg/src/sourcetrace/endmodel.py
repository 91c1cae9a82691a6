"""Multinomial logistic regression trained with the noise-aware (soft-label) loss.

Parameters are a ``C x (d+1)`` grid ``theta`` whose last column is the bias; the
flattened vector is row-major, so ``P = C * (d+1)``. Label "weights" may be any
non-negative (or, for weight-moving differences, signed) vectors: they need not
sum to one.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.special import log_softmax, softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import check_features
from .exceptions import DomainError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

DENSE_LIMIT = 4096


def augment(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _check_theta(theta, d):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 2 or theta.shape[1] != d + 1:
        raise ShapeError(f"theta has shape {theta.shape}; features have dimension {d}")
    return theta


def logits(theta, X) -> np.ndarray:
    Xa = augment(X)
    return Xa @ _check_theta(theta, Xa.shape[1] - 1).T


def predict_proba(theta, X) -> np.ndarray:
    """Softmax class probabilities; a 1-d ``X`` yields a single C-vector."""
    p = softmax(logits(theta, X), axis=1)
    return p[0] if np.ndim(X) == 1 else p


def noise_aware_loss(theta, X, Y) -> np.ndarray:
    """Per-point weighted cross-entropy ``sum_c Y_c * -log f(x)_c`` (no l2 term)."""
    single = np.ndim(X) == 1
    logp = log_softmax(logits(theta, X), axis=1)
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    out = -np.sum(Y * logp, axis=1)
    return out[0] if single else out


def loss_gradient(theta, X, Y) -> np.ndarray:
    """Per-point gradient of :func:`noise_aware_loss` w.r.t. flattened theta (N x P)."""
    single = np.ndim(X) == 1
    Xa = augment(X)
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    p = softmax(Xa @ _check_theta(theta, Xa.shape[1] - 1).T, axis=1)
    resid = p * Y.sum(axis=1, keepdims=True) - Y
    g = (resid[:, :, None] * Xa[:, None, :]).reshape(Xa.shape[0], -1)
    return g[0] if single else g


def per_term_losses(theta, w, votes, X) -> np.ndarray:
    """Decomposed loss terms ``A[i, j, c] * -log f(x_i)_c`` as an N x S x C array.

    ``A`` are the term weights of an identity-kind W (see ``WTensor.term_weights``);
    summing over (j, c) gives the per-point noise-aware loss.
    """
    A = w.term_weights(votes)
    logp = log_softmax(logits(theta, X), axis=1)
    if logp.shape[0] != A.shape[0]:
        raise ShapeError(f"{logp.shape[0]} feature rows for {A.shape[0]} vote rows")
    return -A * logp[:, None, :]


def per_term_loss(theta, w, votes, X, i: int, j: int, c: int) -> float:
    return float(per_term_losses(theta, w, votes, X)[i, j, c])


def weight_penalty_mask(n_classes, d) -> np.ndarray:
    """1 on weight coordinates, 0 on bias coordinates (flattened)."""
    mask = np.ones((n_classes, d + 1))
    mask[:, -1] = 0.0
    return mask.ravel()


def objective(theta, X, Y, l2: float) -> float:
    theta = np.asarray(theta, dtype=np.float64)
    return float(np.mean(noise_aware_loss(theta, X, Y)) + 0.5 * l2 * np.sum(theta[:, :-1] ** 2))


def objective_gradient(theta, X, Y, l2: float) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    Xa = augment(X)
    Y = np.asarray(Y, dtype=np.float64)
    p = softmax(Xa @ theta.T, axis=1)
    resid = p * Y.sum(axis=1, keepdims=True) - Y
    g = resid.T @ Xa / Xa.shape[0]
    g[:, :-1] += l2 * theta[:, :-1]
    return g


def data_hessian(theta, X, Y) -> np.ndarray:
    """Mean Hessian of the noise-aware loss (P x P), no regularization."""
    Xa = augment(X)
    theta = _check_theta(theta, Xa.shape[1] - 1)
    Y = np.asarray(Y, dtype=np.float64)
    n, da = Xa.shape
    c = theta.shape[0]
    p = softmax(Xa @ theta.T, axis=1)
    s = Y.sum(axis=1)
    # curvature per point: s_i * (diag(p_i) - p_i p_i^T)
    A = s[:, None, None] * (np.einsum("ic,cd->icd", p, np.eye(c)) - p[:, :, None] * p[:, None, :])
    H = np.einsum("icd,ia,ib->cadb", A, Xa, Xa, optimize=True) / n
    return H.reshape(c * da, c * da)


@dataclass(frozen=True, eq=False)
class HessianOperator:
    """Damped objective Hessian at a trained model."""

    matrix: np.ndarray
    damping: float

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def __matmul__(self, v):
        return self.matrix @ v


def hessian(theta, X, Y, l2: float = 0.0, damping: float = 1e-3, max_dim: int = DENSE_LIMIT) -> HessianOperator:
    """``(1/N) sum_i Hess(loss_i) + (l2 + damping) I`` on weights, ``damping I`` on biases."""
    if not damping > 0:
        raise DomainError("damping must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    P = theta.size
    if P > max_dim:
        raise DomainError(
            f"dense Hessian of size {P} exceeds the limit {max_dim}; use the LiSSA solver instead"
        )
    H = data_hessian(theta, X, Y)
    mask = weight_penalty_mask(theta.shape[0], theta.shape[1] - 1)
    H[np.diag_indices(P)] += l2 * mask + damping
    H = 0.5 * (H + H.T)
    return HessianOperator(H, damping)


def hvp(theta, X, Y, v, l2: float = 0.0, damping: float = 0.0) -> np.ndarray:
    """Hessian-vector product of the damped objective without forming the Hessian."""
    Xa = augment(X)
    theta = np.asarray(theta, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    V = np.asarray(v, dtype=np.float64).reshape(theta.shape)
    p = softmax(Xa @ theta.T, axis=1)
    s = Y.sum(axis=1)
    z = Xa @ V.T
    r = s[:, None] * (p * z - p * np.sum(p * z, axis=1, keepdims=True))
    out = r.T @ Xa / Xa.shape[0]
    out[:, :-1] += l2 * V[:, :-1]
    out += damping * V
    return out.ravel()


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    """Full-batch training settings.

    ``solver="gd"`` runs plain gradient descent for exactly ``epochs`` steps.
    ``solver="newton"`` minimizes the same objective to ``tol`` gradient norm and is
    what retraining oracles use to reach the exact minimizer.
    """

    lr: float = 0.001
    epochs: int = 10000
    l2: float = 1e-4
    solver: str = "gd"
    tol: float = 1e-6
    seed: int = 0
    max_newton_iter: int = 100

    def validate(self):
        if self.solver not in ("gd", "newton"):
            raise DomainError(f"unknown solver {self.solver!r}")
        if not self.lr > 0 or self.epochs < 0 or self.l2 < 0:
            raise DomainError("lr must be positive, epochs and l2 non-negative")


@dataclass(frozen=True, eq=False)
class EndModel:
    theta: np.ndarray
    l2: float
    metadata: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return self.theta.shape[0]

    @property
    def n_features(self) -> int:
        return self.theta.shape[1] - 1

    @property
    def n_params(self) -> int:
        return self.theta.size

    def predict_proba(self, X):
        return predict_proba(self.theta, X)

    def predict(self, X):
        # argmax picks the lowest index on ties
        return np.argmax(np.atleast_2d(self.predict_proba(X)), axis=1) + 1

    def objective(self, X, Y) -> float:
        return objective(self.theta, X, Y, self.l2)


def _gd(theta, X, Y, cfg: TrainConfig):
    history = np.empty(cfg.epochs + 1)
    history[0] = objective(theta, X, Y, cfg.l2)
    for t in range(cfg.epochs):
        theta = theta - cfg.lr * objective_gradient(theta, X, Y, cfg.l2)
        f = objective(theta, X, Y, cfg.l2)
        if not np.isfinite(f):
            raise NumericalError(f"non-finite training loss at epoch {t + 1} (lr={cfg.lr})")
        history[t + 1] = f
    return theta, history, cfg.epochs


def _newton(theta, X, Y, cfg: TrainConfig):
    history = [objective(theta, X, Y, cfg.l2)]
    P = theta.size
    mask = weight_penalty_mask(theta.shape[0], theta.shape[1] - 1)
    n_iter = 0
    for n_iter in range(1, cfg.max_newton_iter + 1):
        g = objective_gradient(theta, X, Y, cfg.l2).ravel()
        if np.linalg.norm(g) <= cfg.tol:
            n_iter -= 1
            break
        H = data_hessian(theta, X, Y)
        H[np.diag_indices(P)] += cfg.l2 * mask + 1e-12
        step = np.linalg.solve(H, g).reshape(theta.shape)
        f0 = history[-1]
        t = 1.0
        while True:
            cand = theta - t * step
            f = objective(cand, X, Y, cfg.l2)
            if f <= f0 - 1e-4 * t * float(g @ step.ravel()) or t < 1e-10:
                break
            t *= 0.5
        if not np.isfinite(f):
            raise NumericalError("non-finite loss during Newton refinement")
        theta = cand
        history.append(f)
    return theta, np.array(history), n_iter


def train_end_model(X, Y, cfg: Optional[TrainConfig] = None, theta0=None) -> EndModel:
    """Minimize mean noise-aware loss + (l2/2)||weights||^2, starting from zero."""
    cfg = cfg or TrainConfig()
    cfg.validate()
    X = check_features(X)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] != X.shape[0]:
        raise ShapeError(f"label grid has shape {Y.shape}; expected ({X.shape[0]}, C)")
    c = Y.shape[1]
    theta = np.zeros((c, X.shape[1] + 1)) if theta0 is None else np.array(theta0, dtype=np.float64)
    if cfg.solver == "gd":
        theta, history, n_iter = _gd(theta, X, Y, cfg)
    else:
        theta, history, n_iter = _newton(theta, X, Y, cfg)
    gnorm = float(np.linalg.norm(objective_gradient(theta, X, Y, cfg.l2)))
    meta = {
        "solver": cfg.solver,
        "iterations": int(n_iter),
        "learning_rate": cfg.lr,
        "seed": cfg.seed,
        "final_objective": float(history[-1]),
        "final_gradient_norm": gnorm,
        "tol": cfg.tol,
        "converged": gnorm <= cfg.tol,
        "objective_history": history,
    }
    return EndModel(theta, cfg.l2, meta)


def one_hot(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    out = np.zeros((y.shape[0], n_classes))
    out[np.arange(y.shape[0]), y - 1] = 1.0
    return out


def holdout_loss(model: EndModel, X, y) -> float:
    """Mean cross-entropy on a gold-labelled set (classes 1..C)."""
    return float(np.mean(noise_aware_loss(model.theta, X, one_hot(y, model.n_classes))))


class NoiseAwareLogisticRegression(ClassifierMixin, BaseEstimator):
    """sklearn-style wrapper: ``fit(X, Y)`` with Y an N x C label-weight grid or 1..C labels."""

    def __init__(self, lr=0.001, epochs=10000, l2=1e-4, solver="gd", tol=1e-6, seed=0):
        self.lr = lr
        self.epochs = epochs
        self.l2 = l2
        self.solver = solver
        self.tol = tol
        self.seed = seed

    def _config(self):
        return TrainConfig(lr=self.lr, epochs=self.epochs, l2=self.l2, solver=self.solver, tol=self.tol, seed=self.seed)

    def fit(self, X, Y, n_classes=None):
        Y = np.asarray(Y)
        if Y.ndim == 1:
            Y = one_hot(Y, n_classes or int(Y.max()))
        self.model_ = train_end_model(X, Y, self._config())
        self.classes_ = np.arange(1, Y.shape[1] + 1)
        self.coef_ = self.model_.theta[:, :-1]
        self.intercept_ = self.model_.theta[:, -1]
        self.n_iter_ = self.model_.metadata["iterations"]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return np.atleast_2d(self.model_.predict_proba(check_features(X)))

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def config_dict(self):
        return asdict(self._config())
