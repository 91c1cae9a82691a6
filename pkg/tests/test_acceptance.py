"""Acceptance criteria on the standard synthetic fixtures.

Fixture: N=200/100/100, d=5, C=3, M=8, LF accuracies 0.95 x5, 0.7 x2, 0.34, coverage 0.85,
seeds 0-4. Each test records one PASS/FAIL line, printed in the terminal summary.
"""

import itertools
import math
import time

import numpy as np
import pytest

from sourcetrace.apps import (
    actual_lf_effects,
    discard_and_retrain,
    discrepancy_scores,
    mislabel_report,
    mislabel_scores,
    select_harmful_terms,
    sweep_alpha,
    sweep_alpha_points,
)
from sourcetrace.data import LabelMatrix, SyntheticSpec, generate_synthetic
from sourcetrace.endmodel import (
    TrainConfig,
    hessian,
    holdout_loss,
    noise_aware_loss,
    objective,
    objective_gradient,
    per_term_losses,
    train_end_model,
)
from sourcetrace.influence import (
    Holdout,
    IhvpSolverConfig,
    InverseHessian,
    aggregate_influence,
    holdout_gradient,
    ihvp_lissa,
    label_without,
    labels_without_all,
    ordinary_influence,
    rw_influence,
    rw_influence_exp,
    wm_influence,
)
from sourcetrace.labelmodel import (
    EXPONENTIAL,
    approximate_identity,
    fit_dawid_skene,
    fit_label_model,
    fit_majority_vote,
    infer_labels,
    metal_moments,
)
from sourcetrace.metrics import spearman

from conftest import ACCEPTANCE_ACCURACIES, record_criterion

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

SEEDS = range(5)
GD = TrainConfig()  # lr 0.001, 10000 epochs, l2 1e-4
NEWTON = TrainConfig(solver="newton", tol=1e-10)


def fixture(seed, **kw):
    spec = dict(lf_accuracy=ACCEPTANCE_ACCURACIES, seed=seed)
    spec.update(kw)
    return generate_synthetic(SyntheticSpec(**spec))


@pytest.fixture(scope="module")
def bundles():
    return [fixture(s) for s in SEEDS]


@pytest.fixture(scope="module")
def label_models(bundles):
    """Identity-kind W tensors per seed: MV, and the identity approximations of DS and MeTaL."""
    out = []
    for b in bundles:
        L = b.train.L
        ds = fit_dawid_skene(L)
        metal = fit_label_model("metal", L)
        out.append({
            "mv": (fit_majority_vote(L), fit_majority_vote(L)),
            "ds": (ds, approximate_identity(ds, L)),
            "metal": (metal, approximate_identity(metal, L)),
        })
    return out


def report(number, ok, detail):
    record_criterion(number, ok, detail)
    assert ok, f"criterion {number}: {detail}"


def holdout_of(b):
    return Holdout(b.valid.X, b.valid.y, "valid")


# 1 -----------------------------------------------------------------------------


def test_c01_loss_decomposition(bundles, label_models):
    rng = np.random.default_rng(0)
    worst = 0.0
    start = time.perf_counter()
    for b, lms in zip(bundles, label_models):
        for name in ("mv", "ds", "metal"):
            w = lms[name][1]
            theta = rng.standard_normal((3, 6))
            terms = per_term_losses(theta, w, b.train.L, b.train.X)
            direct = noise_aware_loss(theta, b.train.X, w.label_weights(b.train.L))
            worst = max(worst, float(np.max(np.abs(terms.sum(axis=(1, 2)) - direct))))
    elapsed = time.perf_counter() - start
    report(1, worst <= 1e-10 and elapsed < 1.0, f"max |sum terms - loss| = {worst:.2e}, {elapsed:.2f}s")


# 2 -----------------------------------------------------------------------------


def test_c02_additivity(bundles):
    start = time.perf_counter()
    worst = 0.0
    for b in bundles:
        L, X = b.train.L, b.train.X
        w = fit_majority_vote(L)
        Y = w.label_weights(L)
        model = train_end_model(X, Y, NEWTON)
        h = InverseHessian(model, X, Y)
        t = rw_influence(model, h, w, L, X, holdout_of(b))
        phi = ordinary_influence(model, h, X, Y, holdout_of(b))
        rel = np.abs(aggregate_influence(t, "data") - phi) / np.maximum(np.abs(phi), 1e-300)
        worst = max(worst, float(np.max(np.where(phi == 0, 0.0, rel))))
    elapsed = time.perf_counter() - start
    report(2, worst <= 1e-8 and elapsed < 30, f"max relative gap = {worst:.2e}, {elapsed:.1f}s")


# 3 -----------------------------------------------------------------------------


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_c03_gradient_hessian(bundles):
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    worst_g = worst_h = 0.0
    for _ in range(100):
        c, d, n = int(rng.integers(2, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 20))
        theta = rng.standard_normal((c, d + 1))
        X = rng.standard_normal((n, d))
        Y = rng.dirichlet(np.ones(c), size=n) * rng.uniform(0.5, 1.5, size=(n, 1))
        l2 = float(rng.uniform(0, 0.1))
        flat = theta.ravel()
        g = objective_gradient(theta, X, Y, l2).ravel()
        fd = central_diff(lambda t: objective(t.reshape(theta.shape), X, Y, l2), flat)
        worst_g = max(worst_g, np.linalg.norm(fd - g) / np.linalg.norm(g))
        H = hessian(theta, X, Y, l2, damping=1e-12).matrix
        fdh = np.column_stack([
            central_diff(lambda t: objective_gradient(t.reshape(theta.shape), X, Y, l2).ravel()[k], flat)
            for k in range(flat.size)
        ])
        worst_h = max(worst_h, np.linalg.norm(fdh - H) / np.linalg.norm(H))
    elapsed = time.perf_counter() - start
    ok = worst_g <= 1e-5 and worst_h <= 1e-5 and elapsed < 60
    report(3, ok, f"gradient rel err {worst_g:.1e}, Hessian rel err {worst_h:.1e}, {elapsed:.1f}s")


# 4 -----------------------------------------------------------------------------

ORACLE = TrainConfig(l2=1e-3, solver="newton", tol=1e-12)
ORACLE_DAMPING = 1e-8
EPS = 1e-3
RESOLVABLE = 1e-6


def _slope(model, X, Y, holdout, bump):
    """Central difference of the retrained holdout loss for label perturbation ``Y + eps * bump(eps)``."""
    losses = []
    for eps in (EPS, -EPS):
        m = train_end_model(X, Y + bump(eps), ORACLE, theta0=model.theta)
        losses.append(holdout_loss(m, holdout.X, holdout.y))
    return (losses[0] - losses[1]) / (2 * EPS)


def test_c04_first_order_oracle(bundles, label_models):
    start = time.perf_counter()
    b = bundles[0]
    L, X, n = b.train.L, b.train.X, len(b.train.X)
    holdout = holdout_of(b)
    rng = np.random.default_rng(4)
    errors = {}

    skipped = {}

    def pick(active, size, key, k=50):
        # terms whose label perturbation is below the retraining tolerance have no measurable slope
        ok = active & (size >= RESOLVABLE)
        skipped[key] = int(active.sum() - ok.sum())
        idx = np.argwhere(ok)
        return idx[rng.choice(len(idx), size=k, replace=False)]

    for name in ("mv", "ds"):
        w = label_models[0][name][1]
        Y = w.label_weights(L)
        model = train_end_model(X, Y, ORACLE)
        h = InverseHessian(model, X, Y, ORACLE_DAMPING)
        A = w.term_weights(L)
        rw = rw_influence(model, h, w, L, X, holdout)
        wm = wm_influence(model, h, w, L, X, holdout)
        without, _ = labels_without_all(w, L)
        moved = np.abs(Y[:, None, None, :] - without).sum(axis=-1)
        errs = []
        for i, j, c in pick(rw.active, A, f"rw/{name}"):
            def bump(eps, i=i, j=j, c=c):
                out = np.zeros_like(Y)
                out[i, c] = n * eps * A[i, j, c]
                return out
            fd = _slope(model, X, Y, holdout, bump)
            errs.append(abs(rw.scores[i, j, c] - fd) / abs(fd))
        errors[f"rw/{name}"] = (max(errs), 0.10)
        errs = []
        for i, j, c in pick(wm.active, moved, f"wm/{name}"):
            delta = Y[i] - label_without(w, L, i, j, c)

            def bump(eps, i=i, delta=delta):
                out = np.zeros_like(Y)
                out[i] = n * eps * delta
                return out
            fd = _slope(model, X, Y, holdout, bump)
            errs.append(abs(wm.scores[i, j, c] - fd) / abs(fd))
        errors[f"wm/{name}"] = (max(errs), 0.15)

    w = label_models[0]["ds"][0]
    Y = w.label_weights(L)
    model = train_end_model(X, Y, ORACLE)
    h = InverseHessian(model, X, Y, ORACLE_DAMPING)
    sel = w.selected(L)
    t = rw_influence_exp(model, h, w, L, X, holdout)
    errs = []
    for i, j, c in pick(t.active, np.abs(sel * Y[:, None, :]), "rw_exp/ds"):
        def bump(eps, i=i, j=j, c=c):
            out = np.zeros_like(Y)
            out[i, c] = n * np.expm1(eps * sel[i, j, c]) * Y[i, c]
            return out
        fd = _slope(model, X, Y, holdout, bump)
        errs.append(abs(t.scores[i, j, c] - fd) / abs(fd))
    errors["rw_exp/ds"] = (max(errs), 0.15)

    elapsed = time.perf_counter() - start
    ok = all(e <= tol for e, tol in errors.values()) and elapsed < 600
    detail = ", ".join(
        f"{k} max {e:.2%} (tol {tol:.0%}, {skipped[k]} unresolvable terms skipped)" for k, (e, tol) in errors.items()
    )
    report(4, ok, f"{detail}, {elapsed:.0f}s")


# 5 and 6 -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def pruning(bundles):
    """Per seed on MV labels with the GD protocol: S-(0), the SIF sweep and the data-level IF sweep."""
    rows = []
    for b in bundles:
        L, X = b.train.L, b.train.X
        w = fit_majority_vote(L)
        Y = w.label_weights(L)
        model = train_end_model(X, Y, GD)
        h = InverseHessian(model, X, Y)
        holdout = holdout_of(b)
        t = rw_influence(model, h, w, L, X, holdout)
        s0 = discard_and_retrain(b, w, L, select_harmful_terms(t, 0.0), GD, model, 0.0)
        sif = sweep_alpha(b, w, L, t, None, GD)
        phi = ordinary_influence(model, h, X, Y, holdout)
        dif = sweep_alpha_points(b, w, L, phi, None, GD)
        rows.append((s0, sif, dif))
    return rows


def test_c05_theorem_one(pruning):
    val_ok = [s0.valid_loss_after <= s0.valid_loss_before + 0.01 for s0, _, _ in pruning]
    test_ok = [sif.test_loss_after <= sif.test_loss_before for _, sif, _ in pruning]
    detail = "; ".join(
        f"seed {k}: S-(0) valid {s0.valid_loss_after:.4f} vs ERM {s0.valid_loss_before:.4f}, "
        f"sweep test {sif.test_loss_after:.4f} vs ERM {sif.test_loss_before:.4f}"
        for k, (s0, sif, _) in enumerate(pruning)
    )
    report(5, all(val_ok) and sum(test_ok) >= 4, f"{sum(test_ok)}/5 test wins; {detail}")


def test_c06_sif_beats_data_if(pruning):
    wins = [sif.test_loss_after <= dif.test_loss_after for _, sif, dif in pruning]
    detail = "; ".join(
        f"seed {k}: SIF {sif.test_loss_after:.4f} vs IF {dif.test_loss_after:.4f}"
        for k, (_, sif, dif) in enumerate(pruning)
    )
    report(6, sum(wins) >= 4, f"{sum(wins)}/5 seeds; {detail}")


# 7 -----------------------------------------------------------------------------


def test_c07_mislabel_detection(bundles, label_models):
    lines, all_ok = [], True
    for name in ("mv", "ds", "metal"):
        wins = 0
        aps = []
        for b, lms in zip(bundles, label_models):
            L, X, gold = b.train.L, b.train.X, b.train.y
            original, w = lms[name]
            Y = w.label_weights(L)
            model = train_end_model(X, Y, GD)
            t = rw_influence(model, InverseHessian(model, X, Y), w, L, X, holdout_of(b))
            sif = mislabel_report(mislabel_scores(t, L), L, gold, "SIF").macro_ap
            lm = mislabel_report(discrepancy_scores(L, infer_labels(original, L)), L, gold, "LM").macro_ap
            em = mislabel_report(discrepancy_scores(L, model.predict_proba(X)), L, gold, "EM").macro_ap
            wins += sif > lm and sif > em
            aps.append(f"{sif:.2f}/{lm:.2f}/{em:.2f}")
        all_ok &= wins >= 4
        lines.append(f"{name}: {wins}/5 wins (SIF/LM/EM AP {', '.join(aps)})")
    report(7, all_ok, "; ".join(lines))


# 8 -----------------------------------------------------------------------------


def test_c08_correlation_studies(bundles, label_models):
    start = time.perf_counter()
    data_rhos, lf_rhos = [], []
    for b, lms in zip(bundles, label_models):
        L, X = b.train.L, b.train.X
        for name in ("mv", "ds"):
            w = lms[name][1]
            Y = w.label_weights(L)
            model = train_end_model(X, Y, NEWTON)
            h = InverseHessian(model, X, Y)
            t = rw_influence(model, h, w, L, X, holdout_of(b))
            phi = ordinary_influence(model, h, X, Y, holdout_of(b))
            data_rhos.append(spearman(aggregate_influence(t, "data"), phi).rho)
        w = lms["mv"][1]
        Y = w.label_weights(L)
        model = train_end_model(X, Y, NEWTON)
        t = rw_influence(model, InverseHessian(model, X, Y), w, L, X, holdout_of(b))
        effects = actual_lf_effects(b, w, L, NEWTON)
        # removing an LF moves the loss by about -score / N
        lf_rhos.append(spearman(aggregate_influence(t, "lf"), -effects).rho)
    elapsed = time.perf_counter() - start
    ok = min(data_rhos) >= 0.95 and min(lf_rhos) >= 0.6 and elapsed < 900
    report(
        8,
        ok,
        f"data-level rho min {min(data_rhos):.4f}; LF rho "
        + ", ".join(f"{r:.3f}" for r in lf_rhos)
        + f"; {elapsed:.1f}s",
    )


# 9 -----------------------------------------------------------------------------


def test_c09_approximation_fidelity(bundles, label_models):
    l1s, monotone = [], True
    for b, lms in zip(bundles, label_models):
        ds, approx = lms["ds"]
        L = b.train.L
        l1s.append(float(np.mean(np.abs(infer_labels(ds, L) - infer_labels(approx, L)).sum(axis=1))))
        hist = np.asarray(approx.metadata["objective_history"])
        monotone &= bool(np.all(np.diff(hist) <= 1e-12 * np.maximum(1.0, np.abs(hist[:-1]))))
    ok = max(l1s) < 0.05 and monotone
    report(9, ok, "mean row L1 " + ", ".join(f"{v:.4f}" for v in l1s) + f"; objective monotone: {monotone}")


# 10 ----------------------------------------------------------------------------


def test_c10_lissa_vs_exact(bundles):
    errs, rhos = [], []
    cfg = IhvpSolverConfig(kind="lissa", depth=5000, repeats=10, batch_size=16, seed=0)
    for b in bundles:
        L, X = b.train.L, b.train.X
        w = fit_majority_vote(L)
        Y = w.label_weights(L)
        model = train_end_model(X, Y, NEWTON)
        assert model.n_params <= 200
        g = holdout_gradient(model, holdout_of(b))
        exact_h = InverseHessian(model, X, Y)
        exact = exact_h.solve(g)
        approx = ihvp_lissa(model, X, Y, g, cfg, exact_h.damping)
        errs.append(np.linalg.norm(approx - exact) / np.linalg.norm(exact))

        class Fixed:  # replays the LiSSA solution inside the influence computation
            damping = exact_h.damping

            def solve(self, v):
                return approx

            def describe(self):
                return {"kind": "lissa"}

        t_exact = rw_influence(model, exact_h, w, L, X, holdout_of(b))
        t_lissa = rw_influence(model, Fixed(), w, L, X, holdout_of(b))
        act = t_exact.active
        rhos.append(spearman(t_exact.scores[act], t_lissa.scores[act]).rho)
    ok = max(errs) <= 0.05 and min(rhos) >= 0.99
    report(10, ok, "rel err " + ", ".join(f"{e:.3f}" for e in errs) + "; rho " + ", ".join(f"{r:.4f}" for r in rhos))


# 11 ----------------------------------------------------------------------------


def test_c11_rw_wm_connection():
    rhos = []
    for seed in SEEDS:
        b = generate_synthetic(SyntheticSpec(n_lfs=10, n_classes=5, seed=seed))
        L, X = b.train.L, b.train.X
        w = fit_majority_vote(L)
        Y = w.label_weights(L)
        model = train_end_model(X, Y, NEWTON)
        h = InverseHessian(model, X, Y)
        rw = rw_influence(model, h, w, L, X, holdout_of(b))
        wm = wm_influence(model, h, w, L, X, holdout_of(b))
        act = rw.active
        rhos.append(spearman(rw.scores[act], wm.scores[act]).rho)
    report(11, min(rhos) >= 0.8, "rho " + ", ".join(f"{r:.3f}" for r in rhos))


# 12 ----------------------------------------------------------------------------


def bayes_posterior(pi, prior, rows):
    """Direct product-form posterior p(y=c | votes) for one vote pattern (rows: 0=abstain)."""
    joint = []
    for c in range(len(prior)):
        p = prior[c]
        for j, r in enumerate(rows):
            p *= pi[j][c][r]
        joint.append(p)
    z = sum(joint)
    return [p / z for p in joint]


def test_c12_label_model_identities():
    rng = np.random.default_rng(12)
    # MV: vote fractions exactly
    votes = rng.integers(0, 4, size=(500, 6)) - 1
    votes[votes == 0] = 1
    L = LabelMatrix(np.where(rng.random((500, 6)) < 0.3, -1, votes), 3)
    counts = np.stack([(L.votes == c).sum(axis=1) for c in (1, 2, 3)], axis=1).astype(float)
    covered = counts.sum(axis=1) > 0
    mv = infer_labels(fit_majority_vote(L), L)
    mv_ok = bool(np.all(mv[covered] == counts[covered] / counts[covered].sum(axis=1, keepdims=True)))

    # DS: softmax form equals the direct Bayes posterior on every vote pattern
    ds_gap = 0.0
    for m, c in itertools.product((1, 2, 3), (2, 3)):
        sample = rng.integers(0, c + 1, size=(60, m))
        sample[sample == 0] = -1
        w = fit_dawid_skene(LabelMatrix(sample, c))
        pi = np.exp(np.transpose(w.weights, (0, 2, 1))).tolist()  # pi[j][c][row]
        for pattern in itertools.product(range(c + 1), repeat=m):
            v = np.array([[r if r > 0 else -1 for r in pattern]])
            got = infer_labels(w, LabelMatrix(v, c))[0]
            ds_gap = max(ds_gap, float(np.max(np.abs(got - bayes_posterior(pi, w.class_prior.tolist(), pattern)))))

    # MeTaL: joint moments against the analytic joint at N = 10000
    b = fixture(0, n_train=10000, n_valid=10, n_test=10)
    L, y = b.train.L, b.train.y
    acc, cov, C = np.array(ACCEPTANCE_ACCURACIES), 0.85, 3
    truth = np.zeros((len(acc), C, C + 1))
    for j, c, k in itertools.product(range(len(acc)), range(C), range(C + 1)):
        if k == 0:
            truth[j, c, k] = (1 - cov) / C
        elif k == c + 1:
            truth[j, c, k] = cov * acc[j] / C
        else:
            truth[j, c, k] = cov * (1 - acc[j]) / ((C - 1) * C)
    gold_post = np.eye(C)[y - 1]
    ds_post = infer_labels(fit_dawid_skene(L), L)
    metal_gap = max(float(np.max(np.abs(metal_moments(L, p)[0] - truth))) for p in (gold_post, ds_post))
    ok = mv_ok and ds_gap <= 1e-10 and metal_gap <= 0.02
    report(12, ok, f"MV exact: {mv_ok}; DS max gap {ds_gap:.1e}; MeTaL max moment gap {metal_gap:.4f}")
