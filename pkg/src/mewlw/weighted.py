"""Weighted WLW estimating equations under outcome misclassification.

Every questionnaire time is a potential event time.  A subject's
contribution at time t carries the event-time probability weight w(t)
from the measurement-error model, and the risk-set sums replace the
at-risk indicator with the at-risk probability Y~(t):

    S~0(t) = sum_j Y~_j(t) exp(beta' Z_j(t))
    S~1(t) = sum_j Y~_j(t) Z_j(t) exp(beta' Z_j(t))

The Breslow-style score sums w_i(t) [Z_i(t) - S~1/S~0] over subjects and
observed grid times.  The Efron variant treats the potential events at a
grid time as ties: with d(t) the number of at-risk subjects carrying
positive event probability at t, the per-subject term averages the
bracket over r = 1..d(t) with each subject's risk contribution scaled by
1 - (r-1)/d(t) * h_i(t).  With hazard probabilities in {0, 1} both
variants collapse to the classical partial-likelihood score.

For fixed weights the score is the gradient of a concave objective, so a
damped Newton iteration started at zero is globally convergent.
"""

from __future__ import annotations

import warnings

import numpy as np

from ._newton import newton_solve
from .exceptions import ConvergenceError, DataError, DegenerateProblemError
from .results import FitResult
from .weights import WeightTable


def _risk_quantities(beta, ew, Z):
    eta = Z @ beta                      # (n, T)
    e = np.exp(eta)
    r = ew.y_tilde * e                  # at-risk probability times hazard ratio
    S0 = r.sum(axis=0)                  # (T,)
    S1 = np.einsum("nt,ntp->tp", r, Z)
    wbar = ew.weight.sum(axis=0)
    valid = S0 > 0
    return eta, e, r, S0, S1, wbar, valid


def _tie_counts(ew):
    return ((ew.observed) & (ew.h > 0)).sum(axis=0)


def _accumulate(beta, ew, Z, ties, need_hessian):
    """Weighted log-partial-likelihood value, score, and negated Hessian.

    All three are normalized by the number of subjects.  Grid times where
    every at-risk probability vanishes contribute nothing.
    """
    n, T, p = Z.shape
    eta, e, r, S0, S1, wbar, valid = _risk_quantities(beta, ew, Z)
    score = np.einsum("nt,ntp->p", ew.weight, Z)
    loglik = float((ew.weight * eta).sum())
    neg_hess = np.zeros((p, p)) if need_hessian else None

    if ties == "breslow":
        v = valid
        zbar = S1[v] / S0[v, None]
        loglik -= float(wbar[v] @ np.log(S0[v]))
        score -= wbar[v] @ zbar
        if need_hessian:
            S2 = np.einsum("nt,ntp,ntq->tpq", r, Z, Z)
            V = S2[v] / S0[v, None, None] - np.einsum("tp,tq->tpq", zbar, zbar)
            neg_hess = np.einsum("t,tpq->pq", wbar[v], V)
    elif ties == "efron":
        d = _tie_counts(ew)
        rh = r * ew.h
        H0 = rh.sum(axis=0)
        H1 = np.einsum("nt,ntp->tp", rh, Z)
        if need_hessian:
            S2 = np.einsum("nt,ntp,ntq->tpq", r, Z, Z)
            H2 = np.einsum("nt,ntp,ntq->tpq", rh, Z, Z)
        for t in np.nonzero(valid & (wbar > 0))[0]:
            dt = int(d[t])
            frac = np.arange(dt) / dt if dt > 0 else np.zeros(1)
            S0r = S0[t] - frac * H0[t]
            S1r = S1[t][None, :] - frac[:, None] * H1[t][None, :]
            zbar_r = S1r / S0r[:, None]
            loglik -= float(wbar[t] * np.mean(np.log(S0r)))
            score -= wbar[t] * zbar_r.mean(axis=0)
            if need_hessian:
                a = float(np.mean(1.0 / S0r))
                a2 = float(np.mean(frac / S0r))
                V = S2[t] * a - H2[t] * a2
                V -= np.einsum("rp,rq->pq", zbar_r, zbar_r) / len(S0r)
                neg_hess += wbar[t] * V
    else:
        raise DataError(f"ties must be 'breslow' or 'efron', got {ties!r}")

    if need_hessian:
        neg_hess = neg_hess / n
    return loglik / n, score / n, neg_hess


def weighted_score_breslow(beta, event_weights, Z):
    """Breslow-ties weighted score, normalized by the subject count."""
    _, score, _ = _accumulate(np.asarray(beta, float), event_weights,
                              np.asarray(Z, float), "breslow", False)
    return score


def weighted_score_efron(beta, event_weights, Z):
    """Efron-ties weighted score, normalized by the subject count."""
    _, score, _ = _accumulate(np.asarray(beta, float), event_weights,
                              np.asarray(Z, float), "efron", False)
    return score


def score_jacobian(beta, event_weights, Z, ties="breslow"):
    """Analytic Jacobian of the weighted score in beta (negative semidefinite)."""
    _, _, neg_hess = _accumulate(np.asarray(beta, float), event_weights,
                                 np.asarray(Z, float), ties, True)
    return -neg_hess


def solve_event(event_weights, Z, ties="breslow", init=None):
    """Solve the weighted score equations for a single event type."""
    Z = np.asarray(Z, float)
    if event_weights.weight.sum() == 0:
        raise DegenerateProblemError(
            "all event-time weights are zero; the score is identically zero"
        )

    def objective(beta):
        return _accumulate(beta, event_weights, Z, ties, True)

    p = Z.shape[2]
    beta0 = np.zeros(p) if init is None else np.asarray(init, float)
    beta, info = newton_solve(objective, beta0)
    _, _, neg_hess = objective(beta)
    eigs = np.linalg.eigvalsh(neg_hess)
    if eigs.min() <= 0:
        warnings.warn("weighted score Jacobian is singular at the solution")
    return beta, info


def solve_weighted(data, weight_table, ties="breslow", init=None):
    """Point estimates of the weighted WLW model for every event type.

    Parameters
    ----------
    data : StudyDataset or mapping of event type -> EventArrays
        Supplies the regression covariates Z.
    weight_table : WeightTable
        Weights from :func:`mewlw.weights.build_weight_table` (or the
        degenerate table for true outcomes).
    init : ndarray or None
        Optional warm start shared across events (stacked or per-event).

    Returns
    -------
    FitResult without a covariance; inference attaches it.
    """
    if not isinstance(weight_table, WeightTable):
        raise DataError("weight_table must be a WeightTable")
    from .cox import _event_arrays  # shared dataset/array adapter

    betas, diags = [], []
    for j, k in enumerate(weight_table.event_types):
        arrays = _event_arrays(data, k)
        init_k = None
        if init is not None:
            init_k = np.asarray(init, float)
            if init_k.ndim == 2:
                init_k = init_k[j]
        try:
            beta, info = solve_event(weight_table[k], arrays.covariates,
                                     ties=ties, init=init_k)
        except ConvergenceError as err:
            raise ConvergenceError(f"event {k}: {err}") from None
        betas.append(beta)
        diags.append(info)
    return FitResult(betas=betas, cov=None, diagnostics=diags, ties=ties,
                     method="weighted_wlw")
