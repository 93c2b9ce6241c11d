"""Classical marginal Cox (WLW) estimation on observed outcomes.

This is the standard estimator: event-specific Cox partial likelihoods
(Breslow or Efron tie handling) joined by the robust sandwich covariance
built from per-subject score residuals, so between-event dependence is
reflected in the off-diagonal blocks.  It is fitted to true outcomes on
validation data, to self-reported outcomes for the naive comparator, and
it serves as the oracle that the weighted estimator must reproduce under
degenerate weights.

The implementation is deliberately independent of the weighted machinery:
subjects are sorted by time and risk sets accumulate as suffix sums.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ._newton import newton_solve
from .data import EventArrays, StudyDataset
from .exceptions import ConvergenceError, DataError
from .results import FitResult


def _sorted_views(time, status, Z):
    order = np.argsort(time, kind="stable")
    t = np.asarray(time, float)[order]
    s = np.asarray(status, float)[order]
    z = np.asarray(Z, float)[order]
    return order, t, s, z


def _suffix_sums(e, z):
    # suffix[i] = sum over rows i..n-1 (risk set of anyone with X >= t_i)
    s0 = np.cumsum(e[::-1])[::-1]
    s1 = np.cumsum((z * e[:, None])[::-1], axis=0)[::-1]
    zz = z[:, :, None] * z[:, None, :] * e[:, None, None]
    s2 = np.cumsum(zz[::-1], axis=0)[::-1]
    return s0, s1, s2


def partial_likelihood(time, status, Z, beta, ties="breslow"):
    """Log partial likelihood, score, and observed information.

    Returns
    -------
    (loglik, score, information) with ``information`` positive
    semidefinite (the negated Hessian).
    """
    _check_ties(ties)
    _, t, s, z = _sorted_views(time, status, Z)
    p = z.shape[1]
    e = np.exp(z @ beta)
    s0, s1, s2 = _suffix_sums(e, z)

    loglik = 0.0
    score = np.zeros(p)
    info = np.zeros((p, p))
    event_times = np.unique(t[s == 1])
    for u in event_times:
        i0 = np.searchsorted(t, u, side="left")
        deaths = (t == u) & (s == 1)
        m = int(deaths.sum())
        S0, S1, S2 = s0[i0], s1[i0], s2[i0]
        loglik += float(np.sum(z[deaths] @ beta))
        score += z[deaths].sum(axis=0)
        if ties == "breslow":
            zbar = S1 / S0
            loglik -= m * np.log(S0)
            score -= m * zbar
            info += m * (S2 / S0 - np.outer(zbar, zbar))
        else:
            E0 = float(e[deaths].sum())
            E1 = (z[deaths] * e[deaths, None]).sum(axis=0)
            E2 = (z[deaths][:, :, None] * z[deaths][:, None, :]
                  * e[deaths, None, None]).sum(axis=0)
            frac = np.arange(m) / m
            S0r = S0 - frac * E0
            S1r = S1[None, :] - frac[:, None] * E1[None, :]
            S2r = S2[None, :, :] - frac[:, None, None] * E2[None, :, :]
            zbar_r = S1r / S0r[:, None]
            loglik -= float(np.sum(np.log(S0r)))
            score -= zbar_r.sum(axis=0)
            info += (S2r / S0r[:, None, None]).sum(axis=0)
            info -= np.einsum("rp,rq->pq", zbar_r, zbar_r)
    return loglik, score, info


def cox_fit(time, status, Z, ties="breslow", init=None):
    """Newton solve of the partial-likelihood score equations."""
    Z = np.asarray(Z, float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if np.sum(status) == 0:
        raise DataError("no observed failures")
    n = len(time)

    def objective(beta):
        ll, score, info = partial_likelihood(time, status, Z, beta, ties)
        return ll / n, score / n, info / n

    beta0 = np.zeros(Z.shape[1]) if init is None else np.asarray(init, float)
    beta, solve_info = newton_solve(objective, beta0)
    _, _, info = partial_likelihood(time, status, Z, beta, ties)
    return beta, info, solve_info


def score_residuals(time, status, Z, beta, ties="breslow"):
    """Per-subject score residuals at ``beta`` (rows sum to the score)."""
    _check_ties(ties)
    time = np.asarray(time, float)
    status = np.asarray(status, float)
    Z = np.asarray(Z, float)
    n, p = Z.shape
    e = np.exp(Z @ beta)
    phi = np.zeros((n, p))
    event_times = np.unique(time[status == 1])
    for u in event_times:
        at_risk = time >= u
        deaths = (time == u) & (status == 1)
        m = int(deaths.sum())
        S0 = float(e[at_risk].sum())
        S1 = (Z[at_risk] * e[at_risk, None]).sum(axis=0)
        if ties == "breslow":
            zbar = S1 / S0
            phi[deaths] += Z[deaths] - zbar
            phi[at_risk] -= (m * e[at_risk] / S0)[:, None] * (Z[at_risk] - zbar)
        else:
            E0 = float(e[deaths].sum())
            E1 = (Z[deaths] * e[deaths, None]).sum(axis=0)
            frac = np.arange(m) / m
            S0r = S0 - frac * E0
            zbar_r = (S1[None, :] - frac[:, None] * E1[None, :]) / S0r[:, None]
            phi[deaths] += Z[deaths] - zbar_r.mean(axis=0)
            a = float(np.mean(1.0 / S0r))
            b = (zbar_r / S0r[:, None]).mean(axis=0)
            a2 = float(np.mean(frac / S0r))
            b2 = (frac[:, None] * zbar_r / S0r[:, None]).mean(axis=0)
            comp = e[at_risk, None] * (Z[at_risk] * a - b[None, :])
            comp[deaths[at_risk]] -= (e[deaths, None]
                                      * (Z[deaths] * a2 - b2[None, :]))
            phi[at_risk] -= m * comp
    return phi


def _constant_covariates(arrays):
    Z = arrays.covariates
    first = np.argmax(arrays.present, axis=1)
    z0 = Z[np.arange(Z.shape[0]), first]
    diff = np.abs(Z - z0[:, None, :]) * arrays.present[:, :, None]
    if diff.max() > 1e-12:
        raise DataError(
            "the classical WLW path requires time-constant covariates; "
            "use the weighted estimator for time-varying Z"
        )
    return z0


def fit_wlw(data, outcome="true", ties="breslow"):
    """Standard WLW fit across all event types.

    Parameters
    ----------
    data : StudyDataset or mapping of event type -> EventArrays
    outcome : str
        ``"true"`` fits the gold-standard outcomes (requires true-status
        paths); ``"self_report"`` fits the naive model on self reports.
    ties : str
        ``"breslow"`` or ``"efron"``.

    Returns
    -------
    FitResult with the stacked robust (sandwich) covariance.
    """
    _check_ties(ties)
    event_types = _event_types(data)
    betas, infos, diags, residuals = [], [], [], []
    n_ref = None
    for k in event_types:
        arrays = _event_arrays(data, k)
        if n_ref is None:
            n_ref = arrays.n_subjects
        elif arrays.n_subjects != n_ref:
            raise DataError("subject sets differ across event types")
        if outcome == "true":
            time, status = arrays.first_event_time()
        elif outcome == "self_report":
            time, status = arrays.first_report_time()
        else:
            raise DataError(f"unknown outcome {outcome!r}")
        if status.sum() == 0:
            raise DataError(f"no observed failures for event type {k}")
        Z = _constant_covariates(arrays)
        try:
            beta, info, solve_info = cox_fit(time, status, Z, ties=ties)
        except ConvergenceError as err:
            raise ConvergenceError(f"event {k}: {err}") from None
        betas.append(beta)
        infos.append(info)
        diags.append(solve_info)
        residuals.append(score_residuals(time, status, Z, beta, ties=ties))

    dims = [b.shape[0] for b in betas]
    total = sum(dims)
    cov = np.zeros((total, total))
    offsets = np.concatenate([[0], np.cumsum(dims)]).astype(int)
    try:
        inv_infos = [np.linalg.inv(I) for I in infos]
    except np.linalg.LinAlgError:
        raise ConvergenceError("singular information in the WLW sandwich") from None
    for a in range(len(event_types)):
        for b in range(len(event_types)):
            Bab = residuals[a].T @ residuals[b]
            block = inv_infos[a] @ Bab @ inv_infos[b].T
            cov[offsets[a]:offsets[a + 1], offsets[b]:offsets[b + 1]] = block
    cov = 0.5 * (cov + cov.T)
    return FitResult(betas=betas, cov=cov, diagnostics=diags, ties=ties,
                     method="wlw_standard")


@dataclass
class CommonEffect:
    estimate: float
    variance: float
    weights: np.ndarray
    method: str


def common_effect(beta_firsts, Sigma, method="min_variance"):
    """Pool the per-event first coefficients into one common effect.

    ``method="min_variance"`` (the default) uses the minimum-variance
    combination c proportional to Sigma^{-1} e.  ``method="as_printed"``
    uses c = Sigma e / (e' Sigma e), which also sums to one but does not
    minimize the variance; the two disagree whenever the per-event
    variances differ, and a warning is emitted when they do.
    """
    b = np.asarray(beta_firsts, float)
    S = np.atleast_2d(np.asarray(Sigma, float))
    K = b.size
    if S.shape != (K, K):
        raise DataError(f"covariance must be {K}x{K}, got {S.shape}")
    e = np.ones(K)
    try:
        c_mv = np.linalg.solve(S, e)
    except np.linalg.LinAlgError:
        raise ConvergenceError("singular covariance in common-effect pooling") from None
    c_mv = c_mv / (e @ c_mv)
    c_pr = S @ e / (e @ S @ e)
    eta_mv = float(c_mv @ b)
    eta_pr = float(c_pr @ b)
    if abs(eta_mv - eta_pr) > 1e-8 * (1.0 + abs(eta_mv)):
        warnings.warn(
            "printed common-effect weights (Sigma e) disagree with the "
            "minimum-variance weights (Sigma^-1 e); reporting the "
            f"{method} form", stacklevel=2,
        )
    c = c_mv if method == "min_variance" else c_pr
    eta = float(c @ b)
    return CommonEffect(estimate=eta, variance=float(c @ S @ c), weights=c, method=method)


def _check_ties(ties):
    if ties not in ("breslow", "efron"):
        raise DataError(f"ties must be 'breslow' or 'efron', got {ties!r}")


def _event_arrays(data, k):
    if isinstance(data, StudyDataset):
        return data.event_arrays(k)
    if isinstance(data, EventArrays):
        return data
    return data[k]


def _event_types(data):
    if isinstance(data, StudyDataset):
        return data.event_types
    return sorted(data)
