"""Joint sandwich inference for the weighted WLW estimators.

The weighted score equations and the measurement-error score equations
are stacked into one estimating system, so the covariance of the
regression coefficients reflects the uncertainty of the estimated
error-model parameters.  The bread is block upper-triangular (the
error-model score does not depend on beta) and the meat is block
diagonal, with the error-model block scaled by the inverse of the
validation-to-main sample-size ratio.

Designs
-------
- external validation (``fit_evs``): error models fitted on an
  independent validation study, weighted fit on the main study.
- internal validation, full calibration (``fit_ivs_full``): identical
  pipeline with the validation subjects' true outcomes ignored in the
  survival stage.
- internal validation, pooled (``fit_ivs_pooled``): standard WLW on the
  validation subset plus a weighted fit on the remaining subjects,
  combined by inverse-variance matrix weighting with the cross-covariance
  between the two (they share the validation subjects through gamma)
  estimated from stacked per-subject contributions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .cox import _constant_covariates, _event_arrays, fit_wlw, score_residuals
from .data import EventArrays, StudyDataset
from .exceptions import ConvergenceError, DataError
from .me_model import fit_me_models
from .results import FitResult
from .weighted import _risk_quantities, _tie_counts, score_jacobian, solve_weighted
from .weights import build_weight_table, compute_event_weights

CONDITION_LIMIT = 1e12


def robust_inv(M, what="matrix"):
    """Invert with a condition-number guard; fall back to a pseudo-inverse."""
    M = np.atleast_2d(M)
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        warnings.warn(
            f"{what} is ill-conditioned (cond={cond:.3g}); using a pseudo-inverse",
            stacklevel=2,
        )
        return np.linalg.pinv(M)
    return np.linalg.inv(M)


def ensure_psd(M, rel_tol=1e-8, what="covariance"):
    """Symmetrize and project small negative eigenvalues to zero.

    Violations beyond ``rel_tol`` (relative to the spectral radius) are
    hard errors.
    """
    S = 0.5 * (M + M.T)
    eigval, eigvec = np.linalg.eigh(S)
    scale = max(float(np.max(np.abs(eigval))), 1e-300)
    if eigval.min() < -rel_tol * scale:
        raise ConvergenceError(
            f"{what} is indefinite (min eigenvalue {eigval.min():.3g})"
        )
    if eigval.min() < 0:
        warnings.warn(f"projecting {what} to the nearest PSD matrix", stacklevel=2)
        eigval = np.clip(eigval, 0.0, None)
        S = (eigvec * eigval) @ eigvec.T
        S = 0.5 * (S + S.T)
    return S


def _efron_time_tables(beta, ew, Z):
    """Per-time averaged Efron quantities used by residuals and Jacobians.

    Returns arrays over the grid: mean risk-set mean covariate, plus the
    r-averages a = E[1/S0r], b = E[zbar_r/S0r], a2 = E[frac/S0r],
    b2 = E[frac zbar_r/S0r].
    """
    n, T, p = Z.shape
    _, _, r, S0, S1, wbar, valid = _risk_quantities(beta, ew, Z)
    d = _tie_counts(ew)
    rh = r * ew.h
    H0 = rh.sum(axis=0)
    H1 = np.einsum("nt,ntp->tp", rh, Z)
    meanzbar = np.zeros((T, p))
    a = np.zeros(T)
    b = np.zeros((T, p))
    a2 = np.zeros(T)
    b2 = np.zeros((T, p))
    for t in np.nonzero(valid)[0]:
        dt = max(int(d[t]), 1)
        frac = np.arange(dt) / dt
        S0r = S0[t] - frac * H0[t]
        zbar_r = (S1[t][None, :] - frac[:, None] * H1[t][None, :]) / S0r[:, None]
        meanzbar[t] = zbar_r.mean(axis=0)
        a[t] = np.mean(1.0 / S0r)
        b[t] = (zbar_r / S0r[:, None]).mean(axis=0)
        a2[t] = np.mean(frac / S0r)
        b2[t] = (frac[:, None] * zbar_r / S0r[:, None]).mean(axis=0)
    return r, rh, S0, S1, wbar, valid, meanzbar, a, b, a2, b2


def phi_tilde_star(beta, event_weights, Z, ties="breslow"):
    """Per-subject estimating-function contributions for one event type.

    Each row is the subject's weighted score term minus the risk-set
    compensator accumulated over every subject's potential event times;
    rows sum to the (unnormalized) score, hence to zero at the solution.
    """
    beta = np.asarray(beta, float)
    Z = np.asarray(Z, float)
    ew = event_weights
    if ties == "breslow":
        _, _, r, S0, S1, wbar, valid = _risk_quantities(beta, ew, Z)
        zbar = np.zeros_like(S1)
        zbar[valid] = S1[valid] / S0[valid, None]
        zc = Z - zbar[None, :, :]
        part1 = np.einsum("nt,ntp->np", ew.weight, zc)
        coef = np.zeros_like(S0)
        coef[valid] = wbar[valid] / S0[valid]
        part2 = np.einsum("nt,ntp->np", r * coef[None, :], zc)
        return part1 - part2
    if ties == "efron":
        r, rh, S0, S1, wbar, valid, meanzbar, a, b, a2, b2 = _efron_time_tables(beta, ew, Z)
        part1 = np.einsum("nt,ntp->np", ew.weight, Z - meanzbar[None, :, :])
        inner = (Z * a[None, :, None] - b[None, :, :]) * r[:, :, None]
        inner -= (Z * a2[None, :, None] - b2[None, :, :]) * rh[:, :, None]
        part2 = np.einsum("t,ntp->np", wbar, inner)
        return part1 - part2
    raise DataError(f"ties must be 'breslow' or 'efron', got {ties!r}")


def beta_gamma_jacobian(beta, event_weights, Z, ties="breslow"):
    """Analytic derivative of the weighted score in the error-model gamma.

    Uses the cached derivative paths of the weights (d w / d gamma and of
    the at-risk probabilities), so the weight table must come from
    :func:`mewlw.weights.build_weight_table`.
    """
    ew = event_weights
    if ew.design is None or ew.d_prob is None:
        raise DataError("weight table lacks gamma derivatives (degenerate table?)")
    beta = np.asarray(beta, float)
    Z = np.asarray(Z, float)
    n, T, p = Z.shape
    q = ew.design.shape[2]
    dweight = ew.d_prob * ew.observed[:, :, None]
    G = ew.cum_hw

    if ties == "breslow":
        _, _, r, S0, S1, wbar, valid = _risk_quantities(beta, ew, Z)
        zbar = np.zeros_like(S1)
        zbar[valid] = S1[valid] / S0[valid, None]
        zc = Z - zbar[None, :, :]
        term1 = np.einsum("ntp,ntq->pq", zc, dweight)
        coef = np.zeros_like(S0)
        coef[valid] = wbar[valid] / S0[valid]
        term2 = np.einsum("nt,ntp,ntq->pq", r * coef[None, :], zc, G)
        return (term1 + term2) / n
    if ties == "efron":
        r, rh, S0, S1, wbar, valid, meanzbar, a, b, a2, b2 = _efron_time_tables(beta, ew, Z)
        term1 = np.einsum("ntp,ntq->pq", Z - meanzbar[None, :, :], dweight)
        h = ew.h
        W = ew.design
        m = h[:, :, None] * G - (h * (1.0 - h))[:, :, None] * W
        term2 = np.zeros((p, q))
        for t in np.nonzero(valid)[0]:
            if wbar[t] == 0:
                continue
            rt = r[:, t]
            P1 = np.einsum("n,np,nq->pq", rt, Z[:, t], G[:, t])
            P2 = np.einsum("n,np,nq->pq", rt, Z[:, t], m[:, t])
            p0 = rt @ G[:, t]
            q0 = rt @ m[:, t]
            term2 += wbar[t] * (P1 * a[t] - P2 * a2[t]
                                - np.outer(b[t], p0) + np.outer(b2[t], q0))
        return (term1 + term2) / n
    raise DataError(f"ties must be 'breslow' or 'efron', got {ties!r}")


def beta_gamma_jacobian_fd(beta, arrays, event_weights, gamma, ties="breslow",
                           step=1e-5):
    """Central finite-difference check of :func:`beta_gamma_jacobian`."""
    from .weighted import _accumulate

    design = event_weights.design
    if design is None:
        raise DataError("finite differences require the ME design matrix")
    Z = arrays.covariates
    p = Z.shape[2]
    gamma = np.asarray(gamma, float)
    out = np.zeros((p, gamma.size))
    for j in range(gamma.size):
        cols = []
        for sign in (1.0, -1.0):
            g = gamma.copy()
            g[j] += sign * step
            ew = compute_event_weights(arrays, expit(design @ g))
            _, score, _ = _accumulate(np.asarray(beta, float), ew, Z, ties, False)
            cols.append(score)
        out[:, j] = (cols[0] - cols[1]) / (2.0 * step)
    return out


@dataclass
class JointCovariance:
    """Assembled bread/meat matrices and the resulting covariance."""

    a_matrix: np.ndarray
    b_matrix: np.ndarray
    cov: np.ndarray        # covariance of [beta, gamma]
    beta_cov: np.ndarray   # upper-left block
    rho: float
    design: str
    p_dims: list
    q_dims: list
    n_main: int
    n_validation: int


def _offsets(dims):
    return np.concatenate([[0], np.cumsum(dims)]).astype(int)


def evs_joint_cov(main, weight_table, me_fit, fit, rho, ties="breslow",
                  design="MS/EVS"):
    """Joint sandwich covariance of (beta, gamma) for the weighted fit.

    ``rho`` is the validation-to-main sample-size ratio; the error-model
    meat block is scaled by 1/rho.  The beta covariance is the upper-left
    block of A^{-1} B A^{-T} / n_main.
    """
    if rho <= 0:
        raise DataError("rho must be positive")
    event_types = weight_table.event_types
    p_dims = fit.dims
    q_dims = me_fit.gamma_dims
    P, Q = sum(p_dims), sum(q_dims)
    po, qo = _offsets(p_dims), _offsets(q_dims)

    n_main = None
    A_bb = np.zeros((P, P))
    A_bg = np.zeros((P, Q))
    phis = []
    for j, k in enumerate(event_types):
        arrays = _event_arrays(main, k)
        n_main = arrays.n_subjects if n_main is None else n_main
        ew = weight_table[k]
        beta_k = fit.betas[j]
        A_bb[po[j]:po[j + 1], po[j]:po[j + 1]] = score_jacobian(
            beta_k, ew, arrays.covariates, ties)
        A_bg[po[j]:po[j + 1], qo[j]:qo[j + 1]] = beta_gamma_jacobian(
            beta_k, ew, arrays.covariates, ties)
        phis.append(phi_tilde_star(beta_k, ew, arrays.covariates, ties))

    A_gg = me_fit.jacobian()
    scores = me_fit.stacked_scores()
    n_v = me_fit.n_validation

    A = np.zeros((P + Q, P + Q))
    A[:P, :P] = A_bb
    A[:P, P:] = A_bg
    A[P:, P:] = A_gg

    B = np.zeros((P + Q, P + Q))
    phi_all = np.hstack(phis)
    B[:P, :P] = phi_all.T @ phi_all / n_main
    B[P:, P:] = (scores.T @ scores / n_v) / rho

    Abb_inv = np.zeros((P, P))
    for j, k in enumerate(event_types):
        sl = slice(po[j], po[j + 1])
        Abb_inv[sl, sl] = robust_inv(A_bb[sl, sl], what=f"score Jacobian (event {k})")
    Agg_inv = np.zeros((Q, Q))
    for j, k in enumerate(event_types):
        sl = slice(qo[j], qo[j + 1])
        Agg_inv[sl, sl] = robust_inv(A_gg[sl, sl], what=f"ME information (event {k})")
    Ainv = np.zeros_like(A)
    Ainv[:P, :P] = Abb_inv
    Ainv[P:, P:] = Agg_inv
    Ainv[:P, P:] = -Abb_inv @ A_bg @ Agg_inv

    cov = Ainv @ B @ Ainv.T / n_main
    cov = ensure_psd(cov, what="joint (beta, gamma) covariance")
    return JointCovariance(
        a_matrix=A, b_matrix=B, cov=cov, beta_cov=cov[:P, :P], rho=rho,
        design=design, p_dims=p_dims, q_dims=q_dims, n_main=n_main,
        n_validation=n_v,
    )


@dataclass
class CorrectedResult:
    """Weighted WLW fit with its joint sandwich covariance attached."""

    fit: FitResult
    me_fit: object
    joint: JointCovariance
    weight_table: object
    design: str
    rho: float

    @property
    def beta(self):
        return self.fit.beta

    @property
    def cov(self):
        return self.fit.cov

    @property
    def se(self):
        return self.fit.se


def _as_arrays_map(data):
    if isinstance(data, StudyDataset):
        return {k: data.event_arrays(k) for k in data.event_types}
    if isinstance(data, EventArrays):
        raise DataError("pass a mapping of event type -> EventArrays")
    return dict(data)


def _subject_ids(arrays_map):
    ids = None
    for k in sorted(arrays_map):
        cur = list(arrays_map[k].subject_ids)
        if ids is None:
            ids = cur
        elif cur != ids:
            raise DataError("subject sets differ across event types")
    return ids


def fit_evs(main, validation, specs=None, ties="breslow"):
    """Full pipeline under the external-validation design."""
    main_map = _as_arrays_map(main)
    valid_map = _as_arrays_map(validation)
    return _weighted_pipeline(main_map, valid_map, specs, ties, "MS/EVS")


def fit_ivs_full(main, validation, specs=None, ties="breslow"):
    """Full-calibration pipeline under the internal-validation design.

    The validation subjects must be a subset of the main study; their
    true outcomes are used only to fit the error models, while the
    survival stage weights every main-study subject identically.
    """
    main_map = _as_arrays_map(main)
    valid_map = _as_arrays_map(validation)
    main_ids = _subject_ids(main_map)
    valid_ids = _subject_ids(valid_map)
    if not set(valid_ids) <= set(main_ids):
        raise DataError("validation must be a subset of the main study")
    return _weighted_pipeline(main_map, valid_map, specs, ties, "MS/IVS")


def _weighted_pipeline(main_map, valid_map, specs, ties, design):
    me_fit = fit_me_models(valid_map, specs)
    table = build_weight_table(main_map, me_fit)
    fit = solve_weighted(main_map, table, ties=ties)
    n_main = next(iter(main_map.values())).n_subjects
    rho = me_fit.n_validation / n_main
    joint = evs_joint_cov(main_map, table, me_fit, fit, rho, ties, design)
    fit.cov = joint.beta_cov
    return CorrectedResult(fit=fit, me_fit=me_fit, joint=joint,
                           weight_table=table, design=design, rho=rho)


@dataclass
class PooledResult:
    """Inverse-variance pooled estimate under the internal-validation design."""

    fit: FitResult                 # pooled beta with its covariance
    fit_validation: FitResult      # standard WLW on the validation subset
    fit_main: FitResult            # weighted fit on the remaining subjects
    cov_validation: np.ndarray
    cov_main: np.ndarray
    cross_cov: np.ndarray          # Cov(beta_main, beta_validation)
    me_fit: object
    rho: float
    design: str = "MS/IVS"

    @property
    def beta(self):
        return self.fit.beta

    @property
    def cov(self):
        return self.fit.cov


def pool_estimates(beta_v, cov_v, beta_m, cov_m, cross=None):
    """Inverse-variance matrix-weighted combination of two estimates.

    ``cross`` is Cov(beta_m, beta_v); with equal component covariances and
    no cross term the pool is the plain midpoint.

    Returns
    -------
    (beta_pooled, cov_pooled, weight_v, weight_m)
    """
    iv = robust_inv(cov_v, what="validation covariance")
    im = robust_inv(cov_m, what="weighted-fit covariance")
    H = robust_inv(iv + im, what="pooled precision")
    wv = H @ iv
    wm = H @ im
    beta_p = wv @ beta_v + wm @ beta_m
    cov_p = wv @ cov_v @ wv.T + wm @ cov_m @ wm.T
    if cross is not None:
        cov_p += wm @ cross @ wv.T + wv @ cross.T @ wm.T
    return beta_p, 0.5 * (cov_p + cov_p.T), wv, wm


def fit_ivs_pooled(main, validation, specs=None, ties="breslow"):
    """Pooled estimator: standard WLW on the validation subset combined
    with the weighted fit on the remaining main-study subjects."""
    main_map = _as_arrays_map(main)
    valid_map = _as_arrays_map(validation)
    main_ids = _subject_ids(main_map)
    valid_ids = _subject_ids(valid_map)
    valid_set = set(valid_ids)
    if not valid_set <= set(main_ids):
        raise DataError("validation must be a subset of the main study")
    keep = [i for i, sid in enumerate(main_ids) if sid not in valid_set]
    if not keep:
        raise DataError("pooling needs main-study subjects outside the validation set")
    comp_map = {k: arr.subset(keep) for k, arr in main_map.items()}

    me_fit = fit_me_models(valid_map, specs)
    try:
        fit_v = fit_wlw(valid_map, outcome="true", ties=ties)
    except DataError as err:
        raise DataError(
            f"pooling unavailable ({err}); full calibration recommended"
        ) from None
    table_m = build_weight_table(comp_map, me_fit)
    fit_m = solve_weighted(comp_map, table_m, ties=ties)

    cov_m, cov_v, cross = _pooled_joint_blocks(
        comp_map, table_m, fit_m, valid_map, fit_v, me_fit, ties)
    fit_v.cov = cov_v
    beta_p, cov_p, _, _ = pool_estimates(fit_v.beta, cov_v, fit_m.beta, cov_m,
                                         cross=cross)
    offsets = _offsets(fit_m.dims)
    betas = [beta_p[offsets[j]:offsets[j + 1]] for j in range(len(fit_m.dims))]
    pooled_fit = FitResult(betas=betas, cov=cov_p,
                           diagnostics=fit_m.diagnostics, ties=ties,
                           method="ivs_pooled")
    fit_m.cov = cov_m
    n_main = len(main_ids)
    return PooledResult(
        fit=pooled_fit, fit_validation=fit_v, fit_main=fit_m,
        cov_validation=cov_v, cov_main=cov_m, cross_cov=cross,
        me_fit=me_fit, rho=me_fit.n_validation / n_main,
    )


def _pooled_joint_blocks(comp_map, table_m, fit_m, valid_map, fit_v, me_fit, ties):
    """Joint covariance blocks for [beta_main, beta_valid, gamma].

    The bread is upper triangular: the weighted score depends on gamma,
    while the validation WLW score and the ME score are functions of the
    validation data alone.  Their meat block keeps the empirical cross
    moments between the per-subject WLW residuals and ME scores.
    """
    event_types = sorted(comp_map)
    p_dims = fit_m.dims
    q_dims = me_fit.gamma_dims
    P, Q = sum(p_dims), sum(q_dims)
    po, qo = _offsets(p_dims), _offsets(q_dims)
    n1 = next(iter(comp_map.values())).n_subjects
    n_v = me_fit.n_validation

    A_mm = np.zeros((P, P))
    A_mg = np.zeros((P, Q))
    phis = []
    for j, k in enumerate(event_types):
        arrays = comp_map[k]
        ew = table_m[k]
        beta_k = fit_m.betas[j]
        A_mm[po[j]:po[j + 1], po[j]:po[j + 1]] = score_jacobian(
            beta_k, ew, arrays.covariates, ties)
        A_mg[po[j]:po[j + 1], qo[j]:qo[j + 1]] = beta_gamma_jacobian(
            beta_k, ew, arrays.covariates, ties)
        phis.append(phi_tilde_star(beta_k, ew, arrays.covariates, ties))
    phi_m = np.hstack(phis)

    # validation-side per-subject contributions: classical WLW residuals + ME scores
    resid_v = []
    A_vv = np.zeros((P, P))
    for j, k in enumerate(event_types):
        arrays = valid_map[k]
        time, status = arrays.first_event_time()
        Z = _constant_covariates(arrays)
        resid_v.append(score_residuals(time, status, Z, fit_v.betas[j], ties))
        _, _, info = _classical_info(time, status, Z, fit_v.betas[j], ties)
        A_vv[po[j]:po[j + 1], po[j]:po[j + 1]] = -info / n_v
    psi = np.hstack(resid_v + [me_fit.stacked_scores()])  # (n_V, P + Q)

    D = P + P + Q
    A = np.zeros((D, D))
    A[:P, :P] = A_mm
    A[:P, 2 * P:] = A_mg
    A[P:2 * P, P:2 * P] = A_vv
    A[2 * P:, 2 * P:] = me_fit.jacobian()

    B = np.zeros((D, D))
    B[:P, :P] = phi_m.T @ phi_m / n1
    B[P:, P:] = (psi.T @ psi / n_v) * (n1 / n_v)

    A_theta = A[P:, P:]
    Ainv = np.zeros_like(A)
    Amm_inv = np.zeros((P, P))
    for j, k in enumerate(event_types):
        sl = slice(po[j], po[j + 1])
        Amm_inv[sl, sl] = robust_inv(A_mm[sl, sl], what=f"score Jacobian (event {k})")
    Atheta_inv = robust_inv(A_theta, what="validation-side Jacobian")
    Ainv[:P, :P] = Amm_inv
    Ainv[P:, P:] = Atheta_inv
    Ainv[:P, P:] = -Amm_inv @ A[:P, P:] @ Atheta_inv

    cov = Ainv @ B @ Ainv.T / n1
    cov = ensure_psd(cov, what="joint (beta_M, beta_V, gamma) covariance")
    cov_m = cov[:P, :P]
    cov_v = cov[P:2 * P, P:2 * P]
    cross = cov[:P, P:2 * P]
    return cov_m, cov_v, cross


def _classical_info(time, status, Z, beta, ties):
    from .cox import partial_likelihood
    return partial_likelihood(time, status, Z, beta, ties)


@dataclass
class WaldTest:
    statistic: float
    p_value: float


def wald_equal_effects(beta_pair, cov_pair):
    """Two-sided Wald test of equality of two coefficient estimates."""
    b = np.asarray(beta_pair, float)
    V = np.atleast_2d(np.asarray(cov_pair, float))
    if b.shape != (2,) or V.shape != (2, 2):
        raise DataError("the equality test takes two estimates and their 2x2 covariance")
    var_diff = V[0, 0] + V[1, 1] - 2.0 * V[0, 1]
    if var_diff <= 0:
        raise ConvergenceError("nonpositive variance for the estimated difference")
    z = float((b[0] - b[1]) / np.sqrt(var_diff))
    return WaldTest(statistic=z, p_value=float(2.0 * norm.sf(abs(z))))
