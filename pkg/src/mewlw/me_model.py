"""Event-specific measurement-error models fitted in the validation study.

Each event type gets a pooled logistic regression for the discrete-time
hazard of the *true* event status: the probability that the true event
occurs at questionnaire time t given that the subject was event-free at
the previous questionnaire.  Fitting uses the person-time expansion (one
row per subject and questionnaire time, truncated after the first true
event), so point estimates coincide with ordinary logistic regression on
the expanded rows.  Scores are kept per subject so that the downstream
sandwich variance can account for within-subject correlation across rows
and across event types.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from ._newton import SolveInfo, newton_solve
from .data import EventArrays, StudyDataset
from .exceptions import ConvergenceError, DataError, SeparationError


@dataclass(frozen=True)
class MeModelSpec:
    """Predictor selection for one event's measurement-error model.

    ``predictors`` are resolved against the event arrays:

    - ``"self_report"``: the self-reported status at t
    - ``"time"`` (alias ``"t"``): the questionnaire time itself
    - ``"z"`` / ``"z_<j>"``: all / the j-th regression covariate column
    - ``"w"`` / ``"w_<j>"``: all / the j-th extra predictor column
    """

    predictors: tuple = ("self_report", "z", "time")
    intercept: bool = True

    def column_names(self, arrays):
        names = ["intercept"] if self.intercept else []
        for name in self.predictors:
            names.extend(_resolve_names(name, arrays))
        return names


def _resolve_names(name, arrays):
    if name in ("self_report", "time", "t"):
        return ["time" if name == "t" else name]
    for prefix, dim in (("z", arrays.covariates.shape[2]),
                        ("w", arrays.me_predictors.shape[2])):
        if name == prefix:
            return [f"{prefix}_{j + 1}" for j in range(dim)]
        if name.startswith(prefix + "_"):
            j = int(name[len(prefix) + 1:])
            if not 1 <= j <= dim:
                raise DataError(f"predictor {name!r} out of range (have {dim} columns)")
            return [name]
    raise DataError(f"unknown measurement-error predictor {name!r}")


def design_matrix(arrays, spec):
    """Assemble the (n, T, q) predictor array for one event type."""
    n, T = arrays.present.shape
    cols = []
    if spec.intercept:
        cols.append(np.ones((n, T)))
    for name in spec.predictors:
        if name == "self_report":
            cols.append(arrays.self_report)
        elif name in ("time", "t"):
            cols.append(np.broadcast_to(arrays.times, (n, T)))
        elif name == "z":
            cols.extend(arrays.covariates[:, :, j] for j in range(arrays.covariates.shape[2]))
        elif name == "w":
            cols.extend(arrays.me_predictors[:, :, j] for j in range(arrays.me_predictors.shape[2]))
        elif name.startswith("z_"):
            _resolve_names(name, arrays)
            cols.append(arrays.covariates[:, :, int(name[2:]) - 1])
        elif name.startswith("w_"):
            _resolve_names(name, arrays)
            cols.append(arrays.me_predictors[:, :, int(name[2:]) - 1])
        else:
            raise DataError(f"unknown measurement-error predictor {name!r}")
    if not cols:
        raise DataError("measurement-error model has no predictors")
    return np.stack(cols, axis=2)


@dataclass
class PersonTimeTable:
    """Long person-time rows for one event's pooled logistic regression."""

    subject_index: np.ndarray  # (m,) row -> subject position in the arrays
    time: np.ndarray           # (m,)
    outcome: np.ndarray        # (m,) true status at t
    design: np.ndarray         # (m, q)
    n_subjects: int
    column_names: list = field(default_factory=list)

    @property
    def n_rows(self):
        return self.outcome.size

    @property
    def n_cases(self):
        return int(self.outcome.sum())


def expand_person_time(data, k, spec=MeModelSpec()):
    """Person-time rows for event ``k``: one row per (subject, grid time).

    A subject contributes a row at time t when t is on their grid, the
    censoring time is at least t, and no true event occurred at an earlier
    grid time.  The row at the first true event time is included with
    outcome 1; all later times are dropped.
    """
    arrays = _event_arrays(data, k)
    if arrays.true_status is None:
        raise DataError("person-time expansion requires true_status paths (validation data)")
    status = arrays.true_status * arrays.present
    # event at some strictly earlier grid time?
    prior = np.zeros_like(status, dtype=bool)
    prior[:, 1:] = np.cumsum(status[:, :-1], axis=1) > 0
    keep = arrays.present & (arrays.times[None, :] <= arrays.censor[:, None]) & ~prior
    design = design_matrix(arrays, spec)
    i_idx, t_idx = np.nonzero(keep)
    return PersonTimeTable(
        subject_index=i_idx,
        time=arrays.times[t_idx],
        outcome=status[i_idx, t_idx],
        design=design[i_idx, t_idx],
        n_subjects=arrays.n_subjects,
        column_names=spec.column_names(arrays),
    )


@dataclass
class MeEventFit:
    """Fitted pooled logistic model for one event type."""

    gamma: np.ndarray           # (q,)
    information: np.ndarray     # (q, q) observed information at gamma
    scores: np.ndarray          # (n_V, q) per-subject score contributions
    spec: MeModelSpec
    info: SolveInfo
    n_rows: int
    n_cases: int
    column_names: list = field(default_factory=list)


def fit_pooled_logistic(table, guard=15.0):
    """Maximum-likelihood fit of the pooled logistic regression.

    Predictors are rescaled internally for conditioning and the fit is
    reported on the raw scale.  Coefficients beyond ``guard`` on the
    standardized scale are treated as separation.

    Returns
    -------
    (gamma, information, SolveInfo)
    """
    y = np.asarray(table.outcome, dtype=float)
    X = np.asarray(table.design, dtype=float)
    if y.size == 0:
        raise DataError("empty person-time table")
    if y.min() == y.max():
        raise DataError("pooled logistic regression needs both outcome classes present")

    sd = X.std(axis=0)
    scale = np.where(sd > 0, sd, np.maximum(1.0, np.abs(X).max(axis=0)))
    Xs = X / scale

    def objective(g):
        eta = Xs @ g
        p = expit(eta)
        # log-likelihood via the numerically stable log(1 + e^eta)
        ll = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
        score = Xs.T @ (y - p)
        info = (Xs * (p * (1.0 - p))[:, None]).T @ Xs
        return ll, score, info

    try:
        gs, solve_info = newton_solve(objective, np.zeros(Xs.shape[1]), divergence=1e4)
    except ConvergenceError as err:
        raise SeparationError(
            f"pooled logistic regression did not converge ({err}); "
            f"check for complete separation"
        ) from None
    varying = sd > 0
    if np.any(np.abs(gs[varying]) > guard):
        raise SeparationError(
            f"standardized coefficients exceed {guard}; outcome is (quasi-)separated"
        )
    gamma = gs / scale
    p = expit(X @ gamma)
    information = (X * (p * (1.0 - p))[:, None]).T @ X
    return gamma, information, solve_info


def _score_by_subject(table, gamma):
    resid = table.outcome - expit(table.design @ gamma)
    contrib = table.design * resid[:, None]
    out = np.zeros((table.n_subjects, table.design.shape[1]))
    np.add.at(out, table.subject_index, contrib)
    return out


@dataclass
class MeModelFit:
    """Joint fit of the K event-specific measurement-error models."""

    events: dict           # k -> MeEventFit
    n_validation: int

    @property
    def event_types(self):
        return sorted(self.events)

    @property
    def gamma_dims(self):
        return [self.events[k].gamma.shape[0] for k in self.event_types]

    def stacked_gamma(self):
        return np.concatenate([self.events[k].gamma for k in self.event_types])

    def stacked_scores(self):
        """(n_V, sum q_k) per-subject score contributions across events."""
        return np.hstack([self.events[k].scores for k in self.event_types])

    def jacobian(self):
        """Block-diagonal Jacobian of the stacked mean score in gamma."""
        from scipy.linalg import block_diag
        blocks = [-self.events[k].information / self.n_validation for k in self.event_types]
        return block_diag(*blocks)


def fit_me_models(validation, specs=None):
    """Fit the pooled logistic measurement-error model for every event type.

    Parameters
    ----------
    validation : StudyDataset or mapping of event type -> EventArrays
        Must carry true-status paths.
    specs : MeModelSpec, mapping, or None
        One spec for all events, or per-event overrides.

    Returns
    -------
    MeModelFit
    """
    event_types = _event_types(validation)
    fits = {}
    n_validation = None
    for k in event_types:
        spec = _spec_for(specs, k)
        table = expand_person_time(validation, k, spec)
        gamma, information, solve_info = fit_pooled_logistic(table)
        scores = _score_by_subject(table, gamma)
        if n_validation is None:
            n_validation = table.n_subjects
        elif n_validation != table.n_subjects:
            raise DataError("validation subject count differs across event types")
        fits[k] = MeEventFit(
            gamma=gamma,
            information=information,
            scores=scores,
            spec=spec,
            info=solve_info,
            n_rows=table.n_rows,
            n_cases=table.n_cases,
            column_names=table.column_names,
        )
    return MeModelFit(events=fits, n_validation=n_validation)


def me_scores(fit, validation):
    """Recompute the stacked per-subject score vectors at the fitted gamma."""
    pieces = []
    for k in fit.event_types:
        table = expand_person_time(validation, k, fit.events[k].spec)
        pieces.append(_score_by_subject(table, fit.events[k].gamma))
    return np.hstack(pieces)


def me_joint_cov(fit):
    """Sandwich covariance of the stacked gamma estimates.

    Off-diagonal blocks carry the between-event correlation induced by
    shared validation subjects.
    """
    n = fit.n_validation
    scores = fit.stacked_scores()
    bread = fit.jacobian()
    meat = scores.T @ scores / n
    try:
        binv = np.linalg.solve(bread, np.eye(bread.shape[0]))
    except np.linalg.LinAlgError:
        raise ConvergenceError("singular measurement-error information matrix") from None
    cov = binv @ meat @ binv.T / n
    cov = 0.5 * (cov + cov.T)
    eigs = np.linalg.eigvalsh(cov)
    if eigs.min() < -1e-8 * max(eigs.max(), 1e-300):
        warnings.warn("measurement-error covariance is indefinite beyond tolerance")
    return cov


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


def _spec_for(specs, k):
    if specs is None:
        return MeModelSpec()
    if isinstance(specs, MeModelSpec):
        return specs
    return specs[k]
