"""Event-time probability weights derived from the measurement-error models.

For a subject with discrete hazard probabilities h(t) over their
questionnaire grid (h(0) = 0 at the implicit origin), the probability that
the true event occurs exactly at grid time t is

    w(t) = h(t) * prod_{t' < t} (1 - h(t')),

the probability it has occurred by t is the running sum N~(t), and the
probability of still being at risk at t under observation is
Y~(t) = prod_{t' < t} (1 - h(t')) * I(C >= t).  The telescoping identity
sum_t w(t) + prod_t (1 - h(t)) = 1 holds exactly.

Gamma-derivatives of w and Y~ are accumulated alongside (product rule),
since the joint sandwich variance needs them and finite differences of
near-telescoping products lose precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import expit

from .data import EventArrays, StudyDataset
from .exceptions import DataError


def hazard_prob(gamma, w, t):
    """Conditional event probability at grid time t; defined as 0 at t=0."""
    if t == 0:
        return 0.0
    gamma = np.asarray(gamma, dtype=float)
    w = np.asarray(w, dtype=float)
    if gamma.shape != w.shape:
        raise DataError(f"gamma has shape {gamma.shape} but predictors have {w.shape}")
    return float(expit(gamma @ w))


@dataclass
class EventWeights:
    """Per-subject weight paths for one event type on the union grid.

    ``prob`` and ``n_tilde`` describe the probability model over the
    subject's full grid; ``weight`` and ``y_tilde`` are the score-facing
    versions restricted to observed times (C >= t).
    """

    times: np.ndarray            # (T,)
    present: np.ndarray          # (n, T)
    observed: np.ndarray         # (n, T) present and C >= t
    h: np.ndarray                # (n, T) hazard probabilities, 0 off-grid
    prob: np.ndarray             # (n, T) event-time probabilities h * prod(1-h)
    n_tilde: np.ndarray          # (n, T) cumulative event probability
    weight: np.ndarray           # (n, T) prob * observed
    y_tilde: np.ndarray          # (n, T) at-risk probability * observed
    design: np.ndarray | None = None   # (n, T, q) ME design, when h came from a fit
    d_prob: np.ndarray | None = None   # (n, T, q) d prob / d gamma
    d_y: np.ndarray | None = None      # (n, T, q) d y_tilde / d gamma
    cum_hw: np.ndarray | None = None   # (n, T, q) sum_{s<t} h(s) W(s)

    @property
    def n_subjects(self):
        return self.h.shape[0]

    @property
    def survivor(self):
        """prod_{t' <= t}(1 - h(t')): probability of no event through t."""
        return 1.0 - self.n_tilde


def compute_event_weights(arrays, h, design=None):
    """Build :class:`EventWeights` from hazard probabilities.

    ``h`` is zeroed off the subject's grid so the cumulative products run
    over each subject's own times only.  When ``design`` is given, the
    analytic gamma-derivatives of the weights are accumulated too.
    """
    present = arrays.present
    h = np.where(present, np.asarray(h, dtype=float), 0.0)
    if np.any((h < 0) | (h > 1)):
        raise DataError("hazard probabilities must lie in [0, 1]")
    surv_incl = np.cumprod(1.0 - h, axis=1)
    surv_excl = np.ones_like(surv_incl)
    surv_excl[:, 1:] = surv_incl[:, :-1]
    prob = h * surv_excl
    n_tilde = np.cumsum(prob, axis=1)
    obs = arrays.observed
    weight = prob * obs
    y_tilde = surv_excl * obs

    d_prob = d_y = cum_hw = None
    if design is not None:
        hw = h[:, :, None] * design
        cum_hw = np.zeros_like(hw)
        cum_hw[:, 1:] = np.cumsum(hw[:, :-1], axis=1)
        d_prob = prob[:, :, None] * ((1.0 - h)[:, :, None] * design - cum_hw)
        d_y = -(surv_excl * obs)[:, :, None] * cum_hw
    return EventWeights(
        times=arrays.times,
        present=present,
        observed=obs,
        h=h,
        prob=prob,
        n_tilde=n_tilde,
        weight=weight,
        y_tilde=y_tilde,
        design=design,
        d_prob=d_prob,
        d_y=d_y,
        cum_hw=cum_hw,
    )


@dataclass
class WeightTable:
    """Weight paths for every event type of a dataset."""

    events: dict  # k -> EventWeights

    def __getitem__(self, k):
        return self.events[k]

    @property
    def event_types(self):
        return sorted(self.events)

    def to_frame(self, subject_ids=None):
        """Long-format audit dump: one row per present (subject, event, time)."""
        rows = []
        for k in self.event_types:
            ew = self.events[k]
            ids = subject_ids or [str(i) for i in range(ew.n_subjects)]
            i_idx, t_idx = np.nonzero(ew.present)
            rows.append(pd.DataFrame({
                "subject_id": [ids[i] for i in i_idx],
                "event_type": k,
                "time": ew.times[t_idx],
                "h": ew.h[i_idx, t_idx],
                "weight": ew.weight[i_idx, t_idx],
                "N_tilde": ew.n_tilde[i_idx, t_idx],
                "Y_tilde": ew.y_tilde[i_idx, t_idx],
            }))
        return pd.concat(rows, ignore_index=True)


def build_weight_table(data, fit):
    """Hazard probabilities and weights for every subject from a fitted model.

    Parameters
    ----------
    data : StudyDataset or mapping of event type -> EventArrays
        The study to weight (typically the main study).
    fit : MeModelFit
        Fitted measurement-error models providing gamma per event.
    """
    from .me_model import design_matrix

    events = {}
    for k in fit.event_types:
        arrays = _event_arrays(data, k)
        ef = fit.events[k]
        design = design_matrix(arrays, ef.spec)
        if np.any(arrays.present & ~np.isfinite(design).all(axis=2)):
            raise DataError(f"event {k}: predictor missing at a required grid time")
        h = expit(design @ ef.gamma)
        events[k] = compute_event_weights(arrays, h, design=design)
    return WeightTable(events=events)


def degenerate_weights(data):
    """Weight table with h in {0, 1} reproducing the true counting process.

    h is 1 exactly at the first grid time with true status 1 and 0
    elsewhere, so the weights equal the observed event indicators and the
    at-risk probabilities equal the classical at-risk indicators.
    """
    events = {}
    for k in _event_types(data):
        arrays = _event_arrays(data, k)
        if arrays.true_status is None:
            raise DataError("degenerate weights require true_status paths")
        status = arrays.true_status * arrays.present
        ever = status.any(axis=1)
        first = np.argmax(status > 0, axis=1)
        h = np.zeros_like(status, dtype=float)
        h[np.nonzero(ever)[0], first[ever]] = 1.0
        events[k] = compute_event_weights(arrays, h)
    return WeightTable(events=events)


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
