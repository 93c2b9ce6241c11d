"""Study data model: long-format CSV ingestion, invariant checks, dense per-event arrays.

The canonical interchange format is a long CSV with one row per
(subject, event type, questionnaire time):

    subject_id,event_type,time,self_report,censor_time,z_1..z_p,w_1..w_q[,true_status]

``event_type`` is a 1-based integer label in 1..K.  Validation files
additionally carry ``true_status``.  Within a (subject, event) group the
times must be strictly increasing, positive, and exact multiples of the
declared time unit so that tie detection downstream is exact.  The time
origin t=0 is implicit and never appears as a grid row.

Estimators do not walk the record objects; they consume the dense
:class:`EventArrays` view (one per event type) in which every subject is a
row on the union time grid, with a presence mask for subjects whose own
grid omits some times.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .exceptions import DataError

REQUIRED_COLUMNS = ("subject_id", "event_type", "time", "self_report", "censor_time")

ROLES = ("main", "validation")
DESIGNS = ("MS/EVS", "MS/IVS")


@dataclass(frozen=True)
class QuestionnaireGrid:
    """Ordered potential event times for one subject and event type."""

    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size == 0:
            raise DataError("questionnaire grid must be a non-empty 1-d sequence")
        if np.any(t <= 0):
            raise DataError("questionnaire times must be strictly positive (t=0 is implicit)")
        if np.any(np.diff(t) <= 0):
            raise DataError("questionnaire times must be strictly increasing")
        object.__setattr__(self, "times", t)

    @property
    def with_origin(self):
        """Grid augmented with the implicit time origin t=0."""
        return np.concatenate([[0.0], self.times])

    def __len__(self):
        return self.times.size


@dataclass
class EventPath:
    """One subject's data for a single event type."""

    grid: QuestionnaireGrid
    censor_time: float
    self_report: np.ndarray              # 0/1 per grid time, monotone
    covariates: np.ndarray               # (T, p) regression covariates
    me_predictors: np.ndarray            # (T, q) raw error-model predictor columns
    true_status: np.ndarray | None = None  # 0/1 per grid time, validation only

    def __post_init__(self):
        T = len(self.grid)
        self.self_report = _monotone_path(self.self_report, T, "self_report")
        if self.true_status is not None:
            self.true_status = _monotone_path(self.true_status, T, "true_status")
        self.covariates = _path_matrix(self.covariates, T, "covariates")
        self.me_predictors = _path_matrix(self.me_predictors, T, "me_predictors")
        if not np.isfinite(self.censor_time) or self.censor_time <= 0:
            raise DataError(f"censor_time must be positive, got {self.censor_time}")


@dataclass
class SubjectRecord:
    """All per-event paths for one study participant."""

    subject_id: str
    events: dict[int, EventPath]


@dataclass
class StudyDataset:
    """A main or validation study: a list of subjects sharing K event types."""

    subjects: list[SubjectRecord]
    n_events: int
    role: str
    design: str | None = None
    time_unit: float = 1.0

    def __post_init__(self):
        if self.role not in ROLES:
            raise DataError(f"role must be one of {ROLES}, got {self.role!r}")
        if self.design is not None and self.design not in DESIGNS:
            raise DataError(f"design must be one of {DESIGNS}, got {self.design!r}")
        if self.role == "validation":
            for rec in self.subjects:
                for k, path in rec.events.items():
                    if path.true_status is None:
                        raise DataError(
                            f"validation dataset requires true_status paths "
                            f"(missing for subject {rec.subject_id}, event {k})"
                        )

    @property
    def n_subjects(self):
        return len(self.subjects)

    @property
    def event_types(self):
        return list(range(1, self.n_events + 1))

    def event_arrays(self, k):
        """Dense array view for event type ``k`` (1-based)."""
        return _build_event_arrays(self, k)


@dataclass
class EventArrays:
    """Dense per-event view of a dataset on the union questionnaire grid.

    Cells where ``present`` is False are padding: hazard probabilities are
    forced to zero there, so cumulative products over a subject's own grid
    are unaffected.
    """

    times: np.ndarray          # (T,) union grid, strictly increasing
    present: np.ndarray        # (n, T) bool: t is on the subject's own grid
    censor: np.ndarray         # (n,)
    covariates: np.ndarray     # (n, T, p)
    me_predictors: np.ndarray  # (n, T, q)
    self_report: np.ndarray    # (n, T) 0/1
    true_status: np.ndarray | None  # (n, T) 0/1, validation only
    subject_ids: list = field(default_factory=list)

    @property
    def n_subjects(self):
        return self.present.shape[0]

    @property
    def n_times(self):
        return self.times.size

    @property
    def observed(self):
        """(n, T) mask of potential event times under observation (C >= t)."""
        return self.present & (self.times[None, :] <= self.censor[:, None])

    def first_event_time(self):
        """Discretized true event data: (time, status) per subject.

        The event time is the first grid time with true status 1, provided
        it is not after the censoring time; otherwise the subject is
        censored at C.
        """
        if self.true_status is None:
            raise DataError("true_status paths are required")
        return _first_event(self.true_status, self.present, self.times, self.censor)

    def first_report_time(self):
        """Discretized self-reported event data: (time, status) per subject."""
        return _first_event(self.self_report, self.present, self.times, self.censor)

    def subset(self, indices):
        """New view restricted to the given subject positions."""
        idx = np.asarray(indices)
        return EventArrays(
            times=self.times,
            present=self.present[idx],
            censor=self.censor[idx],
            covariates=self.covariates[idx],
            me_predictors=self.me_predictors[idx],
            self_report=self.self_report[idx],
            true_status=None if self.true_status is None else self.true_status[idx],
            subject_ids=[self.subject_ids[i] for i in idx] if self.subject_ids else [],
        )


def _first_event(status, present, times, censor):
    hit = (status == 1) & present & (times[None, :] <= censor[:, None])
    any_hit = hit.any(axis=1)
    first_idx = np.argmax(hit, axis=1)
    time = np.where(any_hit, times[first_idx], censor)
    return time, any_hit.astype(float)


def _monotone_path(path, T, name):
    a = np.asarray(path, dtype=float)
    if a.shape != (T,):
        raise DataError(f"{name} path must have one entry per grid time")
    if not np.isin(a, (0.0, 1.0)).all():
        raise DataError(f"{name} entries must be 0 or 1")
    if np.any(np.diff(a) < 0):
        raise DataError(f"{name} path must be monotone nondecreasing over time")
    return a


def _path_matrix(x, T, name):
    a = np.asarray(x, dtype=float)
    if a.ndim == 1:
        a = a.reshape(T, -1) if a.size == T else a.reshape(T, 0)
    if a.shape[0] != T:
        raise DataError(f"{name} must have one row per grid time")
    if not np.isfinite(a).all():
        raise DataError(f"{name} contains missing or non-finite values")
    return a


def _build_event_arrays(dataset, k):
    paths = []
    ids = []
    for rec in dataset.subjects:
        if k in rec.events:
            paths.append(rec.events[k])
            ids.append(rec.subject_id)
    if not paths:
        raise DataError(f"no subjects carry event type {k}")
    times = np.unique(np.concatenate([p.grid.times for p in paths]))
    n, T = len(paths), times.size
    p_dim = paths[0].covariates.shape[1]
    q_dim = paths[0].me_predictors.shape[1]
    present = np.zeros((n, T), dtype=bool)
    censor = np.zeros(n)
    Z = np.zeros((n, T, p_dim))
    W = np.zeros((n, T, q_dim))
    sr = np.zeros((n, T))
    has_truth = all(p.true_status is not None for p in paths)
    ts = np.zeros((n, T)) if has_truth else None
    for i, path in enumerate(paths):
        idx = np.searchsorted(times, path.grid.times)
        if path.covariates.shape[1] != p_dim or path.me_predictors.shape[1] != q_dim:
            raise DataError(f"covariate dimension differs across subjects for event {k}")
        present[i, idx] = True
        censor[i] = path.censor_time
        Z[i, idx] = path.covariates
        W[i, idx] = path.me_predictors
        sr[i, idx] = path.self_report
        if has_truth:
            ts[i, idx] = path.true_status
    return EventArrays(times, present, censor, Z, W, sr, ts, ids)


def _round_trip_times(times, unit):
    idx = np.round(np.asarray(times, dtype=float) / unit)
    back = idx * unit
    bad = np.abs(back - times) > 1e-9 * np.maximum(1.0, np.abs(times))
    if np.any(bad):
        raise DataError(
            f"times {np.asarray(times)[bad][:5]} are not exact multiples of the "
            f"declared unit {unit}; tie handling requires exact grid times"
        )
    return back


def load_study(path, role, schema=None):
    """Load a long-format study CSV.

    Parameters
    ----------
    path : str or file-like
        CSV with the canonical columns (see module docstring).
    role : str
        ``"main"`` or ``"validation"``; validation requires ``true_status``.
    schema : dict, optional
        Overrides: ``time_unit`` (default 1.0) and column-name remapping
        for any of the required columns, e.g. ``{"subject_id": "id"}``.

    Returns
    -------
    StudyDataset
    """
    schema = dict(schema or {})
    unit = float(schema.pop("time_unit", 1.0))
    rename = {v: k for k, v in schema.items()}

    try:
        df = pd.read_csv(path)
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except pd.errors.EmptyDataError:
        raise DataError(f"file is empty: {path}") from None
    if rename:
        df = df.rename(columns=rename)
    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"missing required columns: {missing}")
    if role not in ROLES:
        raise DataError(f"role must be one of {ROLES}, got {role!r}")
    if role == "validation" and "true_status" not in df.columns:
        raise DataError("validation file lacks the true_status column")
    if df.empty:
        raise DataError("file contains no data rows")

    z_cols = _indexed_columns(df, "z")
    w_cols = _indexed_columns(df, "w")
    value_cols = list(REQUIRED_COLUMNS) + z_cols + w_cols
    if role == "validation" or "true_status" in df.columns:
        value_cols.append("true_status")
    if df[value_cols].isna().any().any():
        bad = [c for c in value_cols if df[c].isna().any()]
        raise DataError(f"missing values are not imputed; found NaN in columns {bad}")

    if df.duplicated(subset=["subject_id", "event_type", "time"]).any():
        dup = df[df.duplicated(subset=["subject_id", "event_type", "time"], keep=False)]
        raise DataError(
            f"duplicate (subject, event, time) rows, e.g. "
            f"{dup[['subject_id', 'event_type', 'time']].iloc[0].tolist()}"
        )

    event_labels = df["event_type"].to_numpy()
    if not np.array_equal(event_labels, event_labels.astype(int)):
        raise DataError("event_type must be integer")
    n_events = int(event_labels.max())
    if event_labels.min() < 1:
        raise DataError("event_type labels must be 1-based")

    df = df.copy()
    df["time"] = _round_trip_times(df["time"].to_numpy(), unit)

    subjects = []
    has_truth = "true_status" in df.columns
    # groupby(sort=False) keeps first-appearance order of subjects
    for sid, sub in df.groupby("subject_id", sort=False):
        events = {}
        for k, grp in sub.groupby("event_type", sort=True):
            grp = grp.sort_values("time")
            censor = grp["censor_time"].to_numpy()
            if not np.all(censor == censor[0]):
                raise DataError(f"censor_time varies within subject {sid}, event {k}")
            try:
                events[int(k)] = EventPath(
                    grid=QuestionnaireGrid(grp["time"].to_numpy()),
                    censor_time=float(censor[0]),
                    self_report=grp["self_report"].to_numpy(),
                    covariates=grp[z_cols].to_numpy() if z_cols else np.zeros((len(grp), 0)),
                    me_predictors=grp[w_cols].to_numpy() if w_cols else np.zeros((len(grp), 0)),
                    true_status=grp["true_status"].to_numpy() if has_truth else None,
                )
            except DataError as err:
                raise DataError(f"subject {sid}, event {k}: {err}") from None
        subjects.append(SubjectRecord(subject_id=str(sid), events=events))

    return StudyDataset(subjects=subjects, n_events=n_events, role=role, time_unit=unit)


def write_study(dataset, path):
    """Write a dataset back to the canonical long CSV."""
    rows = []
    for rec in dataset.subjects:
        for k in sorted(rec.events):
            ep = rec.events[k]
            for j, t in enumerate(ep.grid.times):
                row = {
                    "subject_id": rec.subject_id,
                    "event_type": k,
                    "time": t,
                    "self_report": int(ep.self_report[j]),
                    "censor_time": ep.censor_time,
                }
                for c in range(ep.covariates.shape[1]):
                    row[f"z_{c + 1}"] = ep.covariates[j, c]
                for c in range(ep.me_predictors.shape[1]):
                    row[f"w_{c + 1}"] = ep.me_predictors[j, c]
                if ep.true_status is not None:
                    row["true_status"] = int(ep.true_status[j])
                rows.append(row)
    pd.DataFrame(rows).to_csv(path, index=False)


def frame_from_arrays(arrays_map, include_truth=True):
    """Long-format DataFrame from dense per-event arrays (e.g. simulated data)."""
    frames = []
    for k in sorted(arrays_map):
        arr = arrays_map[k]
        ids = arr.subject_ids or [str(i) for i in range(arr.n_subjects)]
        i_idx, t_idx = np.nonzero(arr.present)
        block = {
            "subject_id": [ids[i] for i in i_idx],
            "event_type": k,
            "time": arr.times[t_idx],
            "self_report": arr.self_report[i_idx, t_idx].astype(int),
            "censor_time": arr.censor[i_idx],
        }
        for c in range(arr.covariates.shape[2]):
            block[f"z_{c + 1}"] = arr.covariates[i_idx, t_idx, c]
        for c in range(arr.me_predictors.shape[2]):
            block[f"w_{c + 1}"] = arr.me_predictors[i_idx, t_idx, c]
        if include_truth and arr.true_status is not None:
            block["true_status"] = arr.true_status[i_idx, t_idx].astype(int)
        frames.append(pd.DataFrame(block))
    df = pd.concat(frames, ignore_index=True)
    return df.sort_values(["subject_id", "event_type", "time"],
                          kind="stable").reset_index(drop=True)


def _indexed_columns(df, prefix):
    cols = []
    for c in df.columns:
        if c.startswith(prefix + "_"):
            suffix = c[len(prefix) + 1:]
            if suffix.isdigit():
                cols.append((int(suffix), c))
    return [c for _, c in sorted(cols)]


@dataclass
class EventSummary:
    event_type: int
    n_subjects: int
    n_self_reported: int
    n_true_events: int | None
    censored_fraction: float
    covariate_dim: int
    me_predictor_dim: int


@dataclass
class ValidationReport:
    """Report-only health check of a dataset; never raises."""

    per_event: list[EventSummary]
    violations: list[str]

    @property
    def ok(self):
        return not self.violations

    def __str__(self):
        lines = []
        for s in self.per_event:
            truth = "n/a" if s.n_true_events is None else str(s.n_true_events)
            lines.append(
                f"event {s.event_type}: {s.n_subjects} subjects, "
                f"{s.n_self_reported} self-reported cases, {truth} true cases, "
                f"{s.censored_fraction:.1%} self-report-censored, "
                f"p={s.covariate_dim}, q={s.me_predictor_dim}"
            )
        if self.violations:
            lines.append("violations:")
            lines.extend(f"  - {v}" for v in self.violations)
        else:
            lines.append("no violations")
        return "\n".join(lines)


def check_dataset(dataset):
    """Summarize a dataset and list invariant violations without raising."""
    violations = []
    per_event = []
    expected = set(dataset.event_types)
    for rec in dataset.subjects:
        missing = expected - set(rec.events)
        if missing:
            violations.append(
                f"subject {rec.subject_id} lacks event types {sorted(missing)} "
                f"(dataset declares K={dataset.n_events})"
            )
        extra = set(rec.events) - expected
        if extra:
            violations.append(
                f"subject {rec.subject_id} carries undeclared event types {sorted(extra)}"
            )
        if dataset.role == "validation":
            for k, ep in rec.events.items():
                if ep.true_status is None:
                    violations.append(
                        f"subject {rec.subject_id}, event {k}: validation role "
                        f"without true_status path"
                    )

    for k in dataset.event_types:
        try:
            arrs = dataset.event_arrays(k)
        except DataError as err:
            violations.append(f"event {k}: {err}")
            continue
        _, rep_status = arrs.first_report_time()
        n_true = None
        if arrs.true_status is not None:
            _, true_status = arrs.first_event_time()
            n_true = int(true_status.sum())
        if np.all(arrs.censor < arrs.times[0]):
            violations.append(f"event {k}: all censored before first questionnaire")
        per_event.append(
            EventSummary(
                event_type=k,
                n_subjects=arrs.n_subjects,
                n_self_reported=int(rep_status.sum()),
                n_true_events=n_true,
                censored_fraction=float(1.0 - rep_status.mean()),
                covariate_dim=arrs.covariates.shape[2],
                me_predictor_dim=arrs.me_predictors.shape[2],
            )
        )
    return ValidationReport(per_event=per_event, violations=violations)
