"""Monte Carlo harness: correlated event times, misclassified self-reports,
and full estimation replicates with bias/coverage summaries.

Event-time pairs come from the Gumbel bivariate exponential
F(t1, t2) = F1 F2 [1 + theta (1-F1)(1-F2)] with exponential marginals and
corr(T1, T2) = theta/4, sampled by conditional inversion.  Self-reports
follow a per-questionnaire logistic misclassifier calibrated to a target
sensitivity and specificity, with reports absorbing (once reported,
always reported).  Each replicate draws a main study (plus the validation
study its design needs), runs the naive and corrected estimators, and
records estimates, model standard errors, and CI coverage indicators.

Replicates use independent counter-based RNG substreams
(philox4x64 keyed by [seed, replicate]), so results are independent of
execution order and thread count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logit
from scipy.stats import norm

from .cox import fit_wlw
from .data import EventArrays
from .exceptions import ConvergenceError, DataError, MewlwError
from .inference import fit_evs, fit_ivs_full, fit_ivs_pooled
from .me_model import MeModelSpec

RNG_SCHEME = "philox4x64(key=[seed, replicate])"
DESIGNS = ("evs", "ivs", "both")
METHOD_ORDER = ("naive", "corrected", "full_calibration", "pooled")
Z975 = norm.ppf(0.975)


@dataclass(frozen=True)
class SimConfig:
    """Generator and estimation settings for one simulation scenario."""

    theta: float = 1.0
    baseline_hazards: tuple = (1.0 / 7.0, 1.0 / 7.0)
    beta: tuple = (math.log(1.25), math.log(1.5))
    sens: float = 0.9
    spec: float = 0.9
    n_main: int = 1000
    n_valid: int = 100
    design: str = "evs"
    grid: tuple = (1.0, 3.0, 5.0, 7.0)
    censor_time: float | None = None
    p_exposure: float = 0.5
    ties: str = "efron"
    replicates: int = 1000
    seed: int = 7

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise DataError("theta must lie in [0, 1]")
        if any(h <= 0 for h in self.baseline_hazards):
            raise DataError("baseline hazards must be positive")
        if not (0.0 < self.sens < 1.0 and 0.0 < self.spec < 1.0):
            raise DataError("sensitivity and specificity must lie in (0, 1)")
        if self.design not in DESIGNS:
            raise DataError(f"design must be one of {DESIGNS}")
        if self.n_main <= 0 or self.n_valid <= 0:
            raise DataError("sample sizes must be positive")
        if self.replicates <= 0:
            raise DataError("replicate count must be positive")
        if self.seed < 0:
            raise DataError("seed must be nonnegative")
        if list(self.grid) != sorted(set(self.grid)) or min(self.grid) <= 0:
            raise DataError("grid times must be positive and strictly increasing")
        if not 0.0 < self.p_exposure < 1.0:
            raise DataError("exposure prevalence must lie in (0, 1)")
        if self.ties not in ("breslow", "efron"):
            raise DataError("ties must be 'breslow' or 'efron'")

    @property
    def admin_censor(self):
        return self.grid[-1] if self.censor_time is None else self.censor_time

    @property
    def rho(self):
        return self.n_valid / self.n_main

    def methods(self):
        if self.design == "evs":
            return ["naive", "corrected"]
        if self.design == "ivs":
            return ["naive", "full_calibration", "pooled"]
        return list(METHOD_ORDER)

    @classmethod
    def from_text(cls, text):
        """Parse a declarative ``key = value`` configuration."""
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"config line {lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            values[key.strip().lower()] = val.strip()
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values):
        values = dict(values)
        kwargs = {}

        def pop_float(name):
            if name in values:
                kwargs[name] = float(values.pop(name))

        def pop_int(name, alias=None):
            for key in filter(None, (name, alias)):
                if key in values:
                    kwargs[name] = int(values.pop(key))

        pop_float("theta")
        if "baseline_hazards" in values:
            kwargs["baseline_hazards"] = tuple(
                float(x) for x in values.pop("baseline_hazards").split(","))
        elif "baseline_hazard" in values:
            h = float(values.pop("baseline_hazard"))
            kwargs["baseline_hazards"] = (h, h)
        if "beta" in values:
            kwargs["beta"] = tuple(float(x) for x in values.pop("beta").split(","))
        else:
            b1 = values.pop("beta1", None)
            b2 = values.pop("beta2", None)
            if (b1 is None) != (b2 is None):
                raise DataError("provide both beta1 and beta2 (or a single beta list)")
            if b1 is not None:
                kwargs["beta"] = (float(b1), float(b2))
        pop_float("sens")
        pop_float("spec")
        pop_int("n_main")
        rho = values.pop("rho", None)
        pop_int("n_valid")
        if "design" in values:
            kwargs["design"] = values.pop("design").lower()
        if "grid" in values:
            kwargs["grid"] = tuple(float(x) for x in values.pop("grid").split(","))
        if "censor_time" in values:
            kwargs["censor_time"] = float(values.pop("censor_time"))
        pop_float("p_exposure")
        if "ties" in values:
            kwargs["ties"] = values.pop("ties").lower()
        pop_int("replicates", alias="reps")
        pop_int("seed")
        if values:
            raise DataError(f"unknown config keys: {sorted(values)}")
        cfg = cls(**kwargs)
        if rho is not None:
            if "n_valid" in kwargs:
                raise DataError("give either rho or n_valid, not both")
            cfg = replace(cfg, n_valid=int(round(float(rho) * cfg.n_main)))
        return cfg


def replicate_rng(seed, replicate):
    """Independent substream for one replicate (counter-based, order-free)."""
    key = np.array([seed, replicate], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def gumbel_sample(theta, lam1, lam2, rng, size=None):
    """Draw (T1, T2) from the Gumbel bivariate exponential.

    ``lam1``/``lam2`` are marginal hazard rates (scalars or arrays).  The
    second coordinate comes from inverting the conditional distribution
    given U1 = F1(T1): with a = theta (1 - 2 U1), the conditional CDF is
    the smaller root of a F^2 - (1+a) F + v = 0 (F = v when a = 0).
    """
    lam1 = np.asarray(lam1, dtype=float)
    lam2 = np.asarray(lam2, dtype=float)
    if size is None:
        size = np.broadcast(lam1, lam2).shape or None
    u1 = rng.random(size)
    v = rng.random(size)
    a = theta * (1.0 - 2.0 * u1)
    disc = np.sqrt((1.0 + a) ** 2 - 4.0 * a * v)
    u2 = 2.0 * v / ((1.0 + a) + disc)
    t1 = -np.log1p(-u1) / lam1
    t2 = -np.log1p(-u2) / lam2
    return t1, t2


def gumbel_cdf(t1, t2, theta, lam1, lam2):
    """Closed-form joint CDF of the Gumbel bivariate exponential."""
    f1 = -np.expm1(-lam1 * np.asarray(t1, float))
    f2 = -np.expm1(-lam2 * np.asarray(t2, float))
    return f1 * f2 * (1.0 + theta * (1.0 - f1) * (1.0 - f2))


def sens_spec_to_alpha(sens, spec):
    """Logistic misclassifier intercept/slope hitting the target rates.

    Per questionnaire: P(report | no true event) = 1 - spec and
    P(report | true event) = sens.
    """
    a0 = float(logit(1.0 - spec))
    a1 = float(logit(sens) - a0)
    return a0, a1


def gen_self_report(true_path, alpha0, alpha1, rng):
    """Absorbing self-report paths from true status paths.

    At each questionnaire the unreported draw a Bernoulli with logistic
    probability alpha0 + alpha1 * delta(t); once reported, the report
    sticks.
    """
    path = np.asarray(true_path, dtype=float)
    squeeze = path.ndim == 1
    if squeeze:
        path = path[None, :]
    n, T = path.shape
    out = np.zeros((n, T))
    reported = np.zeros(n, dtype=bool)
    for t in range(T):
        p = expit(alpha0 + alpha1 * path[:, t])
        reported |= rng.random(n) < p
        out[:, t] = reported
    return out[0] if squeeze else out


def generate_study(config, n, rng, id_prefix="s"):
    """One simulated study as a mapping of event type -> EventArrays."""
    grid = np.asarray(config.grid, dtype=float)
    T = grid.size
    z = (rng.random(n) < config.p_exposure).astype(float)
    lam1 = config.baseline_hazards[0] * np.exp(config.beta[0] * z)
    lam2 = config.baseline_hazards[1] * np.exp(config.beta[1] * z)
    t1, t2 = gumbel_sample(config.theta, lam1, lam2, rng)
    a0, a1 = sens_spec_to_alpha(config.sens, config.spec)
    ids = [f"{id_prefix}{i}" for i in range(n)]
    out = {}
    for k, tk in enumerate((t1, t2), start=1):
        true = (tk[:, None] <= grid[None, :]).astype(float)
        sr = gen_self_report(true, a0, a1, rng)
        out[k] = EventArrays(
            times=grid,
            present=np.ones((n, T), dtype=bool),
            censor=np.full(n, config.admin_censor),
            covariates=np.broadcast_to(z[:, None, None], (n, T, 1)).copy(),
            me_predictors=np.zeros((n, T, 0)),
            self_report=sr,
            true_status=true,
            subject_ids=ids,
        )
    return out


ME_SPEC = MeModelSpec(predictors=("self_report", "z", "time"), intercept=True)


@dataclass
class ReplicateOutcome:
    """Per-method estimates, model SEs, and CI coverage for one replicate."""

    replicate: int
    ok: bool
    methods: dict = field(default_factory=dict)
    error: str | None = None


def _record(fit_like, truth):
    beta = fit_like.beta
    se = np.sqrt(np.diag(fit_like.cov))
    lo = beta - Z975 * se
    hi = beta + Z975 * se
    cover = (lo <= truth) & (truth <= hi)
    return {"beta": beta, "se": se, "cover": cover}


def run_replicate(config, replicate):
    """Generate one dataset per the design and run every estimator on it."""
    rng = replicate_rng(config.seed, replicate)
    truth = np.asarray(config.beta, dtype=float)
    methods = {}
    try:
        main = generate_study(config, config.n_main, rng, id_prefix="s")
        external = None
        if config.design in ("evs", "both"):
            external = generate_study(config, config.n_valid, rng, id_prefix="v")
        naive = fit_wlw(main, outcome="self_report", ties=config.ties)
        methods["naive"] = _record(naive, truth)
        if config.design in ("evs", "both"):
            corrected = fit_evs(main, external, specs=ME_SPEC, ties=config.ties)
            methods["corrected"] = _record(corrected.fit, truth)
        if config.design in ("ivs", "both"):
            internal = {k: arr.subset(range(config.n_valid)) for k, arr in main.items()}
            full = fit_ivs_full(main, internal, specs=ME_SPEC, ties=config.ties)
            methods["full_calibration"] = _record(full.fit, truth)
            pooled = fit_ivs_pooled(main, internal, specs=ME_SPEC, ties=config.ties)
            methods["pooled"] = _record(pooled.fit, truth)
    except (DataError, ConvergenceError, MewlwError) as err:
        return ReplicateOutcome(replicate=replicate, ok=False, error=str(err))
    return ReplicateOutcome(replicate=replicate, ok=True, methods=methods)


@dataclass
class SummaryRow:
    method: str
    param: str
    true: float
    mean: float
    pct_bias: float
    emp_se: float
    model_se: float
    coverage: float


@dataclass
class SimulationResult:
    config: SimConfig
    outcomes: list
    rows: list
    n_failed: int
    rng_scheme: str = RNG_SCHEME

    def to_csv(self, path):
        lines = ["method,param,true,mean,pct_bias,emp_se,model_se,coverage"]
        for r in self.rows:
            lines.append(
                f"{r.method},{r.param},{r.true:.10g},{r.mean:.10g},"
                f"{r.pct_bias:.10g},{r.emp_se:.10g},{r.model_se:.10g},"
                f"{r.coverage:.10g}"
            )
        text = "\n".join(lines) + "\n"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        return text


def summarize(outcomes, truth):
    """Bias, empirical and mean model SE, and coverage per method and coefficient."""
    truth = np.asarray(truth, dtype=float)
    used = [o for o in outcomes if o.ok]
    if not used:
        raise DataError("no successful replicates to summarize")
    rows = []
    method_names = [m for m in METHOD_ORDER if m in used[0].methods]
    for method in method_names:
        beta = np.array([o.methods[method]["beta"] for o in used])
        se = np.array([o.methods[method]["se"] for o in used])
        cover = np.array([o.methods[method]["cover"] for o in used])
        mean = beta.mean(axis=0)
        emp = beta.std(axis=0, ddof=1) if len(used) > 1 else np.zeros_like(mean)
        for j in range(truth.size):
            rows.append(SummaryRow(
                method=method,
                param=f"beta_{j + 1}",
                true=float(truth[j]),
                mean=float(mean[j]),
                pct_bias=float(100.0 * (mean[j] - truth[j]) / truth[j]),
                emp_se=float(emp[j]),
                model_se=float(se[:, j].mean()),
                coverage=float(cover[:, j].mean()),
            ))
    return rows


def run_simulation(config, threads=1, progress=None):
    """Run all replicates (optionally in parallel) and summarize.

    The per-replicate substreams make the result identical for any thread
    count.
    """
    total = config.replicates
    step = max(1, total // 20)
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = []
            for o in pool.map(lambda r: run_replicate(config, r), range(total)):
                outcomes.append(o)
                if progress and len(outcomes) % step == 0:
                    progress(len(outcomes), total)
    else:
        outcomes = []
        for r in range(total):
            outcomes.append(run_replicate(config, r))
            if progress and (r + 1) % step == 0:
                progress(r + 1, total)
    n_failed = sum(1 for o in outcomes if not o.ok)
    rows = summarize(outcomes, config.beta)
    return SimulationResult(config=config, outcomes=outcomes, rows=rows,
                            n_failed=n_failed)
