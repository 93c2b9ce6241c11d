"""Result containers shared by the standard and weighted estimators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from ._newton import SolveInfo


@dataclass
class FitResult:
    """Per-event coefficient estimates with an optional stacked covariance.

    ``betas[j]`` holds the coefficients of event type j+1; ``cov`` (when
    set) is the covariance of the stacked vector ``beta``.
    """

    betas: list
    cov: np.ndarray | None
    diagnostics: list
    ties: str = "breslow"
    method: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def n_events(self):
        return len(self.betas)

    @property
    def dims(self):
        return [b.shape[0] for b in self.betas]

    @property
    def beta(self):
        return np.concatenate(self.betas)

    @property
    def se(self):
        if self.cov is None:
            raise ValueError("no covariance attached to this fit")
        return np.sqrt(np.diag(self.cov))

    def block(self, k, k2=None):
        """Covariance block between events ``k`` and ``k2`` (1-based)."""
        if self.cov is None:
            raise ValueError("no covariance attached to this fit")
        offsets = np.concatenate([[0], np.cumsum(self.dims)])
        k2 = k if k2 is None else k2
        return self.cov[offsets[k - 1]:offsets[k], offsets[k2 - 1]:offsets[k2]]

    def first_components(self):
        """Per-event first coefficients and their K x K covariance."""
        if self.cov is None:
            raise ValueError("no covariance attached to this fit")
        offsets = np.concatenate([[0], np.cumsum(self.dims)]).astype(int)[:-1]
        b = self.beta[offsets]
        V = self.cov[np.ix_(offsets, offsets)]
        return b, V

    def ci95(self):
        z = norm.ppf(0.975)
        se = self.se
        b = self.beta
        return np.column_stack([b - z * se, b + z * se])

    def hazard_ratios(self):
        ci = self.ci95()
        return np.exp(self.beta), np.exp(ci)

    def converged(self):
        return all(d.converged for d in self.diagnostics)


def make_diagnostics(infos):
    return [d if isinstance(d, SolveInfo) else SolveInfo(*d) for d in infos]
