"""Damped Newton ascent shared by the logistic and partial-likelihood solvers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConvergenceError


@dataclass
class SolveInfo:
    converged: bool
    iterations: int
    score_norm: float


def newton_solve(fun, init, tol=1e-9, rel_tol=1e-10, max_iter=100, max_halvings=25,
                 divergence=50.0):
    """Maximize a concave objective by Newton's method with step halving.

    Parameters
    ----------
    fun : callable
        ``fun(x) -> (value, score, neg_hessian)`` with ``neg_hessian``
        positive (semi)definite at the optimum.
    init : ndarray
        Starting point.
    tol : float
        Convergence on the score sup-norm.
    rel_tol : float
        Convergence on the relative coefficient change.
    divergence : float
        Hard bound on the coefficient sup-norm.

    Returns
    -------
    (x, SolveInfo)
    """
    x = np.asarray(init, dtype=float).copy()
    value, score, neg_hess = fun(x)
    for it in range(max_iter):
        norm = float(np.max(np.abs(score))) if score.size else 0.0
        if norm < tol:
            return x, SolveInfo(True, it, norm)
        try:
            step = np.linalg.solve(neg_hess, score)
        except np.linalg.LinAlgError:
            raise ConvergenceError("singular information matrix") from None
        scale = 1.0
        for _ in range(max_halvings + 1):
            x_new = x + scale * step
            new_value, new_score, new_hess = fun(x_new)
            if np.isfinite(new_value) and new_value >= value - 1e-13 * (1.0 + abs(value)):
                break
            scale *= 0.5
        else:
            raise ConvergenceError("step-halving exhausted without improving the objective")
        moved = float(np.max(np.abs(x_new - x)))
        x, value, score, neg_hess = x_new, new_value, new_score, new_hess
        if np.max(np.abs(x)) > divergence:
            raise ConvergenceError(
                f"coefficients diverged (sup-norm exceeds {divergence})"
            )
        if moved < rel_tol * (1.0 + float(np.max(np.abs(x)))):
            norm = float(np.max(np.abs(score)))
            return x, SolveInfo(True, it + 1, norm)
    norm = float(np.max(np.abs(score)))
    raise ConvergenceError(f"no convergence in {max_iter} iterations (score norm {norm:.3g})")
