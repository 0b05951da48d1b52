"""Bounded nonlinear least squares via damped Levenberg-Marquardt.

Box constraints are enforced through a logistic reparameterization: each
bounded parameter x in (lo, hi) is optimized as the unconstrained
z = logit((x - lo) / (hi - lo)).  Parameters with lo == hi are held fixed.
The damped normal equations remain solvable when the residual count is
below the free-parameter count, so short data series still return a
best-effort fit instead of failing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from .errors import InvalidInputError

MAX_ITERATIONS = 500
REL_SSE_TOL = 1e-10
_INTERIOR_CLIP = 1e-3


@dataclass
class LMResult:
    x: np.ndarray
    sse: float
    n_iterations: int
    converged: bool


class BoundedTransform:
    """Maps between bounded x-space and unconstrained z-space."""

    def __init__(self, lower, upper):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if self.lower.shape != self.upper.shape:
            raise InvalidInputError("bound arrays must have matching shapes")
        if np.any(self.upper < self.lower):
            bad = int(np.argmax(self.upper < self.lower))
            raise InvalidInputError(
                f"malformed bounds at index {bad}: lo={self.lower[bad]} > hi={self.upper[bad]}")
        self.free = self.upper > self.lower
        self.span = self.upper - self.lower

    @property
    def n_free(self) -> int:
        return int(self.free.sum())

    def to_unconstrained(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        frac = np.zeros_like(x)
        f = self.free
        frac[f] = (x[f] - self.lower[f]) / self.span[f]
        frac = np.clip(frac, _INTERIOR_CLIP, 1.0 - _INTERIOR_CLIP)
        return logit(frac[f])

    def to_bounded(self, z) -> np.ndarray:
        x = self.lower.copy()
        x[self.free] = self.lower[self.free] + self.span[self.free] * expit(z)
        return x


def _jacobian(fun, z, r0):
    n = z.size
    jac = np.empty((r0.size, n))
    for j in range(n):
        step = 1e-7 * max(1.0, abs(z[j]))
        zp = z.copy()
        zp[j] += step
        jac[:, j] = (fun(zp) - r0) / step
    return jac


def levenberg_marquardt(fun, z0, max_iterations=MAX_ITERATIONS,
                        rel_sse_tol=REL_SSE_TOL) -> LMResult:
    """Minimize ||fun(z)||^2 over unconstrained z.

    Accepts any residual count (damping keeps the normal equations
    non-singular).  Convergence: relative SSE decrease of an accepted step
    below ``rel_sse_tol``, an exactly-zero SSE, or a vanishing gradient.
    """
    z = np.asarray(z0, dtype=float).copy()
    if z.size == 0:
        r = np.asarray(fun(z), dtype=float)
        return LMResult(x=z, sse=float(r @ r), n_iterations=0, converged=True)

    r = np.asarray(fun(z), dtype=float)
    sse = float(r @ r)
    mu = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iterations + 1):
        if sse <= 1e-300:
            converged = True
            break
        jac = _jacobian(fun, z, r)
        g = jac.T @ r
        if np.linalg.norm(g, ord=np.inf) < 1e-12 * max(1.0, sse):
            converged = True
            break
        h = jac.T @ jac
        diag = np.diag(h).copy()
        diag[diag <= 0] = 1e-12
        accepted = False
        for _ in range(30):
            try:
                step = np.linalg.solve(h + mu * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            z_new = z + step
            r_new = np.asarray(fun(z_new), dtype=float)
            if not np.all(np.isfinite(r_new)):
                mu *= 10.0
                continue
            sse_new = float(r_new @ r_new)
            if sse_new < sse:
                accepted = True
                break
            mu *= 4.0
        if not accepted:
            # damping exhausted without descent: local minimum to precision
            converged = True
            break
        rel_drop = (sse - sse_new) / max(sse, 1e-300)
        z, r, sse = z_new, r_new, sse_new
        mu = max(mu / 3.0, 1e-12)
        if rel_drop < rel_sse_tol:
            converged = True
            break
    return LMResult(x=z, sse=sse, n_iterations=it, converged=converged)


def least_squares_bounded(residual_fn, x0, lower, upper,
                          max_iterations=MAX_ITERATIONS,
                          rel_sse_tol=REL_SSE_TOL):
    """Bounded LM: minimizes ||residual_fn(x)||^2 subject to lower <= x <= upper.

    Returns (x_best, LMResult).  ``x_best`` always satisfies the bounds.
    """
    tf = BoundedTransform(lower, upper)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != tf.lower.shape:
        raise InvalidInputError("initial guess shape does not match bounds")

    def fun(z):
        return np.asarray(residual_fn(tf.to_bounded(z)), dtype=float)

    z0 = tf.to_unconstrained(x0)
    res = levenberg_marquardt(fun, z0, max_iterations=max_iterations,
                              rel_sse_tol=rel_sse_tol)
    return tf.to_bounded(res.x), res
