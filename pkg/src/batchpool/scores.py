"""Linear score functions for the ATE (AIPW) and the partially linear model (EPL).

Both scores are linear in the parameter, ``s(w; theta) = s_a(w) theta + s_b(w)``,
so the estimator solves a p x p linear system. Vectorized helpers return
``s_a`` with shape ``(n, p, p)`` and ``s_b`` with shape ``(n, p)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from batchpool.errors import ConfigError, DimensionMismatchError, EstimationError, NumericalError

VARIANCE_FLOOR = 1e-3
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class Observation:
    """One unit: covariates, treatment indicator and observed outcome."""

    x: np.ndarray
    z: int
    y: float


@dataclass
class ScoreParts:
    """Slope ``s_a`` (p x p, or n x p x p) and intercept ``s_b`` (p, or n x p)."""

    s_a: np.ndarray
    s_b: np.ndarray

    def score(self, theta) -> np.ndarray:
        """Score value ``s_a theta + s_b``."""
        theta = np.asarray(theta, dtype=float)
        return self.s_a @ theta + self.s_b


def _clip_propensity(e, clip_gamma):
    e = np.clip(np.asarray(e, dtype=float), clip_gamma, 1.0 - clip_gamma)
    if np.any(e <= 0.0) or np.any(e >= 1.0):
        raise NumericalError("propensity equal to 0 or 1 in an inverse-weighted score")
    return e


def aipw_scores(z, y, m0, m1, e, clip_gamma: float = 0.0) -> ScoreParts:
    """Vectorized AIPW score parts.

    Parameters
    ----------
    z, y : array_like, shape (n,)
        Treatment indicators and outcomes.
    m0, m1 : array_like, shape (n,)
        Outcome-mean predictions for each arm.
    e : array_like, shape (n,)
        Propensity used for weighting, clipped to ``[clip_gamma, 1 - clip_gamma]``.

    Returns
    -------
    ScoreParts
        ``s_a`` is ``-1`` for every unit.
    """
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    m0 = np.asarray(m0, dtype=float)
    m1 = np.asarray(m1, dtype=float)
    e = _clip_propensity(e, clip_gamma)
    s_b = m1 - m0 + z * (y - m1) / e - (1.0 - z) * (y - m0) / (1.0 - e)
    n = s_b.shape[0] if s_b.ndim else 1
    return ScoreParts(s_a=-np.ones((n, 1, 1)), s_b=np.reshape(s_b, (n, 1)))


def epl_weight(v0, v1, e, floor: float = VARIANCE_FLOOR) -> np.ndarray:
    """Efficient weight ``1 / (v0 e + v1 (1 - e))`` with floored variances."""
    v0 = np.asarray(v0, dtype=float)
    v1 = np.asarray(v1, dtype=float)
    if floor > 0:
        v0 = np.maximum(v0, floor)
        v1 = np.maximum(v1, floor)
    elif np.any(v0 <= 0) or np.any(v1 <= 0):
        raise ConfigError("conditional variances must be positive")
    e = np.asarray(e, dtype=float)
    return 1.0 / (v0 * e + v1 * (1.0 - e))


def epl_scores(z, y, m0, v0, v1, e, psi, floor: float = VARIANCE_FLOOR,
               weight=None) -> ScoreParts:
    """Vectorized efficient partially-linear score parts.

    ``s_a = -w z (z - e) psi psi'`` and ``s_b = w (z - e)(y - m0) psi`` with
    ``w = 1 / (v0 e + v1 (1 - e))`` unless an explicit ``weight`` is given.
    """
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    m0 = np.asarray(m0, dtype=float)
    e = np.asarray(e, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if psi.ndim == 1:
        psi = psi[:, None]
    if psi.shape[0] != z.shape[0]:
        raise DimensionMismatchError("psi must have one row per observation")
    w = epl_weight(v0, v1, e, floor) if weight is None else np.asarray(weight, dtype=float)
    if np.any(w < 0):
        raise ConfigError("score weights must be nonnegative")
    resid = z - e
    s_a = -(w * z * resid)[:, None, None] * (psi[:, :, None] * psi[:, None, :])
    s_b = (w * resid * (y - m0))[:, None] * psi
    return ScoreParts(s_a=s_a, s_b=s_b)


def aipw_parts(w: Observation, m, e: float, clip_gamma: float = 0.0) -> ScoreParts:
    """AIPW score parts for one observation.

    Parameters
    ----------
    w : Observation
    m : pair of callables or pair of floats
        Outcome means ``(m(0, .), m(1, .))``.
    e : float
        Propensity at ``w.x``.
    """
    m0, m1 = (float(mz(w.x)) if callable(mz) else float(mz) for mz in m)
    parts = aipw_scores([w.z], [w.y], [m0], [m1], [e], clip_gamma)
    return ScoreParts(s_a=parts.s_a[0], s_b=parts.s_b[0])


def epl_parts(w: Observation, m0, v, e: float, psi, floor: float = VARIANCE_FLOOR) -> ScoreParts:
    """Efficient partially-linear score parts for one observation.

    ``v`` is the pair ``(v(0, .), v(1, .))`` as callables or floats and
    ``psi`` the basis values at ``w.x``.
    """
    m0_val = float(m0(w.x)) if callable(m0) else float(m0)
    v0, v1 = (float(vz(w.x)) if callable(vz) else float(vz) for vz in v)
    psi = np.atleast_1d(np.asarray(psi, dtype=float))
    parts = epl_scores([w.z], [w.y], [m0_val], [v0], [v1], [e], psi[None, :], floor)
    return ScoreParts(s_a=parts.s_a[0], s_b=parts.s_b[0])


def solve_linear_score(sum_sa, sum_sb) -> np.ndarray:
    """Root ``theta = -sum_sa^{-1} sum_sb`` of the summed linear score.

    Raises
    ------
    EstimationError
        When ``sum_sa`` is singular or its condition number exceeds 1e12.
    """
    sum_sa = np.atleast_2d(np.asarray(sum_sa, dtype=float))
    sum_sb = np.atleast_1d(np.asarray(sum_sb, dtype=float))
    if sum_sa.shape != (sum_sb.size, sum_sb.size):
        raise DimensionMismatchError("score slope must be p x p for a length-p intercept")
    if not np.all(np.isfinite(sum_sa)) or not np.all(np.isfinite(sum_sb)):
        raise EstimationError("non-finite score sums", condition_number=np.inf)
    cond = float(np.linalg.cond(sum_sa))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise EstimationError(f"score slope is ill-conditioned (condition number {cond:.3g})",
                              condition_number=cond)
    return -lu_solve(lu_factor(sum_sa), sum_sb)
