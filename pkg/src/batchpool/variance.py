"""Asymptotic covariances of pooled, per-batch and aggregated estimators.

Expectations over the covariate law are weighted sums over a
:class:`CovariateSample`: Gauss-Legendre nodes (after a probit change of
variables for Gaussian covariates) when ``d = 1`` and a fixed Monte Carlo
draw otherwise. A sample may carry per-batch density ratios so that batches
can have different covariate laws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.stats import norm

norm_pdf = norm.pdf

from batchpool import dgp as dgp_mod
from batchpool.errors import ConfigError, NumericalError, SingularInformationError
from batchpool.rng import make_stream

NEG_INF = float("-inf")
VARIANCE_SEED = 20240917
QUADRATURE_NODES = 2048
PANEL_NODES = 8
GAUSS_HALF_WIDTH = 10.0


@dataclass(frozen=True)
class CovariateSample:
    """Weighted points representing the covariate law of the pooled experiment.

    Parameters
    ----------
    points : ndarray, shape (m, d)
    weights : ndarray, shape (m,)
        Nonnegative, summing to one.
    density_ratios : ndarray, shape (T, m), optional
        ``dP_t / dP_0`` at each point for batches with their own covariate law.
    """

    points: np.ndarray
    weights: np.ndarray
    density_ratios: np.ndarray | None = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[0] == 1 and pts.shape[1] != 1 and np.ndim(self.points) == 1:
            pts = pts.T
        w = np.asarray(self.weights, dtype=float).ravel()
        if w.shape[0] != pts.shape[0]:
            raise ConfigError("one weight per sample point is required")
        if np.any(w < 0) or not math.isclose(w.sum(), 1.0, rel_tol=0, abs_tol=1e-9):
            raise ConfigError("sample weights must be nonnegative and sum to one")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        if self.density_ratios is not None:
            r = np.atleast_2d(np.asarray(self.density_ratios, dtype=float))
            if r.shape[1] != pts.shape[0] or np.any(r <= 0):
                raise ConfigError("density ratios must be positive, one row per batch")
            object.__setattr__(self, "density_ratios", r)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def expect(self, values, batch: int | None = None):
        """Weighted average of per-point values (scalars or matrices)."""
        w = self.batch_weights(batch)
        values = np.asarray(values, dtype=float)
        return np.tensordot(w, values, axes=(0, 0))

    def batch_weights(self, batch: int | None = None) -> np.ndarray:
        if batch is None or self.density_ratios is None:
            return self.weights
        return self.weights * self.density_ratios[batch]


def gauss_legendre_sample(law: str = "standard-gaussian", nodes: int = QUADRATURE_NODES,
                          density=None) -> CovariateSample:
    """One-dimensional quadrature sample.

    Gaussian laws use composite Gauss-Legendre panels (eight nodes each) on
    ``[-GAUSS_HALF_WIDTH, GAUSS_HALF_WIDTH]`` weighted by the normal density,
    which stays accurate for piecewise-linear integrands. Unit-interval laws
    integrate the density directly. ``density`` overrides the law with an
    explicit density on [0, 1].
    """
    if density is None and law == "standard-gaussian":
        base, bw = np.polynomial.legendre.leggauss(PANEL_NODES)
        panels = max(nodes // PANEL_NODES, 1)
        left = np.linspace(-GAUSS_HALF_WIDTH, GAUSS_HALF_WIDTH, panels + 1)
        h = np.diff(left)[:, None]
        x = (left[:-1, None] + 0.5 * h * (base[None, :] + 1.0)).ravel()
        w = (0.5 * h * bw[None, :]).ravel() * norm_pdf(x)
        return CovariateSample(points=x[:, None], weights=w / w.sum())
    u, w = np.polynomial.legendre.leggauss(nodes)
    u = 0.5 * (u + 1.0)
    w = 0.5 * w
    if density is not None:
        w = w * density(u)
        x = u
    elif law == "uniform-unit-interval":
        x = u
    elif law == "density-2x-on-unit-interval":
        x, w = u, w * 2.0 * u
    else:
        raise ConfigError(f"unknown covariate law {law!r}")
    return CovariateSample(points=x[:, None], weights=w / w.sum())


def monte_carlo_sample(spec, size: int = 100_000, seed: int = VARIANCE_SEED) -> CovariateSample:
    """Fixed Monte Carlo draw from the covariate law of ``spec``."""
    rng = make_stream(seed, "covariate-sample", spec.dim)
    pts = dgp_mod.sample_covariates(spec, size, rng)
    return CovariateSample(points=pts, weights=np.full(size, 1.0 / size))


def covariate_sample(spec, size: int = 100_000, seed: int = VARIANCE_SEED) -> CovariateSample:
    """Quadrature for one covariate, Monte Carlo otherwise."""
    if spec.dim == 1:
        return gauss_legendre_sample(spec.covariate_law)
    return monte_carlo_sample(spec, size, seed)


def _values(f, sample: CovariateSample) -> np.ndarray:
    if callable(f):
        return np.asarray(f(sample.points), dtype=float)
    arr = np.asarray(f, dtype=float)
    if arr.ndim == 0:
        return np.full(sample.size, float(arr))
    return arr


def _pair(v, sample):
    v0, v1 = v
    return _values(v0, sample), _values(v1, sample)


def _basis(psi, sample):
    if psi is None:
        return dgp_mod.default_basis(sample.points)
    out = _values(psi, sample)
    return out[:, None] if out.ndim == 1 else out


def _check_open(e):
    if np.any(e <= 0.0) or np.any(e >= 1.0):
        raise NumericalError("propensity touches 0 or 1 on the covariate sample")


def mixture_on_sample(propensities, kappa, sample: CovariateSample) -> np.ndarray:
    """Mixture propensity ``sum_t kappa_t e_t(x) dP_t/dP_0(x)`` at the sample points."""
    kappa = np.asarray(kappa, dtype=float)
    kappa = kappa / kappa.sum()
    total = np.zeros(sample.size)
    for t, (k, e) in enumerate(zip(kappa, propensities)):
        ratio = 1.0 if sample.density_ratios is None else sample.density_ratios[t]
        total = total + k * _values(e, sample) * ratio
    return total


def epl_efficiency(e, v0, v1):
    """Per-point information weight ``e (1 - e) / (v0 e + v1 (1 - e))``."""
    e = np.asarray(e, dtype=float)
    return e * (1.0 - e) / (v0 * e + v1 * (1.0 - e))


def v0_aipw(e_mix, v, tau_minus_theta_sq, sample: CovariateSample, batch=None) -> float:
    """Asymptotic variance ``E[v1/e + v0/(1-e) + (tau - theta)^2]`` of the AIPW estimator.

    Parameters
    ----------
    e_mix : callable or array
        Mixture (or single-batch) propensity.
    v : pair
        Conditional variances ``(v(0, .), v(1, .))``.
    tau_minus_theta_sq : callable, array or float
        Squared deviation of the conditional effect from the ATE.
    sample : CovariateSample
    """
    e = _values(e_mix, sample)
    _check_open(e)
    v0, v1 = _pair(v, sample)
    integrand = v1 / e + v0 / (1.0 - e) + _values(tau_minus_theta_sq, sample)
    return float(sample.expect(integrand, batch))


def epl_information(e_mix, v, psi, sample: CovariateSample, batch=None) -> np.ndarray:
    """Information matrix ``E[rho(e) psi psi']`` of the efficient PL score."""
    e = _values(e_mix, sample)
    if np.any(e < 0.0) or np.any(e > 1.0):
        raise NumericalError("propensity outside [0, 1] on the covariate sample")
    v0, v1 = _pair(v, sample)
    basis = _basis(psi, sample)
    rho = epl_efficiency(e, v0, v1)
    w = sample.batch_weights(batch) * rho
    return (basis * w[:, None]).T @ basis


def _inverse(M, what):
    M = np.atleast_2d(M)
    eig = np.linalg.eigvalsh(0.5 * (M + M.T))
    if eig.min() <= 1e-14 * max(1.0, eig.max()):
        raise SingularInformationError(f"{what} is singular (smallest eigenvalue {eig.min():.3g})")
    return np.linalg.inv(M)


def v0_epl(e_mix, v, psi, sample: CovariateSample, batch=None) -> np.ndarray:
    """Asymptotic covariance of the efficient PL estimator (inverse information)."""
    return _inverse(epl_information(e_mix, v, psi, sample, batch), "information matrix")


def per_batch_variance(estimand: str, e_t, v, extras, sample: CovariateSample,
                       batch: int | None = None) -> np.ndarray:
    """Covariance of a single-batch estimator run with propensity ``e_t``.

    ``extras`` is the squared effect deviation for ``ATE`` and the basis
    ``psi`` (or ``None`` for ``(1, x')``) for ``PL``. When the sample carries
    density ratios, ``batch`` selects the batch's own covariate law.
    """
    estimand = estimand.upper()
    if estimand == "ATE":
        return np.array([[v0_aipw(e_t, v, extras, sample, batch)]])
    if estimand == "PL":
        return v0_epl(e_t, v, extras, sample, batch)
    raise ConfigError(f"unknown estimand {estimand!r}")


class VLAResult(NamedTuple):
    """Aggregated covariance and whether a ridge had to be added."""

    matrix: np.ndarray
    ridge_used: bool


def vla(per_batch, kappa, ridge: float = 1e-8) -> VLAResult:
    """Covariance ``(sum_t kappa_t V_t^{-1})^{-1}`` of the inverse-covariance-weighted estimator."""
    mats = [np.atleast_2d(np.asarray(V, dtype=float)) for V in per_batch]
    kappa = np.asarray(kappa, dtype=float)
    if len(mats) != kappa.size or not mats:
        raise ConfigError("one weight per batch covariance is required")
    kappa = kappa / kappa.sum()
    used = False
    precision = np.zeros_like(mats[0])
    for k, V in zip(kappa, mats):
        try:
            inv = _inverse(V, "per-batch covariance")
        except SingularInformationError:
            inv = np.linalg.inv(V + ridge * np.eye(V.shape[0]))
            used = True
        precision += k * inv
    return VLAResult(np.linalg.inv(precision), used)


def psi_value_and_grad(kind: str, M, gradient: bool = True):
    """Information function value and gradient.

    ``A-opt``: ``-tr(M^{-1})`` with gradient ``M^{-2}``; ``D-opt``:
    ``log det M`` with gradient ``M^{-1}``. A singular ``M`` has value
    ``NEG_INF``; asking for its gradient raises.

    Returns
    -------
    value : float
    grad : ndarray or None
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    M = 0.5 * (M + M.T)
    eig = np.linalg.eigvalsh(M)
    singular = eig.min() <= 1e-14 * max(1.0, abs(eig.max()))
    if kind not in ("A-opt", "D-opt"):
        raise ConfigError(f"unknown information function {kind!r}")
    if singular:
        if gradient:
            raise SingularInformationError("information function gradient at a singular matrix")
        return NEG_INF, None
    inv = np.linalg.inv(M)
    if kind == "A-opt":
        value = -float(np.trace(inv))
        grad = inv @ inv if gradient else None
    else:
        value = float(np.sum(np.log(eig)))
        grad = inv if gradient else None
    return value, grad


def v0_aipw_coarse(e_mix, means, v, labels, sample: CovariateSample) -> float:
    """Variance of AIPW when the outcome model is replaced by cell averages.

    The estimator uses the true propensity ``e_mix`` but outcome means
    ``E[m(z, X) | cell]``. With independent arm errors its variance is
    ``E[(Y(1) - Y(0) - theta)^2] + E[(v1 + a^2)(1/e - 1) + (v0 + b^2)(1/(1-e) - 1) + 2ab]``
    where ``a, b`` are the within-cell deviations of ``m(1, .)`` and ``m(0, .)``.
    """
    e = _values(e_mix, sample)
    _check_open(e)
    m0, m1 = _pair(means, sample)
    v0, v1 = _pair(v, sample)
    labels = np.asarray(labels)
    w = sample.weights
    cells, inv = np.unique(labels, return_inverse=True)
    mass = np.bincount(inv, weights=w)
    cell_m0 = np.bincount(inv, weights=w * m0) / mass
    cell_m1 = np.bincount(inv, weights=w * m1) / mass
    a = m1 - cell_m1[inv]
    b = m0 - cell_m0[inv]
    tau = m1 - m0
    theta = float(w @ tau)
    base = (tau - theta) ** 2 + v0 + v1
    extra = (v1 + a**2) * (1.0 / e - 1.0) + (v0 + b**2) * (1.0 / (1.0 - e) - 1.0) + 2.0 * a * b
    return float(w @ (base + extra))


def covariate_shift_counterexample(nodes: int = 64) -> dict:
    """Pooling versus aggregation when the two batches have different covariate laws.

    Batch 1 covariates are uniform on [0, 1], batch 2 has density ``2x``, both
    batches have equal size and propensity one half, and ``v(z, x) = x`` with
    no effect heterogeneity. All integrands are polynomial, so Gauss-Legendre
    quadrature is exact.

    Returns
    -------
    dict
        ``pooled`` (7/3), ``aggregated`` (16/7) and the per-batch variances.
    """
    kappa = np.array([0.5, 0.5])
    pooled_density = lambda u: kappa[0] * 1.0 + kappa[1] * 2.0 * u
    sample = gauss_legendre_sample(nodes=nodes, density=pooled_density)
    x = sample.points[:, 0]
    ratios = np.vstack([1.0 / pooled_density(x), 2.0 * x / pooled_density(x)])
    sample = CovariateSample(sample.points, sample.weights, ratios)
    half = np.full(sample.size, 0.5)
    v = (lambda pts: pts[:, 0], lambda pts: pts[:, 0])
    e_mix = mixture_on_sample([half, half], kappa, sample)
    pooled = v0_aipw(e_mix, v, 0.0, sample)
    per_batch = [float(per_batch_variance("ATE", half, v, 0.0, sample, batch=t)[0, 0]) for t in (0, 1)]
    aggregated = float(vla([[[pb]] for pb in per_batch], kappa).matrix[0, 0])
    return {"pooled": pooled, "aggregated": aggregated, "per_batch": per_batch}
