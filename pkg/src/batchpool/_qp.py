"""Exact projections and a banded interior-point QP for propensity feasible sets.

All routines work on a vector of free values ``u`` (one per group of tied
design points) subject to a box, an optional chain of bounds on consecutive
differences, and a slab (or hyperplane) on the weighted mean ``a'u``.
"""

from __future__ import annotations

import warnings

import numpy as np
from numba import njit
from scipy import sparse
from scipy.sparse.linalg import spsolve
from scipy.optimize import isotonic_regression

from batchpool.errors import DesignInfeasibleError, NumericalError


def _bisect_shift(mean_of, target, scale):
    """Find ``mu`` with ``mean_of(mu) == target`` for nonincreasing ``mean_of``."""
    lo, hi = -scale, scale
    for _ in range(200):
        if mean_of(lo) >= target:
            break
        lo *= 2.0
    for _ in range(200):
        if mean_of(hi) <= target:
            break
        hi *= 2.0
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if mean_of(mid) > target:
            lo = mid
        else:
            hi = mid
    return lo if abs(mean_of(lo) - target) <= abs(mean_of(hi) - target) else hi


def _slab_projection(solve_shifted, a, low, high, scale):
    u = solve_shifted(0.0)
    mean = float(a @ u)
    if low <= mean <= high:
        return u
    target = high if mean > high else low
    mu = _bisect_shift(lambda m: float(a @ solve_shifted(m)), target, scale)
    return solve_shifted(mu)


def box_slab_projection(y, w, a, lb, ub, low, high):
    """Weighted projection onto ``{lb <= u <= ub, low <= a'u <= high}``.

    Minimizes ``sum(w * (u - y)**2)``; the slab multiplier is found by
    bisection on the (monotone, piecewise-linear) mean of the shifted clip.
    """
    y, w, a = (np.asarray(v, dtype=float) for v in (y, w, a))
    ratio = a / w

    def solve(mu):
        return np.clip(y - mu * ratio, lb, ub)

    scale = (np.abs(y).max() + 1.0) / max(ratio.min(), 1e-300)
    return _slab_projection(solve, a, low, high, scale)


def isotonic_slab_projection(y, w, a, lb, ub, low, high):
    """Weighted projection onto nondecreasing vectors in a box with a mean slab.

    Uses pool-adjacent-violators followed by clipping, which is exact for
    constant bounds, and bisection on the slab multiplier.
    """
    y, w, a = (np.asarray(v, dtype=float) for v in (y, w, a))
    ratio = a / w

    def solve(mu):
        fit = isotonic_regression(y - mu * ratio, weights=w, increasing=True).x
        return np.clip(fit, lb, ub)

    scale = (np.abs(y).max() + 1.0) / max(ratio.min(), 1e-300)
    return _slab_projection(solve, a, low, high, scale)


def capped_simplex_projection(v):
    """Euclidean projection onto ``{w >= 0, sum(w) <= 1}`` (sort-based)."""
    v = np.asarray(v, dtype=float)
    w = np.maximum(v, 0.0)
    if w.sum() <= 1.0:
        return w
    srt = np.sort(v)[::-1]
    css = np.cumsum(srt) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = np.nonzero(srt - css / ind > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def simplex_slab_projection(y, a, low, high):
    """Projection onto ``{w >= 0, sum(w) <= 1, low <= a'w <= high}``."""
    y, a = np.asarray(y, dtype=float), np.asarray(a, dtype=float)
    if low > max(a.max(), 0.0) + 1e-12:
        raise DesignInfeasibleError(
            f"budget lower bound {low} exceeds the largest attainable mean {a.max():.6g}"
        )

    def solve(mu):
        return capped_simplex_projection(y - mu * a)

    scale = (np.abs(y).max() + 1.0) / max(np.abs(a).max(), 1e-12)
    return _slab_projection(solve, a, low, high, scale)


@njit(cache=True)
def _laplacian_factor(margin, coupling):
    """Pivots of ``diag(margin) + D' diag(coupling) D`` without cancellation.

    The pivot recursion ``q[j+1] = margin[j+1] + c[j] q[j] / (c[j] + q[j])``
    only adds positive terms, so it stays accurate when the coupling weights
    are many orders of magnitude larger than the margin.
    """
    n = margin.size
    pivots = np.empty(n)
    q = margin[0]
    for j in range(n - 1):
        pivots[j] = coupling[j] + q
        q = margin[j + 1] + coupling[j] * q / pivots[j]
    pivots[n - 1] = q
    return pivots


@njit(cache=True)
def _laplacian_solve(pivots, coupling, rhs):
    n, k = rhs.shape
    out = np.empty_like(rhs)
    for col in range(k):
        y = rhs[0, col]
        out[0, col] = y
        for j in range(n - 1):
            y = rhs[j + 1, col] + coupling[j] / pivots[j] * y
            out[j + 1, col] = y
        x = out[n - 1, col] / pivots[n - 1]
        out[n - 1, col] = x
        for j in range(n - 2, -1, -1):
            x = (out[j, col] + coupling[j] * x) / pivots[j]
            out[j, col] = x
    return out


class _BandedSystem:
    """Factorization of ``diag(margin) + D' diag(coupling) D + U U'``."""

    def __init__(self, margin, coupling, lowrank):
        self.coupling = np.ascontiguousarray(coupling, dtype=float)
        self.pivots = _laplacian_factor(np.ascontiguousarray(margin, dtype=float), self.coupling)
        self.lowrank = lowrank if lowrank is not None and lowrank.shape[1] else None
        if self.lowrank is not None:
            self.t_inv_u = self._tri_solve(self.lowrank)
            cap = np.eye(self.lowrank.shape[1]) + self.lowrank.T @ self.t_inv_u
            self.cap_factor = np.linalg.cholesky(cap)

    def _tri_solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        flat = rhs.ndim == 1
        out = _laplacian_solve(self.pivots, self.coupling, np.ascontiguousarray(rhs.reshape(rhs.shape[0], -1)))
        return out[:, 0] if flat else out

    def solve(self, rhs):
        x = self._tri_solve(rhs)
        if self.lowrank is None:
            return x
        proj = self.lowrank.T @ x
        corr = np.linalg.solve(self.cap_factor.T, np.linalg.solve(self.cap_factor, proj))
        return x - self.t_inv_u @ corr


def chain_qp(diag, linear, lo=None, hi=None, lb=0.0, ub=1.0, a=None,
             m_low=-np.inf, m_high=np.inf, lowrank=None, tol=1e-13, max_iter=100):
    """Solve a convex QP with chain, box and mean constraints.

    Minimizes ``0.5 * u'(diag(diag) + B B')u - linear'u`` subject to
    ``lo[j] <= u[j+1] - u[j] <= hi[j]``, ``lb <= u <= ub`` and
    ``m_low <= a'u <= m_high`` (a hyperplane when the two bounds coincide),
    with a Mehrotra predictor-corrector interior-point method. The mean is
    carried by an auxiliary scalar ``t = a'u`` so that a nearly active slab
    never enters the Newton matrix as a huge rank-one term; every Newton
    system is then tridiagonal plus low rank and is solved in linear time.

    Parameters
    ----------
    diag : ndarray, shape (n,)
        Positive diagonal of the quadratic term.
    linear : ndarray, shape (n,)
    lo, hi : ndarray, shape (n-1,), optional
        Bounds on consecutive differences; entries may be infinite.
    lb, ub : float
        Box bounds.
    a : ndarray, shape (n,), optional
        Mean weights (positive); defaults to ``1/n``.
    m_low, m_high : float
    lowrank : ndarray, shape (n, r), optional
        Factor ``B`` of an additional positive semidefinite term.

    Returns
    -------
    u : ndarray
    info : dict
        Iteration count, final residuals and status.
    """
    diag = np.asarray(diag, dtype=float)
    linear = np.asarray(linear, dtype=float)
    n = diag.size
    if np.any(diag <= 0):
        raise NumericalError("quadratic diagonal must be positive")
    scale = diag.max()
    if lowrank is not None:
        lowrank = np.asarray(lowrank, dtype=float).reshape(n, -1)
        scale = max(scale, float((lowrank**2).sum(axis=1).max()))
    diag = diag / scale
    linear = linear / scale
    if lowrank is not None:
        lowrank = lowrank / np.sqrt(scale) if lowrank.shape[1] else None

    if n > 1 and lo is not None:
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
    else:
        lo = np.full(max(n - 1, 0), -np.inf)
        hi = np.full(max(n - 1, 0), np.inf)
    mask_hi = np.isfinite(hi)
    mask_lo = np.isfinite(lo)
    a = np.full(n, 1.0 / n) if a is None else np.asarray(a, dtype=float)
    total = a.sum()
    if m_low > ub * total + 1e-12 or m_high < lb * total - 1e-12 or m_low > m_high:
        raise DesignInfeasibleError("budget interval does not meet the box")
    equality = bool(np.isfinite(m_low) and m_low == m_high)
    slab_hi = (not equality) and bool(np.isfinite(m_high))
    slab_lo = (not equality) and bool(np.isfinite(m_low))
    linked = equality or slab_hi or slab_lo

    k_hi, k_lo = int(mask_hi.sum()), int(mask_lo.sum())
    sl = {}
    pos = 0
    for name, size in (("bu", n), ("bl", n), ("cu", k_hi), ("cl", k_lo),
                       ("su", int(slab_hi)), ("sl", int(slab_lo))):
        sl[name] = slice(pos, pos + size)
        pos += size
    m_ineq = pos

    h = np.empty(m_ineq)
    h[sl["bu"]] = ub
    h[sl["bl"]] = -lb
    h[sl["cu"]] = hi[mask_hi]
    h[sl["cl"]] = -lo[mask_lo]
    if slab_hi:
        h[sl["su"]] = m_high
    if slab_lo:
        h[sl["sl"]] = -m_low

    def g_mul(u, t):
        out = np.empty(m_ineq)
        du = np.diff(u)
        out[sl["bu"]] = u
        out[sl["bl"]] = -u
        out[sl["cu"]] = du[mask_hi]
        out[sl["cl"]] = -du[mask_lo]
        if slab_hi:
            out[sl["su"]] = t
        if slab_lo:
            out[sl["sl"]] = -t
        return out

    def gt_mul(z):
        r = z[sl["bu"]] - z[sl["bl"]]
        if n > 1:
            v = np.zeros(n - 1)
            v[mask_hi] += z[sl["cu"]]
            v[mask_lo] -= z[sl["cl"]]
            r[1:] += v
            r[:-1] -= v
        r_t = (z[sl["su"]].sum() if slab_hi else 0.0) - (z[sl["sl"]].sum() if slab_lo else 0.0)
        return r, r_t

    def hess_mul(u):
        out = diag * u
        if lowrank is not None:
            out = out + lowrank @ (lowrank.T @ u)
        return out

    if equality:
        t = float(m_low)
    elif linked:
        t = 0.5 * (max(m_low, lb * total) + min(m_high, ub * total))
    else:
        t = 0.0
    start = min(max(t / total if linked else 0.5 * (lb + ub), lb), ub)
    u = np.full(n, start)
    s = np.maximum(h - g_mul(u, t), 1e-2)
    z = np.ones(m_ineq)
    nu = 0.0

    h_norm = 1.0 + np.abs(h).max()
    c_norm = 1.0 + np.abs(linear).max()
    info = {"iterations": 0, "status": "max_iter"}
    best = (np.inf, u.copy(), s.copy(), z.copy())
    for it in range(1, max_iter + 1):
        gz_u, gz_t = gt_mul(z)
        r_du = hess_mul(u) - linear + gz_u
        r_dt = 0.0
        r_e = 0.0
        if linked:
            r_du = r_du + nu * a
            r_dt = gz_t - nu if not equality else 0.0
            r_e = a @ u - t
        r_p = g_mul(u, t) + s - h
        mu = s @ z / m_ineq
        res_d = max(np.abs(r_du).max(), abs(r_dt)) / c_norm
        res_p = max(np.abs(r_p).max(), abs(r_e)) / h_norm
        merit = max(res_d, res_p, mu)
        if merit < best[0]:
            best = (merit, u.copy(), s.copy(), z.copy())
            info.update(iterations=it - 1, dual_residual=res_d, primal_residual=res_p, gap=mu)
        if merit <= tol:
            info["status"] = "optimal"
            break
        if merit > 1e4 * best[0]:
            # Newton systems lose accuracy once the duals blow up; keep the best iterate.
            info["status"] = "stalled"
            break

        w = z / s
        margin = diag + w[sl["bu"]] + w[sl["bl"]]
        chain_w = np.zeros(max(n - 1, 0))
        chain_w[mask_hi] += w[sl["cu"]]
        chain_w[mask_lo] += w[sl["cl"]]
        rho = (w[sl["su"]].sum() if slab_hi else 0.0) + (w[sl["sl"]].sum() if slab_lo else 0.0)
        system = _BandedSystem(margin, chain_w, lowrank)
        m_inv_a = system.solve(a) if linked else None
        a_m_inv_a = a @ m_inv_a if linked else 0.0

        def newton(rc):
            gz_u, gz_t = gt_mul(rc / s + w * r_p)
            rhs_u = -r_du - gz_u
            du = system.solve(rhs_u)
            dt = dnu = 0.0
            if linked:
                if equality:
                    dnu = (a @ du + r_e) / a_m_inv_a
                else:
                    rhs_t = -r_dt - gz_t
                    dnu = (a @ du - rhs_t / rho + r_e) / (a_m_inv_a + 1.0 / rho)
                    dt = (rhs_t + dnu) / rho
                du = du - dnu * m_inv_a
            ds = -r_p - g_mul(du, dt)
            dz = (rc - z * ds) / s
            return du, dt, ds, dz, dnu

        def max_step(ds, dz):
            alpha = 1.0
            neg = ds < 0
            if neg.any():
                alpha = min(alpha, float((-s[neg] / ds[neg]).min()))
            neg = dz < 0
            if neg.any():
                alpha = min(alpha, float((-z[neg] / dz[neg]).min()))
            return alpha

        du, dt, ds, dz, dnu = newton(-s * z)
        alpha = max_step(ds, dz)
        mu_aff = (s + alpha * ds) @ (z + alpha * dz) / m_ineq
        sigma = (mu_aff / mu) ** 3
        du, dt, ds, dz, dnu = newton(-s * z - ds * dz + sigma * mu)
        alpha = min(1.0, 0.995 * max_step(ds, dz))
        u = u + alpha * du
        t = t + alpha * dt
        s = s + alpha * ds
        z = z + alpha * dz
        nu = nu + alpha * dnu
    u = best[1]
    if info["status"] != "optimal" and info.get("gap", np.inf) > 1e-6:
        raise NumericalError(f"chain QP failed to converge: {info}")
    rows = _active_rows(best[2], best[3], n, a, sl, mask_hi, mask_lo, equality, slab_hi, slab_lo,
                        h, m_low)
    polished = _polish(u, diag, linear, lowrank, rows, lo, hi, lb, ub, a, m_low, m_high)
    info["polished"] = polished is not None
    if polished is not None:
        u = polished
    return np.clip(u, lb, ub), info


def _active_rows(s, z, n, a, sl, mask_hi, mask_lo, equality, slab_hi, slab_lo, h, m_low):
    """Active constraints of an interior-point solution as sparse rows ``G u = b``.

    A constraint counts as active when its slack is below its multiplier.
    Returns ``(G, b, n_equality)``; equality rows come first.
    """
    active = s < z
    cols, vals, rhs, row_of = [], [], [], []
    dense = np.arange(n)
    blocks = []
    if equality:
        blocks.append((dense[None, :], a[None, :], np.array([m_low])))
    n_eq = len(blocks)
    for name, sign in (("bu", 1.0), ("bl", -1.0)):
        j = np.nonzero(active[sl[name]])[0]
        blocks.append((j[:, None], np.full((j.size, 1), sign), h[sl[name]][j]))
    for name, sign, mask in (("cu", 1.0, mask_hi), ("cl", -1.0, mask_lo)):
        k = np.nonzero(active[sl[name]])[0]
        j = np.nonzero(mask)[0][k]
        blocks.append((np.column_stack([j, j + 1]), np.tile([-sign, sign], (k.size, 1)),
                       h[sl[name]][k]))
    for name, sign, flag in (("su", 1.0, slab_hi), ("sl", -1.0, slab_lo)):
        if flag and active[sl[name]][0]:
            blocks.append((dense[None, :], sign * a[None, :], h[sl[name]][:1]))
    row = 0
    for c, v, b in blocks:
        k = c.shape[0]
        if k == 0:
            continue
        cols.append(c.ravel())
        vals.append(v.ravel())
        row_of.append(np.repeat(np.arange(row, row + k), c.shape[1]))
        rhs.append(b)
        row += k
    if row == 0:
        return sparse.csr_matrix((0, n)), np.zeros(0), 0
    G = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(row_of), np.concatenate(cols))),
                          shape=(row, n))
    return G, np.concatenate(rhs).astype(float), n_eq


def _polish(u, diag, linear, lowrank, rows, lo, hi, lb, ub, a, m_low, m_high, tol=1e-12):
    """Solve the equality QP on the guessed active set; ``None`` if the guess is wrong.

    Interior-point iterates approach degenerate solutions (zero multiplier
    on an active constraint) only at the square root of the barrier
    parameter, so this step recovers the exact minimizer when the active
    set is right.
    """
    G, b, n_eq = rows
    n = u.size
    m = G.shape[0]
    r = 0 if lowrank is None else lowrank.shape[1]
    blocks = [[sparse.diags(diag), G.T], [G, None]]
    rhs = [linear, b]
    if r:
        B = sparse.csr_matrix(lowrank)
        blocks = [[sparse.diags(diag), G.T, B], [G, None, None],
                  [B.T, None, -sparse.identity(r)]]
        rhs.append(np.zeros(r))
    K = sparse.bmat(blocks, format="csc")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            sol = spsolve(K, np.concatenate(rhs))
    except (RuntimeError, ValueError, np.linalg.LinAlgError, sparse.linalg.MatrixRankWarning):
        return None
    if not np.all(np.isfinite(sol)):
        return None
    v, lam = sol[:n], sol[n:n + m]
    scale = 1.0 + np.abs(linear).max()
    if np.any(lam[n_eq:] < -1e-9 * scale):
        return None
    if np.abs(G @ v - b).max(initial=0.0) > 1e-10:
        return None
    if np.any(v < lb - tol) or np.any(v > ub + tol):
        return None
    if n > 1:
        dv = np.diff(v)
        if np.any(dv < lo - tol) or np.any(dv > hi + tol):
            return None
    mean = a @ v
    if mean < m_low - tol or mean > m_high + tol:
        return None
    return v
