"""Nested adaptive quadrature and importance sampling for the density integrals."""
from __future__ import annotations

import numpy as np
from scipy import integrate, optimize

from .errors import NonConvergence, QuadratureFailure


def nested_quad(f, bounds, epsrel=1e-9, epsabs=0.0, limit=200):
    """Integrate f over a box with coordinate-dependent bounds.

    bounds[k] is either a (lo, hi) pair or a callable mapping the outer
    coordinates (x_0 .. x_{k-1}) to (lo, hi); infinities are allowed.
    Returns (value, error_estimate) with the error taken from the outermost
    adaptive pass.
    """
    dim = len(bounds)
    if dim == 0:
        return float(f(())), 0.0

    # inner levels run at a tighter tolerance so the outer estimate dominates
    inner_epsrel = epsrel * 0.1

    def level(k, outer):
        lo, hi = bounds[k](outer) if callable(bounds[k]) else bounds[k]
        if k == dim - 1:
            g = lambda x: f(outer + (x,))  # noqa: E731
        else:
            g = lambda x: level(k + 1, outer + (x,))[0]  # noqa: E731
        rel = epsrel if k == 0 else inner_epsrel
        val, err = integrate.quad(g, lo, hi, epsabs=epsabs, epsrel=rel, limit=limit)
        return val, err

    val, err = level(0, ())
    if not np.isfinite(val):
        raise QuadratureFailure(f"nested quadrature returned {val}")
    return float(val), float(err)


def bisect_threshold(indicator, lo, hi, tol=1e-12, max_doublings=200):
    """Smallest x with indicator(x) true; indicator must be monotone in x."""
    if indicator(lo):
        return lo
    while not indicator(hi):
        lo, hi = hi, 2.0 * max(hi, 1e-6)
        max_doublings -= 1
        if max_doublings <= 0:
            raise QuadratureFailure("no admissible point found while doubling")
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if indicator(mid):
            hi = mid
        else:
            lo = mid
    return hi


def batched_logconcave_1d(slope, coeffs, exponents, drop=45.0, n_points=256):
    """log of integrals over R of exp(phi_k) for phi_k(x) = slope_k x - sum_g coeffs[k,g] e^{m_g x}.

    All phi_k are strictly concave when each exponent column carries positive
    coefficients on both signs of m. Modes are found by vectorized bisection
    on phi', the effective support is grown until phi falls by ``drop`` on
    both sides, and a uniform trapezoid rule is applied (spectrally accurate
    for analytic integrands with fast decay).
    """
    slope = np.asarray(slope, dtype=float)
    coeffs = np.asarray(coeffs, dtype=float)
    ms = np.asarray(exponents, dtype=float)
    nb = len(slope)

    def phi_vec(x):
        # x shape (nb,) -> phi shape (nb,)
        return slope * x - np.sum(coeffs * np.exp(x[:, None] * ms[None, :]), axis=1)

    def dphi(x):
        return slope - np.sum(coeffs * ms[None, :] * np.exp(x[:, None] * ms[None, :]), axis=1)

    lo = np.full(nb, -1.0)
    hi = np.full(nb, 1.0)
    for _ in range(80):
        bad_lo = dphi(lo) <= 0.0
        bad_hi = dphi(hi) >= 0.0
        if not bad_lo.any() and not bad_hi.any():
            break
        lo[bad_lo] *= 2.0
        hi[bad_hi] *= 2.0
    else:
        raise NonConvergence("could not bracket the mode of a batched integrand")
    for _ in range(90):
        mid = 0.5 * (lo + hi)
        pos = dphi(mid) > 0.0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    mode = 0.5 * (lo + hi)
    pmode = phi_vec(mode)

    curv = np.sum(coeffs * ms[None, :] ** 2 * np.exp(mode[:, None] * ms[None, :]), axis=1)
    span0 = np.sqrt(2.0 * drop / np.maximum(curv, 1e-12))
    left = span0.copy()
    right = span0.copy()
    for _ in range(60):
        need_l = pmode - phi_vec(mode - left) < drop
        need_r = pmode - phi_vec(mode + right) < drop
        if not need_l.any() and not need_r.any():
            break
        left[need_l] *= 1.6
        right[need_r] *= 1.6

    ts = (np.arange(n_points) + 0.5) / n_points
    xs = (mode - left)[:, None] + (left + right)[:, None] * ts[None, :]
    vals = slope[:, None] * xs - np.einsum("kg,kpg->kp", coeffs,
                                           np.exp(xs[:, :, None] * ms[None, None, :]))
    h = (left + right) / n_points
    m = vals.max(axis=1)
    return m + np.log(h * np.exp(vals - m[:, None]).sum(axis=1))


def gaussian_importance_normalize(log_f, dim, n_samples, rng, stream=0, x0=None,
                                  n_batches=32):
    """Self-normalized estimate of the integral of exp(log_f) over R^dim.

    Proposal: Gaussian centered at the mode of log_f with covariance from the
    Hessian there (finite differences). Returns (value, standard_error).
    """
    x0 = np.zeros(dim) if x0 is None else np.asarray(x0, dtype=float)
    res = optimize.minimize(lambda x: -log_f(x), x0, method="BFGS")
    if not np.isfinite(res.fun):
        raise NonConvergence("mode search failed")
    mode = res.x
    hess = _fd_hessian(log_f, mode)
    cov = np.linalg.inv(-hess)
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 1e-8, None)
    chol = evecs @ np.diag(np.sqrt(evals))

    counters = np.arange(n_samples * dim, dtype=np.uint64).reshape(n_samples, dim)
    z = rng.normal(stream, counters)
    xs = mode + z @ chol.T
    log_q = (-0.5 * np.sum(z**2, axis=1)
             - 0.5 * dim * np.log(2 * np.pi) - 0.5 * np.sum(np.log(evals)))
    log_w = np.array([log_f(x) for x in xs]) - log_q
    scale = log_w.max()
    w = np.exp(log_w - scale)
    batches = np.array_split(w, n_batches)
    means = np.array([b.mean() for b in batches]) * np.exp(scale)
    return float(means.mean()), float(means.std(ddof=1) / np.sqrt(len(means)))


def _fd_hessian(f, x, step=1e-4):
    d = len(x)
    h = np.zeros((d, d))
    for i in range(d):
        for j in range(i, d):
            ei = np.zeros(d)
            ej = np.zeros(d)
            ei[i] = step
            ej[j] = step
            fpp = f(x + ei + ej)
            fpm = f(x + ei - ej)
            fmp = f(x - ei + ej)
            fmm = f(x - ei - ej)
            h[i, j] = h[j, i] = (fpp - fpm - fmp + fmm) / (4 * step * step)
    if not np.all(np.isfinite(h)):
        raise NonConvergence(f"non-finite Hessian at {x}")
    return h
