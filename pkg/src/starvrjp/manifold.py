"""The divergence-free manifold of tilts and its parametrizations.

U0 = {u : sum u = 0, div(W^u) = 0} is the set of limiting local-time profiles.
It is parametrized either by the symmetric zero-sum slice S0 (orthogonal
projection, inverted by the Newton projection parallel to A) or, given a root
vertex, by the holding-time coordinates beta on the complement of the root
pair (the map ``xi_forward`` / ``xi_inverse``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MaxIterations, NotInDomain, NotOnManifold, NotPositiveStable
from .graph import StarGraph, divergence
from .linalg import (
    positive_stable,
    restricted_determinant,
    subspace_basis,
    subspace_project,
    tilted_generator,
    tree_determinant,
)

RESIDUAL_TOL = 1e-10


@dataclass
class ManifoldPoint:
    h: np.ndarray
    residual: float

    def __post_init__(self):
        if self.residual > RESIDUAL_TOL:
            raise NotOnManifold(f"divergence residual {self.residual:.3e} > {RESIDUAL_TOL}")


@dataclass
class ProjectionResult:
    point: ManifoldPoint
    a: np.ndarray
    iterations: int
    final_gradient_norm: float


def _manifold_residual(graph: StarGraph, u) -> float:
    return float(np.max(np.abs(divergence(graph, graph.tilted_weights(u)))))


def as_manifold_point(graph: StarGraph, u) -> ManifoldPoint:
    """Wrap a vector already known to satisfy the manifold constraints."""
    u = np.asarray(u, dtype=float)
    return ManifoldPoint(h=u, residual=_manifold_residual(graph, u))


def energy(graph: StarGraph, u, v):
    """Convex energy J_u(v) = sum_e W^u_e (e^{v_head - v_tail} - 1).

    Returns (value, gradient, hessian_form); hessian_form(b) is the quadratic
    form sum_e W^{u-v}_e (b_tail - b_head)^2, valid for v and b antisymmetric.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    tails, heads = graph.edges[:, 0], graph.edges[:, 1]
    we = graph.tilted_weights(u) * np.exp(v[heads] - v[tails])
    value = float(np.sum(we) - np.sum(graph.tilted_weights(u)))
    grad = np.zeros(graph.n)
    np.add.at(grad, tails, -we)
    np.add.at(grad, heads, we)

    def hessian_form(b):
        b = np.asarray(b, dtype=float)
        return float(np.sum(we * (b[tails] - b[heads]) ** 2))

    return value, grad, hessian_form


def _energy_hessian(graph: StarGraph, we_current) -> np.ndarray:
    """Full Hessian of J at the point where tilted edge weights are we_current."""
    n = graph.n
    h = np.zeros((n, n))
    tails, heads = graph.edges[:, 0], graph.edges[:, 1]
    np.add.at(h, (tails, heads), -we_current)
    np.add.at(h, (heads, tails), -we_current)
    diag = np.zeros(n)
    np.add.at(diag, tails, we_current)
    np.add.at(diag, heads, we_current)
    h[np.diag_indices(n)] = diag
    return h


def project_to_manifold(graph: StarGraph, u, grad_tol: float = 1e-12,
                        max_iter: int = 200) -> ProjectionResult:
    """Unique a in A with u - a divergence free; Newton with step halving.

    The mean of u is removed first. The gradient of the energy restricted to
    the pair coordinates equals -2 div(W^{u-a}) there, so the stopping rule
    also bounds the manifold residual.
    """
    u0 = np.asarray(u, dtype=float) - np.asarray(u, dtype=float).mean()
    reps = graph.pair_reps
    n1 = len(reps)
    if n1 == 0:
        return ProjectionResult(point=as_manifold_point(graph, u0), a=np.zeros(graph.n),
                                iterations=0, final_gradient_norm=0.0)

    star = graph.star
    tails, heads = graph.edges[:, 0], graph.edges[:, 1]
    log_wu = np.log(graph.weights) + u0[tails] + u0[star[heads]]

    def a_of(x):
        a = np.zeros(graph.n)
        a[reps] = x
        a[star[reps]] = -x
        return a

    def value_grad(x):
        a = a_of(x)
        we = np.exp(log_wu + a[heads] - a[tails])
        val = float(np.sum(we) - np.sum(np.exp(log_wu)))
        g_full = np.zeros(graph.n)
        np.add.at(g_full, tails, -we)
        np.add.at(g_full, heads, we)
        return val, g_full[reps] - g_full[star[reps]], we

    x = np.zeros(n1)
    val, gx, we = value_grad(x)
    it = 0
    while np.max(np.abs(gx)) > grad_tol:
        if it >= max_iter:
            raise MaxIterations(
                f"projection stalled after {it} iterations, grad={np.max(np.abs(gx)):.3e}")
        h_full = _energy_hessian(graph, we)
        hx = (h_full[np.ix_(reps, reps)] - h_full[np.ix_(reps, star[reps])]
              - h_full[np.ix_(star[reps], reps)] + h_full[np.ix_(star[reps], star[reps])])
        try:
            dx = np.linalg.solve(hx, -gx)
        except np.linalg.LinAlgError:
            dx = -gx
        step = 1.0
        for _ in range(60):
            val_new, gx_new, we_new = value_grad(x + step * dx)
            if np.isfinite(val_new) and val_new <= val + 1e-12 * (1.0 + abs(val)):
                break
            step *= 0.5
        x = x + step * dx
        val, gx, we = val_new, gx_new, we_new
        it += 1

    a = a_of(x)
    return ProjectionResult(point=as_manifold_point(graph, u0 - a), a=a,
                            iterations=it, final_gradient_norm=float(np.max(np.abs(gx))))


def tangent_basis(graph: StarGraph, point: ManifoldPoint) -> list[np.ndarray]:
    """Basis of the tangent space at h: preimage of S0 under transpose(K^h)."""
    from .linalg import generator_inverse_on_h0

    _, k = tilted_generator(graph, point.h)
    basis_h0 = subspace_basis(graph, "H0")
    m = basis_h0.T @ k.T @ basis_h0
    try:
        m_inv = np.linalg.inv(m)
    except np.linalg.LinAlgError as err:
        from .errors import SingularGenerator

        raise SingularGenerator(str(err)) from err
    out = []
    for s in subspace_basis(graph, "S0").T:
        x = basis_h0 @ (m_inv @ (basis_h0.T @ s))
        out.append(x)
    return out


def chart_from_S0(graph: StarGraph, s, grad_tol: float = 1e-12) -> ManifoldPoint:
    """The unique manifold point whose S0 projection is s."""
    s = np.asarray(s, dtype=float)
    sym = subspace_project(graph, s, "S0")
    if np.max(np.abs(s - sym)) > 1e-10:
        raise NotInDomain("chart input is not in S0")
    return project_to_manifold(graph, s, grad_tol=grad_tol).point


def holding_rates(graph: StarGraph, u) -> np.ndarray:
    """beta_i(u) = sum_{j : i -> j} W_ij exp(u_{j*} - u_{i*})."""
    u = np.asarray(u, dtype=float)
    tails, heads = graph.edges[:, 0], graph.edges[:, 1]
    contrib = graph.weights * np.exp(u[graph.star[heads]] - u[graph.star[tails]])
    beta = np.zeros(graph.n)
    np.add.at(beta, tails, contrib)
    return beta


def root_complement(graph: StarGraph, i0: int) -> np.ndarray:
    """Indices of I = V minus {i0, i0*}, sorted."""
    drop = {int(i0), int(graph.star[i0])}
    return np.array([i for i in range(graph.n) if i not in drop], dtype=int)


def xi_forward(graph: StarGraph, point: ManifoldPoint, i0: int):
    """Holding-rate coordinates of a manifold point.

    Returns (beta_full, beta_I, I). beta is symmetric and H_beta e^{u*} = 0;
    the restricted potential beta_I - W_II is positive stable.
    """
    u = point.h
    beta = holding_rates(graph, u)
    if np.max(np.abs(beta - beta[graph.star])) > 1e-9 * (1.0 + np.max(beta)):
        raise NotOnManifold("holding rates not symmetric; point off the manifold")
    idx = root_complement(graph, i0)
    w = graph.weight_matrix()
    h_hat = np.diag(beta[idx]) - w[np.ix_(idx, idx)]
    if len(idx) and not positive_stable(h_hat):
        raise NotPositiveStable("restricted potential not positive stable")
    return beta, beta[idx], idx


def xi_inverse(graph: StarGraph, beta_I, i0: int):
    """Inverse of xi_forward: manifold point from holding rates off the root pair.

    Returns (point, beta_full) where beta at the root pair is completed from
    the Schur-reduced weights. Raises NotInDomain when beta_I is outside the
    admissible set.
    """
    i0 = int(i0)
    i0s = int(graph.star[i0])
    idx = root_complement(graph, i0)
    comp = np.array(sorted({i0, i0s}), dtype=int)
    beta_I = np.asarray(beta_I, dtype=float)
    w = graph.weight_matrix()

    h_hat = np.diag(beta_I) - w[np.ix_(idx, idx)]
    if len(idx):
        try:
            ok = positive_stable(h_hat)
        except NotPositiveStable:
            ok = False
        if not ok:
            raise NotInDomain("beta_I - W_II not positive stable")
        g_hat = np.linalg.inv(h_hat)
    else:
        g_hat = np.zeros((0, 0))
    w_check = w[np.ix_(comp, comp)] + w[np.ix_(comp, idx)] @ g_hat @ w[np.ix_(idx, comp)]

    beta = np.zeros(graph.n)
    beta[idx] = beta_I
    log_y = np.zeros(graph.n)  # log of e^{u*}, up to the common constant
    if i0 == i0s:
        beta[i0] = w_check[0, 0]
        t = g_hat @ w[idx, i0] if len(idx) else np.zeros(0)
        if len(idx) and np.min(t) <= 0.0:
            raise NotInDomain("reduced tilt has a nonpositive component")
        log_y[i0] = 0.0
        log_y[idx] = np.log(t) if len(idx) else t
    else:
        p0 = int(np.where(comp == i0)[0][0])
        p1 = 1 - p0
        if w_check[p0, p1] <= 0.0 or w_check[p1, p0] <= 0.0:
            raise NotInDomain("reduced weights across the root pair vanish")
        root_val = np.sqrt(w_check[p0, p1] * w_check[p1, p0])
        beta[i0] = beta[i0s] = w_check[p0, p0] + root_val
        log_y[i0] = 0.5 * np.log(w_check[p0, p1])
        log_y[i0s] = 0.5 * np.log(w_check[p1, p0])
        if len(idx):
            t = g_hat @ (w[np.ix_(idx, comp)] @ np.exp(log_y[comp]))
            if np.min(t) <= 0.0:
                raise NotInDomain("reduced tilt has a nonpositive component")
            log_y[idx] = np.log(t)

    u = log_y[graph.star]
    u -= u.mean()
    res = _manifold_residual(graph, u)
    if res > RESIDUAL_TOL:
        raise NotInDomain(f"inverse left the manifold, residual {res:.3e}")
    return ManifoldPoint(h=u, residual=res), beta


def jacobian_factor(graph: StarGraph, point: ManifoldPoint, i0: int) -> float:
    """Volume distortion of the change of variables beta_I = xi_forward(u).

    d beta_I = factor * d sigma(u) with sigma the volume measure pulled back
    from S0 coordinates.
    """
    u = point.h
    d_root = 1.0 if graph.star[i0] == i0 else 2.0
    idx = set(root_complement(graph, i0).tolist())
    reps_I = [i for i in graph.reps if i in idx]
    log_scale = -sum(u[i] + u[graph.star[i]] for i in reps_I)
    _, k = tilted_generator(graph, u)
    d_tree = tree_determinant(graph, u)
    det_a = restricted_determinant(-k, graph, "A")
    return float(d_root * 2.0 ** (-graph.n_pairs / 2.0) * np.exp(log_scale)
                 * np.sqrt(graph.n) * d_tree / det_a)


def project_to_manifold_batch(graph: StarGraph, u_batch: np.ndarray,
                              grad_tol: float = 1e-12, max_iter: int = 200) -> np.ndarray:
    """Vectorized Newton projection of many tilts at once.

    Returns the manifold points as an array (batch, |V|); the antisymmetric
    parts are u_batch (mean removed) minus the result.
    """
    u0 = np.asarray(u_batch, dtype=float)
    u0 = u0 - u0.mean(axis=1, keepdims=True)
    reps = graph.pair_reps
    n1 = len(reps)
    nb = u0.shape[0]
    if n1 == 0:
        return u0
    star = graph.star
    tails, heads = graph.edges[:, 0], graph.edges[:, 1]
    log_wu = np.log(graph.weights)[None, :] + u0[:, tails] + u0[:, star[heads]]
    coef = np.zeros(graph.n)
    coef[reps] = 1.0
    coef[star[reps]] = -1.0
    # per-edge signed exponent of each pair coordinate
    emap = np.zeros((graph.m, n1))
    for k, p in enumerate(reps):
        emap[:, k] = (heads == p).astype(float) - (tails == p).astype(float) \
            + (heads == star[p]).astype(float) * -1.0 + (tails == star[p]).astype(float)
    # a enters as e^{a_head - a_tail} with a_i = +x on reps, -x on partners

    def we_of(x):
        return np.exp(log_wu + x @ emap.T)

    def val_grad(x):
        we = we_of(x)
        val = we.sum(axis=1)
        grad = np.einsum("be,ek->bk", we, emap)
        return val, grad, we

    x = np.zeros((nb, n1))
    val, grad, we = val_grad(x)
    for _ in range(max_iter):
        gmax = np.max(np.abs(grad), axis=1)
        live = gmax > grad_tol
        if not live.any():
            break
        hess = np.einsum("be,ek,el->bkl", we[live], emap, emap)
        dx = np.linalg.solve(hess, -grad[live][:, :, None])[:, :, 0]
        step = np.ones(live.sum())
        xl = x[live]
        vl = val[live]
        for _ in range(60):
            cand = xl + step[:, None] * dx
            v_new = we_of_rows(log_wu, live, cand, emap).sum(axis=1)
            bad = ~(np.isfinite(v_new) & (v_new <= vl + 1e-12 * (1.0 + np.abs(vl))))
            if not bad.any():
                break
            step[bad] *= 0.5
        x[live] = xl + step[:, None] * dx
        val, grad, we = val_grad(x)
    else:
        raise MaxIterations("batch projection did not converge")
    a_full = np.zeros((nb, graph.n))
    a_full[:, reps] = x
    a_full[:, star[reps]] = -x
    return u0 - a_full


def we_of_rows(log_wu, live, x_rows, emap):
    return np.exp(log_wu[live] + x_rows @ emap.T)
