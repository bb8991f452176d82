"""Densities on the symmetric / antisymmetric coordinate spaces and their integrals.

Conventions. A symmetric field beta on a self-dual vertex set carries one
coordinate per representative (d beta is the product of those coordinates);
an antisymmetric field carries one coordinate per dual-pair representative.
All densities are evaluated in log space with an explicit support flag.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .errors import (
    DimensionTooLarge,
    InstanceTooLarge,
    NotSelfDual,
    QuadratureFailure,
    RootedNeedsEta,
    UnknownIdentity,
)
from .graph import StarGraph
from .linalg import positive_stable, restricted_determinant, subspace_basis, tilted_generator
from .manifold import ManifoldPoint, chart_from_S0, holding_rates, root_complement, tree_determinant
from .quadrature import (
    batched_logconcave_1d,
    bisect_threshold,
    gaussian_importance_normalize,
    nested_quad,
)

QUADRATURE_DIM_CAP = 4

LOG_ZERO = -np.inf


@dataclass
class PotentialConfig:
    """Bundle (theta, eta, I, root) parameterizing the potential measures."""

    theta: np.ndarray | float = 1.0
    eta: np.ndarray | float = 0.0
    subset: tuple = ()
    root: int | None = None

    def expand(self, n):
        theta = np.asarray(self.theta, dtype=float) + np.zeros(n)
        eta = np.asarray(self.eta, dtype=float) + np.zeros(n)
        if np.any(theta <= 0.0):
            raise ValueError("theta must be positive")
        if np.any(eta < 0.0):
            raise ValueError("eta must be nonnegative")
        return theta, eta


@dataclass
class DensityValue:
    log_density: float
    in_support: bool

    @property
    def density(self) -> float:
        return float(np.exp(self.log_density)) if self.in_support else 0.0


@dataclass
class SubsetView:
    """A self-dual vertex subset with its restricted involution and weights."""

    idx: np.ndarray
    star: np.ndarray
    w: np.ndarray
    fixed: np.ndarray
    pair_reps: np.ndarray
    reps: np.ndarray


def subset_view(graph: StarGraph, subset=None, weight_matrix=None) -> SubsetView:
    idx = np.arange(graph.n) if subset is None else np.asarray(sorted(subset), dtype=int)
    pos = {int(v): k for k, v in enumerate(idx)}
    try:
        star = np.array([pos[int(graph.star[v])] for v in idx], dtype=int)
    except KeyError as err:
        raise NotSelfDual(f"subset {idx.tolist()} is not star-invariant") from err
    wfull = graph.weight_matrix() if weight_matrix is None else weight_matrix
    w = wfull[np.ix_(idx, idx)]
    local = np.arange(len(idx))
    fixed = local[star == local]
    pair_reps = local[local < star]
    return SubsetView(idx=idx, star=star, w=w, fixed=fixed, pair_reps=pair_reps,
                      reps=np.sort(np.concatenate([fixed, pair_reps])))


def _star_form(view: SubsetView, x, y) -> float:
    return float(np.dot(np.asarray(x)[view.star], y))


def beta_from_coords(view: SubsetView, coords) -> np.ndarray:
    beta = np.empty(len(view.idx))
    coords = np.asarray(coords, dtype=float)
    beta[view.reps] = coords
    beta[view.star[view.reps]] = coords
    return beta


def a_from_coords(view: SubsetView, coords) -> np.ndarray:
    a = np.zeros(len(view.idx))
    coords = np.asarray(coords, dtype=float)
    a[view.pair_reps] = coords
    a[view.star[view.pair_reps]] = -coords
    return a


def log_nu_sym(view: SubsetView, theta, eta, beta) -> DensityValue:
    """Density of the beta-potential measure w.r.t. d beta on the subset."""
    if len(view.idx) == 0:
        return DensityValue(0.0, True)
    h = np.diag(beta) - view.w
    if not positive_stable(h, cross_check=False):
        return DensityValue(LOG_ZERO, False)
    sign, logdet = np.linalg.slogdet(h)
    if sign <= 0:
        return DensityValue(LOG_ZERO, False)
    g = np.linalg.inv(h)
    val = (np.sum(np.log(theta[view.fixed]))
           - 0.5 * len(view.reps) * np.log(2 * np.pi)
           - 0.5 * _star_form(view, theta, h @ theta)
           - 0.5 * _star_form(view, eta, g @ eta)
           + _star_form(view, theta, eta)
           - 0.5 * logdet)
    return DensityValue(float(val), True)


_EXP_CAP = 600.0


def log_nu_asym(view: SubsetView, theta, eta, a) -> DensityValue:
    """Density of the antisymmetric-side measure w.r.t. the pair coordinates.

    Evaluated edge-wise with exponent guards: once any exponent exceeds the
    floating range the density has underflowed to zero exactly.
    """
    a = np.asarray(a, dtype=float)
    iw, jw = np.nonzero(view.w)
    expo = a[iw] + a[view.star[jw]]
    if expo.size and expo.max() > _EXP_CAP:
        return DensityValue(LOG_ZERO, True)
    quad_a = float(np.sum(view.w[iw, jw] * theta[view.star[iw]] * theta[jw] * np.exp(expo)))
    quad_0 = float(np.sum(view.w[iw, jw] * theta[view.star[iw]] * theta[jw]))
    eta_expo = a[view.star]
    if eta_expo.size and np.max(eta_expo[eta[view.star] > 0], initial=-np.inf) > _EXP_CAP:
        return DensityValue(LOG_ZERO, True)
    lin = float(np.dot(eta[view.star], theta * np.exp(np.minimum(eta_expo, _EXP_CAP)) - theta))
    val = (-0.5 * len(view.pair_reps) * np.log(2 * np.pi)
           - 0.5 * quad_a + 0.5 * quad_0 - lin)
    return DensityValue(float(val), True)


def nu_A_density(graph: StarGraph, a, config: PotentialConfig) -> DensityValue:
    """Antisymmetric-side density; rooted variant multiplies theta_i0 e^{a_{i0*}}."""
    theta, eta = config.expand(graph.n)
    view = subset_view(graph)
    a = np.asarray(a, dtype=float)
    out = log_nu_asym(view, theta, eta, a)
    if config.root is not None:
        i0 = int(config.root)
        out = DensityValue(out.log_density + np.log(theta[i0]) + a[graph.star[i0]],
                           out.in_support)
    return out


def nu_S_density(graph: StarGraph, beta, config: PotentialConfig) -> DensityValue:
    """Symmetric-side density; rooted variant multiplies (G_beta eta)_{i0}."""
    theta, eta = config.expand(graph.n)
    view = subset_view(graph)
    beta = np.asarray(beta, dtype=float)
    out = log_nu_sym(view, theta, eta, beta)
    if config.root is not None:
        if not np.any(eta > 0.0):
            raise RootedNeedsEta("rooted symmetric measure requires eta != 0")
        if out.in_support:
            g = np.linalg.inv(np.diag(beta) - view.w)
            out = DensityValue(out.log_density + np.log((g @ eta)[int(config.root)]),
                               True)
    return out


def _q_pieces(graph: StarGraph, config: PotentialConfig):
    theta, eta = config.expand(graph.n)
    inner = subset_view(graph, config.subset)
    outer = subset_view(graph, [i for i in range(graph.n) if i not in set(inner.idx.tolist())])
    wfull = graph.weight_matrix()
    return theta, eta, inner, outer, wfull


def q_I_density(graph: StarGraph, beta_I, a_Ic, config: PotentialConfig) -> DensityValue:
    """Joint density on (beta over I) x (antisymmetric field over I^c).

    Explicit product form; the rooted variant multiplies (G_hat eta_hat^a)_{i0}
    for a root in I and theta^a_{i0} for a root in I^c.
    """
    theta, eta, inner, outer, wfull = _q_pieces(graph, config)
    beta_I = np.asarray(beta_I, dtype=float)
    a_Ic = np.asarray(a_Ic, dtype=float)

    if len(inner.idx):
        h_hat = np.diag(beta_I) - inner.w
        if not positive_stable(h_hat, cross_check=False):
            return DensityValue(LOG_ZERO, False)
        sign, logdet = np.linalg.slogdet(h_hat)
        if sign <= 0:
            return DensityValue(LOG_ZERO, False)
        g_hat = np.linalg.inv(h_hat)
    else:
        logdet = 0.0
        g_hat = np.zeros((0, 0))

    a_full = np.zeros(graph.n)
    a_full[outer.idx] = a_Ic
    theta_a = np.exp(a_full[graph.star]) * theta
    w_cross = wfull[np.ix_(inner.idx, outer.idx)]
    eta_hat_a = eta[inner.idx] + w_cross @ theta_a[outer.idx]

    view_all = subset_view(graph)
    t_in = theta[inner.idx]
    t_in_star = theta[graph.star[inner.idx]]
    ta_out = theta_a[outer.idx]
    t_out = theta[outer.idx]
    log_val = (float(np.sum(np.log(theta[inner.idx[inner.fixed]])))
               - 0.5 * (len(inner.reps) + len(outer.pair_reps)) * np.log(2 * np.pi)
               - 0.5 * float(np.dot(t_in_star, beta_I * t_in))
               - 0.5 * logdet)
    if len(inner.idx):
        log_val -= 0.5 * float(np.dot(eta_hat_a[inner.star], g_hat @ eta_hat_a))
    log_val -= 0.5 * float(np.dot(ta_out[outer.star], outer.w @ ta_out))
    log_val -= float(np.dot(eta[graph.star[outer.idx]], ta_out - t_out))
    log_val += 0.5 * _star_form(view_all, theta, wfull @ theta)
    # the inner rooted-measure pairing of eta with theta survives the product
    log_val += float(np.dot(eta[graph.star[inner.idx]], t_in))

    if config.root is not None:
        i0 = int(config.root)
        if i0 in set(inner.idx.tolist()):
            pos = int(np.where(inner.idx == i0)[0][0])
            log_val += np.log((g_hat @ eta_hat_a)[pos])
        else:
            log_val += np.log(theta_a[i0])
    return DensityValue(float(log_val), True)


def q_I_factorizations(graph: StarGraph, beta_I, a_Ic, config: PotentialConfig):
    """The two product factorizations of the joint density.

    Returns (log via hat eta^a, log via reduced weights); both must agree with
    the explicit form pointwise on the support.
    """
    theta, eta, inner, outer, wfull = _q_pieces(graph, config)
    beta_I = np.asarray(beta_I, dtype=float)
    a_Ic = np.asarray(a_Ic, dtype=float)

    a_full = np.zeros(graph.n)
    a_full[outer.idx] = a_Ic
    theta_a = np.exp(a_full[graph.star]) * theta
    w_cross_in = wfull[np.ix_(inner.idx, outer.idx)]
    w_cross_out = wfull[np.ix_(outer.idx, inner.idx)]

    eta_hat = eta[inner.idx] + w_cross_in @ theta[outer.idx]
    eta_hat_a = eta[inner.idx] + w_cross_in @ theta_a[outer.idx]

    f1_beta = log_nu_sym(inner, theta[inner.idx], eta_hat_a, beta_I)
    f1_a = log_nu_asym(outer, theta[outer.idx], eta[outer.idx] + w_cross_out @ theta[inner.idx],
                       a_full[outer.idx])
    log1 = f1_beta.log_density + f1_a.log_density if f1_beta.in_support else LOG_ZERO

    if f1_beta.in_support and len(inner.idx):
        g_hat = np.linalg.inv(np.diag(beta_I) - inner.w)
        w_check = outer.w + w_cross_out @ g_hat @ w_cross_in
        eta_check = eta[outer.idx] + w_cross_out @ g_hat @ eta[inner.idx]
    else:
        w_check = outer.w
        eta_check = eta[outer.idx]
    f2_beta = log_nu_sym(inner, theta[inner.idx], eta_hat, beta_I)
    outer_check = SubsetView(idx=outer.idx, star=outer.star, w=w_check, fixed=outer.fixed,
                             pair_reps=outer.pair_reps, reps=outer.reps)
    f2_a = log_nu_asym(outer_check, theta[outer.idx], eta_check, a_full[outer.idx])
    log2 = f2_beta.log_density + f2_a.log_density if f2_beta.in_support else LOG_ZERO
    return log1, log2


def nu_S_factorization(graph: StarGraph, beta, config: PotentialConfig) -> float:
    """log of nu_S restricted-product form over (I, I^c); compare to nu_S_density."""
    theta, eta, inner, outer, wfull = _q_pieces(graph, config)
    beta = np.asarray(beta, dtype=float)
    w_cross_in = wfull[np.ix_(inner.idx, outer.idx)]
    w_cross_out = wfull[np.ix_(outer.idx, inner.idx)]
    eta_hat = eta[inner.idx] + w_cross_in @ theta[outer.idx]
    fb = log_nu_sym(inner, theta[inner.idx], eta_hat, beta[inner.idx])
    if not fb.in_support:
        return LOG_ZERO
    g_hat = np.linalg.inv(np.diag(beta[inner.idx]) - inner.w) if len(inner.idx) else np.zeros((0, 0))
    w_check = outer.w + w_cross_out @ g_hat @ w_cross_in
    eta_check = eta[outer.idx] + w_cross_out @ g_hat @ eta[inner.idx]
    outer_check = SubsetView(idx=outer.idx, star=outer.star, w=w_check, fixed=outer.fixed,
                             pair_reps=outer.pair_reps, reps=outer.reps)
    fc = log_nu_sym(outer_check, theta[outer.idx], eta_check, beta[outer.idx])
    if not fc.in_support:
        return LOG_ZERO
    return fb.log_density + fc.log_density


def nu_A_factorization(graph: StarGraph, a, config: PotentialConfig) -> float:
    """log of nu_A product form over (I, I^c); compare to nu_A_density."""
    theta, eta, inner, outer, wfull = _q_pieces(graph, config)
    a = np.asarray(a, dtype=float)
    theta_a = np.exp(a[graph.star]) * theta
    w_cross_in = wfull[np.ix_(inner.idx, outer.idx)]
    w_cross_out = wfull[np.ix_(outer.idx, inner.idx)]
    eta_hat_a = eta[inner.idx] + w_cross_in @ theta_a[outer.idx]
    eta_hat_c = eta[outer.idx] + w_cross_out @ theta[inner.idx]
    fi = log_nu_asym(inner, theta[inner.idx], eta_hat_a, a[inner.idx])
    fo = log_nu_asym(outer, theta[outer.idx], eta_hat_c, a[outer.idx])
    return fi.log_density + fo.log_density


def mu_density(graph: StarGraph, point: ManifoldPoint, i0: int) -> DensityValue:
    """Mixing-measure density w.r.t. the manifold volume measure."""
    u = point.h
    tails, heads = graph.edges[:, 0], graph.edges[:, 1]
    ratio_sum = float(np.sum(graph.weights
                             * (np.exp(u[graph.star[heads]] - u[graph.star[tails]]) - 1.0)))
    _, k = tilted_generator(graph, u)
    d_tree = tree_determinant(graph, u)
    det_a = restricted_determinant(-k, graph, "A")
    log_val = (0.5 * np.log(graph.n)
               - 0.5 * graph.n_pairs * np.log(2.0)
               - 0.5 * (graph.n_fixed + graph.n_pairs - 1) * np.log(2 * np.pi)
               + u[graph.star[int(i0)]] - float(np.sum(u[graph.fixed_vertices]))
               - 0.5 * ratio_sum
               + 0.5 * np.log(d_tree) - np.log(det_a))
    return DensityValue(float(log_val), True)


def closed_root_density(graph: StarGraph, beta_I, i0: int) -> DensityValue:
    """Closed form of the rooted symmetric measure on the singular support.

    Defined on the coordinates beta_I over the complement of the root pair;
    beta at the root pair is completed from the reduced weights.
    """
    i0 = int(i0)
    idx = root_complement(graph, i0)
    comp = np.array(sorted({i0, int(graph.star[i0])}), dtype=int)
    w = graph.weight_matrix()
    beta_I = np.asarray(beta_I, dtype=float)
    h_hat = np.diag(beta_I) - w[np.ix_(idx, idx)]
    if len(idx):
        if not positive_stable(h_hat, cross_check=False):
            return DensityValue(LOG_ZERO, False)
        sign, logdet = np.linalg.slogdet(h_hat)
        g_hat = np.linalg.inv(h_hat)
    else:
        logdet = 0.0
        g_hat = np.zeros((0, 0))
    w_check = w[np.ix_(comp, comp)] + w[np.ix_(comp, idx)] @ g_hat @ w[np.ix_(idx, comp)]
    inner = subset_view(graph, idx.tolist())
    n_reps_I = len(inner.reps)
    view_all = subset_view(graph)
    sum_w = 0.5 * _star_form(view_all, np.ones(graph.n), w @ np.ones(graph.n))

    if i0 == int(graph.star[i0]):
        beta_root = w_check[0, 0]
        log_val = (-0.5 * n_reps_I * np.log(2 * np.pi) - 0.5 * logdet
                   - 0.5 * (np.sum(beta_I) + beta_root) + sum_w)
    else:
        p0 = int(np.where(comp == i0)[0][0])
        p1 = 1 - p0
        cross = w_check[p0, p1] * w_check[p1, p0]
        if cross <= 0:
            return DensityValue(LOG_ZERO, False)
        beta_root = w_check[p0, p0] + np.sqrt(cross)
        log_val = (-np.log(2.0) - 0.5 * np.log(w_check[p1, p0])
                   - 0.5 * n_reps_I * np.log(2 * np.pi) - 0.5 * logdet
                   - 0.5 * (np.sum(beta_I) + 2.0 * beta_root) + sum_w)
    return DensityValue(float(log_val), True)

# ---------------------------------------------------------------------------
# normalization integrals


def _support_threshold(graph: StarGraph, view: SubsetView, level: int, outer_coords):
    """Lower integration bound for rep coordinate ``level`` in the nu_S nest.

    Valid completions exist iff the potential block over the classes fixed so
    far is positive stable; the indicator is monotone in each coordinate.
    """
    reps = view.reps
    block_local = []
    for r in reps[: level + 1]:
        block_local.append(r)
        if view.star[r] != r:
            block_local.append(int(view.star[r]))
    block_local = np.array(sorted(block_local), dtype=int)

    def indicator(x):
        beta = np.zeros(len(view.idx))
        coords = list(outer_coords) + [x]
        for r, c in zip(reps[: level + 1], coords):
            beta[r] = c
            beta[view.star[r]] = c
        h = np.diag(beta[block_local]) - view.w[np.ix_(block_local, block_local)]
        return positive_stable(h, cross_check=False)

    return bisect_threshold(indicator, 1e-9, 1.0, tol=1e-11)


def normalize(graph: StarGraph, which: str, config: PotentialConfig,
              mode: str = "auto", epsrel: float = 1e-9, n_is: int = 200_000,
              rng=None):
    """Total mass of one of the measures {nu_A, nu_S, q_I, mu}.

    Quadrature (adaptive, nested) for integration dimension <= 4; the
    antisymmetric side falls back to self-normalized importance sampling with
    a Gaussian proposal above that. Returns (value, error_estimate).
    """
    theta, eta = config.expand(graph.n)
    view = subset_view(graph)

    if which == "nu_A":
        dim = graph.n_pairs

        def f(coords):
            a = a_from_coords(view, coords)
            return nu_A_density(graph, a, config).density

        if dim <= QUADRATURE_DIM_CAP and mode != "is":
            return nested_quad(f, [(-np.inf, np.inf)] * dim, epsrel=epsrel)
        if mode == "quad":
            raise DimensionTooLarge(f"nu_A quadrature dimension {dim} > {QUADRATURE_DIM_CAP}")
        if rng is None:
            raise ValueError("importance sampling needs an rng")

        def log_f(x):
            a = a_from_coords(view, x)
            return nu_A_density(graph, a, config).log_density

        return gaussian_importance_normalize(log_f, dim, n_is, rng)

    if which == "nu_S":
        dim = len(view.reps)
        if dim > QUADRATURE_DIM_CAP:
            raise DimensionTooLarge(f"nu_S quadrature dimension {dim} > {QUADRATURE_DIM_CAP}")

        def f(coords):
            beta = beta_from_coords(view, coords)
            return nu_S_density(graph, beta, config).density

        bounds = []
        for lev in range(dim):
            bounds.append(lambda outer, lev=lev:
                          (_support_threshold(graph, view, lev, outer), np.inf))
        return nested_quad(f, bounds, epsrel=epsrel)

    if which == "q_I":
        inner = subset_view(graph, config.subset)
        outer_idx = [i for i in range(graph.n) if i not in set(inner.idx.tolist())]
        outer = subset_view(graph, outer_idx)
        dim_b = len(inner.reps)
        dim_a = len(outer.pair_reps)
        if dim_b + dim_a > QUADRATURE_DIM_CAP:
            raise DimensionTooLarge(f"q_I quadrature dimension {dim_b + dim_a} > {QUADRATURE_DIM_CAP}")

        def f(coords):
            beta_I = beta_from_coords(inner, coords[:dim_b])
            a_Ic = a_from_coords(outer, coords[dim_b:])
            return q_I_density(graph, beta_I, a_Ic, config).density

        bounds = []
        for lev in range(dim_b):
            bounds.append(lambda outerc, lev=lev:
                          (_support_threshold(graph, inner, lev, outerc[:lev]), np.inf))
        bounds.extend([(-np.inf, np.inf)] * dim_a)
        return nested_quad(f, bounds, epsrel=epsrel)

    if which == "mu":
        if config.root is None:
            raise ValueError("mu needs a root vertex")
        basis = subspace_basis(graph, "S0")
        dim = basis.shape[1]
        if dim > QUADRATURE_DIM_CAP:
            raise DimensionTooLarge(f"mu quadrature dimension {dim} > {QUADRATURE_DIM_CAP}")
        if dim == 0:
            point = chart_from_S0(graph, np.zeros(graph.n))
            return mu_density(graph, point, int(config.root)).density, 0.0

        def log_f(coords):
            s = basis @ np.asarray(coords)
            point = chart_from_S0(graph, s)
            return mu_density(graph, point, int(config.root)).log_density

        box = mu_support_box(log_f, dim)

        def f(coords):
            return float(np.exp(log_f(coords)))

        return nested_quad(f, box, epsrel=epsrel)

    raise UnknownIdentity(f"unknown measure {which!r}")


def mu_support_box(log_f, dim, drop=50.0, cap=80.0):
    """Axis-aligned box outside which the manifold density is negligible.

    The pushforward density decays doubly exponentially, so expanding each
    semi-axis until the log drops by ``drop`` loses nothing at the target
    tolerances while keeping the chart projection well conditioned.
    """
    center = np.zeros(dim)
    ref = log_f(center)
    box = []
    for k in range(dim):
        lims = []
        for sgn in (-1.0, 1.0):
            t = 1.0
            while t < cap:
                x = center.copy()
                x[k] = sgn * t
                try:
                    val = log_f(x)
                except Exception:
                    break
                if val < ref - drop:
                    break
                t *= 1.5
            lims.append(sgn * min(t, cap))
        box.append((lims[0], lims[1]))
    return box


def root_normalization(graph: StarGraph, i0: int, weights=None, epsrel=1e-9) -> float:
    """F_{i0} for the given edge weights: mass of the rooted antisymmetric measure."""
    g = graph if weights is None else graph.with_weights(weights)
    val, _ = normalize(g, "nu_A", PotentialConfig(root=int(i0)), epsrel=epsrel)
    return val


def _edge_pair_exponent(graph: StarGraph) -> np.ndarray:
    """Integer exponent of each edge weight in the single-pair coordinate."""
    coef = np.zeros(graph.n)
    p = graph.pair_reps[0]
    coef[p] = 1.0
    coef[graph.star[p]] = -1.0
    tails, heads = graph.edges[:, 0], graph.edges[:, 1]
    return coef[tails] + coef[graph.star[heads]]


def root_normalization_batch(graph: StarGraph, i0: int, tau_batch: np.ndarray,
                             chunk: int = 20_000) -> np.ndarray:
    """log F^{W^tau}_{i0} for a batch of local-time tilts; needs one dual pair.

    Vectorized counterpart of ``root_normalization`` on graphs whose
    antisymmetric space is one dimensional.
    """
    if graph.n_pairs != 1:
        raise DimensionTooLarge("batched normalization requires exactly one dual pair")
    tau_batch = np.asarray(tau_batch, dtype=float)
    ms = _edge_pair_exponent(graph)
    tails, heads = graph.edges[:, 0], graph.edges[:, 1]
    p = graph.pair_reps[0]
    slope_sigma = 1.0 if graph.star[int(i0)] == p else (-1.0 if int(i0) == p else 0.0)

    groups = np.unique(ms)
    out = np.empty(len(tau_batch))
    for a in range(0, len(tau_batch), chunk):
        tb = tau_batch[a:a + chunk]
        wtau = graph.weights[None, :] * np.exp(tb[:, tails] + tb[:, graph.star[heads]])
        coeffs = np.stack([0.5 * wtau[:, ms == g].sum(axis=1) for g in groups], axis=1)
        logint = batched_logconcave_1d(np.full(len(tb), slope_sigma), coeffs, groups)
        out[a:a + chunk] = (logint - 0.5 * np.log(2 * np.pi)
                            + 0.5 * wtau.sum(axis=1))
    return out


def log_r_weight(graph: StarGraph, i: int, tau, point: ManifoldPoint,
                 log_f_tau: float | None = None, epsrel: float = 1e-9) -> float:
    """log of the Radon-Nikodym weight tying the randomized law to the Markov one."""
    u = point.h
    tau = np.asarray(tau, dtype=float)
    tails, heads = graph.edges[:, 0], graph.edges[:, 1]
    star = graph.star
    if log_f_tau is None:
        f_tau = root_normalization(graph, i, weights=graph.tilted_weights(tau), epsrel=epsrel)
        log_f_tau = float(np.log(f_tau))
    quad_term = -0.5 * float(np.sum(
        graph.weights * (np.exp(tau[tails] + tau[star[heads]])
                         - np.exp(tau[tails] + tau[star[tails]]
                                  + u[star[heads]] - u[star[tails]]))))
    return (log_f_tau + quad_term + tau[star[int(i)]] - u[star[int(i)]]
            - float(np.sum(tau[graph.fixed_vertices])))


# ---------------------------------------------------------------------------
# scalar integral identities (quartic / cubic pair)


def bessel_k0(h: float) -> float:
    """K_0(h) by quadrature of the cosh representation (reference oracle)."""
    span = abs(np.log(1500.0 / h)) + 14.0
    val, _ = integrate.quad(lambda t: np.exp(-h * np.cosh(t)) if h * np.cosh(t) < 745 else 0.0,
                            0.0, span, epsabs=0.0, epsrel=1e-13, limit=400)
    return val


def lagrange_integrals(A: float, B: float, h: float, with_roots: bool = True,
                       u_offset: float = 1.0):
    """Both sides of the quartic/cubic integral identity plus a roots report.

    lhs integrates exp(-h Q(x) / (2 x^2)) dx/x with Q = x^4 + 2A x^3 + 2B x + 1;
    rhs integrates exp(-h P(x) / (x^2 - 1)) dx/sqrt(x^2 - 1) from 1 with
    P = x^3 + (AB - 1) x + (A^2 + B^2)/2. The roots report compares the cubic
    roots (at a level u above the critical value) with the pairwise products
    of the quartic roots.
    """
    if A < 0 or B < 0 or h <= 0:
        raise QuadratureFailure("need A >= 0, B >= 0, h > 0")

    def q_of(x):
        return x**4 + 2 * A * x**3 + 2 * B * x + 1.0

    # substitution x = e^t makes the left side a smooth integral on R;
    # Q(e^t)/(2 e^{2t}) = (e^{2t} + 2A e^t + 2B e^{-t} + e^{-2t}) / 2
    def lhs_t(t):
        arg = h * 0.5 * (np.exp(2 * t) + 2 * A * np.exp(t)
                         + 2 * B * np.exp(-t) + np.exp(-2 * t))
        return np.exp(-arg) if arg < 745.0 else 0.0

    t_span = 0.5 * abs(np.log(1500.0 / h)) + 14.0
    lhs, lhs_err = integrate.quad(lhs_t, -t_span, t_span, epsabs=0.0, epsrel=1e-13,
                                  limit=400)

    # substitution x = cosh(v) removes the endpoint singularity;
    # P(x)/(x^2-1) = x + (AB x + (A^2+B^2)/2) / sinh(v)^2
    c0 = 0.5 * (A**2 + B**2)

    def rhs_v(v):
        x = np.cosh(v)
        s2 = np.sinh(v) ** 2
        if s2 <= 0.0:
            return 0.0 if A * B + c0 > 0.0 else np.exp(-h)
        arg = h * (x + (A * B * x + c0) / s2)
        return np.exp(-arg) if arg < 745.0 else 0.0

    v_span = abs(np.log(1500.0 / h)) + 14.0
    rhs, rhs_err = integrate.quad(rhs_v, 0.0, v_span, epsabs=0.0, epsrel=1e-13,
                                  limit=400)

    report = None
    if with_roots:
        from scipy.optimize import minimize_scalar

        res = minimize_scalar(lambda x: q_of(x) / (2.0 * x * x), bounds=(1e-9, 50.0),
                              method="bounded")
        u_crit = float(res.fun)
        u = u_crit + abs(u_offset)
        quartic = np.roots([1.0, 2 * A, -2 * u, 2 * B, 1.0])
        cubic = np.roots([1.0, -u, A * B - 1.0, 0.5 * (A**2 + B**2) + u])
        pos = np.sort(quartic[quartic.real > 0].real)
        neg = np.sort(quartic[quartic.real < 0].real)
        a_r, b_r = pos[0], pos[1]
        c_r, d_r = neg[0], neg[1]
        predicted = np.sort([-0.5 * (a_r * b_r + c_r * d_r),
                             -0.5 * (a_r * c_r + b_r * d_r),
                             -0.5 * (a_r * d_r + b_r * c_r)])
        observed = np.sort(cubic.real)
        report = {
            "u": u,
            "u_critical": u_crit,
            "quartic_roots": quartic,
            "cubic_roots": observed,
            "resolvent_roots": predicted,
            "max_mismatch": float(np.max(np.abs(observed - predicted))),
        }
    return lhs, rhs, {"lhs_err": lhs_err, "rhs_err": rhs_err, "roots": report}

# ---------------------------------------------------------------------------
# named identity checks


@dataclass
class IdentityReport:
    name: str
    instance: str
    discrepancy: float
    tolerance: float
    passed: bool
    details: dict = field(default_factory=dict)

    def record(self) -> dict:
        return {
            "identity": self.name,
            "instance": self.instance,
            "discrepancy": self.discrepancy,
            "tolerance": self.tolerance,
            "passed": bool(self.passed),
        }


def _rel(x, y):
    return abs(x - y) / max(abs(x), abs(y), 1e-300)


def sample_in_support(graph: StarGraph, config: PotentialConfig, rng, stream: int,
                      n_points: int):
    """Random (beta, a) pairs with all restricted potentials comfortably stable."""
    view = subset_view(graph)
    w = graph.weight_matrix()
    row = np.abs(w).sum(axis=1)
    pts = []
    for k in range(n_points):
        c = rng.uniform(stream, np.arange(2 * graph.n) + 2 * graph.n * k)
        beta = row + 0.2 + 2.0 * c[: graph.n]
        beta = 0.5 * (beta + beta[graph.star])
        a_coord = 1.5 * (c[graph.n:] - 0.5)
        a = np.zeros(graph.n)
        a[view.pair_reps] = a_coord[: len(view.pair_reps)]
        a[view.star[view.pair_reps]] = -a_coord[: len(view.pair_reps)]
        pts.append((beta, a))
    return pts


def verify_identity(graph: StarGraph, name: str, config: PotentialConfig | None = None,
                    tolerance: float = 1e-8, rng=None, n_points: int = 20,
                    points=None, epsrel: float = 1e-9) -> IdentityReport:
    """Run one named numerical identity and report the measured discrepancy."""
    from . import manifold as mf
    from .linalg import restricted_inverse_determinant

    config = config or PotentialConfig()
    if graph.n > 16:
        raise InstanceTooLarge(f"identity checks are desk scale, |V|={graph.n}")
    inst = f"{graph.digest()}"
    det = {}

    if name in ("eq-beta", "eq_beta"):
        fs, es = normalize(graph, "nu_S", config, epsrel=epsrel)
        fa, ea = normalize(graph, "nu_A", config, epsrel=epsrel)
        disc = _rel(fs, fa)
        det = {"nu_S": fs, "nu_A": fa, "quad_errors": (es, ea)}
    elif name in ("partial-integration", "integrale-partielle"):
        fs, es = normalize(graph, "nu_S", config, epsrel=epsrel)
        fq, eq2 = normalize(graph, "q_I", config, epsrel=epsrel)
        fa, ea = normalize(graph, "nu_A", config, epsrel=epsrel)
        disc = max(_rel(fs, fq), _rel(fq, fa), _rel(fs, fa))
        det = {"nu_S": fs, "q_I": fq, "nu_A": fa}
    elif name == "conditioning":
        pts = points or sample_in_support(graph, config, rng, 7001, n_points)
        inner = subset_view(graph, config.subset)
        outer = subset_view(graph, [i for i in range(graph.n)
                                    if i not in set(inner.idx.tolist())])
        disc = 0.0
        for beta, a in pts:
            ls = nu_S_density(graph, beta, config).log_density
            ls_f = nu_S_factorization(graph, beta, config)
            la = nu_A_density(graph, a, config).log_density
            la_f = nu_A_factorization(graph, a, config)
            lq = q_I_density(graph, beta[inner.idx], a[outer.idx], config).log_density
            l1, l2 = q_I_factorizations(graph, beta[inner.idx], a[outer.idx], config)
            disc = max(disc, abs(ls - ls_f), abs(la - la_f), abs(lq - l1), abs(lq - l2))
        det = {"n_points": len(pts)}
    elif name in ("ratio-det", "tree-det"):
        pts = points
        if pts is None:
            raise ValueError("determinant identities need manifold points")
        disc = 0.0
        for point in pts:
            _, k = tilted_generator(graph, point.h)
            lhs_h0 = restricted_determinant(-k, graph, "H0")
            if name == "ratio-det":
                val = (restricted_determinant(-k, graph, "A")
                       / restricted_inverse_determinant(graph, k, "S0"))
            else:
                val = graph.n * tree_determinant(graph, point.h)
            disc = max(disc, _rel(val, lhs_h0))
        det = {"n_points": len(pts)}
    elif name == "identity-mixing":
        root = int(config.root if config.root is not None else 0)
        fmu, emu = normalize(graph, "mu", PotentialConfig(root=root), epsrel=epsrel)
        fa = root_normalization(graph, root, epsrel=epsrel)
        disc = _rel(fmu, fa)
        det = {"mu_mass": fmu, "F_root": fa}
    elif name == "jacobian":
        root = int(config.root if config.root is not None else 0)
        basis = subspace_basis(graph, "S0")
        dim = basis.shape[1]
        if dim == 0:
            raise InstanceTooLarge("jacobian check needs a positive-dimensional manifold")
        idx = mf.root_complement(graph, root)
        reps_I = [i for i in sorted(set(idx.tolist()) & set(graph.reps.tolist()))]
        if len(reps_I) != dim:
            raise InstanceTooLarge("coordinate counts disagree; wrong root choice")
        pts = points or [np.zeros(dim)]
        step = 1e-5
        disc = 0.0
        for s0 in pts:
            def beta_coords(svec):
                pt = chart_from_S0(graph, basis @ svec)
                beta = holding_rates(graph, pt.h)
                return beta[reps_I]

            jac = np.zeros((dim, dim))
            for kk in range(dim):
                e = np.zeros(dim)
                e[kk] = step
                jac[:, kk] = (beta_coords(s0 + e) - beta_coords(s0 - e)) / (2 * step)
            fd = abs(np.linalg.det(jac))
            closed = mf.jacobian_factor(graph, chart_from_S0(graph, basis @ s0), root)
            disc = max(disc, _rel(fd, closed))
        det = {"n_points": len(pts), "dim": dim}
    elif name == "pullback-mu":
        root = int(config.root if config.root is not None else 0)
        pts = points
        if pts is None:
            raise ValueError("pullback check needs manifold points")
        disc = 0.0
        for point in pts:
            beta, beta_I, _ = mf.xi_forward(graph, point, root)
            log_closed = closed_root_density(graph, beta_I, root).log_density
            log_jac = np.log(mf.jacobian_factor(graph, point, root))
            log_mu = mu_density(graph, point, root).log_density
            disc = max(disc, abs((log_closed + log_jac) - log_mu))
        det = {"n_points": len(pts)}
    elif name == "lagrange":
        disc = 0.0
        for aa in (0.0, 0.5, 1.0, 2.0):
            for bb in (0.0, 0.5, 1.0, 2.0):
                for hh in (0.5, 1.0, 2.0):
                    lhs, rhs, rep = lagrange_integrals(aa, bb, hh)
                    disc = max(disc, _rel(lhs, rhs))
                    if rep["roots"] is not None:
                        disc = max(disc, rep["roots"]["max_mismatch"])
        det = {"grid": "A,B in {0,.5,1,2} x h in {.5,1,2}"}
        inst = "scalar"
    else:
        raise UnknownIdentity(f"no identity named {name!r}")

    return IdentityReport(name=name, instance=inst, discrepancy=float(disc),
                          tolerance=tolerance, passed=bool(disc <= tolerance),
                          details=det)
