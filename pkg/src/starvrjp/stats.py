"""Monte-Carlo estimation harness and the distributional test battery.

Every report embeds the seed, graph digest and parameters; standard errors
come from batch means over at least 30 batches; acceptance bands are 3
standard errors and chi-square tests use p > 0.01.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .errors import DepthTooLarge, DimensionTooLarge
from .graph import StarGraph, check_divergence_condition
from .linalg import subspace_basis
from .manifold import holding_rates, project_to_manifold_batch, root_complement
from .measures import (
    PotentialConfig,
    a_from_coords,
    beta_from_coords,
    nested_quad,
    normalize,
    nu_S_density,
    q_I_density,
    root_normalization,
    root_normalization_batch,
    subset_view,
    log_r_weight,
    mu_density,
    mu_support_box,
)
from .manifold import chart_from_S0
from .rng import CounterRng, StreamDraw
from .simulate import (
    BatchVRJP,
    enumerate_errw_paths,
    run_mixing_I,
    sample_initial_A_batch,
    time_change,
    vrjp_path_density,
    z_path_log_density,
    z_path_to_trajectory,
)

MIN_BATCHES = 32


@dataclass
class McReport:
    name: str
    seed: int
    n_samples: int
    graph: str
    stats: dict = field(default_factory=dict)
    passed: bool = True
    notes: str = ""

    def add(self, key, value, se=None, ref=None, band=3.0):
        entry = {"value": float(value)}
        if se is not None:
            entry["se"] = float(se)
        if ref is not None:
            entry["ref"] = float(ref)
            if se is not None and se > 0:
                entry["z"] = (float(value) - float(ref)) / float(se)
                entry["ok"] = bool(abs(entry["z"]) <= band)
            else:
                entry["ok"] = bool(value == ref)
            self.passed = self.passed and entry["ok"]
        self.stats[key] = entry

    def add_pvalue(self, key, pvalue, threshold=0.01):
        ok = bool(pvalue > threshold)
        self.stats[key] = {"pvalue": float(pvalue), "threshold": threshold, "ok": ok}
        self.passed = self.passed and ok

    def add_bound(self, key, value, bound):
        ok = bool(value <= bound)
        self.stats[key] = {"value": float(value), "bound": float(bound), "ok": ok}
        self.passed = self.passed and ok

    def record(self) -> dict:
        return {
            "report": self.name,
            "seed": self.seed,
            "n_samples": self.n_samples,
            "graph": self.graph,
            "passed": bool(self.passed),
            "stats": self.stats,
            "notes": self.notes,
        }


def batch_se(values: np.ndarray, n_batches: int = MIN_BATCHES):
    """Mean and batch-means standard error along the first axis."""
    values = np.asarray(values, dtype=float)
    n = len(values)
    nb = min(n_batches, n)
    mean = values.mean(axis=0)
    means = np.array([b.mean(axis=0) for b in np.array_split(values, nb)])
    se = means.std(axis=0, ddof=1) / math.sqrt(nb)
    return mean, se


def tilted_lane_weights(graph: StarGraph, a_batch: np.ndarray) -> np.ndarray:
    """Per-lane conductances W^a for a batch of vertex fields."""
    tails, heads = graph.edges[:, 0], graph.edges[:, 1]
    return graph.weights[None, :] * np.exp(a_batch[:, tails] + a_batch[:, graph.star[heads]])


def holding_rates_batch(graph: StarGraph, u_batch: np.ndarray) -> np.ndarray:
    """Vectorized holding rates: beta_i(u) per lane."""
    tails, heads = graph.edges[:, 0], graph.edges[:, 1]
    contrib = graph.weights[None, :] * np.exp(u_batch[:, graph.star[heads]]
                                              - u_batch[:, graph.star[tails]])
    out = np.zeros_like(u_batch)
    for e in range(graph.m):
        out[:, tails[e]] += contrib[:, e]
    return out


def _moment_functions(basis_dim: int):
    """First and second moments plus two nonlinear test functions on S0 coords."""
    funcs = []
    for k in range(basis_dim):
        funcs.append((f"mean_s{k}", lambda s, k=k: s[k]))
    for k in range(basis_dim):
        funcs.append((f"second_s{k}", lambda s, k=k: s[k] ** 2))
    funcs.append(("soft_exp", lambda s: math.exp(-float(np.dot(s, s)))))
    funcs.append(("soft_log", lambda s: math.log1p(float(np.dot(s, s)))))
    return funcs


def mu_moments_quadrature(graph: StarGraph, i0: int, funcs, epsrel=1e-7):
    """Normalized moments of the S0 projection under the mixing measure."""
    basis = subspace_basis(graph, "S0")
    dim = basis.shape[1]
    if dim > 3:
        raise DimensionTooLarge("moment quadrature limited to dim(S0) <= 3")

    def log_f(coords):
        point = chart_from_S0(graph, basis @ np.asarray(coords))
        return mu_density(graph, point, i0).log_density

    box = mu_support_box(log_f, dim)
    mass, _ = nested_quad(lambda c: math.exp(log_f(c)), box, epsrel=epsrel)
    out = {}
    for name, fn in funcs:
        val, _ = nested_quad(lambda c: math.exp(log_f(c)) * fn(np.asarray(c)),
                             box, epsrel=epsrel)
        out[name] = val / mass
    return out


def estimate_mixing(graph: StarGraph, i0: int, n_traj: int, t_max: float, seed: int,
                    window_frac: float = 0.2, rate_band: float = 0.05,
                    epsrel: float = 1e-7) -> McReport:
    """Randomized runs against quadrature moments of the mixing measure.

    Compares first/second moments (plus two nonlinear observables) of the S0
    projection of the estimated limit, and the late-window empirical jump
    rates against the limiting Markov rates.
    """
    rng = CounterRng(seed)
    report = McReport(name="estimate_mixing", seed=seed, n_samples=n_traj,
                      graph=graph.digest())
    a_batch, acc = sample_initial_A_batch(graph, i0, rng.derive("initial-field"),
                                          n_traj)
    weights = tilted_lane_weights(graph, a_batch)
    engine = BatchVRJP(graph, rng.derive("trajectories"))
    out = engine.run(i0, n_traj, t_max=t_max, weights=weights,
                     collect=("window",), window_t0=(1.0 - window_frac) * t_max)
    drift = out["T_elapsed"] - t_max / graph.n
    u_batch = project_to_manifold_batch(graph, drift)

    basis = subspace_basis(graph, "S0")
    s_coords = u_batch @ basis
    funcs = _moment_functions(basis.shape[1])
    refs = mu_moments_quadrature(graph, i0, funcs, epsrel=epsrel)
    samples = {name: np.array([fn(s) for s in s_coords]) for name, fn in funcs}
    for name, _ in funcs:
        mean, se = batch_se(samples[name])
        report.add(name, mean, se=se, ref=refs[name])

    # empirical jump rates over the late window vs the limiting Markov rates
    tails, heads = graph.edges[:, 0], graph.edges[:, 1]
    pred = graph.weights[None, :] * np.exp(u_batch[:, graph.star[heads]]
                                           - u_batch[:, graph.star[tails]])
    expected = out["ell_window"][:, tails] * pred
    counts = out["edge_counts"].astype(float)
    for e in range(graph.m):
        tot_c = counts[:, e].sum()
        tot_e = expected[:, e].sum()
        ratio = tot_c / tot_e
        report.add_bound(f"rate_ratio_e{e}", abs(ratio - 1.0),
                         rate_band + 3.0 / math.sqrt(max(tot_c, 1.0)))
    report.notes = f"mcmc acceptance mean {float(np.mean(acc)):.3f}"
    return report


def martingale_check(graph: StarGraph, i0: int, t_values, n_traj: int, seed: int) -> McReport:
    """Sample mean of R(i0, 0) / R(state at t) under the randomized law."""
    rng = CounterRng(seed)
    report = McReport(name="martingale", seed=seed, n_samples=n_traj, graph=graph.digest())
    from .manifold import project_to_manifold

    point = project_to_manifold(graph, np.zeros(graph.n)).point
    log_r0 = log_r_weight(graph, i0, np.zeros(graph.n), point)
    a_batch, _ = sample_initial_A_batch(graph, i0, rng.derive("initial-field"), n_traj)
    weights = tilted_lane_weights(graph, a_batch)
    star = graph.star
    tails, heads = graph.edges[:, 0], graph.edges[:, 1]
    u = point.h
    fixed = graph.fixed_vertices
    for t in t_values:
        engine = BatchVRJP(graph, rng.derive(f"traj-t{t}"))
        out = engine.run(i0, n_traj, t_max=float(t), weights=weights)
        T = out["T_elapsed"]
        xf = out["x_final"]
        # the rooted normalization depends on the final vertex: group lanes
        log_f = np.empty(n_traj)
        for v in np.unique(xf):
            sel = xf == v
            log_f[sel] = root_normalization_batch(graph, int(v), T[sel])
        quad = -0.5 * np.sum(graph.weights[None, :]
                             * (np.exp(T[:, tails] + T[:, star[heads]])
                                - np.exp(T[:, tails] + T[:, star[tails]]
                                         + u[star[heads]] - u[star[tails]])), axis=1)
        log_r_t = (log_f + quad + T[np.arange(n_traj), star[xf]] - u[star[xf]]
                   - T[:, fixed].sum(axis=1))
        ratio = np.exp(log_r0 - log_r_t)
        mean, se = batch_se(ratio)
        report.add(f"mean_ratio_t{t}", mean, se=se, ref=1.0)
    return report


def first_jump_oracle(graph: StarGraph, i0: int, t_grid_points: int = 3000,
                      t_cap: float = 20.0):
    """Exact first-jump target law of the randomized process from (i0, 0).

    The annealed jump rate to j is W^{T}_ij F_j / F_{i0} with T = t at the
    start vertex; the target law follows by integrating the competing risks
    on a dense grid (trapezoid, with the survival factor accumulated).
    """
    star = graph.star
    eids = graph.out_edges[int(i0)]
    heads = [int(graph.edges[e, 1]) for e in eids]
    ts = np.linspace(0.0, t_cap, t_grid_points)
    taus = np.zeros((t_grid_points, graph.n))
    taus[:, int(i0)] = ts
    log_f = {v: root_normalization_batch(graph, v, taus)
             for v in sorted(set(heads + [int(i0)]))}
    rates = np.empty((t_grid_points, len(eids)))
    for k, (e, h) in enumerate(zip(eids, heads)):
        doubling = 2.0 if star[h] == int(i0) else 1.0
        rates[:, k] = (graph.weights[e] * np.exp(doubling * ts)
                       * np.exp(log_f[h] - log_f[int(i0)]))
    total = rates.sum(axis=1)
    dt = ts[1] - ts[0]
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (total[1:] + total[:-1]) * dt)])
    surv = np.exp(-cum)
    probs = np.array([np.trapezoid(rates[:, k] * surv, ts) for k in range(len(eids))])
    mean_time = float(np.trapezoid(ts * total * surv, ts))
    tail = float(surv[-1])
    return {h: p for h, p in zip(heads, probs)}, mean_time, tail


def test_exchangeability(graph: StarGraph, alpha_or_w, i0: int, depth: int,
                         mode: str = "errw", seed: int = 0) -> McReport:
    """Exact within-group path-probability spread for count-equivalent paths."""
    report = McReport(name=f"exchangeability_{mode}", seed=seed, n_samples=0,
                      graph=graph.digest())
    if mode == "errw":
        alpha = np.asarray(alpha_or_w, dtype=float)
        report.notes = ("divergence condition holds"
                        if check_divergence_condition(graph, alpha, i0)
                        else "divergence condition violated")
        paths = enumerate_errw_paths(graph, alpha, i0, depth)
        groups = {}
        eid = {(int(i), int(j)): k for k, (i, j) in enumerate(graph.edges)}
        for path, prob in paths:
            counts = np.zeros(graph.m, dtype=int)
            for a, b in zip(path[:-1], path[1:]):
                counts[eid[(a, b)]] += 1
            key = (tuple(counts), path[-1])
            groups.setdefault(key, []).append(prob)
        spread = 0.0
        for probs in groups.values():
            if len(probs) > 1:
                m = np.mean(probs)
                spread = max(spread, float(np.max(np.abs(np.array(probs) - m)) / m))
        report.add_bound("within_group_spread", spread, 1e-12)
        report.n_samples = len(paths)
        return report

    if mode == "vrjp":
        if depth > 6:
            raise DepthTooLarge(f"depth {depth} > 6")
        groups = _count_equivalent_z_paths(graph, i0, depth)
        spread = 0.0
        closed_gap = 0.0
        n_paths = 0
        for members, s_max in groups:
            logs = []
            for verts, s_times in members:
                traj = z_path_to_trajectory(graph, i0, verts, s_times, s_max)
                log_t = vrjp_path_density(graph, traj, "randomized")
                jac = _time_change_log_jacobian(graph, traj)
                log_z = log_t + jac
                closed = z_path_log_density(graph, i0, verts, s_times, s_max)
                closed_gap = max(closed_gap, abs(log_z - closed))
                logs.append(log_z)
                n_paths += 1
            if len(logs) > 1:
                spread = max(spread, float(np.max(logs) - np.min(logs)))
        report.add_bound("within_group_log_spread", spread, 1e-10)
        report.add_bound("closed_form_gap", closed_gap, 1e-9)
        report.n_samples = n_paths
        return report
    raise ValueError(f"unknown mode {mode!r}")


def _time_change_log_jacobian(graph: StarGraph, traj) -> float:
    """log of prod dt_l/ds_l along the trajectory (elapsed local times)."""
    star = graph.star
    T = np.zeros(graph.n)
    pos = traj.start
    prev = 0.0
    out = 0.0
    for tk, target in traj.events:
        T[pos] += tk - prev
        prev = tk
        out -= T[pos] + T[star[pos]]
        pos = target
    return out


def _count_equivalent_z_paths(graph: StarGraph, i0: int, depth: int):
    """Groups of depth-step vertex paths with equal counts, endpoint and local times."""
    eid = {(int(i), int(j)): k for k, (i, j) in enumerate(graph.edges)}
    paths = []

    def rec(pos, path):
        if len(path) - 1 == depth:
            paths.append(tuple(path))
            return
        for e in graph.out_edges[pos]:
            nxt = int(graph.edges[e, 1])
            rec(nxt, path + [nxt])

    rec(int(i0), [int(i0)])
    groups = {}
    for path in paths:
        counts = np.zeros(graph.m, dtype=int)
        for a, b in zip(path[:-1], path[1:]):
            counts[eid[(a, b)]] += 1
        groups.setdefault((tuple(counts), path[-1]), []).append(path)

    out = []
    for (counts, end), members in groups.items():
        if len(members) < 2:
            continue
        # same per-vertex time budget for every member: each visit of v
        # receives budget_v / (number of visits of v in the path), so all
        # members share the final local times and the horizon
        budget = {v: 0.15 + 0.1 * (v % 3) for v in set(members[0])}
        dressed = []
        total = 0.0
        for path in members:
            visits = {v: path.count(v) for v in set(path)}
            durs = [budget[v] / visits[v] for v in path]
            s_times = np.cumsum(durs)[:-1]
            dressed.append((list(path), s_times.tolist()))
            total = float(np.sum(durs))
        out.append((dressed, total))
    return out


def _pooled_chisquare(observed: np.ndarray, expected: np.ndarray, min_expected: float = 5.0):
    """Chi-square p-value with small expected cells pooled into one bucket."""
    order = np.argsort(expected)
    obs = observed[order].astype(float)
    exp = expected[order].astype(float)
    while len(exp) > 2 and exp[0] < min_expected:
        exp[1] += exp[0]
        obs[1] += obs[0]
        obs, exp = obs[1:], exp[1:]
    # absorb any rounding mismatch so scipy sees matched totals
    exp *= obs.sum() / exp.sum()
    return float(sps.chisquare(obs, exp).pvalue)


def test_gamma_mixture(graph: StarGraph, alpha, i0: int, n_steps: int, n_samples: int,
                       seed: int, randomized: bool = False) -> McReport:
    """Jump chains of the mixed jump process against exact reinforced-walk laws.

    Edge-class conductances are independent Gamma(alpha_e) variables; with
    ``randomized`` the initial antisymmetric field is annealed as well (the
    divergence condition must hold for the comparison to be exact).
    """
    from scipy.special import gammaincinv

    if n_steps > 6:
        raise DepthTooLarge(f"n_steps {n_steps} > 6")
    rng = CounterRng(seed)
    report = McReport(name="gamma_mixture" + ("_randomized" if randomized else ""),
                      seed=seed, n_samples=n_samples, graph=graph.digest())
    alpha = np.asarray(alpha, dtype=float)
    classes = graph.edge_classes()
    self_star = [len(members) == 1 for members in classes]
    gamma_rng = rng.derive("gamma")
    w_lane = np.empty((n_samples, graph.m))
    for c, members in enumerate(classes):
        u = gamma_rng.uniform(np.arange(n_samples, dtype=np.uint64), c)
        # involution-fixed classes reinforce by 2 per crossing and their clock
        # runs at speed 2: the matching conductance prior is Gamma(a/2, scale 2)
        if self_star[c]:
            draw = 2.0 * gammaincinv(0.5 * alpha[members[0]], u)
        else:
            draw = gammaincinv(alpha[members[0]], u)
        for e in members:
            w_lane[:, e] = draw

    if randomized:
        if not check_divergence_condition(graph, alpha, i0):
            report.notes = "divergence condition violated; mixture is not exact"
        a_batch, _ = sample_initial_A_batch(graph, i0, rng.derive("initial-field"),
                                            n_samples, weights=w_lane)
        tails, heads = graph.edges[:, 0], graph.edges[:, 1]
        run_w = w_lane * np.exp(a_batch[:, tails] + a_batch[:, graph.star[heads]])
        # invariance of the annealed conductances: W^A should match Gamma moments
        for c, members in enumerate(classes):
            e = members[0]
            mean, se = batch_se(run_w[:, e])
            report.add(f"annealed_mean_class{c}", mean, se=se, ref=alpha[e])
            var_ref = 2.0 * alpha[e] if self_star[c] else alpha[e]
            var_mean, var_se = batch_se((run_w[:, e] - alpha[e]) ** 2)
            report.add(f"annealed_second_class{c}", var_mean, var_se, ref=var_ref)
    else:
        run_w = w_lane

    engine = BatchVRJP(graph, rng.derive("chains"))
    out = engine.run(i0, n_samples, n_jumps=n_steps, weights=run_w, collect=("path",))
    paths = [tuple(p) for p in out["paths"]]

    exact = enumerate_errw_paths(graph, alpha, i0, n_steps)
    index = {p: k for k, (p, _) in enumerate(exact)}
    expected = np.array([pr for _, pr in exact]) * n_samples
    observed = np.zeros(len(exact))
    for p in paths:
        observed[index[p]] += 1
    report.add_pvalue("chi_square_paths", _pooled_chisquare(observed, expected))
    return report


def _sample_beta_subset(graph: StarGraph, subset, eta_hat, rng: CounterRng, n_chains: int,
                        burn_in: int = 1200, stream_base: int = 0):
    """RW-Metropolis draws of the restricted potential on a self-dual subset."""
    inner = subset_view(graph, subset)
    dim = len(inner.reps)
    theta_I = np.ones(len(inner.idx))

    def logf(coords):
        vals = np.empty(len(coords))
        from .measures import log_nu_sym

        for k, c in enumerate(coords):
            beta = beta_from_coords(inner, c)
            vals[k] = log_nu_sym(inner, theta_I, eta_hat, beta).log_density
        return vals

    start = np.abs(inner.w).sum(axis=1).max() + 1.0
    x = np.full((n_chains, dim), start)
    lf = logf(x)
    step = np.full(n_chains, 0.6)
    streams = stream_base + np.arange(n_chains, dtype=np.uint64)
    window = np.zeros(n_chains)
    counter = 0
    for k in range(burn_in):
        z = np.stack([rng.normal(streams, counter + 2 * j) for j in range(dim)], axis=1)
        u = rng.uniform(streams, counter + 2 * dim)
        counter += 2 * dim + 1
        prop = x + step[:, None] * z
        lfp = logf(prop)
        acc = np.log(u) < (lfp - lf)
        x[acc] = prop[acc]
        lf[acc] = lfp[acc]
        window += acc
        if (k + 1) % 64 == 0:
            step *= np.exp(0.6 * (window / 64 - 0.4))
            window[:] = 0.0
    return x


def q_I_moments(graph: StarGraph, config: PotentialConfig, funcs, epsrel=1e-7):
    """Normalized moments of the joint law on (beta over I, field over I^c)."""
    from .measures import _support_threshold

    inner = subset_view(graph, config.subset)
    outer = subset_view(graph, [i for i in range(graph.n)
                                if i not in set(inner.idx.tolist())])
    dim_b = len(inner.reps)
    dim_a = len(outer.pair_reps)
    if dim_b + dim_a > 4:
        raise DimensionTooLarge("moment quadrature dimension exceeds 4")

    def split(coords):
        return (beta_from_coords(inner, coords[:dim_b]),
                a_from_coords(outer, coords[dim_b:]))

    def dens(coords):
        beta_I, a_Ic = split(coords)
        return q_I_density(graph, beta_I, a_Ic, config).density

    bounds = []
    for lev in range(dim_b):
        bounds.append(lambda outerc, lev=lev:
                      (_support_threshold(graph, inner, lev, outerc[:lev]), np.inf))
    bounds.extend([(-np.inf, np.inf)] * dim_a)
    mass, _ = nested_quad(dens, bounds, epsrel=epsrel)
    out = {}
    for name, fn in funcs:
        val, _ = nested_quad(lambda c: dens(c) * fn(np.asarray(c)), bounds, epsrel=epsrel)
        out[name] = val / mass
    return out


def test_beta_marginals(graph: StarGraph, i0: int, subset, n_traj: int, t_max: float,
                        seed: int, epsrel=1e-6) -> McReport:
    """Asymptotic holding rates and initial field against the joint quadrature law."""
    rng = CounterRng(seed)
    report = McReport(name="beta_marginals", seed=seed, n_samples=n_traj,
                      graph=graph.digest())
    subset = np.asarray(sorted(subset), dtype=int)
    a_batch, _ = sample_initial_A_batch(graph, i0, rng.derive("initial-field"), n_traj)
    weights = tilted_lane_weights(graph, a_batch)
    engine = BatchVRJP(graph, rng.derive("trajectories"))
    out = engine.run(i0, n_traj, t_max=t_max, weights=weights)
    u_batch = project_to_manifold_batch(graph, out["T_elapsed"] - t_max / graph.n)
    betas = holding_rates_batch(graph, u_batch)

    inner = subset_view(graph, subset)
    outer = subset_view(graph, [i for i in range(graph.n) if i not in set(subset.tolist())])
    config = PotentialConfig(subset=tuple(subset.tolist()), root=int(i0))

    funcs = []
    for k, r in enumerate(inner.reps):
        gidx = inner.idx[r]
        funcs.append((f"beta_mean_{graph.names[gidx]}", lambda c, k=k: c[k]))
        funcs.append((f"beta_second_{graph.names[gidx]}", lambda c, k=k: c[k] ** 2))
    for j, p in enumerate(outer.pair_reps):
        gidx = outer.idx[p]
        funcs.append((f"a_mean_{graph.names[gidx]}",
                      lambda c, j=j, db=len(inner.reps): c[db + j]))
        funcs.append((f"a_second_{graph.names[gidx]}",
                      lambda c, j=j, db=len(inner.reps): c[db + j] ** 2))
    refs = q_I_moments(graph, config, funcs, epsrel=epsrel)

    beta_coords = betas[:, inner.idx[inner.reps]]
    a_coords = a_batch[:, outer.idx[outer.pair_reps]]
    for k, r in enumerate(inner.reps):
        gidx = inner.idx[r]
        mean, se = batch_se(beta_coords[:, k])
        report.add(f"beta_mean_{graph.names[gidx]}", mean, se,
                   ref=refs[f"beta_mean_{graph.names[gidx]}"])
        mean2, se2 = batch_se(beta_coords[:, k] ** 2)
        report.add(f"beta_second_{graph.names[gidx]}", mean2, se2,
                   ref=refs[f"beta_second_{graph.names[gidx]}"])
    for j, p in enumerate(outer.pair_reps):
        gidx = outer.idx[p]
        mean, se = batch_se(a_coords[:, j])
        report.add(f"a_mean_{graph.names[gidx]}", mean, se,
                   ref=refs[f"a_mean_{graph.names[gidx]}"])
        mean2, se2 = batch_se(a_coords[:, j] ** 2)
        report.add(f"a_second_{graph.names[gidx]}", mean2, se2,
                   ref=refs[f"a_second_{graph.names[gidx]}"])

    if graph.star[int(i0)] == int(i0):
        report_g_ratio_moments(graph, i0, u_batch, report, epsrel=max(epsrel, 1e-6))
    return report


def report_g_ratio_moments(graph: StarGraph, i0: int, u_batch: np.ndarray,
                           report: McReport, epsrel=1e-6):
    """Green-ratio moments under the potential law vs exp(U_j - U_{i0}) samples."""
    view = subset_view(graph)
    dim = len(view.reps)
    if dim > 3:
        raise DimensionTooLarge("Green-ratio quadrature needs dim(S) <= 3")
    others = [j for j in range(graph.n) if j != int(i0)]
    config = PotentialConfig()

    def dens_and_ratio(coords):
        beta = beta_from_coords(view, coords)
        d = nu_S_density(graph, beta, config)
        if not d.in_support:
            return 0.0, np.zeros(len(others))
        g = np.linalg.inv(np.diag(beta) - graph.weight_matrix())
        r = np.array([g[int(i0), j] for j in others]) / g[int(i0), int(i0)]
        return d.density, r

    from .measures import _support_threshold

    bounds = [lambda outerc, lev=lev: (_support_threshold(graph, view, lev, outerc), np.inf)
              for lev in range(dim)]
    mass, _ = nested_quad(lambda c: dens_and_ratio(c)[0], bounds, epsrel=epsrel)
    for kk, j in enumerate(others):
        val, _ = nested_quad(lambda c: (lambda d, r: d * r[kk])(*dens_and_ratio(c)),
                             bounds, epsrel=epsrel)
        ref = val / mass
        samples = np.exp(u_batch[:, j] - u_batch[:, int(i0)])
        mean, se = batch_se(samples)
        report.add(f"g_ratio_{graph.names[j]}", mean, se, ref=ref)


def test_first_jump(graph: StarGraph, i0: int, n_traj: int, seed: int,
                    use_mixing_engine: bool = False, rate_perturbation=None) -> McReport:
    """Empirical first-jump law of the randomized process vs the annealed-rate oracle.

    ``use_mixing_engine`` routes the simulation through the interpolated
    process with an empty frozen set (which must coincide with the randomized
    law); ``rate_perturbation`` = (edge_id, factor) is a negative control.
    """
    rng = CounterRng(seed)
    report = McReport(name="first_jump" + ("_mixing" if use_mixing_engine else ""),
                      seed=seed, n_samples=n_traj, graph=graph.digest())
    probs, mean_time, tail = first_jump_oracle(graph, i0)
    report.notes = f"oracle survival tail {tail:.2e}"

    a_batch, _ = sample_initial_A_batch(graph, i0, rng.derive("initial-field"), n_traj)
    weights = tilted_lane_weights(graph, a_batch)
    if rate_perturbation is not None:
        e, fac = rate_perturbation
        weights = weights.copy()
        weights[:, e] *= fac
    if use_mixing_engine:
        targets = np.empty(n_traj, dtype=int)
        times = np.empty(n_traj)
        for k in range(n_traj):
            traj = run_mixing_I(graph, i0, (), (), a_batch[k], t_max=np.inf,
                                draw=StreamDraw(rng.derive("mixing"), k), max_jumps=1)
            times[k], targets[k] = traj.events[0]
    else:
        engine = BatchVRJP(graph, rng.derive("trajectories"))
        out = engine.run(i0, n_traj, n_jumps=1, weights=weights, collect=("jump1",))
        targets = out["jump1_target"]
        times = out["jump1_time"]

    for h, p_ref in sorted(probs.items()):
        phat = float(np.mean(targets == h))
        se = math.sqrt(max(phat * (1 - phat), 1e-12) / n_traj)
        report.add(f"p_target_{graph.names[h]}", phat, se, ref=p_ref)
    mean, se = batch_se(times)
    report.add("mean_first_time", mean, se, ref=mean_time)
    return report


def test_mixing_interpolation_markov(graph: StarGraph, i0: int, n_traj: int, seed: int,
                                     depth: int = 2, s_window: float = 40.0,
                                     occupation_lanes: int = 1500) -> McReport:
    """Frozen holding rates off the root: Markov behavior after the time change.

    Samples the restricted potential, runs the interpolated process, and
    checks (a) the jump chain against the plain process two-sample, (b) the
    per-lane occupation fractions against the invariant measure of the
    limiting Markov rates.
    """
    if graph.star[int(i0)] != int(i0):
        raise DimensionTooLarge("this check is for a self-dual root")
    rng = CounterRng(seed)
    report = McReport(name="mixing_interpolation", seed=seed, n_samples=n_traj,
                      graph=graph.digest())
    subset = root_complement(graph, i0)
    inner = subset_view(graph, subset)
    w = graph.weight_matrix()
    eta_hat = w[np.ix_(subset, [int(i0)])].sum(axis=1)
    beta_chains = _sample_beta_subset(graph, subset, eta_hat, rng.derive("beta"), n_traj)

    # jump chains of the interpolated process
    paths_mix = []
    mix_rng = rng.derive("mixing")
    a_zero = np.zeros(graph.n)
    for k in range(n_traj):
        beta_I = beta_from_coords(inner, beta_chains[k])
        traj = run_mixing_I(graph, i0, subset, beta_I, a_zero, t_max=np.inf,
                            draw=StreamDraw(mix_rng, k), max_jumps=depth)
        paths_mix.append(tuple(traj.vertices()))

    # the plain process has the same jump-chain law
    engine = BatchVRJP(graph, rng.derive("plain"))
    out = engine.run(i0, n_traj, n_jumps=depth, collect=("path",))
    paths_plain = [tuple(p[: depth + 1]) for p in out["paths"]]

    keys = sorted(set(paths_mix) | set(paths_plain))
    idx = {p: k for k, p in enumerate(keys)}
    c1 = np.zeros(len(keys))
    c2 = np.zeros(len(keys))
    for p in paths_mix:
        c1[idx[p]] += 1
    for p in paths_plain:
        c2[idx[p]] += 1
    keep = (c1 + c2) >= 10
    table = np.stack([np.append(c1[keep], c1[~keep].sum()),
                      np.append(c2[keep], c2[~keep].sum())])
    table = table[:, table.sum(axis=0) > 0]
    report.add_pvalue("jump_chain_two_sample", float(sps.chi2_contingency(table).pvalue))

    # occupation fractions against the invariant measure of the frozen rates
    from .manifold import xi_inverse

    occ_rng = rng.derive("occupation")
    # exchangeable time grows like (N/2) e^{2t/N}; aim t_max at s ~ s_window
    t_occ = 0.5 * graph.n * math.log(2.0 * s_window / graph.n)
    diffs = {v: [] for v in range(graph.n)}
    for k in range(occupation_lanes):
        beta_I = beta_from_coords(inner, beta_chains[k])
        point, _ = xi_inverse(graph, beta_I, i0)
        u = point.h
        pi = np.exp(u + u[graph.star])
        pi /= pi.sum()
        traj = run_mixing_I(graph, i0, subset, beta_I, a_zero,
                            t_max=t_occ, draw=StreamDraw(occ_rng, k),
                            max_events=100_000)
        view = time_change(graph, traj)
        ell = view.ell(view.s_max)
        for v in range(graph.n):
            diffs[v].append(ell[v] / view.s_max - pi[v])
    for v in range(graph.n):
        mean, se = batch_se(np.array(diffs[v]))
        report.add(f"occupation_gap_{graph.names[v]}", mean, se, ref=0.0)
    return report
