"""Exact simulation of the reinforced walks and jump processes.

Event-driven sampling inverts the cumulative hazard in closed form: with
y = e^s the integrated hazard of every holding period has the shape
c1 (y - 1) + c2 (y^2 - 1) / 2, so waiting times solve a quadratic in y.
The alternative scheme drives each star-edge class by a Poisson point
process read through the class clock (exact as well).

Trajectories record (time, target) events; initial local time offsets enter
the rates but the exchangeable time change and path functionals use elapsed
occupation times, matching the zero-initial convention of the theory.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DepthTooLarge,
    HorizonTooLarge,
    InvalidPath,
    MixingFailure,
    NotConverged,
    NotInDomain,
)
from .graph import StarGraph
from .linalg import positive_stable
from .manifold import ManifoldPoint, project_to_manifold
from .rng import CounterRng, StreamDraw

EVENT_CAP = 5_000_000


# ---------------------------------------------------------------------------
# trajectory containers


@dataclass
class Trajectory:
    start: int
    tau: np.ndarray                 # initial local-time offsets entering the rates
    events: list = field(default_factory=list)   # (time, target) pairs, time increasing
    t_max: float = 0.0
    weights: np.ndarray | None = None            # edge conductances used by the run

    def vertices(self):
        return [self.start] + [v for _, v in self.events]

    def elapsed_times(self, graph: StarGraph, t: float | None = None) -> np.ndarray:
        """Occupation time per vertex accumulated on [0, t], without tau."""
        t = self.t_max if t is None else t
        out = np.zeros(graph.n)
        pos = self.start
        prev = 0.0
        for tk, target in self.events:
            if tk > t:
                break
            out[pos] += tk - prev
            prev = tk
            pos = target
        out[pos] += max(t - prev, 0.0)
        return out

    def local_times(self, graph: StarGraph, t: float | None = None) -> np.ndarray:
        return self.tau + self.elapsed_times(graph, t)


@dataclass
class TimeChangedView:
    """The same events indexed by exchangeable time s = C(t)."""

    start: int
    s_events: list                  # (s, target)
    s_max: float
    ell_events: np.ndarray          # per-event local times of Z, shape (k+1, n)
    vertices_seq: list

    def ell(self, s: float) -> np.ndarray:
        """Local times of the time-changed process at time s."""
        out = self.ell_events[0].copy()
        pos = self.vertices_seq[0]
        prev = 0.0
        for (sk, target), _ in zip(self.s_events, range(len(self.s_events))):
            if sk > s:
                break
            out = out.copy()
            out[pos] += sk - prev
            prev = sk
            pos = target
        out[pos] += max(s - prev, 0.0)
        return out


def time_change(graph: StarGraph, traj: Trajectory) -> TimeChangedView:
    """Map a trajectory to the exchangeable time scale s = C(t).

    C(t) = half the sum over vertices of (exp(T_i + T_{i*}) - 1) with elapsed
    local times; between events only the occupied pair contributes.
    """
    star = graph.star
    n = graph.n
    T = np.zeros(n)
    pos = traj.start
    prev_t = 0.0
    s = 0.0
    ell = np.zeros(n)
    s_events = []
    ell_events = [ell.copy()]
    verts = [pos]
    for tk, target in traj.events:
        dt = tk - prev_t
        gamma0 = T[pos] + T[star[pos]]
        m = 2.0 if star[pos] == pos else 1.0
        ds = np.exp(gamma0) * (np.exp(m * dt) - 1.0) / m
        s += ds
        ell[pos] += ds
        T[pos] += dt
        prev_t = tk
        s_events.append((s, target))
        ell_events.append(ell.copy())
        pos = target
        verts.append(pos)
    # final partial holding up to t_max
    dt = traj.t_max - prev_t
    if dt > 0:
        gamma0 = T[pos] + T[star[pos]]
        m = 2.0 if star[pos] == pos else 1.0
        ds = np.exp(gamma0) * (np.exp(m * dt) - 1.0) / m
        s += ds
        ell[pos] += ds
        T[pos] += dt
    return TimeChangedView(start=traj.start, s_events=s_events, s_max=s,
                           ell_events=np.array(ell_events), vertices_seq=verts)


def b_functional(graph: StarGraph, view: TimeChangedView, theta, s: float | None = None) -> np.ndarray:
    """Antisymmetric drift functional of the time-changed path.

    Exact piecewise-logarithmic integration of
    (1_{Z=i} - 1_{Z=i*}) / (theta_i + ell_i + ell_{i*}) / 2 up to time s.
    """
    theta = np.asarray(theta, dtype=float) + np.zeros(graph.n)
    s = view.s_max if s is None else min(s, view.s_max)
    star = graph.star
    out = np.zeros(graph.n)
    ell = view.ell_events[0].copy()
    prev = 0.0
    pos = view.vertices_seq[0]
    hops = list(view.s_events) + [(view.s_max, None)]
    for sk, target in hops:
        sk_eff = min(sk, s)
        d = sk_eff - prev
        if d > 0 and star[pos] != pos:
            denom0 = theta[pos] + ell[pos] + ell[star[pos]]
            inc = 0.5 * math.log((denom0 + d) / denom0)
            out[pos] += inc
            out[star[pos]] -= inc
        if sk >= s or target is None:
            break
        ell[pos] += sk - prev
        prev = sk
        pos = target
    return out


# ---------------------------------------------------------------------------
# discrete-time reinforced walk


def run_errw(graph: StarGraph, alpha, i0: int, n_steps: int, draw: StreamDraw) -> list:
    """Discrete reinforced walk; crossing an edge reinforces it and its dual."""
    alpha_cur = np.asarray(alpha, dtype=float).copy()
    path = [int(i0)]
    pos = int(i0)
    for _ in range(n_steps):
        eids = graph.out_edges[pos]
        w = alpha_cur[list(eids)]
        u = draw.uniform() * w.sum()
        k = int(np.searchsorted(np.cumsum(w), u, side="right"))
        k = min(k, len(eids) - 1)
        e = eids[k]
        alpha_cur[e] += 1.0
        alpha_cur[graph.star_edge[e]] += 1.0
        pos = int(graph.edges[e, 1])
        path.append(pos)
    return path


def errw_path_probability(graph: StarGraph, alpha, path) -> float:
    """Exact probability of a finite path under the reinforced walk."""
    alpha_cur = np.asarray(alpha, dtype=float).copy()
    prob = 1.0
    eid = {(int(i), int(j)): k for k, (i, j) in enumerate(graph.edges)}
    for a, b in zip(path[:-1], path[1:]):
        if (int(a), int(b)) not in eid:
            raise InvalidPath(f"no edge ({a},{b})")
        e = eid[(int(a), int(b))]
        total = alpha_cur[list(graph.out_edges[int(a)])].sum()
        prob *= alpha_cur[e] / total
        alpha_cur[e] += 1.0
        alpha_cur[graph.star_edge[e]] += 1.0
    return float(prob)


def enumerate_errw_paths(graph: StarGraph, alpha, i0: int, depth: int,
                         max_depth: int = 6, max_branching: int = 4):
    """All depth-step paths with exact probabilities (bounded combinatorics)."""
    if depth > max_depth:
        raise DepthTooLarge(f"depth {depth} > {max_depth}")
    if max(len(e) for e in graph.out_edges) > max_branching:
        raise DepthTooLarge("branching exceeds the enumeration cap")
    out = []

    def rec(pos, path, prob, alpha_cur, k):
        if k == depth:
            out.append((tuple(path), prob))
            return
        eids = graph.out_edges[pos]
        total = sum(alpha_cur[e] for e in eids)
        for e in eids:
            nxt = int(graph.edges[e, 1])
            a2 = alpha_cur.copy()
            a2[e] += 1.0
            a2[graph.star_edge[e]] += 1.0
            rec(nxt, path + [nxt], prob * alpha_cur[e] / total, a2, k + 1)

    rec(int(i0), [int(i0)], 1.0, np.asarray(alpha, dtype=float).copy(), 0)
    return out


# ---------------------------------------------------------------------------
# event-driven jump process (scalar engines)


def _solve_wait(c1: float, c2: float, e_draw: float) -> float:
    """Solve c1 (y - 1) + c2 (y^2 - 1)/2 = E for y = e^s, return s.

    Uses the cancellation-free form of the positive quadratic root so that a
    negligible quadratic coefficient degrades gracefully to the linear case.
    """
    q = c1 + 0.5 * c2 + e_draw
    disc = c1 * c1 + 2.0 * c2 * q
    return math.log(2.0 * q / (c1 + math.sqrt(disc)))


def run_vrjp(graph: StarGraph, i0: int, t_max: float, draw: StreamDraw,
             weights=None, tau=None, scheme: str = "event_driven",
             max_events: int = EVENT_CAP, max_jumps: int | None = None) -> Trajectory:
    """Sample the star-reinforced jump process on [0, t_max].

    Rates are W_ij exp(T_i + T_{j*}) with T the offset-plus-elapsed local
    time. Both schemes produce exact samples of the same law.
    """
    w = graph.weights if weights is None else np.asarray(weights, dtype=float)
    tau = np.zeros(graph.n) if tau is None else np.asarray(tau, dtype=float)
    if scheme == "event_driven":
        return _run_vrjp_event(graph, i0, t_max, draw, w, tau, max_events, max_jumps)
    if scheme == "ppp":
        return _run_vrjp_ppp(graph, i0, t_max, draw, w, tau, max_events, max_jumps)
    raise ValueError(f"unknown scheme {scheme!r}")


def _run_vrjp_event(graph, i0, t_max, draw, w, tau, max_events, max_jumps=None):
    star = graph.star
    T = tau.astype(float).copy()
    pos = int(i0)
    t = 0.0
    traj = Trajectory(start=pos, tau=tau.copy(), t_max=t_max, weights=w)
    while True:
        if max_jumps is not None and len(traj.events) >= max_jumps:
            traj.t_max = t
            break
        if len(traj.events) >= max_events:
            raise HorizonTooLarge(f"more than {max_events} events before t_max")
        eids = graph.out_edges[pos]
        heads = [int(graph.edges[e, 1]) for e in eids]
        rates = [w[e] * math.exp(T[pos] + T[star[h]]) for e, h in zip(eids, heads)]
        doubled = [star[h] == pos for h in heads]
        c1 = sum(r for r, d in zip(rates, doubled) if not d)
        c2 = sum(r for r, d in zip(rates, doubled) if d)
        s = _solve_wait(c1, c2, draw.exponential())
        if t + s >= t_max:
            T[pos] += t_max - t
            break
        t += s
        T[pos] += s
        y = math.exp(s)
        probs = [r * (y * y if d else y) for r, d in zip(rates, doubled)]
        u = draw.uniform() * sum(probs)
        acc = 0.0
        k = len(probs) - 1
        for idx, p in enumerate(probs):
            acc += p
            if u < acc:
                k = idx
                break
        pos = heads[k]
        traj.events.append((t, pos))
    return traj


def _run_vrjp_ppp(graph, i0, t_max, draw, w, tau, max_events, max_jumps=None):
    """Point-process scheme: each star-edge class carries a Poisson process.

    The class clock is T_tail + T_{star(head)} (shared by both orientations);
    a point is consumed when the clock crosses it. In the p = exp(clock) - 1
    coordinate the process is homogeneous; classes fixed by the involution
    run at half rate because their clock advances at speed two.
    """
    star = graph.star
    classes = graph.edge_classes()
    class_of = np.empty(graph.m, dtype=int)
    for c, members in enumerate(classes):
        for e in members:
            class_of[e] = c
    lam = np.empty(len(classes))
    for c, members in enumerate(classes):
        e = members[0]
        self_star = graph.star_edge[e] == e and star[graph.edges[e, 1]] == graph.edges[e, 0]
        lam[c] = w[e] / 2.0 if self_star else w[e]

    T = tau.astype(float).copy()

    def clock(e):
        return T[graph.edges[e, 0]] + T[star[graph.edges[e, 1]]]

    # first point of each class process beyond the initial clock position
    p_next = np.array([math.exp(clock(members[0])) - 1.0 + draw.exponential() / lam[c]
                       for c, members in enumerate(classes)])

    pos = int(i0)
    t = 0.0
    traj = Trajectory(start=pos, tau=tau.copy(), t_max=t_max, weights=w)
    while True:
        if max_jumps is not None and len(traj.events) >= max_jumps:
            traj.t_max = t
            break
        if len(traj.events) >= max_events:
            raise HorizonTooLarge(f"more than {max_events} events before t_max")
        best = None
        for e in graph.out_edges[pos]:
            h = int(graph.edges[e, 1])
            speed = 2.0 if star[h] == pos else 1.0
            gamma0 = clock(e)
            target = math.log1p(p_next[class_of[e]])
            s_e = (target - gamma0) / speed
            if best is None or s_e < best[0]:
                best = (s_e, e, h)
        s, e, h = best
        s = max(s, 0.0)
        if t + s >= t_max:
            T[pos] += t_max - t
            break
        t += s
        T[pos] += s
        c = class_of[e]
        p_next[c] = math.exp(clock(e)) - 1.0 + draw.exponential() / lam[c]
        pos = h
        traj.events.append((t, pos))
    return traj


def run_markov_Z(graph: StarGraph, point: ManifoldPoint, i0: int, s_max: float,
                 draw: StreamDraw, max_events: int = EVENT_CAP) -> TimeChangedView:
    """Markov jump process with rates W_ij exp(u_{j*} - u_{i*}), in s time."""
    u = point.h
    star = graph.star
    rates = graph.weights * np.exp(u[star[graph.edges[:, 1]]] - u[star[graph.edges[:, 0]]])
    pos = int(i0)
    s = 0.0
    ell = np.zeros(graph.n)
    s_events = []
    ell_events = [ell.copy()]
    verts = [pos]
    while True:
        if len(s_events) >= max_events:
            raise HorizonTooLarge("markov run exceeded the event cap")
        eids = graph.out_edges[pos]
        r = rates[list(eids)]
        total = r.sum()
        wait = draw.exponential() / total
        if s + wait >= s_max:
            ell[pos] += s_max - s
            break
        s += wait
        ell = ell.copy()
        ell[pos] += wait
        u_draw = draw.uniform() * total
        k = int(np.searchsorted(np.cumsum(r), u_draw, side="right"))
        k = min(k, len(eids) - 1)
        pos = int(graph.edges[eids[k], 1])
        s_events.append((s, pos))
        ell_events.append(ell.copy())
        verts.append(pos)
    return TimeChangedView(start=int(i0), s_events=s_events, s_max=s_max,
                           ell_events=np.array(ell_events), vertices_seq=verts)


# ---------------------------------------------------------------------------
# the interpolated process driven by (beta on I, antisymmetric field on I^c)


def _mixing_v_exp(graph, subset, g_hat, w_mat, a, T):
    """exp(V*) on all vertices given boundary values on the complement."""
    star = graph.star
    ev_star = np.zeros(graph.n)
    comp = [i for i in range(graph.n) if i not in set(subset.tolist())]
    for j in comp:
        ev_star[j] = math.exp(T[star[j]] + a[star[j]])
    if len(subset):
        rhs = w_mat[np.ix_(subset, comp)] @ ev_star[comp]
        ev_star[subset] = g_hat @ rhs
        if np.min(ev_star[subset]) <= 0.0:
            raise NotInDomain("interpolated tilt left the admissible cone")
    return ev_star


def run_mixing_I(graph: StarGraph, i0: int, subset, beta_I, a, t_max: float,
                 draw: StreamDraw, max_events: int = EVENT_CAP,
                 check_constancy: bool = True, max_jumps: int | None = None) -> Trajectory:
    """Self-interacting process with frozen holding rates on the subset.

    While the walker is inside the subset the auxiliary field V is constant
    (asserted); outside it follows the local times plus the antisymmetric
    offsets. Rates: W_ij exp(T_i + T_{i*}) exp(V_{j*} - V_{i*}).
    """
    subset = np.asarray(sorted(subset), dtype=int)
    a = np.asarray(a, dtype=float)
    w_mat = graph.weight_matrix()
    if len(subset):
        h_hat = np.diag(np.asarray(beta_I, dtype=float)) - w_mat[np.ix_(subset, subset)]
        if not positive_stable(h_hat, cross_check=False):
            raise NotInDomain("beta on the subset is outside the admissible domain")
        g_hat = np.linalg.inv(h_hat)
    else:
        g_hat = np.zeros((0, 0))

    star = graph.star
    in_subset = np.zeros(graph.n, dtype=bool)
    in_subset[subset] = True
    T = np.zeros(graph.n)
    pos = int(i0)
    t = 0.0
    traj = Trajectory(start=pos, tau=np.zeros(graph.n), t_max=t_max, weights=graph.weights)
    ev_star = _mixing_v_exp(graph, subset, g_hat, w_mat, a, T)
    while True:
        if max_jumps is not None and len(traj.events) >= max_jumps:
            traj.t_max = t
            break
        if len(traj.events) >= max_events:
            raise HorizonTooLarge("mixing run exceeded the event cap")
        if check_constancy and in_subset[pos]:
            fresh = _mixing_v_exp(graph, subset, g_hat, w_mat, a, T)
            if not np.allclose(fresh, ev_star, rtol=1e-12, atol=0.0):
                raise NotConverged("V changed while the walker stayed in the subset")
            ev_star = fresh

        # hazard_e(s) = kappa_e e^{n s} (A_j + B_j e^s), n in {1, 2}
        x_self = star[pos] == pos
        n_exp = 2.0 if (x_self and in_subset[pos]) else 1.0
        ev_x_star = ev_star[star[pos]]
        base_pref = math.exp(T[pos] + T[star[pos]]) / ev_x_star

        # decompose exp(V*)(s) = A + B e^s componentwise
        pos_outside = not in_subset[pos]
        B_vec = np.zeros(graph.n)
        if pos_outside:
            lin = np.zeros(graph.n)
            lin[star[pos]] = math.exp(T[pos] + a[pos])
            if len(subset):
                lin[subset] = g_hat @ (w_mat[np.ix_(subset, [star[pos]])]
                                       @ lin[[star[pos]]])
            B_vec = lin
        A_vec = ev_star - B_vec

        c1 = c2 = 0.0
        terms = []
        for e in graph.out_edges[pos]:
            h = int(graph.edges[e, 1])
            kappa = graph.weights[e] * base_pref
            t1 = kappa * A_vec[h]      # multiplies e^{n s}
            t2 = kappa * B_vec[h]      # multiplies e^{(n+1) s}
            if n_exp == 1.0:
                c1 += t1
                c2 += t2
            else:
                c2 += t1
                if t2 != 0.0:
                    raise NotConverged("unexpected cubic hazard term")
            terms.append((h, t1, t2))
        s = _solve_wait(c1, c2, draw.exponential())
        if t + s >= t_max:
            T[pos] += t_max - t
            break
        t += s
        y = math.exp(s)
        probs = [(h, (t1 * (y if n_exp == 1.0 else y * y)) + t2 * y * y)
                 for h, t1, t2 in terms]
        tot = sum(p for _, p in probs)
        u_draw = draw.uniform() * tot
        acc = 0.0
        nxt = probs[-1][0]
        for h, p in probs:
            acc += p
            if u_draw < acc:
                nxt = h
                break
        T[pos] += s
        pos = nxt
        traj.events.append((t, pos))
        ev_star = _mixing_v_exp(graph, subset, g_hat, w_mat, a, T)
    return traj

# ---------------------------------------------------------------------------
# limit extraction and path densities


def extract_limits(graph: StarGraph, traj: Trajectory, tail_tol: float | None = None):
    """Estimate the limiting tilt U and recover the initial antisymmetric field.

    U is the manifold projection of T(t_max) - t_max/N (T includes the run's
    offsets; for randomized runs pass the base graph whose weights define the
    manifold). The recovery uses the unit-theta drift functional at s_max.
    Returns (point, a_recovered, diagnostics).
    """
    n = graph.n
    T_tot = traj.local_times(graph)
    proj = project_to_manifold(graph, T_tot - traj.t_max / n)
    view = time_change(graph, traj)
    b_inf = b_functional(graph, view, np.ones(n))
    u = proj.point.h
    a_rec = 0.5 * (u - u[graph.star]) - b_inf
    b_tail = b_functional(graph, view, np.ones(n), s=0.9 * view.s_max)
    tail_var = float(np.max(np.abs(b_inf - b_tail)))
    diag = {
        "projection_residual": proj.point.residual,
        "b_tail_variation": tail_var,
        "s_max": view.s_max,
    }
    if tail_tol is not None and tail_var > tail_tol:
        raise NotConverged(f"drift functional tail variation {tail_var:.3e} > {tail_tol}")
    return proj.point, a_rec, diag


def _jump_factor_sums(graph: StarGraph, traj: Trajectory):
    """Sum over jumps of T_tail(t_l) + T_{tail*}(t_l) and of log W, plus T at the end."""
    star = graph.star
    T = traj.tau.astype(float).copy()
    pos = traj.start
    prev = 0.0
    sum_depart = 0.0
    sum_depart_pair = 0.0
    sum_logw = 0.0
    w_mat = graph.weight_matrix(traj.weights)
    for tk, target in traj.events:
        T[pos] += tk - prev
        prev = tk
        sum_depart += T[pos] + T[star[target]]
        sum_depart_pair += T[pos] + T[star[pos]]
        sum_logw += math.log(w_mat[pos, target])
        pos = target
    T[pos] += traj.t_max - prev
    return sum_depart, sum_depart_pair, sum_logw, T


def vrjp_path_density(graph: StarGraph, traj: Trajectory, model: str,
                      point: ManifoldPoint | None = None,
                      log_f_start: float | None = None,
                      log_f_end: float | None = None,
                      epsrel: float = 1e-9) -> float:
    """Exact log density of (jump times, jump targets) on [0, t_max].

    Models: "vrjp" (fixed conductances traj.weights), "randomized" (base
    weights, annealed initial field), "markov_u" (frozen manifold tilt).
    Densities are with respect to the product of jump-time measures.
    """
    from .measures import root_normalization

    star = graph.star
    tau = traj.tau
    tails = graph.edges[:, 0]
    heads = graph.edges[:, 1]
    sum_depart, sum_depart_pair, sum_logw, T_end = _jump_factor_sums(graph, traj)

    if model == "vrjp":
        w = traj.weights if traj.weights is not None else graph.weights
        quad = float(np.sum(w * (np.exp(T_end[tails] + T_end[star[heads]])
                                 - np.exp(tau[tails] + tau[star[heads]]))))
        return sum_logw + sum_depart - 0.5 * quad

    if model == "randomized":
        end = traj.vertices()[-1]
        if log_f_start is None:
            log_f_start = math.log(root_normalization(
                graph, traj.start, weights=graph.tilted_weights(tau), epsrel=epsrel))
        if log_f_end is None:
            log_f_end = math.log(root_normalization(
                graph, end, weights=graph.tilted_weights(T_end), epsrel=epsrel))
        w = graph.weights
        quad = float(np.sum(w * (np.exp(T_end[tails] + T_end[star[heads]])
                                 - np.exp(tau[tails] + tau[star[heads]]))))
        fixed = graph.fixed_vertices
        return (sum_logw + sum_depart_pair
                + T_end[star[end]] - tau[star[traj.start]]
                - float(np.sum(T_end[fixed] - tau[fixed]))
                - 0.5 * quad + log_f_end - log_f_start)

    if model == "markov_u":
        if point is None:
            raise ValueError("markov_u needs the manifold point")
        u = point.h
        end = traj.vertices()[-1]
        w = graph.weights
        quad = float(np.sum(w * np.exp(u[star[heads]] - u[star[tails]])
                            * (np.exp(T_end[tails] + T_end[star[tails]])
                               - np.exp(tau[tails] + tau[star[tails]]))))
        return (sum_logw + sum_depart_pair + u[star[end]] - u[star[traj.start]]
                - 0.5 * quad)

    raise ValueError(f"unknown model {model!r}")


def z_path_log_density(graph: StarGraph, i0: int, z_vertices, s_times, s_max: float,
                       epsrel: float = 1e-9) -> float:
    """Closed-form log density of a time-changed path (zero initial local time).

    Depends on the path only through crossing counts, the endpoint and the
    final local times; used to test partial exchangeability.
    """
    from .measures import root_normalization

    star = graph.star
    ell = np.zeros(graph.n)
    pos = int(i0)
    prev = 0.0
    sum_logw = 0.0
    w_mat = graph.weight_matrix()
    for sk, nxt in zip(s_times, z_vertices[1:]):
        ell[pos] += sk - prev
        sum_logw += math.log(w_mat[pos, int(nxt)])
        prev = sk
        pos = int(nxt)
    ell[pos] += s_max - prev

    scale = np.sqrt(1.0 + ell + ell[star])
    w_tilde = graph.weights * scale[graph.edges[:, 0]] * scale[graph.edges[:, 1]]
    g_tilde = graph.with_weights(w_tilde)
    log_f_end = math.log(root_normalization(g_tilde, pos, epsrel=epsrel))
    log_f_0 = math.log(root_normalization(graph, int(i0), epsrel=epsrel))
    fixed = graph.fixed_vertices
    return (sum_logw
            + 0.5 * math.log(1.0 + ell[pos] + ell[star[pos]])
            - 0.5 * float(np.sum(np.log(1.0 + 2.0 * ell[fixed])))
            + (log_f_end - 0.5 * float(np.sum(w_tilde)))
            - (log_f_0 - 0.5 * float(np.sum(graph.weights))))


def z_path_to_trajectory(graph: StarGraph, i0: int, z_vertices, s_times,
                         s_max: float) -> Trajectory:
    """Invert the time change for a given path of the time-changed process."""
    star = graph.star
    ell = np.zeros(graph.n)
    pos = int(i0)
    prev_s = 0.0
    t = 0.0
    events = []
    hops = list(zip(s_times, z_vertices[1:])) + [(s_max, None)]
    for sk, nxt in hops:
        d = sk - prev_s
        m = 2.0 if star[pos] == pos else 1.0
        base = 1.0 + ell[pos] + ell[star[pos]]
        t += math.log((base + m * d) / base) / m
        ell[pos] += d
        prev_s = sk
        if nxt is None:
            break
        events.append((t, int(nxt)))
        pos = int(nxt)
    return Trajectory(start=int(i0), tau=np.zeros(graph.n), events=events,
                      t_max=t, weights=graph.weights)

# ---------------------------------------------------------------------------
# sampling the initial antisymmetric field


@dataclass
class McmcParams:
    burn_in: int = 1024
    n_keep: int = 1
    thin: int = 4
    adapt_every: int = 64
    target_acceptance: float = 0.4


def _log_nu_root_batch(graph: StarGraph, i0: int, coords: np.ndarray,
                       weights: np.ndarray) -> np.ndarray:
    """log of the rooted antisymmetric density for (chains, dim) coordinates."""
    star = graph.star
    reps = graph.pair_reps
    n_chains = coords.shape[0]
    a = np.zeros((n_chains, graph.n))
    a[:, reps] = coords
    a[:, star[reps]] = -coords
    tails, heads = graph.edges[:, 0], graph.edges[:, 1]
    expo = a[:, tails] + a[:, star[heads]]
    quad = np.sum(weights * (np.exp(expo) - 1.0), axis=1)
    return a[:, star[int(i0)]] - 0.5 * quad


def sample_initial_A_batch(graph: StarGraph, i0: int, rng: CounterRng, n_chains: int,
                           weights=None, params: McmcParams | None = None,
                           stream_base: int = 0):
    """One draw per chain from the normalized rooted antisymmetric measure.

    Random-walk Metropolis on the pair coordinates (the target is log
    concave); one independent chain per stream, step size adapted during
    burn-in. Returns (fields (chains, |V|), acceptance rates).
    """
    params = params or McmcParams()
    dim = graph.n_pairs
    if dim == 0:
        return np.zeros((n_chains, graph.n)), np.ones(n_chains)
    w = graph.weights if weights is None else np.asarray(weights, dtype=float)
    w = np.broadcast_to(w, (n_chains, graph.m)) if w.ndim == 1 else w

    x = np.zeros((n_chains, dim))
    logf = _log_nu_root_batch(graph, i0, x, w)
    step = np.full(n_chains, 0.8)
    accepted = np.zeros(n_chains)
    window_acc = np.zeros(n_chains)
    streams = stream_base + np.arange(n_chains, dtype=np.uint64)
    total = params.burn_in + params.n_keep * params.thin
    counter = 0
    for k in range(total):
        z = np.stack([rng.normal(streams, counter + 2 * j) for j in range(dim)], axis=1)
        u = rng.uniform(streams, counter + 2 * dim)
        counter += 2 * dim + 1
        prop = x + step[:, None] * z
        logf_prop = _log_nu_root_batch(graph, i0, prop, w)
        acc = np.log(u) < (logf_prop - logf)
        x[acc] = prop[acc]
        logf[acc] = logf_prop[acc]
        window_acc += acc
        if k < params.burn_in and (k + 1) % params.adapt_every == 0:
            rate = window_acc / params.adapt_every
            step *= np.exp(0.6 * (rate - params.target_acceptance))
            window_acc[:] = 0.0
        if k >= params.burn_in:
            accepted += acc
    n_after = max(total - params.burn_in, 1)
    a = np.zeros((n_chains, graph.n))
    a[:, graph.pair_reps] = x
    a[:, graph.star[graph.pair_reps]] = -x
    return a, accepted / n_after


def sample_initial_A(graph: StarGraph, i0: int, rng: CounterRng,
                     params: McmcParams | None = None, stream: int = 0,
                     n_samples: int = 1, min_acceptance: float = 0.05):
    """Single-chain sampler with diagnostics (acceptance rate, crude ESS)."""
    params = params or McmcParams(n_keep=max(n_samples, 32), thin=4)
    dim = graph.n_pairs
    if dim == 0:
        sample = np.zeros((n_samples, graph.n))
        diag = {"acceptance": 1.0, "ess": float(n_samples)}
        return (sample[0] if n_samples == 1 else sample), diag

    w = graph.weights
    x = np.zeros(dim)
    logf = float(_log_nu_root_batch(graph, i0, x[None, :], w[None, :])[0])
    draw = StreamDraw(rng, stream)
    step = 0.8
    kept = []
    acc_count = 0
    window = 0
    total = params.burn_in + params.n_keep * params.thin
    for k in range(total):
        prop = x + step * np.array([draw.normal() for _ in range(dim)])
        logf_prop = float(_log_nu_root_batch(graph, i0, prop[None, :], w[None, :])[0])
        if math.log(draw.uniform()) < logf_prop - logf:
            x, logf = prop, logf_prop
            acc_count += 1
            window += 1
        if k < params.burn_in and (k + 1) % params.adapt_every == 0:
            step *= math.exp(0.6 * (window / params.adapt_every - params.target_acceptance))
            window = 0
        if k >= params.burn_in and (k - params.burn_in) % params.thin == 0:
            kept.append(x.copy())
    kept = np.array(kept)
    acc_rate = acc_count / total
    ess = _ess(kept[:, 0]) if len(kept) > 4 else float(len(kept))
    if acc_rate < min_acceptance or (len(kept) > 32 and ess < 4.0):
        raise MixingFailure(f"acceptance {acc_rate:.3f}, ess {ess:.1f}")
    a = np.zeros((len(kept), graph.n))
    a[:, graph.pair_reps] = kept
    a[:, graph.star[graph.pair_reps]] = -kept
    out = a[:n_samples]
    diag = {"acceptance": acc_rate, "ess": ess}
    return (out[0] if n_samples == 1 else out), diag


def _ess(x: np.ndarray) -> float:
    x = x - x.mean()
    var = float(np.dot(x, x))
    if var == 0.0:
        return float(len(x))
    rho_sum = 0.0
    for lag in range(1, min(len(x) // 3, 64)):
        rho = float(np.dot(x[:-lag], x[lag:])) / var
        if rho < 0.05:
            break
        rho_sum += rho
    return len(x) / (1.0 + 2.0 * rho_sum)


# ---------------------------------------------------------------------------
# vectorized batch engine


class BatchVRJP:
    """Event-synchronous driver for many independent trajectories.

    Lane i draws from stream (stream_base + i); results are bit-for-bit
    reproducible for a given seed regardless of chunking. Stops lanes at
    t_max (clipping the last holding) or after a fixed number of jumps.
    """

    def __init__(self, graph: StarGraph, rng: CounterRng, stream_base: int = 0,
                 max_events: int = 2_000_000):
        self.graph = graph
        self.rng = rng
        self.stream_base = stream_base
        self.max_events = max_events
        deg = max(len(e) for e in graph.out_edges)
        self.adj_eid = np.full((graph.n, deg), -1, dtype=int)
        for v, eids in enumerate(graph.out_edges):
            self.adj_eid[v, : len(eids)] = eids
        self.edge_head = graph.edges[:, 1]
        self.head_star = graph.star[graph.edges[:, 1]]

    def run(self, i0: int, n_traj: int, t_max: float = np.inf, n_jumps: int | None = None,
            weights=None, tau=None, collect=(), window_t0: float = None):
        g = self.graph
        w = g.weights if weights is None else np.asarray(weights, dtype=float)
        per_lane_w = w.ndim == 2
        tau0 = np.zeros(g.n) if tau is None else np.asarray(tau, dtype=float)
        T = np.broadcast_to(tau0, (n_traj, g.n)).copy() if tau0.ndim == 1 else tau0.copy()
        T0 = T.copy()

        x = np.full(n_traj, int(i0))
        t = np.zeros(n_traj)
        jumps = np.zeros(n_traj, dtype=int)
        active = np.arange(n_traj)
        out = {}
        if "jump1" in collect:
            out["jump1_target"] = np.full(n_traj, -1)
            out["jump1_time"] = np.full(n_traj, np.nan)
        if "jump2" in collect:
            out["jump2_target"] = np.full(n_traj, -1)
        if "window" in collect:
            out["ell_window"] = np.zeros((n_traj, g.n))
            out["edge_counts"] = np.zeros((n_traj, g.m), dtype=np.int32)
        if "path" in collect:
            out["paths"] = np.full((n_traj, (n_jumps or 0) + 1), -1, dtype=np.int16)
            out["paths"][:, 0] = i0

        counter = np.zeros(n_traj, dtype=np.int64)
        steps = 0
        while active.size:
            steps += 1
            if steps > self.max_events:
                raise HorizonTooLarge("batch run exceeded the event cap")
            la = active
            xs = x[la]
            eids = self.adj_eid[xs]
            valid = eids >= 0
            safe = np.where(valid, eids, 0)
            heads = self.edge_head[safe]
            hstar = self.head_star[safe]
            w_g = (w[la[:, None], safe] if per_lane_w else w[safe])
            t_x = T[la, xs]
            t_hs = T[la[:, None], hstar]
            with np.errstate(over="ignore"):
                r = np.where(valid, w_g * np.exp(t_x[:, None] + t_hs), 0.0)
            doubled = (hstar == xs[:, None]) & valid
            c2 = np.sum(np.where(doubled, r, 0.0), axis=1)
            c1 = np.sum(np.where(doubled, 0.0, r), axis=1)

            e_draw = self.rng.exponential(self.stream_base + la.astype(np.uint64),
                                          (2 * counter[la]).astype(np.uint64))
            with np.errstate(over="ignore"):
                q = c1 + 0.5 * c2 + e_draw
                disc = c1 * c1 + 2.0 * c2 * q
                y = 2.0 * q / (c1 + np.sqrt(disc))
            s = np.log(y)
            t_new = t[la] + s

            finished = t_new >= t_max
            if n_jumps is not None:
                finished = finished & False
            # clip lanes that overshoot the horizon
            if np.any(finished):
                lf = la[finished]
                if "window" in collect and window_t0 is not None:
                    self._window_accumulate(out, lf, x[lf], T0, T, t[lf],
                                            np.full(lf.size, t_max), window_t0)
                T[lf, x[lf]] += t_max - t[lf]
                t[lf] = t_max
            cont = ~finished
            lc = la[cont]
            if lc.size:
                sc = s[cont]
                yc = y[cont]
                probs = np.where(valid[cont],
                                 r[cont] * np.where(doubled[cont], yc[:, None] ** 2,
                                                    yc[:, None]), 0.0)
                cum = np.cumsum(probs, axis=1)
                u = self.rng.uniform(self.stream_base + lc.astype(np.uint64),
                                     (2 * counter[lc] + 1).astype(np.uint64))
                pick = np.sum(cum < (u * cum[:, -1])[:, None], axis=1)
                pick = np.minimum(pick, probs.shape[1] - 1)
                rows = np.arange(lc.size)
                chosen_e = safe[cont][rows, pick]
                nxt = heads[cont][rows, pick]
                if "window" in collect and window_t0 is not None:
                    t_end = np.minimum(t[lc] + sc, t_max)
                    self._window_accumulate(out, lc, x[lc], T0, T, t[lc], t_end, window_t0)
                    inw = (t[lc] + sc) >= window_t0
                    np.add.at(out["edge_counts"], (lc[inw], chosen_e[inw]), 1)
                T[lc, x[lc]] += sc
                t[lc] += sc
                jumps[lc] += 1
                if "jump1" in collect:
                    first = jumps[lc] == 1
                    out["jump1_target"][lc[first]] = nxt[first]
                    out["jump1_time"][lc[first]] = t[lc[first]]
                if "jump2" in collect:
                    second = jumps[lc] == 2
                    out["jump2_target"][lc[second]] = nxt[second]
                if "path" in collect:
                    out["paths"][lc, jumps[lc]] = nxt
                x[lc] = nxt
            counter[la] += 1

            if n_jumps is not None:
                active = active[jumps[active] < n_jumps]
            else:
                active = active[t[active] < t_max]

        out["T_final"] = T
        out["T_elapsed"] = T - T0
        out["n_jumps"] = jumps
        out["t_final"] = t
        out["x_final"] = x
        return out

    def _window_accumulate(self, out, lanes, xs, T0, T, t_start, t_end, w_t0):
        """Add the exchangeable-time increment of the current holding inside the window."""
        g = self.graph
        a = np.maximum(t_start, w_t0)
        b = t_end
        hold = b - a
        mask = hold > 0
        if not np.any(mask):
            return
        lanes, xs = lanes[mask], xs[mask]
        a, b, t_start = a[mask], b[mask], t_start[mask]
        m = np.where(g.star[xs] == xs, 2.0, 1.0)
        gamma0 = (T[lanes, xs] - T0[lanes, xs]) + (T[lanes, g.star[xs]] - T0[lanes, g.star[xs]])
        with np.errstate(over="ignore"):
            inc = np.exp(gamma0) * (np.exp(m * (b - t_start)) - np.exp(m * (a - t_start))) / m
        np.add.at(out["ell_window"], (lanes, xs), inc)
