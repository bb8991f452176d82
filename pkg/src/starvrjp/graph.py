"""Directed graphs with a vertex involution and star-invariant edge weights.

Vertices are referenced by dense integer indices internally; a name/index map
is kept for I/O. Edge fields are arrays aligned with ``edges``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EdgeClosureBroken,
    InvolutionBroken,
    NonpositiveWeight,
    NotStronglyConnected,
    SelfLoopEdge,
    SizeLimit,
    WeightAsymmetry,
)

_WEIGHT_RTOL = 1e-12


@dataclass(frozen=True)
class StarGraph:
    """Validated star-directed graph. Immutable after construction."""

    names: tuple
    star: np.ndarray          # star[i] = index of the dual vertex
    edges: np.ndarray         # (m, 2) array of (tail, head)
    weights: np.ndarray       # (m,) positive, star-invariant
    star_edge: np.ndarray = field(repr=False, default=None)   # edge id of (head*, tail*)
    out_edges: tuple = field(repr=False, default=None)         # per-vertex tuple of edge ids

    @property
    def n(self) -> int:
        return len(self.names)

    @property
    def m(self) -> int:
        return len(self.edges)

    @property
    def fixed_vertices(self) -> np.ndarray:
        """V0: fixed points of the involution."""
        return np.flatnonzero(self.star == np.arange(self.n))

    @property
    def pair_reps(self) -> np.ndarray:
        """V1: one representative (the smaller index) per dual pair."""
        idx = np.arange(self.n)
        return np.flatnonzero(idx < self.star)

    @property
    def reps(self) -> np.ndarray:
        """The canonical representative set V0 union V1, sorted."""
        return np.sort(np.concatenate([self.fixed_vertices, self.pair_reps]))

    @property
    def n_fixed(self) -> int:
        return len(self.fixed_vertices)

    @property
    def n_pairs(self) -> int:
        return len(self.pair_reps)

    def weight_matrix(self, weights=None) -> np.ndarray:
        """Dense |V| x |V| matrix of the given (default: stored) edge weights."""
        w = self.weights if weights is None else np.asarray(weights, dtype=float)
        mat = np.zeros((self.n, self.n))
        mat[self.edges[:, 0], self.edges[:, 1]] = w
        return mat

    def edge_classes(self) -> list[tuple[int, ...]]:
        """Edge ids grouped by the relation (i,j) ~ (j*,i*), representatives first."""
        seen = set()
        classes = []
        for e in range(self.m):
            if e in seen:
                continue
            s = int(self.star_edge[e])
            seen.add(e)
            seen.add(s)
            classes.append((e,) if s == e else (e, s))
        return classes

    def with_weights(self, weights) -> "StarGraph":
        """Same topology with new (validated) star-invariant weights."""
        return build_star_graph(self.names, {n: self.names[self.star[i]] for i, n in enumerate(self.names)},
                                [(self.names[i], self.names[j]) for i, j in self.edges], np.asarray(weights, dtype=float))

    def tilted_weights(self, u) -> np.ndarray:
        """Edge field W^u with (W^u)_ij = W_ij exp(u_i + u_{j*})."""
        u = np.asarray(u, dtype=float)
        return self.weights * np.exp(u[self.edges[:, 0]] + u[self.star[self.edges[:, 1]]])

    def is_star_invariant(self, x, rtol=_WEIGHT_RTOL) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.allclose(x, x[self.star_edge], rtol=rtol, atol=0.0))

    def digest(self) -> str:
        """Short stable hash of names, involution, edges and weights."""
        payload = {
            "names": [str(v) for v in self.names],
            "star": [str(self.names[s]) for s in self.star],
            "edges": [[str(self.names[i]), str(self.names[j]), float(w)]
                      for (i, j), w in zip(self.edges.tolist(), self.weights)],
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _reachable_all(n, out_nbrs) -> bool:
    seen = {0}
    stack = [0]
    while stack:
        v = stack.pop()
        for w in out_nbrs[v]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == n


def build_star_graph(vertices, star, edges, weights, require_strongly_connected=True) -> StarGraph:
    """Validate and build a StarGraph.

    vertices: ordered sequence of hashable names.
    star: dict name->name, sequence of indices, or callable.
    edges: sequence of (tail, head) name pairs.
    weights: sequence aligned with edges, or dict (tail, head) -> weight.

    ``require_strongly_connected=False`` admits the disconnected union
    produced by ``doubled_graph`` without gluing; everything else still holds.
    """
    names = tuple(vertices)
    if len(names) == 0:
        raise InvolutionBroken("empty vertex set")
    if len(set(names)) != len(names):
        raise InvolutionBroken("duplicate vertex names")
    index = {v: i for i, v in enumerate(names)}

    if callable(star):
        star_arr = np.array([index[star(v)] for v in names], dtype=int)
    elif isinstance(star, dict):
        star_arr = np.array([index[star[v]] for v in names], dtype=int)
    else:
        star_arr = np.asarray(star, dtype=int)

    for i, v in enumerate(names):
        if star_arr[star_arr[i]] != i:
            raise InvolutionBroken(f"star(star({v!r})) != {v!r}")

    edge_list = [(index[a], index[b]) for a, b in edges]
    if len(edge_list) == 0 and len(names) > 1:
        raise NotStronglyConnected("no edges")
    if len(set(edge_list)) != len(edge_list):
        raise EdgeClosureBroken("duplicate edge in input")
    for (i, j) in edge_list:
        if i == j:
            raise SelfLoopEdge(f"self-loop at {names[i]!r} rejected")

    if isinstance(weights, dict):
        w_arr = np.array([float(weights[(names[i], names[j])]) for i, j in edge_list])
    else:
        w_arr = np.asarray(weights, dtype=float)
        if len(w_arr) != len(edge_list):
            raise WeightAsymmetry("weights not aligned with edges")

    eid = {e: k for k, e in enumerate(edge_list)}
    star_edge = np.empty(len(edge_list), dtype=int)
    for k, (i, j) in enumerate(edge_list):
        dual = (int(star_arr[j]), int(star_arr[i]))
        if dual not in eid:
            raise EdgeClosureBroken(
                f"edge ({names[i]!r},{names[j]!r}) has no dual ({names[dual[0]]!r},{names[dual[1]]!r})")
        star_edge[k] = eid[dual]

    for k, w in enumerate(w_arr):
        if not (w > 0.0) or not np.isfinite(w):
            i, j = edge_list[k]
            raise NonpositiveWeight(f"weight of ({names[i]!r},{names[j]!r}) is {w}")
    for k in range(len(edge_list)):
        kd = star_edge[k]
        if abs(w_arr[k] - w_arr[kd]) > _WEIGHT_RTOL * max(abs(w_arr[k]), abs(w_arr[kd])):
            i, j = edge_list[k]
            raise WeightAsymmetry(
                f"weight({names[i]!r},{names[j]!r})={w_arr[k]} != weight of dual edge {w_arr[kd]}")

    n = len(names)
    out_nbrs = [[] for _ in range(n)]
    in_nbrs = [[] for _ in range(n)]
    out_eids = [[] for _ in range(n)]
    for k, (i, j) in enumerate(edge_list):
        out_nbrs[i].append(j)
        in_nbrs[j].append(i)
        out_eids[i].append(k)
    if require_strongly_connected:
        if not _reachable_all(n, out_nbrs):
            raise NotStronglyConnected("not every vertex reachable from the first vertex")
        if not _reachable_all(n, in_nbrs):
            raise NotStronglyConnected("first vertex not reachable from every vertex")

    return StarGraph(
        names=names,
        star=star_arr,
        edges=np.array(edge_list, dtype=int).reshape(-1, 2),
        weights=w_arr,
        star_edge=star_edge,
        out_edges=tuple(tuple(e) for e in out_eids),
    )


def de_bruijn_graph(alphabet_size: int, k: int, max_vertices: int = 4096) -> StarGraph:
    """Sequence graph: words of length k, shifts as edges, reversal as involution.

    Constant words shift onto themselves; those self-loops are dropped, in
    line with the construction-time self-loop policy.
    """
    if alphabet_size < 2 or k < 1:
        raise SizeLimit(f"need alphabet_size >= 2 and k >= 1, got ({alphabet_size}, {k})")
    if alphabet_size ** k > max_vertices:
        raise SizeLimit(f"{alphabet_size}**{k} vertices exceeds cap {max_vertices}")
    symbols = "0123456789abcdefghijklmnopqrstuvwxyz"[:alphabet_size]
    words = [""]
    for _ in range(k):
        words = [w + c for w in words for c in symbols]
    edges = [(w, w[1:] + c) for w in words for c in symbols if w[1:] + c != w]
    return build_star_graph(words, lambda w: w[::-1], edges, np.ones(len(edges)))


def doubled_graph(directed_vertices, directed_edges, weights, glue_at=None) -> StarGraph:
    """Disjoint union of a directed graph and its edge-reversed copy.

    The involution maps each vertex to its copy. With ``glue_at`` the given
    vertex is identified with its copy and becomes self-dual.
    """
    base = [str(v) for v in directed_vertices]
    if len(base) != len(set(base)):
        raise InvolutionBroken("duplicate vertex names")
    if len(base) < 2 or len(directed_edges) == 0:
        raise NotStronglyConnected("input graph needs at least two vertices and one edge")
    bidx = {v: i for i, v in enumerate(base)}
    out_nbrs = [[] for _ in base]
    in_nbrs = [[] for _ in base]
    for a, b in directed_edges:
        out_nbrs[bidx[str(a)]].append(bidx[str(b)])
        in_nbrs[bidx[str(b)]].append(bidx[str(a)])
    if not (_reachable_all(len(base), out_nbrs) and _reachable_all(len(base), in_nbrs)):
        raise NotStronglyConnected("input graph is not strongly connected")
    glue = None if glue_at is None else str(glue_at)

    def fwd(v):
        return v

    def rev(v):
        return v if v == glue else v + "*"

    names = [fwd(v) for v in base] + [rev(v) for v in base if rev(v) != v]
    star = {}
    for v in base:
        star[fwd(v)] = rev(v)
        star[rev(v)] = fwd(v)

    w_arr = np.asarray(weights, dtype=float)
    edges, ws = [], []
    for (a, b), w in zip(directed_edges, w_arr):
        a, b = str(a), str(b)
        e1 = (fwd(a), fwd(b))
        e2 = (rev(b), rev(a))
        edges.append(e1)
        ws.append(w)
        if e2 != e1:
            edges.append(e2)
            ws.append(w)
    return build_star_graph(names, star, edges, np.array(ws),
                            require_strongly_connected=glue is not None)


def divergence(graph: StarGraph, x) -> np.ndarray:
    """div(x)(i) = sum of x over edges out of i minus sum over edges into i."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(graph.n)
    np.add.at(out, graph.edges[:, 0], x)
    np.add.at(out, graph.edges[:, 1], -x)
    return out


def check_divergence_condition(graph: StarGraph, alpha, i0: int, tol: float = 1e-12) -> bool:
    """True iff div(alpha) = delta_{i0*} - delta_{i0} (componentwise within tol)."""
    target = np.zeros(graph.n)
    target[graph.star[i0]] += 1.0
    target[i0] -= 1.0
    return bool(np.max(np.abs(divergence(graph, alpha) - target)) <= tol)
