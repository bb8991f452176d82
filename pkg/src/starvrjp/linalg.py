"""Generators, subspace projections, restricted determinants and potentials.

Subspaces of R^V used throughout:
  A  : antisymmetric fields, x_i = -x_{i*}
  S  : symmetric fields, x_i = x_{i*}
  H0 : zero-sum fields
  S0 : symmetric zero-sum fields
All projections are orthogonal for the usual scalar product; the star form
<x, y> = sum_i x_{i*} y_i is a separate bilinear pairing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NotPositiveStable, NotSelfDual, SingularGenerator
from .graph import StarGraph

_STABLE_TOL = 1e-10


def star_bilinear(graph: StarGraph, x, y) -> float:
    """<x, y> = sum_i x_{i*} y_i."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return float(np.dot(x[graph.star], y))


def subspace_project(graph: StarGraph, x, target: str) -> np.ndarray:
    """Orthogonal projection onto one of {"A", "S", "S0", "H0"}."""
    x = np.asarray(x, dtype=float)
    xs = x[graph.star]
    if target == "A":
        return 0.5 * (x - xs)
    if target == "S":
        return 0.5 * (x + xs)
    if target == "H0":
        return x - x.mean()
    if target == "S0":
        s = 0.5 * (x + xs)
        return s - s.mean()
    raise ValueError(f"unknown subspace {target!r}")


def subspace_dim(graph: StarGraph, target: str) -> int:
    n0, n1 = graph.n_fixed, graph.n_pairs
    return {"A": n1, "S": n0 + n1, "S0": n0 + n1 - 1, "H0": graph.n - 1}[target]


def subspace_basis(graph: StarGraph, target: str) -> np.ndarray:
    """Deterministic orthonormal basis, shape (|V|, dim)."""
    n = graph.n
    if target == "A":
        cols = []
        for i in graph.pair_reps:
            v = np.zeros(n)
            v[i] = 1.0 / np.sqrt(2.0)
            v[graph.star[i]] = -1.0 / np.sqrt(2.0)
            cols.append(v)
        return np.array(cols).T if cols else np.zeros((n, 0))
    if target == "S":
        cols = []
        for i in graph.reps:
            v = np.zeros(n)
            if graph.star[i] == i:
                v[i] = 1.0
            else:
                v[i] = v[graph.star[i]] = 1.0 / np.sqrt(2.0)
            cols.append(v)
        return np.array(cols).T
    if target == "H0":
        return _zero_sum_complement(np.eye(n))
    if target == "S0":
        return _zero_sum_complement(subspace_basis(graph, "S"))
    raise ValueError(f"unknown subspace {target!r}")


def _zero_sum_complement(basis: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the zero-sum slice of span(basis)."""
    sums = basis.sum(axis=0)
    k = basis.shape[1]
    if k <= 1:
        return np.zeros((basis.shape[0], 0))
    # Householder reflection sending `sums` to a multiple of e_0, then drop e_0
    v = sums.astype(float).copy()
    v[0] += np.sign(v[0] or 1.0) * np.linalg.norm(sums)
    h = np.eye(k) - 2.0 * np.outer(v, v) / np.dot(v, v)
    return basis @ h[:, 1:]


def tilted_generator(graph: StarGraph, u) -> tuple[np.ndarray, np.ndarray]:
    """Edge field W^u and the generator matrix K^u of the jump process.

    (W^u)_ij = W_ij exp(u_i + u_{j*}); rows of K^u sum to zero exactly
    (diagonal set by compensated accumulation of the off-diagonal row).
    """
    wu = graph.tilted_weights(u)
    k = graph.weight_matrix(wu)
    np.fill_diagonal(k, 0.0)
    np.fill_diagonal(k, [-math.fsum(row) for row in k])
    return wu, k


def restricted_determinant(mat: np.ndarray, graph: StarGraph, subspace: str) -> float:
    """det of P M P restricted to the subspace, in an orthonormal basis.

    A zero-dimensional subspace gives 1 (empty product).
    """
    basis = subspace_basis(graph, subspace)
    if basis.shape[1] == 0:
        return 1.0
    return float(np.linalg.det(basis.T @ mat @ basis))


def tree_determinant(graph: StarGraph, u=None, root: int = 0, report_spread: bool = False):
    """Weighted count of spanning trees oriented toward ``root``.

    Computed as the diagonal minor of -K^u at the canonical root (index 0 by
    default). The value is root-independent exactly when u lies on the
    divergence-free manifold; ``report_spread`` also returns the max relative
    spread of the minor over all roots.
    """
    if u is None:
        u = np.zeros(graph.n)
    _, k = tilted_generator(graph, u)
    lap = -k

    def minor(j0):
        keep = [i for i in range(graph.n) if i != j0]
        return float(np.linalg.det(lap[np.ix_(keep, keep)]))

    d = minor(root)
    if not report_spread:
        return d
    vals = np.array([minor(j0) for j0 in range(graph.n)])
    spread = float(np.max(np.abs(vals - d)) / max(abs(d), 1e-300))
    return d, spread


def positive_stable(mat: np.ndarray, tol: float = _STABLE_TOL, cross_check: bool = True) -> bool:
    """Eigenvalue test for a nonsingular M-matrix candidate.

    ``mat`` must have nonpositive off-diagonal entries. When the eigenvalue
    criterion passes, inverse nonnegativity is asserted as a cross-check;
    density kernels disable the cross-check since near the support boundary
    the inverse is ill-conditioned.
    """
    mat = np.asarray(mat, dtype=float)
    if mat.size == 0:
        return True
    ok = bool(np.min(np.linalg.eigvals(mat).real) > tol)
    if ok and cross_check:
        inv = np.linalg.inv(mat)
        if inv.min() < -tol:
            raise NotPositiveStable(
                f"eigenvalue test passed but inverse has entry {inv.min():.3e} < 0")
    return ok


def potential_matrix(graph: StarGraph, beta) -> np.ndarray:
    """H_beta = diag(beta) - W."""
    beta = np.asarray(beta, dtype=float)
    return np.diag(beta) - graph.weight_matrix()


def green_function(graph: StarGraph, beta) -> np.ndarray:
    """Inverse of H_beta. Raises NotPositiveStable outside the support."""
    h = potential_matrix(graph, beta)
    if not positive_stable(h):
        raise NotPositiveStable(f"H_beta not positive stable for beta={np.asarray(beta)}")
    return np.linalg.inv(h)


@dataclass
class SchurPieces:
    """Derived objects of the block decomposition of H_beta over I | I^c."""

    I: np.ndarray             # noqa: E741 - index array of the self-dual subset
    Ic: np.ndarray
    H_hat: np.ndarray         # beta_I - W_II
    G_hat: np.ndarray
    W_check: np.ndarray       # W_IcIc + W_IcI G_hat W_IIc
    eta_hat: np.ndarray       # eta_I + W_IIc theta_Ic
    eta_hat_a: np.ndarray     # eta_I + W_IIc theta^a_Ic
    eta_check: np.ndarray     # eta_Ic + W_IcI G_hat eta_I
    theta_a: np.ndarray       # e^{a*} theta on all of V


def _as_index_array(graph: StarGraph, subset) -> np.ndarray:
    idx = np.asarray(sorted(int(i) for i in subset), dtype=int)
    if len(set(idx.tolist())) != len(idx):
        raise NotSelfDual("repeated index in subset")
    if not set(graph.star[idx].tolist()) == set(idx.tolist()):
        raise NotSelfDual(f"subset {idx.tolist()} is not star-invariant")
    return idx


def schur_decomposition(graph: StarGraph, beta, subset, theta=None, eta=None, a=None) -> SchurPieces:
    """Block objects for a self-dual subset I of the vertex set.

    beta is needed on I only (entries elsewhere are ignored); a is an
    antisymmetric field used for the tilted theta^a = e^{a*} theta.
    """
    n = graph.n
    theta = np.full(n, 1.0) if theta is None else np.asarray(theta, dtype=float) + np.zeros(n)
    eta = np.zeros(n) if eta is None else np.asarray(eta, dtype=float) + np.zeros(n)
    a = np.zeros(n) if a is None else np.asarray(a, dtype=float)

    idx = _as_index_array(graph, subset)
    comp = np.array([i for i in range(n) if i not in set(idx.tolist())], dtype=int)
    w = graph.weight_matrix()
    beta = np.asarray(beta, dtype=float) + np.zeros(n)

    h_hat = np.diag(beta[idx]) - w[np.ix_(idx, idx)]
    if len(idx) and not positive_stable(h_hat):
        raise NotPositiveStable("H_hat = beta_I - W_II not positive stable")
    g_hat = np.linalg.inv(h_hat) if len(idx) else np.zeros((0, 0))

    theta_a = np.exp(a[graph.star]) * theta
    w_check = w[np.ix_(comp, comp)] + w[np.ix_(comp, idx)] @ g_hat @ w[np.ix_(idx, comp)]
    eta_hat = eta[idx] + w[np.ix_(idx, comp)] @ theta[comp]
    eta_hat_a = eta[idx] + w[np.ix_(idx, comp)] @ theta_a[comp]
    eta_check = eta[comp] + w[np.ix_(comp, idx)] @ g_hat @ eta[idx]
    return SchurPieces(I=idx, Ic=comp, H_hat=h_hat, G_hat=g_hat, W_check=w_check,
                       eta_hat=eta_hat, eta_hat_a=eta_hat_a, eta_check=eta_check,
                       theta_a=theta_a)


def generator_inverse_on_h0(graph: StarGraph, k: np.ndarray) -> np.ndarray:
    """Matrix of (K restricted to H0)^{-1} in the orthonormal H0 basis."""
    basis = subspace_basis(graph, "H0")
    kk = basis.T @ k @ basis
    try:
        return np.linalg.inv(kk)
    except np.linalg.LinAlgError as err:
        raise SingularGenerator(str(err)) from err


def restricted_inverse_determinant(graph: StarGraph, k: np.ndarray, subspace: str = "S0") -> float:
    """det of P (-K)^{-1} P restricted to ``subspace``.

    The inverse is taken on H0 (K preserves H0 on the divergence-free
    manifold), then projected.
    """
    basis_h0 = subspace_basis(graph, "H0")
    inv_h0 = generator_inverse_on_h0(graph, -k)
    inv_full = basis_h0 @ inv_h0 @ basis_h0.T
    basis = subspace_basis(graph, subspace)
    if basis.shape[1] == 0:
        return 1.0
    return float(np.linalg.det(basis.T @ inv_full @ basis))
