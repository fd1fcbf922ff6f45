"""Minimal P1 finite element kernel on structured rectangle triangulations.

Provides the weak-form pieces needed by the stabilized advection-diffusion
solvers: mass/diffusion/advection matrices, streamline (SUPG) terms,
Dirichlet lifting, per-element Peclet numbers and a direct sparse solve.
All assembly is vectorized over elements; matrices are returned in CSR
format with rows indexed by test functions and columns by trial functions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "Mesh",
    "TermDescriptor",
    "LiftingData",
    "MeshError",
    "SolveFailure",
    "build_structured_mesh",
    "assemble_term",
    "build_lifting",
    "element_peclet",
    "solve_sparse",
]

MATRIX_KINDS = (
    "mass",
    "diffusion-full",
    "diffusion-xx",
    "diffusion-yy",
    "diffusion-xy",
    "advection",
    "supg-advection-advection",
    "supg-mass-advection",
)
VECTOR_KINDS = ("rhs-source", "rhs-supg")
SUPG_KINDS = ("supg-advection-advection", "supg-mass-advection", "rhs-supg")

# Degree-2 Gauss rule with strictly interior points. The interior variant
# keeps |beta| evaluations away from element edges, where the benchmark
# advection fields vanish (channel walls).
_QP_BARY = np.array([[2.0 / 3, 1.0 / 6, 1.0 / 6],
                     [1.0 / 6, 2.0 / 3, 1.0 / 6],
                     [1.0 / 6, 1.0 / 6, 2.0 / 3]])
_QP_W = np.full(3, 1.0 / 3.0)


class MeshError(ValueError):
    """Invalid mesh construction or term descriptor."""


class SolveFailure(RuntimeError):
    """Sparse factorization or solve failed; message carries the diagnostic."""


class Mesh:
    """Triangulation of an axis-aligned rectangle with tagged boundary edges.

    Attributes
    ----------
    nodes : (n, 2) float array of vertex coordinates
    triangles : (m, 3) int array of CCW vertex triples
    boundary_edges : (e, 2) int array of node pairs lying on the boundary
    boundary_tags : (e,) int label per boundary edge
    subdomain_tags : (m,) int label per triangle
    h : (m,) longest edge (element diameter) per triangle
    """

    def __init__(self, nodes, triangles, boundary_edges, boundary_tags,
                 subdomain_tags):
        self.nodes = np.ascontiguousarray(nodes, dtype=float)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        self.boundary_edges = np.ascontiguousarray(boundary_edges, dtype=np.int64)
        self.boundary_tags = np.ascontiguousarray(boundary_tags, dtype=np.int64)
        self.subdomain_tags = np.ascontiguousarray(subdomain_tags, dtype=np.int64)
        if self.boundary_edges.shape[0] != self.boundary_tags.shape[0]:
            raise MeshError("one tag per boundary edge required")
        if self.subdomain_tags.shape[0] != self.triangles.shape[0]:
            raise MeshError("one subdomain tag per triangle required")

        xy = self.nodes[self.triangles]                      # (m, 3, 2)
        e1 = xy[:, 1] - xy[:, 0]
        e2 = xy[:, 2] - xy[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        if np.any(det <= 0.0):
            raise MeshError("triangle with non-positive signed area")
        self.areas = 0.5 * det

        x, y = xy[:, :, 0], xy[:, :, 1]
        inv2a = 1.0 / (2.0 * self.areas)
        gx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]],
                      axis=1) * inv2a[:, None]
        gy = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]],
                      axis=1) * inv2a[:, None]
        self.grads = np.stack([gx, gy], axis=2)              # (m, 3, 2)

        l01 = np.linalg.norm(xy[:, 1] - xy[:, 0], axis=1)
        l12 = np.linalg.norm(xy[:, 2] - xy[:, 1], axis=1)
        l20 = np.linalg.norm(xy[:, 0] - xy[:, 2], axis=1)
        self.h = np.maximum(np.maximum(l01, l12), l20)

        self.centroids = xy.mean(axis=1)
        self.quad_points = np.einsum("qi,mij->mqj", _QP_BARY, xy)  # (m, 3, 2)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def elements_of(self, subdomain: int | None) -> np.ndarray:
        if subdomain is None:
            return np.arange(self.n_triangles)
        idx = np.flatnonzero(self.subdomain_tags == subdomain)
        if idx.size == 0:
            raise MeshError(f"subdomain tag {subdomain} not present in mesh")
        return idx

    def boundary_nodes(self, tag: int | None = None) -> np.ndarray:
        """Sorted node ids lying on boundary edges (optionally of one tag)."""
        if tag is None:
            edges = self.boundary_edges
        else:
            edges = self.boundary_edges[self.boundary_tags == tag]
        return np.unique(edges)


def build_structured_mesh(rect, nx: int, ny: int, subdomain_split: float | None = None,
                          boundary_tagger: Callable | None = None) -> Mesh:
    """Right-diagonal triangulation of ``rect = (x0, x1, y0, y1)``.

    Each of the nx-by-ny cells is split along the bottom-left/top-right
    diagonal, giving 2*nx*ny triangles. ``subdomain_split``, if given, is an
    x-coordinate that must coincide with a vertical grid line; triangles left
    of it are tagged 1, the rest 2. ``boundary_tagger(xmid, ymid) -> int``
    assigns a tag to each boundary edge from its midpoint; the default tags
    bottom/right/top/left as 1/2/3/4.
    """
    x0, x1, y0, y1 = map(float, rect)
    if nx < 1 or ny < 1:
        raise MeshError("nx and ny must be at least 1")
    if not (x1 > x0 and y1 > y0):
        raise MeshError("rectangle must have positive extent")

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)                      # row j = y level
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def nid(i, j):
        return j * (nx + 1) + i

    tris = np.empty((2 * nx * ny, 3), dtype=np.int64)
    k = 0
    for j in range(ny):
        for i in range(nx):
            n00, n10 = nid(i, j), nid(i + 1, j)
            n01, n11 = nid(i, j + 1), nid(i + 1, j + 1)
            tris[k] = (n00, n10, n11)
            tris[k + 1] = (n00, n11, n01)
            k += 2

    edges = []
    for i in range(nx):                              # bottom, top
        edges.append((nid(i, 0), nid(i + 1, 0)))
    for j in range(ny):                              # right
        edges.append((nid(nx, j), nid(nx, j + 1)))
    for i in range(nx):                              # top
        edges.append((nid(i, ny), nid(i + 1, ny)))
    for j in range(ny):                              # left
        edges.append((nid(0, j), nid(0, j + 1)))
    edges = np.asarray(edges, dtype=np.int64)
    mids = 0.5 * (nodes[edges[:, 0]] + nodes[edges[:, 1]])

    if boundary_tagger is None:
        tol = 1e-12 * max(x1 - x0, y1 - y0)

        def boundary_tagger(xm, ym):
            if abs(ym - y0) < tol:
                return 1
            if abs(xm - x1) < tol:
                return 2
            if abs(ym - y1) < tol:
                return 3
            return 4

    tags = np.array([boundary_tagger(xm, ym) for xm, ym in mids], dtype=np.int64)

    centroids_x = nodes[tris][:, :, 0].mean(axis=1)
    if subdomain_split is None:
        sub = np.ones(tris.shape[0], dtype=np.int64)
    else:
        split = float(subdomain_split)
        if not (x0 < split < x1):
            raise MeshError("subdomain split must lie strictly inside the rectangle")
        on_line = np.isclose(xs, split, rtol=0.0, atol=1e-12 * (x1 - x0))
        if not on_line.any():
            raise MeshError(
                f"subdomain split x={split} does not coincide with a grid line "
                f"(dx={(x1 - x0) / nx})")
        sub = np.where(centroids_x < split, 1, 2).astype(np.int64)

    return Mesh(nodes, tris, edges, tags, sub)


@dataclass(frozen=True)
class TermDescriptor:
    """One parameter-independent weak-form term.

    ``kind`` selects the integrand; ``advection_field`` is a vectorized map
    ``(k, 2) -> (k, 2)`` required for advection/supg kinds, ``source`` a
    vectorized scalar field for rhs kinds. ``subdomain`` restricts the
    integral to tagged triangles. ``supg_weight`` picks the per-element
    convention for supg kinds: ``"hk"`` multiplies the integrand by
    ``h_K / |beta|``, ``"none"`` leaves the raw product.
    """

    kind: str
    advection_field: Callable | None = None
    source: Callable | None = None
    subdomain: int | None = None
    supg_weight: str = "hk"

    def __post_init__(self):
        if self.kind not in MATRIX_KINDS + VECTOR_KINDS:
            raise MeshError(f"unknown term kind {self.kind!r}")
        needs_field = self.kind in ("advection",) + SUPG_KINDS
        if needs_field and self.advection_field is None:
            raise MeshError(f"kind {self.kind!r} requires an advection_field")
        if self.kind in VECTOR_KINDS and self.source is None:
            raise MeshError(f"kind {self.kind!r} requires a source")
        if self.supg_weight not in ("hk", "none"):
            raise MeshError(f"unknown supg_weight {self.supg_weight!r}")


def _field_at_quad(field, pts):
    """Evaluate a vector field at quadrature points, shape (k, q, 2)."""
    flat = pts.reshape(-1, 2)
    vals = np.asarray(field(flat), dtype=float)
    if vals.shape != flat.shape:
        raise MeshError("advection_field must return one 2-vector per point")
    return vals.reshape(pts.shape)


def _scalar_at_quad(func, pts):
    flat = pts.reshape(-1, 2)
    vals = np.asarray(func(flat), dtype=float)
    if vals.shape != (flat.shape[0],):
        raise MeshError("source must return one scalar per point")
    return vals.reshape(pts.shape[:2])


def _supg_factors(term, mesh, elems, beta_q):
    """Per-element weight and per-quad-point divisor for supg kinds."""
    if term.supg_weight == "hk":
        speed = np.linalg.norm(beta_q, axis=2)          # (k, q)
        if np.any(speed <= 1e-14 * max(speed.max(), 1.0)):
            raise MeshError(
                "advection field magnitude vanishes at a quadrature point "
                "inside a supg term's subdomain")
        return mesh.h[elems], speed
    return np.ones(elems.size), np.ones(beta_q.shape[:2])


def assemble_term(mesh: Mesh, term: TermDescriptor):
    """Assemble one term into a CSR matrix (or a dense vector for rhs kinds)."""
    elems = mesh.elements_of(term.subdomain)
    area = mesh.areas[elems]
    grads = mesh.grads[elems]                            # (k, 3, 2)
    pts = mesh.quad_points[elems]                        # (k, 3, 2)
    V = _QP_BARY                                         # (q, i) basis at quad pts
    w = _QP_W

    kind = term.kind
    if kind == "mass":
        ref = np.einsum("q,qi,qj->ij", w, V, V)
        loc = area[:, None, None] * ref[None, :, :]
    elif kind == "diffusion-full":
        loc = area[:, None, None] * np.einsum("mid,mjd->mij", grads, grads)
    elif kind == "diffusion-xx":
        loc = area[:, None, None] * np.einsum("mi,mj->mij", grads[:, :, 0], grads[:, :, 0])
    elif kind == "diffusion-yy":
        loc = area[:, None, None] * np.einsum("mi,mj->mij", grads[:, :, 1], grads[:, :, 1])
    elif kind == "diffusion-xy":
        gx, gy = grads[:, :, 0], grads[:, :, 1]
        loc = area[:, None, None] * (np.einsum("mi,mj->mij", gy, gx)
                                     + np.einsum("mi,mj->mij", gx, gy))
    elif kind == "advection":
        beta_q = _field_at_quad(term.advection_field, pts)
        bdg = np.einsum("mqd,mjd->mqj", beta_q, grads)   # beta . grad(trial)
        loc = area[:, None, None] * np.einsum("q,qi,mqj->mij", w, V, bdg)
    elif kind == "supg-advection-advection":
        beta_q = _field_at_quad(term.advection_field, pts)
        wk, speed = _supg_factors(term, mesh, elems, beta_q)
        bdg = np.einsum("mqd,mjd->mqj", beta_q, grads)
        loc = (wk * area)[:, None, None] * np.einsum(
            "q,mqi,mqj->mij", w, bdg / speed[:, :, None], bdg)
    elif kind == "supg-mass-advection":
        beta_q = _field_at_quad(term.advection_field, pts)
        wk, speed = _supg_factors(term, mesh, elems, beta_q)
        bdg = np.einsum("mqd,mid->mqi", beta_q, grads)   # beta . grad(test)
        loc = (wk * area)[:, None, None] * np.einsum(
            "q,mqi,qj->mij", w, bdg / speed[:, :, None], V)
    elif kind == "rhs-source":
        f_q = _scalar_at_quad(term.source, pts)
        flocal = area[:, None] * np.einsum("q,mq,qi->mi", w, f_q, V)
        vec = np.zeros(mesh.n_nodes)
        np.add.at(vec, mesh.triangles[elems].ravel(), flocal.ravel())
        return vec
    elif kind == "rhs-supg":
        beta_q = _field_at_quad(term.advection_field, pts)
        wk, speed = _supg_factors(term, mesh, elems, beta_q)
        f_q = _scalar_at_quad(term.source, pts)
        bdg = np.einsum("mqd,mid->mqi", beta_q, grads)
        flocal = (wk * area)[:, None] * np.einsum(
            "q,mq,mqi->mi", w, f_q / speed, bdg)
        vec = np.zeros(mesh.n_nodes)
        np.add.at(vec, mesh.triangles[elems].ravel(), flocal.ravel())
        return vec
    else:  # pragma: no cover - guarded by TermDescriptor
        raise MeshError(f"unknown term kind {kind!r}")

    conn = mesh.triangles[elems]
    rows = np.repeat(conn, 3, axis=1).ravel()
    cols = np.tile(conn, (1, 3)).ravel()
    mat = sp.coo_matrix((loc.ravel(), (rows, cols)),
                        shape=(mesh.n_nodes, mesh.n_nodes))
    return mat.tocsr()


@dataclass(frozen=True)
class LiftingData:
    """Nodal interpolant of Dirichlet data plus the free/fixed dof split."""

    lifting: np.ndarray
    free_dofs: np.ndarray
    dirichlet_dofs: np.ndarray
    dirichlet_values: np.ndarray

    def expand(self, free_values: np.ndarray) -> np.ndarray:
        """Scatter free-dof coefficients into a full field plus the lifting."""
        full = self.lifting.copy()
        full[self.free_dofs] += free_values
        return full


def build_lifting(mesh: Mesh, dirichlet_values: Mapping[int, float | Callable],
                  corner_rule: Callable | None = None) -> LiftingData:
    """Interpolate boundary data nodally and split dofs.

    ``dirichlet_values`` maps boundary tags to constants or callables
    ``f((k, 2) array) -> (k,)``. Nodes shared by tags that disagree are
    resolved by ``corner_rule(values) -> value``; without one, a conflict
    raises with the offending node id.
    """
    values_at: dict[int, list[float]] = {}
    for tag, val in dirichlet_values.items():
        nodes = mesh.boundary_nodes(tag)
        if nodes.size == 0:
            raise MeshError(f"dirichlet tag {tag} matches no boundary edge")
        if callable(val):
            vals = np.asarray(val(mesh.nodes[nodes]), dtype=float)
        else:
            vals = np.full(nodes.size, float(val))
        for n, v in zip(nodes, vals):
            values_at.setdefault(int(n), []).append(float(v))

    lifting = np.zeros(mesh.n_nodes)
    dir_dofs = np.array(sorted(values_at), dtype=np.int64)
    dir_vals = np.empty(dir_dofs.size)
    for k, n in enumerate(dir_dofs):
        vals = values_at[n]
        if np.ptp(vals) <= 1e-12 * max(1.0, np.max(np.abs(vals))):
            dir_vals[k] = vals[0]
        elif corner_rule is not None:
            dir_vals[k] = corner_rule(vals)
        else:
            raise MeshError(f"conflicting Dirichlet values at node {n}: {vals}")
    lifting[dir_dofs] = dir_vals
    free = np.setdiff1d(np.arange(mesh.n_nodes), dir_dofs)
    return LiftingData(lifting, free, dir_dofs, dir_vals)


def zero_wins(values) -> float:
    """Corner precedence: a homogeneous (zero) value dominates."""
    return 0.0 if any(abs(v) < 1e-14 for v in values) else min(values)


def element_peclet(mesh: Mesh, beta_field: Callable, eps: float) -> np.ndarray:
    """Element Peclet numbers |beta(centroid)| h_K / (2 eps)."""
    if eps <= 0.0:
        raise ValueError("diffusivity eps must be positive")
    beta = np.asarray(beta_field(mesh.centroids), dtype=float)
    speed = np.linalg.norm(beta, axis=1)
    return speed * mesh.h / (2.0 * eps)


def solve_sparse(A, b: np.ndarray) -> np.ndarray:
    """Direct sparse solve with a residual guarantee.

    Raises :class:`SolveFailure` carrying the factorization diagnostic on
    singular/ill-conditioned systems, or when the residual exceeds
    ``1e-10 * (||A||_F ||x|| + ||b||)``.
    """
    A = sp.csc_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise SolveFailure(f"matrix is not square: {A.shape}")
    b = np.asarray(b, dtype=float)
    try:
        lu = spla.splu(A)
        x = lu.solve(b)
    except RuntimeError as err:
        raise SolveFailure(f"sparse LU factorization failed: {err}") from err
    if not np.all(np.isfinite(x)):
        raise SolveFailure("sparse solve produced non-finite entries")
    resid = np.linalg.norm(A @ x - b)
    fro = sp.linalg.norm(A)
    bound = 1e-10 * (fro * np.linalg.norm(x) + np.linalg.norm(b))
    if resid > bound:
        raise SolveFailure(
            f"solve residual {resid:.3e} exceeds bound {bound:.3e}; "
            "matrix is likely ill-conditioned")
    return x
