"""Kernel-level tests: mesh construction, assembly exactness, lifting, solve."""

import numpy as np
import pytest
import scipy.sparse as sp
import sympy

from rbstab.fem import (
    Mesh,
    MeshError,
    SolveFailure,
    TermDescriptor,
    assemble_term,
    build_lifting,
    build_structured_mesh,
    element_peclet,
    solve_sparse,
    zero_wins,
)


def unit_square(n):
    return build_structured_mesh((0, 1, 0, 1), n, n)


# ---------------------------------------------------------------- mesh shape

def test_smallest_mesh():
    mesh = unit_square(1)
    assert mesh.n_triangles == 2
    assert mesh.n_nodes == 4
    assert np.allclose(mesh.h, np.sqrt(2.0))
    assert np.allclose(mesh.areas, 0.5)


def test_split_assigns_subdomains():
    mesh = build_structured_mesh((0, 2, 0, 1), 2, 1, subdomain_split=1.0)
    assert mesh.n_triangles == 4
    assert sorted(mesh.subdomain_tags) == [1, 1, 2, 2]


def test_split_off_grid_rejected():
    with pytest.raises(MeshError, match="grid line"):
        build_structured_mesh((0, 2, 0, 1), 3, 1, subdomain_split=1.0)


def test_graetz_scale_mesh_matches_dof_count():
    # 93 x 47 grid of nodes ~ the reference 4369-dof discretization
    mesh = build_structured_mesh((0, 2, 0, 1), 92, 46, subdomain_split=1.0)
    assert abs(mesh.n_nodes - 4369) / 4369 < 0.05


def test_boundary_edges_cover_perimeter_once():
    mesh = unit_square(4)
    assert mesh.boundary_edges.shape[0] == 16
    # each boundary edge length sums to the perimeter
    lengths = np.linalg.norm(
        mesh.nodes[mesh.boundary_edges[:, 0]] - mesh.nodes[mesh.boundary_edges[:, 1]],
        axis=1)
    assert np.isclose(lengths.sum(), 4.0)


# ------------------------------------------------------- assembly invariants

def test_mass_partition_of_unity():
    mesh = unit_square(1)
    M = assemble_term(mesh, TermDescriptor("mass"))
    assert abs(M.sum() - 1.0) < 1e-12
    mesh = build_structured_mesh((0, 2, 0, 1), 6, 3)
    M = assemble_term(mesh, TermDescriptor("mass"))
    assert abs(M.sum() - 2.0) < 1e-12 * 2.0


def test_diffusion_annihilates_constants():
    for kind in ("diffusion-full", "diffusion-xx", "diffusion-yy", "diffusion-xy"):
        mesh = unit_square(3)
        A = assemble_term(mesh, TermDescriptor(kind))
        ones = np.ones(mesh.n_nodes)
        assert np.max(np.abs(A @ ones)) < 1e-12 * sp.linalg.norm(A)


def test_supg_matrix_is_positive_semidefinite():
    mesh = build_structured_mesh((0, 2, 0, 1), 8, 4, subdomain_split=1.0)
    beta = lambda x: np.column_stack([4 * x[:, 1] * (1 - x[:, 1]), np.zeros(len(x))])
    S = assemble_term(mesh, TermDescriptor("supg-advection-advection",
                                           advection_field=beta, subdomain=1))
    rng = np.random.default_rng(7)
    for _ in range(100):
        v = rng.standard_normal(mesh.n_nodes)
        assert v @ (S @ v) >= -1e-12 * (v @ v)


def test_supg_rejects_vanishing_field():
    mesh = unit_square(2)
    zero = lambda x: np.zeros_like(x)
    with pytest.raises(MeshError, match="vanishes"):
        assemble_term(mesh, TermDescriptor("supg-advection-advection",
                                           advection_field=zero))


# ------------------------------------------------ symbolic quadrature oracle

def _single_triangle_mesh():
    nodes = np.array([[0.2, 0.1], [1.1, 0.3], [0.4, 0.9]])
    tris = np.array([[0, 1, 2]])
    edges = np.array([[0, 1], [1, 2], [2, 0]])
    return Mesh(nodes, tris, edges, np.array([1, 2, 3]), np.array([1]))


def _symbolic_basis(nodes):
    """Exact P1 barycentric basis functions on one triangle."""
    x, y = sympy.symbols("x y", real=True)
    A = sympy.Matrix([[1, nodes[0][0], nodes[0][1]],
                      [1, nodes[1][0], nodes[1][1]],
                      [1, nodes[2][0], nodes[2][1]]])
    coeffs = A.inv()
    basis = [coeffs[0, i] + coeffs[1, i] * x + coeffs[2, i] * y for i in range(3)]
    return x, y, basis


def _symbolic_integral(expr, x, y, nodes):
    """Integrate expr over the triangle by mapping to the reference element."""
    s, t = sympy.symbols("s t", nonnegative=True)
    xm = nodes[0][0] + (nodes[1][0] - nodes[0][0]) * s + (nodes[2][0] - nodes[0][0]) * t
    ym = nodes[0][1] + (nodes[1][1] - nodes[0][1]) * s + (nodes[2][1] - nodes[0][1]) * t
    jac = sympy.Matrix([[nodes[1][0] - nodes[0][0], nodes[2][0] - nodes[0][0]],
                        [nodes[1][1] - nodes[0][1], nodes[2][1] - nodes[0][1]]]).det()
    mapped = expr.subs({x: xm, y: ym})
    inner = sympy.integrate(mapped, (t, 0, 1 - s))
    return float(sympy.integrate(inner, (s, 0, 1)) * abs(jac))


def test_quadrature_exactness_against_symbolic_integration():
    """Every term kind matches exact integration on a single skewed triangle."""
    mesh = _single_triangle_mesh()
    nodes = mesh.nodes
    x, y, basis = _symbolic_basis(nodes)
    bx = sympy.Integer(1) - y  # affine-in-y advection x-component
    beta_np = lambda p: np.column_stack([1 - p[:, 1], np.zeros(len(p))])
    speed = bx  # |beta| for this field (positive on the triangle)
    fsym = x + 2 * y
    f_np = lambda p: p[:, 0] + 2 * p[:, 1]
    h = mesh.h[0]

    matrix_cases = {
        "mass": lambda i, j: basis[i] * basis[j],
        "diffusion-full": lambda i, j: (sympy.diff(basis[i], x) * sympy.diff(basis[j], x)
                                        + sympy.diff(basis[i], y) * sympy.diff(basis[j], y)),
        "diffusion-xx": lambda i, j: sympy.diff(basis[i], x) * sympy.diff(basis[j], x),
        "diffusion-yy": lambda i, j: sympy.diff(basis[i], y) * sympy.diff(basis[j], y),
        "diffusion-xy": lambda i, j: (sympy.diff(basis[i], y) * sympy.diff(basis[j], x)
                                      + sympy.diff(basis[i], x) * sympy.diff(basis[j], y)),
        "advection": lambda i, j: bx * sympy.diff(basis[j], x) * basis[i],
        "supg-advection-advection": lambda i, j: (
            h * bx * sympy.diff(basis[j], x) * bx * sympy.diff(basis[i], x) / speed),
        "supg-mass-advection": lambda i, j: (
            h * basis[j] * bx * sympy.diff(basis[i], x) / speed),
    }
    for kind, integrand in matrix_cases.items():
        term = TermDescriptor(kind, advection_field=beta_np)
        got = assemble_term(mesh, term).toarray()
        exact = np.array([[_symbolic_integral(integrand(i, j), x, y, nodes)
                           for j in range(3)] for i in range(3)])
        scale = max(np.abs(exact).max(), 1.0)
        assert np.max(np.abs(got - exact)) < 1e-12 * scale, kind

    vector_cases = {
        "rhs-source": lambda i: fsym * basis[i],
        "rhs-supg": lambda i: h * fsym * bx * sympy.diff(basis[i], x) / speed,
    }
    for kind, integrand in vector_cases.items():
        term = TermDescriptor(kind, advection_field=beta_np, source=f_np)
        got = assemble_term(mesh, term)
        exact = np.array([_symbolic_integral(integrand(i), x, y, nodes)
                          for i in range(3)])
        scale = max(np.abs(exact).max(), 1.0)
        assert np.max(np.abs(got - exact)) < 1e-12 * scale, kind


def test_advection_skew_plus_boundary_identity():
    """v' A v equals the boundary flux integral 0.5 * int beta.n v^2.

    Oracle: direct Simpson quadrature over boundary edges (exact for the
    quadratic integrand), independent of the element assembly path.
    """
    mesh = unit_square(4)
    beta = lambda p: np.column_stack([np.ones(len(p)), np.zeros(len(p))])
    A = assemble_term(mesh, TermDescriptor("advection", advection_field=beta))
    rng = np.random.default_rng(3)
    for _ in range(5):
        v = rng.standard_normal(mesh.n_nodes)
        flux = 0.0
        for (a, b), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
            pa, pb = mesh.nodes[a], mesh.nodes[b]
            length = np.linalg.norm(pb - pa)
            if np.isclose(pa[0], 1.0) and np.isclose(pb[0], 1.0):
                n = np.array([1.0, 0.0])
            elif np.isclose(pa[0], 0.0) and np.isclose(pb[0], 0.0):
                n = np.array([-1.0, 0.0])
            else:
                continue  # beta.n = 0 on horizontal sides for beta = (1, 0)
            va, vb = v[a], v[b]
            vm = 0.5 * (va + vb)
            integral = length * (va**2 + 4 * vm**2 + vb**2) / 6.0
            flux += n[0] * integral
        assert np.isclose(v @ (A @ v), 0.5 * flux, rtol=1e-12, atol=1e-12)


# -------------------------------------------------------------------- lifting

def test_zero_dirichlet_gives_zero_lifting():
    mesh = unit_square(3)
    lift = build_lifting(mesh, {1: 0.0, 2: 0.0, 3: 0.0, 4: 0.0})
    assert np.all(lift.lifting == 0.0)
    assert lift.free_dofs.size + lift.dirichlet_dofs.size == mesh.n_nodes


def test_unit_dirichlet_everywhere():
    mesh = unit_square(3)
    lift = build_lifting(mesh, {1: 1.0, 2: 1.0, 3: 1.0, 4: 1.0})
    boundary = mesh.boundary_nodes()
    assert np.all(lift.lifting[boundary] == 1.0)
    interior = np.setdiff1d(np.arange(mesh.n_nodes), boundary)
    assert np.all(lift.lifting[interior] == 0.0)


def test_conflicting_corner_rejected_and_resolved():
    mesh = unit_square(2)
    with pytest.raises(MeshError, match="node"):
        build_lifting(mesh, {1: 1.0, 2: 0.0, 3: 0.0, 4: 0.0})
    lift = build_lifting(mesh, {1: 1.0, 2: 0.0, 3: 0.0, 4: 0.0},
                         corner_rule=zero_wins)
    # corner (1, 0) is shared by bottom (u=1) and right (u=0): zero wins
    corner = np.flatnonzero(
        np.isclose(mesh.nodes[:, 0], 1.0) & np.isclose(mesh.nodes[:, 1], 0.0))[0]
    assert lift.lifting[corner] == 0.0


def test_graetz_lifting_counts_match_direct_node_count():
    """Hot-wall dof count equals nodes interior to the tagged segments."""
    from rbstab.problems import graetz_boundary_tagger

    mesh = build_structured_mesh((0, 2, 0, 1), 16, 8, subdomain_split=1.0,
                                 boundary_tagger=graetz_boundary_tagger)
    lift = build_lifting(mesh, {1: 0.0, 2: 0.0, 6: 0.0, 3: 1.0, 5: 1.0},
                         corner_rule=zero_wins)
    xs, ys = mesh.nodes[:, 0], mesh.nodes[:, 1]
    on_hot = ((np.isclose(ys, 0.0) | np.isclose(ys, 1.0)) & (xs > 1.0)
              & (xs <= 2.0 + 1e-12))
    # nodes interior to the hot segments (1 < x < 2) plus the outflow corners,
    # which the zero-wins rule leaves to the hot side (x = 2 is Neumann)
    expected = np.count_nonzero(on_hot & ~np.isclose(xs, 1.0))
    assert np.count_nonzero(lift.lifting == 1.0) == expected


# -------------------------------------------------------------------- peclet

def test_peclet_formula():
    mesh = unit_square(1)
    beta = lambda p: np.column_stack([np.ones(len(p)), np.zeros(len(p))])
    h = mesh.h[0]
    pe = element_peclet(mesh, beta, 1e-4)
    assert np.allclose(pe, h / 2e-4)
    pe = element_peclet(mesh, beta, h / 2.0)  # threshold of the regime
    assert np.allclose(pe, 1.0)
    zero = lambda p: np.zeros_like(p)
    assert np.allclose(element_peclet(mesh, zero, 1.0), 0.0)


def test_graetz_peclet_dominates_off_walls():
    from rbstab.problems import build_graetz

    problem = build_graetz(92, 46)
    pe = problem.element_peclet((1e4, 1.0))
    wall = np.isclose(problem.mesh.nodes[problem.mesh.triangles][:, :, 1], 0.0).any(axis=1)
    wall |= np.isclose(problem.mesh.nodes[problem.mesh.triangles][:, :, 1], 1.0).any(axis=1)
    assert np.all(pe[~wall] > 1.0)


# --------------------------------------------------------------------- solve

def test_solve_identity():
    b = np.array([3.0, -1.0, 2.0])
    x = solve_sparse(sp.identity(3, format="csr"), b)
    assert np.allclose(x, b)


def test_solve_tridiagonal_hand_value():
    A = sp.diags([[-1, -1], [2, 2, 2], [-1, -1]], offsets=[-1, 0, 1], format="csr")
    x = solve_sparse(A, np.ones(3))
    assert np.allclose(x, [1.5, 2.0, 1.5])


def test_solve_random_spd_meets_residual_bound():
    rng = np.random.default_rng(11)
    B = rng.standard_normal((50, 50))
    A = sp.csr_matrix(B @ B.T + 50 * np.eye(50))
    b = rng.standard_normal(50)
    x = solve_sparse(A, b)
    resid = np.linalg.norm(A @ x - b)
    assert resid <= 1e-10 * (sp.linalg.norm(A) * np.linalg.norm(x) + np.linalg.norm(b))


def test_solve_singular_raises_with_diagnostic():
    A = sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(SolveFailure):
        solve_sparse(A, np.array([1.0, 2.0]))
