"""Benchmark truth problems as affine decompositions of stabilized forms.

Two built-in problems are provided on their reference domains:

* ``graetz``: heat convection in a channel ``(0, 2) x (0, 1)`` with a
  Poiseuille profile, inverse diffusivity ``mu1`` and a geometric stretch
  ``mu2`` of the heated half, mapped back to the reference domain.
* ``front_square``: a propagating hot front on the unit square driven by a
  unit advection field at angle ``mu2``, inverse diffusivity ``mu1``.

Both expose plain and streamline-stabilized variants of every form through
one affine decomposition, so reduced spaces can project either variant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import (
    LiftingData,
    Mesh,
    TermDescriptor,
    assemble_term,
    build_lifting,
    build_structured_mesh,
    element_peclet,
    solve_sparse,
    zero_wins,
)

__all__ = [
    "AffineDecomposition",
    "ThetaSet",
    "TruthProblem",
    "TimeGrid",
    "Trajectory",
    "build_graetz",
    "build_front_square",
    "evaluate_thetas",
    "truth_solve",
    "truth_solve_transient",
    "graetz_boundary_tagger",
    "front_square_boundary_tagger",
]


@dataclass
class AffineDecomposition:
    """Parameter-independent terms paired with scalar coefficient functions.

    ``a_terms`` hold the plain bilinear form, ``s_terms`` the streamline
    additions (stabilized operator = a + s). ``f_terms``/``r_terms`` mirror
    them on the right side. ``m_terms``/``ms_terms`` carry the mass form for
    transient problems. ``diffusion_indices`` mark the a-terms whose sum is
    the parametrized diffusion part (used for energy norms and coercivity).
    """

    a_terms: list[tuple[Callable, sp.csr_matrix]]
    s_terms: list[tuple[Callable, sp.csr_matrix]]
    f_terms: list[tuple[Callable, np.ndarray]]
    r_terms: list[tuple[Callable, np.ndarray]]
    m_terms: list[tuple[Callable, sp.csr_matrix]] = field(default_factory=list)
    ms_terms: list[tuple[Callable, sp.csr_matrix]] = field(default_factory=list)
    diffusion_indices: tuple[int, ...] = (0,)

    @property
    def q_a(self) -> int:
        return len(self.a_terms)

    @property
    def q_s(self) -> int:
        return len(self.s_terms)


@dataclass(frozen=True)
class ThetaSet:
    """Affine coefficients of every form group at one parameter value."""

    a: np.ndarray
    s: np.ndarray
    f: np.ndarray
    r: np.ndarray
    m: np.ndarray
    ms: np.ndarray

    def operator(self, stabilized: bool) -> np.ndarray:
        return np.concatenate([self.a, self.s]) if stabilized else self.a

    def rhs(self, stabilized: bool) -> np.ndarray:
        return np.concatenate([self.f, self.r]) if stabilized else self.f

    def mass(self, stabilized: bool) -> np.ndarray:
        return np.concatenate([self.m, self.ms]) if stabilized else self.m


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time discretization with a scalar control signal g(t)."""

    dt: float
    n_steps: int
    control: Callable[[float], float] = lambda t: 1.0

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("time step must be positive")
        if self.n_steps < 1:
            raise ValueError("need at least one time step")

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def control_values(self) -> np.ndarray:
        return np.array([float(self.control(t)) for t in self.times])


@dataclass(frozen=True)
class Trajectory:
    """Time-indexed sequence of full-field coefficient vectors."""

    times: np.ndarray
    states: np.ndarray
    control_values: np.ndarray

    def __post_init__(self):
        steps = np.diff(self.times)
        if steps.size and (np.any(steps <= 0)
                           or np.ptp(steps) > 1e-10 * steps[0]):
            raise ValueError("times must increase with a constant step")
        if self.states.shape[0] != self.times.shape[0]:
            raise ValueError("one state per time instant required")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


class TruthProblem:
    """High-fidelity problem: mesh, lifting, affine forms, parameter box."""

    def __init__(self, problem_id: str, mesh: Mesh, lifting: LiftingData,
                 decomposition: AffineDecomposition, domain,
                 x_matrix: sp.csr_matrix,
                 advection_field: Callable[[np.ndarray], Callable],
                 h_max_physical: Callable[[np.ndarray], float],
                 beta_linf: Callable[[np.ndarray], float],
                 stream_sq_terms: Sequence[tuple[Callable, sp.csr_matrix]],
                 meta: dict | None = None):
        self.problem_id = problem_id
        self.mesh = mesh
        self.lifting = lifting
        self.decomposition = decomposition
        self.domain = np.asarray(domain, dtype=float)
        if self.domain.ndim != 2 or self.domain.shape[1] != 2 or np.any(
                self.domain[:, 0] > self.domain[:, 1]):
            raise ValueError("parameter domain must be a nonempty box")
        self.x_matrix = x_matrix
        self.advection_field = advection_field
        self.h_max_physical = h_max_physical
        self.beta_linf = beta_linf
        self.stream_sq_terms = list(stream_sq_terms)
        self.meta = dict(meta or {})

        free = lifting.free_dofs
        self.free = free
        self.x_ff = x_matrix[free][:, free].tocsc()
        dec = decomposition
        self.a_ff = [A[free][:, free].tocsr() for _, A in dec.a_terms + dec.s_terms]
        self.m_ff = [M[free][:, free].tocsr() for _, M in dec.m_terms + dec.ms_terms]
        self.f_free = [np.asarray(F)[free] for _, F in dec.f_terms + dec.r_terms]
        self._x_lu = None
        self._alpha_ref: tuple[np.ndarray, float] | None = None

    # ------------------------------------------------------------- parameters
    @property
    def n_free(self) -> int:
        return self.free.size

    def contains(self, mu) -> bool:
        mu = np.asarray(mu, dtype=float)
        lo, hi = self.domain[:, 0], self.domain[:, 1]
        pad = 1e-9 * np.maximum(1.0, np.abs(hi))
        return bool(mu.shape == (self.domain.shape[0],)
                    and np.all(mu >= lo - pad) and np.all(mu <= hi + pad))

    def mu_bar(self) -> np.ndarray:
        """Reference parameter for the coercivity bound (box midpoint)."""
        return self.domain.mean(axis=1)

    # ------------------------------------------------------------ assemblies
    def thetas(self, mu) -> ThetaSet:
        return evaluate_thetas(self, mu)

    def operator_matrix(self, mu, stabilized: bool) -> sp.csr_matrix:
        th = self.thetas(mu).operator(stabilized)
        return _weighted_sum(th, self.a_ff[:th.size])

    def rhs_vector(self, mu, stabilized: bool) -> np.ndarray:
        th = self.thetas(mu).rhs(stabilized)
        out = np.zeros(self.n_free)
        for c, f in zip(th, self.f_free[:th.size]):
            out += c * f
        return out

    def mass_matrix(self, mu, stabilized: bool) -> sp.csr_matrix:
        th = self.thetas(mu).mass(stabilized)
        if th.size == 0:
            raise ValueError("problem carries no mass terms")
        return _weighted_sum(th, self.m_ff[:th.size])

    def energy_matrix(self, mu) -> sp.csr_matrix:
        """Gram matrix of the parametrized diffusion part (energy norm)."""
        th = self.thetas(mu)
        idx = list(self.decomposition.diffusion_indices)
        return _weighted_sum(th.a[idx], [self.a_ff[q] for q in idx])

    def energy_norm(self, mu, e_free: np.ndarray) -> float:
        val = e_free @ (self.energy_matrix(mu) @ e_free)
        return math.sqrt(max(val, 0.0))

    # -------------------------------------------------------------- X product
    def x_solve(self, rhs: np.ndarray) -> np.ndarray:
        if self._x_lu is None:
            self._x_lu = spla.splu(self.x_ff)
        return self._x_lu.solve(rhs)

    def x_norm(self, v_free: np.ndarray) -> float:
        return math.sqrt(max(v_free @ (self.x_ff @ v_free), 0.0))

    # ------------------------------------------------------------ diagnostics
    def element_peclet(self, mu) -> np.ndarray:
        eps = 1.0 / float(np.asarray(mu)[0])
        return element_peclet(self.mesh, self.advection_field(mu), eps)

    def streamline_norm_sq(self, mu, full_field: np.ndarray) -> float:
        """``||beta . grad u||^2`` over the physical domain at ``mu``."""
        total = 0.0
        for theta, S in self.stream_sq_terms:
            total += float(theta(mu)) * (full_field @ (S @ full_field))
        return max(total, 0.0)


def _weighted_sum(coeffs, mats) -> sp.csr_matrix:
    out = coeffs[0] * mats[0]
    for c, A in zip(coeffs[1:], mats[1:]):
        out = out + c * A
    return out.tocsr()


def evaluate_thetas(problem: TruthProblem, mu) -> ThetaSet:
    """Affine coefficients at ``mu``; rejects parameters outside the box."""
    mu = np.asarray(mu, dtype=float)
    if not problem.contains(mu):
        raise ValueError(
            f"parameter {mu.tolist()} outside domain "
            f"{problem.domain.tolist()} of {problem.problem_id}")
    dec = problem.decomposition
    vals = {}
    for name, terms in (("a", dec.a_terms), ("s", dec.s_terms),
                        ("f", dec.f_terms), ("r", dec.r_terms),
                        ("m", dec.m_terms), ("ms", dec.ms_terms)):
        arr = np.array([float(theta(mu)) for theta, _ in terms])
        if arr.size and not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite affine coefficient in group {name}")
        vals[name] = arr
    return ThetaSet(**vals)


def truth_solve(problem: TruthProblem, mu, stabilized: bool = True) -> np.ndarray:
    """Galerkin solve on free dofs; returns the full field with lifting."""
    A = problem.operator_matrix(mu, stabilized)
    b = problem.rhs_vector(mu, stabilized)
    u_free = solve_sparse(A, b)
    return problem.lifting.expand(u_free)


def project_initial_free(problem: TruthProblem, u0, g0: float) -> np.ndarray:
    """L2 projection of ``u0 - g0 * lifting`` onto the free-dof space.

    Uses the reference (theta-free) mass product so the projected state does
    not depend on the parameter; truth and reduced evolutions then share one
    initial condition exactly.
    """
    if callable(u0):
        u0 = np.asarray(u0(problem.mesh.nodes), dtype=float)
    u0 = np.asarray(u0, dtype=float)
    if u0.shape != (problem.mesh.n_nodes,):
        raise ValueError("u0 must provide one value per mesh node")
    m_terms = problem.decomposition.m_terms
    if not m_terms:
        raise ValueError("problem carries no mass terms")
    m_ref = m_terms[0][1]
    for _, M in m_terms[1:]:
        m_ref = m_ref + M
    rhs = (m_ref @ (u0 - g0 * problem.lifting.lifting))[problem.free]
    m_ref_ff = m_ref[problem.free][:, problem.free]
    return solve_sparse(m_ref_ff.tocsc(), rhs)


def truth_solve_transient(problem: TruthProblem, mu, grid: TimeGrid,
                          u0, stabilized: bool = True) -> Trajectory:
    """Backward Euler in time; the step matrix is factored once and reused.

    ``u0`` is a nodal field (or callable on coordinates) that is L2-projected
    onto the homogeneous space after removing ``g(0) * lifting``; each stored
    state is the homogeneous unknown plus ``g(t_j) * lifting``.
    """
    g = grid.control_values()
    u_hom = project_initial_free(problem, u0, g[0])

    M = problem.mass_matrix(mu, stabilized)
    A = problem.operator_matrix(mu, stabilized)
    F = problem.rhs_vector(mu, stabilized)
    step_matrix = (M / grid.dt + A).tocsc()
    try:
        lu = spla.splu(step_matrix)
    except RuntimeError as err:
        raise RuntimeError(f"transient step factorization failed: {err}") from err

    states = np.empty((grid.n_steps + 1, problem.mesh.n_nodes))
    states[0] = g[0] * problem.lifting.lifting
    states[0, problem.free] += u_hom
    for j in range(1, grid.n_steps + 1):
        rhs = (M @ u_hom) / grid.dt + g[j] * F
        u_hom = lu.solve(rhs)
        states[j] = g[j] * problem.lifting.lifting
        states[j, problem.free] += u_hom
    return Trajectory(grid.times, states, g)


# ---------------------------------------------------------------------------
# Poiseuille-Graetz channel
# ---------------------------------------------------------------------------

def graetz_boundary_tagger(xm: float, ym: float) -> int:
    """Six boundary segments: cold inlet/walls (1, 2, 6), hot walls (3, 5),
    outflow (4)."""
    tol = 1e-12
    if abs(xm) < tol:
        return 1
    if abs(xm - 2.0) < tol:
        return 4
    if abs(ym) < tol:
        return 2 if xm < 1.0 else 3
    return 6 if xm < 1.0 else 5


def _poiseuille(points: np.ndarray) -> np.ndarray:
    y = points[:, 1]
    return np.column_stack([4.0 * y * (1.0 - y), np.zeros_like(y)])


def build_graetz(nx: int, ny: int,
                 domain=((1e4, 1e5), (0.5, 4.0))) -> TruthProblem:
    """Graetz channel on the reference domain, split at x = 1.

    Plain terms: full diffusion and Poiseuille advection on the left half;
    stretched xx/yy diffusion and advection on the right half. Streamline
    terms act per half with coefficients 1 and ``1/sqrt(mu2)``. The right
    side comes from homogenizing the hot/cold wall data.
    """
    if nx % 2 != 0:
        raise ValueError("nx must be even so the split x=1 lies on a grid line")
    mesh = build_structured_mesh((0, 2, 0, 1), nx, ny, subdomain_split=1.0,
                                 boundary_tagger=graetz_boundary_tagger)
    lifting = build_lifting(mesh, {1: 0.0, 2: 0.0, 6: 0.0, 3: 1.0, 5: 1.0},
                            corner_rule=zero_wins)

    diff1 = assemble_term(mesh, TermDescriptor("diffusion-full", subdomain=1))
    adv1 = assemble_term(mesh, TermDescriptor("advection", advection_field=_poiseuille,
                                              subdomain=1))
    diff2xx = assemble_term(mesh, TermDescriptor("diffusion-xx", subdomain=2))
    diff2yy = assemble_term(mesh, TermDescriptor("diffusion-yy", subdomain=2))
    adv2 = assemble_term(mesh, TermDescriptor("advection", advection_field=_poiseuille,
                                              subdomain=2))
    supg1 = assemble_term(mesh, TermDescriptor("supg-advection-advection",
                                               advection_field=_poiseuille,
                                               subdomain=1, supg_weight="hk"))
    supg2 = assemble_term(mesh, TermDescriptor("supg-advection-advection",
                                               advection_field=_poiseuille,
                                               subdomain=2, supg_weight="hk"))

    a_terms = [
        (lambda mu: 1.0 / mu[0], diff1),
        (lambda mu: 1.0, adv1),
        (lambda mu: 1.0 / (mu[0] * mu[1]), diff2xx),
        (lambda mu: mu[1] / mu[0], diff2yy),
        (lambda mu: 1.0, adv2),
    ]
    s_terms = [
        (lambda mu: 1.0, supg1),
        (lambda mu: 1.0 / math.sqrt(mu[1]), supg2),
    ]

    mass1 = assemble_term(mesh, TermDescriptor("mass", subdomain=1))
    mass2 = assemble_term(mesh, TermDescriptor("mass", subdomain=2))
    msupg1 = assemble_term(mesh, TermDescriptor("supg-mass-advection",
                                                advection_field=_poiseuille,
                                                subdomain=1, supg_weight="hk"))
    msupg2 = assemble_term(mesh, TermDescriptor("supg-mass-advection",
                                                advection_field=_poiseuille,
                                                subdomain=2, supg_weight="hk"))
    m_terms = [
        (lambda mu: 1.0, mass1),
        (lambda mu: mu[1], mass2),
    ]
    ms_terms = [
        (lambda mu: 1.0, msupg1),
        (lambda mu: 1.0 / math.sqrt(mu[1]), msupg2),
    ]

    l = lifting.lifting
    f_terms = [(theta, -(A @ l)) for theta, A in a_terms]
    r_terms = [(theta, -(S @ l)) for theta, S in s_terms]

    x_matrix = (assemble_term(mesh, TermDescriptor("diffusion-full"))
                + assemble_term(mesh, TermDescriptor("mass"))).tocsr()

    stream1 = assemble_term(mesh, TermDescriptor("supg-advection-advection",
                                                 advection_field=_poiseuille,
                                                 subdomain=1, supg_weight="none"))
    stream2 = assemble_term(mesh, TermDescriptor("supg-advection-advection",
                                                 advection_field=_poiseuille,
                                                 subdomain=2, supg_weight="none"))
    stream_sq = [(lambda mu: 1.0, stream1), (lambda mu: 1.0 / mu[1], stream2)]

    dx, dy = 2.0 / nx, 1.0 / ny

    def h_max_physical(mu):
        return max(math.hypot(dx, dy), math.hypot(mu[1] * dx, dy))

    decomposition = AffineDecomposition(
        a_terms=a_terms, s_terms=s_terms, f_terms=f_terms, r_terms=r_terms,
        m_terms=m_terms, ms_terms=ms_terms, diffusion_indices=(0, 2, 3))
    return TruthProblem(
        problem_id=f"graetz-{nx}x{ny}", mesh=mesh, lifting=lifting,
        decomposition=decomposition, domain=domain, x_matrix=x_matrix,
        advection_field=lambda mu: _poiseuille,
        h_max_physical=h_max_physical,
        beta_linf=lambda mu: 1.0,
        stream_sq_terms=stream_sq,
        meta={"nx": nx, "ny": ny, "kind": "graetz"})


# ---------------------------------------------------------------------------
# Propagating front on the unit square
# ---------------------------------------------------------------------------

def front_square_boundary_tagger(xm: float, ym: float) -> int:
    """Five segments: hot inflow walls (1: bottom, 2: left) and cold walls
    (3: lower right, 4: upper right, 5: top)."""
    tol = 1e-12
    if abs(ym) < tol:
        return 1
    if abs(xm) < tol:
        return 2
    if abs(xm - 1.0) < tol:
        return 3 if ym < 0.5 else 4
    return 5


def build_front_square(nx: int, ny: int, delta: float = 1.0,
                       domain=((1e4, 1e5), (0.5, 1.0))) -> TruthProblem:
    """Unit-square front problem with angle-parametrized advection.

    Streamline stabilization expands ``(cos, sin) x (cos, sin)`` over three
    fixed derivative-product matrices scaled by the uniform coefficient
    ``delta``; the right side homogenizes the hot/cold wall data.
    """
    if delta <= 0.0:
        raise ValueError("stabilization coefficient delta must be positive")
    mesh = build_structured_mesh((0, 1, 0, 1), nx, ny,
                                 boundary_tagger=front_square_boundary_tagger)
    lifting = build_lifting(mesh, {1: 1.0, 2: 1.0, 3: 0.0, 4: 0.0, 5: 0.0},
                            corner_rule=zero_wins)

    ex = lambda p: np.column_stack([np.ones(len(p)), np.zeros(len(p))])
    ey = lambda p: np.column_stack([np.zeros(len(p)), np.ones(len(p))])

    diff = assemble_term(mesh, TermDescriptor("diffusion-full"))
    adv_x = assemble_term(mesh, TermDescriptor("advection", advection_field=ex))
    adv_y = assemble_term(mesh, TermDescriptor("advection", advection_field=ey))
    dxx = assemble_term(mesh, TermDescriptor("diffusion-xx"))
    dxy = assemble_term(mesh, TermDescriptor("diffusion-xy"))
    dyy = assemble_term(mesh, TermDescriptor("diffusion-yy"))

    a_terms = [
        (lambda mu: 1.0 / mu[0], diff),
        (lambda mu: math.cos(mu[1]), adv_x),
        (lambda mu: math.sin(mu[1]), adv_y),
    ]
    s_terms = [
        (lambda mu: delta * math.cos(mu[1]) ** 2, dxx),
        (lambda mu: delta * math.cos(mu[1]) * math.sin(mu[1]), dxy),
        (lambda mu: delta * math.sin(mu[1]) ** 2, dyy),
    ]

    mass = assemble_term(mesh, TermDescriptor("mass"))
    msupg_x = assemble_term(mesh, TermDescriptor("supg-mass-advection",
                                                 advection_field=ex,
                                                 supg_weight="none"))
    msupg_y = assemble_term(mesh, TermDescriptor("supg-mass-advection",
                                                 advection_field=ey,
                                                 supg_weight="none"))
    m_terms = [(lambda mu: 1.0, mass)]
    ms_terms = [
        (lambda mu: delta * math.cos(mu[1]), msupg_x),
        (lambda mu: delta * math.sin(mu[1]), msupg_y),
    ]

    l = lifting.lifting
    f_terms = [(theta, -(A @ l)) for theta, A in a_terms]
    r_terms = [(theta, -(S @ l)) for theta, S in s_terms]

    x_matrix = (diff + mass).tocsr()

    stream_sq = [
        (lambda mu: math.cos(mu[1]) ** 2, dxx),
        (lambda mu: math.cos(mu[1]) * math.sin(mu[1]), dxy),
        (lambda mu: math.sin(mu[1]) ** 2, dyy),
    ]

    def advection_field(mu):
        c, s = math.cos(mu[1]), math.sin(mu[1])

        def beta(points):
            return np.column_stack([np.full(len(points), c),
                                    np.full(len(points), s)])

        return beta

    h_max = float(mesh.h.max())
    decomposition = AffineDecomposition(
        a_terms=a_terms, s_terms=s_terms, f_terms=f_terms, r_terms=r_terms,
        m_terms=m_terms, ms_terms=ms_terms, diffusion_indices=(0,))
    return TruthProblem(
        problem_id=f"front_square-{nx}x{ny}", mesh=mesh, lifting=lifting,
        decomposition=decomposition, domain=domain, x_matrix=x_matrix,
        advection_field=advection_field,
        h_max_physical=lambda mu: h_max,
        beta_linf=lambda mu: 1.0,
        stream_sq_terms=stream_sq,
        meta={"nx": nx, "ny": ny, "delta": delta, "kind": "front_square"})
