"""POD-Greedy reduction for the Backward-Euler-SUPG transient problems.

The offline loop alternates a greedy pick in parameter (driven by a
residual-based space-time estimator) with a POD compression of the selected
trajectory's component orthogonal to the current basis, so each iteration
only adds new information. The initial state is L2-projected once against
the reference (parameter-independent) mass product and pre-seeded into the
basis, which keeps the reduced initial condition and the estimator's initial
term consistent between the truth and reduced evolutions.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .problems import (
    TimeGrid,
    Trajectory,
    TruthProblem,
    project_initial_free,
    truth_solve_transient,
)
from .rb import (
    GreedyRecord,
    GreedyTrace,
    ReducedSpace,
    coercivity_lower_bound,
    gram_schmidt_append,
)

__all__ = [
    "TimeGrid",
    "PodGreedyConfig",
    "ReducedTrajectory",
    "pod",
    "pod_greedy",
    "project_initial_free",
    "transient_rb_solve",
    "spacetime_error",
    "parabolic_error_estimator",
]


@dataclass(frozen=True)
class PodGreedyConfig:
    """Offline setup: training set, time grid, initial data, compression."""

    xi_train: np.ndarray
    grid: TimeGrid
    u0: np.ndarray | Callable
    tol: float = 0.0
    n_max: int = 20
    n_add: int = 2
    energy_tol: float = 1.0 - 1e-7
    weight: Callable | None = None
    stabilize_offline: bool = True

    def __post_init__(self):
        if self.n_add < 1:
            raise ValueError("need at least one mode per iteration")
        if not 0.0 < self.energy_tol <= 1.0:
            raise ValueError("energy_tol must lie in (0, 1]")


@dataclass(frozen=True)
class ReducedTrajectory:
    """Reduced coefficients over the time grid."""

    times: np.ndarray
    coeffs: np.ndarray              # (J+1, N)
    control_values: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def to_full(self, space: ReducedSpace) -> Trajectory:
        """Full-field reconstruction with the control-scaled lifting."""
        problem = space.problem
        states = np.empty((self.times.size, problem.mesh.n_nodes))
        for j in range(self.times.size):
            states[j] = self.control_values[j] * problem.lifting.lifting
            states[j, problem.free] += space.basis @ self.coeffs[j]
        return Trajectory(self.times, states, self.control_values)


def pod(snapshots, x_matrix, n_add: int, energy_tol: float) -> np.ndarray:
    """Method of snapshots in the X inner product.

    Returns at most ``n_add`` X-orthonormal modes, truncated earlier once the
    captured eigenvalue energy reaches ``energy_tol`` of the trace. All-zero
    input yields an empty mode set.
    """
    S = np.column_stack(snapshots) if not isinstance(snapshots, np.ndarray) \
        else snapshots
    if S.ndim != 2 or S.shape[1] == 0:
        raise ValueError("need at least one snapshot")
    gram = S.T @ (x_matrix @ S)
    lam, vecs = scipy.linalg.eigh(gram)
    lam = lam[::-1]
    vecs = vecs[:, ::-1]
    lam = np.clip(lam, 0.0, None)
    total = lam.sum()
    if total <= 0.0:
        return np.empty((S.shape[0], 0))
    keep = 0
    captured = 0.0
    for k in range(lam.size):
        if lam[k] <= 1e-12 * lam[0]:
            break
        keep = k + 1
        captured += lam[k]
        if captured >= energy_tol * total:
            break
    keep = min(keep, n_add)
    modes = S @ (vecs[:, :keep] / np.sqrt(lam[:keep]))
    return modes


def transient_rb_solve(space: ReducedSpace, mu, grid: TimeGrid,
                       online_stabilized: bool = True) -> ReducedTrajectory:
    """Backward Euler on the reduced system; one factorization per query."""
    if not space.with_mass:
        raise ValueError("space was built without mass blocks")
    th = space.problem.thetas(mu)
    A = np.tensordot(th.operator(online_stabilized),
                     space.operator_blocks(online_stabilized), axes=1)
    M = np.tensordot(th.mass(online_stabilized),
                     space.mass_blocks(online_stabilized), axes=1)
    F = th.rhs(online_stabilized) @ space.rhs_blocks(online_stabilized)
    g = grid.control_values()
    coeffs = np.empty((grid.n_steps + 1, space.n))
    coeffs[0] = space.initial_coords()
    try:
        lu = scipy.linalg.lu_factor(M / grid.dt + A)
    except scipy.linalg.LinAlgError as err:
        raise RuntimeError(f"singular reduced step matrix at mu={mu}") from err
    for j in range(1, grid.n_steps + 1):
        rhs = (M @ coeffs[j - 1]) / grid.dt + g[j] * F
        coeffs[j] = scipy.linalg.lu_solve(lu, rhs)
    return ReducedTrajectory(grid.times, coeffs, g)


def spacetime_error(problem: TruthProblem, truth: Trajectory,
                    reduced: Trajectory, mu) -> float:
    """Space-time error norm: final-time mass energy plus the dt-weighted sum
    of energy-norm squares over the steps."""
    if truth.times.shape != reduced.times.shape or not np.allclose(
            truth.times, reduced.times):
        raise ValueError("trajectories live on different time grids")
    e = (truth.states - reduced.states)[:, problem.free]
    th = problem.thetas(mu)
    m_mat = None
    for c, M in zip(th.m, problem.m_ff):
        m_mat = c * M if m_mat is None else m_mat + c * M
    e_mat = problem.energy_matrix(mu)
    dt = truth.dt
    val = float(e[-1] @ (m_mat @ e[-1]))
    energies = np.einsum("jn,jn->j", e[1:], (e_mat @ e[1:].T).T)
    val += dt * float(np.clip(energies, 0.0, None).sum())
    return math.sqrt(max(val, 0.0))


def _step_dual_norms_sq(space: ReducedSpace, th, traj: ReducedTrajectory,
                        stabilized: bool) -> float:
    """Sum over steps of the squared X-dual residual norms, batched."""
    qf = space.qf_all if stabilized else space.qf_plain
    qa = space.qa_all if stabilized else space.qa_plain
    qm = space.qm_all if stabilized else space.qm_plain
    thf = th.rhs(True)[:qf]
    tha = th.operator(True)[:qa]
    thm = th.mass(True)[:qm]
    C = traj.coeffs[1:]
    D = (traj.coeffs[1:] - traj.coeffs[:-1]) / traj.dt
    g = traj.control_values[1:]
    wa = -C[:, :, None] * tha[None, None, :]
    wm = -D[:, :, None] * thm[None, None, :]
    blocks = np.concatenate([wa, wm], axis=2).reshape(C.shape[0], -1)
    W = np.hstack([g[:, None] * thf[None, :], blocks])
    idx = space.variant_slices(stabilized)
    G = space.residual_gram[np.ix_(idx, idx)]
    vals = np.einsum("jp,pq,jq->j", W, G, W)
    return float(np.clip(vals, 0.0, None).sum())


def parabolic_error_estimator(space: ReducedSpace, mu,
                              traj: ReducedTrajectory,
                              online_stabilized: bool = True) -> float:
    """Residual-based space-time bound.

    Squared bound: ``dt / alpha_LB`` times the summed squared dual residual
    norms plus the mass energy of the initial projection error.
    """
    th = space.problem.thetas(mu)
    total = _step_dual_norms_sq(space, th, traj, online_stabilized)
    alpha = coercivity_lower_bound(space.problem, mu)
    init = float(th.m @ space.initial_mass_energies()) if space.qm_all else 0.0
    return math.sqrt(max(traj.dt / alpha * total + init, 0.0))


def pod_greedy(problem: TruthProblem,
               config: PodGreedyConfig) -> tuple[ReducedSpace, GreedyTrace]:
    """Greedy in parameter with POD compression of projected trajectories."""
    xi = [np.asarray(mu, dtype=float) for mu in np.atleast_2d(config.xi_train)]
    weights = np.array([1.0 if config.weight is None else float(config.weight(mu))
                        for mu in xi])
    if np.any(weights <= 0.0):
        raise ValueError("weight function must be positive on the training set")
    grid = config.grid
    stab = config.stabilize_offline

    space = ReducedSpace(problem, with_mass=True)
    u0_free = project_initial_free(problem, config.u0,
                                   float(grid.control(0.0)))
    space.set_initial_state(u0_free)
    if problem.x_norm(u0_free) > 0.0:
        gram_schmidt_append(space, u0_free)

    trace = GreedyTrace()
    active = list(range(len(xi)))

    def sweep():
        est = np.full(len(xi), -np.inf)
        for i in active:
            traj = transient_rb_solve(space, xi[i], grid, online_stabilized=stab)
            est[i] = weights[i] * parabolic_error_estimator(
                space, xi[i], traj, online_stabilized=stab)
        return est

    t0 = time.perf_counter()
    est = sweep()
    pick = int(np.argmax(est))

    while True:
        appended = False
        while active:
            mu_new = xi[pick]
            truth = truth_solve_transient(problem, mu_new, grid, config.u0,
                                          stabilized=stab)
            U = truth.states[1:, problem.free].T        # (n_free, J)
            if space.n:
                U = U - space.basis @ (space.basis.T @ (problem.x_ff @ U))
            budget = min(config.n_add, config.n_max - space.n)
            modes = pod(U, problem.x_ff, budget, config.energy_tol)
            added = 0
            for k in range(modes.shape[1]):
                if gram_schmidt_append(space, modes[:, k]):
                    added += 1
            if added:
                space.selected_parameters.append(mu_new)
                appended = True
                break
            active.remove(pick)       # trajectory already captured
            if not active:
                break
            pick = max(active, key=lambda i: est[i])
        if not appended:
            trace.stop_reason = "training set exhausted"
            break

        est = sweep()
        pick = int(np.argmax(est))
        elapsed = time.perf_counter() - t0
        t0 = time.perf_counter()
        trace.records.append(GreedyRecord(
            n=space.n, mu=tuple(mu_new), max_estimator=float(est[pick]),
            max_true_error=None, max_true_error_plain=None, seconds=elapsed))
        if est[pick] <= config.tol:
            trace.stop_reason = "tolerance reached"
            break
        if space.n >= config.n_max:
            trace.stop_reason = "basis size limit reached"
            break
    return space, trace
