"""Reduced-basis core: offline greedy construction and certified online solves.

A :class:`ReducedSpace` keeps an X-orthonormal basis together with the
projected affine blocks of both the plain and the stabilized forms, plus the
Gram matrix of Riesz representors of all affine residual pieces. The online
solve and the error estimator therefore cost nothing that scales with the
truth dimension.

Residual pieces are laid out column-blockwise: first the Riesz representors
of the right-side terms, then, per basis vector, one representor for every
operator term (and mass term, for transient spaces). Appending a basis
vector appends one contiguous block, so the Gram matrix grows in place.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .problems import TruthProblem, truth_solve

__all__ = [
    "ReducedSpace",
    "GreedyRecord",
    "GreedyTrace",
    "gram_schmidt_append",
    "project_operators",
    "rb_solve",
    "coercivity_lower_bound",
    "error_estimator",
    "residual_dual_norm",
    "greedy",
]

GS_REJECT_RATIO = 1e-10


class ReducedSpace:
    """X-orthonormal basis with projected affine blocks and residual data."""

    def __init__(self, problem: TruthProblem, with_mass: bool = False):
        self.problem = problem
        self.with_mass = with_mass
        dec = problem.decomposition
        self.qa_plain = dec.q_a
        self.qa_all = dec.q_a + dec.q_s
        self.qf_plain = len(dec.f_terms)
        self.qf_all = len(dec.f_terms) + len(dec.r_terms)
        self.qm_plain = len(dec.m_terms) if with_mass else 0
        self.qm_all = len(dec.m_terms) + len(dec.ms_terms) if with_mass else 0
        if with_mass and self.qm_plain == 0:
            raise ValueError("problem carries no mass terms")

        n = problem.n_free
        self.basis = np.empty((n, 0))
        self.reduced_a = np.empty((self.qa_all, 0, 0))
        self.reduced_f = np.empty((self.qf_all, 0))
        self.reduced_m = np.empty((self.qm_all, 0, 0))
        self.selected_parameters: list[np.ndarray] = []
        self.initial_state: np.ndarray | None = None

        # Riesz representors of the right-side pieces and their Gram block
        rf = np.column_stack([problem.x_solve(f) for f in problem.f_free]) \
            if self.qf_all else np.empty((n, 0))
        self._riesz = rf                      # grows by one block per vector
        self._raw = np.column_stack(problem.f_free) if self.qf_all \
            else np.empty((n, 0))             # un-inverted pieces, same layout
        self.residual_gram = self._raw.T @ rf if self.qf_all \
            else np.empty((0, 0))
        self._variant_idx: dict[tuple[bool, int], np.ndarray] = {}

    # ------------------------------------------------------------------ info
    @property
    def n(self) -> int:
        return self.basis.shape[1]

    @property
    def block_size(self) -> int:
        return self.qa_all + self.qm_all

    def can_extend(self) -> bool:
        return self._riesz is not None

    # ------------------------------------------------------------- extension
    def append_orthonormal(self, xi: np.ndarray) -> None:
        """Append an already X-normalized vector and update all blocks."""
        if not self.can_extend():
            raise RuntimeError("space was loaded without offline data; "
                               "rebuild it to extend the basis")
        problem = self.problem
        n_old = self.n
        dec = problem.decomposition

        a_mats = problem.a_ff
        m_mats = problem.m_ff if self.with_mass else []
        ys = [A @ xi for A in a_mats] + [M @ xi for M in m_mats]
        yt = [A.T @ xi for A in a_mats] + [M.T @ xi for M in m_mats]

        basis = np.column_stack([self.basis, xi])
        q_tot = self.qa_all + self.qm_all
        new_a = np.empty((self.qa_all, n_old + 1, n_old + 1))
        new_m = np.empty((self.qm_all, n_old + 1, n_old + 1))
        for q in range(self.qa_all):
            new_a[q, :n_old, :n_old] = self.reduced_a[q]
            new_a[q, :, n_old] = basis.T @ ys[q]
            new_a[q, n_old, :] = basis.T @ yt[q]
        for q in range(self.qm_all):
            new_m[q, :n_old, :n_old] = self.reduced_m[q]
            new_m[q, :, n_old] = basis.T @ ys[self.qa_all + q]
            new_m[q, n_old, :] = basis.T @ yt[self.qa_all + q]
        new_f = np.empty((self.qf_all, n_old + 1))
        if self.qf_all:
            new_f[:, :n_old] = self.reduced_f
            new_f[:, n_old] = [f @ xi for f in problem.f_free]

        raw_block = np.column_stack(ys) if ys else np.empty((xi.size, 0))
        riesz_block = np.column_stack([problem.x_solve(y) for y in ys]) \
            if ys else raw_block
        p_old = self._riesz.shape[1]
        gram = np.empty((p_old + q_tot, p_old + q_tot))
        gram[:p_old, :p_old] = self.residual_gram
        # r_new' X r_old = y_new' r_old because X r_new = y_new
        cross = raw_block.T @ self._riesz
        gram[p_old:, :p_old] = cross
        gram[:p_old, p_old:] = cross.T
        gram[p_old:, p_old:] = raw_block.T @ riesz_block

        self.basis = basis
        self.reduced_a = new_a
        self.reduced_m = new_m
        self.reduced_f = new_f
        self._raw = np.column_stack([self._raw, raw_block])
        self._riesz = np.column_stack([self._riesz, riesz_block])
        self.residual_gram = gram
        self._variant_idx.clear()

    # ------------------------------------------------------- online assembly
    def variant_slices(self, stabilized: bool):
        """Column indices of the residual pieces for one form variant."""
        key = (stabilized, self.n)
        if key not in self._variant_idx:
            qf = self.qf_all if stabilized else self.qf_plain
            qa = self.qa_all if stabilized else self.qa_plain
            qm = self.qm_all if stabilized else self.qm_plain
            block = self.block_size
            idx = [np.arange(qf)]
            for k in range(self.n):
                base = self.qf_all + k * block
                idx.append(base + np.arange(qa))
                idx.append(base + self.qa_all + np.arange(qm))
            self._variant_idx[key] = np.concatenate(idx).astype(np.intp)
        return self._variant_idx[key]

    def operator_blocks(self, stabilized: bool) -> np.ndarray:
        return self.reduced_a if stabilized else self.reduced_a[:self.qa_plain]

    def rhs_blocks(self, stabilized: bool) -> np.ndarray:
        return self.reduced_f if stabilized else self.reduced_f[:self.qf_plain]

    def mass_blocks(self, stabilized: bool) -> np.ndarray:
        if not self.with_mass:
            raise ValueError("space was built without mass blocks")
        return self.reduced_m if stabilized else self.reduced_m[:self.qm_plain]

    def residual_weights(self, theta, coeffs, stabilized: bool,
                         dcoeffs=None) -> np.ndarray:
        """Stacked residual piece weights matching :meth:`variant_slices`."""
        qf = self.qf_all if stabilized else self.qf_plain
        qa = self.qa_all if stabilized else self.qa_plain
        th_f = theta.rhs(True)[:qf]
        th_a = theta.operator(True)[:qa]
        parts = [th_f]
        for k in range(self.n):
            parts.append(-coeffs[k] * th_a)
            if self.qm_all and dcoeffs is not None:
                qm = self.qm_all if stabilized else self.qm_plain
                parts.append(-dcoeffs[k] * theta.mass(True)[:qm])
            elif self.qm_all:
                qm = self.qm_all if stabilized else self.qm_plain
                parts.append(np.zeros(qm))
        return np.concatenate(parts)

    def expand(self, coeffs: np.ndarray) -> np.ndarray:
        """Full-field reconstruction (lifting added back)."""
        return self.problem.lifting.expand(self.basis @ coeffs)

    # -------------------------------------------------------- parabolic state
    def set_initial_state(self, u0_free: np.ndarray) -> None:
        self.initial_state = np.asarray(u0_free, dtype=float)

    def initial_coords(self) -> np.ndarray:
        """X-projection coordinates of the stored initial state."""
        if self.initial_state is None:
            raise ValueError("no initial state attached to this space")
        return self.basis.T @ (self.problem.x_ff @ self.initial_state)

    def initial_mass_energies(self) -> np.ndarray:
        """Per-term plain-mass energies of the initial projection error."""
        c0 = self.initial_coords()
        delta = self.initial_state - self.basis @ c0
        dec = self.problem.decomposition
        out = np.empty(len(dec.m_terms))
        for q in range(len(dec.m_terms)):
            out[q] = delta @ (self.problem.m_ff[q] @ delta)
        return out


def gram_schmidt_append(space: ReducedSpace, v_free: np.ndarray) -> bool:
    """Orthogonalize against the basis in X (one reorthogonalization pass),
    normalize and append. Returns False when the remainder is numerically in
    the span (candidate rejected, space unchanged)."""
    problem = space.problem
    v = np.asarray(v_free, dtype=float)
    norm0 = problem.x_norm(v)
    if norm0 == 0.0:
        return False
    w = v.copy()
    for _ in range(2):
        if space.n:
            w = w - space.basis @ (space.basis.T @ (problem.x_ff @ w))
    norm1 = problem.x_norm(w)
    if norm1 <= GS_REJECT_RATIO * norm0:
        return False
    space.append_orthonormal(w / norm1)
    return True


def project_operators(problem: TruthProblem, basis: np.ndarray,
                      with_mass: bool = False) -> ReducedSpace:
    """Project all affine blocks onto an already X-orthonormal basis."""
    space = ReducedSpace(problem, with_mass=with_mass)
    for k in range(basis.shape[1]):
        space.append_orthonormal(basis[:, k])
    return space


def rb_solve(space: ReducedSpace, mu, online_stabilized: bool = True) -> np.ndarray:
    """Dense solve of the N x N reduced system assembled from affine blocks."""
    if space.n == 0:
        return np.zeros(0)
    th = space.problem.thetas(mu)
    th_a = th.operator(online_stabilized)
    th_f = th.rhs(online_stabilized)
    A = np.tensordot(th_a, space.operator_blocks(online_stabilized), axes=1)
    b = th_f @ space.rhs_blocks(online_stabilized)
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError as err:
        raise RuntimeError(
            f"singular reduced system at mu={np.asarray(mu).tolist()} "
            f"(cond={np.linalg.cond(A):.3e})") from err


def coercivity_lower_bound(problem: TruthProblem, mu) -> float:
    """Min-theta lower bound on the coercivity constant.

    One offline generalized eigenvalue solve fixes the smallest Rayleigh
    quotient of the parametrized diffusion part against the X product at the
    box midpoint; min-theta scaling transports it across the box. Validity
    rests on the advective and streamline parts being nonnegative on the
    diagonal, which holds for both benchmarks.
    """
    if problem._alpha_ref is None:
        problem._alpha_ref = _alpha_reference(problem)
    theta_ref, alpha_ref = problem._alpha_ref
    idx = list(problem.decomposition.diffusion_indices)
    th = problem.thetas(mu).a[idx]
    alpha = float(np.min(th / theta_ref)) * alpha_ref
    if alpha <= 0.0:
        raise RuntimeError(f"nonpositive coercivity bound at mu={mu}")
    return alpha


def _alpha_reference(problem: TruthProblem):
    import scipy.linalg
    import scipy.sparse.linalg as spla

    mu_bar = problem.mu_bar()
    idx = list(problem.decomposition.diffusion_indices)
    theta_ref = problem.thetas(mu_bar).a[idx]
    D = problem.energy_matrix(mu_bar)
    if problem.n_free <= 600:
        vals = scipy.linalg.eigh(D.toarray(), problem.x_ff.toarray(),
                                 eigvals_only=True, subset_by_index=[0, 0])
        alpha = float(vals[0])
    else:
        vals = spla.eigsh(D.tocsc(), k=1, M=problem.x_ff, sigma=0.0,
                          which="LM", return_eigenvectors=False)
        alpha = float(vals[0])
    return theta_ref, alpha


def residual_dual_norm(space: ReducedSpace, mu, coeffs,
                       online_stabilized: bool = True,
                       dcoeffs=None) -> float:
    """X-dual norm of the online residual via the precomputed Gram data."""
    th = space.problem.thetas(mu)
    w = space.residual_weights(th, coeffs, online_stabilized, dcoeffs=dcoeffs)
    idx = space.variant_slices(online_stabilized)
    G = space.residual_gram[np.ix_(idx, idx)]
    val = float(w @ (G @ w))
    if val < 0.0:
        scale = float(np.abs(w) @ (np.abs(G) @ np.abs(w)))
        if val < -1e-12 * max(scale, 1.0):
            raise RuntimeError(
                f"residual norm squared is negative beyond roundoff: {val:.3e}")
        val = 0.0
    return math.sqrt(val)


def error_estimator(space: ReducedSpace, mu, coeffs,
                    online_stabilized: bool = True) -> float:
    """Certified bound ||r||_X' / sqrt(alpha_LB) on the energy-norm error."""
    dual = residual_dual_norm(space, mu, coeffs, online_stabilized)
    return dual / math.sqrt(coercivity_lower_bound(space.problem, mu))


@dataclass(frozen=True)
class GreedyRecord:
    """One greedy iteration: basis size after the append, the appended
    parameter, and the post-append sweep maxima over the training set."""

    n: int
    mu: tuple
    max_estimator: float
    max_true_error: float | None
    max_true_error_plain: float | None
    seconds: float


@dataclass
class GreedyTrace:
    records: list[GreedyRecord] = field(default_factory=list)
    stop_reason: str = ""

    @property
    def final_max_estimator(self) -> float:
        return self.records[-1].max_estimator if self.records else math.inf


def greedy(problem: TruthProblem, xi_train: np.ndarray, tol: float,
           n_max: int, weight=None, stabilize_offline: bool = True,
           trace_true_errors: bool = False,
           with_mass: bool = False) -> tuple[ReducedSpace, GreedyTrace]:
    """Greedy snapshot selection maximizing the weighted error estimator.

    Snapshots and training estimators use the stabilized forms when
    ``stabilize_offline`` is set, the plain forms otherwise. With
    ``trace_true_errors`` the training truth solutions are computed once and
    each record carries the max energy error for both online variants.
    """
    xi = [np.asarray(mu, dtype=float) for mu in np.atleast_2d(xi_train)]
    if not xi:
        raise ValueError("empty training set")
    weights = np.array([1.0 if weight is None else float(weight(mu))
                        for mu in xi])
    if np.any(weights <= 0.0):
        raise ValueError("weight function must be positive on the training set")

    space = ReducedSpace(problem, with_mass=with_mass)
    trace = GreedyTrace()
    active = list(range(len(xi)))

    truths = {}
    if trace_true_errors:
        for i in active:
            u = truth_solve(problem, xi[i], stabilized=stabilize_offline)
            truths[i] = u[problem.free]

    def sweep():
        est = np.full(len(xi), -np.inf)
        err_s = err_p = None
        if trace_true_errors:
            err_s = np.zeros(len(xi))
            err_p = np.zeros(len(xi))
        for i in active:
            c = rb_solve(space, xi[i], online_stabilized=stabilize_offline)
            est[i] = weights[i] * error_estimator(
                space, xi[i], c, online_stabilized=stabilize_offline)
            if trace_true_errors:
                e = truths[i] - space.basis @ c
                err_s[i] = problem.energy_norm(xi[i], e)
                cp = rb_solve(space, xi[i], online_stabilized=False)
                ep = truths[i] - space.basis @ cp
                err_p[i] = problem.energy_norm(xi[i], ep)
        return est, err_s, err_p

    t0 = time.perf_counter()
    est, _, _ = sweep()
    pick = int(np.argmax(est))

    while True:
        appended = False
        while active:
            mu_new = xi[pick]
            u = truths.get(pick)
            if u is None:
                u = truth_solve(problem, mu_new, stabilized=stabilize_offline)
                u = u[problem.free]
            if gram_schmidt_append(space, u):
                space.selected_parameters.append(mu_new)
                appended = True
                break
            active.remove(pick)          # linearly dependent snapshot
            remaining = [i for i in active]
            if not remaining:
                break
            pick = max(remaining, key=lambda i: est[i])
        if not appended:
            trace.stop_reason = "training set exhausted"
            break

        est, err_s, err_p = sweep()
        pick = int(np.argmax(est))
        elapsed = time.perf_counter() - t0
        t0 = time.perf_counter()
        trace.records.append(GreedyRecord(
            n=space.n, mu=tuple(mu_new), max_estimator=float(est[pick]),
            max_true_error=None if err_s is None else float(np.max(err_s)),
            max_true_error_plain=None if err_p is None else float(np.max(err_p)),
            seconds=elapsed))
        if est[pick] <= tol:
            trace.stop_reason = "tolerance reached"
            break
        if space.n >= n_max:
            trace.stop_reason = "basis size limit reached"
            break
    return space, trace
