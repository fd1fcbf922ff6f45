"""Parameter distributions, weighted estimators and Monte Carlo error means.

Component laws are transformed Beta (affine or log10-affine) or uniform.
Two density views coexist on purpose:

* :meth:`ParamDistribution.pdf` is the density in parameter space, change of
  variables included, so it integrates to one over the support. It feeds the
  importance-sampled mean-error estimator.
* :meth:`ParamDistribution.base_density` is the product of the underlying
  unit-interval Beta densities evaluated through the inverse transforms.
  Level sets of this quantity define the greedy weighting and the selective
  stabilization thresholds; on log-transformed components it measures
  probability per decade rather than per unit, which is what concentrates
  the weighted greedy at high Peclet numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .problems import TruthProblem, truth_solve
from .rb import ReducedSpace, error_estimator, rb_solve

__all__ = [
    "Uniform",
    "AffineBeta",
    "LogBeta",
    "Fixed",
    "ParamDistribution",
    "make_weight",
    "weighted_estimator",
    "mc_mean_error",
]


class _Law:
    """One scalar component law; maps a unit-interval base variable to mu."""

    def support(self) -> tuple[float, float]:
        raise NotImplementedError

    def from_base(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def to_base(self, mu: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def base_pdf(self, x: np.ndarray) -> np.ndarray:
        """Density of the base variable on [0, 1]."""
        raise NotImplementedError

    def sample_base(self, rng, n: int) -> np.ndarray:
        raise NotImplementedError

    def pdf(self, mu: np.ndarray) -> np.ndarray:
        """Density in mu units (Jacobian included)."""
        x = self.to_base(np.asarray(mu, dtype=float))
        return self.base_pdf(x) / self._jacobian(np.asarray(mu, dtype=float))

    def _jacobian(self, mu: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def cdf(self, mu: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _beta_pdf(x, a, b):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    inside = (x >= 0.0) & (x <= 1.0)
    xi = np.clip(x, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = xi ** (a - 1) * (1 - xi) ** (b - 1) / special.beta(a, b)
    out[inside] = np.nan_to_num(vals[inside], nan=0.0, posinf=np.inf)
    return out


@dataclass(frozen=True)
class Uniform(_Law):
    lo: float
    hi: float

    def support(self):
        return (self.lo, self.hi)

    def from_base(self, x):
        return self.lo + (self.hi - self.lo) * np.asarray(x, dtype=float)

    def to_base(self, mu):
        return (np.asarray(mu, dtype=float) - self.lo) / (self.hi - self.lo)

    def base_pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where((x >= 0) & (x <= 1), 1.0, 0.0)

    def sample_base(self, rng, n):
        return rng.random(n)

    def _jacobian(self, mu):
        return np.full(np.shape(mu), self.hi - self.lo)

    def cdf(self, mu):
        return np.clip(self.to_base(mu), 0.0, 1.0)


@dataclass(frozen=True)
class AffineBeta(_Law):
    """mu = lo + (hi - lo) X with X ~ Beta(alpha, beta)."""

    lo: float
    hi: float
    alpha: float
    beta: float

    def support(self):
        return (self.lo, self.hi)

    def from_base(self, x):
        return self.lo + (self.hi - self.lo) * np.asarray(x, dtype=float)

    def to_base(self, mu):
        return (np.asarray(mu, dtype=float) - self.lo) / (self.hi - self.lo)

    def base_pdf(self, x):
        return _beta_pdf(x, self.alpha, self.beta)

    def sample_base(self, rng, n):
        # inversion of the regularized incomplete beta function: exact and
        # reproducible from the uniform stream
        return special.betaincinv(self.alpha, self.beta, rng.random(n))

    def _jacobian(self, mu):
        return np.full(np.shape(mu), self.hi - self.lo)

    def cdf(self, mu):
        return special.betainc(self.alpha, self.beta,
                               np.clip(self.to_base(mu), 0.0, 1.0))


@dataclass(frozen=True)
class LogBeta(_Law):
    """mu = 10**(a + b X) with X ~ Beta(alpha, beta)."""

    a: float
    b: float
    alpha: float
    beta: float

    def support(self):
        return (10.0 ** self.a, 10.0 ** (self.a + self.b))

    def from_base(self, x):
        return 10.0 ** (self.a + self.b * np.asarray(x, dtype=float))

    def to_base(self, mu):
        return (np.log10(np.asarray(mu, dtype=float)) - self.a) / self.b

    def base_pdf(self, x):
        return _beta_pdf(x, self.alpha, self.beta)

    def sample_base(self, rng, n):
        return special.betaincinv(self.alpha, self.beta, rng.random(n))

    def _jacobian(self, mu):
        return self.b * math.log(10.0) * np.asarray(mu, dtype=float)

    def cdf(self, mu):
        return special.betainc(self.alpha, self.beta,
                               np.clip(self.to_base(mu), 0.0, 1.0))


@dataclass(frozen=True)
class Fixed(_Law):
    """Degenerate component pinned to one value; contributes no density."""

    value: float

    def support(self):
        return (self.value, self.value)

    def from_base(self, x):
        return np.full(np.shape(x), self.value)

    def to_base(self, mu):
        return np.zeros(np.shape(mu))

    def base_pdf(self, x):
        return np.ones(np.shape(x))

    def sample_base(self, rng, n):
        return np.zeros(n)

    def _jacobian(self, mu):
        return np.ones(np.shape(mu))

    def cdf(self, mu):
        return np.where(np.asarray(mu, dtype=float) >= self.value, 1.0, 0.0)


class ParamDistribution:
    """Independent component laws over the parameter box."""

    def __init__(self, laws):
        self.laws = list(laws)
        if not self.laws:
            raise ValueError("need at least one component law")

    @property
    def dim(self) -> int:
        return len(self.laws)

    def support(self) -> np.ndarray:
        return np.array([law.support() for law in self.laws])

    def box_volume(self) -> float:
        """Volume of the support box, skipping degenerate components."""
        vol = 1.0
        for lo, hi in self.support():
            if hi > lo:
                vol *= hi - lo
        return vol

    def _columns(self, mus):
        mus = np.atleast_2d(np.asarray(mus, dtype=float))
        if mus.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} components, got {mus.shape[1]}")
        return mus

    def pdf(self, mus) -> np.ndarray:
        """Density in parameter space; zero outside the support."""
        mus = self._columns(mus)
        out = np.ones(mus.shape[0])
        for k, law in enumerate(self.laws):
            lo, hi = law.support()
            col = mus[:, k]
            inside = (col >= lo) & (col <= hi)
            vals = np.where(inside, law.pdf(np.clip(col, lo, hi)), 0.0)
            out *= vals
        return out

    def base_density(self, mus) -> np.ndarray:
        """Product of unit-interval base densities through the transforms."""
        mus = self._columns(mus)
        out = np.ones(mus.shape[0])
        for k, law in enumerate(self.laws):
            out *= law.base_pdf(law.to_base(mus[:, k]))
        return out

    def sample(self, n: int, seed=None) -> np.ndarray:
        """n i.i.d. draws from the distribution; deterministic under seed."""
        if n < 1:
            raise ValueError("need n >= 1 samples")
        rng = np.random.default_rng(seed)
        cols = [law.from_base(law.sample_base(rng, n)) for law in self.laws]
        return np.column_stack(cols)

    def sample_uniform(self, n: int, seed=None, mode: str = "box") -> np.ndarray:
        """Uniform reference samples: ``box`` is uniform in mu over the
        support, ``base`` pushes uniform unit-interval draws through each
        component transform (uniform per decade on log components)."""
        if mode not in ("box", "base"):
            raise ValueError("mode must be 'box' or 'base'")
        rng = np.random.default_rng(seed)
        cols = []
        for law in self.laws:
            x = rng.random(n)
            if mode == "base":
                cols.append(law.from_base(x))
            else:
                lo, hi = law.support()
                cols.append(lo + (hi - lo) * x)
        return np.column_stack(cols)


def make_weight(dist: ParamDistribution):
    """Greedy weight w(mu) = sqrt of the base density."""

    def weight(mu):
        return float(np.sqrt(max(dist.base_density(np.asarray(mu)[None, :])[0],
                                 0.0)))

    return weight


def weighted_estimator(space: ReducedSpace, mu, dist: ParamDistribution,
                       online_stabilized: bool = True) -> float:
    """Probability-weighted bound Delta_N(mu) * sqrt(rho(mu))."""
    coeffs = rb_solve(space, mu, online_stabilized)
    delta = error_estimator(space, mu, coeffs, online_stabilized)
    rho = float(dist.base_density(np.asarray(mu, dtype=float)[None, :])[0])
    return delta * math.sqrt(max(rho, 0.0))


def pointwise_errors(space: ReducedSpace, mus, stabilized_flags,
                     truth_cache: dict | None = None) -> np.ndarray:
    """Energy errors of online solves against stabilized truth solutions."""
    problem = space.problem
    mus = np.atleast_2d(np.asarray(mus, dtype=float))
    flags = np.broadcast_to(stabilized_flags, (mus.shape[0],))
    errors = np.empty(mus.shape[0])
    for i, mu in enumerate(mus):
        key = tuple(mu)
        if truth_cache is not None and key in truth_cache:
            u = truth_cache[key]
        else:
            u = truth_solve(problem, mu, stabilized=True)[problem.free]
            if truth_cache is not None:
                truth_cache[key] = u
        c = rb_solve(space, mu, online_stabilized=bool(flags[i]))
        errors[i] = problem.energy_norm(mu, u - space.basis @ c)
    return errors


def mc_mean_error(space: ReducedSpace, dist: ParamDistribution, m: int,
                  mode: str = "beta-sampled", online_stabilized=True,
                  seed=None, truth_cache: dict | None = None) -> float:
    """Monte Carlo estimate of the probabilistic mean energy error.

    ``beta-sampled`` averages errors over draws from the distribution;
    ``uniform-importance`` draws uniformly over the box and weights each
    error by ``|D| * rho(mu)`` so both modes estimate the same expectation.
    ``online_stabilized`` may be a flag or a per-point callable ``mu -> bool``
    (a stabilization policy decision).
    """
    if m < 1:
        raise ValueError("need m >= 1 test points")
    if mode == "beta-sampled":
        mus = dist.sample(m, seed=seed)
        weights = np.ones(m)
    elif mode == "uniform-importance":
        mus = dist.sample_uniform(m, seed=seed, mode="box")
        weights = dist.box_volume() * dist.pdf(mus)
    else:
        raise ValueError(f"unknown mc_mean_error mode {mode!r}")
    if callable(online_stabilized):
        flags = np.array([bool(online_stabilized(mu)) for mu in mus])
    else:
        flags = np.full(m, bool(online_stabilized))
    errors = pointwise_errors(space, mus, flags, truth_cache=truth_cache)
    return float(np.mean(errors * weights))
