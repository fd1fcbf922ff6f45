"""Declarative run configuration: YAML schema, validation, hashing."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .distributions import AffineBeta, Fixed, LogBeta, ParamDistribution, Uniform
from .problems import TimeGrid, TruthProblem, build_front_square, build_graetz

__all__ = ["RunConfig", "load_config", "config_hash"]

_CONTROLS = {"one": lambda t: 1.0, "cos": math.cos}
_INITIALS = {"zero": 0.0, "one": 1.0}


class ConfigError(ValueError):
    """Invalid run configuration; message carries the field path."""


def _need(mapping, key, path, kind=None):
    if key not in mapping:
        raise ConfigError(f"{path}.{key}: missing")
    val = mapping[key]
    if kind is not None and not isinstance(val, kind):
        raise ConfigError(f"{path}.{key}: expected {kind}, got {type(val).__name__}")
    return val


@dataclass(frozen=True)
class GreedySettings:
    tol: float = 0.0
    n_max: int = 20
    train_size: int = 200
    train_sampling: str = "distribution"   # distribution | uniform-box | uniform-base
    weighted: bool = True
    seed: int = 0
    trace_true_errors: bool = False


@dataclass(frozen=True)
class StabilizationSettings:
    offline: bool = True
    online_policy: str = "always"          # always | never | parameter_threshold | density_threshold
    component: int = 0
    threshold: float = 0.0
    nu: float = 0.0
    n_mc: int = 200_000
    policy_seed: int = 0


@dataclass(frozen=True)
class ParabolicSettings:
    dt: float
    n_steps: int
    control: str = "one"
    u0: str = "one"
    n_add: int = 2
    energy_tol: float = 1.0 - 1e-7

    def grid(self) -> TimeGrid:
        return TimeGrid(dt=self.dt, n_steps=self.n_steps,
                        control=_CONTROLS[self.control])


@dataclass(frozen=True)
class EvaluationSettings:
    test_size: int = 100
    sampling: str = "distribution"
    seed: int = 1
    modes: tuple = ("beta-sampled", "uniform-importance")


@dataclass(frozen=True)
class SweepSettings:
    component: int = 0
    thresholds: tuple = ()
    nus: tuple = (0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1)
    test_size: int = 200
    seed: int = 3
    n_mc: int = 200_000


@dataclass(frozen=True)
class RunConfig:
    problem: str
    nx: int
    ny: int
    delta: float
    domain: tuple
    distribution_spec: tuple
    greedy: GreedySettings
    stabilization: StabilizationSettings
    parabolic: ParabolicSettings | None
    evaluation: EvaluationSettings
    sweep: SweepSettings
    output: str
    probes: tuple = ()
    hash: str = ""

    def build_problem(self) -> TruthProblem:
        if self.problem == "graetz":
            return build_graetz(self.nx, self.ny, domain=self.domain)
        if self.problem == "front_square":
            return build_front_square(self.nx, self.ny, delta=self.delta,
                                      domain=self.domain)
        raise ConfigError(f"problem: unknown benchmark {self.problem!r}")

    def build_distribution(self) -> ParamDistribution:
        laws = []
        for spec in self.distribution_spec:
            kind = spec["law"]
            if kind == "uniform":
                laws.append(Uniform(spec["lo"], spec["hi"]))
            elif kind == "affine-beta":
                laws.append(AffineBeta(spec["lo"], spec["hi"],
                                       spec["alpha"], spec["beta"]))
            elif kind == "log-beta":
                laws.append(LogBeta(spec["a"], spec["b"],
                                    spec["alpha"], spec["beta"]))
            elif kind == "fixed":
                laws.append(Fixed(spec["value"]))
            else:
                raise ConfigError(f"distribution: unknown law {kind!r}")
        return ParamDistribution(laws)

    def initial_field(self, problem: TruthProblem):
        if self.parabolic is None:
            raise ConfigError("parabolic: block required for transient runs")
        import numpy as np

        value = _INITIALS[self.parabolic.u0]
        return np.full(problem.mesh.n_nodes, value)


def config_hash(raw: dict) -> str:
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def load_config(path, seed_override: int | None = None,
                out_override: str | None = None) -> RunConfig:
    """Parse and validate a YAML run config; raises with field paths."""
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    if seed_override is not None:
        raw.setdefault("greedy", {})["seed"] = int(seed_override)
    if out_override is not None:
        raw["output"] = str(out_override)

    problem = _need(raw, "problem", "config", str)
    if problem not in ("graetz", "front_square"):
        raise ConfigError(f"problem: unknown benchmark {problem!r}")
    mesh = _need(raw, "mesh", "config", dict)
    nx = int(_need(mesh, "nx", "mesh", int))
    ny = int(_need(mesh, "ny", "mesh", int))
    if nx < 1 or ny < 1:
        raise ConfigError("mesh.nx/ny: must be at least 1")
    delta = float(raw.get("delta", 1.0))

    dom = _need(raw, "domain", "config", (list, dict))
    if isinstance(dom, dict):
        dom = [dom[k] for k in sorted(dom)]
    domain = tuple((float(lo), float(hi)) for lo, hi in dom)
    for k, (lo, hi) in enumerate(domain):
        if not lo <= hi:
            raise ConfigError(f"domain[{k}]: empty interval")

    dist_raw = raw.get("distribution", [])
    if isinstance(dist_raw, dict):
        dist_raw = [dist_raw[k] for k in sorted(dist_raw)]
    distribution = tuple(dict(spec) for spec in dist_raw)

    gr = raw.get("greedy", {})
    greedy = GreedySettings(
        tol=float(gr.get("tol", 0.0)),
        n_max=int(gr.get("n_max", 20)),
        train_size=int(gr.get("train_size", 200)),
        train_sampling=str(gr.get("train_sampling", "distribution")),
        weighted=bool(gr.get("weighted", True)),
        seed=int(gr.get("seed", 0)),
        trace_true_errors=bool(gr.get("trace_true_errors", False)),
    )
    if greedy.train_sampling not in ("distribution", "uniform-box", "uniform-base"):
        raise ConfigError(f"greedy.train_sampling: unknown mode "
                          f"{greedy.train_sampling!r}")
    if greedy.train_size < 1:
        raise ConfigError("greedy.train_size: must be >= 1")
    if greedy.train_sampling != "uniform-box" and not distribution:
        if greedy.weighted or greedy.train_sampling == "distribution":
            raise ConfigError("distribution: required for weighted or "
                              "distribution-sampled runs")

    st = raw.get("stabilization", {})
    online = st.get("online", {"policy": "always"})
    if isinstance(online, str):
        online = {"policy": online}
    stabilization = StabilizationSettings(
        offline=bool(st.get("offline", True)),
        online_policy=str(online.get("policy", "always")),
        component=int(online.get("component", 0)),
        threshold=float(online.get("threshold", 0.0)),
        nu=float(online.get("nu", 0.0)),
        n_mc=int(online.get("n_mc", 200_000)),
        policy_seed=int(online.get("seed", 0)),
    )
    if stabilization.online_policy not in ("always", "never",
                                           "parameter_threshold",
                                           "density_threshold"):
        raise ConfigError(f"stabilization.online.policy: unknown policy "
                          f"{stabilization.online_policy!r}")

    parabolic = None
    if "parabolic" in raw:
        pb = raw["parabolic"]
        parabolic = ParabolicSettings(
            dt=float(_need(pb, "dt", "parabolic")),
            n_steps=int(_need(pb, "n_steps", "parabolic")),
            control=str(pb.get("control", "one")),
            u0=str(pb.get("u0", "one")),
            n_add=int(pb.get("n_add", 2)),
            energy_tol=float(pb.get("energy_tol", 1.0 - 1e-7)),
        )
        if parabolic.control not in _CONTROLS:
            raise ConfigError(f"parabolic.control: unknown control "
                              f"{parabolic.control!r}")
        if parabolic.u0 not in _INITIALS:
            raise ConfigError(f"parabolic.u0: unknown initial {parabolic.u0!r}")

    ev = raw.get("evaluation", {})
    evaluation = EvaluationSettings(
        test_size=int(ev.get("test_size", 100)),
        sampling=str(ev.get("sampling", "distribution")),
        seed=int(ev.get("seed", 1)),
        modes=tuple(ev.get("modes", ("beta-sampled", "uniform-importance"))),
    )
    if evaluation.test_size < 0:
        raise ConfigError("evaluation.test_size: must be >= 0")

    sw = raw.get("sweep", {})
    sweep = SweepSettings(
        component=int(sw.get("component", 0)),
        thresholds=tuple(float(x) for x in sw.get("thresholds", ())),
        nus=tuple(float(x) for x in sw.get("nus",
                                           (0.001, 0.002, 0.005, 0.01,
                                            0.02, 0.05, 0.1))),
        test_size=int(sw.get("test_size", 200)),
        seed=int(sw.get("seed", 3)),
        n_mc=int(sw.get("n_mc", 200_000)),
    )

    probes = tuple(tuple(float(v) for v in pt) for pt in raw.get("probes", ()))
    output = str(raw.get("output", "runs/out"))
    return RunConfig(
        problem=problem, nx=nx, ny=ny, delta=delta, domain=domain,
        distribution_spec=distribution, greedy=greedy,
        stabilization=stabilization, parabolic=parabolic,
        evaluation=evaluation, sweep=sweep, output=output, probes=probes,
        hash=config_hash(raw))
