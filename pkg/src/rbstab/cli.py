"""Command line driver: offline/online/evaluate and the selective sweeps.

Each verb reads one YAML run config, writes delimited tables plus a summary
JSON into the output directory, and renders the matching figures next to
them. Artifacts carry the config hash and seed of the run.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import report
from .config import RunConfig, load_config
from .distributions import ParamDistribution, make_weight, pointwise_errors
from .parabolic import (
    PodGreedyConfig,
    parabolic_error_estimator,
    pod_greedy,
    spacetime_error,
    transient_rb_solve,
)
from .persist import load_space, save_space, write_csv, write_summary, write_trace_csv
from .problems import truth_solve, truth_solve_transient
from .rb import error_estimator, greedy, rb_solve
from .selective import (
    StabilizationPolicy,
    decide_stabilize,
    sweep_density_threshold,
    sweep_parameter_threshold,
)

MU_NAMES = ("mu1", "mu2")


def _training_set(config: RunConfig, dist: ParamDistribution | None) -> np.ndarray:
    g = config.greedy
    if g.train_sampling == "uniform-box":
        lo = np.array([d[0] for d in config.domain])
        hi = np.array([d[1] for d in config.domain])
        rng = np.random.default_rng(g.seed)
        return lo + rng.random((g.train_size, lo.size)) * (hi - lo)
    if dist is None:
        raise ValueError("distribution required for this sampling mode")
    if g.train_sampling == "uniform-base":
        return dist.sample_uniform(g.train_size, seed=g.seed, mode="base")
    return dist.sample(g.train_size, seed=g.seed)


def _policy(config: RunConfig, dist: ParamDistribution | None) -> StabilizationPolicy:
    st = config.stabilization
    if st.online_policy == "always":
        return StabilizationPolicy.always()
    if st.online_policy == "never":
        return StabilizationPolicy.never()
    if st.online_policy == "parameter_threshold":
        return StabilizationPolicy.parameter_threshold(st.component, st.threshold)
    if dist is None:
        raise ValueError("density policy requires a distribution")
    return StabilizationPolicy.density_threshold(dist, st.nu, n_mc=st.n_mc,
                                                 seed=st.policy_seed)


def _out(config: RunConfig) -> Path:
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_offline(config: RunConfig) -> Path:
    """Run the greedy (or POD-Greedy) offline stage and persist everything."""
    out = _out(config)
    problem = config.build_problem()
    dist = config.build_distribution() if config.distribution_spec else None
    xi = _training_set(config, dist)
    weight = make_weight(dist) if (config.greedy.weighted and dist) else None

    t0 = time.perf_counter()
    if config.parabolic is not None:
        pod_cfg = PodGreedyConfig(
            xi_train=xi, grid=config.parabolic.grid(),
            u0=config.initial_field(problem), tol=config.greedy.tol,
            n_max=config.greedy.n_max, n_add=config.parabolic.n_add,
            energy_tol=config.parabolic.energy_tol, weight=weight,
            stabilize_offline=config.stabilization.offline)
        space, trace = pod_greedy(problem, pod_cfg)
    else:
        space, trace = greedy(
            problem, xi, tol=config.greedy.tol, n_max=config.greedy.n_max,
            weight=weight, stabilize_offline=config.stabilization.offline,
            trace_true_errors=config.greedy.trace_true_errors)
    offline_seconds = time.perf_counter() - t0

    save_space(out / "space.npz", space, config_hash=config.hash,
               seed=config.greedy.seed)
    write_trace_csv(out / "trace.csv", trace, MU_NAMES,
                    config_hash=config.hash, seed=config.greedy.seed)
    report.figure_trace(trace, out / "convergence.png")
    write_summary(out / "summary.json", {
        "command": "offline",
        "config_hash": config.hash,
        "problem_id": problem.problem_id,
        "seed": config.greedy.seed,
        "train_size": len(xi),
        "weighted": bool(weight is not None),
        "final_n": space.n,
        "final_max_estimator": trace.final_max_estimator,
        "stop_reason": trace.stop_reason,
        "offline_seconds": offline_seconds,
        "selected_parameters": [list(map(float, mu))
                                for mu in space.selected_parameters],
    })
    return out / "space.npz"


def _load_for(config: RunConfig, space_path) -> tuple:
    problem = config.build_problem()
    space = load_space(space_path, problem)
    dist = config.build_distribution() if config.distribution_spec else None
    return problem, space, dist


def cmd_evaluate(config: RunConfig, space_path) -> None:
    """Per-point errors and estimators plus aggregate means in both modes."""
    out = _out(config)
    problem, space, dist = _load_for(config, space_path)
    ev = config.evaluation
    policy = _policy(config, dist)

    if ev.test_size == 0:
        write_csv(out / "errors.csv",
                  [*MU_NAMES, "true_error", "delta_n", "stabilized",
                   "truth_seconds", "rb_seconds"], [],
                  config_hash=config.hash, seed=ev.seed)
        write_summary(out / "evaluate_summary.json", {
            "command": "evaluate", "config_hash": config.hash,
            "seed": ev.seed, "note": "no evaluation (test_size = 0)"})
        return

    if ev.sampling == "distribution":
        if dist is None:
            raise ValueError("distribution required for distribution sampling")
        mus = dist.sample(ev.test_size, seed=ev.seed)
    elif ev.sampling == "uniform-base":
        mus = dist.sample_uniform(ev.test_size, seed=ev.seed, mode="base")
    else:
        lo = np.array([d[0] for d in config.domain])
        hi = np.array([d[1] for d in config.domain])
        rng = np.random.default_rng(ev.seed)
        mus = lo + rng.random((ev.test_size, lo.size)) * (hi - lo)

    rows = []
    errors = np.empty(len(mus))
    deltas = np.empty(len(mus))
    for i, mu in enumerate(mus):
        stab = decide_stabilize(policy, mu, dist)
        t0 = time.perf_counter()
        u = truth_solve(problem, mu, stabilized=True)
        t_truth = time.perf_counter() - t0
        t0 = time.perf_counter()
        c = rb_solve(space, mu, online_stabilized=stab)
        delta = error_estimator(space, mu, c, online_stabilized=stab)
        t_rb = time.perf_counter() - t0
        err = problem.energy_norm(mu, u[problem.free] - space.basis @ c)
        errors[i], deltas[i] = err, delta
        rows.append([*mu, err, delta, stab, t_truth, t_rb])
    write_csv(out / "errors.csv",
              [*MU_NAMES, "true_error", "delta_n", "stabilized",
               "truth_seconds", "rb_seconds"], rows,
              config_hash=config.hash, seed=ev.seed)
    report.figure_error_scatter(mus, errors, deltas, out / "errors.png")

    flags = ([decide_stabilize(policy, mu, dist) for mu in mus])
    aggregates = {"sample_mean_error": float(errors.mean()),
                  "sample_mean_delta": float(deltas.mean())}
    if dist is not None:
        from .distributions import mc_mean_error

        cache: dict = {}
        for mode in ev.modes:
            aggregates[f"mean_error[{mode}]"] = mc_mean_error(
                space, dist, ev.test_size, mode=mode,
                online_stabilized=lambda mu: decide_stabilize(policy, mu, dist),
                seed=ev.seed, truth_cache=cache)
    write_summary(out / "evaluate_summary.json", {
        "command": "evaluate", "config_hash": config.hash,
        "problem_id": problem.problem_id, "seed": ev.seed,
        "test_size": ev.test_size, "policy": policy.variant,
        "stabilized_fraction": float(np.mean(flags)),
        **aggregates,
    })


def _parse_mu(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",")])


def cmd_online(config: RunConfig, space_path, mus) -> None:
    """Reduced solves with full-field reconstruction and field dumps."""
    out = _out(config)
    problem, space, dist = _load_for(config, space_path)
    policy = _policy(config, dist)
    probes = list(config.probes) or [tuple(problem.mesh.nodes.mean(axis=0))]
    probe_ids = [int(np.argmin(np.linalg.norm(problem.mesh.nodes - np.asarray(pt),
                                              axis=1)))
                 for pt in probes]

    rows = []
    for i, mu in enumerate(mus):
        stab = decide_stabilize(policy, mu, dist)
        if config.parabolic is not None:
            grid = config.parabolic.grid()
            t0 = time.perf_counter()
            traj = transient_rb_solve(space, mu, grid, online_stabilized=stab)
            delta = parabolic_error_estimator(space, mu, traj,
                                              online_stabilized=stab)
            seconds = time.perf_counter() - t0
            full = traj.to_full(space)
            np.savez(out / f"trajectory_{i:03d}.npz", times=full.times,
                     states=full.states, control=full.control_values)
            write_csv(out / f"trajectory_{i:03d}.csv",
                      ["t"] + [f"probe_{k}" for k in range(len(probe_ids))],
                      [[t, *full.states[j, probe_ids]]
                       for j, t in enumerate(full.times)],
                      config_hash=config.hash, seed=config.greedy.seed)
            field = full.states[-1]
        else:
            t0 = time.perf_counter()
            c = rb_solve(space, mu, online_stabilized=stab)
            delta = error_estimator(space, mu, c, online_stabilized=stab)
            seconds = time.perf_counter() - t0
            field = space.expand(c)
            dump = np.column_stack([problem.mesh.nodes, field])
            np.savetxt(out / f"field_{i:03d}.txt", dump,
                       header="x y value", comments="# ")
        report.figure_field(problem.mesh, field, out / f"field_{i:03d}.png",
                            title=f"mu = {np.asarray(mu).tolist()}")
        rows.append([*mu, delta, stab, seconds, *field[probe_ids]])
    write_csv(out / "online.csv",
              [*MU_NAMES, "delta_n", "stabilized", "rb_seconds"]
              + [f"probe_{k}" for k in range(len(probe_ids))],
              rows, config_hash=config.hash, seed=config.greedy.seed)


def _sweep_test_set(config: RunConfig, dist: ParamDistribution):
    mus = dist.sample_uniform(config.sweep.test_size, seed=config.sweep.seed,
                              mode="base")
    weights = dist.base_density(mus)
    return mus, weights


def cmd_sweep_threshold(config: RunConfig, space_path) -> None:
    out = _out(config)
    problem, space, dist = _load_for(config, space_path)
    if dist is None:
        raise ValueError("sweeps require a distribution")
    mus, weights = _sweep_test_set(config, dist)
    thresholds = config.sweep.thresholds
    if not thresholds:
        lo, hi = config.domain[config.sweep.component]
        thresholds = tuple(np.geomspace(max(lo, 1e-6), hi, 6))
    rows = sweep_parameter_threshold(space, mus, weights, thresholds,
                                     component=config.sweep.component)
    write_csv(out / "sweep_threshold.csv",
              ["threshold", "error", "percent_unstabilized"],
              [[t, e, 100 * f] for t, e, f in rows],
              config_hash=config.hash, seed=config.sweep.seed)
    report.figure_sweep([r[0] for r in rows], [r[1] for r in rows],
                        [r[2] for r in rows], out / "sweep_threshold.png",
                        xlabel=f"threshold on {MU_NAMES[config.sweep.component]}")


def cmd_sweep_density(config: RunConfig, space_path) -> None:
    out = _out(config)
    problem, space, dist = _load_for(config, space_path)
    if dist is None:
        raise ValueError("sweeps require a distribution")
    mus, weights = _sweep_test_set(config, dist)
    rows = sweep_density_threshold(space, dist, mus, weights, config.sweep.nus,
                                   n_mc=config.sweep.n_mc,
                                   seed=config.sweep.seed)
    write_csv(out / "sweep_density.csv",
              ["nu", "rho_threshold", "error", "percent_unstabilized"],
              [[nu, thr, e, 100 * f] for nu, thr, e, f in rows],
              config_hash=config.hash, seed=config.sweep.seed)
    report.figure_sweep([r[0] for r in rows], [r[2] for r in rows],
                        [r[3] for r in rows], out / "sweep_density.png",
                        xlabel="tail mass nu")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rbstab",
        description="certified reduced-basis runs for stabilized "
                    "advection-diffusion benchmarks")
    parser.add_argument("command",
                        choices=["offline", "online", "evaluate",
                                 "sweep-threshold", "sweep-density"])
    parser.add_argument("--config", required=True, help="YAML run config")
    parser.add_argument("--space", default=None,
                        help="basis container (default: <out>/space.npz)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override greedy seed")
    parser.add_argument("--out", default=None, help="override output directory")
    parser.add_argument("--mu", default=None,
                        help="comma-separated parameter value for online")
    parser.add_argument("--mu-file", default=None,
                        help="file with one comma-separated mu per line")
    args = parser.parse_args(argv)

    config = load_config(args.config, seed_override=args.seed,
                         out_override=args.out)
    space_path = args.space or Path(config.output) / "space.npz"

    if args.command == "offline":
        path = cmd_offline(config)
        print(f"offline stage complete: {path}")
        return 0
    if args.command == "evaluate":
        cmd_evaluate(config, space_path)
        print(f"evaluation written to {config.output}")
        return 0
    if args.command == "online":
        if args.mu is None and args.mu_file is None:
            parser.error("online requires --mu or --mu-file")
        if args.mu is not None:
            mus = [_parse_mu(args.mu)]
        else:
            lines = Path(args.mu_file).read_text().strip().splitlines()
            mus = [_parse_mu(line) for line in lines if line.strip()]
        cmd_online(config, space_path, mus)
        print(f"online results written to {config.output}")
        return 0
    if args.command == "sweep-threshold":
        cmd_sweep_threshold(config, space_path)
    else:
        cmd_sweep_density(config, space_path)
    print(f"sweep written to {config.output}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
