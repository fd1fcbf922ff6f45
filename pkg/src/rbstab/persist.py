"""Artifact persistence: the basis container, delimited tables, summaries.

The basis container is a ``.npz`` archive with a JSON header under the
``header`` key (version tag, problem id, block dimensions) and the raw
float64 arrays of the basis, the projected blocks and the residual Gram
matrix; reloading restores them bit for bit. A reloaded space can run every
online operation but cannot be extended (the offline Riesz columns are not
stored); rebuild from scratch to grow the basis.

Every CSV starts with a ``# config_hash=... seed=...`` comment line followed
by a header row; floats are written with shortest round-trip formatting, so
files are byte-stable under a fixed seed.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .rb import GreedyTrace, ReducedSpace

__all__ = [
    "save_space",
    "load_space",
    "write_csv",
    "write_trace_csv",
    "write_summary",
]

SPACE_FORMAT = "rbstab-space-v1"


def save_space(path, space: ReducedSpace, config_hash: str = "",
               seed: int | None = None, extra: dict | None = None) -> None:
    header = {
        "format": SPACE_FORMAT,
        "problem_id": space.problem.problem_id,
        "with_mass": space.with_mass,
        "n": space.n,
        "qa_plain": space.qa_plain, "qa_all": space.qa_all,
        "qf_plain": space.qf_plain, "qf_all": space.qf_all,
        "qm_plain": space.qm_plain, "qm_all": space.qm_all,
        "config_hash": config_hash,
        "seed": seed,
        "meta": dict(space.problem.meta),
    }
    if extra:
        header.update(extra)
    arrays = {
        "basis": space.basis,
        "reduced_a": space.reduced_a,
        "reduced_f": space.reduced_f,
        "reduced_m": space.reduced_m,
        "residual_gram": space.residual_gram,
        "selected_parameters": np.array(space.selected_parameters)
        if space.selected_parameters else np.empty((0, 0)),
    }
    if space.initial_state is not None:
        arrays["initial_state"] = space.initial_state
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, header=json.dumps(header, sort_keys=True), **arrays)


def load_space(path, problem) -> ReducedSpace:
    """Reload a persisted space and attach it to a compatible problem."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != SPACE_FORMAT:
            raise ValueError(f"unsupported space container {header.get('format')!r}")
        if header["problem_id"] != problem.problem_id:
            raise ValueError(
                f"space was built for {header['problem_id']!r}, "
                f"got problem {problem.problem_id!r}")
        space = ReducedSpace.__new__(ReducedSpace)
        space.problem = problem
        space.with_mass = bool(header["with_mass"])
        for key in ("qa_plain", "qa_all", "qf_plain", "qf_all",
                    "qm_plain", "qm_all"):
            setattr(space, key, int(header[key]))
        space.basis = data["basis"]
        space.reduced_a = data["reduced_a"]
        space.reduced_f = data["reduced_f"]
        space.reduced_m = data["reduced_m"]
        space.residual_gram = data["residual_gram"]
        sel = data["selected_parameters"]
        space.selected_parameters = [row for row in sel] if sel.size else []
        space.initial_state = data["initial_state"] \
            if "initial_state" in data.files else None
        space._raw = None
        space._riesz = None
        space._variant_idx = {}
        return space


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header_row, rows, config_hash: str = "",
              seed: int | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# config_hash={config_hash} seed={seed}",
             ",".join(header_row)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def write_trace_csv(path, trace: GreedyTrace, mu_names, config_hash: str = "",
                    seed: int | None = None) -> None:
    header = (["N"] + list(mu_names)
              + ["max_estimator", "max_true_error", "max_true_error_plain",
                 "seconds"])
    rows = []
    for rec in trace.records:
        rows.append([rec.n, *rec.mu, rec.max_estimator,
                     "" if rec.max_true_error is None else rec.max_true_error,
                     "" if rec.max_true_error_plain is None
                     else rec.max_true_error_plain,
                     rec.seconds])
    write_csv(path, header, rows, config_hash=config_hash, seed=seed)


def write_summary(path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2,
                               default=float) + "\n")
