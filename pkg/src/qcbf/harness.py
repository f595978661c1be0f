"""Rollout experiments: boundary sampling, filter-specific worst-case disturbances, set metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ConfigurationError, Grid, ScalarField
from .isaacs import Certificate, worst_disturbance

MAX_PROPOSALS = 10**6
DEFAULT_BAND = 0.02 * math.pi / 3


@dataclass
class Trajectory:
    """Closed-loop rollout.

    ``states``/``margins``/``values`` hold x_0..x_T (T+1 rows); the input
    sequences hold the T applied steps.
    """

    states: np.ndarray
    u_task: np.ndarray
    u_exec: np.ndarray
    d_applied: np.ndarray
    margins: np.ndarray
    safe: bool
    min_margin: float
    interventions: int = 0
    values: np.ndarray | None = None

    @property
    def steps(self) -> int:
        return len(self.u_exec)

    def squared_deviations(self) -> np.ndarray:
        return np.sum((self.u_task - self.u_exec) ** 2, axis=-1)

    def write_csv(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "theta", "omega", "u_task", "u_exec", "F", "margin", "V"])
            for t in range(len(self.states)):
                row = [t, repr(float(self.states[t, 0])), repr(float(self.states[t, 1]))]
                if t < self.steps:
                    row += [repr(float(self.u_task[t, 0])), repr(float(self.u_exec[t, 0])),
                            repr(float(self.d_applied[t, 0]))]
                else:
                    row += ["", "", ""]
                row.append(repr(float(self.margins[t])))
                row.append("" if self.values is None else repr(float(self.values[t])))
                w.writerow(row)


@dataclass
class SetMetrics:
    areas: dict
    containment_violations: dict = field(default_factory=dict)
    area_ratios: dict = field(default_factory=dict)
    node_counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "areas": self.areas,
            "node_counts": self.node_counts,
            "containment_violations": {f"{a}|{b}": v for (a, b), v in self.containment_violations.items()},
            "area_ratios": {f"{a}/{b}": v for (a, b), v in self.area_ratios.items()},
        }


def _evaluator(fn):
    if callable(fn):
        return fn
    return fn.evaluate


def sample_boundary_states(V, n: int, band: float, seed: int, grid: Grid | None = None) -> np.ndarray:
    """Rejection-sample ``n`` states uniformly in the hull with ``0 <= V(x) <= band``."""
    if not band > 0:
        raise ConfigurationError("band must be positive")
    grid = grid or V.grid
    f = _evaluator(V)
    rng = np.random.default_rng(seed)
    lo, hi = np.array(grid.mins), np.array(grid.maxs)
    accepted = []
    proposals = 0
    batch = 4096
    while sum(len(a) for a in accepted) < n:
        if proposals >= MAX_PROPOSALS:
            raise ConfigurationError(
                f"boundary band [0, {band}] is empty after {proposals} proposals"
            )
        x = rng.uniform(lo, hi, size=(batch, grid.ndim))
        proposals += batch
        v = f(x)
        accepted.append(x[(v >= 0) & (v <= band)])
    return np.concatenate(accepted)[:n]


class FrozenBestResponse:
    """Disturbance that minimizes V's successor value given the filter's executed control."""

    def __init__(self, V, system, filt, task_controller, d_disc):
        self.V = Certificate.of(V)
        self.system = system
        self.filter = filt
        self.task_controller = task_controller
        self.d_disc = np.asarray(d_disc, dtype=np.float64).reshape(-1, system.dstb_box.dim)

    def given_control(self, x, u_exec) -> np.ndarray:
        return worst_disturbance(self.V, self.system, x, u_exec, self.d_disc)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        u_exec = self.filter(x, self.task_controller(x)).u_exec
        return self.given_control(x, u_exec)


def frozen_best_response(V, system, filt, task_controller, d_disc) -> FrozenBestResponse:
    return FrozenBestResponse(V, system, filt, task_controller, d_disc)


class ConstantDisturbance:
    def __init__(self, d):
        self.d = np.atleast_1d(np.asarray(d, dtype=np.float64))

    def __call__(self, x):
        return self.d.copy()


class RandomDisturbance:
    def __init__(self, box, seed: int):
        self.box = box
        self.rng = np.random.default_rng(seed)

    def __call__(self, x):
        return self.rng.uniform(self.box.lower, self.box.upper)


def rollout(system, filt, task_controller, dstb_policy, x0, horizon: int, value=None) -> Trajectory:
    """Simulate the filtered closed loop; stops at the first state with negative margin."""
    if horizon < 1:
        raise ConfigurationError("horizon must be >= 1")
    x = np.asarray(x0, dtype=np.float64).copy()
    m = system.control_box.dim
    k = system.dstb_box.dim
    states, margins = [x.copy()], [float(system.margin(x))]
    u_task_seq, u_exec_seq, d_seq = [], [], []
    interventions = 0
    if margins[0] >= 0:
        for _ in range(horizon):
            u_task = np.atleast_1d(np.asarray(task_controller(x), dtype=np.float64))
            out = filt(x, u_task)
            u_exec = out.u_exec
            if hasattr(dstb_policy, "given_control"):
                d = dstb_policy.given_control(x, u_exec)
            else:
                d = np.atleast_1d(np.asarray(dstb_policy(x), dtype=np.float64))
            interventions += bool(out.intervened)
            x = system.step(x, u_exec, d)
            u_task_seq.append(out.u_task if out.u_task is not None else u_task)
            u_exec_seq.append(u_exec)
            d_seq.append(d)
            states.append(x.copy())
            margins.append(float(system.margin(x)))
            if margins[-1] < 0:
                break
    margins = np.array(margins)
    states = np.array(states)
    values = None
    if value is not None:
        values = np.asarray(_evaluator(value)(states), dtype=np.float64)
    return Trajectory(
        states=states,
        u_task=np.array(u_task_seq).reshape(-1, m),
        u_exec=np.array(u_exec_seq).reshape(-1, m),
        d_applied=np.array(d_seq).reshape(-1, k),
        margins=margins,
        safe=bool(margins.min() >= 0),
        min_margin=float(margins.min()),
        interventions=interventions,
        values=values,
    )


def compute_set_metrics(fields: dict, grid: Grid, eps: dict | None = None) -> SetMetrics:
    """Superlevel-set areas and pairwise containment on the nodes of ``grid``.

    ``containment_violations[(a, b)]`` counts nodes with ``a >= 0`` but
    ``b < -eps[b]``; ``eps`` defaults to 0 for every field.
    """
    eps = eps or {}
    nodes = grid.nodes()
    vals = {name: np.asarray(_evaluator(f)(nodes), dtype=np.float64) for name, f in fields.items()}
    masks = {name: v >= 0 for name, v in vals.items()}
    cell = grid.cell_volume
    counts = {name: int(m.sum()) for name, m in masks.items()}
    areas = {name: c * cell for name, c in counts.items()}
    viol, ratios = {}, {}
    for a in fields:
        for b in fields:
            if a == b:
                viol[(a, b)] = 0
                ratios[(a, b)] = 1.0
                continue
            inside_b = vals[b] >= -eps.get(b, 0.0)
            viol[(a, b)] = int(np.sum(masks[a] & ~inside_b))
            ratios[(a, b)] = areas[a] / areas[b] if areas[b] > 0 else float("inf")
    return SetMetrics(areas, viol, ratios, counts)


def deviation_stats(trajectories, u_max: float = 20.0, bins: int = 64) -> dict:
    if not trajectories:
        raise ConfigurationError("need at least one trajectory")
    dev = np.concatenate([t.squared_deviations() for t in trajectories])
    hist, edges = np.histogram(dev, bins=bins, range=(0.0, (2.0 * u_max) ** 2))
    return {
        "counts": hist.tolist(),
        "edges": edges.tolist(),
        "n": int(dev.size),
        "mean": float(dev.mean()) if dev.size else 0.0,
        "median": float(np.median(dev)) if dev.size else 0.0,
        "max": float(dev.max()) if dev.size else 0.0,
    }


def boundary_experiment(system, V, filt, task_controller, certificate_field, d_disc, n=20, band=None,
                        horizon=500, seed=0, dstb_policy=None) -> list[Trajectory]:
    """``n`` rollouts from the boundary band of ``certificate_field`` under a disturbance policy.

    The default policy is the filter-specific frozen best response against ``V``.
    """
    band = band if band is not None else DEFAULT_BAND
    grid = certificate_field.grid if hasattr(certificate_field, "grid") else Certificate.of(V).grid
    x0s = sample_boundary_states(certificate_field, n, band, seed, grid=grid)
    policy = dstb_policy or frozen_best_response(V, system, filt, task_controller, d_disc)
    return [rollout(system, filt, task_controller, policy, x0, horizon, value=V) for x0 in x0s]


def as_field(obj, grid: Grid, label: str = "") -> ScalarField:
    if isinstance(obj, ScalarField):
        return obj
    if isinstance(obj, Certificate):
        return obj.value
    return ScalarField.from_function(grid, _evaluator(obj), label=label)
