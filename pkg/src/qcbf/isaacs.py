"""Grid dynamic programming for the discrete-time Isaacs safety game.

The solver touches the system only through ``step``, ``margin`` and the two
boxes. Successor cells for every (node, control, disturbance) triple are
computed once and reused by every Jacobi sweep.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import _kernels
from .core import (
    Box,
    ConfigurationError,
    ContractViolation,
    Grid,
    ScalarField,
    cell_coordinates,
)


@dataclass(frozen=True)
class SolveConfig:
    mode: str = "undiscounted"
    gamma_env: float = 0.9
    tolerance: float = 1e-6
    max_iterations: int = 2000
    control_points: int = 41
    dstb_points: int = 21

    def __post_init__(self):
        if self.mode not in ("undiscounted", "discounted"):
            raise ConfigurationError(f"unknown solve mode {self.mode!r}")
        if self.mode == "discounted" and not 0.0 < self.gamma_env < 1.0:
            raise ConfigurationError("gamma_env must lie in (0, 1)")
        if not self.tolerance > 0:
            raise ConfigurationError(f"tolerance must be positive, got {self.tolerance}")
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be >= 1")
        if self.control_points < 1 or self.dstb_points < 1:
            raise ConfigurationError("discretizations need at least one point")

    @classmethod
    def from_dict(cls, d: dict | None) -> "SolveConfig":
        return cls(**(d or {}))

    def to_dict(self) -> dict:
        return asdict(self)

    def control_set(self, system) -> np.ndarray:
        return discretize_box(system.control_box, self.control_points)

    def dstb_set(self, system) -> np.ndarray:
        return discretize_box(system.dstb_box, self.dstb_points)


def discretize_box(box: Box, points: int) -> np.ndarray:
    if points < 2 and not np.all(box.degenerate):
        raise ConfigurationError("need >= 2 points per bounded box dimension")
    return box.discretize(points)


@dataclass
class SolveDiagnostics:
    iterations: int = 0
    final_residual: float = float("inf")
    residual_history: list = field(default_factory=list)
    clamp_events: int = 0
    clamped_safe_nodes: int = 0
    converged: bool = False
    wall_time: float = 0.0
    lift: ScalarField | None = field(default=None, repr=False)

    @property
    def valid(self) -> bool:
        return self.converged and self.clamped_safe_nodes == 0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "iterations": self.iterations,
            "final_residual": self.final_residual,
            "residual_history": list(self.residual_history),
            "clamp_events": self.clamp_events,
            "clamped_safe_nodes": self.clamped_safe_nodes,
            "converged": self.converged,
            "valid": self.valid,
        }
        if include_timing:
            d["wall_time"] = self.wall_time
        return d


@dataclass(frozen=True)
class Certificate:
    """Safety value ``V`` paired with the field its Q-lift reads at successor states.

    For a solved game ``lift`` is the iterate preceding ``value``, so that
    ``value(x) = max_u min_d min{g(x), lift(step(x, u, d))}`` holds exactly on
    every node instead of only up to the solver tolerance.
    """

    value: ScalarField
    lift: ScalarField

    @classmethod
    def of(cls, V) -> "Certificate":
        if isinstance(V, Certificate):
            return V
        return cls(V, V)

    @property
    def grid(self) -> Grid:
        return self.value.grid

    def evaluate(self, x, return_clamped: bool = False):
        return self.value.evaluate(x, return_clamped)

    __call__ = evaluate


class NonConvergenceError(RuntimeError):
    def __init__(self, message: str, diagnostics: SolveDiagnostics, field: ScalarField | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics
        self.field = field


# -- point-wise operations ----------------------------------------------------


def _lift(V) -> ScalarField:
    return V.lift if isinstance(V, Certificate) else V


def _as_rows(a, dim: int) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).reshape(-1, dim)


def _check_in_box(box: Box, v, what: str):
    if not box.contains(v, atol=1e-12):
        raise ContractViolation(f"{what} {np.asarray(v).tolist()} outside box [{box.lower}, {box.upper}]")


def inner_values(V: ScalarField, system, x, u_disc, d_disc) -> np.ndarray:
    """``V(step(x, u, d))`` for every pair, shape ``(len(u_disc), len(d_disc))``."""
    x = np.asarray(x, dtype=np.float64)
    U = _as_rows(u_disc, system.control_box.dim)
    D = _as_rows(d_disc, system.dstb_box.dim)
    nxt = system.step(x[None, None, :], U[:, None, :], D[None, :, :])
    return _lift(V).evaluate(nxt)


def bellman_backup(V: ScalarField, system, x, config: SolveConfig = SolveConfig()) -> float:
    x = np.asarray(x, dtype=np.float64)
    g = float(system.margin(x))
    table = inner_values(V, system, x, config.control_set(system), config.dstb_set(system))
    game = min(g, float(np.max(np.min(table, axis=1))))
    if config.mode == "discounted":
        return (1.0 - config.gamma_env) * g + config.gamma_env * game
    return game


def q_value(V: ScalarField, system, x, u, d) -> float:
    """State-control-disturbance value ``min{g(x), V(step(x, u, d))}``."""
    _check_in_box(system.control_box, u, "control")
    _check_in_box(system.dstb_box, d, "disturbance")
    x = np.asarray(x, dtype=np.float64)
    nxt = system.step(x, np.atleast_1d(np.asarray(u, dtype=np.float64)), np.atleast_1d(np.asarray(d, dtype=np.float64)))
    return min(float(system.margin(x)), float(_lift(V).evaluate(nxt)))


def _lexicographic_first(rows: np.ndarray, mask: np.ndarray) -> int:
    idx = np.flatnonzero(mask)
    if idx.size == 1:
        return int(idx[0])
    order = np.lexsort(rows[idx].T[::-1])
    return int(idx[order[0]])


def robust_q(V: ScalarField, system, x, u, d_disc) -> tuple[float, np.ndarray]:
    """Worst case over ``d_disc`` of the Q value and the minimizing disturbance."""
    D = _as_rows(d_disc, system.dstb_box.dim)
    if D.shape[0] == 0:
        raise ConfigurationError("empty disturbance discretization")
    _check_in_box(system.control_box, u, "control")
    x = np.asarray(x, dtype=np.float64)
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    g = float(system.margin(x))
    q = np.minimum(g, _lift(V).evaluate(system.step(x[None, :], u[None, :], D)))
    best = q.min()
    k = _lexicographic_first(D, q == best)
    return float(best), D[k].copy()


def robust_q_batch(V: ScalarField, system, x, U, D) -> np.ndarray:
    """``min_d min{g(x), V(step(x, u, d))}`` for each row of ``U``."""
    x = np.asarray(x, dtype=np.float64)
    g = float(system.margin(x))
    table = np.minimum(g, inner_values(V, system, x, U, D))
    return table.min(axis=1)


def select_control(U: np.ndarray, values: np.ndarray) -> int:
    """Index of the max of ``values``; ties toward the control nearest 0, then lexicographic."""
    best = values.max()
    tied = np.flatnonzero(values == best)
    if tied.size == 1:
        return int(tied[0])
    norms = np.linalg.norm(U[tied], axis=1)
    tied = tied[norms == norms.min()]
    return _lexicographic_first(U, np.isin(np.arange(len(U)), tied))


def fallback_action(V: ScalarField, system, x, u_disc, d_disc) -> tuple[np.ndarray, float]:
    U = _as_rows(u_disc, system.control_box.dim)
    D = _as_rows(d_disc, system.dstb_box.dim)
    if U.shape[0] == 0 or D.shape[0] == 0:
        raise ConfigurationError("empty control or disturbance discretization")
    values = robust_q_batch(V, system, x, U, D)
    k = select_control(U, values)
    return U[k].copy(), float(values[k])


def worst_disturbance(V: ScalarField, system, x, u, d_disc) -> np.ndarray:
    """Argmin over ``d_disc`` of ``V(step(x, u, d))`` (lexicographic ties)."""
    D = _as_rows(d_disc, system.dstb_box.dim)
    x = np.asarray(x, dtype=np.float64)
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    vals = _lift(V).evaluate(system.step(x[None, :], u[None, :], D))
    return D[_lexicographic_first(D, vals == vals.min())].copy()


def bellman_backup_batch(V: ScalarField, system, states, config: SolveConfig = SolveConfig(),
                         chunk: int = 512) -> np.ndarray:
    """Vectorized :func:`bellman_backup` over rows of ``states``."""
    states = _as_rows(states, V.grid.ndim)
    U = config.control_set(system)
    D = config.dstb_set(system)
    lift = _lift(V)
    out = np.empty(len(states))
    for s in range(0, len(states), chunk):
        xs = states[s:s + chunk]
        nxt = system.step(xs[:, None, None, :], U[None, :, None, :], D[None, None, :, :])
        game = lift.evaluate(nxt).min(axis=2).max(axis=1)
        g = system.margin(xs)
        game = np.minimum(g, game)
        if config.mode == "discounted":
            game = (1.0 - config.gamma_env) * g + config.gamma_env * game
        out[s:s + chunk] = game
    return out


def bellman_residual(V: ScalarField, system, states, config: SolveConfig = SolveConfig()) -> dict:
    """Off-node consistency ``|V(x) - backup(x)|`` summarized over ``states``."""
    states = _as_rows(states, V.grid.ndim)
    res = np.abs(Certificate.of(V).value.evaluate(states) - bellman_backup_batch(V, system, states, config))
    return {"max": float(res.max()), "mean_abs": float(res.mean()), "count": int(res.size)}


# -- grid solve ---------------------------------------------------------------


def cell_centers(grid: Grid) -> np.ndarray:
    h = grid.spacing / 2
    axes = [np.linspace(grid.mins[i] + h[i], grid.maxs[i] - h[i], grid.counts[i] - 1) for i in range(grid.ndim)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, grid.ndim)


def interpolation_error(V, system, config: SolveConfig = SolveConfig()) -> dict:
    """Bellman residual at every cell center, the points farthest from any node."""
    grid = V.grid if isinstance(V, ScalarField) else V.value.grid
    return bellman_residual(V, system, cell_centers(grid), config)


class TransitionTable:
    """Successor cells of every (node, control, disturbance) triple on a grid."""

    def __init__(self, system, grid: Grid, u_disc: np.ndarray, d_disc: np.ndarray, chunk: int = 2048):
        self.grid = grid
        self.u_disc = u_disc
        self.d_disc = d_disc
        nodes = grid.nodes()
        n, nu, nd = grid.size, len(u_disc), len(d_disc)
        self.base = np.empty((n, nu, nd), dtype=np.int64 if n >= 2**31 else np.int32)
        self.frac = np.empty((n, nu, nd, grid.ndim))
        self.clamped = np.empty((n, nu, nd), dtype=bool)
        self.strides = np.array(
            [int(np.prod(grid.counts[i + 1:])) for i in range(grid.ndim)], dtype=np.int64
        )
        for s in range(0, n, chunk):
            x = nodes[s:s + chunk]
            nxt = system.step(x[:, None, None, :], u_disc[None, :, None, :], d_disc[None, None, :, :])
            base, frac, clamped = cell_coordinates(grid, nxt)
            self.base[s:s + chunk] = base @ self.strides
            self.frac[s:s + chunk] = frac
            self.clamped[s:s + chunk] = clamped
        self.corner_bits = np.array(list(itertools.product((0, 1), repeat=grid.ndim)), dtype=np.int64)

    def sweep(self, values, margin, warm_u, warm_d, gamma=1.0, discounted=False):
        return _kernels.sweep(
            values, margin, self.base, self.frac, self.strides, self.corner_bits,
            warm_u, warm_d, gamma, discounted,
        )

    def inner_game(self, values) -> np.ndarray:
        return _kernels.inner_game(values, self.base, self.frac, self.strides, self.corner_bits)


def solve(system, grid: Grid, config: SolveConfig = SolveConfig(), table: TransitionTable | None = None,
          callback=None) -> tuple[ScalarField, SolveDiagnostics]:
    """Jacobi value iteration from ``V0 = g`` until the max-norm change is within tolerance.

    Raises :class:`NonConvergenceError` (carrying diagnostics and the last
    iterate) if ``max_iterations`` sweeps do not reach the tolerance.
    """
    t0 = time.perf_counter()
    if table is None:
        table = TransitionTable(system, grid, config.control_set(system), config.dstb_set(system))
    margin = np.asarray(system.margin(grid.nodes()), dtype=np.float64)
    values = margin.copy()
    warm_u = np.zeros(grid.size, dtype=np.int64)
    warm_d = np.zeros(grid.size, dtype=np.int64)
    diag = SolveDiagnostics(clamp_events=int(table.clamped.sum()))
    discounted = config.mode == "discounted"
    for k in range(1, config.max_iterations + 1):
        new, warm_u, warm_d = table.sweep(values, margin, warm_u, warm_d, config.gamma_env, discounted)
        residual = float(np.max(np.abs(new - values)))
        if callback is not None:
            callback(k, values, new)
        previous, values = values, new
        diag.residual_history.append(residual)
        diag.iterations = k
        diag.final_residual = residual
        if residual <= config.tolerance:
            diag.converged = True
            break
    meta = {"solver": config.to_dict(), "system": _describe(system), "iterations": diag.iterations}
    V = ScalarField(grid, values, label="isaacs_value", metadata=meta)
    diag.lift = ScalarField(grid, previous, label="isaacs_lift", metadata=dict(meta, iterations=diag.iterations - 1))
    diag.clamped_safe_nodes = _clamped_safe_nodes(table, values, previous)
    diag.wall_time = time.perf_counter() - t0
    if not diag.converged:
        raise NonConvergenceError(
            f"value iteration did not converge in {config.max_iterations} sweeps "
            f"(residual {diag.final_residual:.3e} > {config.tolerance:.1e})",
            diag,
            V,
        )
    return V, diag


def _clamped_safe_nodes(table: TransitionTable, values: np.ndarray, lift: np.ndarray) -> int:
    """Safe nodes whose fallback control has a successor outside the grid hull."""
    safe = np.flatnonzero(values >= 0)
    if safe.size == 0:
        return 0
    game = table.inner_game(lift)
    count = 0
    for i in safe:
        if not table.clamped[i].any():
            continue
        j = select_control(table.u_disc, game[i])
        count += bool(table.clamped[i, j].any())
    return count


def _describe(system) -> dict:
    cfg = getattr(system, "config", None)
    out = {"type": type(system).__name__}
    if cfg is not None and hasattr(cfg, "to_dict"):
        out.update(cfg.to_dict())
    return out


class IsaacsSolver(BaseEstimator):
    """Estimator wrapper: ``fit(system)`` solves the game, ``predict(X)`` returns V(X).

    Parameters mirror :class:`SolveConfig` plus the grid description.
    """

    def __init__(self, grid_min=(-1.2, -7.0), grid_max=(1.2, 7.0), grid_count=(161, 161),
                 mode="undiscounted", gamma_env=0.9, tolerance=1e-6, max_iterations=2000,
                 control_points=41, dstb_points=21):
        self.grid_min = grid_min
        self.grid_max = grid_max
        self.grid_count = grid_count
        self.mode = mode
        self.gamma_env = gamma_env
        self.tolerance = tolerance
        self.max_iterations = max_iterations
        self.control_points = control_points
        self.dstb_points = dstb_points

    def _solve_config(self) -> SolveConfig:
        return SolveConfig(self.mode, self.gamma_env, self.tolerance, self.max_iterations,
                           self.control_points, self.dstb_points)

    def fit(self, system, y=None):
        grid = Grid(tuple(self.grid_min), tuple(self.grid_max), tuple(self.grid_count))
        self.system_ = system
        self.value_, self.diagnostics_ = solve(system, grid, self._solve_config())
        return self

    def predict(self, X):
        check_is_fitted(self, "value_")
        X = check_array(X, dtype=np.float64)
        return self.value_.evaluate(X)

    def safe_mask(self, X):
        return self.predict(X) >= 0.0
