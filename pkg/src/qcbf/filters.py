"""Runtime safety filters and the PD task controller.

The value-based filters (robust Q-CBF and least-restrictive) only call the
system's ``step``/``margin`` and read the certificate fields. The two
continuous-time baselines are white-box by construction: they need the
pendulum vector field to form the barrier derivative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .core import ClassKMap, ConfigurationError
from .dynamics import PendulumConfig
from .isaacs import Certificate, fallback_action, robust_q_batch, select_control, discretize_box

REFINE_RESOLUTION = 1e-4


@dataclass
class FilterOutput:
    u_exec: np.ndarray
    intervened: bool
    constraint_margin: float
    feasible: bool
    fallback_used: bool = False
    certified: bool = True
    u_task: np.ndarray = field(default=None, repr=False)

    @property
    def deviation(self) -> float:
        return float(np.sum((self.u_task - self.u_exec) ** 2))


def _vec(u) -> np.ndarray:
    return np.atleast_1d(np.asarray(u, dtype=np.float64)).copy()


# -- value-based filters ------------------------------------------------------


def _worst_q(cert: Certificate, system, x, U, D) -> np.ndarray:
    return robust_q_batch(cert, system, x, U, D)


def _nominal_q(cert: Certificate, system, x, U) -> np.ndarray:
    """``min{g(x), V(step(x, u, 0))}``; the disturbance-free constraint value."""
    x = np.asarray(x, dtype=np.float64)
    g = float(system.margin(x))
    zero = np.zeros((1, system.dstb_box.dim))
    nxt = system.step(x[None, :], U, zero)
    return np.minimum(g, cert.lift.evaluate(nxt))


def _select_min_deviation(u_task: np.ndarray, U: np.ndarray, feasible: np.ndarray) -> int:
    dist = np.sum((U - u_task) ** 2, axis=1)
    dist = np.where(feasible, dist, np.inf)
    cand = np.flatnonzero(dist == dist.min())
    return int(cand[np.lexsort(U[cand].T[::-1])[0]])


def _refine_toward(q_fn, level: float, u_feas: float, u_infeas: float) -> float:
    """Shrink ``[u_feas, u_infeas]`` onto the constraint boundary; returns a feasible end."""
    lo, hi = u_feas, u_infeas
    while abs(hi - lo) > REFINE_RESOLUTION:
        mid = 0.5 * (lo + hi)
        if q_fn(np.array([[mid]]))[0] >= level:
            lo = mid
        else:
            hi = mid
    return lo


def _constrained_projection(q_fn, level: float, u_task: np.ndarray, U: np.ndarray):
    """Closest feasible control to ``u_task``: enumerate ``U`` then refine (scalar controls).

    Returns ``(u, q(u))`` or ``None`` when no control in ``U`` is feasible.
    """
    q = q_fn(U)
    ok = q >= level
    if not ok.any():
        return None
    k = _select_min_deviation(u_task, U, ok)
    if U.shape[1] != 1:
        return U[k].copy(), float(q[k])
    ut = float(u_task[0])
    u_grid = U[:, 0]
    best_u, best_q = float(u_grid[k]), float(q[k])
    candidates = []
    for side in (-1, 1):
        # nearest feasible enumerated control on this side of u_task
        mask = ok & ((u_grid - ut) * side > 0)
        if not mask.any():
            continue
        idx = np.flatnonzero(mask)
        j = idx[np.argmin(np.abs(u_grid[idx] - ut))]
        toward = j - side
        if 0 <= toward < len(u_grid) and (u_grid[toward] - ut) * side > 0:
            bound = float(u_grid[toward])
        else:
            bound = ut
        u_ref = _refine_toward(q_fn, level, float(u_grid[j]), bound)
        candidates.append(u_ref)
    for u_ref in sorted(candidates):
        if (u_ref - ut) ** 2 < (best_u - ut) ** 2:
            best_u = u_ref
    if best_u != float(u_grid[k]):
        best_q = float(q_fn(np.array([[best_u]]))[0])
    return np.array([best_u]), best_q


def qcbf_filter(x, u_task, V, system, beta: ClassKMap, u_disc, d_disc) -> FilterOutput:
    """Robust Q-CBF filter: closest control to ``u_task`` with ``min_d Q >= beta(V(x))``."""
    cert = Certificate.of(V)
    U = np.asarray(u_disc, dtype=np.float64).reshape(-1, system.control_box.dim)
    D = np.asarray(d_disc, dtype=np.float64).reshape(-1, system.dstb_box.dim)
    if U.shape[0] == 0 or D.shape[0] == 0:
        raise ConfigurationError("empty control or disturbance discretization")
    return _qcbf(x, u_task, cert, system, beta, U, lambda us: _worst_q(cert, system, x, us, D),
                 lambda: fallback_action(cert, system, x, U, D))


def qcbf_filter_nominal(x, u_task, V, system, beta: ClassKMap, u_disc) -> FilterOutput:
    """Disturbance-free Q-CBF filter, ``Q(x, u) >= beta(V(x))`` with ``d = 0``."""
    cert = Certificate.of(V)
    U = np.asarray(u_disc, dtype=np.float64).reshape(-1, system.control_box.dim)
    if U.shape[0] == 0:
        raise ConfigurationError("empty control discretization")

    def fallback():
        q = _nominal_q(cert, system, x, U)
        k = select_control(U, q)
        return U[k].copy(), float(q[k])

    return _qcbf(x, u_task, cert, system, beta, U, lambda us: _nominal_q(cert, system, x, us), fallback)


def _qcbf(x, u_task, cert, system, beta, U, q_fn, fallback) -> FilterOutput:
    x = np.asarray(x, dtype=np.float64)
    u_task = system.control_box.clip(_vec(u_task))
    v = float(cert.value.evaluate(x))
    if v < 0:
        u_fb, q_fb = fallback()
        return FilterOutput(u_fb, bool(np.any(u_fb != u_task)), q_fb - v, False, True, False, u_task)
    level = float(beta(v))
    q_task = float(q_fn(u_task[None, :])[0])
    if q_task >= level:
        return FilterOutput(u_task.copy(), False, q_task - level, True, False, True, u_task)
    found = _constrained_projection(q_fn, level, u_task, U)
    if found is None:
        u_fb, q_fb = fallback()
        return FilterOutput(u_fb, bool(np.any(u_fb != u_task)), q_fb - level, False, True, True, u_task)
    u, q = found
    return FilterOutput(u, bool(np.any(u != u_task)), q - level, True, False, True, u_task)


def lrsf_filter(x, u_task, V, system, d_disc, u_disc=None) -> FilterOutput:
    """Least-restrictive filter: pass ``u_task`` if its worst successor value is >= 0."""
    cert = Certificate.of(V)
    x = np.asarray(x, dtype=np.float64)
    u_task = system.control_box.clip(_vec(u_task))
    D = np.asarray(d_disc, dtype=np.float64).reshape(-1, system.dstb_box.dim)
    U = discretize_box(system.control_box, 41) if u_disc is None else np.asarray(u_disc, dtype=np.float64).reshape(-1, system.control_box.dim)
    worst = float(np.min(cert.lift.evaluate(system.step(x[None, :], u_task[None, :], D))))
    if worst >= 0:
        return FilterOutput(u_task.copy(), False, worst, True, False, True, u_task)
    u_fb, q_fb = fallback_action(cert, system, x, U, D)
    return FilterOutput(u_fb, bool(np.any(u_fb != u_task)), worst, True, True, float(cert.value.evaluate(x)) >= 0, u_task)


def lrsf_filter_nominal(x, u_task, V, system, u_disc=None) -> FilterOutput:
    """Disturbance-free least-restrictive filter (successor under ``d = 0``)."""
    cert = Certificate.of(V)
    x = np.asarray(x, dtype=np.float64)
    u_task = system.control_box.clip(_vec(u_task))
    U = discretize_box(system.control_box, 41) if u_disc is None else np.asarray(u_disc, dtype=np.float64).reshape(-1, system.control_box.dim)
    zero = np.zeros((1, system.dstb_box.dim))
    worst = float(np.min(cert.lift.evaluate(system.step(x[None, :], u_task[None, :], zero))))
    if worst >= 0:
        return FilterOutput(u_task.copy(), False, worst, True, False, True, u_task)
    q = _nominal_q(cert, system, x, U)
    k = select_control(U, q)
    return FilterOutput(U[k].copy(), bool(np.any(U[k] != u_task)), worst, True, True, float(cert.value.evaluate(x)) >= 0, u_task)


# -- continuous-time barrier baselines -----------------------------------------


ANALYTIC_OMEGA_COEF = math.sqrt(3.0) / (2.0 * (19.0 - 10.0 * math.sqrt(3.0)))


@dataclass(frozen=True)
class ContinuousBarrier:
    kind: str = "analytic"
    alpha_rate: float = 1.0

    def __post_init__(self):
        if self.kind not in ("analytic", "heuristic"):
            raise ConfigurationError(f"unknown barrier kind {self.kind!r}")
        if not self.alpha_rate > 0:
            raise ConfigurationError("alpha rate must be positive")

    def evaluate(self, theta, omega):
        if self.kind == "heuristic":
            return 1.0 - 16.0 * theta**2 - 8.0 * theta * omega - 4.0 * omega**2
        return np.cos(theta) - 0.5 - ANALYTIC_OMEGA_COEF * omega**2

    def gradient(self, theta, omega):
        if self.kind == "heuristic":
            return -32.0 * theta - 8.0 * omega, -8.0 * theta - 8.0 * omega
        return -np.sin(theta), -2.0 * ANALYTIC_OMEGA_COEF * omega

    def class_k(self, h):
        # alpha is linear with slope alpha_rate; also applied to negative h for diagnostics
        return self.alpha_rate * h

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.evaluate(x[..., 0], x[..., 1])

    def as_field(self, grid):
        from .core import ScalarField
        return ScalarField.from_function(grid, self, label=f"h_{self.kind[:3]}", alpha_rate=self.alpha_rate)


def h_heu(theta, omega):
    return ContinuousBarrier("heuristic").evaluate(theta, omega)


def h_ana(theta, omega):
    return ContinuousBarrier("analytic").evaluate(theta, omega)


def worst_hdot_terms(x, barrier: ContinuousBarrier, config: PendulumConfig = PendulumConfig()):
    """``(a, b)`` with ``min_F hdot(x, u, F) = a*u + b`` for the pendulum."""
    theta, omega = float(x[0]), float(x[1])
    h_t, h_w = barrier.gradient(theta, omega)
    a = 0.5 * h_w
    b = h_t * omega + h_w * 10.0 * math.sin(theta) - abs(h_w * math.cos(theta)) * config.dstb_bound / 2.0
    return float(a), float(b)


def ct_cbf_filter(x, u_task, barrier: ContinuousBarrier, config: PendulumConfig = PendulumConfig()) -> FilterOutput:
    """Robust continuous-time CBF filter ``min_F hdot >= -alpha(h)`` projected onto the box."""
    u_task = _vec(u_task)
    ub = config.control_bound
    ut = float(np.clip(u_task[0], -ub, ub))
    a, b = worst_hdot_terms(x, barrier, config)
    h = float(barrier(np.asarray(x, dtype=np.float64)))
    c = b + barrier.class_k(h)
    lo, hi = -ub, ub
    if a > 0:
        lo = max(lo, -c / a)
    elif a < 0:
        hi = min(hi, -c / a)
    elif c < 0:
        lo, hi = 1.0, 0.0
    if lo > hi:
        u = ub if a > 0 else -ub
        if a == 0:
            u = ut
        return FilterOutput(np.array([u]), bool(u != u_task[0]), a * u + c, False, False, True, u_task)
    u = min(max(ut, lo), hi)
    return FilterOutput(np.array([u]), bool(u != u_task[0]), a * u + c, True, False, True, u_task)


# -- task controller ----------------------------------------------------------


def pd_task_controller(x, kp: float = 32.0, kd: float = 8.0, bound: float = 20.0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.clip(-kp * x[..., 0:1] - kd * x[..., 1:2], -bound, bound)


class PDController(BaseEstimator):
    def __init__(self, kp=32.0, kd=8.0, bound=20.0):
        self.kp = kp
        self.kd = kd
        self.bound = bound

    def __call__(self, x):
        return pd_task_controller(x, self.kp, self.kd, self.bound)

    def predict(self, X):
        X = check_array(X, dtype=np.float64)
        return self(X)[:, 0]


class ZeroController:
    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.zeros(x.shape[:-1] + (1,))


# -- estimator wrappers -------------------------------------------------------


class _FilterEstimator(BaseEstimator):
    """``fit(certificate, system)`` then ``filter(x, u_task)`` / ``predict(X, U_task)``."""

    def fit(self, certificate, system):
        self.certificate_ = Certificate.of(certificate)
        self.system_ = system
        self.u_disc_ = discretize_box(system.control_box, self.control_points)
        self.d_disc_ = discretize_box(system.dstb_box, self.dstb_points)
        return self

    def __call__(self, x, u_task) -> FilterOutput:
        return self.filter(x, u_task)

    def predict(self, X, U_task):
        check_is_fitted(self, "certificate_")
        X = check_array(X, dtype=np.float64)
        U_task = np.asarray(U_task, dtype=np.float64).reshape(len(X), -1)
        return np.array([self.filter(x, u).u_exec for x, u in zip(X, U_task)])


class QCBFSafetyFilter(_FilterEstimator):
    def __init__(self, beta_kind="linear", beta_gamma=0.9, beta_rate=1.0, dt=0.01,
                 control_points=41, dstb_points=21):
        self.beta_kind = beta_kind
        self.beta_gamma = beta_gamma
        self.beta_rate = beta_rate
        self.dt = dt
        self.control_points = control_points
        self.dstb_points = dstb_points

    @property
    def beta(self) -> ClassKMap:
        if self.beta_kind == "linear":
            return ClassKMap("linear", gamma=self.beta_gamma)
        return ClassKMap("induced", rate=self.beta_rate, dt=self.dt)

    def filter(self, x, u_task) -> FilterOutput:
        check_is_fitted(self, "certificate_")
        return qcbf_filter(x, u_task, self.certificate_, self.system_, self.beta, self.u_disc_, self.d_disc_)


class LeastRestrictiveFilter(_FilterEstimator):
    def __init__(self, control_points=41, dstb_points=21):
        self.control_points = control_points
        self.dstb_points = dstb_points

    def filter(self, x, u_task) -> FilterOutput:
        check_is_fitted(self, "certificate_")
        return lrsf_filter(x, u_task, self.certificate_, self.system_, self.d_disc_, self.u_disc_)


class CTCBFFilter(BaseEstimator):
    def __init__(self, kind="analytic", alpha_rate=1.0, pendulum=None):
        self.kind = kind
        self.alpha_rate = alpha_rate
        self.pendulum = pendulum

    def fit(self, certificate=None, system=None):
        cfg = self.pendulum
        if cfg is None:
            cfg = getattr(system, "config", None) or PendulumConfig()
        self.config_ = cfg
        self.barrier_ = ContinuousBarrier(self.kind, alpha_rate=self.alpha_rate)
        return self

    def filter(self, x, u_task) -> FilterOutput:
        check_is_fitted(self, "barrier_")
        return ct_cbf_filter(x, u_task, self.barrier_, self.config_)

    __call__ = filter

    def predict(self, X, U_task):
        X = check_array(X, dtype=np.float64)
        U_task = np.asarray(U_task, dtype=np.float64).reshape(len(X), -1)
        return np.array([self.filter(x, u).u_exec for x, u in zip(X, U_task)])


class NoFilter:
    def __call__(self, x, u_task) -> FilterOutput:
        u = _vec(u_task)
        return FilterOutput(u.copy(), False, float("inf"), True, False, True, u)

    filter = __call__
