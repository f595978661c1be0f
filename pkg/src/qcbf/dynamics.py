"""Black-box transition contract and the disturbed inverted pendulum."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from .core import Box, ConfigurationError, ContractViolation

_BOX_ATOL = 1e-12


@runtime_checkable
class BlackBoxSystem(Protocol):
    """What solvers, filters and learners may know about a system.

    ``step`` and ``margin`` broadcast over leading batch axes: ``x`` is
    ``(..., state_dim)``, ``u`` is ``(..., control_dim)``, ``d`` is
    ``(..., dstb_dim)``.
    """

    state_dim: int
    control_box: Box
    dstb_box: Box

    def step(self, x, u, d) -> np.ndarray: ...

    def margin(self, x) -> np.ndarray: ...


@dataclass(frozen=True)
class PendulumConfig:
    dt: float = 0.01
    substeps: int = 1
    theta_failure: float = math.pi / 3
    control_bound: float = 20.0
    dstb_bound: float = 2.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError(f"dt must be positive, got {self.dt}")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ConfigurationError(f"substeps must be an integer >= 1, got {self.substeps}")
        if not self.theta_failure > 0:
            raise ConfigurationError("theta_failure must be positive")
        if self.control_bound <= 0 or self.dstb_bound < 0:
            raise ConfigurationError("control bound must be positive, disturbance bound nonnegative")

    @classmethod
    def from_dict(cls, d: dict | None) -> "PendulumConfig":
        return cls(**(d or {}))

    def to_dict(self) -> dict:
        return asdict(self)


def pendulum_derivative(theta, omega, u, F):
    """Continuous-time vector field ``(d theta/dt, d omega/dt)``."""
    return omega, 10.0 * np.sin(theta) + 0.5 * u + 0.5 * F * np.cos(theta)


def _rk4(theta, omega, u, F, h, n):
    for _ in range(n):
        k1t, k1w = pendulum_derivative(theta, omega, u, F)
        k2t, k2w = pendulum_derivative(theta + 0.5 * h * k1t, omega + 0.5 * h * k1w, u, F)
        k3t, k3w = pendulum_derivative(theta + 0.5 * h * k2t, omega + 0.5 * h * k2w, u, F)
        k4t, k4w = pendulum_derivative(theta + h * k3t, omega + h * k3w, u, F)
        theta = theta + (h / 6.0) * (k1t + 2.0 * k2t + 2.0 * k3t + k4t)
        omega = omega + (h / 6.0) * (k1w + 2.0 * k2w + 2.0 * k3w + k4w)
    return theta, omega


def pendulum_step(x, u, F, config: PendulumConfig = PendulumConfig()):
    """One zero-order-hold step of length ``config.dt`` (RK4, ``config.substeps`` stages).

    Inputs broadcast; ``x[..., 0]`` is theta and ``x[..., 1]`` is omega. The angle
    is not wrapped.
    """
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    if np.any(np.abs(u) > config.control_bound + _BOX_ATOL):
        raise ContractViolation(f"control outside [-{config.control_bound}, {config.control_bound}]")
    if np.any(np.abs(F) > config.dstb_bound + _BOX_ATOL):
        raise ContractViolation(f"disturbance outside [-{config.dstb_bound}, {config.dstb_bound}]")
    if u.ndim and u.shape[-1] == 1:
        u = u[..., 0]
    if F.ndim and F.shape[-1] == 1:
        F = F[..., 0]
    theta, omega = _rk4(x[..., 0], x[..., 1], u, F, config.dt / config.substeps, config.substeps)
    return np.stack(np.broadcast_arrays(theta, omega), axis=-1)


def pendulum_margin(x, theta_failure: float = math.pi / 3):
    x = np.asarray(x, dtype=np.float64)
    return theta_failure - np.abs(x[..., 0])


class InvertedPendulum:
    """Disturbed inverted pendulum exposed through the black-box contract."""

    state_dim = 2

    def __init__(self, config: PendulumConfig | None = None):
        self.config = config or PendulumConfig()
        self.control_box = Box.symmetric(self.config.control_bound)
        self.dstb_box = Box.symmetric(self.config.dstb_bound)

    def step(self, x, u, d):
        return pendulum_step(x, u, d, self.config)

    def margin(self, x):
        return pendulum_margin(x, self.config.theta_failure)

    def __repr__(self):
        return f"InvertedPendulum({self.config})"


class FrozenSystem:
    """Test double whose state never moves; margin is a user function."""

    def __init__(self, margin_fn, state_dim=2, control_box=None, dstb_box=None):
        self._margin = margin_fn
        self.state_dim = state_dim
        self.control_box = control_box or Box.symmetric(1.0)
        self.dstb_box = dstb_box or Box.symmetric(1.0)

    def step(self, x, u, d):
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        lead = np.broadcast_shapes(x.shape[:-1], u.shape[:-1] if u.ndim else (), d.shape[:-1] if d.ndim else ())
        return np.broadcast_to(x, lead + x.shape[-1:]).copy()

    def margin(self, x):
        return np.asarray(self._margin(np.asarray(x, dtype=np.float64)), dtype=np.float64)


def with_dstb_box(system, box: Box):
    """Shallow copy of ``system`` with a different disturbance box."""
    clone = object.__new__(type(system))
    clone.__dict__.update(system.__dict__)
    clone.dstb_box = box
    return clone
