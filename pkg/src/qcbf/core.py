"""Grids, scalar fields, boxes and class-K maps shared by every other module."""

from __future__ import annotations

import itertools
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np


class ContractViolation(ValueError):
    """A caller broke an operation's precondition (bad shape, out-of-box input)."""


class ConfigurationError(ValueError):
    """Invalid configuration values."""


INLINE_VALUE_LIMIT = 65536
_SNAP = 1e-9


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __init__(self, lower, upper):
        lo = np.atleast_1d(np.asarray(lower, dtype=np.float64)).copy()
        hi = np.atleast_1d(np.asarray(upper, dtype=np.float64)).copy()
        if lo.ndim != 1 or lo.shape != hi.shape or lo.size < 1:
            raise ConfigurationError("box bounds must be 1-D vectors of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ConfigurationError("box bounds must be finite")
        if np.any(lo > hi):
            raise ConfigurationError(f"box lower {lo} exceeds upper {hi}")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, bound: float, dim: int = 1) -> "Box":
        return cls([-bound] * dim, [bound] * dim)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def degenerate(self) -> np.ndarray:
        return self.lower == self.upper

    def contains(self, v, atol: float = 0.0) -> bool:
        v = np.asarray(v, dtype=np.float64)
        return bool(np.all(v >= self.lower - atol) and np.all(v <= self.upper + atol))

    def clip(self, v) -> np.ndarray:
        return np.clip(np.asarray(v, dtype=np.float64), self.lower, self.upper)

    def discretize(self, points: int | Sequence[int]) -> np.ndarray:
        """Tensor-product grid of the box as an ``(M, dim)`` array, row-major.

        Degenerate dimensions contribute a single point regardless of ``points``.
        """
        counts = np.broadcast_to(np.asarray(points, dtype=int), (self.dim,))
        axes = []
        for lo, hi, n in zip(self.lower, self.upper, counts):
            if lo == hi:
                axes.append(np.array([lo]))
            else:
                if n < 2:
                    raise ConfigurationError("need >= 2 points on a non-degenerate box axis")
                axes.append(np.linspace(lo, hi, int(n)))
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}


@dataclass(frozen=True)
class Grid:
    """Uniform rectangular grid; nodes ordered row-major (last axis fastest)."""

    mins: tuple[float, ...]
    maxs: tuple[float, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        mins = tuple(float(v) for v in self.mins)
        maxs = tuple(float(v) for v in self.maxs)
        counts = tuple(int(c) for c in self.counts)
        if not (len(mins) == len(maxs) == len(counts) >= 1):
            raise ConfigurationError("grid mins/maxs/counts must have equal nonzero length")
        for lo, hi, n in zip(mins, maxs, counts):
            if not lo < hi:
                raise ConfigurationError(f"grid axis needs min < max, got [{lo}, {hi}]")
            if n < 2:
                raise ConfigurationError(f"grid axis needs count >= 2, got {n}")
        object.__setattr__(self, "mins", mins)
        object.__setattr__(self, "maxs", maxs)
        object.__setattr__(self, "counts", counts)

    @property
    def ndim(self) -> int:
        return len(self.counts)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.counts

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def spacing(self) -> np.ndarray:
        return (np.array(self.maxs) - np.array(self.mins)) / (np.array(self.counts) - 1)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, n) for lo, hi, n in zip(self.mins, self.maxs, self.counts)]

    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def refine(self, factor: int = 2) -> "Grid":
        return Grid(self.mins, self.maxs, tuple((n - 1) * factor + 1 for n in self.counts))

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.all((x >= np.array(self.mins)) & (x <= np.array(self.maxs)), axis=-1)

    def to_dict(self) -> dict:
        return {"min": list(self.mins), "max": list(self.maxs), "count": list(self.counts)}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(tuple(d["min"]), tuple(d["max"]), tuple(d["count"]))


def cell_coordinates(grid: Grid, x: np.ndarray):
    """Lower-corner cell indices, fractional offsets and clamp mask for points ``x``.

    Points within ``_SNAP`` of a node are snapped onto it so nodal queries are exact.
    """
    x = np.asarray(x, dtype=np.float64)
    mins = np.array(grid.mins)
    maxs = np.array(grid.maxs)
    counts = np.array(grid.counts)
    clamped = np.any((x < mins) | (x > maxs), axis=-1)
    xc = np.clip(x, mins, maxs)
    pos = (xc - mins) / grid.spacing
    near = np.rint(pos)
    pos = np.where(np.abs(pos - near) <= _SNAP, near, pos)
    base = np.clip(np.floor(pos), 0, counts - 2).astype(np.int64)
    frac = pos - base
    return base, frac, clamped


@dataclass(frozen=True, eq=False)
class ScalarField:
    """A real function sampled on a :class:`Grid` (values in row-major node order)."""

    grid: Grid
    values: np.ndarray
    label: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64).ravel()
        if vals.size != self.grid.size:
            raise ContractViolation(
                f"field has {vals.size} values for a grid of {self.grid.size} nodes"
            )
        if not np.all(np.isfinite(vals)):
            raise ContractViolation("field values must be finite")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_function(cls, grid: Grid, fn, label: str = "", **metadata) -> "ScalarField":
        return cls(grid, np.asarray(fn(grid.nodes()), dtype=np.float64), label, dict(metadata))

    def as_array(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)

    def evaluate(self, x, return_clamped: bool = False):
        """Batched multilinear interpolation; ``x`` has shape ``(..., ndim)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1:] != (self.grid.ndim,):
            raise ContractViolation(
                f"state dimension {x.shape[-1:]} does not match grid dimension {self.grid.ndim}"
            )
        lead = x.shape[:-1]
        pts = x.reshape(-1, self.grid.ndim)
        base, frac, clamped = cell_coordinates(self.grid, pts)
        strides = np.array(
            [int(np.prod(self.grid.counts[i + 1:])) for i in range(self.grid.ndim)], dtype=np.int64
        )
        flat0 = base @ strides
        corners = np.array(list(itertools.product((0, 1), repeat=self.grid.ndim)))
        vals = self.values[flat0[:, None] + corners @ strides]
        for k in range(self.grid.ndim - 1, -1, -1):
            t = frac[:, k:k + 1]
            lo, hi = vals[:, 0::2], vals[:, 1::2]
            vals = np.where(t == 1.0, hi, lo + t * (hi - lo))
        out = vals[:, 0].reshape(lead)
        if return_clamped:
            return out, clamped.reshape(lead)
        return out

    __call__ = evaluate

    # -- persistence -------------------------------------------------------

    def header(self) -> dict:
        return {
            "dimension": self.grid.ndim,
            "grid": self.grid.to_dict(),
            "label": self.label,
            "parameters": self.metadata,
            "created": self.metadata.get("created") or creation_stamp(),
        }

    def save(self, path: str | Path) -> Path:
        """Write ``<path>`` (JSON header) and, for large fields, ``<path>.bin``."""
        path = Path(path)
        head = self.header()
        if self.grid.size <= INLINE_VALUE_LIMIT:
            head["values"] = self.values.tolist()
        else:
            blob = path.with_name(path.name + ".bin")
            blob.write_bytes(self.values.astype("<f8").tobytes())
            head["values_file"] = blob.name
        path.write_text(json.dumps(head, indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ScalarField":
        path = Path(path)
        head = json.loads(path.read_text())
        grid = Grid.from_dict(head["grid"])
        if "values" in head:
            values = np.array(head["values"], dtype=np.float64)
        else:
            raw = (path.parent / head["values_file"]).read_bytes()
            values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        meta = dict(head.get("parameters", {}))
        meta.setdefault("created", head.get("created"))
        return cls(grid, values, head.get("label", ""), meta)


def creation_stamp() -> str:
    """UTC timestamp, pinned by ``SOURCE_DATE_EPOCH`` when that is set."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = time.gmtime(int(epoch)) if epoch else time.gmtime()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", t)


def interpolate(field: ScalarField, x) -> float:
    """Value of ``field`` at a single state ``x`` (clamped to the grid hull)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (field.grid.ndim,):
        raise ContractViolation(f"expected a state of shape ({field.grid.ndim},), got {x.shape}")
    return float(field.evaluate(x))


def superlevel_mask(field: ScalarField, level: float = 0.0) -> np.ndarray:
    return field.values >= level


@dataclass(frozen=True)
class ClassKMap:
    """One-step class-K map used as the decay bound on the certificate.

    ``kind="linear"`` is ``r -> gamma * r``. ``kind="induced"`` is the flow of
    ``dy/dt = -rate * y`` over ``dt``, integrated with fixed-step RK4.
    """

    kind: str = "linear"
    gamma: float = 0.9
    rate: float = 1.0
    dt: float = 0.01
    substeps: int = 20

    def __post_init__(self):
        if self.kind == "linear":
            if not 0.0 < self.gamma <= 1.0:
                raise ConfigurationError(f"linear class-K slope must lie in (0, 1], got {self.gamma}")
        elif self.kind == "induced":
            if not self.rate > 0 or not self.dt > 0:
                raise ConfigurationError("induced class-K map needs rate > 0 and dt > 0")
            if self.substeps < 20:
                raise ConfigurationError("induced class-K map needs >= 20 RK4 substeps")
        else:
            raise ConfigurationError(f"unknown class-K kind {self.kind!r}")

    @classmethod
    def from_dict(cls, d: dict | None) -> "ClassKMap":
        return cls(**(d or {}))

    def to_dict(self) -> dict:
        if self.kind == "linear":
            return {"kind": "linear", "gamma": self.gamma}
        return {"kind": "induced", "rate": self.rate, "dt": self.dt, "substeps": self.substeps}

    def alpha(self, y):
        return self.rate * y

    def __call__(self, r):
        if self.kind == "linear":
            return self.gamma * r
        y = np.asarray(r, dtype=np.float64)
        h = self.dt / self.substeps
        for _ in range(self.substeps):
            k1 = -self.alpha(y)
            k2 = -self.alpha(y + 0.5 * h * k1)
            k3 = -self.alpha(y + 0.5 * h * k2)
            k4 = -self.alpha(y + h * k3)
            y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        return y if y.ndim else float(y)


def apply_classk(kmap: ClassKMap, r) -> float:
    return kmap(r)


def finite_or_raise(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite {what}: {value}")
    return value


def json_default(obj: Any):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
