"""Adversarial actor-critic synthesis of the state-control-disturbance safety critic.

A critic ``Q(x, u, d)``, a controller actor ``pi_u(x)`` and a disturbance
actor ``pi_d(x, u)`` are trained by gradient descent-ascent on the
time-discounted safety Bellman residual, with the disturbance updated on a
faster timescale. A best-response disturbance can then be trained against a
frozen critic and a library of controller checkpoints.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .core import Box, ConfigurationError
from .nn import Mlp, RMSProp


class NumericalAbort(FloatingPointError):
    def __init__(self, message: str, payload: dict):
        super().__init__(message)
        self.payload = payload


# -- data ---------------------------------------------------------------------


@dataclass(frozen=True)
class Transition:
    x: np.ndarray
    u: np.ndarray
    d: np.ndarray
    g_next: float
    x_next: np.ndarray


@dataclass
class Batch:
    x: np.ndarray
    u: np.ndarray
    d: np.ndarray
    g_next: np.ndarray
    x_next: np.ndarray

    @classmethod
    def of(cls, transitions) -> "Batch":
        if isinstance(transitions, Batch):
            return transitions
        if isinstance(transitions, Transition):
            transitions = [transitions]
        ts = list(transitions)
        return cls(
            np.array([t.x for t in ts], dtype=np.float64),
            np.array([np.atleast_1d(t.u) for t in ts], dtype=np.float64),
            np.array([np.atleast_1d(t.d) for t in ts], dtype=np.float64),
            np.array([t.g_next for t in ts], dtype=np.float64),
            np.array([t.x_next for t in ts], dtype=np.float64),
        )

    def __len__(self):
        return len(self.g_next)


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions with seeded uniform sampling."""

    def __init__(self, capacity: int, state_dim: int, control_dim: int, dstb_dim: int):
        if capacity < 1:
            raise ConfigurationError("buffer capacity must be positive")
        self.capacity = int(capacity)
        self.x = np.zeros((capacity, state_dim))
        self.u = np.zeros((capacity, control_dim))
        self.d = np.zeros((capacity, dstb_dim))
        self.g_next = np.zeros(capacity)
        self.x_next = np.zeros((capacity, state_dim))
        self.size = 0
        self._head = 0

    def add(self, t: Transition) -> None:
        i = self._head
        self.x[i], self.u[i], self.d[i] = t.x, t.u, t.d
        self.g_next[i] = t.g_next
        self.x_next[i] = t.x_next
        self._head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __len__(self):
        return self.size

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        idx = rng.integers(0, self.size, size=n)
        return Batch(self.x[idx], self.u[idx], self.d[idx], self.g_next[idx], self.x_next[idx])


@dataclass(frozen=True)
class TrainConfig:
    gamma_init: float = 0.85
    gamma_final: float = 0.9999
    gamma_anneal_steps: int | None = None
    lr_critic: float = 1e-3
    lr_ctrl: float = 1e-4
    lr_dstb: float = 4e-4
    tau: float = 0.005
    noise_scale: float = 0.3
    batch_size: int = 128
    buffer_capacity: int = 100_000
    total_steps: int = 200_000
    eval_interval: int = 20_000
    warmup_steps: int = 1_000
    episode_horizon: int = 200
    hidden: tuple = (64, 64)
    reset_low: tuple = (-1.047, -7.0)
    reset_high: tuple = (1.047, 7.0)
    target_smoothing: bool = False
    eval_episodes: int = 20
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "reset_low", tuple(float(v) for v in self.reset_low))
        object.__setattr__(self, "reset_high", tuple(float(v) for v in self.reset_high))
        for g in (self.gamma_init, self.gamma_final):
            if not 0.0 < g < 1.0:
                raise ConfigurationError(f"gamma_env must stay in (0, 1), got {g}")
        if not self.lr_dstb > self.lr_ctrl:
            raise ConfigurationError(
                f"timescale ratio lr_dstb/lr_ctrl must exceed 1 (lr_dstb={self.lr_dstb}, lr_ctrl={self.lr_ctrl})"
            )
        if not 0.0 < self.tau <= 1.0:
            raise ConfigurationError("tau must lie in (0, 1]")
        if self.batch_size < 1 or self.total_steps < 0 or self.eval_interval < 1:
            raise ConfigurationError("batch_size and eval_interval must be positive")
        if min(self.lr_critic, self.lr_ctrl) < 0:
            raise ConfigurationError("learning rates must be nonnegative")

    @property
    def timescale_ratio(self) -> float:
        return math.inf if self.lr_ctrl == 0 else self.lr_dstb / self.lr_ctrl

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        d = dict(d or {})
        k = d.pop("timescale_ratio", None)
        if k is not None:
            if k <= 1:
                raise ConfigurationError(f"timescale ratio must exceed 1, got {k}")
            d["lr_dstb"] = k * d.get("lr_ctrl", cls.lr_ctrl)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        out["reset_low"] = list(self.reset_low)
        out["reset_high"] = list(self.reset_high)
        return out

    def gamma_at(self, step: int) -> float:
        span = self.gamma_anneal_steps
        if span is None:
            span = int(0.6 * self.total_steps)
        if span <= 0:
            return self.gamma_final
        frac = min(1.0, step / span)
        return self.gamma_init + frac * (self.gamma_final - self.gamma_init)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# -- networks -----------------------------------------------------------------


def _half_width(box: Box) -> np.ndarray:
    w = 0.5 * (box.upper - box.lower)
    return np.where(w > 0, w, 1.0)


@dataclass
class Agent:
    critic: Mlp
    target: Mlp
    ctrl: Mlp
    dstb: Mlp
    opt_critic: RMSProp = field(repr=False, default=None)
    opt_ctrl: RMSProp = field(repr=False, default=None)
    opt_dstb: RMSProp = field(repr=False, default=None)

    @classmethod
    def build(cls, system, config: TrainConfig, seed: int | None = None) -> "Agent":
        seed = config.seed if seed is None else seed
        n = system.state_dim
        m = system.control_box.dim
        k = system.dstb_box.dim
        s_scale = 0.5 * (np.array(config.reset_high) - np.array(config.reset_low))
        s_scale = np.where(s_scale > 0, s_scale, 1.0)
        u_scale = _half_width(system.control_box)
        d_scale = _half_width(system.dstb_box)
        h = list(config.hidden)
        critic = Mlp([n + m + k] + h + [1], seed * 4 + 1, None, np.concatenate([s_scale, u_scale, d_scale]))
        ctrl = Mlp([n] + h + [m], seed * 4 + 2, (system.control_box.lower, system.control_box.upper), s_scale)
        dstb = Mlp([n + m] + h + [k], seed * 4 + 3, (system.dstb_box.lower, system.dstb_box.upper),
                   np.concatenate([s_scale, u_scale]))
        agent = cls(critic, critic.copy(), ctrl, dstb)
        agent.reset_optimizers(config)
        return agent

    def reset_optimizers(self, config: TrainConfig):
        self.opt_critic = RMSProp(self.critic.n_params, config.lr_critic)
        self.opt_ctrl = RMSProp(self.ctrl.n_params, config.lr_ctrl)
        self.opt_dstb = RMSProp(self.dstb.n_params, config.lr_dstb)


class GridQCritic:
    """Table-lookup critic ``Q(x, u, d) = min{g(x), V(f(x, u, d))}`` over a grid field.

    Duck-types the :class:`Mlp` interface (no trainable parameters); input
    gradients are central differences, adequate for the frozen-critic phase.
    """

    def __init__(self, V, system, fd_step: float = 1e-6):
        from .isaacs import Certificate

        self.V = Certificate.of(V)
        self.system = system
        self.fd_step = fd_step
        self.n_params = 0
        self.params = np.zeros(0)
        self.n = system.state_dim
        self.m = system.control_box.dim

    def forward(self, X, params=None, keep=False):
        X = np.asarray(X, dtype=np.float64)
        x, u, d = X[:, :self.n], X[:, self.n:self.n + self.m], X[:, self.n + self.m:]
        u = self.system.control_box.clip(u)
        d = self.system.dstb_box.clip(d)
        q = np.minimum(self.system.margin(x), self.V.lift.evaluate(self.system.step(x, u, d)))[:, None]
        return (q, X) if keep else q

    __call__ = forward

    def backward(self, cache, d_out, params=None):
        X = cache
        grad = np.zeros_like(X)
        for j in range(X.shape[1]):
            e = np.zeros(X.shape[1])
            e[j] = self.fd_step
            grad[:, j] = (self.forward(X + e)[:, 0] - self.forward(X - e)[:, 0]) / (2 * self.fd_step)
        return np.zeros(0), grad * np.asarray(d_out)

    def copy(self):
        return self

    def architecture(self) -> dict:
        cfg = getattr(self.system, "config", None)
        return {"kind": "grid_q", "grid": self.V.grid.to_dict(),
                "system": cfg.to_dict() if cfg is not None else {}}


def _net_from_architecture(arch: dict, params):
    if arch.get("kind") == "grid_q":
        from .core import Grid, ScalarField
        from .dynamics import InvertedPendulum, PendulumConfig

        grid = Grid.from_dict(arch["grid"])
        V = ScalarField(grid, np.asarray(params).reshape(grid.shape), label="grid_q")
        return GridQCritic(V, InvertedPendulum(PendulumConfig.from_dict(arch["system"])))
    return Mlp.from_architecture(arch, params)


def q_eval(critic: Mlp, x, u, d) -> np.ndarray:
    return critic(np.concatenate([x, u, d], axis=-1))[..., 0]


def critic_target(t, target_critic: Mlp, ctrl_actor: Mlp, dstb_actor: Mlp, gamma_env: float, smoothing=None):
    """``(1 - gamma) g' + gamma min{g', Q'(x', u', d')}`` with ``u' = pi_u(x')``, ``d' = pi_d(x', u')``.

    ``smoothing=(scale, box, rng)`` perturbs ``u'`` with clipped Gaussian noise.
    """
    if not 0.0 < gamma_env < 1.0:
        raise ConfigurationError("gamma_env must lie in (0, 1)")
    single = isinstance(t, Transition)
    b = Batch.of(t)
    u2 = ctrl_actor(b.x_next)
    if smoothing is not None:
        scale, box, rng = smoothing
        u2 = _noisy(u2, box, scale, rng)
    d2 = dstb_actor(np.concatenate([b.x_next, u2], axis=-1))
    q2 = q_eval(target_critic, b.x_next, u2, d2)
    y = (1.0 - gamma_env) * b.g_next + gamma_env * np.minimum(b.g_next, q2)
    return float(y[0]) if single else y


def critic_loss(batch, critic: Mlp, target_critic: Mlp, actors, gamma_env: float, grad: bool = False,
                smoothing=None):
    """Mean squared Bellman residual; the target is held constant.

    With ``grad=True`` also returns the gradient w.r.t. the critic parameters.
    """
    b = Batch.of(batch)
    if len(b) == 0:
        raise ConfigurationError("empty batch")
    ctrl_actor, dstb_actor = actors
    y = critic_target(b, target_critic, ctrl_actor, dstb_actor, gamma_env, smoothing)
    q, cache = critic(np.concatenate([b.x, b.u, b.d], axis=-1), keep=True)
    r = q[:, 0] - y
    loss = float(np.mean(r * r))
    if not grad:
        return loss
    g, _ = critic.backward(cache, (2.0 / len(b)) * r[:, None])
    return loss, g


def dstb_objective(critic: Mlp, dstb: Mlp, x, u, grad: bool = False, params=None):
    """Mean critic value at the disturbance actor's output (to be minimized)."""
    xu = np.concatenate([x, u], axis=-1)
    d, dcache = dstb.forward(xu, params=params, keep=True)
    q, qcache = critic(np.concatenate([x, u, d], axis=-1), keep=True)
    val = float(q.mean())
    if not grad:
        return val
    _, dq_din = critic.backward(qcache, np.full_like(q, 1.0 / len(q)))
    n, m = x.shape[1], u.shape[1]
    g, _ = dstb.backward(dcache, dq_din[:, n + m:], params=params)
    return val, g


def ctrl_objective(critic: Mlp, ctrl: Mlp, dstb: Mlp, x, grad: bool = False):
    """Mean ``Q(x, pi_u(x), pi_d(x, pi_u(x)))`` (to be maximized)."""
    u, ucache = ctrl.forward(x, keep=True)
    xu = np.concatenate([x, u], axis=-1)
    d, dcache = dstb.forward(xu, keep=True)
    q, qcache = critic(np.concatenate([x, u, d], axis=-1), keep=True)
    val = float(q.mean())
    if not grad:
        return val
    _, dq_din = critic.backward(qcache, np.full_like(q, 1.0 / len(q)))
    n, m = x.shape[1], u.shape[1]
    _, dd_dxu = dstb.backward(dcache, dq_din[:, n + m:])
    du = dq_din[:, n:n + m] + dd_dxu[:, n:]
    g, _ = ctrl.backward(ucache, du)
    return val, g


def _check_finite(name: str, value, step: int, extra: dict):
    if not np.all(np.isfinite(value)):
        payload = {"step": step, "quantity": name}
        payload.update(extra)
        raise NumericalAbort(f"non-finite {name} at step {step}", payload)


def gda_step(agent: Agent, buffer: ReplayBuffer, config: TrainConfig, rng: np.random.Generator,
             gamma_env: float, step: int = 0, control_box: Box | None = None) -> dict:
    """Critic descent, faster disturbance descent, controller ascent, then target update."""
    if len(buffer) < config.batch_size:
        raise ConfigurationError("buffer holds fewer transitions than one batch")
    batch = buffer.sample(config.batch_size, rng)
    smoothing = None
    if config.target_smoothing and control_box is not None:
        smoothing = (config.noise_scale, control_box, rng)
    loss, g_c = critic_loss(batch, agent.critic, agent.target, (agent.ctrl, agent.dstb), gamma_env, grad=True,
                            smoothing=smoothing)
    _check_finite("critic loss", loss, step, {})
    _check_finite("critic gradient", g_c, step, {"loss": loss})
    agent.opt_critic.step(agent.critic.params, g_c)

    d_val, g_d = dstb_objective(agent.critic, agent.dstb, batch.x, batch.u, grad=True)
    _check_finite("disturbance gradient", g_d, step, {"loss": loss})
    agent.opt_dstb.step(agent.dstb.params, g_d)

    u_val, g_u = ctrl_objective(agent.critic, agent.ctrl, agent.dstb, batch.x, grad=True)
    _check_finite("controller gradient", g_u, step, {"loss": loss})
    agent.opt_ctrl.step(agent.ctrl.params, -g_u)

    agent.target.params *= 1.0 - config.tau
    agent.target.params += config.tau * agent.critic.params
    if config.tau == 1.0:
        agent.target.params[:] = agent.critic.params
    return {"critic_loss": loss, "dstb_value": d_val, "mean_q": u_val}


# -- training loops -----------------------------------------------------------


def _noisy(action, box: Box, scale: float, rng) -> np.ndarray:
    if scale <= 0:
        return action
    noise = rng.normal(0.0, scale, size=action.shape) * _half_width(box)
    return box.clip(action + noise)


@dataclass
class Checkpoint:
    step: int
    seed: int
    critic: Mlp
    ctrl: Mlp
    dstb: Mlp
    config_hash: str = ""
    metrics: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        nets = {"critic": self.critic, "ctrl": self.ctrl, "dstb": self.dstb}
        header = {"step": self.step, "seed": self.seed, "config_hash": self.config_hash,
                  "metrics": self.metrics, "networks": {}, "blob": path.with_suffix(".bin").name}
        offset = 0
        chunks = []
        for name, net in nets.items():
            if net is None:
                continue
            count = net.V.grid.size if isinstance(net, GridQCritic) else net.n_params
            header["networks"][name] = {"architecture": net.architecture(), "offset": offset, "count": count}
            offset += count
            chunks.append(net.V.lift.values.ravel() if isinstance(net, GridQCritic) else net.params)
        path.with_suffix(".bin").write_bytes(np.concatenate(chunks).astype("<f8").tobytes())
        path.write_text(json.dumps(header, indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        try:
            header = json.loads(path.read_text())
            blob = np.frombuffer((path.parent / header["blob"]).read_bytes(), dtype="<f8").astype(np.float64)
            nets = {}
            for name, spec in header["networks"].items():
                p = blob[spec["offset"]:spec["offset"] + spec["count"]]
                nets[name] = _net_from_architecture(spec["architecture"], p)
        except (OSError, KeyError, ValueError, TypeError) as exc:
            raise ConfigurationError(f"malformed checkpoint {path}: {exc}") from exc
        return cls(header["step"], header["seed"], nets.get("critic"), nets.get("ctrl"), nets.get("dstb"),
                   header.get("config_hash", ""), header.get("metrics", {}))


DATA_DIR = Path(__file__).parent / "data"


def shipped_critics() -> list[Path]:
    """Final checkpoints of the three canonical pendulum training seeds."""
    return sorted(DATA_DIR.glob("library/checkpoint_seed*_step00200000.json"))


def shipped_library() -> list[Path]:
    """Controller library: three stages of each canonical training seed."""
    return sorted(DATA_DIR.glob("library/checkpoint_seed*.json"))


def shipped_best_response() -> Path:
    """Best-response disturbance trained against the seed-0 critic and :func:`shipped_library`."""
    return DATA_DIR / "best_response.json"


def evaluate_safe_rate(system, ctrl: Mlp, dstb: Mlp, config: TrainConfig, rng) -> float:
    lo, hi = np.array(config.reset_low), np.array(config.reset_high)
    x = rng.uniform(lo, hi, size=(config.eval_episodes, system.state_dim))
    alive = system.margin(x) >= 0
    for _ in range(config.episode_horizon):
        u = ctrl(x)
        d = dstb(np.concatenate([x, u], axis=-1))
        x = system.step(x, u, d)
        alive &= system.margin(x) >= 0
    return float(alive.mean())


def train_isaacs(system, config: TrainConfig, out_dir: str | Path | None = None, log=None) -> list[Checkpoint]:
    """Episodic adversarial training; returns a checkpoint every ``eval_interval`` steps."""
    rng = np.random.default_rng(config.seed)
    agent = Agent.build(system, config)
    buf = ReplayBuffer(config.buffer_capacity, system.state_dim, system.control_box.dim, system.dstb_box.dim)
    lo, hi = np.array(config.reset_low), np.array(config.reset_high)
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "train_log.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "critic_loss", "mean_q", "eval_safe_rate"])
    checkpoints = []
    x = rng.uniform(lo, hi)
    t_ep = 0
    recent = []
    try:
        for step in range(1, config.total_steps + 1):
            u = _noisy(agent.ctrl(x[None])[0], system.control_box, config.noise_scale, rng)
            d = _noisy(agent.dstb(np.concatenate([x, u])[None])[0], system.dstb_box, config.noise_scale, rng)
            x_next = system.step(x, u, d)
            g_next = float(system.margin(x_next))
            buf.add(Transition(x, u, d, g_next, x_next))
            t_ep += 1
            if g_next < 0 or t_ep >= config.episode_horizon:
                x = rng.uniform(lo, hi)
                t_ep = 0
            else:
                x = x_next
            if len(buf) >= max(config.batch_size, config.warmup_steps):
                stats = gda_step(agent, buf, config, rng, config.gamma_at(step), step, system.control_box)
                recent.append((stats["critic_loss"], stats["mean_q"]))
            if step % config.eval_interval == 0 or step == config.total_steps:
                safe = evaluate_safe_rate(system, agent.ctrl, agent.dstb, config, rng)
                # None until the first gradient step (warm-up)
                loss = float(np.mean([r[0] for r in recent])) if recent else None
                mq = float(np.mean([r[1] for r in recent])) if recent else None
                recent = []
                ck = Checkpoint(step, config.seed, agent.critic.copy(), agent.ctrl.copy(), agent.dstb.copy(),
                                config.digest(), {"critic_loss": loss, "mean_q": mq, "eval_safe_rate": safe,
                                                  "gamma_env": config.gamma_at(step)})
                checkpoints.append(ck)
                if writer is not None:
                    writer.writerow([step, "" if loss is None else repr(loss), "" if mq is None else repr(mq),
                                     repr(safe)])
                    fh.flush()
                    ck.save(out / f"checkpoint_seed{config.seed}_step{step:08d}.json")
                if log is not None:
                    log(step, ck.metrics)
    finally:
        if writer is not None:
            fh.close()
    return checkpoints


@dataclass(frozen=True)
class BestResponseConfig:
    steps: int = 20_000
    batch_size: int = 128
    lr: float = 1e-3
    noise_scale: float = 0.3
    episode_horizon: int = 200
    buffer_capacity: int = 50_000
    warmup_steps: int = 1_000
    hidden: tuple = (64, 64)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict | None) -> "BestResponseConfig":
        d = dict(d or {})
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


def train_best_response(critic: Mlp, policy_library, system, config: BestResponseConfig,
                        reset_low=(-1.047, -7.0), reset_high=(1.047, 7.0)) -> Mlp:
    """Fit a fresh ``pi_d(x, u)`` minimizing the frozen critic on library rollouts."""
    library = list(policy_library)
    if not library:
        raise ConfigurationError("best-response training needs a nonempty policy library")
    rng = np.random.default_rng(config.seed)
    n, m, k = system.state_dim, system.control_box.dim, system.dstb_box.dim
    s_scale = 0.5 * (np.array(reset_high) - np.array(reset_low))
    dstb = Mlp([n + m] + list(config.hidden) + [k], config.seed * 4 + 3,
               (system.dstb_box.lower, system.dstb_box.upper),
               np.concatenate([s_scale, _half_width(system.control_box)]))
    opt = RMSProp(dstb.n_params, config.lr)
    xs = np.zeros((config.buffer_capacity, n))
    us = np.zeros((config.buffer_capacity, m))
    size = head = 0
    lo, hi = np.array(reset_low), np.array(reset_high)
    x = rng.uniform(lo, hi)
    policy = library[rng.integers(len(library))]
    t_ep = 0
    for step in range(1, config.steps + 1):
        u = _noisy(np.atleast_1d(policy(x[None])[0]), system.control_box, config.noise_scale, rng)
        d = dstb(np.concatenate([x, u])[None])[0]
        xs[head], us[head] = x, u
        head = (head + 1) % config.buffer_capacity
        size = min(size + 1, config.buffer_capacity)
        x = system.step(x, u, d)
        t_ep += 1
        if system.margin(x) < 0 or t_ep >= config.episode_horizon:
            x = rng.uniform(lo, hi)
            policy = library[rng.integers(len(library))]
            t_ep = 0
        if size >= max(config.batch_size, config.warmup_steps):
            idx = rng.integers(0, size, size=config.batch_size)
            _, g = dstb_objective(critic, dstb, xs[idx], us[idx], grad=True)
            _check_finite("best-response gradient", g, step, {})
            opt.step(dstb.params, g)
    return dstb


def library_rollout_pairs(system, library, dstb: Mlp, n: int, seed: int, noise_scale: float = 0.3,
                          horizon: int = 200, reset_low=(-1.047, -7.0), reset_high=(1.047, 7.0)):
    """``n`` (x, u) pairs visited by library controllers playing against ``dstb``."""
    rng = np.random.default_rng(seed)
    lo, hi = np.array(reset_low), np.array(reset_high)
    xs, us = [], []
    x = rng.uniform(lo, hi)
    policy = library[rng.integers(len(library))]
    t_ep = 0
    while len(xs) < n:
        u = _noisy(np.atleast_1d(policy(x[None])[0]), system.control_box, noise_scale, rng)
        xs.append(x.copy())
        us.append(u.copy())
        x = system.step(x, u, dstb(np.concatenate([x, u])[None])[0])
        t_ep += 1
        if system.margin(x) < 0 or t_ep >= horizon:
            x = rng.uniform(lo, hi)
            policy = library[rng.integers(len(library))]
            t_ep = 0
    return np.array(xs), np.array(us)


def local_optimality_probe(dstb_actor: Mlp, critic: Mlp, samples, rho: float, n_perturbations: int,
                           delta: float = 1e-3, seed: int = 0) -> dict:
    """Fraction of (sample, perturbation) pairs where a parameter perturbation within
    radius ``rho`` lowers the critic value by more than ``delta``."""
    x, u = samples
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    rng = np.random.default_rng(seed)
    base = q_eval(critic, x, u, dstb_actor(np.concatenate([x, u], axis=-1)))
    if rho <= 0:
        return {"rho": rho, "violation_fraction": 0.0, "n_pairs": len(x) * n_perturbations,
                "max_drop": 0.0, "delta": delta}
    p = dstb_actor.n_params
    violations = 0
    max_drop = 0.0
    for _ in range(n_perturbations):
        direction = rng.normal(size=p)
        direction /= np.linalg.norm(direction)
        radius = rho * rng.uniform() ** (1.0 / p)
        params = dstb_actor.params + radius * direction
        d = dstb_actor.forward(np.concatenate([x, u], axis=-1), params=params)
        drop = base - q_eval(critic, x, u, d)
        violations += int(np.sum(drop > delta))
        max_drop = max(max_drop, float(drop.max()))
    return {"rho": rho, "violation_fraction": violations / (len(x) * n_perturbations),
            "n_pairs": len(x) * n_perturbations, "max_drop": max_drop, "delta": delta}


# -- evaluation against a grid value ------------------------------------------


def neural_value(critic: Mlp, system, states, u_disc, d_disc, chunk: int = 256) -> np.ndarray:
    """``min{g(x), max_u min_d Q(x, u, d)}`` over the discretized boxes."""
    states = np.asarray(states, dtype=np.float64)
    U = np.asarray(u_disc, dtype=np.float64).reshape(-1, system.control_box.dim)
    D = np.asarray(d_disc, dtype=np.float64).reshape(-1, system.dstb_box.dim)
    nu, nd = len(U), len(D)
    out = np.empty(len(states))
    ud = np.concatenate([np.repeat(U, nd, axis=0), np.tile(D, (nu, 1))], axis=1)
    for s in range(0, len(states), chunk):
        xs = states[s:s + chunk]
        inp = np.concatenate([np.repeat(xs, nu * nd, axis=0), np.tile(ud, (len(xs), 1))], axis=1)
        q = critic(inp)[:, 0].reshape(len(xs), nu, nd)
        out[s:s + chunk] = q.min(axis=2).max(axis=1)
    return np.minimum(system.margin(states), out)


def sign_agreement(critic: Mlp, system, V, u_disc, d_disc, threshold: float = 0.05) -> dict:
    nodes = V.grid.nodes()
    mask = np.abs(V.values) > threshold
    vn = neural_value(critic, system, nodes[mask], u_disc, d_disc)
    agree = (vn >= 0) == (V.values[mask] >= 0)
    return {"sign_agreement": float(agree.mean()), "n_nodes": int(mask.sum()),
            "mae": float(np.mean(np.abs(vn - V.values[mask])))}


def grid_argmin_match(dstb: Mlp, V, system, xs, us, d_disc, value_tol: float = 1e-3) -> dict:
    """Compare ``dstb(x, u)`` with the grid argmin of ``V(step(x, u, d))`` over ``d_disc``.

    A pair matches when the network's disturbance is within one disturbance
    grid spacing of the argmin, or attains the grid minimum within ``value_tol``.
    """
    from .isaacs import Certificate

    field_ = Certificate.of(V).lift
    D = np.asarray(d_disc, dtype=np.float64).reshape(-1, system.dstb_box.dim)
    spacing = np.min(np.diff(np.unique(D[:, 0]))) if len(D) > 1 else 0.0
    d_nn = dstb(np.concatenate([xs, us], axis=-1))
    matches = 0
    for x, u, dn in zip(xs, us, d_nn):
        vals = field_.evaluate(system.step(x[None], u[None], D))
        j = int(np.argmin(vals))
        v_nn = float(field_.evaluate(system.step(x, u, dn)))
        if np.all(np.abs(dn - D[j]) <= spacing + 1e-12) or v_nn <= vals[j] + value_tol:
            matches += 1
    return {"match_fraction": matches / len(xs), "n": len(xs)}


class AdversarialSafetyLearner(BaseEstimator):
    """Estimator wrapper around :func:`train_isaacs`; ``predict`` returns the neural value."""

    def __init__(self, total_steps=200_000, batch_size=128, buffer_capacity=100_000, tau=0.005,
                 lr_critic=1e-3, lr_ctrl=1e-4, lr_dstb=4e-4, noise_scale=0.3, hidden=(64, 64),
                 gamma_init=0.85, gamma_final=0.9999, eval_interval=20_000, seed=0,
                 control_points=41, dstb_points=21):
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.buffer_capacity = buffer_capacity
        self.tau = tau
        self.lr_critic = lr_critic
        self.lr_ctrl = lr_ctrl
        self.lr_dstb = lr_dstb
        self.noise_scale = noise_scale
        self.hidden = hidden
        self.gamma_init = gamma_init
        self.gamma_final = gamma_final
        self.eval_interval = eval_interval
        self.seed = seed
        self.control_points = control_points
        self.dstb_points = dstb_points

    def train_config(self) -> TrainConfig:
        return TrainConfig(gamma_init=self.gamma_init, gamma_final=self.gamma_final, lr_critic=self.lr_critic,
                           lr_ctrl=self.lr_ctrl, lr_dstb=self.lr_dstb, tau=self.tau,
                           noise_scale=self.noise_scale, batch_size=self.batch_size,
                           buffer_capacity=self.buffer_capacity, total_steps=self.total_steps,
                           eval_interval=self.eval_interval, hidden=tuple(self.hidden), seed=self.seed)

    def fit(self, system, y=None):
        self.system_ = system
        self.checkpoints_ = train_isaacs(system, self.train_config())
        self.critic_ = self.checkpoints_[-1].critic
        return self

    def predict(self, X):
        from sklearn.utils.validation import check_array, check_is_fitted

        from .isaacs import discretize_box

        check_is_fitted(self, "critic_")
        X = check_array(X, dtype=np.float64)
        return neural_value(self.critic_, self.system_, X,
                            discretize_box(self.system_.control_box, self.control_points),
                            discretize_box(self.system_.dstb_box, self.dstb_points))
