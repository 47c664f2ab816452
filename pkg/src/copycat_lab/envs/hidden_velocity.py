"""HiddenVelocity: reference tracking with a damped spring chain, positions only.

State per episode: positions ``q`` and velocities ``v`` of ``dim`` coupled
masses; the agent applies bounded forces ``a`` in [-1, 1]^dim.  The target is
a smooth multi-harmonic reference drawn per episode.  Observations contain
the current positions and the reference with its first two derivatives
(the command signal is known), never the plant velocities.
Random velocity kicks, drawn once at reset, knock the plant off the
reference so that the hidden velocity matters.  Each step pays ``alive_bonus`` minus the squared tracking error; the episode
ends early with status ``fall`` once any coordinate strays more than
``fall_error`` from the reference, and with ``success`` at the horizon.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

import numpy as np


class TerminalStepError(RuntimeError):
    pass


@dataclass(frozen=True)
class HiddenVelocityConfig:
    dim: int = 2
    spring: float = 1.0
    coupling: float = 0.5
    damping: float = 0.4
    gain: float = 4.0
    dt: float = 0.05
    horizon: int = 200
    harmonics: int = 3
    ref_amplitude: float = 0.6
    ref_freq: tuple[float, float] = (0.2, 0.8)  # Hz
    kp: float = 6.0
    kd: float = 3.0
    speed_scale: float = 3.0
    kick_prob: float = 0.03       # per step and coordinate
    kick_scale: float = 1.0       # kick size, uniform in [-kick_scale, kick_scale]
    alive_bonus: float = 1.0
    fall_error: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ref_freq", tuple(float(f) for f in self.ref_freq))
        if self.dim < 1 or self.dt <= 0 or self.horizon < 2:
            raise ValueError("invalid HiddenVelocity config")
        if spectral_radius(self) >= 1.0:
            raise ValueError("zero-action dynamics are not stable")

    @property
    def obs_dim(self) -> int:
        return 4 * self.dim

    @property
    def action_dim(self) -> int:
        return self.dim

    def to_dict(self):
        d = asdict(self)
        d["ref_freq"] = list(self.ref_freq)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown HiddenVelocity config fields: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def stiffness(config: HiddenVelocityConfig) -> np.ndarray:
    n = config.dim
    K = np.eye(n) * (config.spring + 2 * config.coupling)
    for i in range(n - 1):
        K[i, i + 1] = K[i + 1, i] = -config.coupling
    return K


def transition_matrix(config: HiddenVelocityConfig) -> np.ndarray:
    """Zero-action map of (q, v) for one semi-implicit Euler step."""
    n, dt = config.dim, config.dt
    K = stiffness(config)
    Av = np.hstack([-dt * K, (1 - dt * config.damping) * np.eye(n)])
    Aq = np.hstack([np.eye(n), np.zeros((n, n))]) + dt * Av
    return np.vstack([Aq, Av])


def spectral_radius(config: HiddenVelocityConfig) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(transition_matrix(config)))))


@dataclass(frozen=True)
class Reference:
    amp: np.ndarray    # (harmonics, dim)
    freq: np.ndarray   # (harmonics, dim), rad/s
    phase: np.ndarray  # (harmonics, dim)

    def at(self, time: float, order: int = 0) -> np.ndarray:
        arg = self.freq * time + self.phase
        if order == 0:
            return (self.amp * np.sin(arg)).sum(axis=0)
        if order == 1:
            return (self.amp * self.freq * np.cos(arg)).sum(axis=0)
        return (-self.amp * self.freq ** 2 * np.sin(arg)).sum(axis=0)


@dataclass(frozen=True)
class HiddenVelocityState:
    q: np.ndarray
    v: np.ndarray
    t: int
    ref: Reference
    prev_action: np.ndarray
    kicks: np.ndarray = None  # (horizon, dim) velocity kicks applied before each step
    done: bool = False
    status: str | None = None


@dataclass(frozen=True)
class EpisodeOutcome:
    status: str | None
    steps: int
    ret: float


def reset(config: HiddenVelocityConfig, episode_seed: int):
    rng = np.random.default_rng([config.seed, int(episode_seed)])
    shape = (config.harmonics, config.dim)
    lo, hi = config.ref_freq
    ref = Reference(
        amp=rng.uniform(0.3, 1.0, size=shape) * config.ref_amplitude / config.harmonics,
        freq=2 * np.pi * rng.uniform(lo, hi, size=shape),
        phase=rng.uniform(0, 2 * np.pi, size=shape),
    )
    q0 = ref.at(0.0) + rng.normal(0, 0.05, size=config.dim)
    v0 = ref.at(0.0, 1)
    hit = rng.random((config.horizon, config.dim)) < config.kick_prob
    kicks = np.where(hit, rng.uniform(-config.kick_scale, config.kick_scale, hit.shape), 0.0)
    state = HiddenVelocityState(q0, v0, 0, ref, np.zeros(config.dim), kicks)
    return state, observe(state, config)


def observe(state: HiddenVelocityState, config: HiddenVelocityConfig) -> np.ndarray:
    tau = state.t * config.dt
    return np.concatenate([state.q] + [state.ref.at(tau, k) for k in range(3)])


def tracking_error(state: HiddenVelocityState, config: HiddenVelocityConfig) -> np.ndarray:
    return state.q - state.ref.at(state.t * config.dt)


def env_reward(state: HiddenVelocityState, config: HiddenVelocityConfig) -> float:
    err = tracking_error(state, config)
    return config.alive_bonus - float(err @ err)


def step(state: HiddenVelocityState, action, config: HiddenVelocityConfig):
    if state.done:
        raise TerminalStepError("step() called on a finished episode")
    a = np.clip(np.asarray(action, dtype=np.float64).reshape(config.dim), -1.0, 1.0)
    K = stiffness(config)
    v0 = state.v + state.kicks[state.t]
    acc = config.gain * a - K @ state.q - config.damping * v0
    v = v0 + config.dt * acc
    q = state.q + config.dt * v
    t = state.t + 1
    new = HiddenVelocityState(q, v, t, state.ref, a, state.kicks)
    status = None
    if np.max(np.abs(tracking_error(new, config))) > config.fall_error:
        status = "fall"
    elif t >= config.horizon:
        status = "success"
    new = HiddenVelocityState(q, v, t, state.ref, a, state.kicks, status is not None, status)
    return new, observe(new, config), EpisodeOutcome(status, t, env_reward(new, config))


def expert_action(state: HiddenVelocityState, config: HiddenVelocityConfig, prev_action=None):
    """PD tracking with model feed-forward, using the true velocity."""
    tau = state.t * config.dt
    r, dr, ddr = (state.ref.at(tau, k) for k in range(3))
    K = stiffness(config)
    ff = ddr + K @ r + config.damping * dr
    u = ff + config.kp * (r - state.q) + config.kd * (dr - state.v)
    return np.clip(u / config.gain, -1.0, 1.0)
