"""BrakeTown: a 1-D road with crossing pedestrians and hidden ego speed.

The agent controls longitudinal acceleration only.  Pedestrian crossings
are sampled once per episode at reset, so replays and counterfactual
rollouts see exactly the same scene.  The observation never contains the
ego velocity; two consecutive frames recover it as (x_t - x_{t-1}) / dt.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

TRAFFIC_SCALE = {"regular": 1.0, "dense": 2.0}


class TerminalStepError(RuntimeError):
    pass


@dataclass(frozen=True)
class BrakeTownConfig:
    road_length: float = 100.0
    dt: float = 0.1
    v_max: float = 10.0
    v_cruise: float = 8.0
    a_scale: float = 4.0          # m/s^2 at |a| = 1
    view_range: float = 30.0
    brake_distance: float = 20.0
    pedestrian_rate: float = 0.04  # crossings per unit road length, regular traffic
    crossing_duration: tuple[int, int] = (20, 60)
    onset_window: tuple[float, float] = (0.3, 1.6)  # crossing onset as a fraction of cruise arrival time
    onset_jitter: int = 40         # extra uniform onset delay, steps
    traffic_level: str = "regular"
    time_limit: int = 400
    obs_mode: str = "vector"
    strip_cells: int = 32
    k_nearest: int = 2
    x_scale: float = 100.0         # x is reported as x / x_scale
    dist_scale: float = 30.0       # pedestrian offsets are reported as offset / dist_scale
    cell_half_width: float = 1.0
    stop_margin: float = 3.0
    slew_limit: float = 0.1
    kp: float = 1.0
    comfort_decel: float = 0.5     # fraction of a_scale used by the stopping profile
    kp_brake: float = 2.0          # 1/s, speed-error gain while following the stopping profile
    hold_brake: float = 0.5        # brake held while waiting at a crossing
    v_stop_eps: float = 1e-3
    collision_penalty: float = 100.0
    start_clear: float = 15.0      # no crossings before this position
    yield_distance: float = 18.0   # pedestrians hold back while a car is this close (0 disables)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "crossing_duration", tuple(int(c) for c in self.crossing_duration))
        object.__setattr__(self, "onset_window", tuple(float(c) for c in self.onset_window))
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0 < self.v_cruise <= self.v_max:
            raise ValueError("need 0 < v_cruise <= v_max")
        if not self.brake_distance < self.view_range < self.road_length:
            raise ValueError("need brake_distance < view_range < road_length")
        if not self.time_limit > self.road_length / (self.v_cruise * self.dt):
            raise ValueError("time_limit too short to reach the end at cruise speed")
        if self.traffic_level not in TRAFFIC_SCALE:
            raise ValueError(f"unknown traffic level {self.traffic_level!r}")
        if self.obs_mode not in ("vector", "pixel_strip"):
            raise ValueError(f"unknown obs_mode {self.obs_mode!r}")
        lo, hi = self.crossing_duration
        if not 0 < lo <= hi:
            raise ValueError("crossing_duration must be a positive interval")

    @property
    def obs_dim(self) -> int:
        if self.obs_mode == "pixel_strip":
            return self.strip_cells
        return 1 + 2 * self.k_nearest

    @property
    def action_dim(self) -> int:
        return 1

    @property
    def lookahead_steps(self) -> int:
        return int(math.ceil(self.brake_distance / self.v_cruise / self.dt))

    def to_dict(self):
        d = asdict(self)
        d["crossing_duration"] = list(self.crossing_duration)
        d["onset_window"] = list(self.onset_window)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown BrakeTown config fields: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Pedestrian:
    position: float
    t_on: int
    t_off: int

    def active(self, t: int) -> bool:
        return self.t_on <= t < self.t_off

    def flagged(self, t: int, lookahead: int) -> bool:
        """Active now or about to become active."""
        return self.t_on - lookahead <= t < self.t_off


@dataclass(frozen=True)
class BrakeTownState:
    x: float
    v: float
    t: int
    pedestrians: tuple[Pedestrian, ...]
    prev_action: float = 0.0
    done: bool = False
    status: str | None = None


@dataclass(frozen=True)
class EpisodeOutcome:
    status: str | None  # None while running, else success | collision | timeout
    steps: int
    ret: float


def sample_pedestrians(config: BrakeTownConfig, rng: np.random.Generator):
    rate = config.pedestrian_rate * TRAFFIC_SCALE[config.traffic_level]
    span = config.road_length - config.start_clear - 5.0
    n = rng.poisson(rate * span)
    positions = np.sort(rng.uniform(config.start_clear, config.road_length - 5.0, size=n))
    if n:
        # keep cells and their stop zones from overlapping
        gap = 2 * config.cell_half_width + config.stop_margin + 1.0
        kept = [positions[0]]
        for p in positions[1:]:
            if p - kept[-1] >= gap:
                kept.append(p)
        positions = np.array(kept)
    lo, hi = config.crossing_duration
    peds = []
    for p in positions:
        nominal = p / (config.v_cruise * config.dt)
        t_on = int(rng.uniform(*config.onset_window) * nominal + rng.integers(0, config.onset_jitter + 1))
        dur = int(rng.integers(lo, hi + 1))
        peds.append(Pedestrian(float(p), t_on, t_on + dur))
    return tuple(peds)


def reset(config: BrakeTownConfig, episode_seed: int):
    rng = np.random.default_rng([config.seed, int(episode_seed)])
    state = BrakeTownState(0.0, 0.0, 0, _yield(sample_pedestrians(config, rng), 0.0, 0, config))
    return state, observe(state, config)


def observe(state: BrakeTownState, config: BrakeTownConfig) -> np.ndarray:
    if config.obs_mode == "pixel_strip":
        return _strip(state, config)
    look = config.lookahead_steps
    seen = []
    for p in state.pedestrians:
        rel = p.position - state.x
        if -config.cell_half_width <= rel <= config.view_range:
            seen.append((rel / config.dist_scale, 1.0 if p.flagged(state.t, look) else 0.0))
    seen = seen[: config.k_nearest]
    seen += [(config.view_range / config.dist_scale, 0.0)] * (config.k_nearest - len(seen))
    out = [state.x / config.x_scale]
    for rel, flag in seen:
        out += [rel, flag]
    return np.array(out)


def _strip(state: BrakeTownState, config: BrakeTownConfig) -> np.ndarray:
    """K cells covering [x - view/4, x + view): agent cell 0.5, flagged crossings 1.0."""
    K = config.strip_cells
    lo = state.x - config.view_range / 4
    width = (config.view_range * 1.25) / K
    strip = np.zeros(K)
    look = config.lookahead_steps
    for p in state.pedestrians:
        if p.flagged(state.t, look):
            c = int((p.position - lo) // width)
            if 0 <= c < K:
                strip[c] = 1.0
    agent = int((state.x - lo) // width)
    strip[agent] = max(strip[agent], 0.5)
    return strip


def _in_cell(x: float, p: Pedestrian, config: BrakeTownConfig) -> bool:
    return abs(x - p.position) <= config.cell_half_width


def _yield(pedestrians, x: float, t: int, config: BrakeTownConfig):
    """Delay crossings whose flag would switch on while the car is close and approaching.

    A delayed crossing keeps its duration; its schedule moves one step later.
    """
    if config.yield_distance <= 0:
        return pedestrians
    look = config.lookahead_steps
    out = []
    for p in pedestrians:
        d = p.position - config.cell_half_width - x
        switching = t == p.t_on - look or (t == 0 and p.t_on - look < 0)
        if switching and x < p.position + config.cell_half_width and d < config.yield_distance:
            shift = t + 1 + look - p.t_on
            p = Pedestrian(p.position, p.t_on + shift, p.t_off + shift)
        out.append(p)
    return tuple(out)


def step(state: BrakeTownState, action, config: BrakeTownConfig):
    if state.done:
        raise TerminalStepError("step() called on a finished episode")
    a = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -1.0, 1.0))
    v = min(max(state.v + a * config.a_scale * config.dt, 0.0), config.v_max)
    x = state.x + v * config.dt
    t = state.t + 1
    peds = _yield(state.pedestrians, x, t, config)
    reward = (x - state.x) / config.road_length
    status = None
    if any(p.active(t) and _in_cell(x, p, config) for p in peds) and v > config.v_stop_eps:
        status = "collision"
        reward -= config.collision_penalty
    elif x >= config.road_length:
        status = "success"
    elif t >= config.time_limit:
        status = "timeout"
    new = BrakeTownState(x, v, t, peds, a, status is not None, status)
    return new, observe(new, config), EpisodeOutcome(status, t, reward)


def env_reward(prev: BrakeTownState, new: BrakeTownState, config: BrakeTownConfig) -> float:
    r = (new.x - prev.x) / config.road_length
    if new.status == "collision":
        r -= config.collision_penalty
    return r


# -- scripted expert ----------------------------------------------------------

def _full_brake_distance(v: float, a_prev: float, config: BrakeTownConfig) -> float:
    """Distance covered while ramping to a = -1 under the slew limit and stopping."""
    dist, a = 0.0, a_prev
    while v > config.v_stop_eps:
        a = max(a - config.slew_limit, -1.0)
        v = max(v + a * config.a_scale * config.dt, 0.0)
        dist += v * config.dt
    return dist


def flagged_hazards(state: BrakeTownState, config: BrakeTownConfig):
    """Flagged crossings ahead within brake_distance as (pedestrian, distance to cell)."""
    look = config.lookahead_steps
    out = []
    for p in state.pedestrians:
        d = p.position - config.cell_half_width - state.x
        if 0 < d <= config.brake_distance and p.flagged(state.t, look):
            out.append((p, d))
    return sorted(out, key=lambda h: h[1])


def _stoppable_after(v: float, a: float, d_stop: float, config: BrakeTownConfig) -> bool:
    v1 = min(max(v + a * config.a_scale * config.dt, 0.0), config.v_max)
    return v1 * config.dt + _full_brake_distance(v1, a, config) <= d_stop + 1e-9


def expert_action(state: BrakeTownState, config: BrakeTownConfig, prev_action=None) -> float:
    """Rate-limited speed controller that stops before flagged crossings.

    For each flagged crossing it can still stop for, the controller follows
    the comfortable stopping profile v = sqrt(2 b d) towards a point
    ``stop_margin`` short of the cell, and holds a light brake once stopped
    there.  A crossing it can no longer stop for is driven through (the
    yield rule keeps such cells clear).  The result is clipped to the slew
    bounds, falling back to the hardest allowed brake when the car would
    otherwise lose the ability to stop in time.
    """
    a_prev = state.prev_action if prev_action is None else float(np.asarray(prev_action).reshape(-1)[0])
    lo = max(a_prev - config.slew_limit, -1.0)
    hi = min(a_prev + config.slew_limit, 1.0)
    a_des = config.kp * (config.v_cruise - state.v) / config.a_scale
    stopped = state.v <= config.v_stop_eps
    brake_dist = _full_brake_distance(state.v, a_prev, config)
    b = config.comfort_decel * config.a_scale
    binding = None
    for _, d in flagged_hazards(state, config):
        d_stop = max(d - config.stop_margin, 0.0)
        if not stopped and brake_dist > d_stop + 1e-9:
            continue  # committed
        if stopped and d_stop < 0.5:
            a_h = -config.hold_brake  # wait at the line
        else:
            # feed-forward deceleration of the profile v = sqrt(2 b d) plus speed feedback
            v_target = math.sqrt(2.0 * b * d_stop)
            a_h = (config.kp_brake * (v_target - state.v) - b) / config.a_scale
        a_des = min(a_des, a_h)
        binding = d_stop if binding is None else min(binding, d_stop)
    a = float(np.clip(a_des, lo, hi))
    if binding is not None and a > lo and not _stoppable_after(state.v, a, binding, config):
        a = lo
    return a
