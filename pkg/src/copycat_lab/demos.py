"""Demonstration collection, history stacking and dataset files.

A :class:`Trajectory` stores what the policy may see (observations), what it
is trained to output (expert labels), what was actually executed, and the
hidden velocity.  The hidden velocity is wrapped in :class:`HiddenField`,
which counts reads; input assembly never touches it, and the velocity only
ever appears as a regression target.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import Env, env_from_dict

log = logging.getLogger(__name__)

DATASET_FORMAT = "copycat-lab-demos"
DATASET_VERSION = 1
BOUNDARIES = ("repeat_first", "zero_pad")
RESIDUAL_BUCKETS = (0.0, 1e-3, 1e-2, 1e-1)
# Reference distribution from a large driving log of ||a_t - a_{t-1}||^2 over the same buckets, for comparison only.
REFERENCE_RESIDUAL_FRACTIONS = (0.688, 0.078, 0.143, 0.090)


class DatasetFileError(ValueError):
    pass


class HiddenField:
    """Array wrapper that counts every read, for access audits."""

    def __init__(self, data):
        self._data = np.asarray(data, dtype=np.float64)
        self.reads = 0

    def read(self) -> np.ndarray:
        self.reads += 1
        return self._data

    def __len__(self):
        return len(self._data)


@dataclass
class Trajectory:
    observations: np.ndarray  # (T, obs_dim); o_t seen before acting at step t
    actions: np.ndarray       # (T, action_dim); expert labels
    executed: np.ndarray      # (T, action_dim); what was applied
    hidden_velocity: HiddenField
    episode_seed: int
    status: str | None = None

    def __post_init__(self):
        if not isinstance(self.hidden_velocity, HiddenField):
            self.hidden_velocity = HiddenField(self.hidden_velocity)
        T = len(self.observations)
        if not (len(self.actions) == len(self.executed) == len(self.hidden_velocity) == T):
            raise ValueError("trajectory fields have different lengths")

    def __len__(self):
        return len(self.observations)

    @property
    def t(self) -> np.ndarray:
        return np.arange(len(self))


def collect(env: Env, n_episodes: int, noise_prob: float = 0.0, seed: int = 0,
            noise_scale: float = 0.5, first_episode: int = 0) -> list[Trajectory]:
    """Roll out the privileged expert.

    With probability ``noise_prob`` per step the executed action is the
    expert action plus Uniform(-noise_scale, noise_scale) noise; the label is
    always the clean expert action.  The expert's slew filter runs on its own
    clean labels.
    """
    rng = np.random.default_rng([seed, 7])
    trajs = []
    for ep in range(first_episode, first_episode + n_episodes):
        state, obs = env.reset(ep)
        prev = np.zeros(env.action_dim)
        O, A, X, V = [], [], [], []
        while not state.done:
            a = env.expert(state, prev)
            executed = a
            if noise_prob > 0 and rng.random() < noise_prob:
                executed = np.clip(a + rng.uniform(-noise_scale, noise_scale, size=a.shape), -1, 1)
            O.append(obs)
            A.append(a)
            X.append(executed)
            V.append(env.hidden_velocity(state))
            state, obs, _ = env.step(state, executed)
            prev = a
        trajs.append(Trajectory(np.array(O), np.array(A), np.array(X), np.array(V), ep, state.status))
    return trajs


def stack_history(observations: np.ndarray, H: int, boundary: str = "repeat_first") -> np.ndarray:
    """Windows [o_t, o_{t-1}, ..., o_{t-H}] for every t; shape (T, H+1, obs_dim)."""
    if H < 0:
        raise ValueError("H must be >= 0")
    if boundary not in BOUNDARIES:
        raise ValueError(f"unknown boundary policy {boundary!r}")
    obs = np.asarray(observations, dtype=np.float64)
    T = len(obs)
    idx = np.arange(T)[:, None] - np.arange(H + 1)[None, :]
    out = obs[np.clip(idx, 0, None)]
    if boundary == "zero_pad":
        out[idx < 0] = 0.0
    return out


def assemble_inputs(trajectories, H: int, boundary: str = "repeat_first", start: int = 1):
    """Policy inputs for every sample with t >= start: (windows, current obs)."""
    wins, cur = [], []
    for tr in trajectories:
        w = stack_history(tr.observations, H, boundary)[start:]
        wins.append(w)
        cur.append(tr.observations[start:])
    return np.concatenate(wins), np.concatenate(cur)


def residual_stats(actions, buckets=RESIDUAL_BUCKETS) -> np.ndarray:
    """Fractions of ||a_t - a_{t-1}||^2 falling in [b_0, b_1), ..., [b_last, inf).

    ``actions`` is a DemoDataset, a list of trajectories or a list of action arrays.
    """
    if isinstance(actions, DemoDataset):
        sq = np.sum(actions.r ** 2, axis=1)
    else:
        seqs = [tr.actions if isinstance(tr, Trajectory) else np.asarray(tr) for tr in actions]
        sq = np.concatenate([np.sum(np.diff(s, axis=0) ** 2, axis=1) for s in seqs if len(s) > 1])
    if sq.size == 0:
        raise ValueError("no residuals to summarize")
    edges = list(buckets) + [np.inf]
    counts = np.array([np.sum((sq >= lo) & (sq < hi)) for lo, hi in zip(edges[:-1], edges[1:])])
    return counts / sq.size


def episode_split(n_episodes: int, val_fraction: float = 0.1, seed: int = 0):
    rng = np.random.default_rng([seed, 11])
    order = rng.permutation(n_episodes)
    n_val = max(1, int(round(n_episodes * val_fraction))) if n_episodes > 1 else 0
    return np.sort(order[n_val:]), np.sort(order[:n_val])


@dataclass
class DemoDataset:
    """Per-sample arrays for t >= 1 plus an episode-level train/val split."""

    trajectories: list
    H: int
    boundary: str = "repeat_first"
    val_fraction: float = 0.1
    split_seed: int = 0
    max_branches: int = 4
    windows: np.ndarray = field(init=False, repr=False)
    obs: np.ndarray = field(init=False, repr=False)
    a: np.ndarray = field(init=False, repr=False)
    a_prev: np.ndarray = field(init=False, repr=False)
    r: np.ndarray = field(init=False, repr=False)
    a_lagged: np.ndarray = field(init=False, repr=False)  # (N, max_branches, adim): a_{t-i}
    speed: np.ndarray = field(init=False, repr=False)
    episode: np.ndarray = field(init=False, repr=False)
    t: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError("empty dataset")
        self.windows, self.obs = assemble_inputs(self.trajectories, self.H, self.boundary)
        a, ap, lag, spd, ep, ts = [], [], [], [], [], []
        for i, tr in enumerate(self.trajectories):
            T = len(tr)
            acts = tr.actions
            a.append(acts[1:])
            ap.append(acts[:-1])
            lidx = np.clip(np.arange(1, T)[:, None] - np.arange(1, self.max_branches + 1)[None, :], 0, None)
            lag.append(acts[lidx])
            spd.append(tr.hidden_velocity.read()[1:])
            ep.append(np.full(T - 1, i))
            ts.append(np.arange(1, T))
        self.a = np.concatenate(a)
        self.a_prev = np.concatenate(ap)
        self.r = self.a - self.a_prev
        self.a_lagged = np.concatenate(lag)
        self.speed = np.concatenate(spd)
        self.episode = np.concatenate(ep)
        self.t = np.concatenate(ts)
        train_eps, val_eps = episode_split(len(self.trajectories), self.val_fraction, self.split_seed)
        self.train_idx = np.flatnonzero(np.isin(self.episode, train_eps))
        self.val_idx = np.flatnonzero(np.isin(self.episode, val_eps))

    def __len__(self):
        return len(self.a)

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]

    @property
    def action_dim(self) -> int:
        return self.a.shape[1]

    def with_history(self, H: int, boundary: str | None = None) -> "DemoDataset":
        return DemoDataset(self.trajectories, H, boundary or self.boundary, self.val_fraction,
                           self.split_seed, self.max_branches)


# -- persistence --------------------------------------------------------------

def _traj_to_json(tr: Trajectory) -> dict:
    return {
        "episode_seed": int(tr.episode_seed),
        "status": tr.status,
        "observations": tr.observations.tolist(),
        "actions": tr.actions.tolist(),
        "executed": tr.executed.tolist(),
        "hidden_velocity": tr.hidden_velocity.read().tolist(),
    }


def save_dataset(path, trajectories, env: Env, H: int, seed: int, noise_prob: float = 0.0):
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "env": env.to_dict(),
        "env_config_hash": env.config_hash(),
        "H": int(H),
        "seed": int(seed),
        "noise_prob": float(noise_prob),
        "n_trajectories": len(trajectories),
    }
    with open(path, "w") as f:
        f.write(json.dumps(header) + "\n")
        for tr in trajectories:
            f.write(json.dumps(_traj_to_json(tr)) + "\n")


def load_dataset(path, H: int | None = None, env: Env | None = None):
    """Returns ``(trajectories, header, env)``.

    ``H`` and ``env`` are checked against the header when given; a config
    hash mismatch is logged as a warning.
    """
    raw = Path(path).read_bytes()
    offset = 0
    lines = raw.split(b"\n")
    records = []
    for line in lines:
        if line.strip():
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DatasetFileError(
                    f"{path}: malformed record at byte offset {offset + e.pos}: {e.msg}") from e
        offset += len(line) + 1
    if not records:
        raise DatasetFileError(f"{path}: empty dataset file")
    header = records[0]
    if header.get("format") != DATASET_FORMAT:
        raise DatasetFileError(f"{path}: missing dataset header")
    if header.get("version") != DATASET_VERSION:
        raise DatasetFileError(f"{path}: unsupported dataset version {header.get('version')!r}")
    if len(records) - 1 != header["n_trajectories"]:
        raise DatasetFileError(f"{path}: header declares {header['n_trajectories']} trajectories, "
                               f"file holds {len(records) - 1} (truncated at byte {len(raw)})")
    if H is not None and H != header["H"]:
        raise DatasetFileError(f"{path}: dataset was built with H={header['H']}, requested H={H}")
    file_env = env_from_dict(header["env"])
    if env is not None and env.config_hash() != header["env_config_hash"]:
        log.warning("%s: env config hash %s differs from requested %s", path,
                    header["env_config_hash"], env.config_hash())
    trajs = []
    for rec in records[1:]:
        trajs.append(Trajectory(
            np.array(rec["observations"], dtype=np.float64),
            np.array(rec["actions"], dtype=np.float64),
            np.array(rec["executed"], dtype=np.float64),
            np.array(rec["hidden_velocity"], dtype=np.float64),
            rec["episode_seed"], rec.get("status")))
    return trajs, header, file_env
