"""Environment adapters sharing one small interface.

``Env`` wraps a module-level simulator (``reset``/``step``/``expert_action``)
plus its config so that demos, training and evaluation code can treat both
simulators alike.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import braketown, hidden_velocity
from .braketown import BrakeTownConfig
from .hidden_velocity import HiddenVelocityConfig


@dataclass(frozen=True)
class Env:
    name: str
    config: object

    @property
    def module(self):
        return braketown if self.name == "braketown" else hidden_velocity

    @property
    def obs_dim(self) -> int:
        return self.config.obs_dim

    @property
    def action_dim(self) -> int:
        return self.config.action_dim

    def reset(self, episode_seed: int):
        return self.module.reset(self.config, episode_seed)

    def step(self, state, action):
        return self.module.step(state, action, self.config)

    def expert(self, state, prev_action=None):
        return np.atleast_1d(np.asarray(
            self.module.expert_action(state, self.config, prev_action), dtype=np.float64))

    def hidden_velocity(self, state) -> np.ndarray:
        return np.atleast_1d(np.asarray(state.v, dtype=np.float64))

    def speed_scale(self) -> float:
        return self.config.v_max if self.name == "braketown" else self.config.speed_scale

    def config_hash(self) -> str:
        return self.config.config_hash()

    def to_dict(self):
        return {"name": self.name, "config": self.config.to_dict()}


def make_env(name: str, overrides: dict | None = None) -> Env:
    overrides = dict(overrides or {})
    if name == "braketown":
        return Env(name, BrakeTownConfig.from_dict(overrides))
    if name == "hidden_velocity":
        return Env(name, HiddenVelocityConfig.from_dict(overrides))
    raise ValueError(f"unknown env {name!r}")


def env_from_dict(d: dict) -> Env:
    return make_env(d["name"], d.get("config"))


__all__ = ["Env", "make_env", "env_from_dict", "BrakeTownConfig", "HiddenVelocityConfig"]
