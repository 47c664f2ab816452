"""Lockstep rollouts of a batch-callable policy over many episodes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import Env


@dataclass
class EpisodeRecord:
    episode_seed: int
    status: str | None = None
    steps: int = 0
    ret: float = 0.0
    observations: list = field(default_factory=list)
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)


def run_episodes(policy_fn, env: Env, episode_seeds, H: int, record: bool = False,
                 max_steps: int | None = None) -> list[EpisodeRecord]:
    """Run one episode per seed, calling ``policy_fn(windows, prev_actions)`` once per step.

    ``windows`` has shape (B, H+1, obs_dim), newest frame first, with the
    first observation repeated before the episode start.  ``prev_actions``
    holds the previously executed action (zeros at t=0).
    """
    seeds = list(episode_seeds)
    states, hist, recs = [], [], []
    for s in seeds:
        st, obs = env.reset(s)
        states.append(st)
        hist.append(np.repeat(obs[None, :], H + 1, axis=0))
        recs.append(EpisodeRecord(int(s)))
    hist = np.array(hist)
    prev = np.zeros((len(seeds), env.action_dim))
    active = list(range(len(seeds)))
    steps = 0
    while active:
        acts = np.asarray(policy_fn(hist[active], prev[active]), dtype=np.float64)
        acts = np.clip(acts.reshape(len(active), env.action_dim), -1.0, 1.0)
        still = []
        for j, i in enumerate(active):
            rec = recs[i]
            if record:
                rec.observations.append(hist[i, 0].copy())
                rec.states.append(states[i])
                rec.actions.append(acts[j].copy())
            st, obs, out = env.step(states[i], acts[j])
            states[i] = st
            rec.ret += out.ret
            rec.steps = out.steps
            prev[i] = acts[j]
            hist[i, 1:] = hist[i, :-1].copy()
            hist[i, 0] = obs
            if st.done:
                rec.status = st.status
            else:
                still.append(i)
        active = still
        steps += 1
        if max_steps is not None and steps >= max_steps:
            break
    return recs
