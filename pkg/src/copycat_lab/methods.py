"""Behavioral-cloning methods, the two-stream residual method and ablations.

Every method shares one training loop (:func:`_fit`): a fresh tape per
minibatch, one Adam step on all parameters, a plateau LR schedule driven by
the periodic validation action loss.  Minibatch indices, dropout masks and
each network's initial weights come from separate seeded streams, so two
methods that coincide mathematically (HD with p=0, FCA with lambda=0,
Keyframe with kappa=0 versus BCOH) produce bit-identical traces.

Two-stream layout:

    memory   window -> 64 -> m_t (memory_dim) -> branch outputs (residuals)
    policy   o_t -> 64 -> 64 --concat(stop_gradient(m_t))--> 64 -> action
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .demos import DemoDataset, Trajectory
from .envs import Env
from .nn import LRConfig, MlpSpec, PlateauSchedule, adam_init, adam_step, init_mlp, mlp_forward, mlp_numpy
from .rollout import run_episodes

log = logging.getLogger(__name__)

SINGLE_STREAM = ("bcso", "bcoh", "hd", "fca", "keyframe", "dagger")
TWO_STREAM = ("ours", "ours_no_stopgrad", "memory_obj_at", "memory_obj_aprev", "ours_multibranch",
              "two_stream_bcoh", "two_stream_keyframe")
MEMORY_ONLY = ("memory_only_residual", "memory_only_learned")
KINDS = SINGLE_STREAM + TWO_STREAM + MEMORY_ONLY


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class MethodConfig:
    kind: str = "bcoh"
    H: int = 6
    hidden: tuple[int, ...] = (64, 64)
    memory_dim: int = 32
    loss: str = "l1"
    alpha: float = 0.95
    aux_velocity: bool = True
    lr: float = 1e-3
    lr_decay_threshold: int = 1500
    lr_decay_rate: float = 0.1
    lr_lower_bound: float = 1e-7
    weight_decay: float = 0.0
    iterations: int = 3000
    batch_size: int = 128
    seed: int = 0
    val_every: int = 100
    dropout_p: float = 0.5
    fca_lambda: float = 0.5
    fca_hidden: int = 32
    keyframe_kappa: float = 10.0
    dagger_rounds: int = 5
    dagger_episodes: int = 20
    dagger_budget: int = 25000
    branches: int = 1
    probe_layer: int = -1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind not in KINDS:
            raise ValueError(f"unknown method kind {self.kind!r}")
        if self.kind == "bcso" and self.H != 0:
            object.__setattr__(self, "H", 0)
        if self.kind != "bcso" and self.H < 1:
            raise ValueError(f"method {self.kind!r} needs H >= 1")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.branches < 1:
            raise ValueError("branch count must be >= 1")
        if self.loss not in ("l1", "l2"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if len(self.hidden) != 2:
            raise ValueError("hidden must list two widths")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown method config fields: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)   # (iteration, loss)
    lr: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)      # other per-iteration series
    wall_time: float = 0.0

    def to_rows(self):
        val = dict(self.val_loss)
        keys = sorted(self.extra)
        rows = []
        for i, loss in enumerate(self.train_loss):
            row = {"iteration": i + 1, "train_loss": loss, "lr": self.lr[i],
                   "val_loss": val.get(i + 1, "")}
            for k in keys:
                row[k] = self.extra[k][i]
            rows.append(row)
        return rows


# -- networks -----------------------------------------------------------------

def _stream_seed(seed: int, name: str):
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _n_branches(cfg: MethodConfig) -> int:
    return cfg.branches if cfg.kind == "ours_multibranch" else 1


def build_specs(cfg: MethodConfig, obs_dim: int, adim: int) -> dict[str, MlpSpec]:
    h0, h1 = cfg.hidden
    win = (cfg.H + 1) * obs_dim
    kind = cfg.kind
    if kind in SINGLE_STREAM:
        specs = {"main": MlpSpec((win, h0, h1, adim)), "spd": MlpSpec((h1, 1))}
        if kind == "fca":
            specs["adv"] = MlpSpec((h1, cfg.fca_hidden, adim))
        return specs
    pin = win if kind.startswith("two_stream") else obs_dim
    specs = {
        "mem": MlpSpec((win, h0, cfg.memory_dim, _n_branches(cfg) * adim)),
        "mspd": MlpSpec((cfg.memory_dim, 1)),
        "pin": MlpSpec((pin, h0, h1)),
        "pout": MlpSpec((h1 + cfg.memory_dim, h1, adim)),
        "pspd": MlpSpec((h1, 1)),
    }
    if kind == "memory_only_learned":
        specs["ctl"] = MlpSpec((cfg.memory_dim, h0, h1, adim))
    return specs


def init_params(specs, seed: int) -> dict[str, np.ndarray]:
    params = {}
    for name, spec in specs.items():
        params.update(init_mlp(spec, _stream_seed(seed, name), prefix=f"{name}."))
    return params


def _relu_np(x):
    return x * (x > 0)


@dataclass
class TrainedPolicy:
    kind: str
    config: MethodConfig
    params: dict
    specs: dict
    obs_dim: int
    action_dim: int
    report: TrainReport | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def H(self) -> int:
        return self.config.H

    @property
    def two_stream(self) -> bool:
        return self.kind not in SINGLE_STREAM

    def _flat(self, windows):
        w = np.asarray(windows, dtype=np.float64)
        if w.ndim == 2:
            w = w[None]
        if w.shape[1:] != (self.H + 1, self.obs_dim):
            raise ad.ShapeError(f"policy {self.kind!r} expects windows of shape "
                                f"(B, {self.H + 1}, {self.obs_dim}), got {w.shape}")
        return w.reshape(len(w), -1), w[:, 0]

    def memory(self, windows, zero_memory: bool = False):
        """Memory-stream outputs (m_t, branch outputs) for two-stream policies."""
        flat, _ = self._flat(windows)
        out, hidden = mlp_numpy(self.params, flat, self.specs["mem"], "mem.", return_hidden=True)
        m = hidden[-1]
        if zero_memory:
            m = np.zeros_like(m)
        return m, out

    def features(self, windows) -> np.ndarray:
        """Representation probed for previous-action information."""
        if self.two_stream:
            return self.memory(windows)[0]
        flat, _ = self._flat(windows)
        _, hidden = mlp_numpy(self.params, flat, self.specs["main"], "main.", return_hidden=True)
        return hidden[self.config.probe_layer]

    def raw_action(self, windows, prev_actions=None, zero_memory: bool = False) -> np.ndarray:
        flat, cur = self._flat(windows)
        kind = self.kind
        if kind in SINGLE_STREAM:
            return mlp_numpy(self.params, flat, self.specs["main"], "main.")
        m, mem_out = self.memory(windows, zero_memory)
        if kind == "memory_only_residual":
            if prev_actions is None:
                raise ValueError("memory_only_residual needs the previously executed action")
            prev = np.asarray(prev_actions, dtype=np.float64).reshape(len(flat), self.action_dim)
            return prev + mem_out[:, :self.action_dim]
        if kind == "memory_only_learned":
            return mlp_numpy(self.params, m, self.specs["ctl"], "ctl.")
        pin_x = flat if kind.startswith("two_stream") else cur
        h = _relu_np(mlp_numpy(self.params, pin_x, self.specs["pin"], "pin."))
        return mlp_numpy(self.params, np.concatenate([h, m], axis=1), self.specs["pout"], "pout.")

    def act(self, windows, prev_actions=None, zero_memory: bool = False) -> np.ndarray:
        """Deterministic actions in [-1, 1] for a batch of history windows.

        Only ``memory_only_residual`` reads ``prev_actions``.
        """
        return np.clip(self.raw_action(windows, prev_actions, zero_memory), -1.0, 1.0)

    def __call__(self, windows, prev_actions=None):
        return self.act(windows, prev_actions if self.kind == "memory_only_residual" else None)


# -- losses -------------------------------------------------------------------

def _loss_fn(cfg):
    return ad.l1_loss if cfg.loss == "l1" else ad.l2_loss


def _weighted(cfg, pred, target, pred_v, target_v, weights=None):
    L = _loss_fn(cfg)
    la = L(pred, target, weights)
    if not cfg.aux_velocity or cfg.alpha == 1.0:
        return la, la
    lv = L(pred_v, target_v, weights)
    return ad.add(ad.scale(la, cfg.alpha), ad.scale(lv, 1.0 - cfg.alpha)), la


def _memory_targets(cfg: MethodConfig, ds: DemoDataset, idx):
    if cfg.kind == "memory_obj_at":
        return ds.a[idx]
    if cfg.kind == "memory_obj_aprev":
        return ds.a_prev[idx]
    nb = _n_branches(cfg)
    # branch i (1-based) predicts a_t - a_{t-i}
    return np.concatenate([ds.a[idx] - ds.a_lagged[idx, i] for i in range(nb)], axis=1)


def _hd_masks(rng, B, H, obs_dim, p):
    drop = rng.random((B, H)) < p
    keep = np.concatenate([np.ones((B, 1)), (~drop).astype(np.float64)], axis=1)
    return np.repeat(keep, obs_dim, axis=1)


class _Objective:
    """Builds the per-minibatch graph for one method."""

    def __init__(self, cfg: MethodConfig, ds: DemoDataset, specs, weights=None):
        self.cfg, self.ds, self.specs, self.weights = cfg, ds, specs, weights
        self.flat = ds.windows.reshape(len(ds.windows), -1)
        self.speed = ds.speed.reshape(len(ds.speed), -1)
        self.speed_scale = float(np.max(np.abs(ds.speed))) or 1.0

    def __call__(self, tape, P, idx, mask_rng):
        cfg, ds, specs = self.cfg, self.ds, self.specs
        x = tape.leaf(self.flat[idx])
        v_t = self.speed[idx] / self.speed_scale
        w = None if self.weights is None else self.weights[idx]
        extra = {}
        kind = cfg.kind
        if kind in SINGLE_STREAM:
            if kind == "hd":
                x = ad.dropout_apply(x, _hd_masks(mask_rng, len(idx), cfg.H, ds.obs_dim, cfg.dropout_p))
            out, hidden = mlp_forward(P, x, specs["main"], "main.", return_hidden=True)
            z = hidden[-1]
            v_hat = mlp_forward(P, z, specs["spd"], "spd.")
            total, la = _weighted(cfg, out, ds.a[idx], v_hat, v_t, w)
            policy = total
            if kind == "fca":
                d_out = mlp_forward(P, ad.grad_reverse(z, cfg.fca_lambda), specs["adv"], "adv.")
                adv = _loss_fn(cfg)(d_out, ds.a_prev[idx])
                extra["adversary_loss"] = float(adv.value[0])
                total = ad.add(total, adv)
            return total, float(policy.value[0]), extra
        # two-stream family
        mem_out, mh = mlp_forward(P, x, specs["mem"], "mem.", return_hidden=True)
        m = mh[-1]
        if kind == "memory_only_learned":
            ctl = mlp_forward(P, ad.stop_gradient(m), specs["ctl"], "ctl.")
            loss = _loss_fn(cfg)(ctl, ds.a[idx])
            return loss, float(loss.value[0]), extra
        mv_hat = mlp_forward(P, m, specs["mspd"], "mspd.")
        mem_loss, _ = _weighted(cfg, mem_out, _memory_targets(cfg, ds, idx), mv_hat, v_t,
                                w if kind == "two_stream_keyframe" else None)
        pin_x = x if kind.startswith("two_stream") else tape.leaf(ds.obs[idx])
        h = ad.relu(mlp_forward(P, pin_x, specs["pin"], "pin."))
        fused = m if kind == "ours_no_stopgrad" else ad.stop_gradient(m)
        a_hat, ph = mlp_forward(P, ad.concat_lastdim(h, fused), specs["pout"], "pout.", return_hidden=True)
        pv_hat = mlp_forward(P, ph[-1], specs["pspd"], "pspd.")
        pol_w = w if kind == "two_stream_keyframe" else None
        pol_loss, _ = _weighted(cfg, a_hat, ds.a[idx], pv_hat, v_t, pol_w)
        extra["memory_loss"] = float(mem_loss.value[0])
        return ad.add(mem_loss, pol_loss), float(pol_loss.value[0]), extra


def keyframe_weights(ds: DemoDataset, kappa: float) -> np.ndarray:
    """w = 1 + kappa * ||a_t - a_{t-1}||_1, normalized to mean 1 on the train split."""
    w = 1.0 + kappa * np.abs(ds.r).sum(axis=1)
    return w / w[ds.train_idx].mean()


def val_action_loss(policy: TrainedPolicy, ds: DemoDataset, idx=None) -> float:
    idx = ds.val_idx if idx is None else idx
    if len(idx) == 0:
        return float("nan")
    if policy.kind == "memory_only_residual":
        pred = policy.raw_action(ds.windows[idx], ds.a_prev[idx])
    else:
        pred = policy.raw_action(ds.windows[idx])
    diff = pred - ds.a[idx]
    return float(np.mean(np.abs(diff)) if policy.config.loss == "l1" else np.mean(diff ** 2))


def _fit(cfg: MethodConfig, ds: DemoDataset, objective, params, specs, frozen=()):
    batch_rng = np.random.default_rng([cfg.seed, 101])
    mask_rng = np.random.default_rng([cfg.seed, 202])
    opt = adam_init(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = PlateauSchedule(LRConfig(cfg.lr, max(1, cfg.lr_decay_threshold // cfg.val_every),
                                     cfg.lr_decay_rate, cfg.lr_lower_bound))
    report = TrainReport()
    start = time.perf_counter()
    train_idx = ds.train_idx
    probe = TrainedPolicy(cfg.kind, cfg, params, specs, ds.obs_dim, ds.action_dim)
    for it in range(1, cfg.iterations + 1):
        idx = train_idx[batch_rng.integers(0, len(train_idx), size=cfg.batch_size)]
        tape = ad.Tape()
        P = {k: tape.leaf(v) for k, v in params.items()}
        total, policy_loss, extra = objective(tape, P, idx, mask_rng)
        if not np.isfinite(total.value[0]):
            raise DivergenceError(f"{cfg.kind}: loss became non-finite at iteration {it}")
        tape.backward(total)
        grads = {k: tape.grad(t) for k, t in P.items()}
        params, opt = adam_step(opt, params, grads, frozen)
        report.train_loss.append(policy_loss)
        report.lr.append(opt.lr)
        for k, v in extra.items():
            report.extra.setdefault(k, []).append(v)
        if it % cfg.val_every == 0 or it == cfg.iterations:
            probe.params = params
            vl = val_action_loss(probe, ds)
            report.val_loss.append((it, vl))
            if np.isfinite(vl):
                opt = replace(opt, lr=sched.update(vl))
    report.wall_time = time.perf_counter() - start
    return params, report


def _check_dataset(cfg: MethodConfig, ds: DemoDataset):
    if ds.H != cfg.H:
        raise ValueError(f"dataset history H={ds.H} does not match method {cfg.kind!r} H={cfg.H}")


def _policy(cfg, params, specs, ds, report, **meta):
    md = {"config_hash": cfg.config_hash(), "seed": cfg.seed,
          "final_train_loss": report.train_loss[-1] if report and report.train_loss else None}
    md.update(meta)
    return TrainedPolicy(cfg.kind, cfg, params, specs, ds.obs_dim, ds.action_dim, report, md)


def train_bc(ds: DemoDataset, cfg: MethodConfig) -> TrainedPolicy:
    """Single-stream BC (bcso, bcoh) and its single-stream variants (hd, fca, keyframe)."""
    if cfg.kind not in SINGLE_STREAM:
        raise ValueError(f"train_bc cannot train {cfg.kind!r}")
    _check_dataset(cfg, ds)
    specs = build_specs(cfg, ds.obs_dim, ds.action_dim)
    params = init_params(specs, cfg.seed)
    weights = keyframe_weights(ds, cfg.keyframe_kappa) if cfg.kind == "keyframe" else None
    params, report = _fit(cfg, ds, _Objective(cfg, ds, specs, weights), params, specs)
    return _policy(cfg, params, specs, ds, report)


def train_hd(ds, cfg):
    return train_bc(ds, replace(cfg, kind="hd"))


def train_fca(ds, cfg):
    return train_bc(ds, replace(cfg, kind="fca"))


def train_keyframe(ds, cfg):
    return train_bc(ds, replace(cfg, kind="keyframe"))


def train_ours(ds: DemoDataset, cfg: MethodConfig) -> TrainedPolicy:
    """Two-stream training; also serves the two-stream ablations."""
    if cfg.kind not in TWO_STREAM:
        raise ValueError(f"train_ours cannot train {cfg.kind!r}")
    _check_dataset(cfg, ds)
    if cfg.kind == "ours_multibranch" and cfg.branches > ds.max_branches:
        raise ValueError(f"dataset keeps {ds.max_branches} lagged actions, need {cfg.branches}")
    specs = build_specs(cfg, ds.obs_dim, ds.action_dim)
    params = init_params(specs, cfg.seed)
    weights = keyframe_weights(ds, cfg.keyframe_kappa) if cfg.kind == "two_stream_keyframe" else None
    params, report = _fit(cfg, ds, _Objective(cfg, ds, specs, weights), params, specs)
    return _policy(cfg, params, specs, ds, report)


def train_ablation(ds: DemoDataset, cfg: MethodConfig, base: TrainedPolicy | None = None) -> TrainedPolicy:
    """Ablation variants.  Memory-only variants reuse the memory stream of ``base``
    (a trained ``ours`` policy), training one if not supplied."""
    if cfg.kind in TWO_STREAM:
        return train_ours(ds, cfg)
    if cfg.kind not in MEMORY_ONLY:
        raise ValueError(f"{cfg.kind!r} is not an ablation variant")
    _check_dataset(cfg, ds)
    if base is None:
        base = train_ours(ds, replace(cfg, kind="ours"))
    elif base.kind != "ours":
        raise ValueError("memory-only ablations need a trained 'ours' policy")
    specs = build_specs(cfg, ds.obs_dim, ds.action_dim)
    params = dict(base.params)
    if cfg.kind == "memory_only_residual":
        return _policy(cfg, params, specs, ds, base.report, base=base.metadata.get("config_hash"))
    params.update(init_mlp(specs["ctl"], _stream_seed(cfg.seed, "ctl"), prefix="ctl."))
    frozen = tuple(k for k in params if not k.startswith("ctl."))
    params, report = _fit(cfg, ds, _Objective(cfg, ds, specs), params, specs, frozen=frozen)
    return _policy(cfg, params, specs, ds, report, base=base.metadata.get("config_hash"))


def train_dagger(env: Env, ds: DemoDataset, cfg: MethodConfig, episode_offset: int = 100_000):
    """DAgger: roll out, relabel visited states with the expert, aggregate, retrain.

    Returns the final policy; ``metadata['dataset_sizes']`` and
    ``metadata['queries']`` record the aggregation history.
    """
    cfg = replace(cfg, kind="dagger")
    trajs = list(ds.trajectories)
    policy = train_bc(ds, cfg)
    sizes, queries = [len(ds)], 0
    for rnd in range(cfg.dagger_rounds):
        if queries >= cfg.dagger_budget:
            break
        seeds = [episode_offset + rnd * cfg.dagger_episodes + i for i in range(cfg.dagger_episodes)]
        recs = run_episodes(policy, env, seeds, cfg.H, record=True)
        new = []
        for rec in recs:
            room = cfg.dagger_budget - queries
            if room < 2:
                break
            states = rec.states[:room]
            labels, prev = [], np.zeros(env.action_dim)
            for st in states:
                prev = env.expert(st, prev)
                labels.append(prev)
            queries += len(states)
            new.append(Trajectory(np.array(rec.observations[:len(states)]), np.array(labels),
                                  np.array(rec.actions[:len(states)]),
                                  np.array([env.hidden_velocity(s) for s in states]),
                                  rec.episode_seed, rec.status))
        if not new:
            break
        trajs.extend(new)
        agg = DemoDataset(trajs, ds.H, ds.boundary, ds.val_fraction, ds.split_seed, ds.max_branches)
        sizes.append(len(agg))
        policy = train_bc(agg, cfg)
    policy.metadata.update(dataset_sizes=sizes, queries=queries)
    return policy


def train(ds: DemoDataset, cfg: MethodConfig, env: Env | None = None, base=None) -> TrainedPolicy:
    kind = cfg.kind
    if kind == "dagger":
        if env is None:
            raise ValueError("dagger needs a live environment")
        return train_dagger(env, ds, cfg)
    if kind in SINGLE_STREAM:
        return train_bc(ds, cfg)
    if kind in MEMORY_ONLY:
        return train_ablation(ds, cfg, base)
    return train_ours(ds, cfg)


def policy_to_doc(policy: TrainedPolicy) -> dict:
    return {"kind": policy.kind, "config": policy.config.to_dict(), "obs_dim": policy.obs_dim,
            "action_dim": policy.action_dim, "metadata": policy.metadata}


def save_policy(path, policy: TrainedPolicy):
    from .nn import save_params
    save_params(path, policy.params, policy.specs, seed=policy.config.seed, meta=policy_to_doc(policy))


def load_policy(path) -> TrainedPolicy:
    from .nn import load_params
    params, doc = load_params(path)
    meta = doc["meta"]
    cfg = MethodConfig.from_dict(meta["config"])
    specs = build_specs(cfg, meta["obs_dim"], meta["action_dim"])
    expected = {}
    for name, spec in specs.items():
        for i, (a, b) in enumerate(zip(spec.layer_widths[:-1], spec.layer_widths[1:])):
            expected[f"{name}.W{i}"] = (a, b)
            expected[f"{name}.b{i}"] = (b,)
    load_params(path, expected)
    return TrainedPolicy(meta["kind"], cfg, params, specs, meta["obs_dim"], meta["action_dim"],
                         None, meta.get("metadata", {}))
