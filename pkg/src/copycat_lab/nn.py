"""MLPs, Adam and parameter files on top of :mod:`copycat_lab.autodiff`.

Parameter sets are plain ``dict[str, np.ndarray]``; an MLP registered under
prefix ``"pi."`` owns keys ``pi.W0, pi.b0, pi.W1, ...``.  Optimizer steps
return new dicts and never mutate their inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad

PARAMS_FORMAT = "copycat-lab-params"
PARAMS_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ValueError("MlpSpec needs at least 2 widths")
        if any(w <= 0 for w in self.layer_widths):
            raise ValueError(f"MlpSpec widths must be positive: {self.layer_widths}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_activation not in ("identity", "tanh"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def to_dict(self):
        return {"layer_widths": list(self.layer_widths), "activation": self.activation,
                "output_activation": self.output_activation}


def init_mlp(spec: MlpSpec, rng_seed, prefix: str = "") -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(spec.layer_widths[:-1], spec.layer_widths[1:])):
        bound = math.sqrt(1.0 / fan_in)
        params[f"{prefix}W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"{prefix}b{i}"] = np.zeros(fan_out)
    return params


def _activate(x: ad.Tensor, kind: str) -> ad.Tensor:
    if kind == "relu":
        return ad.relu(x)
    if kind == "tanh":
        return ad.tanh(x)
    return x


def mlp_forward(params, x: ad.Tensor, spec: MlpSpec, prefix: str = "",
                return_hidden: bool = False):
    """Run the MLP.  ``params`` maps names to tape Tensors.

    With ``return_hidden`` the list of post-activation hidden layers is
    returned alongside the output.
    """
    if x.shape[-1] != spec.layer_widths[0]:
        raise ad.ShapeError(
            f"mlp_forward: input width {x.shape[-1]} != first layer width {spec.layer_widths[0]}")
    hidden = []
    h = x
    for i in range(spec.n_layers):
        h = ad.add(ad.matmul(h, params[f"{prefix}W{i}"]), params[f"{prefix}b{i}"])
        last = i == spec.n_layers - 1
        h = _activate(h, spec.output_activation if last else spec.activation)
        if not last:
            hidden.append(h)
    return (h, hidden) if return_hidden else h


def mlp_numpy(params, x: np.ndarray, spec: MlpSpec, prefix: str = "", return_hidden=False):
    """Tape-free forward pass for inference; same arithmetic as mlp_forward."""
    hidden = []
    h = np.asarray(x, dtype=np.float64)
    for i in range(spec.n_layers):
        h = h @ params[f"{prefix}W{i}"] + params[f"{prefix}b{i}"]
        kind = spec.output_activation if i == spec.n_layers - 1 else spec.activation
        if kind == "relu":
            h = h * (h > 0)
        elif kind == "tanh":
            h = np.tanh(h)
        if i < spec.n_layers - 1:
            hidden.append(h)
    return (h, hidden) if return_hidden else h


# -- Adam ---------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 2e-4
    weight_decay: float = 0.0


def adam_init(params, **kwargs) -> AdamState:
    return AdamState(m={k: np.zeros_like(p) for k, p in params.items()},
                     v={k: np.zeros_like(p) for k, p in params.items()}, **kwargs)


def adam_step(state: AdamState, params, grads, frozen=()):
    """Bias-corrected Adam with L2-style weight decay.

    Parameters named in ``frozen`` are passed through untouched.
    """
    for name, g in grads.items():
        if name not in frozen and not np.all(np.isfinite(g)):
            raise ad.NonFiniteError(f"non-finite gradient for parameter {name!r}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        if name in frozen:
            new_p[name], new_m[name], new_v[name] = p, state.m[name], state.v[name]
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ad.ShapeError(f"adam_step: gradient shape {g.shape} != parameter shape "
                                f"{p.shape} for {name!r}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        new_p[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_p, replace(state, m=new_m, v=new_v, t=t)


# -- LR schedule --------------------------------------------------------------

@dataclass(frozen=True)
class LRConfig:
    initial: float = 2e-4
    decay_threshold: int = 5000
    decay_rate: float = 0.1
    lower_bound: float = 1e-7


class PlateauSchedule:
    """Decay the LR when the best loss has not improved for ``decay_threshold`` updates."""

    def __init__(self, config: LRConfig):
        self.config = config
        self.lr = config.initial
        self.best = math.inf
        self.since_best = 0

    def update(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.since_best = 0
        else:
            self.since_best += 1
            if self.since_best >= self.config.decay_threshold:
                self.lr = max(self.lr * self.config.decay_rate, self.config.lower_bound)
                self.since_best = 0
        return self.lr


def lr_schedule(losses, config: LRConfig) -> list[float]:
    """LR in effect after each entry of ``losses``."""
    sched = PlateauSchedule(config)
    return [sched.update(float(x)) for x in losses]


# -- parameter files ----------------------------------------------------------

class ParamFileError(ValueError):
    pass


def save_params(path, params, specs=None, seed=None, meta=None):
    doc = {
        "format": PARAMS_FORMAT,
        "version": PARAMS_VERSION,
        "seed": seed,
        "specs": {k: s.to_dict() for k, s in (specs or {}).items()},
        "meta": meta or {},
        "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                   for k, v in params.items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_params(path, expected_shapes=None):
    """Load a parameter file; returns ``(params, doc)``.

    ``expected_shapes`` (name -> shape) triggers a per-layer shape check.
    """
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParamFileError(f"{path}: cannot parse parameter file at char {e.pos}: {e.msg}") from e
    if doc.get("format") != PARAMS_FORMAT:
        raise ParamFileError(f"{path}: not a parameter file")
    if doc.get("version") != PARAMS_VERSION:
        raise ParamFileError(f"{path}: unsupported version {doc.get('version')!r}")
    params = {}
    for name, entry in doc["params"].items():
        arr = np.array(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape)):
            raise ParamFileError(f"{path}: layer {name!r} has {arr.size} values for shape {shape}")
        params[name] = arr.reshape(shape)
    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if name not in params:
                raise ad.ShapeError(f"layer {name!r} missing from {path}")
            if params[name].shape != tuple(shape):
                raise ad.ShapeError(f"layer {name!r}: file has shape {params[name].shape}, "
                                    f"expected {tuple(shape)}")
    return params, doc
