import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from copycat_lab import autodiff as ad
from copycat_lab import nn


def _tape_params(tape, params):
    return {k: tape.leaf(v) for k, v in params.items()}


def test_mlp_spec_validation():
    with pytest.raises(ValueError):
        nn.MlpSpec((3,))
    with pytest.raises(ValueError):
        nn.MlpSpec((3, 0, 1))
    with pytest.raises(ValueError):
        nn.MlpSpec((3, 2), activation="gelu")


def test_init_is_uniform_fan_in_and_seeded():
    spec = nn.MlpSpec((50, 20, 1))
    p1, p2 = nn.init_mlp(spec, 7), nn.init_mlp(spec, 7)
    assert all(np.array_equal(p1[k], p2[k]) for k in p1)
    assert np.abs(p1["W0"]).max() <= 1 / np.sqrt(50)
    assert np.abs(p1["W1"]).max() <= 1 / np.sqrt(20)
    assert not np.any(p1["b0"])


def test_numpy_forward_matches_tape_forward(rng):
    spec = nn.MlpSpec((5, 8, 6, 2))
    params = nn.init_mlp(spec, 1)
    x = rng.normal(size=(9, 5))
    tape = ad.Tape()
    out, hid = nn.mlp_forward(_tape_params(tape, params), tape.leaf(x), spec, return_hidden=True)
    out_np, hid_np = nn.mlp_numpy(params, x, spec, return_hidden=True)
    assert np.array_equal(out.value, out_np)
    assert len(hid) == len(hid_np) == 2
    assert all(np.array_equal(a.value, b) for a, b in zip(hid, hid_np))


def test_input_width_mismatch_raises():
    spec = nn.MlpSpec((5, 3, 1))
    tape = ad.Tape()
    with pytest.raises(ad.ShapeError):
        nn.mlp_forward(_tape_params(tape, nn.init_mlp(spec, 0)), tape.leaf(np.zeros((2, 4))), spec)


def test_fits_a_line():
    # sanity oracle: y = 2x + 1 on 100 points, 2000 Adam steps
    x = np.linspace(-1, 1, 100)[:, None]
    y = 2 * x + 1
    spec = nn.MlpSpec((1, 16, 1))
    params = nn.init_mlp(spec, 0)
    opt = nn.adam_init(params, lr=1e-2)
    for _ in range(2000):
        tape = ad.Tape()
        P = _tape_params(tape, params)
        loss = ad.l2_loss(nn.mlp_forward(P, tape.leaf(x), spec), y)
        tape.backward(loss)
        params, opt = nn.adam_step(opt, params, {k: tape.grad(v) for k, v in P.items()})
    assert float(loss.value[0]) < 1e-3


def test_adam_step_is_pure_and_matches_hand_computation():
    params = {"w": np.array([1.0, -2.0])}
    grads = {"w": np.array([0.5, 0.25])}
    s0 = nn.adam_init(params, lr=0.1)
    p1, s1 = nn.adam_step(s0, params, grads)
    p1b, s1b = nn.adam_step(s0, params, grads)
    assert np.array_equal(p1["w"], p1b["w"]) and s1.t == s1b.t == 1
    # first bias-corrected step moves each coordinate by lr * g/|g| (up to eps)
    expected = params["w"] - 0.1 * grads["w"] / (np.abs(grads["w"]) + 1e-8)
    assert np.allclose(p1["w"], expected, rtol=0, atol=1e-15)
    assert np.array_equal(params["w"], [1.0, -2.0])  # inputs untouched


def test_adam_frozen_and_errors():
    params = {"a": np.ones(2), "b": np.ones(2)}
    s = nn.adam_init(params, lr=0.1)
    p, _ = nn.adam_step(s, params, {"a": np.ones(2), "b": np.ones(2)}, frozen=("b",))
    assert np.array_equal(p["b"], params["b"]) and not np.array_equal(p["a"], params["a"])
    with pytest.raises(ad.NonFiniteError):
        nn.adam_step(s, params, {"a": np.array([np.nan, 0.0]), "b": np.ones(2)})
    with pytest.raises(ad.ShapeError):
        nn.adam_step(s, params, {"a": np.ones(3), "b": np.ones(2)})


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=60),
       st.integers(1, 5), st.floats(0.01, 0.9))
def test_lr_schedule_non_increasing_and_floored(losses, threshold, rate):
    cfg = nn.LRConfig(initial=1e-3, decay_threshold=threshold, decay_rate=rate, lower_bound=1e-5)
    lrs = nn.lr_schedule(losses, cfg)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert all(lr >= 1e-5 for lr in lrs) and lrs[0] <= 1e-3


def test_lr_schedule_decays_after_plateau():
    cfg = nn.LRConfig(initial=1.0, decay_threshold=2, decay_rate=0.5, lower_bound=0.2)
    assert nn.lr_schedule([3, 2, 2, 2, 2, 2, 2, 2], cfg) == [1, 1, 1, 0.5, 0.5, 0.25, 0.25, 0.2]


def test_param_file_roundtrip_and_errors(tmp_path):
    spec = nn.MlpSpec((3, 4, 1))
    params = nn.init_mlp(spec, 5)
    path = tmp_path / "p.json"
    nn.save_params(path, params, {"main": spec}, seed=5)
    loaded, doc = nn.load_params(path, {k: v.shape for k, v in params.items()})
    assert all(np.array_equal(loaded[k], params[k]) for k in params)
    assert doc["seed"] == 5 and doc["version"] == nn.PARAMS_VERSION
    with pytest.raises(ad.ShapeError, match="W0"):
        nn.load_params(path, {"W0": (4, 4)})
    with pytest.raises(ad.ShapeError, match="W9"):
        nn.load_params(path, {"W9": (1,)})
    path.write_text(path.read_text()[:-20])
    with pytest.raises(nn.ParamFileError):
        nn.load_params(path)
