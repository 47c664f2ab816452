from dataclasses import replace

import numpy as np
import pytest

from copycat_lab import autodiff as ad
from copycat_lab import methods as M
from copycat_lab.methods import MethodConfig, train

FAST = dict(iterations=60, batch_size=32, val_every=20, hidden=(16, 16), memory_dim=8)


def _cfg(kind, **kw):
    return MethodConfig(kind=kind, **{**FAST, **kw})


def _ds_for(cfg, ds):
    return ds if cfg.H == ds.H else ds.with_history(cfg.H)


def test_config_validation():
    assert MethodConfig(kind="bcso", H=6).H == 0
    with pytest.raises(ValueError):
        MethodConfig(kind="bcoh", H=0)
    with pytest.raises(ValueError):
        MethodConfig(alpha=0.0)
    with pytest.raises(ValueError):
        MethodConfig(kind="ours_multibranch", branches=0)
    with pytest.raises(ValueError):
        MethodConfig(kind="gail")
    with pytest.raises(ValueError, match="unknown"):
        MethodConfig.from_dict({"kind": "bcoh", "learning_rate": 1})
    cfg = MethodConfig(kind="ours", seed=3)
    assert MethodConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.config_hash() != replace(cfg, seed=4).config_hash()


def _mem_grads(cfg, ds, params, specs, idx):
    obj = M._Objective(cfg, ds, specs)
    tape = ad.Tape()
    P = {k: tape.leaf(v) for k, v in params.items()}
    total, _, _ = obj(tape, P, idx, np.random.default_rng(0))
    tape.backward(total)
    return {k: tape.grad(t) for k, t in P.items() if k.startswith("mem.")}


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_policy_loss_has_zero_jacobian_wrt_memory_stream(small_ds, seed):
    # with stop-gradient, memory-stream gradients must not depend on the policy stream at all
    cfg = _cfg("ours", seed=seed)
    specs = M.build_specs(cfg, small_ds.obs_dim, small_ds.action_dim)
    params = M.init_params(specs, seed)
    idx = small_ds.train_idx[:50]
    other = {k: (v + np.random.default_rng(seed).normal(size=v.shape) if k.startswith("p") else v)
             for k, v in params.items()}
    g1, g2 = _mem_grads(cfg, small_ds, params, specs, idx), _mem_grads(cfg, small_ds, other, specs, idx)
    assert all(np.array_equal(g1[k], g2[k]) for k in g1)
    # sanity: without stop-gradient the policy loss does reach the memory stream
    ns = replace(cfg, kind="ours_no_stopgrad")
    g3 = _mem_grads(ns, small_ds, params, specs, idx)
    g4 = _mem_grads(ns, small_ds, other, specs, idx)
    assert any(not np.array_equal(g3[k], g4[k]) for k in g3)


@pytest.mark.parametrize("kind", ["bcso", "bcoh", "hd", "fca", "keyframe", "ours", "memory_obj_at",
                                  "memory_obj_aprev", "two_stream_bcoh", "two_stream_keyframe",
                                  "ours_no_stopgrad"])
def test_training_is_bit_reproducible(small_ds, kind):
    cfg = _cfg(kind)
    ds = _ds_for(cfg, small_ds)
    p1, p2 = train(ds, cfg), train(ds, cfg)
    assert p1.report.train_loss == p2.report.train_loss
    assert all(np.array_equal(p1.params[k], p2.params[k]) for k in p1.params)
    assert all(np.isfinite(p1.report.train_loss))
    a = p1.act(ds.windows[:20])
    assert a.shape == (20, 1) and np.all(np.abs(a) <= 1)


def test_zeroing_memory_changes_ours_actions(small_ds):
    pol = train(small_ds, _cfg("ours", iterations=200))
    w = small_ds.windows[small_ds.val_idx]
    assert np.mean(np.abs(pol.act(w) - pol.act(w, zero_memory=True))) > 0
    assert pol.features(w).shape == (len(w), 8)


@pytest.mark.parametrize("variant,knob", [("keyframe", {"keyframe_kappa": 0.0}),
                                          ("fca", {"fca_lambda": 0.0}),
                                          ("hd", {"dropout_p": 0.0})])
def test_baseline_collapse_to_bcoh(small_ds, variant, knob):
    base = train(small_ds, _cfg("bcoh"))
    v = train(small_ds, _cfg(variant, **knob))
    assert v.report.train_loss == base.report.train_loss
    assert v.report.val_loss == base.report.val_loss
    assert all(np.array_equal(v.params[k], base.params[k]) for k in base.params)


def test_multibranch_single_branch_equals_ours(small_ds):
    a = train(small_ds, _cfg("ours"))
    b = train(small_ds, _cfg("ours_multibranch", branches=1))
    assert a.report.train_loss == b.report.train_loss
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = train(small_ds, _cfg("ours_multibranch", branches=3))
    assert c.params["mem.W2"].shape[1] == 3


def test_memory_targets(small_ds):
    idx = np.arange(10)
    assert np.array_equal(M._memory_targets(_cfg("ours"), small_ds, idx), small_ds.r[idx])
    assert np.array_equal(M._memory_targets(_cfg("memory_obj_at"), small_ds, idx), small_ds.a[idx])
    assert np.array_equal(M._memory_targets(_cfg("memory_obj_aprev"), small_ds, idx), small_ds.a_prev[idx])
    mb = M._memory_targets(_cfg("ours_multibranch", branches=2), small_ds, idx)
    assert np.array_equal(mb[:, 1:2], small_ds.a[idx] - small_ds.a_lagged[idx, 1])


def test_memory_only_variants(small_ds):
    base = train(small_ds, _cfg("ours"))
    res = train(small_ds, _cfg("memory_only_residual"), base=base)
    w = small_ds.windows[:5]
    prev = small_ds.a_prev[:5]
    _, mem_out = base.memory(w)
    assert np.array_equal(res.raw_action(w, prev), prev + mem_out)
    with pytest.raises(ValueError):
        res.raw_action(w)
    learned = train(small_ds, _cfg("memory_only_learned"), base=base)
    for k in base.params:
        assert np.array_equal(learned.params[k], base.params[k])
    assert any(k.startswith("ctl.") for k in learned.params)


def test_keyframe_weights_mean_normalized(small_ds):
    w = M.keyframe_weights(small_ds, 10.0)
    assert abs(w[small_ds.train_idx].mean() - 1) < 1e-12 and np.all(w > 0)
    assert np.all(M.keyframe_weights(small_ds, 0.0) == 1.0)


def test_dagger_aggregates_within_budget(dense_env, small_ds):
    cfg = _cfg("dagger", dagger_rounds=2, dagger_episodes=2, dagger_budget=500)
    pol = train(small_ds, cfg, env=dense_env)
    sizes = pol.metadata["dataset_sizes"]
    assert sizes[0] == len(small_ds) and all(b > a for a, b in zip(sizes, sizes[1:]))
    assert pol.metadata["queries"] <= 500
    with pytest.raises(ValueError):
        train(small_ds, cfg)


def test_history_mismatch_and_divergence(small_ds):
    with pytest.raises(ValueError, match="H="):
        train(small_ds, _cfg("bcoh", H=3))
    bad = small_ds.with_history(6)
    bad.a = bad.a.copy()
    bad.a[bad.train_idx] = np.nan
    with pytest.raises(M.DivergenceError):
        train(bad, _cfg("bcoh"))


def test_policy_save_load_roundtrip(tmp_path, small_ds):
    pol = train(small_ds, _cfg("ours"))
    M.save_policy(tmp_path / "p.json", pol)
    back = M.load_policy(tmp_path / "p.json")
    w = small_ds.windows[:30]
    assert np.array_equal(back.act(w), pol.act(w))
    with pytest.raises(ad.ShapeError):
        back.act(w[:, :3])


def test_report_rows(small_ds):
    pol = train(small_ds, _cfg("fca"))
    rows = pol.report.to_rows()
    assert len(rows) == 60 and "adversary_loss" in rows[0]
    assert rows[19]["val_loss"] != "" and rows[0]["val_loss"] == ""
