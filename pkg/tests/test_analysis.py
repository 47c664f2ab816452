import numpy as np
import pytest

from copycat_lab import analysis as an
from copycat_lab.methods import MethodConfig, train

FAST = dict(iterations=80, batch_size=32, val_every=40, hidden=(16, 16), memory_dim=8)


@pytest.fixture(scope="module")
def bcoh(small_ds):
    return train(small_ds, MethodConfig(kind="bcoh", **FAST))


def test_evaluate_counts_and_determinism(bcoh, dense_env):
    r1 = an.evaluate(bcoh, dense_env, 6, seed=2)
    r2 = an.evaluate(bcoh, dense_env, 6, seed=2)
    assert r1 == r2
    assert sum(r1.counts.values()) == 6
    assert r1.episode_seeds == an.eval_episode_seeds(6, 2)
    assert min(r1.episode_seeds) >= 1_000_000
    rows = list(r1.rows())
    assert len(rows) == 6 and rows[0]["condition"] == "dense"


def test_evaluate_rejects_mismatched_env(bcoh):
    from copycat_lab.envs import make_env
    with pytest.raises(ValueError, match="obs_dim"):
        an.evaluate(bcoh, make_env("hidden_velocity"), 2)


def test_expert_outcomes(dense_env):
    assert an.expert_outcomes(dense_env, range(5)) == ["success"] * 5


def test_summarize():
    r = [an.EvalResult("dense", [0, 1], ["success", "timeout"], [1, 2], [1.0, 0.0]),
         an.EvalResult("dense", [0, 1], ["success", "success"], [1, 2], [1.0, 1.0])]
    s = an.summarize("bcoh", r)
    assert s.mean == {"success": 1.5, "collision": 0.0, "timeout": 0.5, "fall": 0.0}
    assert abs(s.std["success"] - np.std([1, 2], ddof=1)) < 1e-15
    assert an.summarize("bcoh", r[:1]).std is None
    with pytest.raises(ValueError):
        an.summarize("x", [r[0], an.EvalResult("regular", [], [], [], [])])


def test_intervention_rate_bounds_and_purity(bcoh, small_ds):
    a = an.intervene_history(bcoh, small_ds)
    b = an.intervene_history(bcoh, small_ds)
    assert a == b and 0.0 <= a.rate <= 1.0 and a.stopped <= a.eligible


class _HistoryBlind:
    """Acts on the newest frame only, so the intervention cannot change it."""
    H = 6
    kind = "blind"

    def act(self, windows, prev=None):
        return np.tanh(windows[:, 0, :1] * 5 + 0.5)


def test_history_blind_policy_has_zero_change_rate(small_ds):
    rep = an.intervene_history(_HistoryBlind(), small_ds)
    assert rep.eligible > 0 and rep.rate == 0.0


def test_intervention_rejects_single_frame(small_ds):
    pol = train(small_ds.with_history(0), MethodConfig(kind="bcso", **FAST))
    with pytest.raises(ValueError):
        an.intervene_history(pol, small_ds.with_history(0))


def test_constant_history():
    w = np.arange(12.0).reshape(1, 3, 4)
    c = an.constant_history(w)
    assert all(np.array_equal(c[0, k], w[0, 0]) for k in range(3))


def test_probe_sanity_identity_beats_constant(small_ds):
    cfg = an.ProbeConfig(iterations=400, seeds=(0,))
    ident = an.mi_probe(lambda w: small_ds.a_prev, small_ds, cfg)
    const = an.mi_probe(lambda w: np.zeros((len(w), 3)), small_ds, cfg)
    assert 0 <= ident.mean_val_mse < const.mean_val_mse


def test_probe_is_deterministic(bcoh, small_ds):
    cfg = an.ProbeConfig(iterations=50, seeds=(0, 1))
    a, b = an.mi_probe(bcoh.features, small_ds, cfg), an.mi_probe(bcoh.features, small_ds, cfg)
    assert a.val_mse == b.val_mse and len(a.val_mse) == 2


def test_fmt_cell_and_csv_roundtrip(tmp_path):
    assert an.fmt_cell([1.0, 3.0]) == "2.0±1.4"
    assert an.fmt_cell([2.0]) == "2.0±n/a"
    rows = [{"a": "x,y", "b": 'say "hi"'}]
    an.write_csv(tmp_path / "t.csv", ["a", "b"], rows)
    assert an.read_csv(tmp_path / "t.csv") == rows
    assert '"x,y"' in (tmp_path / "t.csv").read_text()


def _fake_run(root, env, method, seed, statuses, change=None):
    d = root / "runs" / env / method / f"seed{seed}"
    d.mkdir(parents=True)
    an.write_csv(d / "eval.csv", ["condition", "episode_seed", "status", "steps", "return"],
                 [{"condition": "dense", "episode_seed": i, "status": s, "steps": 1, "return": "1.0"}
                  for i, s in enumerate(statuses)])
    if change is not None:
        an.write_csv(d / "analysis.csv", ["metric", "value"],
                     [{"metric": "change_rate", "value": change}, {"metric": "probe_val_mse", "value": 0.05}])


def test_report_tables(tmp_path):
    _fake_run(tmp_path, "braketown", "bcoh", 0, ["success", "timeout"], 0.4)
    _fake_run(tmp_path, "braketown", "bcoh", 1, ["success", "success"], 0.2)
    _fake_run(tmp_path, "braketown", "ours", 0, ["collision", "success"])
    (tmp_path / "runs" / "braketown" / "ours" / "seed1").mkdir()  # missing eval.csv
    tables = an.report(tmp_path, plots=True)
    succ = {r["method"]: r for r in tables["success"]}
    assert succ["bcoh"]["success"] == "1.5±0.7" and succ["bcoh"]["n_seeds"] == 2
    assert succ["ours"]["n_seeds"] == 1
    assert tables["analysis"][0]["change_pct"] == "30.00±14.14"
    out = tmp_path / "report"
    for name in ("success.csv", "returns.csv", "failure_modes.csv", "ablations.csv", "analysis.csv",
                 "learning_curves.svg", "residuals.svg"):
        assert (out / name).exists()
    assert [r["method"] for r in tables["ablations"]] == ["ours"]


def test_residual_rows():
    rows = an.residual_rows([0.5, 0.25, 0.25, 0.0])
    assert [r["bucket"] for r in rows] == ["[0,0.001)", "[0.001,0.01)", "[0.01,0.1)", "[0.1,inf)"]
