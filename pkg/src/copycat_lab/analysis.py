"""Evaluation rollups, the history intervention, the previous-action probe and reports.

Run-directory layout consumed by :func:`report` (written by the CLI)::

    <root>/runs/<env>/<method>/seed<k>/eval.csv       one row per evaluated episode
    <root>/runs/<env>/<method>/seed<k>/analysis.csv   metric,value rows
    <root>/runs/<env>/<method>/seed<k>/train.csv      per-iteration training trace
    <root>/data/residuals.csv                   residual bucket fractions
"""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .demos import RESIDUAL_BUCKETS, REFERENCE_RESIDUAL_FRACTIONS, DemoDataset
from .envs import Env
from .nn import MlpSpec, adam_init, adam_step, init_mlp, mlp_forward, mlp_numpy
from .rollout import run_episodes

log = logging.getLogger(__name__)

STATUSES = ("success", "collision", "timeout", "fall")
A_EPS = 0.05


# -- evaluation ---------------------------------------------------------------

@dataclass
class EvalResult:
    """Outcomes of one policy on one condition for one batch of episodes."""
    condition: str
    episode_seeds: list
    statuses: list
    steps: list
    returns: list

    @property
    def counts(self) -> dict:
        return {s: self.statuses.count(s) for s in STATUSES}

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.returns))

    def rows(self):
        for seed, st, n, ret in zip(self.episode_seeds, self.statuses, self.steps, self.returns):
            yield {"condition": self.condition, "episode_seed": seed, "status": st,
                   "steps": n, "return": repr(float(ret))}


@dataclass
class EvalSummary:
    """Counts per condition, mean and std over evaluated policies (seeds)."""
    method: str
    condition: str
    n_episodes: int
    mean: dict
    std: dict            # None when only one seed
    mean_return: float
    std_return: float | None
    n_seeds: int


def eval_episode_seeds(n_episodes: int, seed: int, base: int = 1_000_000) -> list[int]:
    """Evaluation episodes never overlap the demo episodes (which start at 0)."""
    return [base + 10_000 * seed + i for i in range(n_episodes)]


def evaluate(policy, env: Env, n_episodes: int = 50, seed: int = 0, condition: str | None = None,
             H: int | None = None) -> EvalResult:
    """Roll ``policy`` out on ``n_episodes`` fresh episodes.

    ``policy`` is a TrainedPolicy or any callable ``f(windows, prev_actions)``;
    give ``H`` for plain callables.
    """
    H = policy.H if H is None else H
    if hasattr(policy, "obs_dim") and policy.obs_dim != env.obs_dim:
        raise ValueError(f"policy expects obs_dim {policy.obs_dim}, env {env.name} gives {env.obs_dim}")
    seeds = eval_episode_seeds(n_episodes, seed)
    recs = run_episodes(policy, env, seeds, H)
    cond = condition or getattr(env.config, "traffic_level", env.name)
    return EvalResult(cond, seeds, [r.status for r in recs], [r.steps for r in recs],
                      [r.ret for r in recs])


def expert_outcomes(env: Env, episode_seeds) -> list[str]:
    """Statuses of privileged-expert rollouts (the expert needs true states)."""
    out = []
    for s in episode_seeds:
        state, _ = env.reset(s)
        prev = np.zeros(env.action_dim)
        while not state.done:
            prev = env.expert(state, prev)
            state, _, _ = env.step(state, prev)
        out.append(state.status)
    return out


def summarize(method: str, results: list[EvalResult]) -> EvalSummary:
    if not results:
        raise ValueError("no evaluation results to summarize")
    conds = {r.condition for r in results}
    if len(conds) != 1:
        raise ValueError(f"results mix conditions {sorted(conds)}")
    counts = np.array([[r.counts[s] for s in STATUSES] for r in results], dtype=np.float64)
    rets = np.array([r.mean_return for r in results])
    multi = len(results) > 1
    return EvalSummary(
        method, results[0].condition, len(results[0].statuses),
        dict(zip(STATUSES, counts.mean(axis=0))),
        dict(zip(STATUSES, counts.std(axis=0, ddof=1))) if multi else None,
        float(rets.mean()), float(rets.std(ddof=1)) if multi else None, len(results))


# -- intervention -------------------------------------------------------------

@dataclass(frozen=True)
class InterventionReport:
    eligible: int
    stopped: int
    a_eps: float

    @property
    def rate(self) -> float:
        return self.stopped / self.eligible if self.eligible else 0.0


def constant_history(windows: np.ndarray) -> np.ndarray:
    """do(history): every frame of each window replaced by its newest frame."""
    w = np.asarray(windows)
    return np.repeat(w[:, :1], w.shape[1], axis=1)


def intervene_history(policy, ds: DemoDataset, a_eps: float = A_EPS, idx=None,
                      channel: int = 0) -> InterventionReport:
    """Count validation samples where a moving decision turns into a stop once
    the history is replaced by copies of the current frame."""
    if policy.H < 1:
        raise ValueError("the history intervention needs a policy with H >= 1")
    if ds.H != policy.H:
        raise ValueError(f"dataset H={ds.H} does not match policy H={policy.H}")
    idx = ds.val_idx if idx is None else np.asarray(idx)
    w = ds.windows[idx]
    prev = ds.a_prev[idx] if policy.kind == "memory_only_residual" else None
    speed = ds.speed[idx].reshape(len(idx), -1)[:, 0]
    a = policy.act(w, prev)[:, channel]
    a_do = policy.act(constant_history(w), prev)[:, channel]
    eligible = (speed > 0) & (a > a_eps)
    stopped = eligible & (a_do <= a_eps)
    return InterventionReport(int(eligible.sum()), int(stopped.sum()), a_eps)


# -- previous-action probe ----------------------------------------------------

@dataclass
class ProbeReport:
    hidden: int
    seeds: list
    train_mse: list
    val_mse: list

    @property
    def mean_val_mse(self) -> float:
        return float(np.mean(self.val_mse))

    @property
    def mean_train_mse(self) -> float:
        return float(np.mean(self.train_mse))


@dataclass(frozen=True)
class ProbeConfig:
    hidden: int = 32
    iterations: int = 1500
    batch_size: int = 256
    lr: float = 1e-3
    seeds: tuple = (0, 1, 2)


def _fit_probe(Xtr, ytr, Xva, yva, cfg: ProbeConfig, seed: int):
    spec = MlpSpec((Xtr.shape[1], cfg.hidden, ytr.shape[1]))
    params = init_mlp(spec, np.random.default_rng([seed, 31]), prefix="probe.")
    opt = adam_init(params, lr=cfg.lr)
    rng = np.random.default_rng([seed, 32])
    for _ in range(cfg.iterations):
        idx = rng.integers(0, len(Xtr), size=min(cfg.batch_size, len(Xtr)))
        tape = ad.Tape()
        P = {k: tape.leaf(v) for k, v in params.items()}
        loss = ad.l2_loss(mlp_forward(P, tape.leaf(Xtr[idx]), spec, "probe."), ytr[idx])
        tape.backward(loss)
        params, opt = adam_step(opt, params, {k: tape.grad(t) for k, t in P.items()})
    mse = lambda X, y: float(np.mean((mlp_numpy(params, X, spec, "probe.") - y) ** 2))
    return mse(Xtr, ytr), mse(Xva, yva)


def mi_probe(extractor, ds: DemoDataset, config: ProbeConfig = ProbeConfig(),
             target: str = "a_prev") -> ProbeReport:
    """Regress the previous action from a frozen representation.

    ``extractor`` maps a batch of windows to features (e.g. ``policy.features``).
    Features are standardized with train-split statistics; higher validation
    MSE means less previous-action information in the representation.
    """
    y = getattr(ds, target)
    F = np.asarray(extractor(ds.windows), dtype=np.float64)
    F = F.reshape(len(F), -1)
    tr, va = ds.train_idx, ds.val_idx
    mu, sd = F[tr].mean(axis=0), F[tr].std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    Fz = (F - mu) / sd
    out = ProbeReport(config.hidden, list(config.seeds), [], [])
    for s in config.seeds:
        tr_mse, va_mse = _fit_probe(Fz[tr], y[tr], Fz[va], y[va], config, s)
        out.train_mse.append(tr_mse)
        out.val_mse.append(va_mse)
    return out


# -- reporting ----------------------------------------------------------------

SUCCESS_HEADER = ["env", "method", "condition", "n_seeds", "success", "collision", "timeout", "fall"]
RETURN_HEADER = ["env", "method", "condition", "n_seeds", "return"]
ANALYSIS_HEADER = ["env", "method", "n_seeds", "change_pct", "probe_mse_x1e2"]
ABLATION_METHODS = ("ours", "memory_only_residual", "memory_only_learned", "memory_obj_at",
                    "memory_obj_aprev", "ours_no_stopgrad", "ours_multibranch",
                    "two_stream_bcoh", "two_stream_keyframe")


def fmt_cell(values, scale: float = 1.0, digits: int = 1) -> str:
    """'mean±std' over seeds; the std is 'n/a' for a single seed."""
    vals = np.asarray(values, dtype=np.float64) * scale
    mean = f"{vals.mean():.{digits}f}"
    if len(vals) < 2:
        return f"{mean}±n/a"
    return f"{mean}±{vals.std(ddof=1):.{digits}f}"


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=header, quoting=csv.QUOTE_MINIMAL, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _collect_runs(root: Path):
    """{(env, method): {seed: run_dir}} for every run directory under root/runs."""
    runs = defaultdict(dict)
    base = root / "runs"
    if not base.is_dir():
        return runs
    for edir in sorted(p for p in base.iterdir() if p.is_dir()):
        for mdir in sorted(p for p in edir.iterdir() if p.is_dir()):
            for sdir in sorted(p for p in mdir.iterdir() if p.is_dir() and p.name.startswith("seed")):
                runs[(edir.name, mdir.name)][int(sdir.name[4:])] = sdir
    return runs


def _eval_counts(run_dir: Path):
    path = run_dir / "eval.csv"
    if not path.exists():
        log.warning("missing evaluation file %s", path)
        return {}
    per = defaultdict(lambda: {**{s: 0 for s in STATUSES}, "returns": []})
    for row in read_csv(path):
        c = per[row["condition"]]
        c[row["status"]] += 1
        c["returns"].append(float(row["return"]))
    return per


def _analysis_values(run_dir: Path):
    path = run_dir / "analysis.csv"
    if not path.exists():
        return {}
    return {r["metric"]: float(r["value"]) for r in read_csv(path)}


def _svg_learning_curves(runs, out: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(6, 4))
    drawn = False
    for (env, method), seeds in sorted(runs.items()):
        for seed, d in sorted(seeds.items()):
            path = d / "train.csv"
            if not path.exists():
                continue
            rows = read_csv(path)
            it = [int(r["iteration"]) for r in rows if r["val_loss"] != ""]
            vl = [float(r["val_loss"]) for r in rows if r["val_loss"] != ""]
            if it:
                ax.plot(it, vl, label=f"{env}/{method} s{seed}", lw=1)
                drawn = True
    ax.set_xlabel("iteration")
    ax.set_ylabel("validation action loss")
    if drawn:
        ax.set_yscale("log")
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)


def _svg_residuals(root: Path, out: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    path = root / "data" / "residuals.csv"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    labels = ["<1e-3", "1e-3..1e-2", "1e-2..1e-1", ">=1e-1"]
    x = np.arange(len(labels))
    ax.bar(x + 0.2, REFERENCE_RESIDUAL_FRACTIONS, width=0.4, label="driving-log reference")
    if path.exists():
        rows = read_csv(path)
        ours = [float(r["fraction"]) for r in rows]
        ax.bar(x - 0.2, ours, width=0.4, label="demos")
    ax.set_xticks(x, labels)
    ax.set_ylabel("fraction of steps")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)


def report(root, out=None, plots: bool = True) -> dict:
    """Aggregate every run under ``root`` into CSV tables (and SVG plots).

    Missing files produce warnings and blank cells; nothing is fabricated.
    Returns {table name: rows}.
    """
    root = Path(root)
    out = Path(out) if out is not None else root / "report"
    out.mkdir(parents=True, exist_ok=True)
    runs = _collect_runs(root)
    success_rows, return_rows, analysis_rows, ablation_rows = [], [], [], []
    for (env, method), seeds in sorted(runs.items()):
        per_seed = {s: _eval_counts(d) for s, d in sorted(seeds.items())}
        conds = sorted({c for v in per_seed.values() for c in v})
        for cond in conds:
            have = [v[cond] for v in per_seed.values() if cond in v]
            row = {"env": env, "method": method, "condition": cond, "n_seeds": len(have)}
            for st in STATUSES:
                row[st] = fmt_cell([h[st] for h in have])
            success_rows.append(row)
            return_rows.append({"env": env, "method": method, "condition": cond, "n_seeds": len(have),
                                "return": fmt_cell([np.mean(h["returns"]) for h in have], digits=2)})
            if method in ABLATION_METHODS:
                ablation_rows.append({"env": env, "method": method, "condition": cond, "n_seeds": len(have),
                                      "success": row["success"]})
        vals = [_analysis_values(d) for d in seeds.values()]
        chg = [v["change_rate"] for v in vals if "change_rate" in v]
        mse = [v["probe_val_mse"] for v in vals if "probe_val_mse" in v]
        if chg or mse:
            analysis_rows.append({"env": env, "method": method, "n_seeds": max(len(chg), len(mse)),
                                  "change_pct": fmt_cell(chg, 100.0, 2) if chg else "",
                                  "probe_mse_x1e2": fmt_cell(mse, 100.0, 2) if mse else ""})
    write_csv(out / "success.csv", SUCCESS_HEADER, success_rows)
    write_csv(out / "returns.csv", RETURN_HEADER, return_rows)
    fm = ["env", "method", "condition", "n_seeds", "collision", "timeout", "fall"]
    write_csv(out / "failure_modes.csv", fm,
              [{k: r[k] for k in fm}
               for r in success_rows])
    write_csv(out / "ablations.csv", ["env", "method", "condition", "n_seeds", "success"], ablation_rows)
    write_csv(out / "analysis.csv", ANALYSIS_HEADER, analysis_rows)
    res_path = root / "data" / "residuals.csv"
    if res_path.exists():
        write_csv(out / "residuals.csv", ["bucket", "fraction", "reference"], [
            {"bucket": r["bucket"], "fraction": r["fraction"], "reference": repr(ref)}
            for r, ref in zip(read_csv(res_path), REFERENCE_RESIDUAL_FRACTIONS)])
    if plots:
        _svg_learning_curves(runs, out / "learning_curves.svg")
        _svg_residuals(root, out / "residuals.svg")
    return {"success": success_rows, "returns": return_rows, "analysis": analysis_rows,
            "ablations": ablation_rows}


def residual_rows(fractions, buckets=RESIDUAL_BUCKETS):
    edges = list(buckets) + [math.inf]
    return [{"bucket": f"[{lo:g},{hi:g})", "fraction": repr(float(f))}
            for lo, hi, f in zip(edges[:-1], edges[1:], fractions)]
