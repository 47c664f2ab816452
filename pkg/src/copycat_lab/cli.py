"""Command-line entry point: collect, train, eval, analyze, verify-bound, report, repro.

Every command writes into an output directory holding exactly one
``manifest.json`` (command line, config file contents, explicit flags, the
resolved config and its hash).  Flags override config-file values.  Logs go
to stderr, data to files.  ``COPYCAT_LAB_OUT`` sets the default output root.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as an
from .demos import DemoDataset, collect, load_dataset, residual_stats, save_dataset
from .envs import BrakeTownConfig, HiddenVelocityConfig, make_env
from .methods import KINDS, MEMORY_ONLY, MethodConfig, load_policy, save_policy, train
from .mibound import fuzz

log = logging.getLogger("copycat_lab")

OUT_ENV_VAR = "COPYCAT_LAB_OUT"
EVAL_HEADER = ["condition", "episode_seed", "status", "steps", "return"]
ENV_CONFIGS = {"braketown": BrakeTownConfig, "hidden_velocity": HiddenVelocityConfig}
DEFAULT_OUT_ROOT = "copycat_runs"


class CliError(Exception):
    pass


# -- config plumbing ----------------------------------------------------------

def env_method_defaults(env_name: str) -> dict:
    """Method settings that differ between the two environments."""
    if env_name == "hidden_velocity":
        return {"H": 1, "loss": "l2", "aux_velocity": False, "weight_decay": 0.0}
    return {"H": 6, "loss": "l1", "aux_velocity": True, "weight_decay": 0.0}


def config_hash(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _read_config(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise CliError(f"config file {path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}")
    if not isinstance(doc, dict):
        raise CliError(f"config file {path}: top level must be an object")
    return doc


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _kv_pairs(items, what):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise CliError(f"{what} override {item!r} must look like key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = _parse_value(v)
    return out


def _explicit(args, names):
    return {n: getattr(args, n) for n in names if hasattr(args, n)}


def _add_method_flags(p):
    for f in fields(MethodConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "seed":
            continue
        if f.name == "hidden":
            p.add_argument(flag, dest=f.name, default=argparse.SUPPRESS,
                           type=lambda s: tuple(int(x) for x in s.split(",")), help="widths, e.g. 64,64")
        elif isinstance(f.default, bool):
            p.add_argument(flag, dest=f.name, default=argparse.SUPPRESS,
                           type=lambda s: s.lower() in ("1", "true", "yes", "on"))
        elif f.name == "kind":
            p.add_argument("--method", dest="kind", default=argparse.SUPPRESS, choices=KINDS)
        else:
            p.add_argument(flag, dest=f.name, default=argparse.SUPPRESS, type=type(f.default))


def _check_types(cls, doc: dict, prefix: str):
    """Reject unknown fields and values whose type differs from the field default."""
    defaults = {f.name: f.default for f in fields(cls)}
    for key, value in doc.items():
        if key not in defaults:
            raise CliError(f"{prefix}.{key}: unknown field")
        d = defaults[key]
        if isinstance(d, bool):
            ok = isinstance(value, bool)
        elif isinstance(d, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(d, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif isinstance(d, tuple):
            ok = isinstance(value, (list, tuple)) and all(isinstance(v, (int, float)) for v in value)
        else:
            ok = isinstance(value, type(d))
        if not ok:
            raise CliError(f"{prefix}.{key}: expected {type(d).__name__}, got {value!r}")


def _resolve_method(env_name, file_cfg, flags, seed):
    resolved = dict(env_method_defaults(env_name))
    from_file = file_cfg.get("method", {})
    _check_types(MethodConfig, from_file, "method")
    resolved.update(from_file)
    resolved.update(flags)
    resolved["seed"] = seed
    try:
        return MethodConfig.from_dict(resolved)
    except (TypeError, ValueError) as e:
        raise CliError(f"method: {e}")


def _resolve_env(name, file_cfg, overrides):
    doc = dict(file_cfg.get("env", {}))
    name = name or doc.pop("name", None) or "braketown"
    doc.pop("name", None)
    doc.update(overrides)
    if name not in ENV_CONFIGS:
        raise CliError(f"env.name: unknown environment {name!r}")
    _check_types(ENV_CONFIGS[name], doc, "env")
    try:
        return make_env(name, doc)
    except (TypeError, ValueError) as e:
        raise CliError(f"env: {e}")


def _out_dir(args, command):
    if getattr(args, "out", None):
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUT_ENV_VAR, DEFAULT_OUT_ROOT)) / command
    if (out / "manifest.json").exists():
        log.info("overwriting previous run in %s", out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command, argv, file_cfg, flags, resolved, seeds, inputs, outputs):
    doc = {
        "command": command,
        "argv": list(argv),
        "code_version": __version__,
        "config_file": file_cfg,
        "flags": flags,
        "resolved": resolved,
        "config_hash": config_hash(resolved),
        "seeds": seeds,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True, default=str)
    return doc


def _finish_manifest(out: Path, extra: dict):
    path = out / "manifest.json"
    doc = json.loads(path.read_text())
    doc.update(extra)
    doc["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))


# -- commands -----------------------------------------------------------------

def cmd_collect(args, argv):
    file_cfg = _read_config(args.config)
    env = _resolve_env(args.env, file_cfg, _kv_pairs(args.set, "env"))
    out = _out_dir(args, "collect")
    H = args.H if args.H is not None else env_method_defaults(env.name)["H"]
    path = out / "demos.jsonl"
    resolved = {"env": env.to_dict(), "episodes": args.episodes, "noise_prob": args.noise_prob,
                "H": H, "seed": args.seed}
    write_manifest(out, "collect", argv, file_cfg, _explicit(args, ("env", "episodes", "noise_prob", "H")),
                   resolved, [args.seed], [], [path])
    trajs = collect(env, args.episodes, args.noise_prob, seed=args.seed)
    save_dataset(path, trajs, env, H, args.seed, args.noise_prob)
    fr = residual_stats(trajs)
    an.write_csv(out / "residuals.csv", ["bucket", "fraction"], an.residual_rows(fr))
    _finish_manifest(out, {"n_samples": int(sum(len(t) for t in trajs))})
    log.info("wrote %d episodes to %s", len(trajs), path)
    return 0


def _load_ds(path, H):
    try:
        trajs, header, env = load_dataset(path)
    except FileNotFoundError:
        raise CliError(f"dataset not found: {path}")
    return DemoDataset(trajs, H), header, env


def _train_one(env, ds, cfg: MethodConfig, base=None):
    if cfg.kind in MEMORY_ONLY and base is None:
        raise CliError(f"{cfg.kind} needs --base pointing at a trained 'ours' policy")
    return train(ds if cfg.H == ds.H else ds.with_history(cfg.H), cfg, env=env, base=base)


def cmd_train(args, argv):
    file_cfg = _read_config(args.config)
    flags = {k: v for k, v in vars(args).items() if k in {f.name for f in fields(MethodConfig)}}
    _, header, env = _load_ds(args.dataset, 0)
    cfg = _resolve_method(env.name, file_cfg, flags, args.seed)
    ds, _, _ = _load_ds(args.dataset, cfg.H)
    if cfg.kind in MEMORY_ONLY and not args.base:
        raise CliError(f"{cfg.kind} needs --base pointing at a trained 'ours' policy")
    out = _out_dir(args, "train")
    write_manifest(out, "train", argv, file_cfg, flags, cfg.to_dict(), [args.seed],
                   [args.dataset] + ([args.base] if args.base else []),
                   [out / "policy.json", out / "train.csv"])
    base = load_policy(args.base) if args.base else None
    policy = _train_one(env, ds, cfg, base)
    save_policy(out / "policy.json", policy)
    rows = policy.report.to_rows() if policy.report else []
    header = ["iteration", "train_loss", "lr", "val_loss"] + (sorted(policy.report.extra) if policy.report else [])
    an.write_csv(out / "train.csv", header, rows)
    _finish_manifest(out, {"wall_time": policy.report.wall_time if policy.report else 0.0})
    return 0


def cmd_eval(args, argv):
    file_cfg = _read_config(args.config)
    try:
        policy = load_policy(args.policy)
    except FileNotFoundError:
        raise CliError(f"policy not found: {args.policy}")
    env = _resolve_env(args.env, file_cfg, _kv_pairs(args.set, "env"))
    out = _out_dir(args, "eval")
    resolved = {"env": env.to_dict(), "episodes": args.episodes, "seed": args.seed}
    write_manifest(out, "eval", argv, file_cfg, _explicit(args, ("env", "episodes")), resolved,
                   [args.seed], [args.policy], [out / "eval.csv"])
    res = an.evaluate(policy, env, args.episodes, args.seed)
    an.write_csv(out / "eval.csv", EVAL_HEADER, res.rows())
    log.info("%s", res.counts)
    return 0



def cmd_analyze(args, argv):
    policy = load_policy(args.policy)
    ds, _, _ = _load_ds(args.dataset, policy.H)
    out = _out_dir(args, "analyze")
    resolved = {"intervention": args.intervention, "mi_probe": args.mi_probe, "a_eps": args.a_eps,
                "probe_iterations": args.probe_iterations}
    write_manifest(out, "analyze", argv, {}, resolved, resolved, [], [args.policy, args.dataset],
                   [out / "analysis.csv"])
    rows = analyze_policy(policy, ds, args.intervention, args.mi_probe, args.a_eps,
                          an.ProbeConfig(iterations=args.probe_iterations))
    an.write_csv(out / "analysis.csv", ["metric", "value"], rows)
    return 0


def analyze_policy(policy, ds, intervention=True, probe=True, a_eps=an.A_EPS,
                   probe_cfg=an.ProbeConfig()):
    rows = []
    if intervention and policy.H >= 1:
        rep = an.intervene_history(policy, ds, a_eps)
        rows += [{"metric": "eligible", "value": rep.eligible},
                 {"metric": "stopped", "value": rep.stopped},
                 {"metric": "change_rate", "value": repr(rep.rate)}]
    if probe and policy.H >= 1:
        pr = an.mi_probe(policy.features, ds, probe_cfg)
        rows += [{"metric": "probe_train_mse", "value": repr(pr.mean_train_mse)},
                 {"metric": "probe_val_mse", "value": repr(pr.mean_val_mse)}]
    return rows


def cmd_verify_bound(args, argv):
    out = _out_dir(args, "verify-bound")
    resolved = {"trials": args.trials, "M": args.M, "A": args.A, "seed": args.seed,
                "concentration": args.concentration}
    write_manifest(out, "verify-bound", argv, {}, resolved, resolved, [args.seed], [],
                   [out / "bound.csv", out / "summary.csv"])
    rows, worst, worst_eq = [], np.inf, 0.0
    for i, chk in fuzz(args.trials, args.M, args.A, args.seed, args.concentration):
        s1, s2, s3, gap = chk.proof_steps
        rows.append({"trial": i, "lhs": repr(chk.lhs), "rhs": repr(chk.rhs), "slack": repr(chk.slack),
                     "step1": repr(s1), "step2": repr(s2), "step3": repr(s3), "gap": repr(gap),
                     "holds": int(chk.holds)})
        worst = min(worst, chk.slack)
        worst_eq = max(worst_eq, s1, s2, s3)
    an.write_csv(out / "bound.csv", ["trial", "lhs", "rhs", "slack", "step1", "step2", "step3", "gap", "holds"], rows)
    holds = all(r["holds"] for r in rows)
    an.write_csv(out / "summary.csv", ["trials", "min_slack", "max_equality_residual", "all_hold"],
                 [{"trials": args.trials, "min_slack": repr(float(worst)),
                   "max_equality_residual": repr(float(worst_eq)), "all_hold": int(holds)}])
    print(f"trials={args.trials} min_slack={worst:.3e} max_equality_residual={worst_eq:.3e} all_hold={holds}")
    return 0 if holds else 1


def cmd_report(args, argv):
    root = Path(args.root)
    if not root.is_dir():
        raise CliError(f"run directory not found: {root}")
    out = Path(args.out) if args.out else root / "report"
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "report", argv, {}, {"root": str(root)}, {"root": str(root)}, [], [root], [out])
    an.report(root, out, plots=not args.no_plots)
    return 0


# -- repro pipeline -----------------------------------------------------------

QUICK = {"episodes": 100, "iterations": 3000, "eval_episodes": 20, "seeds": 3,
         "probe_iterations": 400, "methods": ("bcso", "bcoh", "ours"), "conditions": ("dense",),
         "hv": False}
FULL = {"episodes": 200, "iterations": 10000, "eval_episodes": 50, "seeds": 3,
        "probe_iterations": 1500,
        "methods": ("bcso", "bcoh", "ours", "hd", "fca", "keyframe", "dagger", "memory_only_residual",
                    "memory_only_learned", "memory_obj_at", "memory_obj_aprev", "ours_no_stopgrad",
                    "ours_multibranch", "two_stream_bcoh", "two_stream_keyframe"),
        "conditions": ("dense", "regular"), "hv": True, "hv_seeds": 5, "hv_samples": 20000,
        "hv_iterations": 5000, "hv_episodes": 20}
NOISE_PROB = 0.2


def _run_task(task):
    """Train, evaluate and analyze one (env, method, seed) run; returns its directory."""
    root = Path(task["root"])
    env = make_env(task["env"], task["env_overrides"])
    run_dir = root / "runs" / task["env"] / task["method"] / f"seed{task['seed_index']}"
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg = MethodConfig.from_dict(task["method_config"])
    write_manifest(run_dir, "repro-run", [], {}, {}, {"task": task}, [cfg.seed],
                   [task["dataset"]], [run_dir / "policy.json"])
    trajs, _, _ = load_dataset(task["dataset"])
    ds = DemoDataset(trajs, cfg.H)
    base = None
    if cfg.kind in MEMORY_ONLY:
        base = load_policy(root / "runs" / task["env"] / "ours" / f"seed{task['seed_index']}" / "policy.json")
    policy = _train_one(env, ds, cfg, base)
    save_policy(run_dir / "policy.json", policy)
    if policy.report:
        an.write_csv(run_dir / "train.csv", ["iteration", "train_loss", "lr", "val_loss"] +
                     sorted(policy.report.extra), policy.report.to_rows())
    rows = []
    for cond in task["conditions"]:
        ov = dict(task["env_overrides"])
        if task["env"] == "braketown":
            ov["traffic_level"] = cond
        res = an.evaluate(policy, make_env(task["env"], ov), task["eval_episodes"], task["eval_seed"],
                          condition=cond)
        rows += list(res.rows())
    an.write_csv(run_dir / "eval.csv", EVAL_HEADER, rows)
    if task["analyze"] and policy.H >= 1:
        arows = analyze_policy(policy, ds, probe_cfg=an.ProbeConfig(iterations=task["probe_iterations"]))
        an.write_csv(run_dir / "analysis.csv", ["metric", "value"], arows)
    return str(run_dir)


def repro_tasks(root: Path, plan: dict, master_seed: int):
    """Data collection (done here) plus the list of run tasks for ``plan``."""
    data = root / "data"
    data.mkdir(parents=True, exist_ok=True)
    tasks = []
    bt_env = make_env("braketown", {"traffic_level": "dense"})
    bt_path = data / "braketown_dense.jsonl"
    trajs = collect(bt_env, plan["episodes"], NOISE_PROB, seed=master_seed)
    save_dataset(bt_path, trajs, bt_env, 6, master_seed, NOISE_PROB)
    an.write_csv(data / "residuals.csv", ["bucket", "fraction"], an.residual_rows(residual_stats(trajs)))
    for k in range(plan["seeds"]):
        for method in plan["methods"]:
            cfg = replace(MethodConfig(kind=method, **{**env_method_defaults("braketown"),
                                                        "H": 0 if method == "bcso" else 6}),
                          iterations=plan["iterations"], seed=master_seed * 1000 + k)
            tasks.append({"root": str(root), "env": "braketown", "env_overrides": {"traffic_level": "dense"},
                          "method": method, "seed_index": k, "method_config": cfg.to_dict(),
                          "dataset": str(bt_path), "conditions": list(plan["conditions"]),
                          "eval_episodes": plan["eval_episodes"], "eval_seed": k,
                          "analyze": True, "probe_iterations": plan["probe_iterations"]})
    if plan.get("hv"):
        hv = make_env("hidden_velocity")
        hv_path = data / "hidden_velocity.jsonl"
        n_ep = max(1, plan["hv_samples"] // hv.config.horizon)
        save_dataset(hv_path, collect(hv, n_ep, NOISE_PROB, seed=master_seed), hv, 1, master_seed, NOISE_PROB)
        for k in range(plan["hv_seeds"]):
            for method in ("bcso", "bcoh", "ours"):
                d = env_method_defaults("hidden_velocity")
                cfg = MethodConfig(kind=method, **{**d, "H": 0 if method == "bcso" else d["H"]},
                                   iterations=plan["hv_iterations"], seed=master_seed * 1000 + k)
                tasks.append({"root": str(root), "env": "hidden_velocity", "env_overrides": {},
                              "method": method, "seed_index": k, "method_config": cfg.to_dict(),
                              "dataset": str(hv_path), "conditions": ["hidden_velocity"],
                              "eval_episodes": plan["hv_episodes"], "eval_seed": k,
                              "analyze": False, "probe_iterations": plan["probe_iterations"]})
    return tasks


def run_tasks(tasks, workers: int = 1):
    """Runs tasks, memory-only variants after the base runs they reuse."""
    first = [t for t in tasks if t["method"] not in MEMORY_ONLY]
    second = [t for t in tasks if t["method"] in MEMORY_ONLY]
    done = []
    for stage in (first, second):
        if workers > 1 and len(stage) > 1:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                done += list(ex.map(_run_task, stage))
        else:
            done += [_run_task(t) for t in stage]
    return done


def cmd_repro(args, argv):
    plan = dict(FULL if args.full else QUICK)
    out = _out_dir(args, "repro")
    resolved = {"plan": {k: list(v) if isinstance(v, tuple) else v for k, v in plan.items()},
                "seed": args.seed, "noise_prob": NOISE_PROB}
    write_manifest(out, "repro", argv, {}, {"full": args.full, "workers": args.workers}, resolved,
                   [args.seed], [], [out / "report"])
    t0 = time.perf_counter()
    tasks = repro_tasks(out, plan, args.seed)
    run_tasks(tasks, args.workers)
    an.report(out, out / "report", plots=not args.no_plots)
    _finish_manifest(out, {"wall_time": time.perf_counter() - t0, "n_runs": len(tasks)})
    log.info("repro finished in %.1fs", time.perf_counter() - t0)
    return 0


# -- parser -------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="copycat-lab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", help="roll out the scripted expert and save demonstrations")
    c.add_argument("--env", choices=("braketown", "hidden_velocity"))
    c.add_argument("--config", help="JSON file with an 'env' object")
    c.add_argument("--set", action="append", metavar="KEY=VALUE", help="env config override")
    c.add_argument("--episodes", type=int, default=200)
    c.add_argument("--noise-prob", type=float, default=NOISE_PROB)
    c.add_argument("--H", type=int, default=None, help="history length recorded in the header")
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--out")

    t = sub.add_parser("train", help="train one method on a demonstration file")
    t.add_argument("--dataset", required=True)
    t.add_argument("--config", help="JSON file with a 'method' object")
    t.add_argument("--base", help="trained 'ours' policy reused by memory-only variants")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--out")
    _add_method_flags(t)

    e = sub.add_parser("eval", help="evaluate a trained policy")
    e.add_argument("--policy", required=True)
    e.add_argument("--env", choices=("braketown", "hidden_velocity"))
    e.add_argument("--config")
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.add_argument("--episodes", type=int, default=50)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")

    a = sub.add_parser("analyze", help="history intervention and previous-action probe")
    a.add_argument("--policy", required=True)
    a.add_argument("--dataset", required=True)
    a.add_argument("--intervention", action="store_true")
    a.add_argument("--mi-probe", action="store_true")
    a.add_argument("--a-eps", type=float, default=an.A_EPS)
    a.add_argument("--probe-iterations", type=int, default=an.ProbeConfig.iterations)
    a.add_argument("--out")

    v = sub.add_parser("verify-bound", help="exact check of the residual information bound")
    v.add_argument("--trials", type=int, default=1000)
    v.add_argument("--M", type=int, default=4)
    v.add_argument("--A", type=int, default=3)
    v.add_argument("--concentration", type=float, default=1.0)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out")

    r = sub.add_parser("report", help="aggregate runs into CSV tables and SVG plots")
    r.add_argument("--root", required=True)
    r.add_argument("--out")
    r.add_argument("--no-plots", action="store_true")

    q = sub.add_parser("repro", help="collect, train, evaluate, analyze and report in one go")
    mode = q.add_mutually_exclusive_group()
    mode.add_argument("--quick", action="store_true", help="3 methods x 3 seeds at reduced size (default)")
    mode.add_argument("--full", action="store_true", help="all methods, both conditions, second env")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--workers", type=int, default=1)
    q.add_argument("--no-plots", action="store_true")
    q.add_argument("--out")
    return p


COMMANDS = {"collect": cmd_collect, "train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze,
            "verify-bound": cmd_verify_bound, "report": cmd_report, "repro": cmd_repro}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "analyze" and not (args.intervention or args.mi_probe):
        args.intervention = args.mi_probe = True
    try:
        return COMMANDS[args.command](args, argv)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
