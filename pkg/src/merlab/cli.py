"""Command-line entry point: ``merlab run|grid|rl|probe|report``."""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import (BENCHMARKS, ExperimentSpec, parse_config, spec_to_dict)
from .errors import ConfigError
from .learners import make_learner, sub_seeds
from .metrics import alignment_probe, summarize, train_and_evaluate
from .nn import NetworkSpec
from .rl import DQNConfig, train_dqn
from .streams import build_stream, load_mnist

COLUMNS = ["seed", "algorithm", "benchmark", "buffer", "RA", "LA", "BTI", "FTI", "wall_seconds"]
METRICS = ["RA", "LA", "BTI", "FTI"]

_BASE_CACHE: dict = {}


def _base_data(data_dir):
    if data_dir is None:
        raise ConfigError("data_dir", "MNIST benchmarks need --data-dir or MERLAB_DATA_DIR")
    key = str(data_dir)
    if key not in _BASE_CACHE:
        _BASE_CACHE[key] = load_mnist(data_dir)
    return _BASE_CACHE[key]


def build_for_seed(spec: ExperimentSpec, seed: int):
    """Stream and learner for one seed of an experiment."""
    stream_spec = replace(spec.stream, seed=sub_seeds(seed)["stream"])
    base = _base_data(spec.data_dir) if spec.needs_data else None
    stream = build_stream(stream_spec, base)
    cfg = spec.learner.with_(seed=seed)
    net = NetworkSpec(stream.input_dim, cfg.hidden, stream.n_classes)
    return stream, make_learner(net, cfg, stream.task_count)


def run_seed(spec: ExperimentSpec, seed: int) -> dict:
    t0 = time.perf_counter()
    stream, learner = build_for_seed(spec, seed)
    result = {"seed": seed}
    if spec.probes.get("alignment"):
        trace = alignment_probe(learner, stream, sub_seeds(seed)["probe"])
        result["alignment"] = {"mean": trace.mean, "std": trace.std, "count": len(trace.samples)}
    else:
        m = train_and_evaluate(learner, stream, spec.eval_rows)
        result.update(summarize(m))
        result["matrix"] = m.to_dict()
    result["wall_seconds"] = time.perf_counter() - t0
    return result


def _safe_run(spec, seed):
    try:
        return run_seed(spec, seed)
    except Exception as e:  # one failing seed must not stop the sweep
        return {"seed": seed, "error": f"{type(e).__name__}: {e}",
                "traceback": traceback.format_exc()}


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def mean_std(values) -> dict:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else None
    return {"mean": float(np.mean(vals)), "std": std, "n": len(vals)}


def run_experiment(spec: ExperimentSpec, workers: int = 1, stem: str | None = None) -> dict:
    """Run every seed and write ``<stem>.csv`` plus ``<stem>.summary.json``."""
    if spec.needs_data:
        _base_data(spec.data_dir)  # fail before any training
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or f"{spec.stream.kind}-{spec.learner.buffer_capacity}-{spec.learner.algorithm}"
    if workers > 1 and len(spec.seeds) > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_safe_run, [spec] * len(spec.seeds), spec.seeds))
    else:
        results = [_safe_run(spec, s) for s in spec.seeds]

    ok = [r for r in results if "error" not in r]
    with open(out / f"{stem}.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(COLUMNS)
        for r in ok:
            w.writerow([r["seed"], spec.learner.algorithm, spec.stream.kind,
                        spec.learner.buffer_capacity, *(_fmt(r.get(m)) for m in METRICS),
                        f"{r['wall_seconds']:.3f}"])
    summary = {"spec": spec_to_dict(spec),
               "metrics": {m: mean_std([r.get(m) for r in ok]) for m in METRICS},
               "failures": [{"seed": r["seed"], "error": r["error"]} for r in results if "error" in r]}
    if spec.probes.get("alignment"):
        summary["alignment"] = {"per_seed": {r["seed"]: r["alignment"] for r in ok},
                                **mean_std([r["alignment"]["mean"] for r in ok])}
    summary["timing"] = {"wall_seconds": [r["wall_seconds"] for r in ok]}
    with open(out / f"{stem}.summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    if spec.probes.get("eval_matrix") and not spec.probes.get("alignment"):
        with open(out / f"{stem}.matrices.json", "w") as f:
            json.dump({r["seed"]: r["matrix"] for r in ok}, f)
    validate_summary(out / f"{stem}.csv", summary)
    return {"results": results, "summary": summary, "csv": out / f"{stem}.csv"}


def read_results(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def validate_summary(csv_path, summary: dict) -> None:
    """Recompute the summary statistics from the CSV rows and compare."""
    rows = read_results(csv_path)
    for m in METRICS:
        vals = [float(r[m]) for r in rows if r[m] != ""]
        again = mean_std(vals)
        want = summary["metrics"][m]
        for key in ("mean", "std"):
            a, b = again[key], want[key]
            if (a is None) != (b is None) or (a is not None and abs(a - b) > 1e-5):
                raise RuntimeError(f"summary {m}.{key} disagrees with {csv_path}: {b} vs {a}")


# ------------------------------------------------------------------ verbs


def _overrides(args) -> dict:
    keys = ("benchmark", "algorithm", "buffer", "out", "data_dir", "alpha", "beta", "gamma",
            "s", "k", "memories", "ewc_lambda", "gem_memory_strength", "task_count",
            "train_per_task")
    ov = {k: getattr(args, k, None) for k in keys}
    if getattr(args, "seeds", None) is not None:
        ov["seeds"] = parse_seeds(args.seeds)
    if getattr(args, "hidden", None) is not None:
        ov["hidden"] = [int(h) for h in args.hidden.split(",")]
    if getattr(args, "benchmark", None) is not None:
        ov["benchmark"] = BENCHMARKS.get(args.benchmark, args.benchmark)
    return ov


def parse_seeds(text: str) -> list[int]:
    """``"0-4"`` or ``"0,2,5"``."""
    try:
        if "-" in text:
            lo, hi = text.split("-")
            return list(range(int(lo), int(hi) + 1))
        return [int(s) for s in text.split(",") if s]
    except ValueError as e:
        raise ConfigError("seeds", f"cannot parse seeds {text!r}") from e


def cmd_run(args, probe=False) -> int:
    ov = _overrides(args)
    if probe:
        ov["alignment_probe"] = True
    spec = parse_config(args.config, ov, args.preset)
    res = run_experiment(spec, args.workers)
    s = res["summary"]
    for m in METRICS:
        st = s["metrics"][m]
        if st["mean"] is not None:
            sd = "" if st["std"] is None else f" ± {100 * st['std']:.2f}"
            print(f"{m:>3}: {100 * st['mean']:.2f}{sd}")
    if probe:
        a = s["alignment"]
        print(f"alignment: {a['mean']:.4f}" + (f" ± {a['std']:.4f}" if a["std"] is not None else ""))
    for fail in s["failures"]:
        print(f"seed {fail['seed']} failed: {fail['error']}", file=sys.stderr)
    print(f"wrote {res['csv']}")
    return 1 if s["failures"] else 0


def cmd_grid(args) -> int:
    status = 0
    for alg in args.algorithms.split(","):
        for buf in (int(b) for b in args.buffers.split(",")):
            ns = argparse.Namespace(**{**vars(args), "algorithm": alg, "buffer": buf})
            print(f"== {alg} buffer {buf}")
            status |= cmd_run(ns)
    return status


def cmd_rl(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kw = {k: getattr(args, k) for k in ("alpha", "beta", "frames_per_task", "task_count")
          if getattr(args, k) is not None}
    if args.gamma is not None:
        kw["gamma_meta"] = args.gamma
    finals = {}
    for variant in args.variants.split(","):
        for seed in parse_seeds(args.seeds):
            cfg = DQNConfig(seed=seed, **kw)
            res = train_dqn(cfg, variant)
            res.write_csv(out / f"catcher-{variant}-seed{seed}.csv")
            task0 = res.task_scores(0)
            finals[f"{variant}-{seed}"] = {"final_task0": task0[-1][1],
                                           "peak_task0": max(s for _, s in task0)}
            print(f"{variant} seed {seed}: task-0 final {task0[-1][1]:.1f}, "
                  f"peak {max(s for _, s in task0):.1f}")
    (out / "catcher-summary.json").write_text(json.dumps(finals, indent=2, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    paths = [Path(p) for p in args.paths]
    files = [q for p in paths for q in (sorted(p.glob("*.csv")) if p.is_dir() else [p])]
    print(f"{'benchmark':<18}{'algorithm':<14}{'buffer':>7}{'seeds':>6}"
          + "".join(f"{m:>16}" for m in METRICS))
    for path in files:
        rows = read_results(path)
        if not rows or "RA" not in rows[0]:
            continue
        line = f"{rows[0]['benchmark']:<18}{rows[0]['algorithm']:<14}{rows[0]['buffer']:>7}{len(rows):>6}"
        for m in METRICS:
            st = mean_std([float(r[m]) for r in rows if r[m] != ""])
            if st["mean"] is None:
                line += f"{'-':>16}"
            else:
                sd = f"±{100 * st['std']:.2f}" if st["std"] is not None else ""
                line += f"{100 * st['mean']:>9.2f}{sd:>7}"
        print(line)
    return 0


def _add_common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--preset", help="tuned setting such as rot-5120-mer_a1")
    p.add_argument("--benchmark", choices=sorted(set(BENCHMARKS) | set(BENCHMARKS.values())))
    p.add_argument("--algorithm")
    p.add_argument("--buffer", type=int)
    p.add_argument("--seeds", help="e.g. 0-4 or 0,3")
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--out")
    p.add_argument("--workers", type=int, default=1)
    for name in ("alpha", "beta", "gamma", "ewc_lambda", "gem_memory_strength"):
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=float)
    for name in ("s", "k", "memories", "task_count", "train_per_task"):
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=int)
    p.add_argument("--hidden", help="comma-separated hidden widths")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="merlab", description="Continual-learning experiments")
    sub = ap.add_subparsers(dest="verb", required=True)
    _add_common(sub.add_parser("run", help="train one configuration over seeds"))
    _add_common(sub.add_parser("probe", help="gradient-alignment probe over seeds"))
    g = sub.add_parser("grid", help="run several algorithms and buffer sizes")
    _add_common(g)
    g.add_argument("--algorithms", required=True)
    g.add_argument("--buffers", required=True)
    r = sub.add_parser("rl", help="DQN with plain or meta-experience replay on Catcher-lite")
    r.add_argument("--variants", default="er,mer")
    r.add_argument("--seeds", default="0-2")
    r.add_argument("--out", default="results/rl")
    for name in ("alpha", "beta", "gamma"):
        r.add_argument(f"--{name}", type=float)
    r.add_argument("--frames-per-task", dest="frames_per_task", type=int)
    r.add_argument("--task-count", dest="task_count", type=int)
    rep = sub.add_parser("report", help="tabulate result CSVs (percent)")
    rep.add_argument("paths", nargs="+")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "run":
            return cmd_run(args)
        if args.verb == "probe":
            return cmd_run(args, probe=True)
        if args.verb == "grid":
            return cmd_grid(args)
        if args.verb == "rl":
            return cmd_rl(args)
        return cmd_report(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
