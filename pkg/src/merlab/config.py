"""Experiment configuration: tuned defaults per benchmark, config files and overrides.

Resolution order, later wins: tuned defaults for (benchmark, algorithm,
buffer) -> JSON config file -> explicit overrides (command-line flags).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError, InvalidInputError
from .learners import ALGORITHMS, LearnerConfig
from .streams import StreamSpec

BENCHMARKS = {"rot": "rotations", "perm": "permutations", "many": "many_permutations",
              "synthetic": "synthetic"}
DATA_ENV = "MERLAB_DATA_DIR"

# Tuned values per algorithm and hyperparameter: (value, settings it is best for).
# A setting is "<benchmark>" or "<benchmark>-<buffer>"; the more specific match wins.
# Batch sizes are listed as the number of memories drawn (k - 1).
_TUNED = {
    "online": {"alpha": [(0.0003, "rot"), (0.003, "perm many")]},
    "independent": {"alpha": [(0.01, "rot perm many")]},
    "task_input": {"alpha": [(0.01, "rot perm many")]},
    "ewc": {"alpha": [(0.001, "rot"), (0.003, "many"), (0.01, "perm")],
            "ewc_lambda": [(1.0, "many"), (10.0, "perm"), (100.0, "rot")]},
    "gem": {"alpha": [(0.003, "many-500"), (0.01, "rot perm many")],
            "gem_memory_strength": [(0.0, "rot-500 rot-200 perm-200 many-5120"),
                                    (0.1, "many-500"),
                                    (1.0, "rot-5120 perm-5120 perm-500")]},
    "er_reservoir": {"alpha": [(0.1, "rot perm many")],
                     "memories": [(5, "rot-500"), (10, "rot-200 perm-500 perm-200"),
                                  (25, "rot-5120 perm-5120 many")]},
    "er_tasks": {"alpha": [(0.003, "many-5120"), (0.01, "rot-500 rot-200 perm many-500"),
                           (0.03, "rot-5120")],
                 "memories": [(5, "many-500"), (10, "perm-200 many-5120"),
                              (25, "perm-5120 perm-500"), (50, "rot-200"),
                              (100, "rot-5120 rot-500")]},
    "mer_a1": {"alpha": [(0.03, "rot-5120 perm many"), (0.1, "rot-500 rot-200")],
               "gamma": [(1.0, "rot perm many")],
               "beta": [(0.01, "rot-500 rot-200 many-5120"), (0.03, "rot-5120 perm many-500")],
               "memories": [(5, "many"), (10, "rot-500 rot-200 perm-200"), (25, "perm-500"),
                            (100, "rot-5120 perm-5120")],
               "s": [(5, "rot-200"), (10, "rot perm many")]},
    "mer_obb": {"alpha": [(0.03, "rot-5120 perm-5120 perm-500 many-5120"),
                          (0.1, "rot-500 rot-200 perm-200 many-500")],
                "gamma": [(0.03, "rot-500 rot-200 perm-200 many-500"),
                          (0.1, "rot-5120 perm-5120 many-5120"), (0.3, "perm-500")],
                "memories": [(5, "perm-200 many-500"), (10, "rot-500 perm-500"),
                             (25, "rot-200 many-5120"), (50, "perm-5120"), (100, "rot-5120")],
                "s": [(1, "rot perm many")]},
    "mer_cel": {"alpha": [(0.01, "perm-5120 perm-500"), (0.03, "rot perm-200 many")],
                "gamma": [(0.03, "rot many"), (0.1, "perm")],
                "memories": [(5, "perm-200 many-500"), (25, "perm-500"),
                             (50, "rot-200 rot-500 many-5120"), (100, "rot-5120 perm-5120")],
                "s": [(2, "perm-200"), (5, "rot"), (10, "perm-5120 perm-500 many")]},
}

# buffer sizes that were tuned, per benchmark; other sizes borrow the nearest
TUNED_BUFFERS = {"rot": (5120, 500, 200), "perm": (5120, 500, 200), "many": (5120, 500)}


def _short(benchmark: str) -> str:
    for short, long in BENCHMARKS.items():
        if benchmark in (short, long):
            return short
    raise ConfigError("benchmark", f"unknown benchmark {benchmark!r}; choose from "
                                   f"{', '.join(BENCHMARKS.values())}")


def tuned_values(benchmark: str, algorithm: str, buffer: int) -> dict:
    """Tuned hyperparameters as ``LearnerConfig`` fields (``k`` includes the current example)."""
    bench = _short(benchmark)
    if algorithm not in ALGORITHMS:
        raise ConfigError("algorithm", f"unknown algorithm {algorithm!r}")
    table = _TUNED.get(algorithm, {})
    if bench == "synthetic" or not table:
        return {}
    tuned = TUNED_BUFFERS[bench]
    nearest = min(tuned, key=lambda b: abs(b - buffer))
    key = f"{bench}-{nearest}"
    out = {}
    for name, options in table.items():
        exact = [v for v, where in options if key in where.split()]
        broad = [v for v, where in options if bench in where.split()]
        if exact or broad:
            out[name] = (exact or broad)[0]
    if "memories" in out:
        out["k"] = out.pop("memories") + 1
    return out


def parse_preset(name: str) -> tuple[str, int, str]:
    """``"rot-5120-mer_a1"`` -> ``("rotations", 5120, "mer_a1")``."""
    parts = name.split("-", 2)
    if len(parts) != 3 or not parts[1].isdigit():
        raise ConfigError("preset", f"expected <benchmark>-<buffer>-<algorithm>, got {name!r}")
    return BENCHMARKS[_short(parts[0])], int(parts[1]), parts[2]


# ------------------------------------------------------------ experiment spec


@dataclass
class ExperimentSpec:
    stream: StreamSpec
    learner: LearnerConfig
    seeds: list[int]
    output_dir: Path
    probes: dict = field(default_factory=lambda: {"alignment": False, "eval_matrix": True})
    data_dir: Path | None = None
    # rows of the evaluation matrix measured in full; None picks by task count
    eval_rows: list[int] | None = None

    @property
    def benchmark(self) -> str:
        return self.stream.kind

    @property
    def needs_data(self) -> bool:
        return self.stream.kind != "synthetic"


_HYPER = {"alpha": float, "beta": float, "gamma": float, "s": int, "k": int,
          "ewc_lambda": float, "gem_memory_strength": float, "fisher_samples": int,
          "clone_on_boundary": bool}
_TOP = {"benchmark": str, "algorithm": str, "buffer": int, "seeds": list, "out": str,
        "data_dir": str, "preset": str, "alignment_probe": bool, "eval_matrix": bool,
        "hidden": list, "task_count": int, "train_per_task": int, "eval_rows": list,
        "memories": int}
KNOWN_KEYS = {**_TOP, **_HYPER}


def _check_type(key, value):
    want = KNOWN_KEYS[key]
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if want is int and isinstance(value, bool):
        raise ConfigError(key, "expected int, got bool")
    if not isinstance(value, want):
        raise ConfigError(key, f"expected {want.__name__}, got {type(value).__name__} {value!r}")
    if want is list and key in ("seeds", "hidden", "eval_rows"):
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(key, "expected a list of integers")
    return value


def _validate(layer: dict, source: str) -> dict:
    out = {}
    for key, value in layer.items():
        if key not in KNOWN_KEYS:
            raise ConfigError(key, f"unknown key {key!r} in {source}")
        out[key] = _check_type(key, value)
    return out


def load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError("<file>", f"{path}: invalid JSON ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError("<file>", f"{path}: top level must be an object")
    return _validate(data, str(path))


def parse_config(path=None, overrides: dict | None = None, preset: str | None = None) -> ExperimentSpec:
    """Resolve an :class:`ExperimentSpec` from tuned defaults, a JSON file and overrides."""
    file_layer = load_config_file(path) if path is not None else {}
    flag_layer = _validate({k: v for k, v in (overrides or {}).items() if v is not None}, "overrides")
    merged = {**file_layer, **flag_layer}
    preset = merged.pop("preset", preset)

    base = {"benchmark": "rotations", "algorithm": "online", "buffer": 0, "seeds": [0, 1, 2, 3, 4],
            "out": "results"}
    if preset is not None:
        bench, buf, alg = parse_preset(preset)
        base.update(benchmark=bench, buffer=buf, algorithm=alg)
    for key in ("benchmark", "algorithm", "buffer"):
        if key in merged:
            base[key] = merged[key]
    bench = BENCHMARKS[_short(base["benchmark"])]
    if base["algorithm"] not in ALGORITHMS:
        raise ConfigError("algorithm", f"unknown algorithm {base['algorithm']!r}")

    learner = {"algorithm": base["algorithm"], "buffer_capacity": base["buffer"]}
    learner.update(tuned_values(bench, base["algorithm"], base["buffer"]))
    if "memories" in merged:
        learner["k"] = merged.pop("memories") + 1
    learner.update({k: v for k, v in merged.items() if k in _HYPER})
    if "hidden" in merged:
        learner["hidden"] = tuple(merged["hidden"])
    seeds = merged.get("seeds", base["seeds"])
    if not seeds:
        raise ConfigError("seeds", "need at least one seed")
    learner["seed"] = seeds[0]
    try:
        learner_cfg = LearnerConfig(**learner)
    except InvalidInputError as e:
        raise ConfigError("learner", str(e)) from e

    stream = StreamSpec.preset(bench)
    if "task_count" in merged or "train_per_task" in merged:
        stream = StreamSpec(bench, merged.get("task_count", stream.task_count),
                            merged.get("train_per_task", stream.train_per_task))
    data_dir = merged.get("data_dir") or os.environ.get(DATA_ENV)
    return ExperimentSpec(
        stream=stream, learner=learner_cfg, seeds=list(seeds),
        output_dir=Path(merged.get("out", base["out"])),
        probes={"alignment": merged.get("alignment_probe", False),
                "eval_matrix": merged.get("eval_matrix", True)},
        data_dir=Path(data_dir) if data_dir else None,
        eval_rows=merged.get("eval_rows"))


def spec_to_dict(spec: ExperimentSpec) -> dict:
    learner = {f.name: getattr(spec.learner, f.name) for f in fields(spec.learner)}
    learner["hidden"] = list(learner["hidden"])
    return {"benchmark": spec.stream.kind, "task_count": spec.stream.task_count,
            "train_per_task": spec.stream.train_per_task, "seeds": spec.seeds,
            "learner": learner, "probes": spec.probes}
