"""Continual learners behind one contract.

Every learner consumes a stream one :class:`~merlab.nn.Example` at a time via
``observe`` and exposes ``logits(X, task)`` for evaluation.  Parameters live
in a flat float64 vector (``theta``) updated in place by the compiled
kernels; ``params`` hands out a copy as a :class:`~merlab.nn.ParamVector`.

Replay learners store row ids of their private :class:`ExamplePool` in the
memory.  Setting ``sample_log = []`` records each step's batch layout; a
learner whose ``replay`` is an iterator consumes layouts from it instead of
sampling, which lets two learners be driven by the same draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Iterable, Iterator

import numpy as np

from . import memory as mem
from .errors import InvalidInputError
from .gem import project_gradient
from .nn import (Example, ExamplePool, NetworkSpec, ParamVector, _lerp, init_params,
                 layout_of, logits_batch)

ALGORITHMS = ("online", "independent", "task_input", "ewc", "gem", "er_reservoir",
              "er_tasks", "mer_a1", "mer_obb", "mer_cel", "reptile_offline")


@dataclass(frozen=True)
class LearnerConfig:
    algorithm: str = "online"
    alpha: float = 0.01
    beta: float = 1.0
    gamma: float = 1.0
    s: int = 1
    # batch size including the current example (tuned tables list k - 1 memories)
    k: int = 1
    buffer_capacity: int = 0
    ewc_lambda: float = 0.0
    gem_memory_strength: float = 0.0
    seed: int = 0
    fisher_samples: int = 1000
    clone_on_boundary: bool = False
    hidden: tuple[int, ...] = (100, 100)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise InvalidInputError(f"unknown algorithm {self.algorithm!r}")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise InvalidInputError(f"{f.name} must be finite, got {v}")
        for name in ("alpha", "beta", "gamma", "ewc_lambda", "gem_memory_strength"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be >= 0")
        if self.s < 1 or self.k < 1:
            raise InvalidInputError(f"s and k must be >= 1 (s={self.s}, k={self.k})")
        if self.buffer_capacity < 0 or self.fisher_samples < 1:
            raise InvalidInputError("buffer_capacity must be >= 0 and fisher_samples >= 1")

    def with_(self, **kw) -> "LearnerConfig":
        return replace(self, **kw)


def sub_seeds(master: int) -> dict[str, int]:
    """Independent child seeds for each randomness source of one run."""
    names = ("init", "stream", "sampling", "probe")
    children = np.random.SeedSequence(master).spawn(len(names))
    return {n: int(c.generate_state(1, dtype=np.uint32)[0]) for n, c in zip(names, children)}


class Learner:
    """Single network trained by plain SGD; subclasses change ``_step``."""

    uses_task_heads = False

    def __init__(self, spec: NetworkSpec, config: LearnerConfig, task_count: int = 1):
        self.config = config
        self.task_count = task_count
        if self.uses_task_heads:
            spec = NetworkSpec(spec.input_dim, spec.hidden_dims, spec.output_dim,
                               head_count=task_count)
        self.spec = spec
        seeds = sub_seeds(config.seed)
        self.theta = init_params(spec, seeds["init"]).values
        self.rng = np.random.default_rng(seeds["sampling"])
        self.pool = ExamplePool(spec.input_dim)
        self.layout = layout_of(spec)
        self._scratch = self.layout.scratch()
        self.steps = 0
        self.sample_log: list | None = None
        self.replay: Iterator | None = None

    @property
    def params(self) -> ParamVector:
        return ParamVector(self.theta.copy(), self.spec)

    def logits(self, X: np.ndarray, task: int = 0) -> np.ndarray:
        head = task if self.spec.head_count > 1 else 0
        return logits_batch(self.theta, self.spec, X, head)

    def observe(self, example: Example) -> None:
        if self.uses_task_heads and not 0 <= example.task_id < self.task_count:
            raise InvalidInputError(f"task id {example.task_id} outside [0, {self.task_count})")
        row = self.pool.add(example)
        self._step(row, example)
        self.steps += 1

    def fit(self, examples: Iterable[Example]) -> "Learner":
        for ex in examples:
            self.observe(ex)
        return self

    # helpers shared by subclasses

    def _sgd(self, rows, lrs) -> float:
        return self.pool.sgd_seq(self.theta, self.spec, rows, lrs, self._scratch)

    def _grad(self, rows, coefs, out=None) -> np.ndarray:
        g = np.zeros_like(self.theta) if out is None else out
        self.pool.grad_accum(self.theta, self.spec, rows, coefs, g, self._scratch)
        return g

    def _layout(self, make):
        """Next batch layout: replayed if a replay source is set, else sampled."""
        layout = next(self.replay) if self.replay is not None else make()
        if self.sample_log is not None:
            self.sample_log.append(layout)
        return layout

    def _step(self, row: int, example: Example) -> None:
        self._sgd([row], [self.config.alpha])


class OnlineLearner(Learner):
    pass


class TaskInputLearner(Learner):
    """Shared trunk with one input layer per task, picked by task id."""

    uses_task_heads = True


class IndependentLearner:
    """One narrow network per task (hidden width divided by the task count)."""

    def __init__(self, spec: NetworkSpec, config: LearnerConfig, task_count: int = 1):
        self.config = config
        self.task_count = task_count
        width = tuple(max(1, h // task_count) for h in spec.hidden_dims)
        self.spec = NetworkSpec(spec.input_dim, width, spec.output_dim)
        init_seed = sub_seeds(config.seed)["init"]
        # task 0 shares the online learner's seed so T=1 reproduces it
        extra = np.random.SeedSequence(init_seed).spawn(task_count - 1)
        seeds = [init_seed] + [int(c.generate_state(1, dtype=np.uint32)[0]) for c in extra]
        self.models = [init_params(self.spec, sd).values for sd in seeds]
        self.pool = ExamplePool(spec.input_dim)
        self._scratch = layout_of(self.spec).scratch()
        self._last_task: int | None = None
        self.steps = 0

    @property
    def params(self) -> ParamVector:
        t = self._last_task or 0
        return ParamVector(self.models[t].copy(), self.spec)

    def logits(self, X: np.ndarray, task: int = 0) -> np.ndarray:
        return logits_batch(self.models[task], self.spec, X)

    def observe(self, example: Example) -> None:
        t = example.task_id
        if not 0 <= t < self.task_count:
            raise InvalidInputError(f"task id {t} outside [0, {self.task_count})")
        if (self.config.clone_on_boundary and self._last_task is not None
                and t != self._last_task):
            self.models[t] = self.models[self._last_task].copy()
        self._last_task = t
        row = self.pool.add(example)
        self.pool.sgd_seq(self.models[t], self.spec, [row], [self.config.alpha], self._scratch)
        self.steps += 1

    def fit(self, examples):
        for ex in examples:
            self.observe(ex)
        return self


class EWCLearner(Learner):
    """Online SGD plus a quadratic pull towards each finished task's weights.

    The penalty ``lambda * sum_t sum_i F_t,i (theta_i - anchor_t,i)**2`` is kept
    as two running sums so its gradient costs one pass whatever the task count.
    """

    def __init__(self, spec, config, task_count=1):
        super().__init__(spec, config, task_count)
        self.anchors: list[tuple[np.ndarray, np.ndarray]] = []
        self._f_sum = np.zeros_like(self.theta)
        self._f_anchor_sum = np.zeros_like(self.theta)
        self._current_task: int | None = None
        self._task_rows: list[int] = []
        self._fisher_rng = np.random.default_rng(sub_seeds(config.seed)["sampling"] + 1)

    def consolidate(self) -> None:
        rows = np.asarray(self._task_rows, dtype=np.int64)
        if rows.size == 0:
            return
        n = min(self.config.fisher_samples, rows.size)
        pick = np.sort(self._fisher_rng.choice(rows.size, size=n, replace=False))
        fisher = self.pool.sq_grad_sum(self.theta, self.spec, rows[pick]) / n
        anchor = self.theta.copy()
        self.anchors.append((anchor, fisher))
        self._f_sum += fisher
        self._f_anchor_sum += fisher * anchor

    def penalty(self, theta: np.ndarray | None = None) -> float:
        th = self.theta if theta is None else theta
        return self.config.ewc_lambda * sum(float(np.sum(f * (th - a) ** 2))
                                            for a, f in self.anchors)

    def penalty_grad(self, theta: np.ndarray | None = None) -> np.ndarray:
        th = self.theta if theta is None else theta
        return 2.0 * self.config.ewc_lambda * (self._f_sum * th - self._f_anchor_sum)

    def _step(self, row, example):
        t = example.task_id
        if self._current_task is not None and t != self._current_task:
            self.consolidate()
            self._task_rows = []
        self._current_task = t
        self._task_rows.append(row)
        if not self.anchors or self.config.ewc_lambda == 0.0:
            self._sgd([row], [self.config.alpha])
            return
        g = self._grad([row], [1.0])
        g += self.penalty_grad()
        self.theta -= self.config.alpha * g


class GEMLearner(Learner):
    """Projects each gradient so it does not increase any earlier task's memory loss."""

    def __init__(self, spec, config, task_count=1):
        super().__init__(spec, config, task_count)
        self.memory = mem.TaskRingBuffer(config.buffer_capacity, task_count)
        self.observed_tasks: list[int] = []
        self.projections = 0
        self.solver_failures = 0

    def _step(self, row, example):
        t = example.task_id
        if not self.observed_tasks or self.observed_tasks[-1] != t:
            self.observed_tasks.append(t)
        past = [p for p in self.observed_tasks[:-1] if len(self.memory.segments[p])]
        mem.task_ring_update(self.memory, row, t)
        if not past:
            self._sgd([row], [self.config.alpha])
            return
        G = np.zeros((len(past), self.theta.size))
        for i, p in enumerate(past):
            seg = list(self.memory.segments[p])
            self._grad(seg, np.full(len(seg), 1.0 / len(seg)), out=G[i])
        g = self._grad([row], [1.0])
        if np.all(G @ g >= 0.0):
            self._sgd([row], [self.config.alpha])
            return
        g_tilde, ok = project_gradient(g, G, self.config.gem_memory_strength)
        self.projections += 1
        if not ok:
            self.solver_failures += 1
            g_tilde = g
        self.theta -= self.config.alpha * g_tilde


class ReplayLearner(Learner):
    """Shared plumbing for learners keeping a reservoir-sampled memory."""

    def __init__(self, spec, config, task_count=1):
        super().__init__(spec, config, task_count)
        self.memory = mem.ReservoirBuffer(config.buffer_capacity)

    def _remember(self, row):
        if self.config.buffer_capacity > 0:
            mem.reservoir_update(self.memory, row, self.rng)


class ERReservoirLearner(ReplayLearner):
    """One mini-batch SGD step on the current example mixed with k - 1 memories."""

    def _coefs(self, batch) -> np.ndarray:
        return np.full(len(batch), 1.0 / len(batch))

    def _step(self, row, example):
        cfg = self.config
        batch = self._layout(lambda: mem.sample_mer_batches(self.memory, row, 1, cfg.k, self.rng)[0])
        g = self._grad(batch, self._coefs(batch))
        self.theta -= cfg.alpha * g
        self._remember(row)


class ERTasksLearner(ERReservoirLearner):
    """Like ER, but the loss sums per-task mean losses (each task weighted equally)."""

    def _coefs(self, batch) -> np.ndarray:
        tasks = self.pool.tasks[np.asarray(batch, dtype=np.int64)]
        _, inv, counts = np.unique(tasks, return_inverse=True, return_counts=True)
        return 1.0 / counts[inv]


class MERLearner(ReplayLearner):
    """Nested Reptile: within-batch rate beta over s batches, across-batch rate gamma."""

    def _step(self, row, example):
        cfg = self.config
        batches = self._layout(lambda: mem.sample_mer_batches(self.memory, row, cfg.s, cfg.k, self.rng))
        theta_a0 = self.theta.copy()
        theta_w0 = np.empty_like(self.theta)
        for batch in batches:
            theta_w0[...] = self.theta
            self._sgd(batch, np.full(len(batch), cfg.alpha))
            _lerp(theta_w0, self.theta, cfg.beta, out=self.theta)
        _lerp(theta_a0, self.theta, cfg.gamma, out=self.theta)
        self._remember(row)


class MEROneBigBatchLearner(ReplayLearner):
    """s*k single-example SGD steps (current example last, s times), then gamma."""

    def _step(self, row, example):
        cfg = self.config
        batch = self._layout(lambda: mem.sample_big_batch(self.memory, row, cfg.s, cfg.k, self.rng))
        theta0 = self.theta.copy()
        self._sgd(batch, np.full(len(batch), cfg.alpha))
        _lerp(theta0, self.theta, cfg.gamma, out=self.theta)
        self._remember(row)


class MERCurrentRateLearner(ReplayLearner):
    """k single-example SGD steps; the current example uses rate s * alpha."""

    def _step(self, row, example):
        cfg = self.config
        batch, index = self._layout(
            lambda: mem.sample_random_position_batch(self.memory, cfg.k, row, self.rng))
        lrs = np.full(len(batch), cfg.alpha)
        lrs[index] = cfg.s * cfg.alpha
        theta0 = self.theta.copy()
        self._sgd(batch, lrs)
        _lerp(theta0, self.theta, cfg.gamma, out=self.theta)
        self._remember(row)


LEARNERS = {
    "online": OnlineLearner,
    "independent": IndependentLearner,
    "task_input": TaskInputLearner,
    "ewc": EWCLearner,
    "gem": GEMLearner,
    "er_reservoir": ERReservoirLearner,
    "er_tasks": ERTasksLearner,
    "mer_a1": MERLearner,
    "mer_obb": MEROneBigBatchLearner,
    "mer_cel": MERCurrentRateLearner,
}


def _stepper(kind):
    def step(state, example):
        if not isinstance(state, LEARNERS[kind]):
            raise InvalidInputError(f"step_{kind} expects a {LEARNERS[kind].__name__}")
        state.observe(example)
        return state
    step.__name__ = f"step_{kind}"
    step.__doc__ = f"Feed one example to a ``{LEARNERS[kind].__name__}``; returns it."
    return step


step_online = _stepper("online")
step_independent = _stepper("independent")
step_task_input = _stepper("task_input")
step_ewc = _stepper("ewc")
step_gem = _stepper("gem")
step_er_reservoir = _stepper("er_reservoir")
step_er_tasks = _stepper("er_tasks")
step_mer_a1 = _stepper("mer_a1")
step_mer_obb = _stepper("mer_obb")
step_mer_cel = _stepper("mer_cel")


def make_learner(spec: NetworkSpec, config: LearnerConfig, task_count: int = 1):
    if config.algorithm == "reptile_offline":
        raise InvalidInputError("reptile_offline trains on a stationary dataset; "
                                "call reptile_offline() instead")
    return LEARNERS[config.algorithm](spec, config, task_count)


def reptile_offline(dataset, spec: NetworkSpec, config: LearnerConfig, steps: int) -> ParamVector:
    """Reptile on stationary data.

    Each round draws ``s`` batches of ``k`` examples, takes one mini-batch SGD
    step per batch, then moves the round's starting point towards the result
    at rate ``beta``.  ``steps`` counts mini-batch SGD steps.
    """
    seeds = sub_seeds(config.seed)
    rng = np.random.default_rng(seeds["sampling"])
    pool = ExamplePool(spec.input_dim)
    for ex in dataset:
        pool.add(ex)
    n = len(pool)
    if n == 0:
        raise InvalidInputError("reptile_offline needs a nonempty dataset")
    theta = init_params(spec, seeds["init"]).values
    scratch = layout_of(spec).scratch()
    grad = np.zeros_like(theta)
    done = 0
    while done < steps:
        theta0 = theta.copy()
        for _ in range(min(config.s, steps - done)):
            rows = rng.choice(n, size=min(config.k, n), replace=False)
            grad[...] = 0.0
            pool.grad_accum(theta, spec, rows, np.full(rows.size, 1.0 / rows.size), grad, scratch)
            theta -= config.alpha * grad
            done += 1
        _lerp(theta0, theta, config.beta, out=theta)
    return ParamVector(theta, spec)
