"""Task-by-task accuracy bookkeeping, summary scores and the gradient-alignment probe.

Accuracies are stored as fractions in [0, 1]; multiply by 100 only when
printing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError, StateError
from .nn import ExamplePool, ParamVector, logits_batch


def accuracy(logits: np.ndarray, y: np.ndarray) -> float:
    # np.argmax returns the first maximum, so ties go to the lowest class index
    return float(np.mean(np.argmax(logits, axis=1) == y))


def evaluate(model, test_sets: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Accuracy on each ``(X, y)`` test set, in task order.

    ``model`` is a :class:`ParamVector` or anything with ``logits(X, task)``.
    """
    if len(test_sets) == 0:
        raise InvalidInputError("need at least one test set")
    out = np.empty(len(test_sets))
    for t, (X, y) in enumerate(test_sets):
        if len(y) == 0:
            raise InvalidInputError(f"test set {t} is empty")
        if isinstance(model, ParamVector):
            head = t if model.spec.head_count > 1 else 0
            logits = logits_batch(model.values, model.spec, X, head)
        else:
            logits = model.logits(X, t)
        out[t] = accuracy(logits, y)
    return out


@dataclass
class EvalMatrix:
    """``R[i, j]``: accuracy on task j after training on task i; ``b``: accuracy at initialisation."""

    task_count: int
    R: np.ndarray = None
    b: np.ndarray = None

    def __post_init__(self):
        T = self.task_count
        if self.R is None:
            self.R = np.full((T, T), np.nan)
        if self.b is None:
            self.b = np.full(T, np.nan)

    def set_row(self, i: int, accs) -> None:
        accs = np.asarray(accs, dtype=float)
        if accs.shape != (self.task_count,) or np.any((accs < 0) | (accs > 1)):
            raise InvalidInputError("row must hold one accuracy in [0, 1] per task")
        self.R[i] = accs

    @property
    def complete(self) -> bool:
        return not np.isnan(self.R).any()

    def to_dict(self) -> dict:
        return {"R": self.R.tolist(), "b": self.b.tolist()}


def _require_complete(m: EvalMatrix):
    if not m.complete:
        raise StateError("evaluation matrix has unfilled rows")


def retained_accuracy(m: EvalMatrix) -> float:
    _require_complete(m)
    return float(np.mean(m.R[-1]))


def learning_accuracy(m: EvalMatrix) -> float:
    d = np.diag(m.R)
    if np.isnan(d).any():
        raise StateError("diagonal not populated")
    return float(np.mean(d))


def backward_transfer(m: EvalMatrix) -> float:
    if np.isnan(m.R[-1]).any() or np.isnan(np.diag(m.R)).any():
        raise StateError("final row and diagonal must be populated")
    return float(np.mean(m.R[-1] - np.diag(m.R)))


def forward_transfer(m: EvalMatrix) -> float:
    T = m.task_count
    if T < 2:
        raise InvalidInputError("forward transfer needs at least two tasks")
    prev = np.array([m.R[j - 1, j] for j in range(1, T)])
    base = m.b[1:]
    if np.isnan(prev).any() or np.isnan(base).any():
        raise StateError("forward transfer needs the superdiagonal and the baseline vector")
    return float(np.mean(prev - base))


def summarize(m: EvalMatrix) -> dict[str, float]:
    if np.isnan(m.R[-1]).any():
        raise StateError("final row not populated")
    out = {"RA": float(np.mean(m.R[-1])), "LA": learning_accuracy(m), "BTI": backward_transfer(m)}
    out["FTI"] = forward_transfer(m) if m.task_count >= 2 else float("nan")
    return out


def train_and_evaluate(learner, stream, eval_rows: Iterable[int] | None = None,
                       on_example=None) -> EvalMatrix:
    """Train ``learner`` through ``stream`` task by task, filling an :class:`EvalMatrix`.

    ``eval_rows`` limits which rows are measured in full (the final row
    always is; by default every row for up to 20 tasks, none beyond).  Other
    rows keep only their diagonal and superdiagonal entries, which is all
    LA, BTI and FTI need.
    """
    T = stream.task_count
    m = EvalMatrix(T)
    test_sets = [(task.test_x, task.test_y) for task in stream.tasks] if T <= 20 else None

    def test(t):
        if test_sets is not None:
            return test_sets[t]
        task = stream.tasks[t]
        return task.test_x, task.test_y

    def acc(t):
        X, y = test(t)
        return accuracy(learner.logits(X, t), y)

    if eval_rows is None:
        eval_rows = range(T) if T <= 20 else ()
    full_rows = set(eval_rows) | {T - 1}
    m.b[:] = [acc(t) for t in range(T)]
    for i, task in enumerate(stream.tasks):
        for ex in task.examples():
            if on_example is not None:
                on_example(ex)
            learner.observe(ex)
        if i in full_rows:
            m.R[i] = [acc(t) for t in range(T)]
        else:
            m.R[i, i] = acc(i)
            if i + 1 < T:
                m.R[i, i + 1] = acc(i + 1)
    return m


# ------------------------------------------------------------ alignment probe


@dataclass
class AlignmentTrace:
    samples: list[tuple[int, float]] = field(default_factory=list)

    @property
    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.samples])

    @property
    def mean(self) -> float:
        return float(self.values.mean()) if self.samples else float("nan")

    @property
    def std(self) -> float:
        return float(self.values.std()) if self.samples else float("nan")


def alignment_probe(learner, stream, probe_seed: int, n_past: int = 5) -> AlignmentTrace:
    """Train ``learner`` on ``stream`` while recording gradient alignment.

    Before each step, the incoming example's gradient is dotted with the
    gradients of ``n_past`` distinct examples drawn uniformly from everything
    seen so far, all at the current parameters; the mean is recorded.  The
    probe keeps its own history and gradient buffers and only reads the
    learner's parameters.
    """
    rng = np.random.default_rng(probe_seed)
    spec = learner.spec
    history = ExamplePool(spec.input_dim)
    trace = AlignmentTrace()
    g_cur = np.zeros(spec.param_count)
    g_past = np.zeros(spec.param_count)
    one = np.ones(1)
    for step, ex in enumerate(stream):
        row = history.add(ex)
        if row >= n_past:
            theta = learner.theta.copy()
            g_cur[...] = 0.0
            history.grad_accum(theta, spec, [row], one, g_cur)
            picks = rng.choice(row, size=n_past, replace=False)
            dots = []
            for p in picks:
                g_past[...] = 0.0
                history.grad_accum(theta, spec, [int(p)], one, g_past)
                dots.append(float(g_cur @ g_past))
            trace.samples.append((step, float(np.mean(dots))))
        learner.observe(ex)
    return trace
