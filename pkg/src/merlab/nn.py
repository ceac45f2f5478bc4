"""Dense ReLU classifier: parameters as one flat float64 vector.

The public functions here (``init_params``, ``forward``, ``loss_and_grad``,
``sgd_step``, ``grad_dot``, ``interpolate``, ``fisher_diagonal``) are pure:
they never mutate their inputs.  Learners use the compiled kernels in
``_kernels`` directly on raw arrays for speed; both paths share the layout
described by :class:`Layout`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import InvalidInputError


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "relu"
    # number of task-specific input layers (1 = plain shared network)
    head_count: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim, self.head_count)
        if any(int(d) < 1 for d in dims):
            raise InvalidInputError(f"all network dimensions must be >= 1, got {dims}")
        if self.activation != "relu":
            raise InvalidInputError(f"unsupported activation {self.activation!r}")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def param_count(self) -> int:
        s = self.sizes
        first = s[0] * s[1] + s[1]
        rest = sum(s[l] * s[l + 1] + s[l + 1] for l in range(1, len(s) - 1))
        return self.head_count * first + rest


class Layout:
    """Offsets of every weight/bias block, shaped for the kernels."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        s = spec.sizes
        n_layers = len(s) - 1
        self.sizes = np.asarray(s, dtype=np.int64)
        self.w_offs = np.zeros((spec.head_count, n_layers), dtype=np.int64)
        self.b_offs = np.zeros((spec.head_count, n_layers), dtype=np.int64)
        pos = 0
        for h in range(spec.head_count):
            self.w_offs[h, 0] = pos
            pos += s[0] * s[1]
            self.b_offs[h, 0] = pos
            pos += s[1]
        for l in range(1, n_layers):
            self.w_offs[:, l] = pos
            pos += s[l] * s[l + 1]
            self.b_offs[:, l] = pos
            pos += s[l + 1]
        assert pos == spec.param_count
        self.n_act = int(sum(s[1:]))

    def scratch(self):
        """Fresh (acts, dbuf) buffers for one kernel caller."""
        return np.zeros(self.n_act), np.zeros(self.n_act)

    def weight(self, theta: np.ndarray, layer: int, head: int = 0) -> np.ndarray:
        s = self.spec.sizes
        o = self.w_offs[head, layer]
        return theta[o:o + s[layer] * s[layer + 1]].reshape(s[layer], s[layer + 1])

    def bias(self, theta: np.ndarray, layer: int, head: int = 0) -> np.ndarray:
        o = self.b_offs[head, layer]
        return theta[o:o + self.spec.sizes[layer + 1]]

    def bias_mask(self) -> np.ndarray:
        mask = np.zeros(self.spec.param_count, dtype=bool)
        for h in range(self.spec.head_count):
            for l in range(len(self.spec.sizes) - 1):
                o = self.b_offs[h, l]
                mask[o:o + self.spec.sizes[l + 1]] = True
        return mask

    def head_mask(self, head: int) -> np.ndarray:
        """True on the first-layer block belonging to ``head``."""
        s = self.spec.sizes
        mask = np.zeros(self.spec.param_count, dtype=bool)
        o = self.w_offs[head, 0]
        mask[o:o + s[0] * s[1] + s[1]] = True
        return mask


_LAYOUTS: dict[NetworkSpec, Layout] = {}


def layout_of(spec: NetworkSpec) -> Layout:
    lay = _LAYOUTS.get(spec)
    if lay is None:
        lay = _LAYOUTS[spec] = Layout(spec)
    return lay


@dataclass
class ParamVector:
    values: np.ndarray
    spec: NetworkSpec

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.shape[0] != self.spec.param_count:
            raise InvalidInputError(
                f"vector length {self.values.shape} != param count {self.spec.param_count}")

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.spec)

    def __len__(self):
        return self.values.shape[0]


@dataclass
class GradResult:
    loss: float
    grad: ParamVector


@dataclass(frozen=True)
class Example:
    """One labeled observation.  ``x`` holds intensities in [0, 1]."""

    x: np.ndarray
    y: int
    task_id: int = 0


def _check_same(a: ParamVector, b: ParamVector):
    if a.spec != b.spec:
        raise InvalidInputError("parameter vectors come from different network specs")


def init_params(spec: NetworkSpec, seed: int) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    lay = layout_of(spec)
    theta = np.zeros(spec.param_count)
    s = spec.sizes
    for h in range(spec.head_count):
        for l in range(len(s) - 1):
            if l > 0 and h > 0:
                continue
            bound = 1.0 / np.sqrt(s[l])
            w = lay.weight(theta, l, h)
            w[...] = rng.uniform(-bound, bound, size=w.shape)
    return ParamVector(theta, spec)


def _sparse(x: np.ndarray):
    idx = np.flatnonzero(x).astype(np.int64)
    return idx, np.ascontiguousarray(x[idx], dtype=np.float64)


def _head_for(spec: NetworkSpec, head: int | None, task_id: int = 0) -> int:
    if head is None:
        head = task_id if spec.head_count > 1 else 0
    if not 0 <= head < spec.head_count:
        raise InvalidInputError(f"head {head} outside [0, {spec.head_count})")
    return head


def _check_x(spec: NetworkSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.input_dim,):
        raise InvalidInputError(f"input shape {x.shape} != ({spec.input_dim},)")
    return x


def forward(params: ParamVector, x, head: int = 0) -> np.ndarray:
    spec = params.spec
    x = _check_x(spec, x)
    head = _head_for(spec, head)
    lay = layout_of(spec)
    acts, _ = lay.scratch()
    idx, val = _sparse(x)
    lo = _kernels.forward(params.values, lay.sizes, lay.w_offs[head], lay.b_offs[head],
                          idx, val, acts)
    return acts[lo:lo + spec.output_dim].copy()


def loss_and_grad(params: ParamVector, example: Example, head: int | None = None) -> GradResult:
    """Softmax cross-entropy at ``example`` and its exact gradient."""
    spec = params.spec
    x = _check_x(spec, example.x)
    y = int(example.y)
    if not 0 <= y < spec.output_dim:
        raise InvalidInputError(f"label {y} outside [0, {spec.output_dim})")
    head = _head_for(spec, head, example.task_id)
    lay = layout_of(spec)
    acts, dbuf = lay.scratch()
    idx, val = _sparse(x)
    th = params.values
    lo = _kernels.forward(th, lay.sizes, lay.w_offs[head], lay.b_offs[head], idx, val, acts)
    loss = _kernels.cross_entropy_delta(acts, lo, spec.output_dim, y, dbuf)
    grad = np.zeros_like(th)
    _kernels.backward(th, lay.sizes, lay.w_offs[head], lay.b_offs[head], idx, val,
                      acts, dbuf, 1.0, grad)
    return GradResult(float(loss), ParamVector(grad, spec))


def sgd_step(params: ParamVector, grad: ParamVector, alpha: float) -> ParamVector:
    _check_same(params, grad)
    if alpha < 0:
        raise InvalidInputError(f"learning rate must be >= 0, got {alpha}")
    return ParamVector(params.values - alpha * grad.values, params.spec)


def grad_dot(a: ParamVector, b: ParamVector) -> float:
    _check_same(a, b)
    return float(np.dot(a.values, b.values))


def interpolate(theta0: ParamVector, theta1: ParamVector, rate: float) -> ParamVector:
    """Reptile move ``theta0 + rate * (theta1 - theta0)``.

    Evaluated as ``(1 - rate) * theta0 + rate * theta1`` so that rate 0 and
    rate 1 return their endpoint bit-exactly.
    """
    _check_same(theta0, theta1)
    return ParamVector(_lerp(theta0.values, theta1.values, rate), theta0.spec)


def _lerp(a: np.ndarray, b: np.ndarray, rate: float, out: np.ndarray | None = None):
    if rate == 1.0:
        if out is None:
            return b.copy()
        out[...] = b
        return out
    if rate == 0.0:
        if out is None:
            return a.copy()
        out[...] = a
        return out
    # scale b first: out may alias b (but not a)
    res = np.multiply(b, rate, out=out)
    res += (1.0 - rate) * a
    return res


def fisher_diagonal(params: ParamVector, examples: Sequence[Example]) -> ParamVector:
    """Empirical Fisher: mean of squared per-example gradients at the observed label."""
    if len(examples) == 0:
        raise InvalidInputError("fisher_diagonal needs at least one example")
    pool = ExamplePool(params.spec.input_dim)
    for ex in examples:
        pool.add(ex)
    out = pool.sq_grad_sum(params.values, params.spec, np.arange(len(pool)))
    return ParamVector(out / len(examples), params.spec)


def logits_batch(theta: np.ndarray, spec: NetworkSpec, X: np.ndarray, head: int = 0) -> np.ndarray:
    """Dense batched forward pass in the dtype of ``X`` (used for evaluation)."""
    lay = layout_of(spec)
    h = X
    n_layers = len(spec.sizes) - 1
    for l in range(n_layers):
        W = lay.weight(theta, l, head).astype(X.dtype, copy=False)
        b = lay.bias(theta, l, head).astype(X.dtype, copy=False)
        h = h @ W
        h += b
        if l < n_layers - 1:
            np.maximum(h, 0, out=h)
    return h


class ExamplePool:
    """Append-only CSR store of examples, addressed by integer row id.

    Replay memories hold row ids into a pool; the kernels read rows directly.
    """

    def __init__(self, input_dim: int, capacity: int = 64):
        self.input_dim = input_dim
        self.n = 0
        self.indptr = np.zeros(capacity + 1, dtype=np.int64)
        self.labels = np.zeros(capacity, dtype=np.int64)
        self.tasks = np.zeros(capacity, dtype=np.int64)
        self._zero_heads = np.zeros(capacity, dtype=np.int64)
        self.indices = np.zeros(16 * capacity, dtype=np.int64)
        self.data = np.zeros(16 * capacity)

    def __len__(self):
        return self.n

    def add(self, ex: Example) -> int:
        x = np.asarray(ex.x, dtype=np.float64)
        if x.shape != (self.input_dim,):
            raise InvalidInputError(f"input shape {x.shape} != ({self.input_dim},)")
        idx, val = _sparse(x)
        if self.n == self.labels.size:
            cap = 2 * self.labels.size
            self.labels = np.resize(self.labels, cap)
            self.tasks = np.resize(self.tasks, cap)
            self.indptr = np.resize(self.indptr, cap + 1)
            self._zero_heads = np.zeros(cap, dtype=np.int64)
        nnz = self.indptr[self.n]
        need = nnz + idx.size
        if need > self.indices.size:
            cap = max(need, 2 * self.indices.size)
            self.indices = np.resize(self.indices, cap)
            self.data = np.resize(self.data, cap)
        self.indices[nnz:need] = idx
        self.data[nnz:need] = val
        self.indptr[self.n + 1] = need
        self.labels[self.n] = int(ex.y)
        self.tasks[self.n] = int(ex.task_id)
        self.n += 1
        return self.n - 1

    def example(self, row: int) -> Example:
        x = np.zeros(self.input_dim)
        lo, hi = self.indptr[row], self.indptr[row + 1]
        x[self.indices[lo:hi]] = self.data[lo:hi]
        return Example(x, int(self.labels[row]), int(self.tasks[row]))

    def heads(self, spec: NetworkSpec) -> np.ndarray:
        return self.tasks if spec.head_count > 1 else self._zero_heads

    def sgd_seq(self, theta, spec, rows, lrs, scratch=None) -> float:
        """In-place sequential single-example SGD over ``rows``."""
        lay = layout_of(spec)
        acts, dbuf = scratch if scratch is not None else lay.scratch()
        return _kernels.ce_sgd_seq(theta, lay.sizes, lay.w_offs, lay.b_offs, self.indptr,
                                   self.indices, self.data, self.labels, self.heads(spec),
                                   np.asarray(rows, dtype=np.int64),
                                   np.asarray(lrs, dtype=np.float64), acts, dbuf)

    def grad_accum(self, theta, spec, rows, coefs, grad, scratch=None) -> float:
        lay = layout_of(spec)
        acts, dbuf = scratch if scratch is not None else lay.scratch()
        return _kernels.ce_grad_accum(theta, lay.sizes, lay.w_offs, lay.b_offs, self.indptr,
                                      self.indices, self.data, self.labels, self.heads(spec),
                                      np.asarray(rows, dtype=np.int64),
                                      np.asarray(coefs, dtype=np.float64), acts, dbuf, grad)

    def sq_grad_sum(self, theta, spec, rows) -> np.ndarray:
        lay = layout_of(spec)
        acts, dbuf = lay.scratch()
        out = np.zeros(spec.param_count)
        _kernels.ce_sq_grad_accum(theta, lay.sizes, lay.w_offs, lay.b_offs, self.indptr,
                                  self.indices, self.data, self.labels, self.heads(spec),
                                  np.asarray(rows, dtype=np.int64), acts, dbuf,
                                  np.zeros(spec.param_count), out)
        return out
