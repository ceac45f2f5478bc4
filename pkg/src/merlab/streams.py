"""Locally i.i.d. task streams built from MNIST-style data.

A stream is a fixed sequence of tasks.  Each task owns a shuffled training
set that is consumed in order and a held-out test set.  Tasks never overlap
in time: every example of task ``t`` is seen before any of task ``t + 1``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
import scipy.sparse as sp

from .errors import FormatError, InvalidInputError, InvalidSpecError
from .nn import Example

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

KINDS = ("rotations", "permutations", "many_permutations", "synthetic")


@dataclass
class BaseData:
    """Raw image data: flat pixel rows in [0, 1] plus integer labels."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    side: int = 28


def load_idx(images_path, labels_path):
    """Read an IDX image file and its label file.

    Returns ``(examples, count)`` where ``examples`` is an ``(x, y)`` pair of
    arrays: ``x`` float32 of shape ``(count, rows * cols)`` scaled by 1/255,
    ``y`` int64 of shape ``(count,)``.
    """
    with open(images_path, "rb") as f:
        raw_img = f.read()
    with open(labels_path, "rb") as f:
        raw_lab = f.read()

    if len(raw_img) < 16:
        raise FormatError("images.header", f"truncated header ({len(raw_img)} bytes)")
    magic, n_img, rows, cols = struct.unpack(">IIII", raw_img[:16])
    if magic != IMAGES_MAGIC:
        raise FormatError("images.magic", f"expected 0x{IMAGES_MAGIC:08x}, got 0x{magic:08x}")
    if len(raw_lab) < 8:
        raise FormatError("labels.header", f"truncated header ({len(raw_lab)} bytes)")
    magic, n_lab = struct.unpack(">II", raw_lab[:8])
    if magic != LABELS_MAGIC:
        raise FormatError("labels.magic", f"expected 0x{LABELS_MAGIC:08x}, got 0x{magic:08x}")
    if n_img != n_lab:
        raise FormatError("count", f"{n_img} images but {n_lab} labels")

    n_pix = rows * cols
    if len(raw_img) - 16 < n_img * n_pix:
        raise FormatError("images.data", f"expected {n_img * n_pix} pixel bytes, "
                                         f"found {len(raw_img) - 16}")
    if len(raw_lab) - 8 < n_lab:
        raise FormatError("labels.data", f"expected {n_lab} label bytes, found {len(raw_lab) - 8}")

    pix = np.frombuffer(raw_img, dtype=np.uint8, count=n_img * n_pix, offset=16)
    x = pix.reshape(n_img, n_pix).astype(np.float32) / np.float32(255.0)
    y = np.frombuffer(raw_lab, dtype=np.uint8, count=n_lab, offset=8).astype(np.int64)
    return (x, y), n_img


def load_mnist(data_dir) -> BaseData:
    """Load the four standard MNIST files from ``data_dir``."""
    names = {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }
    out = {}
    for split, (img, lab) in names.items():
        paths = [os.path.join(data_dir, n) for n in (img, lab)]
        missing = [p for p in paths if not os.path.exists(p)]
        if missing:
            raise FileNotFoundError(f"missing MNIST file(s): {', '.join(missing)}")
        (x, y), _ = load_idx(*paths)
        out[split] = (x, y)
    return BaseData(out["train"][0], out["train"][1], out["test"][0], out["test"][1])


# ------------------------------------------------------------------ specs


@dataclass(frozen=True)
class StreamSpec:
    kind: str
    task_count: int
    train_per_task: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpecError(f"unknown stream kind {self.kind!r}")
        if self.train_per_task < 1:
            raise InvalidSpecError("train_per_task must be >= 1")
        if self.task_count < 1:
            raise InvalidSpecError("task_count must be >= 1")
        if self.kind == "rotations" and self.task_count < 2:
            raise InvalidSpecError("rotations needs at least 2 tasks")

    @classmethod
    def preset(cls, kind: str, seed: int = 0) -> "StreamSpec":
        if kind == "many_permutations":
            return cls(kind, 100, 200, seed)
        if kind == "synthetic":
            return cls(kind, 5, 200, seed)
        return cls(kind, 20, 1000, seed)


@dataclass
class TaskData:
    """One task: its training examples in stream order and a test set.

    ``test_x`` is produced on demand by ``make_test`` and cached unless the
    stream asks otherwise (permuted test sets are cheap to rebuild and
    expensive to keep for 100 tasks).
    """

    task_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_y: np.ndarray
    make_test: Callable[[], np.ndarray]
    cache_test: bool = True
    train_source: np.ndarray | None = None
    _test: np.ndarray | None = field(default=None, repr=False)

    @property
    def test_x(self) -> np.ndarray:
        if self._test is not None:
            return self._test
        x = self.make_test()
        if self.cache_test:
            self._test = x
        return x

    def examples(self) -> Iterator[Example]:
        for x, y in zip(self.train_x, self.train_y):
            yield Example(x, int(y), self.task_id)


@dataclass
class TaskStream:
    tasks: list[TaskData]
    spec: StreamSpec
    input_dim: int
    n_classes: int

    @property
    def task_count(self) -> int:
        return len(self.tasks)

    @property
    def per_task_train_count(self) -> int:
        return self.spec.train_per_task

    def __iter__(self) -> Iterator[Example]:
        for task in self.tasks:
            yield from task.examples()

    def __len__(self):
        return sum(len(t.train_y) for t in self.tasks)


# -------------------------------------------------------------- rotations


def rotation_angle(task: int, task_count: int) -> float:
    return 180.0 * task / (task_count - 1)


def rotation_matrix(angle_deg: float, side: int = 28) -> sp.csr_matrix:
    """Sparse ``(side², side²)`` bilinear map rotating an image about its center.

    Row ``p`` holds the interpolation weights that produce output pixel ``p``
    from the source image (inverse mapping); source samples falling outside
    the image contribute 0.
    """
    c = (side - 1) / 2.0
    th = np.deg2rad(angle_deg)
    cos, sin = np.cos(th), np.sin(th)
    r, q = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    # image-plane coordinates: x to the right, y up
    dx, dy = q - c, c - r
    # counterclockwise rotation by angle; sample source at R(-angle) @ (dx, dy)
    src_q = c + cos * dx + sin * dy
    src_r = c + sin * dx - cos * dy
    # snap tiny float noise so exact-grid angles stay exact
    src_q = np.where(np.abs(src_q - np.round(src_q)) < 1e-9, np.round(src_q), src_q)
    src_r = np.where(np.abs(src_r - np.round(src_r)) < 1e-9, np.round(src_r), src_r)

    r0 = np.floor(src_r).astype(np.int64)
    q0 = np.floor(src_q).astype(np.int64)
    fr = src_r - r0
    fq = src_q - q0
    out_idx = (r * side + q).ravel()
    rows, cols, vals = [], [], []
    for drr, dqq, w in ((0, 0, (1 - fr) * (1 - fq)), (0, 1, (1 - fr) * fq),
                        (1, 0, fr * (1 - fq)), (1, 1, fr * fq)):
        rr = (r0 + drr).ravel()
        qq = (q0 + dqq).ravel()
        ww = w.ravel()
        ok = (rr >= 0) & (rr < side) & (qq >= 0) & (qq < side) & (ww != 0)
        rows.append(out_idx[ok])
        cols.append(rr[ok] * side + qq[ok])
        vals.append(ww[ok])
    n = side * side
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n, n))


def rotate_images(x: np.ndarray, angle_deg: float, side: int = 28) -> np.ndarray:
    if angle_deg == 0.0:
        return x.copy()
    R = rotation_matrix(angle_deg, side)
    out = np.asarray((R @ x.T).T, dtype=x.dtype)
    return np.clip(out, 0.0, 1.0, out=out)


def _sample_train(rng, base: BaseData, n: int) -> np.ndarray:
    if n > base.train_x.shape[0]:
        raise InvalidSpecError(f"train_per_task {n} exceeds base train size {base.train_x.shape[0]}")
    return rng.choice(base.train_x.shape[0], size=n, replace=False)


def make_rotations(base: BaseData, spec: StreamSpec) -> TaskStream:
    if spec.kind != "rotations":
        raise InvalidSpecError(f"make_rotations needs kind 'rotations', got {spec.kind!r}")
    if spec.task_count < 2:
        raise InvalidSpecError("rotations needs at least 2 tasks")
    rng = np.random.default_rng(spec.seed)
    tasks = []
    for t in range(spec.task_count):
        angle = rotation_angle(t, spec.task_count)
        src = _sample_train(rng, base, spec.train_per_task)
        tx = rotate_images(base.train_x[src].astype(np.float64), angle, base.side)
        tasks.append(TaskData(
            task_id=t, train_x=tx, train_y=base.train_y[src].copy(),
            test_y=base.test_y,
            make_test=lambda a=angle: rotate_images(base.test_x.astype(np.float32), a, base.side),
            train_source=src))
    return TaskStream(tasks, spec, base.train_x.shape[1], 10)


# ----------------------------------------------------------- permutations


def make_permutations(base: BaseData, spec: StreamSpec, permutations=None) -> TaskStream:
    """Permuted-pixel tasks.  ``permutations`` overrides the drawn ones (tests)."""
    if spec.kind not in ("permutations", "many_permutations"):
        raise InvalidSpecError(f"make_permutations got kind {spec.kind!r}")
    rng = np.random.default_rng(spec.seed)
    n_pix = base.train_x.shape[1]
    tasks = []
    for t in range(spec.task_count):
        perm = rng.permutation(n_pix)
        if permutations is not None:
            perm = np.asarray(permutations[t])
        src = _sample_train(rng, base, spec.train_per_task)
        tx = base.train_x[src][:, perm].astype(np.float64)
        tasks.append(TaskData(
            task_id=t, train_x=tx, train_y=base.train_y[src].copy(),
            test_y=base.test_y,
            make_test=lambda p=perm: base.test_x[:, p],
            # 100 cached permuted copies of the 10k test split would not fit in memory
            cache_test=spec.task_count <= 20,
            train_source=src))
    return TaskStream(tasks, spec, n_pix, 10)


# ---------------------------------------------------------------- synthetic


def make_synthetic(spec: StreamSpec, dim: int = 10, separation: float = 10.0,
                   test_per_task: int = 500) -> TaskStream:
    """Two Gaussian blobs per task, means rotated by a task-specific orthogonal map.

    Class means sit at ``±separation/2`` along a unit direction (unit noise),
    so the two classes are ``separation`` standard deviations apart.
    Inputs are affinely squashed into [0, 1].
    """
    if spec.kind != "synthetic":
        raise InvalidSpecError(f"make_synthetic got kind {spec.kind!r}")
    rng = np.random.default_rng(spec.seed)
    base_dir = np.zeros(dim)
    base_dir[0] = 1.0
    # scale keeps almost all mass inside [0, 1] before clipping
    scale = 1.0 / (separation + 8.0)
    tasks = []
    for t in range(spec.task_count):
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        q = q * np.sign(np.diag(r))
        mu = q @ base_dir * (separation / 2.0)

        def draw(n, rng=rng, mu=mu):
            y = rng.integers(0, 2, size=n)
            x = rng.standard_normal((n, dim)) + np.where(y[:, None] == 1, mu, -mu)
            return np.clip(0.5 + scale * x, 0.0, 1.0), y

        tx, ty = draw(spec.train_per_task)
        ex, ey = draw(test_per_task)
        tasks.append(TaskData(task_id=t, train_x=tx, train_y=ty, test_y=ey,
                              make_test=lambda ex=ex: ex))
    return TaskStream(tasks, spec, dim, 2)


def build_stream(spec: StreamSpec, base: BaseData | None = None) -> TaskStream:
    if spec.kind == "synthetic":
        return make_synthetic(spec)
    if base is None:
        raise InvalidInputError(f"stream kind {spec.kind!r} needs MNIST base data")
    if spec.kind == "rotations":
        return make_rotations(base, spec)
    return make_permutations(base, spec)
