"""Catcher-lite and DQN trained with plain replay or with meta-experience replay.

The environment works on a unit screen: a paddle slides along the bottom,
one pellet at a time falls from the top at a task-specific speed.  The agent
observes four floats (paddle x, pellet x, pellet y, pellet speed).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from . import memory as mem
from .errors import InvalidInputError, StateError
from .nn import NetworkSpec, ParamVector, _lerp, init_params, layout_of, logits_batch

LEFT, STAY, RIGHT = 0, 1, 2
N_ACTIONS = 3
STATE_DIM = 4


@dataclass(frozen=True)
class CatcherParams:
    paddle_speed: float = 0.1
    catch_radius: float = 0.1
    lives: int = 3


@dataclass(frozen=True)
class CatcherLiteState:
    paddle_x: float
    pellet_x: float
    pellet_y: float
    pellet_velocity: float
    lives: int

    def features(self) -> np.ndarray:
        return np.array([self.paddle_x, self.pellet_x, self.pellet_y, self.pellet_velocity])


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    done: bool


def env_reset(velocity: float, rng, params: CatcherParams = CatcherParams()) -> CatcherLiteState:
    return CatcherLiteState(0.5, float(rng.uniform()), 0.0, float(velocity), params.lives)


def env_step(state: CatcherLiteState, action: int, rng,
             params: CatcherParams = CatcherParams()):
    """Advance one frame; returns ``(state', reward, done)``."""
    if action not in (LEFT, STAY, RIGHT):
        raise InvalidInputError(f"action must be 0, 1 or 2, got {action!r}")
    x = min(1.0, max(0.0, state.paddle_x + (action - 1) * params.paddle_speed))
    y = state.pellet_y + state.pellet_velocity
    px, lives, reward = state.pellet_x, state.lives, 0.0
    if y >= 1.0:
        if abs(x - px) <= params.catch_radius:
            reward = 1.0
        else:
            reward = -1.0
            lives -= 1
        px, y = float(rng.uniform()), 0.0
    new = CatcherLiteState(x, px, y, state.pellet_velocity, lives)
    return new, reward, lives <= 0


# ------------------------------------------------------------------ DQN


# SGD step sizes that learn a single task within ~20k frames; MER takes k
# sequential steps per frame, so it needs a smaller rate than the mean-loss step
TUNED_ALPHA = {"er": 0.3, "mer": 0.1}


@dataclass(frozen=True)
class DQNConfig:
    # None picks the variant's entry in TUNED_ALPHA
    alpha: float | None = None
    beta: float = 1.0
    gamma_meta: float = 0.3
    # batch size including the current transition
    k: int = 17
    steps: int = 1
    buffer_capacity: int = 50_000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_frames: int = 5_000
    discount: float = 0.9
    target_sync_episodes: int = 1
    frames_per_task: int = 10_000
    task_count: int = 6
    base_velocity: float = 0.04
    # relative speed-up per task: task 5 falls 1 + 5 * 0.3 = 2.5 times faster
    velocity_step: float = 0.3
    hidden: tuple[int, ...] = (64, 64)
    max_episode_frames: int = 1_000
    eval_every: int = 2_500
    eval_episodes: int = 10
    seed: int = 0
    catcher: CatcherParams = field(default_factory=CatcherParams)

    def __post_init__(self):
        if not 0.0 <= self.discount < 1.0:
            raise InvalidInputError("discount must lie in [0, 1)")
        for name in ("epsilon_start", "epsilon_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidInputError(f"{name} must lie in [0, 1]")
        if min(self.alpha or 0.0, self.beta, self.gamma_meta) < 0:
            raise InvalidInputError("rates must be >= 0")
        if self.k < 1 or self.steps < 1 or self.buffer_capacity < 1:
            raise InvalidInputError("k, steps and buffer_capacity must be >= 1")

    def velocity(self, task: int) -> float:
        return self.base_velocity * (1.0 + task * self.velocity_step)

    def epsilon(self, frame: int) -> float:
        frac = min(1.0, frame / max(1, self.epsilon_decay_frames))
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)

    def alpha_for(self, variant: str) -> float:
        return TUNED_ALPHA[variant] if self.alpha is None else self.alpha

    def with_(self, **kw) -> "DQNConfig":
        return replace(self, **kw)


def q_spec(config: DQNConfig) -> NetworkSpec:
    return NetworkSpec(STATE_DIM, tuple(config.hidden), N_ACTIONS)


class QNet:
    """Flat-vector Q-network with allocation-free single-state evaluation."""

    def __init__(self, spec: NetworkSpec, theta: np.ndarray):
        self.spec = spec
        self.theta = theta
        lay = layout_of(spec)
        self._lay = lay
        self._acts, self._dbuf = lay.scratch()
        self._idx = np.arange(STATE_DIM)

    def q(self, state: np.ndarray, theta: np.ndarray | None = None) -> np.ndarray:
        th = self.theta if theta is None else theta
        lay = self._lay
        lo = _kernels.forward(th, lay.sizes, lay.w_offs[0], lay.b_offs[0], self._idx,
                              np.asarray(state, dtype=np.float64), self._acts)
        return self._acts[lo:lo + N_ACTIONS].copy()

    def sgd_seq(self, states, actions, targets, lrs) -> float:
        lay = self._lay
        return _kernels.huber_sgd_seq(self.theta, lay.sizes, lay.w_offs[0], lay.b_offs[0],
                                      states, actions, targets, lrs, self._acts, self._dbuf)

    def grad_accum(self, states, actions, targets, coefs, grad) -> float:
        lay = self._lay
        return _kernels.huber_grad_accum(self.theta, lay.sizes, lay.w_offs[0], lay.b_offs[0],
                                         states, actions, targets, coefs, self._acts,
                                         self._dbuf, grad)


def huber_loss(q: float, target: float) -> float:
    d = abs(q - target)
    return 0.5 * d * d if d <= 1.0 else d - 0.5


def dqn_target(transition: Transition, target_params: ParamVector, discount: float) -> float:
    if transition.done or discount == 0.0:
        return float(transition.r)
    net = QNet(target_params.spec, target_params.values)
    return float(transition.r + discount * np.max(net.q(transition.s_next)))


class _TransitionStore:
    """Growable arrays of every transition; the replay buffer keeps ids into it."""

    def __init__(self, capacity: int = 1024):
        self.s = np.zeros((capacity, STATE_DIM))
        self.s_next = np.zeros((capacity, STATE_DIM))
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.done = np.zeros(capacity, dtype=bool)
        self.n = 0

    def add(self, s, a, r, s_next, done) -> int:
        if self.n == self.a.size:
            cap = 2 * self.a.size
            self.s = np.resize(self.s, (cap, STATE_DIM))
            self.s_next = np.resize(self.s_next, (cap, STATE_DIM))
            self.a = np.resize(self.a, cap)
            self.r = np.resize(self.r, cap)
            self.done = np.resize(self.done, cap)
        i = self.n
        self.s[i], self.a[i], self.r[i], self.s_next[i], self.done[i] = s, a, r, s_next, done
        self.n += 1
        return i


@dataclass
class ScoreRecord:
    frame: int
    task_evaluated: int
    mean_greedy_score: float


@dataclass
class DQNResult:
    params: ParamVector
    scores: list[ScoreRecord]
    episodes: int
    sample_log: list | None = None

    def task_scores(self, task: int) -> list[tuple[int, float]]:
        return [(r.frame, r.mean_greedy_score) for r in self.scores if r.task_evaluated == task]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["frame", "task_evaluated", "mean_greedy_score_over_10_episodes"])
            for r in self.scores:
                w.writerow([r.frame, r.task_evaluated, f"{r.mean_greedy_score:.6g}"])


def greedy_score(net: QNet, velocity: float, episodes: int, seed: int, config: DQNConfig) -> float:
    """Mean pellets caught per greedy episode (episodes end on lost lives or the frame cap)."""
    total = 0
    for e in range(episodes):
        rng = np.random.default_rng((seed, e))
        st = env_reset(velocity, rng, config.catcher)
        for _ in range(config.max_episode_frames):
            a = int(np.argmax(net.q(st.features())))
            st, r, done = env_step(st, a, rng, config.catcher)
            total += r > 0
            if done:
                break
    return total / episodes


def greedy_catch_rate(net: QNet, velocity: float, frames: int, seed: int,
                      config: DQNConfig) -> float:
    """Fraction of landed pellets caught by the greedy policy, lives ignored."""
    params = replace(config.catcher, lives=frames + 1)
    rng = np.random.default_rng(seed)
    st = env_reset(velocity, rng, params)
    caught = missed = 0
    for _ in range(frames):
        st, r, _ = env_step(st, int(np.argmax(net.q(st.features()))), rng, params)
        caught += r > 0
        missed += r < 0
    return caught / max(1, caught + missed)


def train_dqn(config: DQNConfig, variant: str, replay=None, log_samples: bool = False) -> DQNResult:
    """Train on the velocity schedule; ``variant`` is ``"er"`` or ``"mer"``.

    ``replay`` optionally supplies the batch layouts (lists of transition
    ids per batch) instead of sampling them; with ``log_samples`` the layouts
    actually used are returned in ``sample_log``.
    """
    if variant not in ("er", "mer"):
        raise InvalidInputError(f"variant must be 'er' or 'mer', got {variant!r}")
    config = config.with_(alpha=config.alpha_for(variant))
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    init_seed = int(seeds[0].generate_state(1, dtype=np.uint32)[0])
    env_rng = np.random.default_rng(seeds[1])
    act_rng = np.random.default_rng(seeds[2])
    mem_rng = np.random.default_rng(seeds[3])
    spec = q_spec(config)
    theta = init_params(spec, init_seed).values
    net = QNet(spec, theta)
    target = theta.copy()
    store = _TransitionStore()
    buffer = mem.ReservoirBuffer(config.buffer_capacity)
    grad = np.zeros_like(theta)
    lrs = np.full(config.k, config.alpha)
    coefs = np.full(config.k, 1.0 / config.k)
    sample_log = [] if log_samples else None
    replay_iter = iter(replay) if replay is not None else None
    scores: list[ScoreRecord] = []
    total_frames = config.frames_per_task * config.task_count
    episodes = 0
    frame = 0
    eval_seed = int(seeds[0].generate_state(2, dtype=np.uint32)[1])

    def evaluate(frame_no, current_task):
        for t in sorted(set(range(current_task + 1)) | {0}):
            sc = greedy_score(net, config.velocity(t), config.eval_episodes, eval_seed + t, config)
            scores.append(ScoreRecord(frame_no, t, sc))

    while frame < total_frames:
        task = frame // config.frames_per_task
        st = env_reset(config.velocity(task), env_rng, config.catcher)
        for _ in range(config.max_episode_frames):
            task = frame // config.frames_per_task
            if st.pellet_velocity != config.velocity(task):
                st = replace(st, pellet_velocity=config.velocity(task))
            s = st.features()
            if act_rng.uniform() <= config.epsilon(frame):
                a = int(act_rng.integers(N_ACTIONS))
            else:
                a = int(np.argmax(net.q(s)))
            st, r, done = env_step(st, a, env_rng, config.catcher)
            row = store.add(s, a, r, st.features(), done)
            mem.reservoir_update(buffer, row, mem_rng)
            if replay_iter is not None:
                batches = next(replay_iter)
            else:
                batches = mem.sample_mer_batches(buffer, row, config.steps, config.k, mem_rng)
            if sample_log is not None:
                sample_log.append(batches)
            _update(net, target, store, batches, variant, config, lrs, coefs, grad, frame)
            frame += 1
            if frame % config.eval_every == 0 or frame == total_frames:
                evaluate(frame, (frame - 1) // config.frames_per_task)
            if done or frame >= total_frames:
                break
        episodes += 1
        if episodes % config.target_sync_episodes == 0:
            target[...] = theta
    return DQNResult(ParamVector(theta.copy(), spec), scores, episodes, sample_log)


def _targets(net: QNet, target: np.ndarray, store: _TransitionStore, ids, discount) -> np.ndarray:
    q_next = logits_batch(target, net.spec, store.s_next[ids]).max(axis=1)
    return np.where(store.done[ids], store.r[ids], store.r[ids] + discount * q_next)


def _update(net, target, store, batches, variant, config, lrs, coefs, grad, frame):
    theta = net.theta
    if variant == "er":
        # one mini-batch step on the mean loss of the (single) batch
        for b in batches:
            ids = np.asarray(b, dtype=np.int64)
            y = _targets(net, target, store, ids, config.discount)
            grad[...] = 0.0
            loss = net.grad_accum(store.s[ids], store.a[ids], y, coefs[:ids.size], grad)
            theta -= config.alpha * grad
            _check(loss, frame)
        return
    theta_a0 = theta.copy()
    theta_w0 = np.empty_like(theta)
    for b in batches:
        ids = np.asarray(b, dtype=np.int64)
        y = _targets(net, target, store, ids, config.discount)
        theta_w0[...] = theta
        loss = net.sgd_seq(store.s[ids], store.a[ids], y, lrs[:ids.size])
        _check(loss, frame)
        _lerp(theta_w0, theta, config.beta, out=theta)
    _lerp(theta_a0, theta, config.gamma_meta, out=theta)


def _check(loss, frame):
    if not math.isfinite(loss):
        raise StateError(f"non-finite loss {loss} at frame {frame}")
