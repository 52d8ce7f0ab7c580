"""Small fully connected Q-network with hand-written backpropagation.

Layout is 3 inputs (the history bits) -> 30 -> 20 -> 2 outputs
``(Q(wait|s), Q(transmit|s))``, rectifier on hidden layers, identity output.
Weights are stored as ``(fan_in, fan_out)`` so a batch of row vectors is
propagated with ``x @ W + b``.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

LAYER_SIZES = (3, 30, 20, 2)
CHECKPOINT_FORMAT = "aloha-dqn-qnet/1"


class DivergenceError(FloatingPointError):
    """Raised when a gradient or parameter stops being finite."""


@dataclass
class QNetwork:
    weights: list
    biases: list
    version: int = 0

    @property
    def sizes(self) -> tuple:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def copy(self) -> "QNetwork":
        return QNetwork([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.version)

    def parameters(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.parameters())


def zeros_network(sizes: Sequence[int] = LAYER_SIZES) -> QNetwork:
    return QNetwork(
        [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
        [np.zeros(b) for b in sizes[1:]],
    )


def init_network(rng: np.random.Generator, sizes: Sequence[int] = LAYER_SIZES) -> QNetwork:
    """Gaussian weights with standard deviation ``1/sqrt(fan_in)``, zero biases."""
    weights = [rng.standard_normal((a, b)) / np.sqrt(a) for a, b in zip(sizes[:-1], sizes[1:])]
    return QNetwork(weights, [np.zeros(b) for b in sizes[1:]])


def _as_batch(states) -> tuple[np.ndarray, bool]:
    x = np.asarray(states, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def _forward_cache(net: QNetwork, x: np.ndarray):
    pre, acts = [], [x]
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return pre, acts


def forward(net: QNetwork, states) -> np.ndarray:
    """Q-values for one history (returns shape (2,)) or a batch (shape (B, 2))."""
    x, single = _as_batch(states)
    _, acts = _forward_cache(net, x)
    out = acts[-1]
    return out[0] if single else out


# ----------------------------------------------------------------- replay --

class Transition(NamedTuple):
    state: tuple
    action: int
    reward: int
    next_state: tuple


@dataclass
class TransitionBatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray

    def __len__(self):
        return len(self.actions)

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> "TransitionBatch":
        if len(transitions) == 0:
            return cls(np.zeros((0, 3)), np.zeros(0, np.int64), np.zeros(0), np.zeros((0, 3)))
        s, a, r, s2 = zip(*transitions)
        return cls(np.array(s, np.float64), np.array(a, np.int64),
                   np.array(r, np.float64), np.array(s2, np.float64))

    def transitions(self) -> list[Transition]:
        return [
            Transition(tuple(int(v) for v in s), int(a), int(r), tuple(int(v) for v in s2))
            for s, a, r, s2 in zip(self.states, self.actions, self.rewards, self.next_states)
        ]


def _coerce(batch) -> TransitionBatch:
    if isinstance(batch, TransitionBatch):
        return batch
    return TransitionBatch.from_transitions(list(batch))


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with uniform sampling."""

    def __init__(self, capacity: int = 10_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.states = np.zeros((capacity, 3), dtype=np.float64)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float64)
        self.next_states = np.zeros((capacity, 3), dtype=np.float64)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, t: Transition) -> None:
        if t.reward not in (0, 1):
            raise ValueError("reward must be 0 or 1")
        i = self.cursor
        self.states[i] = t.state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.next_states[i] = t.next_state
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def push_many(self, states, actions, reward, next_states) -> None:
        """Push one transition per row; all rows share the same reward."""
        for j in range(len(actions)):
            i = self.cursor
            self.states[i] = states[j]
            self.actions[i] = actions[j]
            self.rewards[i] = reward
            self.next_states[i] = next_states[j]
            self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + len(actions), self.capacity)

    def items(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        start = self.cursor if self.size == self.capacity else 0
        order = [(start + j) % self.capacity for j in range(self.size)]
        return self._gather(np.array(order, dtype=np.int64)).transitions()

    def _gather(self, idx) -> TransitionBatch:
        return TransitionBatch(self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx])

    def sample(self, m: int, rng: np.random.Generator) -> TransitionBatch:
        if m < 1:
            raise ValueError("mini-batch size must be >= 1")
        if self.size < m:
            raise ValueError(f"replay holds {self.size} transitions, cannot sample {m}")
        return self._gather(rng.integers(0, self.size, size=m))


def replay_push(buf: ReplayBuffer, t: Transition) -> None:
    buf.push(t)


def replay_sample(buf: ReplayBuffer, m: int, rng: np.random.Generator) -> TransitionBatch:
    return buf.sample(m, rng)


# ------------------------------------------------------------- learning --

def bellman_targets(batch: TransitionBatch, target: QNetwork, gamma: float) -> np.ndarray:
    """``r + gamma * max_a' Q(a', s'; target)``; treated as constants."""
    return batch.rewards + gamma * forward(target, batch.next_states).max(axis=1)


def q_loss(batch, net: QNetwork, target: QNetwork, gamma: float) -> float:
    batch = _coerce(batch)
    if len(batch) == 0:
        raise ValueError("empty batch")
    if not 0 <= gamma <= 1:
        raise ValueError("gamma must lie in [0, 1]")
    q = forward(net, batch.states)[np.arange(len(batch)), batch.actions]
    resid = bellman_targets(batch, target, gamma) - q
    return float(np.mean(resid ** 2))


def loss_and_grads(batch, net: QNetwork, target: QNetwork, gamma: float):
    """Q-loss and its exact gradient with respect to every parameter of ``net``."""
    batch = _coerce(batch)
    m = len(batch)
    if m == 0:
        raise ValueError("empty batch")
    y = bellman_targets(batch, target, gamma)
    pre, acts = _forward_cache(net, batch.states)
    rows = np.arange(m)
    resid = y - acts[-1][rows, batch.actions]
    loss = float(np.mean(resid ** 2))

    delta = np.zeros_like(acts[-1])
    delta[rows, batch.actions] = -2.0 * resid / m
    grads_w = [None] * len(net.weights)
    grads_b = [None] * len(net.weights)
    for i in range(len(net.weights) - 1, -1, -1):
        grads_w[i] = acts[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i].T) * (pre[i - 1] > 0)
    return loss, grads_w, grads_b


class Adam:
    """Adaptive moment optimizer; off by default (plain descent is the default)."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def direction(self, grads):
        if self.m is None:
            self.m = [np.zeros_like(g) for g in grads]
            self.v = [np.zeros_like(g) for g in grads]
        self.t += 1
        out = []
        for i, g in enumerate(grads):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            mh = self.m[i] / (1 - self.beta1 ** self.t)
            vh = self.v[i] / (1 - self.beta2 ** self.t)
            out.append(mh / (np.sqrt(vh) + self.eps))
        return out


def apply_gradients(net: QNetwork, grads_w, grads_b, alpha: float,
                    optimizer: Adam | None = None) -> QNetwork:
    """Descend along precomputed gradients, in place; bumps ``net.version``."""
    if alpha < 0:
        raise ValueError("step size must be >= 0")
    grads = list(grads_w) + list(grads_b)
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise DivergenceError(f"non-finite gradient at version {net.version}")
    if optimizer is not None:
        grads = optimizer.direction(grads)
    n = len(net.weights)
    for i in range(n):
        net.weights[i] -= alpha * grads[i]
        net.biases[i] -= alpha * grads[n + i]
    net.version += 1
    if not net.all_finite():
        raise DivergenceError(f"non-finite parameters after update {net.version}")
    return net


def grad_step(net: QNetwork, batch, target: QNetwork, gamma: float, alpha: float,
              optimizer: Adam | None = None) -> QNetwork:
    """One descent step on the Q-loss. Updates ``net`` in place and returns it."""
    _, gw, gb = loss_and_grads(batch, net, target, gamma)
    return apply_gradients(net, gw, gb, alpha, optimizer)


def sync_target(net: QNetwork, target: QNetwork) -> QNetwork:
    """Copy every parameter of ``net`` into ``target`` (in place)."""
    if net.sizes != target.sizes:
        raise ValueError(f"architecture mismatch: {net.sizes} vs {target.sizes}")
    for dst, src in zip(target.parameters(), net.parameters()):
        dst[...] = src
    target.version = net.version
    return target


# ------------------------------------------------------------ checkpoints --

def to_checkpoint(net: QNetwork) -> dict:
    """Flat, portable form: layer sizes then row-major W and b as hex floats."""
    values = []
    for w, b in zip(net.weights, net.biases):
        values.extend(float(v).hex() for v in w.ravel(order="C"))
        values.extend(float(v).hex() for v in b)
    return {"format": CHECKPOINT_FORMAT, "dims": list(net.sizes), "version": net.version, "values": values}


def from_checkpoint(doc: dict) -> QNetwork:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    dims = [int(d) for d in doc["dims"]]
    flat = [float.fromhex(v) for v in doc["values"]]
    expected = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    if len(flat) != expected:
        raise ValueError(f"checkpoint holds {len(flat)} values, dims need {expected}")
    weights, biases, pos = [], [], 0
    for a, b in zip(dims[:-1], dims[1:]):
        weights.append(np.array(flat[pos:pos + a * b]).reshape(a, b))
        pos += a * b
        biases.append(np.array(flat[pos:pos + b]))
        pos += b
    return QNetwork(weights, biases, int(doc.get("version", 0)))


def save_checkpoint(net: QNetwork, path) -> None:
    write_atomic(path, json.dumps(to_checkpoint(net), indent=1) + "\n")


def load_checkpoint(path) -> QNetwork:
    with open(path) as f:
        return from_checkpoint(json.load(f))


def write_atomic(path, text: str) -> None:
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
