"""Slotted random-access channel with single-packet buffers and binary feedback.

Within a slot the events run in this order for every user:

1. read the buffer ``B(k)``;
2. draw Poisson arrivals ``U(k)``;
3. fill the intermediate buffer ``min(B(k) + U(k), 1)`` (overflow is discarded);
4. draw the action from the policy, forced to 0 on an empty buffer;
5. broadcast the feedback (0 on a collision, 1 otherwise, idle included);
6. delete a successfully delivered packet;
7. roll the history forward to ``(A(k), F(k), B(k+1))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, NamedTuple

import numpy as np

from . import _kernel, rng
from .metrics import MetricsLog, update_aop

CHUNK = 4096


class ProtocolViolation(RuntimeError):
    """A policy tried to transmit from an empty buffer."""


@dataclass(frozen=True)
class SimConfig:
    n_users: int
    total_arrival_rate: float
    horizon: int
    master_seed: int = 0
    # Test fixture only: refill every buffer each slot.
    saturated: bool = False

    def __post_init__(self):
        if self.n_users < 1:
            raise ValueError("n_users must be >= 1")
        if not (self.total_arrival_rate >= 0 and math.isfinite(self.total_arrival_rate)):
            raise ValueError("total_arrival_rate must be finite and >= 0")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def per_user_rate(self) -> float:
        return self.total_arrival_rate / self.n_users


class History(NamedTuple):
    """What a user remembers at the start of a slot."""

    prev_action: int
    prev_feedback: int
    buffer: int

    @property
    def index(self) -> int:
        """Zero-based position in label order (s1 = (0,0,1) is index 0)."""
        return 4 * self.prev_action + 2 * self.prev_feedback + (1 - self.buffer)

    @property
    def label(self) -> int:
        return self.index + 1

    @classmethod
    def from_label(cls, label: int) -> "History":
        if not 1 <= label <= 8:
            raise ValueError("history labels run from 1 to 8")
        i = label - 1
        return cls(i // 4, (i // 2) % 2, 1 - i % 2)


ALL_HISTORIES = tuple(History.from_label(j) for j in range(1, 9))
BUFFER_FULL_LABELS = (1, 3, 5, 7)
INITIAL_HISTORY = History(0, 1, 0)


def history_indices(states: np.ndarray) -> np.ndarray:
    """Vectorised :attr:`History.index` for an ``(n, 3)`` array of histories."""
    states = np.asarray(states)
    return 4 * states[:, 0] + 2 * states[:, 1] + (1 - states[:, 2])


@dataclass
class UserState:
    history: History = INITIAL_HISTORY
    intermediate_buffer: int = 0
    aop: int = 0
    policy_scratch: Any = None


@dataclass
class SlotOutcome:
    feedback: int
    successes: np.ndarray
    arrivals: np.ndarray | None = None
    discarded: np.ndarray | None = None


def sample_arrivals(streams, per_user_rate: float) -> np.ndarray:
    """One Poisson draw per user, each from that user's own stream."""
    if per_user_rate < 0:
        raise ValueError("arrival rate must be >= 0")
    return np.array([s.poisson(per_user_rate) for s in streams], dtype=np.int64)


def apply_arrivals(buffer: int, arrivals: int) -> tuple[int, int]:
    """Clamp the buffer at one packet; return (intermediate buffer, discarded)."""
    total = buffer + arrivals
    return min(total, 1), max(total - 1, 0)


def resolve_slot(actions) -> SlotOutcome:
    actions = np.asarray(actions, dtype=np.int64)
    if np.any((actions != 0) & (actions != 1)):
        raise ValueError("actions must be 0 or 1")
    feedback = 0 if actions.sum() >= 2 else 1
    successes = (actions * feedback).astype(np.uint8)
    return SlotOutcome(feedback=feedback, successes=successes)


def advance_user(state: UserState, action: int, feedback: int) -> UserState:
    """End of slot for one user: drop a delivered packet and roll the history."""
    if action == 1 and state.intermediate_buffer == 0:
        raise ProtocolViolation("transmission attempted from an empty buffer")
    success = 1 if (action == 1 and feedback == 1) else 0
    buffer = state.intermediate_buffer - success
    return UserState(
        history=History(action, feedback, buffer),
        intermediate_buffer=state.intermediate_buffer,
        aop=update_aop(state.aop, buffer),
        policy_scratch=state.policy_scratch,
    )


class SlotRandomness:
    """Per-user arrival counts and action uniforms, pre-drawn in chunks.

    Draws are made ``CHUNK`` slots at a time regardless of the horizon, so a
    shorter episode sees a prefix of a longer one with the same seed.
    """

    def __init__(self, config: SimConfig):
        self.config = config
        n = config.n_users
        self._arrival_streams = [rng.substream(config.master_seed, rng.ARRIVALS, i) for i in range(n)]
        self._action_streams = [rng.substream(config.master_seed, rng.ACTIONS, i) for i in range(n)]
        self._chunk_start = -CHUNK
        self.arrivals = None
        self.uniforms = None

    def chunk(self, start: int):
        if start != self._chunk_start + CHUNK:
            raise RuntimeError("chunks must be consumed in order")
        rate = self.config.per_user_rate
        self.arrivals = np.stack([s.poisson(rate, CHUNK) for s in self._arrival_streams], axis=1)
        self.uniforms = np.stack([s.random(CHUNK) for s in self._action_streams], axis=1)
        self._chunk_start = start
        return self.arrivals, self.uniforms


class SlottedAlohaEnv:
    """Stateful channel driven one slot at a time.

    Call :meth:`begin_slot`, then :meth:`act` with per-user transmit
    probabilities, then :meth:`end_slot`.
    """

    def __init__(self, config: SimConfig):
        self.config = config
        self.reset()

    def reset(self):
        n = self.config.n_users
        self.k = 0
        self.buffer = np.zeros(n, dtype=np.int64)
        self.prev_action = np.zeros(n, dtype=np.int64)
        self.prev_feedback = INITIAL_HISTORY.prev_feedback
        self.aop = np.zeros(n, dtype=np.int64)
        self.intermediate = np.zeros(n, dtype=np.int64)
        self._draws = SlotRandomness(self.config)
        self._arrivals = None
        self._discarded = None
        self._u = None
        self._phase = "idle"

    def histories(self) -> np.ndarray:
        """``(N, 3)`` array of (previous action, previous feedback, B(k))."""
        fb = np.full_like(self.buffer, self.prev_feedback)
        return np.stack([self.prev_action, fb, self.buffer], axis=1)

    def decision_states(self) -> np.ndarray:
        """Histories with the buffer bit refreshed by this slot's arrivals.

        This is what a policy sees when it decides; users with an empty
        intermediate buffer never consult it.
        """
        fb = np.full_like(self.buffer, self.prev_feedback)
        return np.stack([self.prev_action, fb, self.intermediate], axis=1)

    def begin_slot(self) -> np.ndarray:
        if self._phase != "idle":
            raise RuntimeError("begin_slot called twice without end_slot")
        if self.k >= self.config.horizon:
            raise RuntimeError("episode horizon exhausted")
        t = self.k % CHUNK
        if t == 0:
            self._draws.chunk(self.k)
        arrivals = self._draws.arrivals[t]
        total = self.buffer + arrivals
        self.intermediate = np.minimum(total, 1)
        if self.config.saturated:
            self.intermediate = np.ones_like(self.buffer)
        self._discarded = np.maximum(total - 1, 0)
        self._arrivals = arrivals
        self._u = self._draws.uniforms[t]
        self._phase = "arrived"
        return self.decision_states()

    def act(self, probs) -> np.ndarray:
        """Bernoulli draws from this slot's uniforms; empty buffers stay silent."""
        if self._phase != "arrived":
            raise RuntimeError("act called outside a slot")
        probs = np.broadcast_to(np.asarray(probs, dtype=np.float64), self.buffer.shape)
        if np.any(~((probs >= 0) & (probs <= 1))):
            raise ValueError("transmit probabilities must lie in [0, 1]")
        return ((self._u < probs) & (self.intermediate == 1)).astype(np.int64)

    def end_slot(self, actions) -> SlotOutcome:
        if self._phase != "arrived":
            raise RuntimeError("end_slot called before begin_slot")
        actions = np.asarray(actions, dtype=np.int64)
        if np.any((actions == 1) & (self.intermediate == 0)):
            raise ProtocolViolation("transmission attempted from an empty buffer")
        outcome = resolve_slot(actions)
        outcome.arrivals = self._arrivals
        outcome.discarded = self._discarded
        self.buffer = self.intermediate - outcome.successes
        self.prev_action = actions
        self.prev_feedback = outcome.feedback
        self.aop = np.where(self.buffer == 1, self.aop + 1, 0)
        self.k += 1
        self._phase = "idle"
        return outcome


@dataclass
class EpisodeRecorder:
    """Default metrics sink: fills a :class:`MetricsLog` slot by slot."""

    log: MetricsLog
    check_invariants: bool = False
    _prev_buffer: np.ndarray | None = field(default=None, repr=False)

    def record(self, k, outcome: SlotOutcome, aop, buffer, actions):
        log = self.log
        log.successes[k] = outcome.successes
        log.aop[k] = aop
        log.arrivals[k] = outcome.arrivals
        log.discarded[k] = outcome.discarded
        log.feedback[k] = outcome.feedback
        if self.check_invariants:
            prev = self._prev_buffer if self._prev_buffer is not None else np.zeros_like(buffer)
            g = outcome.successes.astype(np.int64)
            assert g.sum() <= 1
            assert np.all(g <= actions)
            if not log_is_saturated(log):
                assert np.array_equal(buffer, np.minimum(prev + outcome.arrivals, 1) - g)
            self._prev_buffer = buffer.copy()


def log_is_saturated(log: MetricsLog) -> bool:
    return bool(log.extra.get("saturated", False))


def run_episode(policy, config: SimConfig, metrics_sink: EpisodeRecorder | None = None,
                engine: str = "auto") -> MetricsLog:
    """Simulate ``config.horizon`` slots of ``policy`` and return the slot log.

    ``engine="compiled"`` uses the numba loop (policy must expose a lookup
    via ``kernel_spec()``), ``"python"`` steps :class:`SlottedAlohaEnv`, and
    ``"auto"`` picks the compiled loop whenever the policy allows it.
    """
    if engine not in ("auto", "compiled", "python"):
        raise ValueError(f"unknown engine {engine!r}")
    policy.reset(config.n_users)
    if metrics_sink is None:
        metrics_sink = EpisodeRecorder(MetricsLog.allocate(
            config.n_users, config.total_arrival_rate, config.horizon,
            config.master_seed, policy.policy_id))
    log = metrics_sink.log
    log.extra["saturated"] = config.saturated
    spec = policy.kernel_spec()
    if engine == "compiled" and spec is None:
        raise ValueError(f"policy {policy.policy_id} has no compiled form")
    if spec is not None and engine != "python" and not metrics_sink.check_invariants:
        _run_compiled(spec, config, log)
    else:
        _run_python(policy, config, metrics_sink)
    log.check_shapes()
    return log


def _run_python(policy, config, sink):
    env = SlottedAlohaEnv(config)
    for k in range(config.horizon):
        states = env.begin_slot()
        actions = env.act(policy.transmit_probs(states))
        outcome = env.end_slot(actions)
        policy.observe(actions, outcome.feedback)
        sink.record(k, outcome, env.aop, env.buffer, actions)


def _run_compiled(spec, config, log):
    n = config.n_users
    draws = SlotRandomness(config)
    buffer = np.zeros(n, dtype=np.int64)
    prev_action = np.zeros(n, dtype=np.int64)
    prev_feedback = np.array([INITIAL_HISTORY.prev_feedback], dtype=np.int64)
    aop = np.zeros(n, dtype=np.int64)
    counters = np.zeros(n, dtype=np.int64)
    table = np.ascontiguousarray(spec.table, dtype=np.float64)
    for start in range(0, config.horizon, CHUNK):
        arrivals, uniforms = draws.chunk(start)
        _kernel.run_chunk(
            arrivals, uniforms, min(CHUNK, config.horizon - start), config.saturated,
            spec.kind, table, spec.symmetric, spec.cmax,
            buffer, prev_action, prev_feedback, aop, counters,
            log.successes, log.aop, log.arrivals, log.discarded, log.feedback, start,
        )
