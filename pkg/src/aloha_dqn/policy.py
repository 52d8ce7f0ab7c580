"""Transmission policies: exponential backoff baselines and the softmax DQN policy.

A policy maps each user's decision state ``(previous action, previous
feedback, buffer)`` to a transmit probability. Policies that reduce to a
lookup (a history table, or a backoff counter) also describe themselves to
the compiled slot loop through :meth:`Policy.kernel_spec`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import _kernel
from .env import ALL_HISTORIES, BUFFER_FULL_LABELS, History, UserState, history_indices
from .qnet import QNetwork, forward

NSEB = "nseb"
SEB = "seb"
DEFAULT_CMAX = 32


@dataclass(frozen=True)
class KernelSpec:
    kind: int
    table: np.ndarray
    symmetric: bool = False
    cmax: int = 0


class Policy:
    policy_id = "policy"

    def reset(self, n_users: int) -> None:
        pass

    def transmit_probs(self, states: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def transmit_prob(self, user_state: UserState, user: int = 0) -> float:
        h = user_state.history
        state = np.array([[h.prev_action, h.prev_feedback, user_state.intermediate_buffer]])
        return float(self.transmit_probs_for(state, user))

    def transmit_probs_for(self, states, user):
        return self.transmit_probs(states)[0]

    def observe(self, actions: np.ndarray, feedback: int) -> None:
        pass

    def kernel_spec(self) -> KernelSpec | None:
        return None


class TablePolicy(Policy):
    """Transmit probability looked up by history label (1..8)."""

    def __init__(self, probs, policy_id="table"):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != (8,):
            raise ValueError("a history table needs 8 probabilities")
        if np.any(~((probs >= 0) & (probs <= 1))):
            raise ValueError("probabilities must lie in [0, 1]")
        self.table = probs
        self.policy_id = policy_id

    def transmit_probs(self, states):
        return self.table[history_indices(states)]

    def kernel_spec(self):
        return KernelSpec(_kernel.TABLE, self.table)


class FixedProbability(TablePolicy):
    """Transmit with the same probability regardless of history."""

    def __init__(self, p: float):
        super().__init__(np.full(8, p), policy_id=f"fixed-{p:g}")
        self.p = p


# ---------------------------------------------------------------- backoff --

@dataclass(frozen=True)
class EbState:
    collision_count: int = 0
    variant: str = NSEB
    sigma: float = 2.0
    c_max: int = DEFAULT_CMAX

    def __post_init__(self):
        if self.variant not in (NSEB, SEB):
            raise ValueError(f"unknown backoff variant {self.variant!r}")
        if not self.sigma > 1:
            raise ValueError("backoff factor must exceed 1")
        if not 0 <= self.collision_count <= self.c_max:
            raise ValueError("collision count out of range")


def eb_transmit_prob(eb: EbState) -> float:
    return eb.sigma ** -min(eb.collision_count, eb.c_max)


def eb_update(eb: EbState, own_action: int, feedback: int) -> EbState:
    """Advance the collision counter after one slot.

    nSEB reacts only to the user's own outcome: it backs off when its own
    packet collided and resets after its own success. SEB reacts to the
    broadcast: every user backs off on a collision and resets on F=1.
    """
    c = eb.collision_count
    if feedback == 0:
        if eb.variant == SEB or own_action == 1:
            c = min(c + 1, eb.c_max)
    elif eb.variant == SEB or own_action == 1:
        c = 0
    return replace(eb, collision_count=c)


class ExponentialBackoff(Policy):
    """Per-user exponential backoff with transmit probability ``sigma**-c``."""

    def __init__(self, variant: str, sigma: float, c_max: int = DEFAULT_CMAX):
        EbState(variant=variant, sigma=sigma, c_max=c_max)  # validates
        self.variant = variant
        self.sigma = float(sigma)
        self.c_max = int(c_max)
        self.symmetric = variant == SEB
        self.policy_id = f"{variant}-{sigma:g}"
        self.table = self.sigma ** -np.arange(self.c_max + 1, dtype=np.float64)
        self.counters = np.zeros(0, dtype=np.int64)

    def reset(self, n_users):
        self.counters = np.zeros(n_users, dtype=np.int64)

    def transmit_probs(self, states):
        return self.table[self.counters]

    def transmit_probs_for(self, states, user):
        return self.table[self.counters[user]]

    def observe(self, actions, feedback):
        actions = np.asarray(actions)
        movers = np.ones_like(actions, dtype=bool) if self.symmetric else actions == 1
        if feedback == 0:
            self.counters = np.where(movers, np.minimum(self.counters + 1, self.c_max), self.counters)
        else:
            self.counters = np.where(movers, 0, self.counters)

    def state_of(self, user: int) -> EbState:
        return EbState(int(self.counters[user]), self.variant, self.sigma, self.c_max)

    def kernel_spec(self):
        return KernelSpec(_kernel.BACKOFF, self.table, self.symmetric, self.c_max)


# -------------------------------------------------------------------- DQN --

def softmax_probs(q_values, beta: float) -> np.ndarray:
    """Boltzmann distribution over actions; works row-wise on ``(..., 2)``."""
    q = np.asarray(q_values, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise ValueError("Q-values must be finite")
    if not beta > 0:
        raise ValueError("beta must be positive")
    z = beta * (q - q.max(axis=-1, keepdims=True))
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


HISTORY_MATRIX = np.array(ALL_HISTORIES, dtype=np.float64)


def history_table(net: QNetwork, beta: float) -> np.ndarray:
    """Transmit probability for all 8 histories, in label order."""
    return softmax_probs(forward(net, HISTORY_MATRIX), beta)[:, 1]


class DQNPolicy(TablePolicy):
    """Frozen softmax policy over a Q-network, shared by every user."""

    def __init__(self, net: QNetwork, beta: float = 20.0, policy_id: str = "dqn"):
        super().__init__(history_table(net, beta), policy_id=policy_id)
        self.beta = beta
        self.net_version = net.version


@dataclass(frozen=True)
class PolicyTable:
    """Transmit probability for the four buffer-full histories s1, s3, s5, s7."""

    probs: dict

    def __getitem__(self, label: int) -> float:
        return self.probs[label]

    def rows(self):
        return [(f"s{j}", self.probs[j]) for j in BUFFER_FULL_LABELS]


def extract_policy_table(net: QNetwork, beta: float) -> PolicyTable:
    table = history_table(net, beta)
    return PolicyTable({j: float(table[j - 1]) for j in BUFFER_FULL_LABELS})


def act(policy: Policy, user_state: UserState, rng: np.random.Generator, user: int = 0) -> int:
    """Draw one action; an empty intermediate buffer never transmits."""
    if user_state.intermediate_buffer == 0:
        return 0
    p = policy.transmit_prob(user_state, user)
    if not 0 <= p <= 1 or math.isnan(p):
        raise ValueError("transmit probability out of range")
    return int(rng.random() < p)


def make_policy(name: str, sigma: float | None = None, c_max: int = DEFAULT_CMAX) -> Policy:
    """Build a baseline from ``nseb``/``seb`` + sigma or a ``fixed-p`` id."""
    if name in (NSEB, SEB):
        if sigma is None:
            raise ValueError("backoff policies need sigma")
        return ExponentialBackoff(name, sigma, c_max)
    if name.startswith("fixed-"):
        return FixedProbability(float(name.split("-", 1)[1]))
    raise ValueError(f"unknown policy {name!r}")


__all__ = [
    "ALL_HISTORIES", "DQNPolicy", "EbState", "ExponentialBackoff", "FixedProbability",
    "History", "KernelSpec", "NSEB", "Policy", "PolicyTable", "SEB", "TablePolicy", "act",
    "eb_transmit_prob", "eb_update", "extract_policy_table", "history_table",
    "make_policy", "softmax_probs",
]
