"""Centralised, parameter-shared DQN training and the evaluation driver.

One Q-network is shared by all users. Every user contributes a transition per
slot to a common replay memory (optionally only users holding a packet), and
one gradient step is taken per slot. Training starts at the lowest arrival
rate and the weights are carried over to each following rate.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .env import SimConfig, SlottedAlohaEnv, history_indices, run_episode
from .metrics import percentile_stats, summarize
from .policy import DQNPolicy, PolicyTable, extract_policy_table, history_table
from .qnet import (Adam, DivergenceError, QNetwork, ReplayBuffer, apply_gradients, init_network,
                   loss_and_grads, sync_target, to_checkpoint)

log = logging.getLogger(__name__)


def default_lambda_grid() -> tuple:
    return tuple(round(0.20 + 0.05 * i, 2) for i in range(17))


@dataclass(frozen=True)
class TrainSchedule:
    gamma: float = 0.8
    alpha_init: float = 0.01
    alpha_decay_base: float = 5.0
    alpha_floor: float = 1e-6
    alpha_update_interval: int = 2_000
    beta_start: float = 1.0
    beta_max: float = 20.0
    train_slots_per_lambda: int = 5_000
    target_sync_interval: int = 1_000
    eval_slots: int = 30_000
    lambda_grid: tuple = field(default_factory=default_lambda_grid)
    n_users: int = 10
    batch_size: int = 32
    replay_capacity: int = 10_000
    optimizer: str = "sgd"
    # Restart the step-size decay at every arrival rate instead of holding the
    # floor after the first one.
    restart_alpha: bool = True
    # Store transitions of empty-buffer users too, so that bootstrap targets
    # landing in an empty-buffer history are fitted rather than extrapolated.
    include_empty: bool = True

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if self.beta_start > self.beta_max:
            raise ValueError("beta_start must not exceed beta_max")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        for name in ("alpha_update_interval", "target_sync_interval", "train_slots_per_lambda"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def lr_schedule(step: int, schedule: TrainSchedule = TrainSchedule()) -> float:
    """Step size after ``step`` decays: ``max(alpha_init / base**step, floor)``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return max(schedule.alpha_init * schedule.alpha_decay_base ** -step, schedule.alpha_floor)


def beta_schedule(slot: int, total_slots: int, schedule: TrainSchedule = TrainSchedule()) -> float:
    """Linear ramp of the softmax temperature over the first training phase."""
    if not 0 <= slot <= total_slots:
        raise ValueError("slot must lie in [0, total_slots]")
    frac = slot / total_slots
    return schedule.beta_start + (schedule.beta_max - schedule.beta_start) * frac


@dataclass
class TrainTrace:
    """Per-slot training record: slot, lambda, alpha, beta, loss, reward."""

    rows: list = field(default_factory=list)
    stride: int = 1

    def add(self, slot, lam, alpha, beta, loss, reward):
        if slot % self.stride == 0:
            self.rows.append((slot, lam, alpha, beta, loss, reward))


@dataclass
class Learner:
    """Shared network, its target copy, the pooled replay memory and RNG."""

    net: QNetwork
    target: QNetwork
    replay: ReplayBuffer
    rng: np.random.Generator
    schedule: TrainSchedule
    optimizer: Adam | None = None
    slots_done: int = 0
    phases_done: int = 0

    @classmethod
    def fresh(cls, master_seed: int, schedule: TrainSchedule) -> "Learner":
        net = init_network(rngmod.substream(master_seed, rngmod.WEIGHT_INIT))
        return cls(
            net=net,
            target=net.copy(),
            replay=ReplayBuffer(schedule.replay_capacity),
            rng=rngmod.substream(master_seed, rngmod.REPLAY),
            schedule=schedule,
            optimizer=Adam() if schedule.optimizer == "adam" else None,
        )


@dataclass
class PhaseStats:
    lam: float
    transitions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    versions: list = field(default_factory=list)
    target_changes: list = field(default_factory=list)
    alphas: list = field(default_factory=list)


def train_for_lambda(learner: Learner, lam: float, env_seed: int,
                     trace: TrainTrace | None = None, stats: PhaseStats | None = None) -> QNetwork:
    """Run one training phase of ``train_slots_per_lambda`` slots at rate ``lam``.

    The first phase a learner sees ramps the temperature; later phases act at
    ``beta_max``. The step size decays within every phase when
    ``restart_alpha`` is set, otherwise only in the first one and later
    phases run at the floor.
    """
    sch = learner.schedule
    first = learner.phases_done == 0
    total = sch.train_slots_per_lambda
    env = SlottedAlohaEnv(SimConfig(sch.n_users, lam, total, env_seed))
    net, target = learner.net, learner.target
    if first:
        sync_target(net, target)

    for t in range(total):
        if first or sch.restart_alpha:
            alpha = lr_schedule(t // sch.alpha_update_interval, sch)
        else:
            alpha = sch.alpha_floor
        beta = beta_schedule(t, total, sch) if first else sch.beta_max

        states = env.begin_slot()
        version = net.version
        table = history_table(net, beta)
        actions = env.act(table[history_indices(states)])
        outcome = env.end_slot(actions)
        reward = int(outcome.successes.sum())

        keep = np.ones(len(states), dtype=bool) if sch.include_empty else states[:, 2] == 1
        n_new = int(keep.sum())
        if n_new:
            learner.replay.push_many(states[keep], actions[keep], reward, env.histories()[keep])

        loss = math.nan
        if len(learner.replay) >= sch.batch_size:
            batch = learner.replay.sample(sch.batch_size, learner.rng)
            try:
                loss, gw, gb = loss_and_grads(batch, net, target, sch.gamma)
                apply_gradients(net, gw, gb, alpha, learner.optimizer)
            except DivergenceError:
                log.error("training diverged at lambda=%s slot=%d", lam, t)
                raise

        synced = (t + 1) % sch.target_sync_interval == 0
        if synced:
            sync_target(net, target)

        if trace is not None:
            trace.add(learner.slots_done, lam, alpha, beta, loss, reward)
        if stats is not None:
            stats.transitions.append(n_new)
            stats.rewards.append(reward)
            stats.versions.append(version)
            stats.target_changes.append(synced)
            stats.alphas.append(alpha)
        learner.slots_done += 1

    learner.phases_done += 1
    if not net.all_finite():
        raise DivergenceError(f"non-finite parameters after lambda={lam}")
    return net


@dataclass
class PhaseResult:
    lam: float
    checkpoint: dict
    table: PolicyTable
    net: QNetwork


@dataclass
class SweepResult:
    master_seed: int
    schedule: TrainSchedule
    phases: list
    trace: TrainTrace

    def by_lambda(self) -> dict:
        return {p.lam: p for p in self.phases}

    def net_for(self, lam: float) -> QNetwork:
        for p in self.phases:
            if math.isclose(p.lam, lam, abs_tol=1e-9):
                return p.net
        raise KeyError(f"no phase trained at lambda={lam}")


def transfer_sweep(lambda_grid, schedule: TrainSchedule = TrainSchedule(), master_seed: int = 0,
                   trace_stride: int = 1) -> SweepResult:
    """Train through ``lambda_grid`` in order, carrying the weights forward."""
    grid = [float(x) for x in lambda_grid]
    if not grid:
        raise ValueError("empty lambda grid")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("lambda grid must be strictly ascending")
    learner = Learner.fresh(master_seed, schedule)
    trace = TrainTrace(stride=trace_stride)
    phases = []
    for i, lam in enumerate(grid):
        env_seed = rngmod.derive_seed(master_seed, rngmod.TRAIN_ENV, i)
        train_for_lambda(learner, lam, env_seed, trace)
        table = extract_policy_table(learner.net, schedule.beta_max)
        log.info("seed %d lambda %.2f table %s", master_seed, lam, table.probs)
        phases.append(PhaseResult(lam, to_checkpoint(learner.net), table, learner.net.copy()))
    return SweepResult(master_seed, schedule, phases, trace)


# ------------------------------------------------------------ evaluation --

@dataclass
class Evaluation:
    """Per-seed summaries of one (policy, lambda) pair and their means."""

    policy_id: str
    lam: float
    runs: list

    @property
    def mean_throughput(self) -> float:
        return float(np.mean([r["throughput"] for r in self.runs]))

    @property
    def mean_system_aop(self) -> float:
        return float(np.mean([r["system_aop"] for r in self.runs]))

    def mean_of(self, key: str) -> float:
        return float(np.mean([r[key] for r in self.runs]))


def evaluate_one(policy, lam: float, slots: int, seed: int, n_users: int = 10,
                 boxplot: bool = True) -> dict:
    """Run one frozen-policy episode and reduce it to its summary numbers."""
    log_ = run_episode(policy, SimConfig(n_users, lam, slots, seed))
    summary = summarize(log_)
    if boxplot:
        summary["boxplot"] = [vars(b) for b in percentile_stats(log_.aop)]
    return summary


def evaluate(policy, lam: float, eval_slots: int, seed_list, n_users: int = 10,
             jobs: int = 1, boxplot: bool = True) -> Evaluation:
    seeds = list(seed_list)
    if len(set(seeds)) != len(seeds):
        raise ValueError("duplicate evaluation seeds")
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = [pool.submit(evaluate_one, policy, lam, eval_slots, s, n_users, boxplot) for s in seeds]
            runs = [f.result() for f in futs]
    else:
        runs = [evaluate_one(policy, lam, eval_slots, s, n_users, boxplot) for s in seeds]
    return Evaluation(policy.policy_id, lam, runs)


def dqn_policy(net: QNetwork, schedule: TrainSchedule = TrainSchedule()) -> DQNPolicy:
    """Frozen evaluation policy: softmax at the final temperature."""
    return DQNPolicy(net, schedule.beta_max)
