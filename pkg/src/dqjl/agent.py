"""Experience replay and fixed-target Q-learning for the four agent variants."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
import io
import logging
import math

import numpy as np

from dqjl import net
from dqjl.env import (
    N_FEATURES,
    PaddedState,
    RoadConfig,
    is_established,
    step,
    valid_action_mask,
)
from dqjl.errors import TrainingDivergedError
from dqjl.scenario import ScenarioSpec, generate_scenario

LOG = logging.getLogger(__name__)

VARIANTS = ("dqn", "ddqn", "dueling", "d3qn")
REPORT_COLUMNS = ("episode", "return", "steps", "collided", "established", "epsilon_at_end", "mean_loss")


def variant_arch(variant: str) -> str:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return "dueling" if variant in ("dueling", "d3qn") else "standard"


def variant_is_double(variant: str) -> bool:
    return variant in ("ddqn", "d3qn")


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "ddqn"
    gamma: float = 0.99
    lr: float = 0.0005
    batch_size: int = 64
    eps_start: float = 1.0
    eps_end: float = 0.001
    eps_decay_steps: int = 10_000
    target_sync_steps: int = 100
    replay_capacity: int = 100_000
    episodes: int = 2000
    seed: int = 0
    hidden: tuple[int, int] = net.DEFAULT_HIDDEN
    max_grad_norm: float | None = None

    def __post_init__(self) -> None:
        variant_arch(self.variant)
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.eps_end > self.eps_start:
            raise ValueError("eps_end must not exceed eps_start")
        if self.batch_size < 1 or self.target_sync_steps < 1 or self.replay_capacity < 1:
            raise ValueError("batch_size, target_sync_steps and replay_capacity must be >= 1")
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")


# -- features ------------------------------------------------------------------


def feature_scales(config: RoadConfig) -> np.ndarray:
    """Fixed per-column divisors bringing every network input to order one."""
    return np.array([config.segment_length_m, 1.0, config.emv_max_speed_mps, 1.0, 10.0, 10.0])


def encode(state: PaddedState, config: RoadConfig) -> np.ndarray:
    """Flat ``6K`` network input for a padded state (padding rows stay zero)."""
    return (state.features() / feature_scales(config)).ravel()


# -- replay --------------------------------------------------------------------


@dataclass
class Experience:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool
    next_mask: np.ndarray | None = None


class ReplayBuffer:
    """Bounded FIFO of transitions with uniform minibatch sampling.

    Storage grows on demand up to ``capacity``; once full the oldest
    transition is overwritten first.
    """

    def __init__(self, capacity: int, state_dim: int, n_actions: int):
        self.capacity = int(capacity)
        self.state_dim = state_dim
        self.n_actions = n_actions
        self._size = 0
        self._next = 0
        self._alloc = 0
        self.states = np.zeros((0, state_dim))
        self.next_states = np.zeros((0, state_dim))
        self.actions = np.zeros(0, dtype=np.int64)
        self.rewards = np.zeros(0)
        self.dones = np.zeros(0, dtype=bool)
        self.next_masks = np.zeros((0, n_actions), dtype=bool)

    def __len__(self) -> int:
        return self._size

    def _grow(self) -> None:
        new = min(self.capacity, max(1024, 2 * self._alloc))
        for name in ("states", "next_states", "actions", "rewards", "dones", "next_masks"):
            old = getattr(self, name)
            arr = np.zeros((new,) + old.shape[1:], dtype=old.dtype)
            arr[: self._alloc] = old
            setattr(self, name, arr)
        self._alloc = new

    def push(self, exp: Experience) -> None:
        if self._next >= self._alloc:
            self._grow()
        i = self._next
        self.states[i] = exp.state
        self.actions[i] = exp.action
        self.rewards[i] = exp.reward
        self.next_states[i] = exp.next_state
        self.dones[i] = exp.done
        self.next_masks[i] = True if exp.next_mask is None else exp.next_mask
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if batch_size > self._size:
            raise ValueError(f"cannot sample {batch_size} from {self._size} transitions")
        return rng.choice(self._size, size=batch_size, replace=False)

    def get(self, idx: np.ndarray) -> dict[str, np.ndarray]:
        return {
            "states": self.states[idx],
            "actions": self.actions[idx],
            "rewards": self.rewards[idx],
            "next_states": self.next_states[idx],
            "dones": self.dones[idx],
            "next_masks": self.next_masks[idx],
        }

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return self.get(self.sample_indices(batch_size, rng))

    def oldest_index(self) -> int:
        return self._next if self._size == self.capacity else 0


# -- policy --------------------------------------------------------------------


def epsilon(step_count: int, cfg: TrainConfig) -> float:
    if step_count >= cfg.eps_decay_steps:
        return cfg.eps_end
    frac = step_count / cfg.eps_decay_steps
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


def masked_argmax(q: np.ndarray, mask: np.ndarray) -> np.ndarray | int:
    """Argmax over valid entries along the last axis; ties go to the lowest index."""
    return np.argmax(np.where(mask, q, -np.inf), axis=-1)


def select_action(q_values: np.ndarray, mask: np.ndarray, eps: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy over valid actions; returns the action ``m`` in ``-1..K-1``."""
    if eps > 0 and rng.random() < eps:
        return int(rng.choice(np.flatnonzero(mask))) - 1
    return int(masked_argmax(q_values, mask)) - 1


def compute_target(
    batch: dict[str, np.ndarray],
    online: net.QNetworkParams,
    target: net.QNetworkParams,
    variant: str,
    gamma: float,
) -> np.ndarray:
    """Bootstrap targets; terminal transitions take the bare reward."""
    masks = batch["next_masks"]
    q_next_target = net.forward(target, batch["next_states"])
    if variant_is_double(variant):
        q_next_online = net.forward(online, batch["next_states"])
        best = masked_argmax(q_next_online, masks)
        bootstrap = q_next_target[np.arange(len(best)), best]
    else:
        bootstrap = np.max(np.where(masks, q_next_target, -np.inf), axis=1)
    return batch["rewards"] + gamma * np.where(batch["dones"], 0.0, bootstrap)


def greedy_action(params: net.QNetworkParams, state: PaddedState, config: RoadConfig) -> int:
    q = net.forward(params, encode(state, config))
    return int(masked_argmax(q, valid_action_mask(state, config.segment_length_m))) - 1


# -- training ------------------------------------------------------------------


@dataclass
class EpisodeRecord:
    episode: int
    ret: float
    steps: int
    collided: bool
    established: bool
    epsilon_at_end: float
    mean_loss: float


@dataclass
class TrainReport:
    episodes: list[EpisodeRecord] = field(default_factory=list)
    loss_trace: list[float] = field(default_factory=list)
    params: net.QNetworkParams | None = None
    target_params: net.QNetworkParams | None = None
    env_steps: int = 0
    gradient_steps: int = 0
    target_syncs: int = 0

    def returns(self) -> np.ndarray:
        return np.array([e.ret for e in self.episodes])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for e in self.episodes:
            w.writerow(
                [
                    e.episode,
                    repr(e.ret),
                    e.steps,
                    int(e.collided),
                    int(e.established),
                    repr(e.epsilon_at_end),
                    repr(e.mean_loss),
                ]
            )
        return buf.getvalue()


def make_rngs(seed: int) -> dict[str, np.random.Generator]:
    """Independent named streams derived from one master seed."""
    names = ("init", "scenario", "env", "agent")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def train(
    cfg: TrainConfig,
    road: RoadConfig,
    scenario_spec: ScenarioSpec,
    progress_every: int = 0,
) -> TrainReport:
    """Fixed-target deep Q-learning with uniform experience replay.

    Every episode starts from a fresh random scenario. One gradient step
    follows each environment step once the buffer holds a minibatch; the
    target network copies the online weights every ``target_sync_steps``
    gradient steps.
    """
    rngs = make_rngs(cfg.seed)
    arch = variant_arch(cfg.variant)
    online = net.init_params(arch, road.pad_size, rngs["init"], cfg.hidden)
    target = online.copy()
    report = TrainReport(params=online, target_params=target)
    if cfg.episodes == 0:
        return report

    buffer = ReplayBuffer(cfg.replay_capacity, N_FEATURES * road.pad_size, road.pad_size + 1)
    cap = road.step_cap
    L = road.segment_length_m

    for ep in range(cfg.episodes):
        state = generate_scenario(scenario_spec, road, rngs["scenario"])
        feats = encode(state, road)
        mask = valid_action_mask(state, L)
        ret = 0.0
        steps = 0
        collided = False
        established = is_established(state, road)
        losses: list[float] = []
        eps = epsilon(report.env_steps, cfg)

        while not established and not collided and steps < cap:
            eps = epsilon(report.env_steps, cfg)
            q = net.forward(online, feats)
            action = select_action(q, mask, eps, rngs["agent"])
            out = step(state, action, road, rngs["env"])
            next_feats = encode(out.next_state, road)
            next_mask = valid_action_mask(out.next_state, L)
            buffer.push(Experience(feats, action, out.reward, next_feats, out.done, next_mask))
            report.env_steps += 1
            steps += 1
            ret += out.reward
            collided = out.collided
            established = out.dqjl_established
            state, feats, mask = out.next_state, next_feats, next_mask

            if len(buffer) >= cfg.batch_size:
                batch = buffer.sample(cfg.batch_size, rngs["agent"])
                y = compute_target(batch, online, target, cfg.variant, cfg.gamma)
                grads, loss = net.backward(online, batch["states"], batch["actions"] + 1, y)
                if not math.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss {loss} at episode {ep}, gradient step "
                        f"{report.gradient_steps + 1}; target range [{y.min()}, {y.max()}]"
                    )
                net.adam_step(online, grads, lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)
                report.gradient_steps += 1
                report.loss_trace.append(loss)
                losses.append(loss)
                if report.gradient_steps % cfg.target_sync_steps == 0:
                    target.copy_weights_from(online)
                    report.target_syncs += 1

        report.episodes.append(
            EpisodeRecord(
                episode=ep,
                ret=ret,
                steps=steps,
                collided=collided,
                established=established,
                epsilon_at_end=eps,
                mean_loss=float(np.mean(losses)) if losses else math.nan,
            )
        )
        if progress_every and (ep + 1) % progress_every == 0:
            recent = report.returns()[-progress_every:]
            LOG.info("episode %d  mean return %.1f  eps %.3f", ep + 1, recent.mean(), eps)
    return report
