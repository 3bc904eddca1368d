"""Two-lane road segment MDP for dynamic queue-jump lane establishment.

Lane 0 is the lane the emergency vehicle (EMV) needs cleared; lane 1 is the
lane vehicles pull over into. Each row of a :class:`PaddedState` is one
non-EMV. Rows ``[0, n_real)`` are real vehicles; the remaining rows are
zero-filled padding that never moves, collides, or earns reward.
"""

from __future__ import annotations

from dataclasses import dataclass
import math
from typing import Iterable, Sequence

import numpy as np

from dqjl.errors import (
    InvalidActionError,
    InvalidProbabilityError,
    TooManyVehiclesError,
)

N_FEATURES = 6
FEATURE_NAMES = ("x", "lane", "v", "z", "b_star", "length")


@dataclass(frozen=True)
class RoadConfig:
    segment_length_m: float = 150.0
    min_gap_m: float = 0.2
    dt_s: float = 0.2
    pad_size: int = 20
    background_speed_mps: float = 5.0
    mean_reaction_s: float = 2.3
    sigma_pullover: float = 0.8
    sigma_brake: float = 0.5
    collision_reward: float = -2000.0
    emv_max_speed_mps: float = 10.0
    min_decel_mps2: float = 0.1

    def __post_init__(self) -> None:
        if not self.segment_length_m > 0:
            raise ValueError("segment_length_m must be > 0")
        if not self.dt_s > 0:
            raise ValueError("dt_s must be > 0")
        if self.pad_size < 1:
            raise ValueError("pad_size must be >= 1")
        if self.min_gap_m < 0:
            raise ValueError("min_gap_m must be >= 0")
        if self.sigma_pullover < 0 or self.sigma_brake < 0:
            raise ValueError("deceleration noise must be >= 0")
        p = self.dt_s / self.mean_reaction_s if self.mean_reaction_s > 0 else math.inf
        if not 0 < p <= 1:
            raise InvalidProbabilityError(
                f"dt_s / mean_reaction_s = {p} is not a valid success probability"
            )

    @property
    def reaction_probability(self) -> float:
        return self.dt_s / self.mean_reaction_s

    @property
    def step_cap(self) -> int:
        """Episode horizon ``ceil(L / (v_b * dt))``."""
        if self.background_speed_mps <= 0:
            raise ValueError("step cap needs a positive background speed")
        ratio = self.segment_length_m / (self.background_speed_mps * self.dt_s)
        # absorb float noise such as 150 / (3 * 0.2) = 249.99999999999997
        return max(1, math.ceil(round(ratio, 9)))


@dataclass(frozen=True)
class VehicleState:
    front_pos_m: float = 0.0
    lane: int = 0
    speed_mps: float = 0.0
    yielding: int = 0
    comfort_decel_mps2: float = 0.0
    length_m: float = 0.0
    trivial: bool = False
    reaction_steps_left: int = 0
    yield_issued_step: int | None = None

    def features(self) -> tuple[float, ...]:
        return (
            self.front_pos_m,
            float(self.lane),
            self.speed_mps,
            float(self.yielding),
            self.comfort_decel_mps2,
            self.length_m,
        )


@dataclass
class PaddedState:
    """Fixed-size column store of ``pad_size`` vehicle rows.

    ``yield_step`` holds -1 for vehicles that were never instructed.
    ``t`` is the index of the next step to be taken.
    """

    x: np.ndarray
    lane: np.ndarray
    v: np.ndarray
    z: np.ndarray
    b_star: np.ndarray
    length: np.ndarray
    reaction_left: np.ndarray
    yield_step: np.ndarray
    n_real: int
    t: int = 0

    @property
    def pad_size(self) -> int:
        return int(self.x.shape[0])

    @property
    def trivial(self) -> np.ndarray:
        return np.arange(self.pad_size) >= self.n_real

    def copy(self) -> "PaddedState":
        return PaddedState(
            x=self.x.copy(),
            lane=self.lane.copy(),
            v=self.v.copy(),
            z=self.z.copy(),
            b_star=self.b_star.copy(),
            length=self.length.copy(),
            reaction_left=self.reaction_left.copy(),
            yield_step=self.yield_step.copy(),
            n_real=self.n_real,
            t=self.t,
        )

    def features(self) -> np.ndarray:
        """The K x 6 network feature matrix ``(x, y, v, z, b*, l)``."""
        return np.stack(
            [self.x, self.lane.astype(float), self.v, self.z.astype(float), self.b_star, self.length],
            axis=1,
        )

    def vehicle(self, i: int) -> VehicleState:
        ys = int(self.yield_step[i])
        return VehicleState(
            front_pos_m=float(self.x[i]),
            lane=int(self.lane[i]),
            speed_mps=float(self.v[i]),
            yielding=int(self.z[i]),
            comfort_decel_mps2=float(self.b_star[i]),
            length_m=float(self.length[i]),
            trivial=bool(i >= self.n_real),
            reaction_steps_left=int(self.reaction_left[i]),
            yield_issued_step=None if ys < 0 else ys,
        )

    def rows(self) -> list[VehicleState]:
        return [self.vehicle(i) for i in range(self.pad_size)]

    def real_rows(self) -> list[VehicleState]:
        return [self.vehicle(i) for i in range(self.n_real)]

    def equals(self, other: "PaddedState") -> bool:
        """Exact, bit-for-bit equality of every field."""
        if self.n_real != other.n_real or self.t != other.t:
            return False
        names = ("x", "lane", "v", "z", "b_star", "length", "reaction_left", "yield_step")
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in names)


@dataclass
class StepOutcome:
    next_state: PaddedState
    reward: float
    done: bool
    collided: bool
    dqjl_established: bool


def pad_state(real_rows: Sequence[VehicleState], pad_size: int, t: int = 0) -> PaddedState:
    n = len(real_rows)
    if n > pad_size:
        raise TooManyVehiclesError(f"{n} vehicles do not fit in a state of size {pad_size}")
    x = np.zeros(pad_size)
    lane = np.zeros(pad_size, dtype=np.int64)
    v = np.zeros(pad_size)
    z = np.zeros(pad_size, dtype=np.int64)
    b_star = np.zeros(pad_size)
    length = np.zeros(pad_size)
    reaction_left = np.zeros(pad_size, dtype=np.int64)
    yield_step = np.full(pad_size, -1, dtype=np.int64)
    for i, row in enumerate(real_rows):
        x[i] = row.front_pos_m
        lane[i] = row.lane
        v[i] = row.speed_mps
        z[i] = row.yielding
        b_star[i] = row.comfort_decel_mps2
        length[i] = row.length_m
        reaction_left[i] = row.reaction_steps_left
        yield_step[i] = -1 if row.yield_issued_step is None else row.yield_issued_step
    return PaddedState(x, lane, v, z, b_star, length, reaction_left, yield_step, n_real=n, t=t)


def repad(state: PaddedState, pad_size: int) -> PaddedState:
    """Same real vehicles in a state with a different number of padding rows."""
    return pad_state(state.real_rows(), pad_size, t=state.t)


def departed(state: PaddedState, segment_length_m: float) -> np.ndarray:
    """Real vehicles whose rear has left the segment; they are frozen."""
    return (state.x - state.length > segment_length_m) & ~state.trivial


def upper_lane_count(state: PaddedState, segment_length_m: float) -> int:
    """Real vehicles on lane 0 with ``x - l <= L``."""
    real = ~state.trivial
    inside = state.x - state.length <= segment_length_m
    return int(np.count_nonzero(real & inside & (state.lane == 0)))


def valid_action_mask(state: PaddedState, segment_length_m: float) -> np.ndarray:
    """Boolean mask over actions ``-1..K-1``; entry ``m + 1`` is action ``m``."""
    mask = np.zeros(state.pad_size + 1, dtype=bool)
    mask[0] = True
    mask[1:] = (~state.trivial) & (state.z == 0) & (state.x - state.length < segment_length_m)
    return mask


def sample_reaction_steps(rng: np.random.Generator, dt_s: float, mean_reaction_s: float) -> int:
    """Geometric number of steps (support >= 1) before braking begins."""
    p = dt_s / mean_reaction_s if mean_reaction_s > 0 else math.inf
    if not 0 < p <= 1:
        raise InvalidProbabilityError(f"reaction success probability {p} outside (0, 1]")
    return int(rng.geometric(p))


def sample_deceleration(
    rng: np.random.Generator, vehicle: VehicleState, config: RoadConfig
) -> float:
    sigma = config.sigma_pullover if vehicle.lane == 0 else config.sigma_brake
    b = float(rng.normal(vehicle.comfort_decel_mps2, sigma))
    return max(config.min_decel_mps2, b)


def check_collision(state: PaddedState, min_gap_m: float, active: np.ndarray | None = None) -> bool:
    """True if any same-lane follower's front plus ``d`` passes its leader's rear.

    ``active`` restricts the check to a subset of rows (defaults to every
    real row).
    """
    if active is None:
        active = ~state.trivial
    for lane in (0, 1):
        idx = np.flatnonzero(active & (state.lane == lane))
        if idx.size < 2:
            continue
        order = idx[np.argsort(state.x[idx], kind="stable")]
        xs = state.x[order]
        rears = xs - state.length[order]
        if np.any(xs[:-1] + min_gap_m > rears[1:]):
            return True
    return False


def compute_reward(state_after: PaddedState, collided: bool, config: RoadConfig) -> float:
    if collided:
        return float(config.collision_reward)
    return -float(upper_lane_count(state_after, config.segment_length_m))


def _slot_free(state: PaddedState, i: int, active: np.ndarray, d: float) -> bool:
    lo = state.x[i] - state.length[i] - d
    hi = state.x[i] + d
    others = active & (state.lane == 1)
    others[i] = False
    hit = others & (state.x >= lo) & (state.x - state.length <= hi)
    return not bool(hit.any())


def advance(
    state: PaddedState,
    instructed: Iterable[int],
    config: RoadConfig,
    rng: np.random.Generator,
) -> StepOutcome:
    """One transition with any number of fresh yield instructions.

    The caller is responsible for action validity; :func:`step` enforces
    the one-instruction-per-step action space.
    """
    s = state.copy()
    L = config.segment_length_m
    dt = config.dt_s
    frozen = departed(s, L)

    for i in instructed:
        s.z[i] = 1
        s.reaction_left[i] = sample_reaction_steps(rng, dt, config.mean_reaction_s)
        s.yield_step[i] = s.t

    for i in range(s.n_real):
        if frozen[i]:
            continue
        v = s.v[i]
        if s.z[i] == 1 and s.reaction_left[i] > 0:
            s.x[i] += v * dt
            s.reaction_left[i] -= 1
        elif s.z[i] == 1 and v > 0:
            b = sample_deceleration(rng, s.vehicle(i), config)
            s.x[i] += v * dt
            s.v[i] = max(0.0, v - b * dt)
        else:
            s.x[i] += v * dt

    active = ~s.trivial & ~departed(s, L)
    for i in range(s.n_real):
        if active[i] and s.lane[i] == 0 and s.z[i] == 1 and s.v[i] == 0.0:
            if _slot_free(s, i, active, config.min_gap_m):
                s.lane[i] = 1

    s.t += 1
    collided = check_collision(s, config.min_gap_m, active)
    reward = compute_reward(s, collided, config)
    established = (not collided) and upper_lane_count(s, L) == 0
    return StepOutcome(
        next_state=s,
        reward=reward,
        done=collided or established,
        collided=collided,
        dqjl_established=established,
    )


def step(
    state: PaddedState, action: int, config: RoadConfig, rng: np.random.Generator
) -> StepOutcome:
    """Apply action ``m`` (``-1`` for no instruction) and advance one step."""
    action = int(action)
    if action < -1 or action >= state.pad_size:
        raise InvalidActionError(f"action {action} outside -1..{state.pad_size - 1}")
    if action >= 0 and not valid_action_mask(state, config.segment_length_m)[action + 1]:
        raise InvalidActionError(f"vehicle {action} cannot be instructed to yield")
    return advance(state, () if action < 0 else (action,), config, rng)


def is_established(state: PaddedState, config: RoadConfig) -> bool:
    return upper_lane_count(state, config.segment_length_m) == 0

