"""Greedy rollouts, yielding time indicators, EMV passing time, and sweeps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
import io
import math
from typing import Callable, Mapping, Sequence

import numpy as np

from dqjl import net
from dqjl.agent import greedy_action
from dqjl.env import (
    PaddedState,
    RoadConfig,
    advance,
    departed,
    is_established,
    step,
    valid_action_mask,
)
from dqjl.errors import DQJLError, ShapeMismatchError
from dqjl.scenario import ScenarioSpec, generate_scenario

DEFAULT_TRIGGER_M = 30.0
DEFAULT_EMV_LENGTH_M = 6.0

SWEEP_COLUMNS = (
    "spacing_m_per_veh", "v_b_mps", "policy", "run", "seed",
    "passing_time_s", "established", "collided", "status",
)
AGGREGATE_COLUMNS = (
    "spacing_m_per_veh", "v_b_mps", "policy", "runs",
    "mean_passing_time_s", "established_rate", "collision_rate",
)
COMPARISON_COLUMNS = (
    "spacing_m_per_veh", "v_b_mps", "rl_mean_s", "benchmark_mean_s", "improvement_pct",
)

NoiseSeed = int | Sequence[int]


@dataclass
class Rollout:
    actions: list[int]
    steps: int
    established: bool
    collided: bool
    total_reward: float
    final_state: PaddedState


@dataclass
class YieldingTimeIndicator:
    """Per-vehicle yield step ``T_i`` (``-1`` when never instructed)."""

    steps: list[int]
    established: bool
    establishment_step: int
    collided: bool = False
    actions: list[int] = field(default_factory=list)

    def seconds(self, dt_s: float) -> list[float | None]:
        return [None if s < 0 else s * dt_s for s in self.steps]


@dataclass
class PassingTimeResult:
    policy: str
    passing_time_s: float
    established: bool
    collided: bool
    seed: int | None = None
    scenario: str = ""


def _check_pad(params: net.QNetworkParams, state: PaddedState) -> None:
    if params.pad_size != state.pad_size:
        raise ShapeMismatchError(
            f"checkpoint pad size K={params.pad_size} does not match scenario pad size K={state.pad_size}"
        )


def greedy_rollout(
    params: net.QNetworkParams,
    initial_state: PaddedState,
    config: RoadConfig,
    noise_seed: NoiseSeed,
    max_steps: int | None = None,
) -> Rollout:
    """Run the masked greedy policy until the lane is clear, a crash, or the cap."""
    _check_pad(params, initial_state)
    rng = np.random.default_rng(noise_seed)
    cap = config.step_cap if max_steps is None else max_steps
    state = initial_state
    actions: list[int] = []
    total = 0.0
    established = is_established(state, config)
    collided = False
    while not established and not collided and len(actions) < cap:
        a = greedy_action(params, state, config)
        out = step(state, a, config, rng)
        actions.append(a)
        total += out.reward
        established = out.dqjl_established
        collided = out.collided
        state = out.next_state
    return Rollout(actions, len(actions), established, collided, total, state)


def indicator_from_actions(actions: Sequence[int], n_real: int) -> list[int]:
    """First instruction step per real vehicle; ``-1`` and padding actions are dropped."""
    steps = [-1] * n_real
    for t, a in enumerate(actions):
        if 0 <= a < n_real and steps[a] < 0:
            steps[a] = t
    return steps


def generate_indicator(
    params: net.QNetworkParams,
    initial_state: PaddedState,
    config: RoadConfig,
    noise_seed: NoiseSeed = 0,
    max_steps: int | None = None,
) -> YieldingTimeIndicator:
    ro = greedy_rollout(params, initial_state, config, noise_seed, max_steps)
    return YieldingTimeIndicator(
        steps=indicator_from_actions(ro.actions, initial_state.n_real),
        established=ro.established,
        establishment_step=ro.steps,
        collided=ro.collided,
        actions=ro.actions,
    )


def schedule_action(indicator_steps: Sequence[int], t: int) -> int:
    hits = [i for i, s in enumerate(indicator_steps) if s == t]
    if len(hits) > 1:
        raise ValueError(f"indicator schedules {len(hits)} vehicles at step {t}")
    return hits[0] if hits else -1


def replay_indicator(
    indicator_steps: Sequence[int],
    initial_state: PaddedState,
    config: RoadConfig,
    noise_seed: NoiseSeed,
    max_steps: int | None = None,
) -> Rollout:
    """Execute a yield schedule open-loop, with no network in the loop."""
    rng = np.random.default_rng(noise_seed)
    cap = config.step_cap if max_steps is None else max_steps
    state = initial_state
    actions: list[int] = []
    total = 0.0
    established = is_established(state, config)
    collided = False
    while not established and not collided and len(actions) < cap:
        a = schedule_action(indicator_steps, len(actions))
        out = step(state, a, config, rng)
        actions.append(a)
        total += out.reward
        established = out.dqjl_established
        collided = out.collided
        state = out.next_state
    return Rollout(actions, len(actions), established, collided, total, state)


# -- EMV passing ---------------------------------------------------------------


def benchmark_policy(state: PaddedState, emv_pos: float, trigger_m: float, segment_length_m: float) -> list[int]:
    """Siren-style yielding: every vehicle within ``trigger_m`` ahead of the EMV front."""
    if not trigger_m > 0:
        raise ValueError("trigger_m must be > 0")
    mask = valid_action_mask(state, segment_length_m)[1:]
    gap = state.x - emv_pos
    return np.flatnonzero(mask & (gap >= 0) & (gap <= trigger_m)).tolist()


Policy = Callable[[PaddedState, float, int], Sequence[int]]


def make_benchmark(trigger_m: float, segment_length_m: float) -> Policy:
    def policy(state: PaddedState, emv_pos: float, t: int) -> list[int]:
        return benchmark_policy(state, emv_pos, trigger_m, segment_length_m)

    return policy


def make_schedule(indicator_steps: Sequence[int], segment_length_m: float) -> Policy:
    def policy(state: PaddedState, emv_pos: float, t: int) -> list[int]:
        a = schedule_action(indicator_steps, t)
        if a >= 0 and valid_action_mask(state, segment_length_m)[a + 1]:
            return [a]
        return []

    return policy


def emv_advance(
    state: PaddedState, emv_pos: float, config: RoadConfig, headway_m: float
) -> float:
    """New EMV front position after one step.

    Against every lane-0 vehicle ahead (rear ``r``, speed ``u``) the EMV may
    reach at most ``max(pos + u*dt, r - headway)``: full speed while the
    vehicle is beyond the headway, the vehicle's own speed once it is
    inside it. It also never passes ``r - d`` and never moves backwards.
    Each bound is nondecreasing in ``pos`` and in the maximum speed.
    """
    dt = config.dt_s
    active = ~state.trivial & ~departed(state, config.segment_length_m) & (state.lane == 0)
    ahead = active & (state.x >= emv_pos)
    new_pos = emv_pos + config.emv_max_speed_mps * dt
    if ahead.any():
        rears = state.x[ahead] - state.length[ahead]
        follow = np.maximum(emv_pos + state.v[ahead] * dt, rears - headway_m)
        new_pos = min(new_pos, float(follow.min()), float(rears.min()) - config.min_gap_m)
    return max(emv_pos, new_pos)


def simulate_emv_passing(
    initial_state: PaddedState,
    policy: Policy,
    config: RoadConfig,
    noise_seed: NoiseSeed,
    *,
    policy_tag: str = "",
    horizon_steps: int | None = None,
    emv_length_m: float = DEFAULT_EMV_LENGTH_M,
    seed: int | None = None,
    scenario: str = "",
    trace: list | None = None,
) -> PassingTimeResult:
    """Time for the EMV front, entering at ``x = 0``, to reach ``x = L``.

    Runs that hit the horizon or end in a non-EMV collision are reported as
    not established with ``passing_time_s`` equal to the horizon. If
    ``trace`` is given, ``(emv_pos, state)`` is appended before every step.
    """
    L = config.segment_length_m
    dt = config.dt_s
    horizon = 2 * config.step_cap if horizon_steps is None else horizon_steps
    headway = 2 * config.min_gap_m + emv_length_m
    rng = np.random.default_rng(noise_seed)
    state = initial_state
    pos = 0.0

    def result(t: float, established: bool, collided: bool) -> PassingTimeResult:
        return PassingTimeResult(policy_tag, t, established, collided, seed, scenario)

    if L <= 0:
        return result(0.0, True, False)
    for k in range(horizon):
        if trace is not None:
            trace.append((pos, state))
        out = advance(state, policy(state, pos, k), config, rng)
        if out.collided:
            return result(horizon * dt, False, True)
        state = out.next_state
        new_pos = emv_advance(state, pos, config, headway)
        if new_pos >= L:
            return result(k * dt + dt * (L - pos) / (new_pos - pos), True, False)
        pos = new_pos
    return result(horizon * dt, False, False)


def rl_passing(
    params: net.QNetworkParams,
    initial_state: PaddedState,
    config: RoadConfig,
    noise_seed: NoiseSeed,
    **kwargs,
) -> PassingTimeResult:
    """EMV passing time when non-EMVs follow the trained policy's indicator."""
    ind = generate_indicator(params, initial_state, config, noise_seed)
    return simulate_emv_passing(
        initial_state, make_schedule(ind.steps, config.segment_length_m), config, noise_seed,
        policy_tag="rl", **kwargs,
    )


def benchmark_passing(
    initial_state: PaddedState,
    config: RoadConfig,
    noise_seed: NoiseSeed,
    trigger_m: float = DEFAULT_TRIGGER_M,
    **kwargs,
) -> PassingTimeResult:
    return simulate_emv_passing(
        initial_state, make_benchmark(trigger_m, config.segment_length_m), config, noise_seed,
        policy_tag="benchmark", **kwargs,
    )


# -- sweeps --------------------------------------------------------------------


@dataclass
class SweepRow:
    spacing_m_per_veh: float
    v_b_mps: float
    policy: str
    run: int
    seed: int
    passing_time_s: float
    established: bool
    collided: bool
    status: str = "ok"


@dataclass
class SweepResult:
    rows: list[SweepRow]

    def cells(self) -> list[tuple[float, float, str]]:
        seen: dict[tuple[float, float, str], None] = {}
        for r in self.rows:
            seen.setdefault((r.spacing_m_per_veh, r.v_b_mps, r.policy), None)
        return list(seen)

    def aggregate(self) -> list[dict]:
        out = []
        for spacing, speed, policy in self.cells():
            rows = [
                r for r in self.rows
                if (r.spacing_m_per_veh, r.v_b_mps, r.policy) == (spacing, speed, policy) and r.status == "ok"
            ]
            n = len(rows)
            out.append(
                {
                    "spacing_m_per_veh": spacing,
                    "v_b_mps": speed,
                    "policy": policy,
                    "runs": n,
                    "mean_passing_time_s": sum(r.passing_time_s for r in rows) / n if n else math.nan,
                    "established_rate": sum(r.established for r in rows) / n if n else math.nan,
                    "collision_rate": sum(r.collided for r in rows) / n if n else math.nan,
                }
            )
        return out

    def mean(self, spacing: float, speed: float, policy: str) -> float:
        for a in self.aggregate():
            if (a["spacing_m_per_veh"], a["v_b_mps"], a["policy"]) == (spacing, speed, policy):
                return a["mean_passing_time_s"]
        raise KeyError((spacing, speed, policy))

    def comparison(self) -> list[dict]:
        agg = {(a["spacing_m_per_veh"], a["v_b_mps"], a["policy"]): a for a in self.aggregate()}
        out = []
        for spacing, speed, policy in self.cells():
            if policy != "rl" or (spacing, speed, "benchmark") not in agg:
                continue
            rl = agg[(spacing, speed, "rl")]["mean_passing_time_s"]
            bench = agg[(spacing, speed, "benchmark")]["mean_passing_time_s"]
            gain = 100.0 * (bench - rl) / bench if bench and not math.isnan(bench) else math.nan
            out.append(
                {
                    "spacing_m_per_veh": spacing,
                    "v_b_mps": speed,
                    "rl_mean_s": rl,
                    "benchmark_mean_s": bench,
                    "improvement_pct": gain,
                }
            )
        return out

    def best_improvement(self) -> dict | None:
        rows = [c for c in self.comparison() if not math.isnan(c["improvement_pct"])]
        return max(rows, key=lambda c: c["improvement_pct"]) if rows else None

    def detail_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in self.rows:
            w.writerow(
                [
                    repr(r.spacing_m_per_veh), repr(r.v_b_mps), r.policy, r.run, r.seed,
                    repr(r.passing_time_s), int(r.established), int(r.collided), r.status,
                ]
            )
        return buf.getvalue()

    def aggregate_csv(self) -> str:
        return _dict_csv(AGGREGATE_COLUMNS, self.aggregate())

    def comparison_csv(self) -> str:
        return _dict_csv(COMPARISON_COLUMNS, self.comparison())


def _dict_csv(columns: Sequence[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


def run_seed(master_seed: int, cell: int, run: int) -> int:
    """Scenario seed shared by every policy evaluated on ``(cell, run)``."""
    return int(np.random.SeedSequence([master_seed, cell, run]).generate_state(1)[0])


def _evaluate_cell(task: tuple) -> list[SweepRow]:
    (ci, spacing, speed, runs, policies, base, seed, trigger, emv_length, spec_kwargs) = task
    road = replace(base, background_speed_mps=speed)
    spec = ScenarioSpec(spacing_m_per_veh=spacing, **spec_kwargs)
    rows = []
    for r in range(runs):
        rs = run_seed(seed, ci, r)
        try:
            state = generate_scenario(spec, road, np.random.default_rng(rs))
        except DQJLError:
            rows.extend(
                SweepRow(spacing, speed, tag, r, rs, math.nan, False, False, "infeasible") for tag in policies
            )
            continue
        noise = (rs, 1)
        for tag, params in policies.items():
            if tag == "rl":
                res = rl_passing(params, state, road, noise, seed=rs, emv_length_m=emv_length)
            else:
                res = benchmark_passing(
                    state, road, noise, trigger_m=trigger, seed=rs, emv_length_m=emv_length
                )
            rows.append(
                SweepRow(spacing, speed, tag, r, rs, res.passing_time_s, res.established, res.collided)
            )
    return rows


def run_sweep(
    densities: Sequence[float],
    speeds: Sequence[float],
    runs_per_cell: int = 5,
    policies: Mapping[str, net.QNetworkParams | None] | None = None,
    seed: int = 0,
    config: RoadConfig | None = None,
    trigger_m: float = DEFAULT_TRIGGER_M,
    jobs: int = 1,
    scenario_kwargs: Mapping | None = None,
    emv_length_m: float = DEFAULT_EMV_LENGTH_M,
) -> SweepResult:
    """Paired-seed passing-time comparison over a spacing x speed grid.

    ``policies`` maps a tag (``"rl"`` or ``"benchmark"``) to the Q-network
    for ``"rl"`` (``None`` for the benchmark). Every policy sees the same
    scenario and noise seed in each ``(cell, run)``.
    """
    if not densities or not speeds:
        raise ValueError("sweep grids must be non-empty")
    if policies is None:
        policies = {"benchmark": None}
    for tag in policies:
        if tag not in ("rl", "benchmark"):
            raise ValueError(f"unknown policy tag {tag!r}")
    base = config or RoadConfig()
    if "rl" in policies and policies["rl"].pad_size != base.pad_size:
        base = replace(base, pad_size=policies["rl"].pad_size)
    tasks = []
    ci = 0
    for spacing in densities:
        for speed in speeds:
            tasks.append(
                (ci, float(spacing), float(speed), runs_per_cell, dict(policies), base, seed, trigger_m,
                 emv_length_m, dict(scenario_kwargs or {}))
            )
            ci += 1
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_evaluate_cell, tasks))
    else:
        chunks = [_evaluate_cell(t) for t in tasks]
    return SweepResult([row for chunk in chunks for row in chunk])
