import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from builders import random_state, veh
from dqjl.env import (
    PaddedState,
    RoadConfig,
    advance,
    check_collision,
    compute_reward,
    pad_state,
    repad,
    sample_deceleration,
    sample_reaction_steps,
    step,
    valid_action_mask,
)
from dqjl.errors import InvalidActionError, InvalidProbabilityError, TooManyVehiclesError

CFG = RoadConfig()


# -- configuration -----------------------------------------------------------


def test_reaction_probability_default():
    assert CFG.reaction_probability == pytest.approx(0.086957, abs=1e-6)


@pytest.mark.parametrize(
    "L, vb, cap",
    [(150.0, 5.0, 150), (150.0, 3.0, 250), (60.0, 5.0, 60), (150.0, 8.0, 94)],
)
def test_step_cap(L, vb, cap):
    assert RoadConfig(segment_length_m=L, background_speed_mps=vb).step_cap == cap


@pytest.mark.parametrize(
    "kwargs",
    [{"segment_length_m": 0.0}, {"dt_s": 0.0}, {"pad_size": 0}, {"min_gap_m": -0.1}],
)
def test_road_config_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        RoadConfig(**kwargs)


def test_road_config_rejects_bad_probability():
    with pytest.raises(InvalidProbabilityError):
        RoadConfig(dt_s=3.0, mean_reaction_s=2.3)


# -- padding -----------------------------------------------------------------


def test_pad_three_into_five():
    rows = [veh(10), veh(30, lane=1), veh(50)]
    s = pad_state(rows, 5)
    assert s.n_real == 3
    assert s.trivial.tolist() == [False, False, False, True, True]
    assert s.real_rows() == rows
    assert np.all(s.features()[3:] == 0.0)


def test_pad_full_has_no_trivial_rows():
    rows = [veh(10 * (i + 1)) for i in range(4)]
    s = pad_state(rows, 4)
    assert not s.trivial.any()
    assert s.real_rows() == rows


def test_pad_overflow():
    with pytest.raises(TooManyVehiclesError):
        pad_state([veh(10 * (i + 1)) for i in range(5)], 4)


def test_features_shape_and_columns():
    s = pad_state([veh(12.0, lane=1, v=4.0, z=1, b=3.0, length=5.0)], 3)
    f = s.features()
    assert f.shape == (3, 6)
    assert f[0].tolist() == [12.0, 1.0, 4.0, 1.0, 3.0, 5.0]


# -- action mask ---------------------------------------------------------------


def test_mask_excludes_yielding_vehicle():
    s = pad_state([veh(10, z=1), veh(30)], 4)
    m = valid_action_mask(s, 150.0)
    assert m[0] and not m[1] and m[2]


def test_mask_all_trivial():
    m = valid_action_mask(pad_state([], 5), 150.0)
    assert m.tolist() == [True, False, False, False, False, False]


def test_mask_vehicle_inside_segment():
    s = pad_state([veh(10), veh(30), veh(50)], 4)
    assert valid_action_mask(s, 150.0)[3]


def test_mask_excludes_departed_vehicle():
    s = pad_state([veh(155.0, length=4.5), veh(154.0, length=4.5)], 2)
    # rear at 150.5 is outside; rear at 149.5 is still inside
    assert valid_action_mask(s, 150.0).tolist() == [True, False, True]


def test_step_rejects_masked_and_out_of_range_actions():
    s = pad_state([veh(10, z=1), veh(30)], 3)
    rng = np.random.default_rng(0)
    for bad in (0, 2, 3, -2):
        with pytest.raises(InvalidActionError):
            step(s, bad, CFG, rng)


# -- stochastic draws ----------------------------------------------------------


def test_reaction_golden_first_draw():
    assert sample_reaction_steps(np.random.default_rng(42), 0.2, 2.3) == 27


def test_reaction_rejects_invalid_probability():
    rng = np.random.default_rng(0)
    with pytest.raises(InvalidProbabilityError):
        sample_reaction_steps(rng, 0.5, 0.2)
    with pytest.raises(InvalidProbabilityError):
        sample_reaction_steps(rng, 0.2, 0.0)


def test_reaction_support_starts_at_one():
    rng = np.random.default_rng(3)
    draws = [sample_reaction_steps(rng, 0.2, 0.2) for _ in range(50)]
    assert draws == [1] * 50


def test_reaction_mean():
    rng = np.random.default_rng(11)
    draws = np.array([sample_reaction_steps(rng, 0.2, 2.3) for _ in range(100_000)])
    assert abs(draws.mean() - 11.5) / 11.5 < 0.02


def test_reaction_goodness_of_fit():
    rng = np.random.default_rng(12)
    p = 0.2 / 2.3
    draws = np.array([sample_reaction_steps(rng, 0.2, 2.3) for _ in range(100_000)])
    edges = np.arange(1, 60)
    observed = np.array([np.count_nonzero(draws == k) for k in edges] + [np.count_nonzero(draws >= 60)])
    probs = np.append(stats.geom.pmf(edges, p), stats.geom.sf(59, p))
    _, pval = stats.chisquare(observed, probs * draws.size)
    assert pval > 0.01


@pytest.mark.parametrize("lane, sigma", [(0, 0.8), (1, 0.5)])
def test_deceleration_moments(lane, sigma):
    rng = np.random.default_rng(5 + lane)
    v = veh(50, lane=lane, z=1, b=3.5)
    b = np.array([sample_deceleration(rng, v, CFG) for _ in range(100_000)])
    assert abs(b.mean() - 3.5) / 3.5 < 0.01
    assert abs(b.std() - sigma) / sigma < 0.03


def test_deceleration_without_noise_is_exact():
    cfg = RoadConfig(sigma_pullover=0.0)
    rng = np.random.default_rng(0)
    assert {sample_deceleration(rng, veh(50, b=2.75), cfg) for _ in range(100)} == {2.75}


def test_deceleration_clamped():
    cfg = RoadConfig(sigma_pullover=0.0)
    assert sample_deceleration(np.random.default_rng(0), veh(50, b=-1.0), cfg) == 0.1


# -- single transitions --------------------------------------------------------


def test_constant_speed_row():
    out = step(pad_state([veh(10, v=5)], 2), -1, CFG, np.random.default_rng(0))
    r = out.next_state.vehicle(0)
    assert (r.front_pos_m, r.speed_mps, r.yielding) == (11.0, 5.0, 0)


def test_reaction_window_row():
    s = pad_state([veh(10, v=5, z=1, react=3, issued=0)], 2)
    r = step(s, -1, CFG, np.random.default_rng(0)).next_state.vehicle(0)
    assert (r.front_pos_m, r.speed_mps, r.reaction_steps_left) == (11.0, 5.0, 2)


def test_pullover_lane_flip():
    s = pad_state([veh(40, v=0.0, z=1, issued=0), veh(80)], 3)
    out = step(s, -1, CFG, np.random.default_rng(0))
    assert out.next_state.lane[0] == 1
    assert out.next_state.x[0] == 40.0


def test_pullover_blocked_by_occupied_slot():
    s = pad_state([veh(40, v=0.0, z=1, issued=0), veh(42, lane=1, v=0.0, z=1, issued=0)], 3)
    out = step(s, -1, CFG, np.random.default_rng(0))
    assert out.next_state.lane[0] == 0
    assert out.next_state.v[0] == 0.0


def test_braking_stops_at_zero():
    s = pad_state([veh(40, v=0.3, z=1, b=3.5, issued=0)], 2)
    cfg = RoadConfig(sigma_pullover=0.0)
    out = step(s, -1, cfg, np.random.default_rng(0))
    r = out.next_state
    assert r.x[0] == 40.0 + 0.3 * 0.2
    assert r.v[0] == 0.0
    # speed hit zero during this step, so the flip happens at its end
    assert r.lane[0] == 1


def test_golden_three_vehicle_step():
    """Seed 2024 yields reaction draw 10, then a lane-0 decel of 4.81353603253692.

    Row 0 continues: 20 + 5*0.2 = 21. Row 1 is past its reaction window and
    brakes: x = 40 + 1, v = 5 - 0.2*4.81353603253692. Row 2 (lane 1) is
    instructed by the action: reaction 10 steps, one consumed this step.
    """
    s = pad_state(
        [
            veh(20.0, lane=0, v=5.0, b=3.0, length=4.5),
            veh(40.0, lane=0, v=5.0, z=1, b=3.5, length=5.0, issued=0),
            veh(60.0, lane=1, v=5.0, b=4.0, length=4.0),
        ],
        4,
        t=3,
    )
    out = step(s, 2, CFG, np.random.default_rng(2024))
    n = out.next_state
    assert n.x.tolist() == [21.0, 41.0, 61.0, 0.0]
    assert n.v.tolist() == [5.0, 4.037292793492616, 5.0, 0.0]
    assert n.z.tolist() == [0, 1, 1, 0]
    assert n.lane.tolist() == [0, 0, 1, 0]
    assert n.reaction_left.tolist() == [0, 0, 9, 0]
    assert n.yield_step.tolist() == [-1, 0, 3, -1]
    assert n.t == 4
    assert out.reward == -2.0
    assert (out.done, out.collided, out.dqjl_established) == (False, False, False)


def test_departed_vehicle_frozen():
    s = pad_state([veh(160.0, v=5.0, length=4.5), veh(60.0, lane=1)], 2)
    out = step(s, -1, CFG, np.random.default_rng(0))
    assert out.next_state.x[0] == 160.0
    assert out.dqjl_established and out.done and out.reward == 0.0


def test_input_state_not_mutated():
    s = pad_state([veh(10), veh(30)], 3)
    before = s.copy()
    step(s, 0, CFG, np.random.default_rng(0))
    assert s.equals(before)


# -- reward and collision --------------------------------------------------------


def test_reward_counts_upper_lane():
    s = pad_state([veh(10), veh(30), veh(50), veh(70, lane=1)], 5)
    assert compute_reward(s, False, CFG) == -3.0


def test_reward_zero_when_cleared():
    s = pad_state([veh(160.0, length=4.5), veh(70, lane=1)], 3)
    assert compute_reward(s, False, CFG) == 0.0


def test_reward_on_collision():
    s = pad_state([veh(10), veh(30)], 3)
    assert compute_reward(s, True, CFG) == -2000.0


def test_collision_example():
    s = pad_state([veh(50.0, length=4.5), veh(45.4)], 2)
    assert check_collision(s, 0.2)


def test_collision_safe_example():
    s = pad_state([veh(50.0, length=4.5), veh(45.2)], 2)
    assert not check_collision(s, 0.2)


def test_collision_needs_same_lane():
    s = pad_state([veh(50.0, length=4.5), veh(48.0, lane=1)], 2)
    assert not check_collision(s, 0.2)


def test_collision_ends_episode_with_penalty():
    s = pad_state([veh(50.0, v=0.0, length=4.5), veh(44.5, v=5.0)], 3)
    out = step(s, -1, CFG, np.random.default_rng(0))
    assert out.collided and out.done and out.reward == -2000.0
    assert not out.dqjl_established


def test_padding_rows_ignored_by_collision():
    s = pad_state([veh(5.0, length=4.5)], 3)
    # trivial rows sit at x=0 with zero length right behind vehicle 0
    assert not check_collision(s, 0.2)


# -- properties ------------------------------------------------------------------

seeds = st.integers(0, 2**32 - 1)
SMALL = RoadConfig(segment_length_m=60.0, pad_size=6)


def _random_action(rng, state):
    valid = np.flatnonzero(valid_action_mask(state, SMALL.segment_length_m)) - 1
    return int(rng.choice(valid))


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_step_deterministic(seed):
    rng = np.random.default_rng(seed)
    s = random_state(rng, SMALL)
    a = _random_action(rng, s)
    o1 = step(s, a, SMALL, np.random.default_rng(seed))
    o2 = step(s, a, SMALL, np.random.default_rng(seed))
    assert o1.next_state.equals(o2.next_state)
    assert (o1.reward, o1.done, o1.collided) == (o2.reward, o2.done, o2.collided)


@settings(max_examples=60, deadline=None)
@given(seeds, st.integers(0, 6))
def test_trivial_rows_inert(seed, extra):
    rng = np.random.default_rng(seed)
    s = random_state(rng, SMALL)
    a = _random_action(rng, s)
    wide = repad(s, s.pad_size + extra)
    o1 = step(s, a, SMALL, np.random.default_rng(seed))
    o2 = step(wide, a, SMALL, np.random.default_rng(seed))
    n = s.n_real
    assert o1.reward == o2.reward
    for name in ("x", "lane", "v", "z", "b_star", "length", "reaction_left", "yield_step"):
        assert np.array_equal(getattr(o1.next_state, name)[:n], getattr(o2.next_state, name)[:n])
        assert np.array_equal(getattr(o2.next_state, name)[n:], getattr(wide, name)[n:])


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_trajectory_invariants(seed):
    """Yield is absorbing, speeds stay nonnegative, lanes only flip 0 -> 1 at rest."""
    rng = np.random.default_rng(seed)
    s = random_state(rng, SMALL)
    for _ in range(SMALL.step_cap):
        a = _random_action(rng, s)
        out = step(s, a, SMALL, rng)
        n = out.next_state
        assert np.all(n.z >= s.z)
        assert np.all(n.v >= 0.0)
        assert not np.any((s.lane == 1) & (n.lane == 0))
        flipped = (s.lane == 0) & (n.lane == 1)
        assert np.all(n.z[flipped] == 1) and np.all(n.v[flipped] == 0.0)
        assert out.reward == -2000.0 or -n.pad_size <= out.reward <= 0.0
        if out.done:
            break
        s = n


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_all_continue_never_collides(seed):
    rng = np.random.default_rng(seed)
    s = random_state(rng, SMALL, n=int(rng.integers(0, 7)))
    s.z[:] = 0
    s.reaction_left[:] = 0
    s.yield_step[:] = -1
    s.v[: s.n_real] = 5.0
    for _ in range(SMALL.step_cap):
        out = step(s, -1, SMALL, rng)
        assert not out.collided
        if out.done:
            break
        s = out.next_state


def test_padded_state_roundtrip_rows():
    rng = np.random.default_rng(8)
    s = random_state(rng, SMALL, n=4)
    again = pad_state(s.real_rows(), s.pad_size, t=s.t)
    assert isinstance(again, PaddedState)
    assert again.equals(s)


def test_advance_instructs_several():
    s = pad_state([veh(10), veh(30), veh(50)], 3)
    out = advance(s, [0, 2], CFG, np.random.default_rng(0))
    assert out.next_state.z.tolist() == [1, 0, 1]
    assert out.next_state.yield_step.tolist() == [0, -1, 0]
