import logging

import numpy as np
import pandas as pd
import pytest

from retention.core import (
    ActionVector,
    ConfigError,
    ImmediateFeedback,
    LogFormatError,
    SessionError,
    UserGroup,
    read_session_log,
)
from retention.simenv import (
    METRICS_COLUMNS,
    EnvStep,
    SimConfig,
    UserSimulator,
    calibrate_from_logs,
    export_session_log,
    reset,
    run_episode,
    state_layout,
    write_metrics_csv,
)

SMALL = SimConfig(population=40, episode_days=4)


def constant(value):
    action = ActionVector.constant(np.full(8, value))
    return lambda states, groups: [action] * len(states)


def test_population_split_is_exact():
    sim, states = reset(SimConfig(population=100, high_active_fraction=0.5), seed=3)
    assert sum(u.group is UserGroup.HIGH_ACTIVE for u in sim.users) == 50
    assert len(states) == 100


def test_zero_fraction_is_all_low_active():
    sim, _ = reset(SimConfig(population=30, high_active_fraction=0.0), seed=0)
    assert all(u.group is UserGroup.LOW_ACTIVE for u in sim.users)


def test_same_seed_same_population():
    a, _ = reset(SMALL, seed=11)
    b, _ = reset(SMALL, seed=11)
    for ua, ub in zip(a.users, b.users):
        assert ua.group == ub.group
        np.testing.assert_array_equal(ua.interest, ub.interest)
        np.testing.assert_array_equal(ua.pending_state.features(), ub.pending_state.features())


def test_state_matches_layout():
    sim, states = reset(SMALL, seed=0)
    layout = state_layout(SMALL)
    assert states[0].features().size == layout.total
    assert states[0].profile[0] == (1.0 if sim.users[0].group is UserGroup.HIGH_ACTIVE else 0.0)


def test_invalid_config_is_rejected():
    with pytest.raises(ConfigError):
        SimConfig(candidates_per_request=3, slate_size=6).validate()
    with pytest.raises(ConfigError):
        SimConfig().with_overrides(no_such_field=1)


def test_leave_probability_ignores_actions_without_slopes():
    config = SimConfig(population=5, leave_depth_slope=0.0, leave_satisfaction_slope=0.0)
    sim = UserSimulator(config, seed=0)
    user = sim.users[0]
    sim.open_session(user)
    expected = 1.0 / (1.0 + np.exp(1.6))
    for value in (0.0, 4.0):
        assert sim.leave_probability(user) == pytest.approx(expected)
        step = sim.step(user, ActionVector.constant(np.full(8, value)))
        if step.session_ended:
            sim.open_session(user)


def test_return_days_follow_the_base_softmax():
    config = SimConfig(population=1, satisfaction_weight_high=0.0, satisfaction_weight_low=0.0, habit_weight=0.0)
    sim = UserSimulator(config, seed=5)
    user = sim.users[0]
    user.satisfaction = 3.0
    p = sim.return_distribution(user)
    logits = user.base_return_logits
    softmax = np.exp(logits - logits.max()) / np.exp(logits - logits.max()).sum()
    np.testing.assert_allclose(p, softmax)

    draws = np.array([sim.sample_return_day(user) for _ in range(50_000)])
    assert draws.mean() == pytest.approx(sim.expected_return_day(user), rel=0.02)


def test_satisfaction_shortens_the_return():
    sim = UserSimulator(SimConfig(population=1), seed=2)
    user = sim.users[0]
    assert sim.expected_return_day(user, satisfaction=3.0) < sim.expected_return_day(user, satisfaction=0.0)

    rng = np.random.default_rng(0)
    days = np.arange(1, sim.config.return_days + 1)
    low = rng.choice(days, size=20_000, p=sim.return_distribution(user, 0.0))
    high = rng.choice(days, size=20_000, p=sim.return_distribution(user, 3.0))
    assert high.mean() < low.mean()


def test_step_after_session_end_fails():
    config = SimConfig(population=2, leave_base=50.0)
    sim = UserSimulator(config, seed=0)
    user = sim.users[0]
    sim.open_session(user)
    step = sim.step(user, ActionVector.constant(np.ones(8)))
    assert step.session_ended and step.returning_time >= 1
    with pytest.raises(SessionError):
        sim.step(user, ActionVector.constant(np.ones(8)))


def test_env_step_requires_returning_time_at_session_end():
    sim, states = reset(SMALL, seed=0)
    with pytest.raises(SessionError):
        EnvStep(ImmediateFeedback(1.0, 0), states[0], session_ended=True)


def test_degenerate_dynamics_return_every_day():
    config = SimConfig(
        population=10,
        episode_days=3,
        leave_base=50.0,
        user_logit_noise=0.0,
        return_logits_high=(50.0,) + (-50.0,) * 9,
        return_logits_low=(50.0,) + (-50.0,) * 9,
    )
    metrics = run_episode(constant(1.0), config, seed=0).metrics
    assert metrics.avg_return_day == 1.0
    assert metrics.day1_retention == 1.0
    assert metrics.sessions == 30
    assert metrics.mean_session_length == 1.0


def test_episode_is_deterministic():
    first = run_episode(constant(2.0), SMALL, seed=9).metrics
    second = run_episode(constant(2.0), SMALL, seed=9).metrics
    assert first == second


def test_interest_aware_ranking_beats_the_zero_action():
    config = SimConfig(population=60, episode_days=3)
    rng = np.random.default_rng(1)

    def random_policy(states, groups):
        return [ActionVector.constant(rng.uniform(0.0, 4.0, size=8)) for _ in states]

    random_sat = np.mean([run_episode(random_policy, config, seed=s).metrics.mean_satisfaction for s in range(5)])
    zero_sat = np.mean([run_episode(constant(0.0), config, seed=s).metrics.mean_satisfaction for s in range(5)])
    assert random_sat >= zero_sat


def test_out_of_range_actions_are_clipped_and_counted(caplog):
    with caplog.at_level(logging.WARNING, logger="retention.simenv"):
        result = run_episode(constant(9.0), SimConfig(population=5, episode_days=2), seed=0)
    assert result.clipped_actions > 0
    assert "clipped" in caplog.text


def test_metrics_csv_column_order(tmp_path):
    metrics = run_episode(constant(1.0), SMALL, seed=0).metrics
    path = write_metrics_csv([metrics], tmp_path / "metrics.csv")
    assert tuple(pd.read_csv(path).columns) == METRICS_COLUMNS
    assert METRICS_COLUMNS[:4] == ("episode", "avg_return_day", "day1_retention", "mean_immediate_reward")


def test_exported_log_is_valid(tmp_path):
    result = run_episode(constant(1.0), SMALL, seed=0)
    path = export_session_log(result.sessions, tmp_path / "log.csv")
    frame = read_session_log(path)
    assert len(frame) == sum(s.length for s in result.sessions)


def test_calibration_recovers_a_point_mass(tmp_path):
    rows = []
    for user in range(10):
        for session in range(30):
            start = session * 3 * 86400.0
            for idx in range(1, 2 + session % 3):
                rows.append((user, session, idx, start + 60.0 * idx, 5.0, 0, 3.0))
    path = tmp_path / "log.csv"
    pd.DataFrame(rows, columns=[
        "user_id", "session_id", "request_idx", "timestamp_s", "watch_time_s", "interactions", "return_gap_days",
    ]).to_csv(path, index=False)

    result = calibrate_from_logs(path)
    for name in ("return_logits_high", "return_logits_low"):
        logits = np.array(result.overrides[name])
        p = np.exp(logits) / np.exp(logits).sum()
        assert p[2] > 0.95
    assert result.high_active_users == 5


def test_calibration_round_trip(tmp_path):
    config = SimConfig(
        population=2000, episode_days=10, leave_satisfaction_slope=0.0, max_session_length=200,
    )
    result = run_episode(constant(1.0), config, seed=4)
    path = export_session_log(result.sessions, tmp_path / "log.csv")
    fitted = calibrate_from_logs(path).overrides
    assert fitted["leave_base"] == pytest.approx(config.leave_base, rel=0.1)
    assert fitted["leave_depth_slope"] == pytest.approx(config.leave_depth_slope, rel=0.1)
    SimConfig().with_overrides(**fitted).validate()


def test_calibration_rejects_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(LogFormatError):
        calibrate_from_logs(path)


def test_stronger_satisfaction_weight_never_delays_the_return():
    base = SimConfig(population=50)
    weights = (0.0, 0.1, 0.3, 0.6)
    sims = [
        UserSimulator(base.with_overrides(satisfaction_weight_high=w, satisfaction_weight_low=w), seed=8)
        for w in weights
    ]
    for users in zip(*(sim.users for sim in sims)):
        for satisfaction in (0.5, 1.0, 2.0, 3.0):
            days = [sim.expected_return_day(user, satisfaction) for sim, user in zip(sims, users)]
            assert all(later <= earlier + 1e-12 for earlier, later in zip(days, days[1:]))


def test_calibrated_leave_curve_ignores_satisfaction(tmp_path):
    result = run_episode(constant(1.0), SMALL, seed=1)
    path = export_session_log(result.sessions, tmp_path / "log.csv")
    fitted = calibrate_from_logs(path).overrides
    assert fitted["leave_satisfaction_slope"] == 0.0

    sim = UserSimulator(SimConfig(population=3).with_overrides(**fitted), seed=0)
    user = sim.users[0]
    sim.open_session(user)
    expected = 1.0 / (1.0 + np.exp(-(fitted["leave_base"] + fitted["leave_depth_slope"])))
    for satisfaction in (0.0, 2.5):
        user.satisfaction = satisfaction
        assert sim.leave_probability(user) == pytest.approx(expected)
