import numpy as np
import pandas as pd
import pytest

from retention.core import (
    ActionVector,
    ImmediateFeedback,
    InsufficientSamplesError,
    LogFormatError,
    ReplayBuffer,
    SeedStreams,
    SessionError,
    TransitionBatch,
    UserGroup,
    UserState,
    immediate_reward,
    read_session_log,
)


def make_state(tag: float) -> UserState:
    return UserState(
        profile=np.array([1.0, 0.0]),
        history=np.array([tag, 0.0]),
        context=np.array([1.0, 0.5]),
        candidate_summary=np.zeros(2),
    )


def record_session(buffer, user_id, n_requests, returning_time, session_index=0, group=UserGroup.HIGH_ACTIVE):
    buffer.open_session(user_id, session_index, group)
    for i in range(n_requests):
        buffer.record_request(
            user_id,
            make_state(i),
            ActionVector.constant([1.0, 2.0]),
            ImmediateFeedback(10.0, 1),
            make_state(i + 1),
        )
    return buffer.close_session(user_id, returning_time)


def test_immediate_reward_sums_watch_time_and_interactions():
    assert immediate_reward(ImmediateFeedback(0.0, 0)) == 0.0
    assert immediate_reward(ImmediateFeedback(12.5, 3)) == 15.5
    assert immediate_reward(ImmediateFeedback(7.0, 0)) == 7.0


def test_feedback_rejects_negative_values():
    with pytest.raises(ValueError):
        ImmediateFeedback(-1.0, 0)


def test_state_features_scale_depth():
    state = UserState(np.zeros(1), np.zeros(1), np.array([5.0, 0.25]), np.zeros(1))
    assert state.features().tolist() == [0.0, 0.0, 0.5, 0.25, 0.0]


def test_state_rejects_non_finite_values():
    with pytest.raises(ValueError):
        UserState(np.array([np.nan]), np.zeros(1), np.array([1.0, 0.0]), np.zeros(1))


def test_close_session_marks_only_the_last_request_terminal():
    buffer = ReplayBuffer(capacity=100, gamma=0.95)
    assert record_session(buffer, user_id=7, n_requests=3, returning_time=2.0) == 3

    samples = buffer.samples
    assert [s.terminal for s in samples] == [False, False, True]
    assert [s.gamma_it for s in samples] == [1.0, 1.0, 0.95]
    assert [s.retention_reward for s in samples] == [0.0, 0.0, 2.0]
    assert all(s.immediate_reward == 11.0 for s in samples)


def test_single_request_session_is_one_terminal_sample():
    buffer = ReplayBuffer(capacity=10, gamma=0.9)
    record_session(buffer, 0, 1, 4.0)
    (sample,) = buffer.samples
    assert sample.terminal and sample.gamma_it == 0.9 and sample.retention_reward == 4.0


def test_next_state_links_stay_inside_each_session():
    buffer = ReplayBuffer(capacity=10, gamma=0.9)
    record_session(buffer, 0, 2, 1.0, session_index=0)
    record_session(buffer, 0, 2, 3.0, session_index=1)
    samples = buffer.samples
    for first, second in ((samples[0], samples[1]), (samples[2], samples[3])):
        assert not first.terminal
        np.testing.assert_array_equal(first.next_state.features(), second.state.features())


def test_reward_function_shapes_the_terminal_reward():
    buffer = ReplayBuffer(capacity=10, gamma=0.9, reward_fn=lambda session, t: t / session.length)
    record_session(buffer, 0, 4, 2.0)
    assert buffer.samples[-1].retention_reward == 0.5


def test_close_without_open_session_fails():
    buffer = ReplayBuffer(capacity=10, gamma=0.9)
    with pytest.raises(SessionError, match="no pending session"):
        buffer.close_session(3, 1.0)


def test_negative_returning_time_is_rejected():
    buffer = ReplayBuffer(capacity=10, gamma=0.9)
    buffer.open_session(0, 0, UserGroup.LOW_ACTIVE)
    buffer.record_request(0, make_state(0), ActionVector.constant([1.0, 1.0]), ImmediateFeedback(1.0, 0),
                          make_state(1))
    with pytest.raises(SessionError):
        buffer.close_session(0, -1.0)


def test_buffer_drops_oldest_samples_when_full():
    buffer = ReplayBuffer(capacity=4, gamma=0.9)
    record_session(buffer, 0, 3, 1.0, session_index=0)
    record_session(buffer, 0, 3, 2.0, session_index=1)
    assert len(buffer) == 4
    assert [s.retention_reward for s in buffer.samples] == [0.0, 0.0, 0.0, 2.0]


def test_full_batch_is_a_permutation():
    buffer = ReplayBuffer(capacity=100, gamma=0.9)
    for session in range(10):
        record_session(buffer, 0, 1, float(session), session_index=session)
    batch = buffer.sample_batch(10, 3)
    assert sorted(s.retention_reward for s in batch) == [float(i) for i in range(10)]


def test_same_seed_gives_the_same_batch():
    buffer = ReplayBuffer(capacity=100, gamma=0.9)
    for session in range(10):
        record_session(buffer, 0, 1, float(session), session_index=session)
    first = [s.retention_reward for s in buffer.sample_batch(5, 42)]
    second = [s.retention_reward for s in buffer.sample_batch(5, 42)]
    assert first == second


def test_oversized_batch_fails():
    buffer = ReplayBuffer(capacity=100, gamma=0.9)
    for session in range(10):
        record_session(buffer, 0, 1, 1.0, session_index=session)
    with pytest.raises(InsufficientSamplesError):
        buffer.sample_batch(11, 0)


def test_batch_group_selection():
    buffer = ReplayBuffer(capacity=100, gamma=0.9)
    record_session(buffer, 0, 2, 1.0, group=UserGroup.HIGH_ACTIVE)
    record_session(buffer, 1, 3, 1.0, group=UserGroup.LOW_ACTIVE)
    batch = TransitionBatch.from_samples(buffer.samples)
    low = batch.select(batch.group_mask(UserGroup.LOW_ACTIVE))
    assert len(batch) == 5 and len(low) == 3
    assert not low.high_active.any()


def test_seed_streams_are_reproducible_and_distinct():
    a, b = SeedStreams(5), SeedStreams(5)
    assert a.generator("user", 3).random() == b.generator("user", 3).random()
    assert a.generator("user", 3).random() != a.generator("user", 4).random()
    assert a.child_seed("train", 0) != a.child_seed("eval", 0)


def write_log(path, rows):
    pd.DataFrame(rows, columns=[
        "user_id", "session_id", "request_idx", "timestamp_s", "watch_time_s", "interactions", "return_gap_days",
    ]).to_csv(path, index=False)


def test_session_log_round_trip(tmp_path):
    path = tmp_path / "log.csv"
    write_log(path, [(1, 0, 1, 0.0, 5.0, 1, 2.0), (1, 0, 2, 60.0, 3.0, 0, 2.0), (1, 1, 1, 9e4, 4.0, 0, 1.0)])
    frame = read_session_log(path)
    assert len(frame) == 3


def test_empty_session_log_fails(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(LogFormatError):
        read_session_log(path)


def test_interleaved_sessions_fail(tmp_path):
    path = tmp_path / "log.csv"
    write_log(path, [(1, 0, 1, 0.0, 5.0, 1, 2.0), (1, 1, 1, 10.0, 3.0, 0, 2.0), (1, 0, 2, 20.0, 4.0, 0, 2.0)])
    with pytest.raises(LogFormatError, match="contiguous"):
        read_session_log(path)


def test_log_missing_columns_fails(tmp_path):
    path = tmp_path / "log.csv"
    pd.DataFrame({"user_id": [1], "session_id": [0]}).to_csv(path, index=False)
    with pytest.raises(LogFormatError, match="lacks columns"):
        read_session_log(path)
