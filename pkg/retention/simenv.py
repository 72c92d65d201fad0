"""Synthetic short-video user population with feedback, leave and return modules.

Every user owns a random substream derived from the episode seed, so a user's
trajectory depends only on the seed and on the actions it receives, never on
the order in which users are stepped.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Deque, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from retention.core import (
    FEEDBACK_CHANNELS,
    INTERACTION_CHANNELS,
    ActionVector,
    ConfigError,
    ImmediateFeedback,
    InsufficientSamplesError,
    LogFormatError,
    RequestRecord,
    SeedStreams,
    SessionError,
    SessionRecord,
    StateLayout,
    UserGroup,
    UserState,
    read_session_log,
)
from retention.ranking import top_k

logger = logging.getLogger("retention.simenv")

HISTORY_REQUESTS = 3
AGE_BUCKETS = 4
GENDER_CODES = 2
LOCATION_BUCKETS = 3
PROFILE_DIM = 1 + AGE_BUCKETS + GENDER_CODES + LOCATION_BUCKETS
# history entries are divided by these before entering the state
WATCH_SCALE_S = 60.0
INTERACTION_SCALE = 6.0
SECONDS_PER_DAY = 86400.0
REQUEST_SECONDS = 60.0

METRICS_COLUMNS = (
    "episode",
    "avg_return_day",
    "day1_retention",
    "mean_immediate_reward",
    "sessions",
    "day7_retention",
    "open_frequency",
    "mean_satisfaction",
    "mean_session_length",
)

_INTERACTION_IDX = [FEEDBACK_CHANNELS.index(c) for c in INTERACTION_CHANNELS]


def _sigmoid(z: float) -> float:
    return 0.5 * (1.0 + math.tanh(0.5 * z))


@dataclass
class SimConfig:
    population: int = 200
    high_active_fraction: float = 0.5
    candidates_per_request: int = 30
    slate_size: int = 6
    n_channels: int = len(FEEDBACK_CHANNELS)
    max_weight: float = 4.0
    return_days: int = 10
    episode_days: int = 7
    max_session_length: int = 30

    # leave module: P(leave) = logistic(base + depth * depth_slope - satisfaction * satisfaction_slope)
    leave_base: float = -1.6
    leave_depth_slope: float = 0.2
    leave_satisfaction_slope: float = 0.6

    # return module: logit_d = base_d - (d - 1) * (offset + weight * satisfaction + habit_weight * habit)
    return_logits_high: Tuple[float, ...] = (1.6, 1.1, 0.4, 0.0, -0.4, -0.8, -1.2, -1.6, -2.0, -2.4)
    return_logits_low: Tuple[float, ...] = (-0.6, -0.2, 0.4, 0.6, 0.5, 0.3, -0.2, -0.6, -1.0, -1.4)
    user_logit_noise: float = 0.2
    satisfaction_weight_high: float = 0.15
    satisfaction_weight_low: float = 0.15
    group_offset_high: float = 0.0
    group_offset_low: float = 0.0
    habit_weight: float = 0.1
    habit_decay: float = 0.6

    # immediate feedback module
    interest_low: float = 0.1
    interest_high: float = 0.9
    score_noise: float = 0.25
    watch_log_base: float = 2.0
    watch_log_slope: float = 1.5
    watch_log_noise: float = 0.5
    long_watch_s: float = 15.0
    event_scale: float = 0.35
    relevance_high: Tuple[float, ...] = (0.1, 0.0, 0.2, 1.0, 1.0, 0.8, 1.0, 0.3)
    relevance_low: Tuple[float, ...] = (1.0, 0.3, 1.0, 0.1, 0.1, 0.0, 0.2, 0.2)
    satisfaction_gain: float = 0.05
    satisfaction_cap: float = 0.6

    def validate(self) -> "SimConfig":
        problems = []
        if self.population < 1:
            problems.append(f"population must be >= 1, got {self.population}")
        if not 0.0 <= self.high_active_fraction <= 1.0:
            problems.append(f"high_active_fraction must lie in [0, 1], got {self.high_active_fraction}")
        if self.return_days < 1:
            problems.append(f"return_days (K) must be >= 1, got {self.return_days}")
        if self.slate_size < 1 or self.candidates_per_request < self.slate_size:
            problems.append(
                f"need candidates_per_request ({self.candidates_per_request}) >= slate_size ({self.slate_size}) >= 1"
            )
        if self.max_weight <= 0:
            problems.append(f"max_weight (C) must be positive, got {self.max_weight}")
        if self.episode_days < 1 or self.max_session_length < 1:
            problems.append("episode_days and max_session_length must be >= 1")
        for name in ("return_logits_high", "return_logits_low"):
            if len(getattr(self, name)) != self.return_days:
                problems.append(f"{name} needs {self.return_days} entries, got {len(getattr(self, name))}")
        for name in ("relevance_high", "relevance_low"):
            if len(getattr(self, name)) != self.n_channels:
                problems.append(f"{name} needs {self.n_channels} entries, got {len(getattr(self, name))}")
        if not 0.0 <= self.interest_low <= self.interest_high <= 1.0:
            problems.append("interest bounds must satisfy 0 <= low <= high <= 1")
        if not 0.0 < self.event_scale <= 1.0:
            problems.append(f"event_scale is a probability scale in (0, 1], got {self.event_scale}")
        if not 0.0 <= self.habit_decay < 1.0:
            problems.append(f"habit_decay must lie in [0, 1), got {self.habit_decay}")
        if min(self.score_noise, self.watch_log_noise, self.satisfaction_gain, self.satisfaction_cap) < 0:
            problems.append("noise scales and satisfaction parameters must be non-negative")
        if problems:
            raise ConfigError("invalid SimConfig: " + "; ".join(problems))
        return self

    def with_overrides(self, **overrides) -> "SimConfig":
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"unknown SimConfig fields {sorted(unknown)}")
        values = asdict(self)
        values.update(overrides)
        for name in ("return_logits_high", "return_logits_low", "relevance_high", "relevance_low"):
            values[name] = tuple(float(v) for v in values[name])
        return SimConfig(**values)


def state_layout(config: SimConfig) -> StateLayout:
    return StateLayout(
        profile_dim=PROFILE_DIM,
        history_dim=2 * HISTORY_REQUESTS,
        context_dim=2,
        candidate_dim=2 * config.n_channels,
    )


@dataclass
class SimUser:
    user_id: int
    group: UserGroup
    interest: np.ndarray
    base_return_logits: np.ndarray
    profile: np.ndarray
    rng: np.random.Generator
    satisfaction: float = 0.0
    habit: float = 0.0
    history: Deque[Tuple[float, int]] = field(default_factory=lambda: deque(maxlen=HISTORY_REQUESTS))
    depth: int = 1
    time_of_day: float = 0.0
    session_open: bool = False
    session_index: int = 0
    next_session_day: int = 0
    done: bool = False
    video_counter: int = 0
    pending_state: Optional[UserState] = None
    pending_scores: Optional[np.ndarray] = None
    pending_ids: Optional[np.ndarray] = None


@dataclass
class EnvStep:
    feedback: ImmediateFeedback
    next_state: UserState
    session_ended: bool
    returning_time: Optional[float] = None
    satisfaction: float = 0.0

    def __post_init__(self):
        if (self.returning_time is not None) != self.session_ended:
            raise SessionError("returning_time must be present exactly when the session ended")


class UserSimulator:
    """The three-part environment over a synthetic population."""

    def __init__(self, config: SimConfig, seed: int):
        self.config = config.validate()
        self.seed = int(seed)
        self.streams = SeedStreams(seed)
        self.users: List[SimUser] = []
        self.reset()

    def reset(self) -> Dict[int, UserState]:
        cfg = self.config
        rng = self.streams.generator("population")
        n_high = int(round(cfg.population * cfg.high_active_fraction))
        high_ids = set(rng.permutation(cfg.population)[:n_high].tolist())

        self.users = []
        for uid in range(cfg.population):
            group = UserGroup.HIGH_ACTIVE if uid in high_ids else UserGroup.LOW_ACTIVE
            base = np.asarray(cfg.return_logits_high if group is UserGroup.HIGH_ACTIVE else cfg.return_logits_low)
            profile = np.zeros(PROFILE_DIM)
            profile[0] = 1.0 if group is UserGroup.HIGH_ACTIVE else 0.0
            profile[1 + rng.integers(AGE_BUCKETS)] = 1.0
            profile[1 + AGE_BUCKETS + rng.integers(GENDER_CODES)] = 1.0
            profile[1 + AGE_BUCKETS + GENDER_CODES + rng.integers(LOCATION_BUCKETS)] = 1.0
            user = SimUser(
                user_id=uid,
                group=group,
                interest=rng.uniform(cfg.interest_low, cfg.interest_high, size=cfg.n_channels),
                base_return_logits=base + cfg.user_logit_noise * rng.standard_normal(cfg.return_days),
                profile=profile,
                rng=self.streams.generator("user", uid),
            )
            user.time_of_day = self._session_start_time(user)
            self._prepare_request(user)
            self.users.append(user)
        return {u.user_id: u.pending_state for u in self.users}

    @property
    def layout(self) -> StateLayout:
        return state_layout(self.config)

    def _session_start_time(self, user: SimUser) -> float:
        return float(user.rng.uniform(0.3, 0.9))

    def _prepare_request(self, user: SimUser) -> UserState:
        """Draw the next request's candidates and build the state that describes them."""
        cfg = self.config
        m = cfg.candidates_per_request
        noise = cfg.score_noise * user.rng.standard_normal((m, cfg.n_channels))
        scores = np.clip(user.interest + noise, 0.0, 1.0)
        ids = np.arange(user.video_counter, user.video_counter + m)
        user.video_counter += m

        history = np.zeros(2 * HISTORY_REQUESTS)
        # oldest first, zero padded at the front
        offset = 2 * (HISTORY_REQUESTS - len(user.history))
        for i, (watch, interactions) in enumerate(user.history):
            history[offset + 2 * i] = watch / WATCH_SCALE_S
            history[offset + 2 * i + 1] = interactions / INTERACTION_SCALE

        user.pending_scores = scores
        user.pending_ids = ids
        user.pending_state = UserState(
            profile=user.profile,
            history=history,
            context=np.array([float(user.depth), user.time_of_day]),
            candidate_summary=np.concatenate([scores.mean(axis=0), scores.max(axis=0)]),
        )
        return user.pending_state

    def open_session(self, user: SimUser) -> UserState:
        if user.session_open:
            raise SessionError(f"user {user.user_id} already has an open session")
        user.session_open = True
        user.satisfaction = 0.0
        return user.pending_state

    # -- immediate feedback module --

    def _feedback(self, user: SimUser, slate_scores: np.ndarray) -> Tuple[ImmediateFeedback, float]:
        cfg = self.config
        k = slate_scores.shape[0]
        watch_quality = 0.5 * (slate_scores[:, 0] + slate_scores[:, 2])
        log_watch = cfg.watch_log_base + cfg.watch_log_slope * watch_quality
        watch = np.exp(log_watch + cfg.watch_log_noise * user.rng.standard_normal(k))

        positives = np.empty_like(slate_scores, dtype=bool)
        positives[:, 0] = watch > cfg.long_watch_s
        positives[:, 1:] = user.rng.random((k, cfg.n_channels - 1)) < cfg.event_scale * slate_scores[:, 1:]
        interactions = int(positives[:, _INTERACTION_IDX].sum())

        relevance = np.asarray(cfg.relevance_high if user.group is UserGroup.HIGH_ACTIVE else cfg.relevance_low)
        increment = min(cfg.satisfaction_cap, cfg.satisfaction_gain * float((positives * relevance).sum()))
        return ImmediateFeedback(float(watch.sum()), interactions), increment

    # -- leave module --

    def leave_probability(self, user: SimUser) -> float:
        cfg = self.config
        return _sigmoid(
            cfg.leave_base + user.depth * cfg.leave_depth_slope - user.satisfaction * cfg.leave_satisfaction_slope
        )

    # -- return module --

    def return_distribution(self, user: SimUser, satisfaction: Optional[float] = None) -> np.ndarray:
        cfg = self.config
        satisfaction = user.satisfaction if satisfaction is None else satisfaction
        if user.group is UserGroup.HIGH_ACTIVE:
            offset, weight = cfg.group_offset_high, cfg.satisfaction_weight_high
        else:
            offset, weight = cfg.group_offset_low, cfg.satisfaction_weight_low
        tilt = offset + weight * satisfaction + cfg.habit_weight * user.habit
        logits = user.base_return_logits - tilt * np.arange(cfg.return_days)
        logits = logits - logits.max()
        p = np.exp(logits)
        return p / p.sum()

    def expected_return_day(self, user: SimUser, satisfaction: Optional[float] = None) -> float:
        p = self.return_distribution(user, satisfaction)
        return float(p @ np.arange(1, self.config.return_days + 1))

    def sample_return_day(self, user: SimUser) -> int:
        p = self.return_distribution(user)
        return int(user.rng.choice(self.config.return_days, p=p)) + 1

    def step(self, user: SimUser, action: ActionVector) -> EnvStep:
        if not user.session_open:
            raise SessionError(f"user {user.user_id} stepped after session end without opening a new session")
        cfg = self.config
        picked = top_k(user.pending_scores @ action.values, user.pending_ids, cfg.slate_size)
        feedback, increment = self._feedback(user, user.pending_scores[picked])
        user.satisfaction += increment
        user.history.append((feedback.watch_time_s, feedback.interactions))

        ended = user.rng.random() < self.leave_probability(user) or user.depth >= cfg.max_session_length
        if not ended:
            user.depth += 1
            user.time_of_day += REQUEST_SECONDS / SECONDS_PER_DAY
            return EnvStep(feedback, self._prepare_request(user), session_ended=False, satisfaction=user.satisfaction)

        day = self.sample_return_day(user)
        satisfaction = user.satisfaction
        user.habit = cfg.habit_decay * user.habit + (1.0 - cfg.habit_decay) * satisfaction
        user.session_open = False
        user.session_index += 1
        user.next_session_day += day
        user.depth = 1
        user.time_of_day = self._session_start_time(user)
        next_state = self._prepare_request(user)
        return EnvStep(feedback, next_state, session_ended=True, returning_time=float(day), satisfaction=satisfaction)


def reset(config: SimConfig, seed: int) -> Tuple[UserSimulator, Dict[int, UserState]]:
    sim = UserSimulator(config, seed)
    return sim, {u.user_id: u.pending_state for u in sim.users}


# A policy maps a batch of states (with their users' groups) to one action each
Policy = Callable[[Sequence[UserState], Sequence[UserGroup]], Sequence[ActionVector]]


class EpisodeObserver(Protocol):
    def session_opened(self, user_id: int, session_index: int, group: UserGroup, day: int) -> None:
        ...

    def request_done(self, user_id: int, state: UserState, action: ActionVector, step: EnvStep) -> None:
        ...


@dataclass
class EpisodeMetrics:
    episode: int
    avg_return_day: float
    day1_retention: float
    mean_immediate_reward: float
    sessions: int
    day7_retention: float
    open_frequency: float
    mean_satisfaction: float
    mean_session_length: float

    def as_row(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in METRICS_COLUMNS}


@dataclass
class EpisodeResult:
    sessions: List[SessionRecord]
    metrics: EpisodeMetrics
    clipped_actions: int = 0


def compute_metrics(sessions: Sequence[SessionRecord], population: int, days: int, episode: int = 0) -> EpisodeMetrics:
    if not sessions:
        raise InsufficientSamplesError("an episode produced no sessions")
    returning = np.array([s.returning_time for s in sessions], dtype=np.float64)
    requests = sum(s.length for s in sessions)
    return EpisodeMetrics(
        episode=episode,
        avg_return_day=float(returning.mean()),
        day1_retention=float(np.mean(returning == 1.0)),
        mean_immediate_reward=float(sum(s.total_immediate_reward for s in sessions) / requests),
        sessions=len(sessions),
        day7_retention=float(np.mean(returning <= 7.0)),
        open_frequency=float(len(sessions) / (population * days)),
        mean_satisfaction=float(np.mean([s.satisfaction for s in sessions])),
        mean_session_length=float(requests / len(sessions)),
    )


def run_episode(
    policy: Policy,
    config: SimConfig,
    seed: int,
    observer: Optional[EpisodeObserver] = None,
    episode: int = 0,
    users: Optional[int] = None,
) -> EpisodeResult:
    """Simulate `episode_days` days; `users` restricts the run to the first N users of the population."""
    sim = UserSimulator(config, seed)
    population = sim.users if users is None else sim.users[:users]
    sessions: List[SessionRecord] = []
    open_records: Dict[int, SessionRecord] = {}
    clipped = 0

    for day in range(config.episode_days):
        active = [u for u in population if not u.done and u.next_session_day == day]
        states: Dict[int, UserState] = {}
        for user in active:
            states[user.user_id] = sim.open_session(user)
            open_records[user.user_id] = SessionRecord(
                user_id=user.user_id, session_index=user.session_index, group=user.group, start_day=day
            )
            if observer is not None:
                observer.session_opened(user.user_id, user.session_index, user.group, day)

        while active:
            actions = policy([states[u.user_id] for u in active], [u.group for u in active])
            still_open = []
            for user, action in zip(active, actions):
                if not action.in_range(config.max_weight):
                    clipped += 1
                    action = action.clipped(config.max_weight)
                state = states[user.user_id]
                result = sim.step(user, action)
                record = open_records[user.user_id]
                record.requests.append(RequestRecord(state, action, result.feedback, result.next_state))
                if observer is not None:
                    observer.request_done(user.user_id, state, action, result)
                if result.session_ended:
                    record.returning_time = result.returning_time
                    record.satisfaction = result.satisfaction
                    sessions.append(record)
                    del open_records[user.user_id]
                    if user.next_session_day >= config.episode_days:
                        user.done = True
                else:
                    states[user.user_id] = result.next_state
                    still_open.append(user)
            active = still_open

    if clipped:
        logger.warning("episode %d: clipped %d out-of-range actions to [0, %s]", episode, clipped, config.max_weight)
    metrics = compute_metrics(sessions, len(population), config.episode_days, episode)
    return EpisodeResult(sessions=sessions, metrics=metrics, clipped_actions=clipped)


def write_metrics_csv(rows: Sequence[EpisodeMetrics], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([r.as_row() for r in rows], columns=list(METRICS_COLUMNS))
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def export_session_log(sessions: Sequence[SessionRecord], path: Union[str, Path]) -> Path:
    """Write sessions in the ingestion CSV schema, ordered by user then time."""
    rows = []
    for session in sorted(sessions, key=lambda s: (s.user_id, s.start_day, s.session_index)):
        for idx, request in enumerate(session.requests, start=1):
            rows.append({
                "user_id": session.user_id,
                "session_id": session.session_index,
                "request_idx": idx,
                "timestamp_s": (session.start_day + request.state.context[1]) * SECONDS_PER_DAY,
                "watch_time_s": request.feedback.watch_time_s,
                "interactions": request.feedback.interactions,
                "return_gap_days": session.returning_time,
            })
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(path, index=False, float_format="%.17g")
    return path


@dataclass
class CalibrationResult:
    overrides: Dict[str, object]
    leave_log_likelihood: float
    return_log_likelihood: float
    sessions: int
    high_active_users: int
    low_active_users: int


def _fit_logistic(x: np.ndarray, y: np.ndarray, iterations: int = 50) -> Tuple[np.ndarray, float]:
    """Newton-Raphson maximum likelihood for P(y=1) = logistic(b0 + b1 * x)."""
    design = np.column_stack([np.ones_like(x), x])
    beta = np.zeros(2)
    for _ in range(iterations):
        p = 1.0 / (1.0 + np.exp(-(design @ beta)))
        w = np.clip(p * (1.0 - p), 1e-12, None)
        hessian = design.T @ (design * w[:, None])
        grad = design.T @ (y - p)
        delta = np.linalg.solve(hessian + 1e-9 * np.eye(2), grad)
        beta += delta
        if np.max(np.abs(delta)) < 1e-10:
            break
    p = np.clip(1.0 / (1.0 + np.exp(-(design @ beta))), 1e-12, 1.0 - 1e-12)
    log_likelihood = float(np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))
    return beta, log_likelihood


def calibrate_from_logs(path: Union[str, Path], return_days: int = 10) -> CalibrationResult:
    """Fit the leave curve and per-group return logits to an ingested session log."""
    frame = read_session_log(path)
    last = frame.groupby(["user_id", "session_id"], sort=False)["request_idx"].transform("max")
    left = (frame["request_idx"] == last).to_numpy(dtype=np.float64)
    (leave_base, depth_slope), leave_ll = _fit_logistic(frame["request_idx"].to_numpy(dtype=np.float64), left)

    sessions = frame.groupby(["user_id", "session_id"], sort=False).agg(return_gap_days=("return_gap_days", "first"))
    sessions = sessions.reset_index()
    mean_gap = sessions.groupby("user_id")["return_gap_days"].mean().reset_index()
    # shorter mean gap ranks first; the first half is the high-activity group
    mean_gap = mean_gap.sort_values(["return_gap_days", "user_id"], kind="mergesort")
    n_high = int(math.ceil(len(mean_gap) / 2))
    high_users = set(mean_gap["user_id"].iloc[:n_high])
    if n_high == 0 or n_high == len(mean_gap):
        raise LogFormatError(f"session log {path} needs at least two users to form both activity groups")

    overrides: Dict[str, object] = {
        "leave_base": float(leave_base),
        "leave_depth_slope": float(depth_slope),
        # the log carries no satisfaction, so the fitted curve depends on depth alone
        "leave_satisfaction_slope": 0.0,
        "return_days": int(return_days),
    }
    return_ll = 0.0
    days = np.clip(np.rint(sessions["return_gap_days"].to_numpy()), 1, return_days).astype(int)
    is_high = sessions["user_id"].isin(high_users).to_numpy()
    for name, mask in (("return_logits_high", is_high), ("return_logits_low", ~is_high)):
        if not mask.any():
            raise LogFormatError(f"session log {path} has an empty activity group for {name}")
        counts = np.bincount(days[mask] - 1, minlength=return_days).astype(np.float64)
        # add-half smoothing keeps every day reachable
        probs = (counts + 0.5) / (counts.sum() + 0.5 * return_days)
        logits = np.log(probs)
        overrides[name] = tuple(float(v) for v in logits)
        return_ll += float(counts @ logits)

    logger.info(
        "calibrated from %s: leave_base=%.4f depth_slope=%.4f leave_ll=%.2f return_ll=%.2f",
        path, leave_base, depth_slope, leave_ll, return_ll,
    )
    return CalibrationResult(
        overrides=overrides,
        leave_log_likelihood=leave_ll,
        return_log_likelihood=return_ll,
        sessions=len(sessions),
        high_active_users=len(high_users),
        low_active_users=len(mean_gap) - len(high_users),
    )
