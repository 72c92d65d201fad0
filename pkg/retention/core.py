"""Domain types for the request-based retention MDP, sessions and the replay buffer.

A user session is a run of requests. Each request yields one transition; the
session's last transition additionally carries the (possibly normalized)
returning time once the user comes back, and only then does the session enter
the replay buffer.
"""
from __future__ import annotations

import enum
import logging
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

logger = logging.getLogger("retention.core")

# Score channels of the ranking ensemble, in action-vector order
FEEDBACK_CHANNELS = (
    "watch_time",
    "short_view",
    "long_view",
    "like",
    "follow",
    "forward",
    "comment",
    "profile_enter",
)
# Channels counted as interactions in the immediate reward (forward = share)
INTERACTION_CHANNELS = ("like", "follow", "forward", "comment")

# Session depth is divided by this before it reaches an approximator
DEPTH_SCALE = 10.0


class RetentionError(Exception):
    pass


class ConfigError(RetentionError, ValueError):
    pass


class DimensionError(RetentionError, ValueError):
    pass


class SessionError(RetentionError, RuntimeError):
    pass


class InsufficientSamplesError(RetentionError, ValueError):
    pass


class LogFormatError(RetentionError, ValueError):
    pass


class NumericalAbort(RetentionError, RuntimeError):
    """Raised on non-finite gradients or losses; `batch` holds the offending arrays."""

    def __init__(self, message: str, batch: Optional[Dict[str, np.ndarray]] = None):
        super().__init__(message)
        self.batch = batch


class UserGroup(str, enum.Enum):
    HIGH_ACTIVE = "HighActive"
    LOW_ACTIVE = "LowActive"


@dataclass(frozen=True)
class StateLayout:
    profile_dim: int
    history_dim: int
    context_dim: int
    candidate_dim: int

    @property
    def total(self) -> int:
        return self.profile_dim + self.history_dim + self.context_dim + self.candidate_dim

    @property
    def history_slice(self) -> slice:
        return slice(self.profile_dim, self.profile_dim + self.history_dim)


@dataclass
class UserState:
    profile: np.ndarray
    history: np.ndarray
    context: np.ndarray
    candidate_summary: np.ndarray

    def __post_init__(self):
        for name in ("profile", "history", "context", "candidate_summary"):
            value = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(value)):
                raise DimensionError(f"UserState.{name} has non-finite entries: {value}")
            setattr(self, name, value)
        if self.context.size and self.context[0] < 1:
            raise DimensionError(f"session depth must be >= 1, got {self.context[0]}")

    @property
    def depth(self) -> int:
        return int(round(self.context[0]))

    @property
    def layout(self) -> StateLayout:
        return StateLayout(self.profile.size, self.history.size, self.context.size, self.candidate_summary.size)

    def features(self) -> np.ndarray:
        """Flat approximator input; the depth entry is rescaled."""
        context = self.context.copy()
        if context.size:
            context[0] = context[0] / DEPTH_SCALE
        return np.concatenate([self.profile, self.history, context, self.candidate_summary])


@dataclass
class ActionVector:
    values: np.ndarray
    behavior_mu: np.ndarray
    behavior_sigma: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.behavior_mu = np.asarray(self.behavior_mu, dtype=np.float64)
        self.behavior_sigma = np.asarray(self.behavior_sigma, dtype=np.float64)
        if not (self.values.shape == self.behavior_mu.shape == self.behavior_sigma.shape):
            raise DimensionError(
                f"action shapes differ: values {self.values.shape}, mu {self.behavior_mu.shape}, "
                f"sigma {self.behavior_sigma.shape}"
            )
        if np.any(self.behavior_sigma <= 0):
            raise DimensionError(f"behavior_sigma must be positive, got {self.behavior_sigma}")

    @classmethod
    def constant(cls, values: Sequence[float], sigma: float = 1e-3) -> "ActionVector":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, values.copy(), np.full_like(values, sigma))

    def in_range(self, max_weight: float) -> bool:
        return bool(np.all(self.values >= 0.0) and np.all(self.values <= max_weight))

    def clipped(self, max_weight: float) -> "ActionVector":
        return ActionVector(np.clip(self.values, 0.0, max_weight), self.behavior_mu, self.behavior_sigma)


@dataclass(frozen=True)
class CandidateVideo:
    video_id: int
    scores: np.ndarray


@dataclass(frozen=True)
class ImmediateFeedback:
    watch_time_s: float
    interactions: int

    def __post_init__(self):
        if self.watch_time_s < 0 or self.interactions < 0:
            raise ValueError(
                f"feedback must be non-negative, got watch_time_s={self.watch_time_s}, "
                f"interactions={self.interactions}"
            )

    def __add__(self, other: "ImmediateFeedback") -> "ImmediateFeedback":
        return ImmediateFeedback(self.watch_time_s + other.watch_time_s, self.interactions + other.interactions)


def immediate_reward(fb: ImmediateFeedback) -> float:
    return float(fb.watch_time_s + fb.interactions)


@dataclass
class RequestRecord:
    state: UserState
    action: ActionVector
    feedback: ImmediateFeedback
    next_state: UserState


@dataclass
class SessionRecord:
    user_id: int
    session_index: int
    group: UserGroup
    start_day: int = 0
    requests: List[RequestRecord] = field(default_factory=list)
    returning_time: Optional[float] = None
    satisfaction: float = 0.0

    @property
    def closed(self) -> bool:
        return self.returning_time is not None

    @property
    def length(self) -> int:
        return len(self.requests)

    @property
    def total_watch_time(self) -> float:
        return float(sum(r.feedback.watch_time_s for r in self.requests))

    @property
    def total_interactions(self) -> int:
        return int(sum(r.feedback.interactions for r in self.requests))

    @property
    def total_immediate_reward(self) -> float:
        return float(sum(immediate_reward(r.feedback) for r in self.requests))


@dataclass
class TransitionSample:
    state: UserState
    action: ActionVector
    immediate_reward: float
    retention_reward: float
    next_state: UserState
    terminal: bool
    gamma_it: float
    user_group: UserGroup
    intrinsic_reward: float = 0.0


@dataclass
class TransitionBatch:
    """Column-stacked view of a list of TransitionSample."""

    states: np.ndarray
    actions: np.ndarray
    behavior_mu: np.ndarray
    behavior_sigma: np.ndarray
    immediate_reward: np.ndarray
    retention_reward: np.ndarray
    next_states: np.ndarray
    terminal: np.ndarray
    gamma_it: np.ndarray
    high_active: np.ndarray
    intrinsic_reward: np.ndarray

    @classmethod
    def from_samples(cls, samples: Sequence[TransitionSample]) -> "TransitionBatch":
        if not samples:
            raise InsufficientSamplesError("cannot build a batch from zero samples")
        return cls(
            states=np.stack([s.state.features() for s in samples]),
            actions=np.stack([s.action.values for s in samples]),
            behavior_mu=np.stack([s.action.behavior_mu for s in samples]),
            behavior_sigma=np.stack([s.action.behavior_sigma for s in samples]),
            immediate_reward=np.array([s.immediate_reward for s in samples], dtype=np.float64),
            retention_reward=np.array([s.retention_reward for s in samples], dtype=np.float64),
            next_states=np.stack([s.next_state.features() for s in samples]),
            terminal=np.array([s.terminal for s in samples], dtype=bool),
            gamma_it=np.array([s.gamma_it for s in samples], dtype=np.float64),
            high_active=np.array([s.user_group is UserGroup.HIGH_ACTIVE for s in samples], dtype=bool),
            intrinsic_reward=np.array([s.intrinsic_reward for s in samples], dtype=np.float64),
        )

    def __len__(self) -> int:
        return self.states.shape[0]

    def select(self, mask: np.ndarray) -> "TransitionBatch":
        return TransitionBatch(**{name: value[mask] for name, value in self.as_arrays().items()})

    def group_mask(self, group: UserGroup) -> np.ndarray:
        return self.high_active if group is UserGroup.HIGH_ACTIVE else ~self.high_active

    def as_arrays(self) -> Dict[str, np.ndarray]:
        return dict(vars(self))


# Maps a closed session and its returning time to the terminal retention reward
RetentionRewardFn = Callable[[SessionRecord, float], float]


def raw_returning_time(session: SessionRecord, returning_time: float) -> float:
    return float(returning_time)


class ReplayBuffer:
    """Bounded FIFO of transitions plus the open sessions still waiting for a returning time.

    All mutation goes through one lock; it is the only object shared between
    rollout workers and the trainer.
    """

    def __init__(self, capacity: int, gamma: float, reward_fn: RetentionRewardFn = raw_returning_time):
        if capacity <= 0:
            raise ConfigError(f"buffer capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self.gamma = float(gamma)
        self.reward_fn = reward_fn
        self.pending_sessions: Dict[int, SessionRecord] = {}
        self._samples: List[TransitionSample] = []
        self._next = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._samples)

    @property
    def samples(self) -> List[TransitionSample]:
        """Samples in insertion order, oldest first."""
        return self._samples[self._next:] + self._samples[:self._next]

    def open_session(self, user_id: int, session_index: int, group: UserGroup, start_day: int = 0) -> SessionRecord:
        with self._lock:
            if user_id in self.pending_sessions:
                raise SessionError(f"user {user_id} already has an open session")
            session = SessionRecord(user_id=user_id, session_index=session_index, group=group, start_day=start_day)
            self.pending_sessions[user_id] = session
            return session

    def record_request(
        self,
        user_id: int,
        state: UserState,
        action: ActionVector,
        feedback: ImmediateFeedback,
        next_state: UserState,
    ) -> None:
        with self._lock:
            session = self.pending_sessions.get(user_id)
            if session is None:
                raise SessionError(f"no pending session for user {user_id}")
            session.requests.append(RequestRecord(state, action, feedback, next_state))

    def close_session(self, user_id: int, returning_time: float) -> int:
        """Finalize the user's open session and append its transitions in request order."""
        with self._lock:
            session = self.pending_sessions.get(user_id)
            if session is None:
                raise SessionError(f"no pending session for user {user_id}")
            if returning_time < 0 or not np.isfinite(returning_time):
                raise SessionError(f"returning_time must be a finite non-negative number, got {returning_time}")
            if not session.requests:
                raise SessionError(f"session {session.session_index} of user {user_id} has no requests")

            session.returning_time = float(returning_time)
            retention = float(self.reward_fn(session, session.returning_time))
            last = session.length - 1
            for idx, request in enumerate(session.requests):
                terminal = idx == last
                self._append(TransitionSample(
                    state=request.state,
                    action=request.action,
                    immediate_reward=immediate_reward(request.feedback),
                    retention_reward=retention if terminal else 0.0,
                    next_state=request.next_state,
                    terminal=terminal,
                    gamma_it=self.gamma if terminal else 1.0,
                    user_group=session.group,
                ))
            del self.pending_sessions[user_id]
            return session.length

    def _append(self, sample: TransitionSample) -> None:
        if len(self._samples) < self.capacity:
            self._samples.append(sample)
        else:
            self._samples[self._next] = sample
            self._next = (self._next + 1) % self.capacity

    def sample_batch(self, batch_size: int, rng_seed: Union[int, np.random.Generator]) -> List[TransitionSample]:
        with self._lock:
            if batch_size > len(self._samples):
                raise InsufficientSamplesError(
                    f"requested batch of {batch_size} from a buffer holding {len(self._samples)} samples"
                )
            rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
            idx = rng.choice(len(self._samples), size=batch_size, replace=False)
            return [self._samples[i] for i in idx]


class SeedStreams:
    """Named, independent random substreams derived from one run seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def sequence(self, name: str, *extra: int) -> np.random.SeedSequence:
        return np.random.SeedSequence([self.seed, zlib.crc32(name.encode("utf-8")), *extra])

    def generator(self, name: str, *extra: int) -> np.random.Generator:
        return np.random.default_rng(self.sequence(name, *extra))

    def child_seed(self, name: str, *extra: int) -> int:
        return int(self.sequence(name, *extra).generate_state(1, dtype=np.uint32)[0])


SESSION_LOG_COLUMNS = (
    "user_id",
    "session_id",
    "request_idx",
    "timestamp_s",
    "watch_time_s",
    "interactions",
    "return_gap_days",
)


def read_session_log(path: Union[str, Path]) -> pd.DataFrame:
    """Load and validate a session log CSV (one row per request)."""
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError as exc:
        raise LogFormatError(f"session log {path} is empty") from exc
    except (OSError, pd.errors.ParserError) as exc:
        raise LogFormatError(f"cannot read session log {path}: {exc}") from exc

    missing = [c for c in SESSION_LOG_COLUMNS if c not in frame.columns]
    if missing:
        raise LogFormatError(f"session log {path} lacks columns {missing}")
    if frame.empty:
        raise LogFormatError(f"session log {path} has no rows")
    if frame[list(SESSION_LOG_COLUMNS)].isna().any().any():
        raise LogFormatError(f"session log {path} has missing values")
    if (frame["watch_time_s"] < 0).any() or (frame["interactions"] < 0).any() or (frame["return_gap_days"] < 0).any():
        raise LogFormatError(f"session log {path} has negative feedback or return gaps")

    for user_id, rows in frame.groupby("user_id", sort=False):
        sessions = rows["session_id"].to_numpy()
        # contiguous: each session id forms one block
        boundaries = np.flatnonzero(sessions[1:] != sessions[:-1])
        if len(boundaries) + 1 != len(np.unique(sessions)):
            raise LogFormatError(f"sessions of user {user_id} are not contiguous")
        if np.any(np.diff(rows["timestamp_s"].to_numpy()) < 0):
            raise LogFormatError(f"requests of user {user_id} are not time-ordered")
    return frame
