"""Retention-oriented actor-critic trainer.

Four pieces sit on top of a DDPG-style actor-critic:

* a retention critic whose TD target discounts only across session boundaries;
* an immediate-feedback critic whose reward includes a random-network-distillation bonus;
* a session-level classifier turning raw returning times into a bounded, normalized reward;
* one actor per activity group, trained on a weighted critic difference scaled by a
  per-sample soft regularization weight.
"""
from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Deque, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from retention.approx import Activation, Adam, Mlp, TargetCopy, gaussian_log_density, load_checkpoint, save_checkpoint
from retention.core import (
    ActionVector,
    ConfigError,
    InsufficientSamplesError,
    NumericalAbort,
    ReplayBuffer,
    SeedStreams,
    SessionRecord,
    StateLayout,
    TransitionBatch,
    UserGroup,
    UserState,
)
from retention.simenv import EnvStep, Policy

logger = logging.getLogger("retention.rlur")

# Clamp for classifier probabilities inside log terms
PROB_EPS = 1e-6
GROUPS = (UserGroup.HIGH_ACTIVE, UserGroup.LOW_ACTIVE)

LOSS_COLUMNS = ("step", "loss_T", "loss_I", "loss_cls", "loss_rnd", "actor_loss_high", "actor_loss_low", "mean_w")


@dataclass
class RlurHyper:
    gamma: float = 0.95
    lambda_T: float = 1.0
    lambda_I: float = 1.0
    beta: float = 60.0
    alpha: float = 3.0
    reg_lambda: float = 1.5
    # None lets the algorithm decide (on for RLUR, off for the naive variants)
    reward_normalization: Optional[bool] = None
    soft_reg_direction: str = "as_written"
    soft_reg_log_cap: float = 50.0
    actor_regularization: str = "soft"
    bc_weight: float = 1.0
    immediate_reward_scale: float = 0.01
    t_beta_refresh: int = 1000
    t_beta_window: int = 10000

    def validate(self) -> "RlurHyper":
        problems = []
        if not 0.0 <= self.gamma < 1.0:
            problems.append(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.lambda_T < 0 or self.lambda_I < 0:
            problems.append(f"lambda_T and lambda_I must be non-negative, got {self.lambda_T}, {self.lambda_I}")
        if not 0.0 < self.beta < 100.0:
            problems.append(f"beta is a percentile in (0, 100), got {self.beta}")
        if self.alpha <= 0:
            problems.append(f"alpha must be positive, got {self.alpha}")
        if self.reg_lambda < 0:
            problems.append(f"reg_lambda must be non-negative, got {self.reg_lambda}")
        if self.soft_reg_direction not in ("as_written", "inverse"):
            problems.append(f"soft_reg_direction must be as_written or inverse, got {self.soft_reg_direction!r}")
        if self.actor_regularization not in ("soft", "behavior_cloning", "none"):
            problems.append(
                f"actor_regularization must be soft, behavior_cloning or none, got {self.actor_regularization!r}"
            )
        if self.soft_reg_log_cap <= 0 or self.bc_weight < 0 or self.immediate_reward_scale < 0:
            problems.append("soft_reg_log_cap must be positive; bc_weight and immediate_reward_scale non-negative")
        if self.t_beta_refresh < 1 or self.t_beta_window < 1:
            problems.append("t_beta_refresh and t_beta_window must be >= 1")
        if problems:
            raise ConfigError("invalid RlurHyper: " + "; ".join(problems))
        return self


@dataclass
class TrainerConfig:
    hidden: Tuple[int, ...] = (32, 32)
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tau: float = 0.005
    batch_size: int = 128
    min_fill: int = 2000
    train_every: int = 8
    buffer_capacity: int = 100_000
    init_sigma: float = 0.4
    sigma_floor: float = 1e-3
    rnd_embedding_dim: int = 16

    def validate(self) -> "TrainerConfig":
        problems = []
        if any(h < 1 for h in self.hidden):
            problems.append(f"hidden layer sizes must be >= 1, got {self.hidden}")
        if self.actor_lr < 0 or self.critic_lr < 0:
            problems.append("learning rates must be non-negative")
        if not 0.0 < self.tau <= 1.0:
            problems.append(f"tau must lie in (0, 1], got {self.tau}")
        if self.batch_size < 1 or self.min_fill < 0 or self.train_every < 1 or self.buffer_capacity < self.batch_size:
            problems.append("need batch_size >= 1, min_fill >= 0, train_every >= 1, buffer_capacity >= batch_size")
        if self.init_sigma <= self.sigma_floor or self.sigma_floor <= 0:
            problems.append(f"need init_sigma ({self.init_sigma}) > sigma_floor ({self.sigma_floor}) > 0")
        if problems:
            raise ConfigError("invalid TrainerConfig: " + "; ".join(problems))
        return self


@dataclass
class TrainStepLosses:
    step: int
    loss_T: float = math.nan
    loss_I: float = math.nan
    loss_cls: float = math.nan
    loss_rnd: float = math.nan
    actor_loss_high: float = math.nan
    actor_loss_low: float = math.nan
    mean_w: float = math.nan


def write_loss_csv(rows: Sequence[TrainStepLosses], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame([asdict(r) for r in rows], columns=list(LOSS_COLUMNS)).to_csv(path, index=False, float_format="%.17g")
    return path


# -- standalone loss and reward functions --

def percentile_T_beta(returning_times: Sequence[float], beta: float) -> float:
    """Nearest-rank percentile: the smallest value whose cumulative fraction reaches beta/100."""
    values = np.sort(np.asarray(returning_times, dtype=np.float64))
    if values.size == 0:
        raise InsufficientSamplesError("percentile of an empty list of returning times")
    if not 0.0 < beta <= 100.0:
        raise ValueError(f"beta must lie in (0, 100], got {beta}")
    rank = max(1, math.ceil(round(beta * values.size / 100.0, 9)))
    return float(values[rank - 1])


def normalized_retention_reward(returning_time: float, predicted: float, t_beta: float, alpha: float) -> float:
    """clip(T / ((1 - T'(x)) * T_beta), 0, alpha); (1 - T'(x)) * T_beta lower-bounds the expected return."""
    if t_beta <= 0:
        raise ValueError(f"T_beta must be positive, got {t_beta}")
    denominator = max(1.0 - predicted, PROB_EPS) * t_beta
    return float(min(max(returning_time / denominator, 0.0), alpha))


def classifier_loss(
    classifier: Mlp, features: np.ndarray, returning_times: np.ndarray, t_beta: float
) -> Tuple[float, List[np.ndarray]]:
    """Binary cross-entropy of "returns sooner than T_beta"."""
    y = (np.asarray(returning_times) < t_beta).astype(np.float64)
    out, cache = classifier.forward_cached(np.atleast_2d(features))
    p = out[:, 0]
    clamped = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    loss = -float(np.mean(y * np.log(clamped) + (1.0 - y) * np.log(1.0 - clamped)))
    inside = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    dp = -(y / clamped - (1.0 - y) / (1.0 - clamped)) / p.size * inside
    grads, _ = classifier.backward(features, dp[:, None], cache)
    return loss, grads


def rnd_intrinsic(trainable: Mlp, fixed: Mlp, history: np.ndarray) -> Union[float, np.ndarray]:
    """Squared distance between the trainable and frozen embeddings of a behavior history."""
    diff = trainable.forward(history) - fixed.forward(history)
    return np.sum(np.square(diff), axis=-1) if diff.ndim > 1 else float(np.sum(np.square(diff)))


def rnd_loss(trainable: Mlp, fixed: Mlp, history: np.ndarray) -> Tuple[float, List[np.ndarray]]:
    history = np.atleast_2d(history)
    embedded, cache = trainable.forward_cached(history)
    diff = embedded - fixed.forward(history)
    loss = float(np.mean(np.sum(np.square(diff), axis=1)))
    grads, _ = trainable.backward(history, 2.0 * diff / history.shape[0], cache)
    return loss, grads


def retention_targets(retention_reward: np.ndarray, gamma_it: np.ndarray, next_q: np.ndarray) -> np.ndarray:
    return retention_reward + gamma_it * next_q


def td_regression(critic: Mlp, inputs: np.ndarray, targets: np.ndarray) -> Tuple[float, List[np.ndarray]]:
    """Mean squared error of critic(inputs) against fixed targets."""
    q, cache = critic.forward_cached(inputs)
    err = q[:, 0] - targets
    loss = float(np.mean(np.square(err)))
    grads, _ = critic.backward(inputs, (2.0 * err / err.size)[:, None], cache)
    return loss, grads


def soft_regularization_weight(
    log_p: np.ndarray,
    log_pb: np.ndarray,
    reg_lambda: float,
    direction: str = "as_written",
    log_cap: float = 50.0,
) -> np.ndarray:
    gap = np.minimum(np.maximum(reg_lambda * (np.asarray(log_p) - np.asarray(log_pb)), 0.0), log_cap)
    return np.exp(gap) if direction == "as_written" else np.exp(-gap)


def session_features(session: SessionRecord) -> np.ndarray:
    """Classifier input: profile, group flag, log session length, log watch minutes, log interactions."""
    profile = session.requests[0].state.profile
    return np.concatenate([
        profile,
        [
            1.0 if session.group is UserGroup.HIGH_ACTIVE else 0.0,
            math.log1p(session.length),
            math.log1p(session.total_watch_time / 60.0),
            math.log1p(session.total_interactions),
        ],
    ])


def session_feature_dim(layout: StateLayout) -> int:
    return layout.profile_dim + 4


class ReturnThreshold:
    """T_beta over a sliding window of returning times, refreshed every `refresh_every` sessions."""

    def __init__(self, beta: float, refresh_every: int = 1000, window: int = 10000):
        self.beta = beta
        self.refresh_every = refresh_every
        self.window: Deque[float] = deque(maxlen=window)
        self.value: Optional[float] = None
        self.observed = 0

    def observe(self, returning_time: float) -> None:
        self.window.append(float(returning_time))
        self.observed += 1
        if self.value is None or self.observed % self.refresh_every == 0:
            # stays positive so it can divide
            self.value = max(percentile_T_beta(self.window, self.beta), 1e-6)
            logger.debug("T_beta refreshed to %.4f after %d sessions", self.value, self.observed)


@dataclass
class GaussianActor:
    mean: Mlp
    sigma: Mlp

    def forward(self, states: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self.mean.forward(states), self.sigma.forward(states)


@dataclass
class RlurNets:
    actor_high: GaussianActor
    actor_low: GaussianActor
    retention_critic: Mlp
    retention_target: TargetCopy
    immediate_critic: Optional[Mlp] = None
    immediate_target: Optional[TargetCopy] = None
    rnd_trainable: Optional[Mlp] = None
    rnd_fixed: Optional[Mlp] = None
    return_classifier: Optional[Mlp] = None

    @property
    def dual_policy(self) -> bool:
        return self.actor_high is not self.actor_low

    def named(self) -> Iterator[Tuple[str, Mlp]]:
        actors = (("actor_high", self.actor_high), ("actor_low", self.actor_low)) if self.dual_policy else (
            ("actor", self.actor_high),
        )
        for name, actor in actors:
            yield f"{name}.mean", actor.mean
            yield f"{name}.sigma", actor.sigma
        yield "retention_critic", self.retention_critic
        yield "retention_target", self.retention_target.net
        optional = (
            ("immediate_critic", self.immediate_critic),
            ("immediate_target", self.immediate_target.net if self.immediate_target else None),
            ("rnd_trainable", self.rnd_trainable),
            ("rnd_fixed", self.rnd_fixed),
            ("return_classifier", self.return_classifier),
        )
        for name, net in optional:
            if net is not None:
                yield name, net


class ReplayAgent(ABC):
    """Feeds episode rollouts into a replay buffer and trains every `train_every` requests once warm."""

    name = "agent"

    def __init__(self, config: TrainerConfig, buffer: ReplayBuffer):
        self.config = config
        self.buffer = buffer
        self.loss_log: List[TrainStepLosses] = []
        self.requests_seen = 0
        self.train_steps = 0

    # EpisodeObserver
    def session_opened(self, user_id: int, session_index: int, group: UserGroup, day: int) -> None:
        self.buffer.open_session(user_id, session_index, group, start_day=day)

    def request_done(self, user_id: int, state: UserState, action: ActionVector, step: EnvStep) -> None:
        self.buffer.record_request(user_id, state, action, step.feedback, step.next_state)
        if step.session_ended:
            self.buffer.close_session(user_id, step.returning_time)
        self.requests_seen += 1
        warm = len(self.buffer) >= max(self.config.min_fill, self.config.batch_size)
        if warm and self.requests_seen % self.config.train_every == 0:
            self.loss_log.append(self.train_step())

    def policy(self, explore: bool) -> Policy:
        return lambda states, groups: self.act_batch(states, groups, explore)

    @abstractmethod
    def act_batch(self, states: Sequence[UserState], groups: Sequence[UserGroup], explore: bool) -> List[ActionVector]:
        ...

    @abstractmethod
    def train_step(self) -> TrainStepLosses:
        ...

    @abstractmethod
    def state_dict(self) -> Dict[str, np.ndarray]:
        ...

    @abstractmethod
    def load_state_dict(self, tensors: Dict[str, np.ndarray]) -> None:
        ...

    def save(self, path: Union[str, Path]) -> Path:
        return save_checkpoint(path, self.state_dict())

    def load(self, path: Union[str, Path]) -> None:
        self.load_state_dict(load_checkpoint(path))

    def _sample(self) -> TransitionBatch:
        seed = int(self.sampling_rng.integers(2**63 - 1))
        return TransitionBatch.from_samples(self.buffer.sample_batch(self.config.batch_size, seed))

    @staticmethod
    def _checked(name: str, value: float, batch: TransitionBatch, step: int) -> float:
        if not np.isfinite(value):
            raise NumericalAbort(f"non-finite {name} ({value}) at train step {step}", batch=batch.as_arrays())
        return value


class RlurTrainer(ReplayAgent):
    name = "RLUR"

    def __init__(
        self,
        layout: StateLayout,
        n_actions: int,
        max_weight: float,
        hyper: RlurHyper,
        config: TrainerConfig,
        seed: int,
        *,
        dual_policy: bool = True,
        use_immediate: bool = True,
        use_rnd: bool = True,
        use_classifier: bool = True,
        name: Optional[str] = None,
    ):
        self.hyper = hyper.validate()
        self.layout = layout
        self.n_actions = int(n_actions)
        self.max_weight = float(max_weight)
        self.name = name or self.name
        self.normalize = use_classifier if hyper.reward_normalization is None else bool(hyper.reward_normalization)
        if self.normalize and not use_classifier:
            raise ConfigError("reward normalization needs the return classifier")
        if use_rnd and not use_immediate:
            raise ConfigError("intrinsic rewards feed the immediate critic; enable it to use RND")
        super().__init__(
            config.validate(), ReplayBuffer(config.buffer_capacity, hyper.gamma, reward_fn=self.retention_reward)
        )

        streams = SeedStreams(seed)
        self.init_rng = streams.generator("init")
        self.sampling_rng = streams.generator("sampling")
        self.noise_rng = streams.generator("action-noise")

        self.nets = self.create_networks(dual_policy, use_immediate, use_rnd, use_classifier)
        self.create_optimizers()
        self.threshold = ReturnThreshold(hyper.beta, hyper.t_beta_refresh, hyper.t_beta_window)
        self.session_data: Deque[Tuple[np.ndarray, float]] = deque(maxlen=hyper.t_beta_window)

    # -- construction --

    def create_networks(self, dual_policy: bool, use_immediate: bool, use_rnd: bool, use_classifier: bool) -> RlurNets:
        hidden = list(self.config.hidden)
        d, n = self.layout.total, self.n_actions

        actor_high = self.create_actor()
        actor_low = self.create_actor() if dual_policy else actor_high
        retention_critic = Mlp([d + n, *hidden, 1], rng=self.init_rng)
        nets = RlurNets(
            actor_high=actor_high,
            actor_low=actor_low,
            retention_critic=retention_critic,
            retention_target=TargetCopy(retention_critic, self.config.tau),
        )
        if use_immediate:
            nets.immediate_critic = Mlp([d + n, *hidden, 1], rng=self.init_rng)
            nets.immediate_target = TargetCopy(nets.immediate_critic, self.config.tau)
        if use_rnd:
            h, e = self.layout.history_dim, self.config.rnd_embedding_dim
            # consecutive draws from the init stream give the two embeddings independent weights
            nets.rnd_trainable = Mlp([h, *hidden, e], rng=self.init_rng)
            nets.rnd_fixed = Mlp([h, *hidden, e], rng=self.init_rng)
        if use_classifier:
            nets.return_classifier = Mlp(
                [session_feature_dim(self.layout), *hidden, 1], output_activation=Activation.SIGMOID, rng=self.init_rng
            )
        return nets

    def create_actor(self) -> GaussianActor:
        d, n = self.layout.total, self.n_actions
        hidden = list(self.config.hidden)
        floor = self.config.sigma_floor
        mean = Mlp([d, *hidden, n], Activation.SCALED_SIGMOID, output_scale=self.max_weight, rng=self.init_rng)
        sigma = Mlp([d, *hidden, n], Activation.SOFTPLUS, output_floor=floor, rng=self.init_rng)
        # start near init_sigma: softplus(b) + floor == init_sigma
        sigma.weights[-1] *= 0.01
        sigma.biases[-1][:] = math.log(math.expm1(self.config.init_sigma - floor))
        return GaussianActor(mean, sigma)

    def create_optimizers(self) -> None:
        cfg = self.config

        def adam(net: Optional[Mlp], lr: float) -> Optional[Adam]:
            return Adam(net.params, lr, cfg.beta1, cfg.beta2, cfg.eps) if net is not None else None

        high = adam(self.nets.actor_high.mean, cfg.actor_lr)
        low = adam(self.nets.actor_low.mean, cfg.actor_lr) if self.nets.dual_policy else high
        self.actor_optimizers: Dict[UserGroup, Adam] = {UserGroup.HIGH_ACTIVE: high, UserGroup.LOW_ACTIVE: low}
        self.retention_optimizer = adam(self.nets.retention_critic, cfg.critic_lr)
        self.immediate_optimizer = adam(self.nets.immediate_critic, cfg.critic_lr)
        self.rnd_optimizer = adam(self.nets.rnd_trainable, cfg.critic_lr)
        self.classifier_optimizer = adam(self.nets.return_classifier, cfg.critic_lr)

    # -- acting --

    def actor(self, group: UserGroup) -> GaussianActor:
        return self.nets.actor_high if group is UserGroup.HIGH_ACTIVE else self.nets.actor_low

    def act(
        self, state: UserState, group: UserGroup, explore: bool, seed: Optional[int] = None
    ) -> ActionVector:
        mu, sigma = self.actor(group).forward(state.features())
        values = mu.copy()
        if explore:
            rng = self.noise_rng if seed is None else np.random.default_rng(seed)
            values = np.clip(mu + sigma * rng.standard_normal(mu.shape), 0.0, self.max_weight)
        return ActionVector(values, mu, sigma)

    def act_batch(self, states: Sequence[UserState], groups: Sequence[UserGroup], explore: bool) -> List[ActionVector]:
        features = np.stack([s.features() for s in states])
        group_of = np.array([g is UserGroup.HIGH_ACTIVE for g in groups])
        actions: List[Optional[ActionVector]] = [None] * len(states)
        for group in GROUPS:
            idx = np.flatnonzero(group_of if group is UserGroup.HIGH_ACTIVE else ~group_of)
            if idx.size == 0:
                continue
            mu, sigma = self.actor(group).forward(features[idx])
            values = mu.copy()
            if explore:
                values = np.clip(mu + sigma * self.noise_rng.standard_normal(mu.shape), 0.0, self.max_weight)
            for row, i in enumerate(idx):
                actions[i] = ActionVector(values[row], mu[row], sigma[row])
        return actions

    def policy_means(self, states: np.ndarray, high_active: np.ndarray) -> np.ndarray:
        """Mean-head action of each row's own group actor."""
        if not self.nets.dual_policy:
            return self.nets.actor_high.mean.forward(states)
        out = np.empty((states.shape[0], self.n_actions))
        if high_active.any():
            out[high_active] = self.nets.actor_high.mean.forward(states[high_active])
        if (~high_active).any():
            out[~high_active] = self.nets.actor_low.mean.forward(states[~high_active])
        return out

    # -- rewards --

    def retention_reward(self, session: SessionRecord, returning_time: float) -> float:
        """Terminal reward of a closing session; also feeds T_beta and the classifier's data."""
        if self.nets.return_classifier is None:
            return float(returning_time)
        self.threshold.observe(returning_time)
        features = session_features(session)
        self.session_data.append((features, float(returning_time)))
        if not self.normalize:
            return float(returning_time)
        predicted = float(self.nets.return_classifier.forward(features)[0])
        return normalized_retention_reward(returning_time, predicted, self.threshold.value, self.hyper.alpha)

    def intrinsic_rewards(self, states: np.ndarray) -> np.ndarray:
        if self.nets.rnd_trainable is None:
            return np.zeros(states.shape[0])
        history = states[:, self.layout.history_slice]
        return rnd_intrinsic(self.nets.rnd_trainable, self.nets.rnd_fixed, history)

    # -- losses --

    def retention_td_loss(self, batch: TransitionBatch) -> Tuple[float, List[np.ndarray], np.ndarray]:
        next_actions = self.policy_means(batch.next_states, batch.high_active)
        next_q = self.nets.retention_target.forward(np.hstack([batch.next_states, next_actions]))[:, 0]
        targets = retention_targets(batch.retention_reward, batch.gamma_it, next_q)
        loss, grads = td_regression(self.nets.retention_critic, np.hstack([batch.states, batch.actions]), targets)
        return loss, grads, targets

    def immediate_td_loss(self, batch: TransitionBatch) -> Tuple[float, List[np.ndarray], np.ndarray]:
        if self.nets.immediate_critic is None:
            raise ConfigError(f"{self.name} has no immediate critic")
        reward = self.hyper.immediate_reward_scale * batch.immediate_reward + batch.intrinsic_reward
        next_actions = self.policy_means(batch.next_states, batch.high_active)
        next_q = self.nets.immediate_target.forward(np.hstack([batch.next_states, next_actions]))[:, 0]
        targets = reward + self.hyper.gamma * next_q
        loss, grads = td_regression(self.nets.immediate_critic, np.hstack([batch.states, batch.actions]), targets)
        return loss, grads, targets

    def regularization_weights(self, batch: TransitionBatch, group: UserGroup) -> np.ndarray:
        if self.hyper.actor_regularization != "soft":
            return np.ones(len(batch))
        mu, sigma = self.actor(group).forward(batch.states)
        log_p = gaussian_log_density(batch.actions, mu, sigma)
        log_pb = gaussian_log_density(batch.actions, batch.behavior_mu, batch.behavior_sigma)
        return soft_regularization_weight(
            log_p, log_pb, self.hyper.reg_lambda, self.hyper.soft_reg_direction, self.hyper.soft_reg_log_cap
        )

    def actor_loss(self, batch: TransitionBatch, group: UserGroup) -> Tuple[float, List[np.ndarray], np.ndarray]:
        """Weighted critic difference at the actor's mean action; only the mean head gets gradients."""
        hyper = self.hyper
        actor = self.actor(group)
        states = batch.states
        size, d = states.shape
        weights = self.regularization_weights(batch, group)

        mu, mean_cache = actor.mean.forward_cached(states)
        inputs = np.hstack([states, mu])
        q_t, cache_t = self.nets.retention_critic.forward_cached(inputs)
        per_sample = hyper.lambda_T * q_t[:, 0]
        _, dx = self.nets.retention_critic.backward(inputs, (weights * hyper.lambda_T / size)[:, None], cache_t)
        d_action = dx[:, d:]
        if self.nets.immediate_critic is not None:
            q_i, cache_i = self.nets.immediate_critic.forward_cached(inputs)
            per_sample = per_sample - hyper.lambda_I * q_i[:, 0]
            _, dx = self.nets.immediate_critic.backward(inputs, (-weights * hyper.lambda_I / size)[:, None], cache_i)
            d_action = d_action + dx[:, d:]
        loss = float(np.mean(weights * per_sample))

        if hyper.actor_regularization == "behavior_cloning":
            diff = mu - batch.actions
            loss += hyper.bc_weight * float(np.mean(np.sum(np.square(diff), axis=1)))
            d_action = d_action + 2.0 * hyper.bc_weight * diff / size

        grads, _ = actor.mean.backward(states, d_action, mean_cache)
        return loss, grads, weights

    # -- training --

    def train_step(self) -> TrainStepLosses:
        """Classifier, RND, retention critic, immediate critic, actors, then target updates."""
        batch = self._sample()
        self.train_steps += 1
        step = self.train_steps
        losses = TrainStepLosses(step=step)
        try:
            if self.nets.return_classifier is not None and self.session_data:
                take = min(self.config.batch_size, len(self.session_data))
                idx = self.sampling_rng.choice(len(self.session_data), size=take, replace=False)
                features = np.stack([self.session_data[i][0] for i in idx])
                times = np.array([self.session_data[i][1] for i in idx])
                loss, grads = classifier_loss(self.nets.return_classifier, features, times, self.threshold.value)
                losses.loss_cls = self._checked("classifier loss", loss, batch, step)
                self.classifier_optimizer.step(grads)

            if self.nets.rnd_trainable is not None:
                batch.intrinsic_reward = self.intrinsic_rewards(batch.states)
                history = batch.states[:, self.layout.history_slice]
                loss, grads = rnd_loss(self.nets.rnd_trainable, self.nets.rnd_fixed, history)
                losses.loss_rnd = self._checked("RND loss", loss, batch, step)
                self.rnd_optimizer.step(grads)

            loss, grads, _ = self.retention_td_loss(batch)
            losses.loss_T = self._checked("retention critic loss", loss, batch, step)
            self.retention_optimizer.step(grads)

            if self.nets.immediate_critic is not None:
                loss, grads, _ = self.immediate_td_loss(batch)
                losses.loss_I = self._checked("immediate critic loss", loss, batch, step)
                self.immediate_optimizer.step(grads)

            weights = []
            for group in GROUPS if self.nets.dual_policy else (UserGroup.HIGH_ACTIVE,):
                sub = batch.select(batch.group_mask(group)) if self.nets.dual_policy else batch
                if len(sub) == 0:
                    logger.warning("train step %d: no %s samples in batch, skipping its actor", step, group.value)
                    continue
                loss, grads, w = self.actor_loss(sub, group)
                self._checked(f"{group.value} actor loss", loss, batch, step)
                self.actor_optimizers[group].step(grads)
                weights.append(w)
                if group is UserGroup.HIGH_ACTIVE:
                    losses.actor_loss_high = loss
                else:
                    losses.actor_loss_low = loss
            if not self.nets.dual_policy:
                losses.actor_loss_low = losses.actor_loss_high
            if weights:
                losses.mean_w = float(np.mean(np.concatenate(weights)))

            self.nets.retention_target.soft_update(self.nets.retention_critic)
            if self.nets.immediate_target is not None:
                self.nets.immediate_target.soft_update(self.nets.immediate_critic)
        except NumericalAbort as exc:
            if exc.batch is None:
                exc.batch = batch.as_arrays()
            raise
        return losses

    # -- checkpoints --

    def state_dict(self) -> Dict[str, np.ndarray]:
        tensors: Dict[str, np.ndarray] = {}
        for name, net in self.nets.named():
            tensors.update(net.state_dict(name))
        if self.threshold.value is not None:
            tensors["meta.t_beta"] = np.array(self.threshold.value)
        return tensors

    def load_state_dict(self, tensors: Dict[str, np.ndarray]) -> None:
        for name, net in self.nets.named():
            net.load_state_dict(tensors, name)
        if "meta.t_beta" in tensors:
            self.threshold.value = float(tensors["meta.t_beta"])
