"""Comparison algorithms: static-weight CEM search, TD3, and the retention-critic-only RLUR variants."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from retention.approx import Activation, Adam, Mlp, TargetCopy
from retention.core import (
    ActionVector,
    ConfigError,
    ReplayBuffer,
    SeedStreams,
    StateLayout,
    TransitionBatch,
    UserGroup,
    UserState,
)
from retention.rlur import ReplayAgent, RlurHyper, RlurTrainer, TrainerConfig, TrainStepLosses, td_regression

logger = logging.getLogger("retention.baselines")


# -- cross-entropy method --

@dataclass
class CemConfig:
    population_size: int = 32
    elite_fraction: float = 0.25
    smoothing: float = 0.8
    # None starts at half the weight range
    init_std: Optional[float] = None
    std_floor: float = 1e-3
    eval_users: int = 25

    def validate(self) -> "CemConfig":
        problems = []
        if self.population_size < 2:
            problems.append(f"population_size must be >= 2, got {self.population_size}")
        if not 0.0 < self.elite_fraction <= 1.0:
            problems.append(f"elite_fraction must lie in (0, 1], got {self.elite_fraction}")
        if not 0.0 <= self.smoothing <= 1.0:
            problems.append(f"smoothing must lie in [0, 1], got {self.smoothing}")
        if self.init_std is not None and self.init_std <= 0:
            problems.append(f"init_std must be positive, got {self.init_std}")
        if self.std_floor <= 0 or self.eval_users < 1:
            problems.append("std_floor must be positive and eval_users >= 1")
        if problems:
            raise ConfigError("invalid CemConfig: " + "; ".join(problems))
        return self


@dataclass
class CemState:
    mean: np.ndarray
    stddev: np.ndarray
    population_size: int = 32
    elite_fraction: float = 0.25
    smoothing: float = 0.8
    iteration: int = 0

    @classmethod
    def initial(cls, n_actions: int, max_weight: float, config: CemConfig) -> "CemState":
        config.validate()
        std = max_weight / 2.0 if config.init_std is None else config.init_std
        return cls(
            mean=np.full(n_actions, max_weight / 2.0),
            stddev=np.full(n_actions, std),
            population_size=config.population_size,
            elite_fraction=config.elite_fraction,
            smoothing=config.smoothing,
        )

    @property
    def elite_count(self) -> int:
        return max(1, math.ceil(self.elite_fraction * self.population_size))


def cem_iterate(
    state: CemState,
    evaluate: Callable[[np.ndarray], float],
    rng: np.random.Generator,
    max_weight: float,
    std_floor: float = 1e-3,
) -> CemState:
    """One sample, evaluate, refit round; `evaluate` returns a fitness to maximize."""
    if state.population_size < 2:
        raise ConfigError(f"CEM needs a population of at least 2, got {state.population_size}")
    samples = rng.normal(state.mean, state.stddev, size=(state.population_size, state.mean.size))
    samples = np.clip(samples, 0.0, max_weight)
    fitness = np.array([evaluate(a) for a in samples], dtype=np.float64)

    elites = samples[np.argsort(-fitness, kind="stable")[: state.elite_count]]
    eta = state.smoothing
    mean = eta * elites.mean(axis=0) + (1.0 - eta) * state.mean
    stddev = np.maximum(eta * elites.std(axis=0) + (1.0 - eta) * state.stddev, std_floor)
    logger.debug(
        "CEM iteration %d: best fitness %.4f, elite mean fitness %.4f",
        state.iteration + 1, fitness.max(), np.sort(fitness)[-state.elite_count:].mean(),
    )
    return replace(state, mean=mean, stddev=stddev, iteration=state.iteration + 1)


def constant_policy(weights: np.ndarray) -> Callable[[Sequence[UserState], Sequence[UserGroup]], List[ActionVector]]:
    action = ActionVector.constant(weights)
    return lambda states, groups: [action] * len(states)


# -- TD3 --

@dataclass
class Td3Config:
    gamma: float = 0.95
    # fractions of the maximum weight C
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    exploration_noise: float = 0.1
    policy_delay: int = 2
    twin: bool = True
    immediate_reward_scale: float = 0.01

    def validate(self) -> "Td3Config":
        problems = []
        if not 0.0 <= self.gamma < 1.0:
            problems.append(f"gamma must lie in [0, 1), got {self.gamma}")
        if min(self.policy_noise, self.noise_clip, self.exploration_noise) < 0:
            problems.append("noise scales must be non-negative")
        if self.policy_delay < 1:
            problems.append(f"policy_delay must be >= 1, got {self.policy_delay}")
        if self.immediate_reward_scale < 0:
            problems.append(f"immediate_reward_scale must be non-negative, got {self.immediate_reward_scale}")
        if problems:
            raise ConfigError("invalid Td3Config: " + "; ".join(problems))
        return self


class Td3Trainer(ReplayAgent):
    """Twin critics, target-policy smoothing and delayed actor updates on the per-request reward.

    The reward is ``scale * immediate - returning_time`` (returning time only on
    the session's last request), discounted uniformly by gamma.
    """

    name = "TD3"

    def __init__(
        self,
        layout: StateLayout,
        n_actions: int,
        max_weight: float,
        td3: Td3Config,
        config: TrainerConfig,
        seed: int,
    ):
        self.td3 = td3.validate()
        self.layout = layout
        self.n_actions = int(n_actions)
        self.max_weight = float(max_weight)
        super().__init__(config.validate(), ReplayBuffer(config.buffer_capacity, td3.gamma))

        streams = SeedStreams(seed)
        self.init_rng = streams.generator("init")
        self.sampling_rng = streams.generator("sampling")
        self.noise_rng = streams.generator("action-noise")
        self.create_networks()

    def create_networks(self) -> None:
        cfg = self.config
        d, n = self.layout.total, self.n_actions
        hidden = list(cfg.hidden)
        self.actor = Mlp([d, *hidden, n], Activation.SCALED_SIGMOID, output_scale=self.max_weight, rng=self.init_rng)
        self.actor_target = TargetCopy(self.actor, cfg.tau)
        self.critic1 = Mlp([d + n, *hidden, 1], rng=self.init_rng)
        self.critic1_target = TargetCopy(self.critic1, cfg.tau)
        self.critic2: Optional[Mlp] = None
        self.critic2_target: Optional[TargetCopy] = None
        if self.td3.twin:
            self.critic2 = Mlp([d + n, *hidden, 1], rng=self.init_rng)
            self.critic2_target = TargetCopy(self.critic2, cfg.tau)

        self.actor_optimizer = Adam(self.actor.params, cfg.actor_lr, cfg.beta1, cfg.beta2, cfg.eps)
        self.critic1_optimizer = Adam(self.critic1.params, cfg.critic_lr, cfg.beta1, cfg.beta2, cfg.eps)
        self.critic2_optimizer = (
            Adam(self.critic2.params, cfg.critic_lr, cfg.beta1, cfg.beta2, cfg.eps) if self.critic2 else None
        )

    def named(self) -> List[Tuple[str, Mlp]]:
        nets = [("actor", self.actor), ("actor_target", self.actor_target.net),
                ("critic1", self.critic1), ("critic1_target", self.critic1_target.net)]
        if self.critic2 is not None:
            nets += [("critic2", self.critic2), ("critic2_target", self.critic2_target.net)]
        return nets

    def act_batch(self, states: Sequence[UserState], groups: Sequence[UserGroup], explore: bool) -> List[ActionVector]:
        mu = self.actor.forward(np.stack([s.features() for s in states]))
        sigma = max(self.td3.exploration_noise * self.max_weight, self.config.sigma_floor)
        values = mu
        if explore:
            values = np.clip(mu + sigma * self.noise_rng.standard_normal(mu.shape), 0.0, self.max_weight)
        return [ActionVector(values[i], mu[i], np.full(self.n_actions, sigma)) for i in range(len(states))]

    def rewards(self, batch: TransitionBatch) -> np.ndarray:
        return self.td3.immediate_reward_scale * batch.immediate_reward - batch.retention_reward

    def td_targets(self, batch: TransitionBatch, noise: Optional[np.ndarray] = None) -> np.ndarray:
        """r + gamma * min_i Q_i'(s', smoothed target action); `noise` overrides the sampled smoothing noise."""
        C = self.max_weight
        next_mu = self.actor_target.forward(batch.next_states)
        if noise is None:
            noise = self.td3.policy_noise * C * self.noise_rng.standard_normal(next_mu.shape)
        noise = np.clip(noise, -self.td3.noise_clip * C, self.td3.noise_clip * C)
        next_inputs = np.hstack([batch.next_states, np.clip(next_mu + noise, 0.0, C)])
        next_q = self.critic1_target.forward(next_inputs)[:, 0]
        if self.critic2_target is not None:
            next_q = np.minimum(next_q, self.critic2_target.forward(next_inputs)[:, 0])
        return self.rewards(batch) + self.td3.gamma * next_q

    def critic_update(self, batch: TransitionBatch, noise: Optional[np.ndarray] = None) -> Tuple[float, float]:
        targets = self.td_targets(batch, noise)
        inputs = np.hstack([batch.states, batch.actions])
        loss1, grads = td_regression(self.critic1, inputs, targets)
        self.critic1_optimizer.step(grads)
        loss2 = math.nan
        if self.critic2 is not None:
            loss2, grads = td_regression(self.critic2, inputs, targets)
            self.critic2_optimizer.step(grads)
        return loss1, loss2

    def actor_loss(self, batch: TransitionBatch) -> Tuple[float, List[np.ndarray]]:
        """-mean Q1(s, mu(s)); gradients reach the actor only."""
        states = batch.states
        size, d = states.shape
        mu, cache = self.actor.forward_cached(states)
        inputs = np.hstack([states, mu])
        q, q_cache = self.critic1.forward_cached(inputs)
        _, dx = self.critic1.backward(inputs, np.full((size, 1), -1.0 / size), q_cache)
        grads, _ = self.actor.backward(states, dx[:, d:], cache)
        return -float(np.mean(q[:, 0])), grads

    def train_step(self) -> TrainStepLosses:
        batch = self._sample()
        self.train_steps += 1
        step = self.train_steps
        losses = TrainStepLosses(step=step)

        loss1, loss2 = self.critic_update(batch)
        losses.loss_T = self._checked("critic1 loss", loss1, batch, step)
        if self.critic2 is not None:
            losses.loss_I = self._checked("critic2 loss", loss2, batch, step)

        if step % self.td3.policy_delay == 0:
            loss, grads = self.actor_loss(batch)
            self._checked("actor loss", loss, batch, step)
            self.actor_optimizer.step(grads)
            losses.actor_loss_high = losses.actor_loss_low = loss
            self.actor_target.soft_update(self.actor)
            self.critic1_target.soft_update(self.critic1)
            if self.critic2 is not None:
                self.critic2_target.soft_update(self.critic2)
        return losses

    def state_dict(self) -> Dict[str, np.ndarray]:
        tensors: Dict[str, np.ndarray] = {}
        for name, net in self.named():
            tensors.update(net.state_dict(name))
        return tensors

    def load_state_dict(self, tensors: Dict[str, np.ndarray]) -> None:
        for name, net in self.named():
            net.load_state_dict(tensors, name)


# -- retention-critic-only variants --

NAIVE_NAMES = {0.0: "RLUR_NAIVE_G0", 0.9: "RLUR_NAIVE_G09"}


def rlur_naive(
    gamma: float,
    layout: StateLayout,
    n_actions: int,
    max_weight: float,
    hyper: RlurHyper,
    config: TrainerConfig,
    seed: int,
) -> RlurTrainer:
    """Single-policy trainer with only the retention critic on the raw returning time."""
    naive_hyper = replace(hyper, gamma=gamma, reward_normalization=False, actor_regularization="none")
    return RlurTrainer(
        layout,
        n_actions,
        max_weight,
        naive_hyper,
        config,
        seed,
        dual_policy=False,
        use_immediate=False,
        use_rnd=False,
        use_classifier=False,
        name=NAIVE_NAMES.get(float(gamma), f"RLUR_NAIVE_G{gamma:g}"),
    )
