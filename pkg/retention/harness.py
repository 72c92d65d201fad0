"""Seeded experiment runs, multi-run comparison tables and the two-session value check."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from retention.baselines import CemState, Td3Trainer, cem_iterate, constant_policy, rlur_naive
from retention.config import Algorithm, ExperimentConfig, save_json
from retention.core import (
    ConfigError,
    ImmediateFeedback,
    NumericalAbort,
    RetentionError,
    SeedStreams,
    StateLayout,
    TransitionBatch,
    UserGroup,
    UserState,
)
from retention.rlur import ReplayAgent, RlurHyper, RlurTrainer, TrainerConfig, write_loss_csv
from retention.simenv import EpisodeMetrics, run_episode, state_layout, write_metrics_csv

logger = logging.getLogger("retention.harness")

OUTPUT_ROOT = os.getenv("RETENTION_OUTPUT_ROOT", "runs")

TOY_TOLERANCE = 1e-2

# relative gains RLUR must show over CEM, and the returning-day chains that must hold (best first)
MIN_RETURN_DAY_GAIN = 0.03
MIN_DAY1_GAIN = 0.02
RETURN_DAY_ORDERINGS: Tuple[Tuple[str, ...], ...] = (
    ("RLUR", "RLUR_NAIVE_G09", "RLUR_NAIVE_G0"),
    ("RLUR", "TD3", "CEM"),
)


@dataclass
class ResultRow:
    algorithm: str
    seed: int
    avg_returning_day: float
    day1_retention: float
    episodes: int
    day7_retention: float = math.nan
    mean_immediate_reward: float = math.nan
    wall_clock_s: float = field(default=0.0, compare=False)


def output_dir_for(config: ExperimentConfig) -> Path:
    if config.output_dir:
        return Path(config.output_dir)
    return Path(OUTPUT_ROOT) / config.run_name


def build_agent(config: ExperimentConfig) -> Optional[ReplayAgent]:
    """The trainer for an RL algorithm, or None for CEM."""
    sim = config.sim
    layout = state_layout(sim)
    seed = SeedStreams(config.seed).child_seed("agent")
    if config.algorithm is Algorithm.CEM:
        return None
    if config.algorithm is Algorithm.TD3:
        return Td3Trainer(layout, sim.n_channels, sim.max_weight, config.td3, config.trainer, seed)
    if config.algorithm is Algorithm.RLUR_NAIVE_G0:
        return rlur_naive(0.0, layout, sim.n_channels, sim.max_weight, config.rlur, config.trainer, seed)
    if config.algorithm is Algorithm.RLUR_NAIVE_G09:
        return rlur_naive(0.9, layout, sim.n_channels, sim.max_weight, config.rlur, config.trainer, seed)
    return RlurTrainer(layout, sim.n_channels, sim.max_weight, config.rlur, config.trainer, seed)


def summarize(config: ExperimentConfig, metrics: Sequence[EpisodeMetrics], wall_clock_s: float) -> ResultRow:
    tail = pd.DataFrame([m.as_row() for m in metrics]).tail(config.window)
    return ResultRow(
        algorithm=config.algorithm.value,
        seed=config.seed,
        avg_returning_day=float(tail["avg_return_day"].mean()),
        day1_retention=float(tail["day1_retention"].mean()),
        episodes=len(metrics),
        day7_retention=float(tail["day7_retention"].mean()),
        mean_immediate_reward=float(tail["mean_immediate_reward"].mean()),
        wall_clock_s=wall_clock_s,
    )


def write_abort_bundle(out_dir: Path, exc: NumericalAbort, step: int, digest: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "abort.json").write_text(
        json.dumps({"message": str(exc), "step": step, "config_digest": digest}, indent=2) + "\n"
    )
    if exc.batch:
        np.savez(out_dir / "abort_batch.npz", **exc.batch)


def _train_cem(config: ExperimentConfig, streams: SeedStreams) -> List[EpisodeMetrics]:
    sim, cem = config.sim, config.cem
    state = CemState.initial(sim.n_channels, sim.max_weight, cem)
    rng = streams.generator("cem")
    metrics = []
    for episode in range(config.episodes):
        eval_seed = streams.child_seed("cem-eval", episode)

        def fitness(weights: np.ndarray) -> float:
            result = run_episode(constant_policy(weights), sim, eval_seed, users=cem.eval_users)
            return -result.metrics.avg_return_day

        state = cem_iterate(state, fitness, rng, sim.max_weight, cem.std_floor)
        result = run_episode(constant_policy(state.mean), sim, streams.child_seed("eval", episode), episode=episode)
        metrics.append(result.metrics)
        logger.info(
            "episode %d: avg_return_day=%.4f day1_retention=%.4f",
            episode, result.metrics.avg_return_day, result.metrics.day1_retention,
        )
    return metrics


def _train_agent(config: ExperimentConfig, agent: ReplayAgent, streams: SeedStreams) -> List[EpisodeMetrics]:
    metrics = []
    for episode in range(config.episodes):
        run_episode(agent.policy(explore=True), config.sim, streams.child_seed("train", episode), observer=agent,
                    episode=episode)
        result = run_episode(agent.policy(explore=False), config.sim, streams.child_seed("eval", episode),
                             episode=episode)
        metrics.append(result.metrics)
        logger.info(
            "episode %d: avg_return_day=%.4f day1_retention=%.4f buffer=%d train_steps=%d",
            episode, result.metrics.avg_return_day, result.metrics.day1_retention, len(agent.buffer),
            agent.train_steps,
        )
    return metrics


def run(config: ExperimentConfig) -> ResultRow:
    """Train one algorithm, evaluate every episode without exploration, and write the run's artifacts."""
    config.validate()
    out_dir = output_dir_for(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_json(config, out_dir / "config.json")
    digest = config.digest()
    logger.info("run %s starting (config %s) -> %s", config.run_name, digest, out_dir)

    started = time.perf_counter()
    streams = SeedStreams(config.seed)
    agent = build_agent(config)
    try:
        if agent is None:
            metrics = _train_cem(config, streams)
        else:
            metrics = _train_agent(config, agent, streams)
    except NumericalAbort as exc:
        step = agent.train_steps if agent is not None else 0
        logger.error("run %s aborted at train step %d: %s", config.run_name, step, exc)
        write_abort_bundle(out_dir, exc, step, digest)
        if agent is not None:
            write_loss_csv(agent.loss_log, out_dir / "losses.csv")
        raise

    write_metrics_csv(metrics, out_dir / "metrics.csv")
    if agent is not None:
        write_loss_csv(agent.loss_log, out_dir / "losses.csv")
        agent.save(out_dir / "checkpoint.npz")

    row = summarize(config, metrics, time.perf_counter() - started)
    (out_dir / "result.json").write_text(json.dumps(asdict(row), indent=2) + "\n")
    logger.info(
        "run %s done in %.1fs: avg_returning_day=%.4f day1_retention=%.4f",
        config.run_name, row.wall_clock_s, row.avg_returning_day, row.day1_retention,
    )
    return row


@dataclass
class Comparison:
    runs: pd.DataFrame
    table: pd.DataFrame
    partial: bool
    failures: List[str]
    acceptance: Optional["AcceptanceReport"] = None


@dataclass
class AcceptanceReport:
    orderings: Dict[str, bool]
    return_day_gain: float
    day1_gain: float
    missing: List[str]

    @property
    def passed(self) -> bool:
        return (
            not self.missing
            and all(self.orderings.values())
            and self.return_day_gain >= MIN_RETURN_DAY_GAIN
            and self.day1_gain >= MIN_DAY1_GAIN
        )

    def to_dict(self) -> Dict[str, object]:
        return {
            "passed": self.passed,
            "orderings": self.orderings,
            "return_day_gain_vs_cem": self.return_day_gain,
            "day1_gain_vs_cem": self.day1_gain,
            "min_return_day_gain": MIN_RETURN_DAY_GAIN,
            "min_day1_gain": MIN_DAY1_GAIN,
            "missing": self.missing,
        }


def check_acceptance(table: pd.DataFrame) -> AcceptanceReport:
    """Returning-day orderings and RLUR's relative gains over CEM, from per-algorithm means."""
    means = table.set_index("algorithm")
    required = sorted({name for chain in RETURN_DAY_ORDERINGS for name in chain})
    missing = [name for name in required if name not in means.index]
    orderings: Dict[str, bool] = {}
    for chain in RETURN_DAY_ORDERINGS:
        holds = not any(name in missing for name in chain)
        if holds:
            days = [means.at[name, "avg_returning_day_mean"] for name in chain]
            holds = all(a < b for a, b in zip(days, days[1:]))
        orderings[" < ".join(chain)] = bool(holds)

    return_gain = day1_gain = math.nan
    if "RLUR" in means.index and "CEM" in means.index:
        rlur, cem = means.loc["RLUR"], means.loc["CEM"]
        return_gain = float((cem["avg_returning_day_mean"] - rlur["avg_returning_day_mean"]) / cem["avg_returning_day_mean"])
        day1_gain = float((rlur["day1_retention_mean"] - cem["day1_retention_mean"]) / cem["day1_retention_mean"])
    return AcceptanceReport(orderings=orderings, return_day_gain=return_gain, day1_gain=day1_gain, missing=missing)


def comparison_table(rows: Sequence[ResultRow]) -> pd.DataFrame:
    """Per-algorithm mean and std over seeds, ranked per metric (1 = best)."""
    frame = pd.DataFrame([asdict(r) for r in rows])
    table = frame.groupby("algorithm", sort=True).agg(
        seeds=("seed", "count"),
        avg_returning_day_mean=("avg_returning_day", "mean"),
        avg_returning_day_std=("avg_returning_day", "std"),
        day1_retention_mean=("day1_retention", "mean"),
        day1_retention_std=("day1_retention", "std"),
    )
    table["avg_returning_day_rank"] = table["avg_returning_day_mean"].rank(method="min", ascending=True).astype(int)
    table["day1_retention_rank"] = table["day1_retention_mean"].rank(method="min", ascending=False).astype(int)
    table = table.reset_index().sort_values(["avg_returning_day_rank", "algorithm"], kind="mergesort")
    return table.reset_index(drop=True)


def compare(
    configs: Sequence[ExperimentConfig],
    workers: int = 1,
    output_dir: Optional[Union[str, Path]] = None,
) -> Comparison:
    """Run every config, tolerating individual failures, and write the grouped comparison."""
    if len(configs) < 2:
        raise ConfigError(f"compare needs at least two configs, got {len(configs)}")
    for config in configs:
        config.validate()
    out_dir = Path(output_dir) if output_dir is not None else Path(OUTPUT_ROOT) / "comparison"

    rows: List[ResultRow] = []
    failures: List[str] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = [(config, executor.submit(run, config)) for config in configs]
            for config, future in futures:
                try:
                    rows.append(future.result())
                except Exception:
                    logger.exception("run %s failed; continuing with the remaining runs", config.run_name)
                    failures.append(config.run_name)
    else:
        for config in configs:
            try:
                rows.append(run(config))
            except Exception:
                logger.exception("run %s failed; continuing with the remaining runs", config.run_name)
                failures.append(config.run_name)

    if not rows:
        raise RetentionError(f"all {len(configs)} runs failed: {failures}")
    runs = pd.DataFrame([asdict(r) for r in rows])
    table = comparison_table(rows)
    partial = bool(failures)
    # judged only when every algorithm of the orderings was requested
    requested = {Algorithm(c.algorithm).value for c in configs}
    acceptance = None
    if all(name in requested for chain in RETURN_DAY_ORDERINGS for name in chain):
        acceptance = check_acceptance(table)

    out_dir.mkdir(parents=True, exist_ok=True)
    runs.drop(columns=["wall_clock_s"]).to_csv(out_dir / "runs.csv", index=False, float_format="%.17g")
    table.to_csv(out_dir / "comparison.csv", index=False, float_format="%.17g")
    summary = {
        "partial": partial,
        "failed_runs": failures,
        "ranking_by_returning_day": table["algorithm"].tolist(),
        "algorithms": json.loads(table.to_json(orient="records")),
        "acceptance": acceptance.to_dict() if acceptance is not None else None,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if partial:
        logger.warning("comparison is partial: %d of %d runs failed", len(failures), len(configs))
    if acceptance is not None:
        log = logger.info if acceptance.passed else logger.error
        log(
            "acceptance %s: orderings=%s return_day_gain=%.4f day1_gain=%.4f missing=%s",
            "passed" if acceptance.passed else "FAILED", acceptance.orderings,
            acceptance.return_day_gain, acceptance.day1_gain, acceptance.missing,
        )
    return Comparison(runs=runs, table=table, partial=partial, failures=failures, acceptance=acceptance)


# -- two-session value check --

class ToyMdp:
    """Deterministic chain: two requests in session one, one in session two, then an absorbing state.

    States are one-hot in the profile block; the absorbing state loops on
    itself with zero returning time.
    """

    layout = StateLayout(profile_dim=4, history_dim=1, context_dim=2, candidate_dim=1)
    n_actions = 2
    max_weight = 1.0

    def __init__(self, first_return: float = 2.0, second_return: float = 4.0):
        self.first_return = float(first_return)
        self.second_return = float(second_return)
        self.states = [self._state(i) for i in range(4)]

    @staticmethod
    def _state(index: int) -> UserState:
        profile = np.zeros(4)
        profile[index] = 1.0
        return UserState(profile=profile, history=np.zeros(1), context=np.array([1.0, 0.0]),
                         candidate_summary=np.zeros(1))

    def expected_value(self, gamma: float) -> float:
        return self.first_return + gamma * self.second_return

    def fill(self, agent: ReplayAgent, act) -> None:
        """Record the three sessions into the agent's buffer; `act` maps a state to an ActionVector."""
        s = self.states
        buffer, none = agent.buffer, ImmediateFeedback(0.0, 0)
        sessions = (
            ([(s[0], s[1]), (s[1], s[2])], self.first_return),
            ([(s[2], s[3])], self.second_return),
            ([(s[3], s[3])], 0.0),
        )
        for index, (requests, returning_time) in enumerate(sessions):
            buffer.open_session(0, index, UserGroup.HIGH_ACTIVE)
            for state, next_state in requests:
                buffer.record_request(0, state, act(state), none, next_state)
            buffer.close_session(0, returning_time)


@dataclass
class ToyReport:
    gamma: float
    expected: float
    estimate: float
    tolerance: float = TOY_TOLERANCE

    @property
    def error(self) -> float:
        return abs(self.estimate - self.expected)

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


# (learning rate, steps) phases for the toy critic fit
TOY_SCHEDULE: Tuple[Tuple[float, int], ...] = ((0.05, 2000), (0.005, 2000), (0.0005, 2000))


def toy_mdp_check(
    gamma: float = 0.9,
    first_return: float = 2.0,
    second_return: float = 4.0,
    seed: int = 0,
) -> ToyReport:
    """Fit the retention critic on the toy chain under a fixed policy and compare Q at the first request."""
    mdp = ToyMdp(first_return, second_return)
    hyper = RlurHyper(gamma=gamma)
    trainer_config = TrainerConfig(hidden=(), tau=0.1, batch_size=4, min_fill=0, buffer_capacity=16)
    trainer = rlur_naive(gamma, mdp.layout, mdp.n_actions, mdp.max_weight, hyper, trainer_config, seed)
    mdp.fill(trainer, lambda state: trainer.act(state, UserGroup.HIGH_ACTIVE, explore=False))
    batch = TransitionBatch.from_samples(trainer.buffer.samples)

    for lr, steps in TOY_SCHEDULE:
        trainer.retention_optimizer.lr = lr
        for _ in range(steps):
            _, grads, _ = trainer.retention_td_loss(batch)
            trainer.retention_optimizer.step(grads)
            trainer.nets.retention_target.soft_update(trainer.nets.retention_critic)

    first = mdp.states[0].features()
    action = trainer.policy_means(first[None, :], np.array([True]))[0]
    estimate = float(trainer.nets.retention_critic.forward(np.concatenate([first, action]))[0])
    report = ToyReport(gamma=gamma, expected=mdp.expected_value(gamma), estimate=estimate)
    log = logger.info if report.passed else logger.error
    log("toy check gamma=%.3f: Q=%.5f expected=%.5f error=%.2e", gamma, estimate, report.expected, report.error)
    return report
