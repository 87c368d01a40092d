"""Desk-scale PPO with GAE for the trainable search policy.

The trainable policy is a softmax-linear head over three decisions per
turn (search the next bridge, repeat the last search, answer) with a
separate linear value head. Episodes are position sequences that
interleave agent decisions with environment-injected observation
positions; observation positions are masked out of the policy loss, so
the clipped surrogate is averaged over agent decisions only and masked
positions contribute exactly zero loss and gradient.

Rewards come from the step-wise reward engine: each search decision
carries its step's overall reward, observation positions carry zero, and
the terminal reward lands on the decision that ended the episode (the
answer, or the over-long search attempt that forced termination).
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import TrainingDiverged
from .metrics import exact_match, normalize_answer
from .retrieval import oracle_retrieve
from .rewards import DEFAULT_CONSTANTS, RewardConstants, score_trajectory
from .tasks import ANSWER_TOKENS, SyntheticTask, generate_tasks
from .trajectory import QuestionRecord, Step, Termination, Trajectory

ACTION_NAMES = ("search_next_bridge", "repeat_last_search", "answer")
SEARCH_NEXT, REPEAT_LAST, ANSWER_NOW = 0, 1, 2

FEATURE_NAMES = ("bias", "answer_ready", "steps_so_far", "last_retrieval_success", "last_step_valid")
N_FEATURES = len(FEATURE_NAMES)
N_ACTIONS = len(ACTION_NAMES)

_NO_ANSWER_TEXT = "no confirmed answer yet"


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


@dataclass
class ParametricPolicy:
    """Softmax-linear decision policy plus a linear value head."""

    theta: np.ndarray = field(default_factory=lambda: np.zeros((N_ACTIONS, N_FEATURES)))
    value_weights: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))

    def probs(self, features: np.ndarray) -> np.ndarray:
        return _softmax(self.theta @ features)

    def log_probs(self, features: np.ndarray) -> np.ndarray:
        logits = self.theta @ features
        return logits - np.log(np.exp(logits - logits.max()).sum()) - logits.max()

    def sample(self, features: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
        probs = self.probs(features)
        action = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
        action = min(action, N_ACTIONS - 1)
        return action, float(np.log(probs[action]))

    def value(self, features: np.ndarray) -> float:
        return float(self.value_weights @ features)

    def copy(self) -> "ParametricPolicy":
        return ParametricPolicy(self.theta.copy(), self.value_weights.copy())

    def to_dict(self, *, config_hash: str | None = None) -> dict:
        return {
            "theta": self.theta.tolist(),
            "value_weights": self.value_weights.tolist(),
            "features": list(FEATURE_NAMES),
            "actions": list(ACTION_NAMES),
            "config_hash": config_hash,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ParametricPolicy":
        theta = np.asarray(obj["theta"], dtype=float)
        value_weights = np.asarray(obj["value_weights"], dtype=float)
        if theta.shape != (N_ACTIONS, N_FEATURES) or value_weights.shape != (N_FEATURES,):
            raise ValueError("policy checkpoint has incompatible shapes")
        return cls(theta, value_weights)


@dataclass(frozen=True)
class EnvSpec:
    """Synthetic-environment settings for training."""

    num_tasks: int = 300
    depths: tuple[int, ...] = (1, 2, 3)
    max_turns: int = 4
    k: int = 3
    distractors: int = 6

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(self.depths))
        if self.num_tasks < 1 or not self.depths:
            raise ValueError("need at least one task and one depth")
        if any(d > self.max_turns for d in self.depths):
            raise ValueError("task depths must not exceed max_turns")

    def to_dict(self) -> dict:
        return {
            "num_tasks": self.num_tasks,
            "depths": list(self.depths),
            "max_turns": self.max_turns,
            "k": self.k,
            "distractors": self.distractors,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EnvSpec":
        clean = dict(obj)
        if "depths" in clean:
            clean["depths"] = tuple(clean["depths"])
        return replace(cls(), **clean)


@dataclass(frozen=True)
class TrainerConfig:
    """PPO hyperparameters.

    Learning rates keep the published 1:10 actor:critic ratio but are
    rescaled for the tiny parameter count; warmup fractions, batch and
    minibatch sizes, and the iteration budget follow the published
    training setup.
    """

    actor_lr: float = 1e-3
    critic_lr: float = 1e-2
    batch_episodes: int = 512
    minibatch_episodes: int = 256
    actor_warmup: float = 0.285
    critic_warmup: float = 0.015
    total_iterations: int = 1005
    clip_epsilon: float = 0.2
    gamma: float = 1.0
    gae_lambda: float = 0.95
    ppo_epochs: int = 2
    seed: int = 0
    normalize_advantages: bool = True
    divergence_bound: float = 50.0

    def __post_init__(self):
        if not 0 < self.clip_epsilon < 1:
            raise ValueError("clip_epsilon must be in (0, 1)")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must be in [0, 1]")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.minibatch_episodes > self.batch_episodes:
            raise ValueError("minibatch_episodes must not exceed batch_episodes")
        if self.minibatch_episodes < 1 or self.total_iterations < 1 or self.ppo_epochs < 1:
            raise ValueError("sizes and iteration counts must be positive")

    def to_dict(self) -> dict:
        return {
            "actor_lr": self.actor_lr,
            "critic_lr": self.critic_lr,
            "batch_episodes": self.batch_episodes,
            "minibatch_episodes": self.minibatch_episodes,
            "actor_warmup": self.actor_warmup,
            "critic_warmup": self.critic_warmup,
            "total_iterations": self.total_iterations,
            "clip_epsilon": self.clip_epsilon,
            "gamma": self.gamma,
            "gae_lambda": self.gae_lambda,
            "ppo_epochs": self.ppo_epochs,
            "seed": self.seed,
            "normalize_advantages": self.normalize_advantages,
            "divergence_bound": self.divergence_bound,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainerConfig":
        return replace(cls(), **obj)


def config_hash(trainer: TrainerConfig, env: EnvSpec, constants: RewardConstants) -> str:
    payload = json.dumps(
        {"trainer": trainer.to_dict(), "env": env.to_dict(), "rewards": constants.to_dict()},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def learning_rate_at(base: float, iteration: int, total: int, warmup_fraction: float) -> float:
    """Linear warmup from 0, reaching `base` exactly at the warmup boundary."""
    boundary = warmup_fraction * total
    if boundary <= 0:
        return base
    return base * min(1.0, iteration / boundary)


def gae_advantages(
    rewards: Sequence[float],
    values: Sequence[float],
    gamma: float = 1.0,
    lam: float = 0.95,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over one episode.

    `values` must carry one bootstrap entry beyond the rewards (zero for
    episodic ends). Returns (advantages, returns).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.shape[0] != rewards.shape[0] + 1:
        raise ValueError(
            f"need len(rewards)+1 values, got {values.shape[0]} for {rewards.shape[0]} rewards"
        )
    n = rewards.shape[0]
    advantages = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        delta = rewards[t] + gamma * values[t + 1] - values[t]
        running = delta + gamma * lam * running
        advantages[t] = running
    return advantages, advantages + values[:-1]


def masked_ppo_loss(
    features: np.ndarray,
    actions: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    mask: np.ndarray,
    theta: np.ndarray,
    clip_epsilon: float,
) -> tuple[float, np.ndarray]:
    """Clipped-surrogate loss averaged over unmasked decisions only.

    Returns the scalar loss (negated surrogate, to be minimized) and its
    analytic gradient with respect to theta. Masked positions are sliced
    away before any arithmetic, so they provably contribute nothing.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("no trainable decisions")
    x = np.asarray(features, dtype=float)[mask]
    act = np.asarray(actions, dtype=int)[mask]
    old = np.asarray(old_log_probs, dtype=float)[mask]
    adv = np.asarray(advantages, dtype=float)[mask]

    logits = x @ theta.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + logits.max(axis=1, keepdims=True)
    log_probs = logits - log_z
    row = np.arange(x.shape[0])
    ratio = np.exp(log_probs[row, act] - old)
    clipped = np.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon)
    surrogate = np.minimum(ratio * adv, clipped * adv)
    n = x.shape[0]
    loss = -float(surrogate.mean())

    # Gradient flows only where the min selects the unclipped branch
    # (inside the clip window both branches coincide, same derivative).
    active = ratio * adv <= clipped * adv
    coeff = np.where(active, ratio * adv, 0.0)
    probs = np.exp(log_probs)
    weights = -probs * coeff[:, None]
    weights[row, act] += coeff
    grad = -(weights.T @ x) / n
    return loss, grad


class DecisionState:
    """Fast decision-level episode state over one synthetic task.

    Mirrors the text episode loop: each search decision issues a query
    against the task oracle, redundancy is judged by the same normalized
    query / doc-id-set triggers, and intermediate answers sharpen from a
    placeholder through gold-prefix fragments to the full answer as hops
    complete. Extra searches after all hops are novel exploratory
    queries, so over-searching is valid but unproductive.
    """

    def __init__(self, task: SyntheticTask, max_turns: int, k: int):
        self.task = task
        self.max_turns = max_turns
        self.k = k
        self.progress = 0
        self.steps: list[Step] = []
        self.last_success = 0.0
        self.last_valid = 1.0
        self.last_query: str | None = None
        self.explored = 0
        self._seen_queries: set[str] = set()
        self._seen_doc_sets: set[frozenset[str]] = set()
        self._answer_tokens = task.answers[0].split()

    @property
    def answer_ready(self) -> bool:
        return self.progress >= self.task.depth

    def features(self) -> np.ndarray:
        return np.array(
            [
                1.0,
                1.0 if self.answer_ready else 0.0,
                len(self.steps) / self.max_turns,
                self.last_success,
                self.last_valid,
            ]
        )

    def intermediate_answer(self) -> str:
        if self.answer_ready:
            return self.task.answers[0]
        if self.progress == 0:
            return _NO_ANSWER_TEXT
        count = math.ceil(ANSWER_TOKENS * self.progress / self.task.depth)
        return " ".join(self._answer_tokens[:count])

    def _query_for(self, action: int) -> str:
        if action == REPEAT_LAST and self.last_query is not None:
            return self.last_query
        if not self.answer_ready:
            return f"trail from {self.task.entities[self.progress]}"
        pool = self.task.distractor_entities
        entity = pool[self.explored % len(pool)]
        self.explored += 1
        return f"field notes about {entity}"

    def apply_search(self, action: int) -> Step:
        query = self._query_for(action)
        docs = oracle_retrieve(self.task, query, self.k)
        doc_ids = tuple(d.id for d in docs)
        advanced = action != REPEAT_LAST and not self.answer_ready
        if advanced:
            self.progress += 1
        norm = " ".join(normalize_answer(query))
        doc_set = frozenset(doc_ids)
        valid = norm not in self._seen_queries and doc_set not in self._seen_doc_sets
        self._seen_queries.add(norm)
        self._seen_doc_sets.add(doc_set)
        step = Step(
            index=len(self.steps) + 1,
            think=f"turn {len(self.steps) + 1}",
            search_query=query,
            retrieved_doc_ids=doc_ids,
            observation="docs " + ",".join(doc_ids),
            intermediate_answer=self.intermediate_answer(),
            valid=valid,
        )
        self.steps.append(step)
        self.last_query = query
        self.last_success = 1.0 if advanced else 0.0
        self.last_valid = 1.0 if valid else 0.0
        return step

    def final_answer(self) -> str:
        return self.task.answers[0] if self.answer_ready else _NO_ANSWER_TEXT


@dataclass
class EpisodeRollout:
    """Flattened position sequence plus the scored trajectory."""

    features: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    mask: np.ndarray
    trajectory: Trajectory
    depth: int
    em: float
    early_correct: bool
    total_reward: float


def collect_episode(
    policy: ParametricPolicy,
    task: SyntheticTask,
    record: QuestionRecord,
    env: EnvSpec,
    rng: np.random.Generator,
    constants: RewardConstants = DEFAULT_CONSTANTS,
    ablate: Iterable[str] = (),
) -> EpisodeRollout:
    state = DecisionState(task, env.max_turns, env.k)
    features: list[np.ndarray] = []
    actions: list[int] = []
    log_probs: list[float] = []
    mask: list[bool] = []
    step_of_position: list[int] = []  # step ordinal per decision, -1 for obs/terminal

    final_answer: str | None = None
    termination = Termination.MAX_TURNS_REACHED
    while True:
        x = state.features()
        action, log_prob = policy.sample(x, rng)
        features.append(x)
        actions.append(action)
        log_probs.append(log_prob)
        mask.append(True)
        if action == ANSWER_NOW:
            final_answer = state.final_answer()
            termination = Termination.ANSWERED
            step_of_position.append(-1)
            break
        if len(state.steps) >= env.max_turns:
            # Over-long search attempt: episode is cut off unanswered and
            # this decision carries the terminal penalty.
            step_of_position.append(-1)
            break
        step = state.apply_search(action)
        step_of_position.append(step.index)
        # Environment-injected observation position, excluded from the loss.
        features.append(state.features())
        actions.append(-1)
        log_probs.append(0.0)
        mask.append(False)
        step_of_position.append(-1)

    trajectory = Trajectory(
        question_id=task.id,
        steps=tuple(state.steps),
        final_answer=final_answer,
        termination=termination,
    )
    breakdown, scored = score_trajectory(trajectory, record, constants, ablate=ablate)

    rewards = np.zeros(len(features))
    for pos, step_index in enumerate(step_of_position):
        if step_index > 0:
            rewards[pos] = breakdown.overall[step_index - 1]
    # Terminal reward lands on the decision that ended the episode, which
    # is always the last position (the loop breaks right after it).
    rewards[-1] += breakdown.overall[-1]

    n_steps = len(state.steps)
    early = scored.t_c is not None and scored.t_c != -1 and scored.t_c < n_steps
    # The logged EM must reflect actual correctness even when the outcome
    # component is ablated away from the training signal.
    em = float(exact_match(final_answer, record.gold_answers)) if final_answer else 0.0
    return EpisodeRollout(
        features=np.vstack(features),
        actions=np.asarray(actions, dtype=int),
        log_probs=np.asarray(log_probs, dtype=float),
        rewards=rewards,
        mask=np.asarray(mask, dtype=bool),
        trajectory=scored,
        depth=task.depth,
        em=em,
        early_correct=early,
        total_reward=breakdown.total(),
    )


@dataclass
class TrainingLog:
    """Per-iteration training dynamics."""

    depths: tuple[int, ...]
    rows: list[dict] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        base = [
            "iteration",
            "mean_sd",
            "valid_ratio",
            "em",
            "osr",
            "mean_reward",
            "mean_decisions",
            "seconds_per_batch",
        ]
        return base + [f"sd_depth_{d}" for d in self.depths]

    def append(self, row: dict) -> None:
        self.rows.append(row)

    def tail_mean(self, column: str, count: int = 50) -> float:
        values = [row[column] for row in self.rows[-count:] if not math.isnan(row[column])]
        if not values:
            return float("nan")
        return sum(values) / len(values)

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=self.columns)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)


def _batch_stats(episodes: list[EpisodeRollout], depths: tuple[int, ...]) -> dict:
    n = len(episodes)
    steps_total = sum(len(e.trajectory.steps) for e in episodes)
    valid_total = sum(sum(s.valid for s in e.trajectory.steps) for e in episodes)
    stats = {
        "mean_sd": steps_total / n,
        "valid_ratio": valid_total / steps_total if steps_total else 1.0,
        "em": sum(e.em for e in episodes) / n,
        "osr": sum(e.early_correct for e in episodes) / n,
        "mean_reward": sum(e.total_reward for e in episodes) / n,
        "mean_decisions": sum(int(e.mask.sum()) for e in episodes) / n,
    }
    for d in depths:
        bucket = [len(e.trajectory.steps) for e in episodes if e.depth == d]
        stats[f"sd_depth_{d}"] = sum(bucket) / len(bucket) if bucket else float("nan")
    return stats


def train(
    env: EnvSpec,
    config: TrainerConfig,
    constants: RewardConstants = DEFAULT_CONSTANTS,
    *,
    ablate: Iterable[str] = (),
    progress: Callable[[int, dict], None] | None = None,
) -> tuple[ParametricPolicy, TrainingLog]:
    """Run the PPO loop and return the trained policy with its log.

    Deterministic for a fixed seed: episode collection is single
    threaded and all randomness flows from one root generator.
    """
    ablate = frozenset(ablate)
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    tasks = generate_tasks(
        env.num_tasks, env.depths, int(seeds[0].generate_state(1)[0]), distractors=env.distractors
    )
    records = {task.id: task.record() for task in tasks}
    rng = np.random.default_rng(seeds[1])

    policy = ParametricPolicy()
    log = TrainingLog(depths=env.depths)
    for iteration in range(config.total_iterations):
        started = time.perf_counter()
        lr_actor = learning_rate_at(
            config.actor_lr, iteration, config.total_iterations, config.actor_warmup
        )
        lr_critic = learning_rate_at(
            config.critic_lr, iteration, config.total_iterations, config.critic_warmup
        )

        episodes = []
        for _ in range(config.batch_episodes):
            task = tasks[int(rng.integers(0, len(tasks)))]
            episodes.append(
                collect_episode(policy, task, records[task.id], env, rng, constants, ablate)
            )

        advantages_list = []
        returns_list = []
        for episode in episodes:
            values = episode.features @ policy.value_weights
            adv, ret = gae_advantages(
                episode.rewards, np.append(values, 0.0), config.gamma, config.gae_lambda
            )
            advantages_list.append(adv)
            returns_list.append(ret)

        if config.normalize_advantages:
            unmasked = np.concatenate(
                [adv[e.mask] for adv, e in zip(advantages_list, episodes)]
            )
            mean = unmasked.mean()
            std = unmasked.std()
            if std < 1e-8:
                std = 1.0
            advantages_list = [(adv - mean) / std for adv in advantages_list]

        order = np.arange(len(episodes))
        for _ in range(config.ppo_epochs):
            rng.shuffle(order)
            for start in range(0, len(order), config.minibatch_episodes):
                chunk = order[start : start + config.minibatch_episodes]
                feats = np.vstack([episodes[i].features for i in chunk])
                acts = np.concatenate([episodes[i].actions for i in chunk])
                olds = np.concatenate([episodes[i].log_probs for i in chunk])
                advs = np.concatenate([advantages_list[i] for i in chunk])
                rets = np.concatenate([returns_list[i] for i in chunk])
                masks = np.concatenate([episodes[i].mask for i in chunk])

                loss, grad = masked_ppo_loss(
                    feats, acts, olds, advs, masks, policy.theta, config.clip_epsilon
                )
                policy.theta = policy.theta - lr_actor * grad

                predictions = feats @ policy.value_weights
                value_grad = 2.0 * feats.T @ (predictions - rets) / feats.shape[0]
                policy.value_weights = policy.value_weights - lr_critic * value_grad

        magnitude = float(np.abs(policy.theta).mean())
        if magnitude > config.divergence_bound:
            raise TrainingDiverged(
                f"mean |theta| = {magnitude:.3f} exceeded bound {config.divergence_bound} "
                f"at iteration {iteration}"
            )

        row = {"iteration": iteration, **_batch_stats(episodes, env.depths)}
        row["seconds_per_batch"] = time.perf_counter() - started
        log.append(row)
        if progress is not None:
            progress(iteration, row)
    return policy, log
