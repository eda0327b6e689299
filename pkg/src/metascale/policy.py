"""Policy-gradient meta-learning of gradient scales and hyperparameters.

The meta-learner holds one categorical distribution per action slot: one
slot per parameter group choosing a scaling coefficient from the lambda
grid, plus one slot per hyperparameter grid (learning rate, decay, hidden
width). Each meta-epoch either explores (uniform draws, no policy updates)
or exploits (policy sampling with recorded log-probabilities, REINFORCE
updates driven by heldout reward). Inside a meta-epoch, the learner takes
one scaled SGD step per static training batch; scaling coefficients are
re-drawn from the policy after every batch during exploitation.

A direct loss-surface-transform step is included as the reference the
scaled-gradient scheme approximates, for testing against.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .autodiff import NumericOverflowError
from .episodes import MetaSet
from .learners import ParamGroup
from .seeding import PathPart, substream

DEFAULT_LAMBDA_GRID = (0.1, 0.25, 0.5, 1.0, 2.0, 4.0, 10.0)
BASELINE_DECAY = 0.9


class PolicyError(Exception):
    pass


class TransformError(Exception):
    """The loss transform lost monotonicity (derivative <= 0)."""


# ---------------------------------------------------------------------------
# Action spaces and policy parameters

@dataclass(frozen=True)
class LambdaActionSpace:
    grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    n_groups: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "grid", tuple(float(g) for g in self.grid))
        if not self.grid or any(g <= 0 for g in self.grid):
            raise ValueError("lambda grid must be non-empty and strictly positive")
        if any(a >= b for a, b in zip(self.grid, self.grid[1:])):
            raise ValueError("lambda grid must be strictly increasing")
        if self.n_groups < 1:
            raise ValueError("n_groups must be >= 1")

    @property
    def slots(self) -> tuple[str, ...]:
        return tuple(f"lambda_{i}" for i in range(self.n_groups))


@dataclass(frozen=True)
class HyperActionSpace:
    lr_grid: tuple[float, ...] = (0.1,)
    decay_grid: tuple[float, ...] = (1.0,)
    width_grid: tuple[int, ...] = (8,)

    def __post_init__(self) -> None:
        object.__setattr__(self, "lr_grid", tuple(float(v) for v in self.lr_grid))
        object.__setattr__(self, "decay_grid", tuple(float(v) for v in self.decay_grid))
        object.__setattr__(self, "width_grid", tuple(int(v) for v in self.width_grid))
        if not (self.lr_grid and self.decay_grid and self.width_grid):
            raise ValueError("all hyperparameter grids must be non-empty")
        if any(v <= 0 for v in self.lr_grid):
            raise ValueError("learning rates must be positive")
        if any(not 0 < v <= 1 for v in self.decay_grid):
            raise ValueError("decay values must lie in (0, 1]")
        if any(v < 1 for v in self.width_grid):
            raise ValueError("widths must be positive integers")

    @property
    def grids(self) -> dict[str, tuple]:
        return {"lr": self.lr_grid, "decay": self.decay_grid, "width": self.width_grid}


@dataclass
class PolicyParams:
    """One logit vector per action slot plus the meta learning rate."""

    logits: dict[str, np.ndarray]
    alpha_meta: float = 0.5

    def probabilities(self, slot: str) -> np.ndarray:
        return softmax(self.logits[slot])


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z))
    return e / e.sum()


def logprob_gradient(logits: np.ndarray, index: int) -> np.ndarray:
    """d log softmax(logits)[index] / d logits = onehot(index) - softmax(logits)."""
    g = -softmax(logits)
    g[index] += 1.0
    return g


def init_policy(lam_space: LambdaActionSpace, hyper_space: HyperActionSpace,
                alpha_meta: float = 0.5) -> PolicyParams:
    logits = {slot: np.zeros(len(lam_space.grid)) for slot in lam_space.slots}
    for name, grid in hyper_space.grids.items():
        logits[name] = np.zeros(len(grid))
    return PolicyParams(logits=logits, alpha_meta=alpha_meta)


# ---------------------------------------------------------------------------
# Trajectories and sampling

@dataclass(frozen=True)
class TrajectoryStep:
    slot: str
    index: int
    logprob: float
    reward: float


@dataclass
class Trajectory:
    steps: list[TrajectoryStep]
    horizon: int = 1
    from_exploration: bool = False


@dataclass(frozen=True)
class ExploreSchedule:
    p_explore: float
    stream: str = "policy"

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_explore <= 1.0:
            raise ValueError("p_explore must lie in [0, 1]")


@dataclass(frozen=True)
class HyperChoice:
    lr: float
    decay: float
    width: int
    indices: dict[str, int]

    def to_json_dict(self) -> dict:
        return {"lr": self.lr, "decay": self.decay, "width": self.width}


@dataclass(frozen=True)
class ActionChoice:
    lambda_indices: tuple[int, ...]
    lambdas: tuple[float, ...]
    hyper: HyperChoice


PendingStep = tuple[str, int, float]  # slot, chosen index, log-probability


def _draw_slot(policy: PolicyParams, slot: str, rng: np.random.Generator,
               uniform: bool) -> tuple[int, float | None]:
    n = len(policy.logits[slot])
    if uniform:
        return int(rng.integers(n)), None
    p = policy.probabilities(slot)
    idx = int(rng.choice(n, p=p))
    return idx, float(np.log(p[idx]))


def sample_lambda_actions(policy: PolicyParams, lam_space: LambdaActionSpace,
                          rng: np.random.Generator, uniform: bool = False
                          ) -> tuple[tuple[int, ...], tuple[float, ...], list[PendingStep]]:
    indices, pending = [], []
    for slot in lam_space.slots:
        idx, logprob = _draw_slot(policy, slot, rng, uniform)
        indices.append(idx)
        if logprob is not None:
            pending.append((slot, idx, logprob))
    lambdas = tuple(lam_space.grid[i] for i in indices)
    return tuple(indices), lambdas, pending


def sample_actions(policy: PolicyParams, lam_space: LambdaActionSpace,
                   hyper_space: HyperActionSpace, schedule: ExploreSchedule,
                   first_epoch: bool, rng: np.random.Generator
                   ) -> tuple[ActionChoice, list[PendingStep], bool]:
    """Choose every slot's action, exploring uniformly or sampling the policy.

    The explore draw is consumed every call so downstream sampling stays
    aligned regardless of the branch taken. Exploration records no
    log-probabilities: uniform draws are off-policy and feed no update.
    """
    draw = float(rng.uniform())
    explored = first_epoch or draw < schedule.p_explore
    lam_idx, lambdas, pending = sample_lambda_actions(policy, lam_space, rng,
                                                      uniform=explored)
    hyper_indices: dict[str, int] = {}
    values: dict[str, float | int] = {}
    for name, grid in hyper_space.grids.items():
        idx, logprob = _draw_slot(policy, name, rng, explored)
        hyper_indices[name] = idx
        values[name] = grid[idx]
        if logprob is not None:
            pending.append((name, idx, logprob))
    hyper = HyperChoice(lr=float(values["lr"]), decay=float(values["decay"]),
                        width=int(values["width"]), indices=hyper_indices)
    return ActionChoice(lam_idx, lambdas, hyper), pending, explored


def reinforce_update(policy: PolicyParams, trajectory: Trajectory,
                     baseline: float = 0.0) -> PolicyParams:
    """Ascend logits by alpha_meta * (R - baseline) * grad log pi(a) per step."""
    if trajectory.from_exploration:
        raise PolicyError("cannot update the policy from an exploration round")
    for step in trajectory.steps:
        advantage = step.reward - baseline
        grad = logprob_gradient(policy.logits[step.slot], step.index)
        policy.logits[step.slot] += policy.alpha_meta * advantage * grad
        if not np.all(np.isfinite(policy.logits[step.slot])):
            raise NumericOverflowError(f"non-finite logits in slot {step.slot}")
    return policy


# ---------------------------------------------------------------------------
# Gradient scaling and the reference transform

GroupGrads = Sequence[Sequence[np.ndarray]]


def scale_gradients(grads: GroupGrads, lambdas: Sequence[float]) -> list[list[np.ndarray]]:
    """Multiply each group's gradients by its positive scaling coefficient."""
    if len(grads) != len(lambdas):
        raise ValueError(f"{len(grads)} gradient groups vs {len(lambdas)} coefficients")
    if any(lam <= 0 for lam in lambdas):
        raise ValueError("scaling coefficients must be strictly positive")
    with np.errstate(over="ignore"):
        return [[lam * g for g in group] for group, lam in zip(grads, lambdas)]


def scaled_sgd_step(groups: Sequence[ParamGroup], scaled_grads: GroupGrads,
                    alpha: float) -> None:
    """In-place theta <- theta - alpha * g' for every tensor of every group."""
    if alpha <= 0:
        raise ValueError("learning rate must be positive")
    if len(groups) != len(scaled_grads):
        raise ValueError("gradient groups do not match parameter groups")
    for group, grads in zip(groups, scaled_grads):
        if len(group.tensors) != len(grads):
            raise ValueError(f"group {group.name}: tensor count mismatch")
        for tensor, g in zip(group.tensors, grads):
            with np.errstate(over="ignore", invalid="ignore"):
                update = tensor - alpha * g
            if not np.all(np.isfinite(update)):
                raise NumericOverflowError(f"non-finite update in group {group.name}")
            tensor[...] = update


@dataclass(frozen=True)
class Transform:
    """A scalar loss transform with its derivative, e.g. phi(L) = c*L."""

    fn: Callable[[float], float]
    derivative: Callable[[float], float]

    @classmethod
    def linear(cls, c: float) -> "Transform":
        return cls(fn=lambda L: c * L, derivative=lambda L: c)


def reference_transform_step(loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
                             phi: Transform, params: np.ndarray,
                             alpha: float) -> np.ndarray:
    """One step of theta <- theta - alpha * phi'(L) * grad L (chain rule).

    This is the direct surface-transform update the policy-scaled scheme
    approximates; it requires phi to stay strictly increasing at the
    evaluated loss.
    """
    loss, grad = loss_fn(params)
    d = float(phi.derivative(loss))
    if d <= 0.0:
        raise TransformError(f"transform derivative {d} <= 0 at loss {loss}")
    return params - alpha * d * grad


def lr_schedule(lr0: float, gamma: float, epoch: int) -> float:
    """Exponentially decayed learning rate lr0 * gamma^epoch."""
    if lr0 <= 0:
        raise ValueError("lr0 must be positive")
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    return lr0 * gamma ** epoch


# ---------------------------------------------------------------------------
# The meta-training loop

@dataclass(frozen=True)
class EvalResult:
    reward: float
    metrics: dict[str, float]


class Learner(Protocol):
    def groups(self) -> list[ParamGroup]: ...

    def train_loss_and_grads(self, batch_index: int) -> tuple[float, list[list[np.ndarray]]]: ...

    def evaluate(self, split: str) -> EvalResult: ...

    def snapshot(self) -> dict[str, np.ndarray]: ...

    def restore(self, saved: dict[str, np.ndarray]) -> None: ...


class LearnerFactory(Protocol):
    n_groups: int

    def build(self, meta_set: MetaSet, hyper: HyperChoice,
              rng: np.random.Generator) -> Learner: ...


@dataclass(frozen=True)
class MetaPolicyConfig:
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    lr_grid: tuple[float, ...] = (0.1,)
    decay_grid: tuple[float, ...] = (1.0,)
    width_grid: tuple[int, ...] = (8,)
    p_explore: float = 0.1
    meta_epochs: int = 50
    baseline_enabled: bool = True
    seed: int = 0

    def to_json_dict(self) -> dict:
        return {"lambda_grid": list(self.lambda_grid), "lr_grid": list(self.lr_grid),
                "decay_grid": list(self.decay_grid), "width_grid": list(self.width_grid),
                "p_explore": self.p_explore, "meta_epochs": self.meta_epochs,
                "baseline_enabled": self.baseline_enabled, "seed": self.seed}

    @classmethod
    def from_json_dict(cls, d, path: str = "meta_policy") -> "MetaPolicyConfig":
        from .harness import ConfigError, check
        check(isinstance(d, dict), path, "must be an object")
        known = {"lambda_grid", "lr_grid", "decay_grid", "width_grid", "p_explore",
                 "meta_epochs", "baseline_enabled", "seed"}
        for key in d:
            check(key in known, f"{path}.{key}", "unknown key")
        merged = {**cls().to_json_dict(), **d}
        check(isinstance(merged["meta_epochs"], int) and merged["meta_epochs"] >= 1,
              f"{path}.meta_epochs", "must be a positive integer")
        check(isinstance(merged["p_explore"], (int, float))
              and 0 <= merged["p_explore"] <= 1, f"{path}.p_explore",
              "must be a number in [0, 1]")
        check(isinstance(merged["baseline_enabled"], bool),
              f"{path}.baseline_enabled", "must be a boolean")
        check(isinstance(merged["seed"], int) and merged["seed"] >= 0,
              f"{path}.seed", "must be a non-negative integer")
        try:
            return cls(lambda_grid=tuple(merged["lambda_grid"]),
                       lr_grid=tuple(merged["lr_grid"]),
                       decay_grid=tuple(merged["decay_grid"]),
                       width_grid=tuple(merged["width_grid"]),
                       p_explore=float(merged["p_explore"]),
                       meta_epochs=int(merged["meta_epochs"]),
                       baseline_enabled=bool(merged["baseline_enabled"]),
                       seed=int(merged["seed"]))
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def __post_init__(self) -> None:
        LambdaActionSpace(self.lambda_grid, 1)
        HyperActionSpace(self.lr_grid, self.decay_grid, self.width_grid)
        ExploreSchedule(self.p_explore)
        if self.meta_epochs < 1:
            raise ValueError("meta_epochs must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    explored: bool
    lambdas: list[float]
    hyper: dict
    heldout_accuracy: float
    reward: float
    test_metric: float
    best_heldout_so_far: float
    failed: bool = False
    step_rewards: list[float] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {"epoch": self.epoch, "explored": self.explored, "lambdas": self.lambdas,
                "hyper": self.hyper, "heldout_accuracy": self.heldout_accuracy,
                "reward": self.reward, "test_metric": self.test_metric,
                "best_heldout_so_far": self.best_heldout_so_far, "failed": self.failed,
                "step_rewards": self.step_rewards}


@dataclass
class RunRecord:
    seed: int
    epochs: list[EpochRecord]
    best_heldout: float
    best_hyper: dict
    final_heldout_metrics: dict[str, float]
    final_test_metrics: dict[str, float]
    # Raw arrays for checkpointing; deliberately left out of the JSON form.
    best_params: dict[str, np.ndarray] | None = None

    def to_json_dict(self) -> dict:
        return {"seed": self.seed, "best_heldout": self.best_heldout,
                "best_hyper": self.best_hyper,
                "final_heldout_metrics": self.final_heldout_metrics,
                "final_test_metrics": self.final_test_metrics,
                "epochs": [e.to_json_dict() for e in self.epochs]}


OnStep = Callable[[int, int, Learner], None]


def meta_train(config: MetaPolicyConfig, factory: LearnerFactory, meta_set: MetaSet,
               seed: PathPart | tuple[PathPart, ...], on_step: OnStep | None = None,
               alpha_meta: float = 0.5) -> RunRecord:
    """Run the full meta-training loop and return its complete record.

    Per meta-epoch: choose actions (uniform on the first epoch or with
    probability p_explore, otherwise from the policy), build a fresh learner
    from the chosen hyperparameters, then for each static training batch
    take one scaled SGD step, collect the heldout reward, update the policy
    (exploit only) and re-draw scaling coefficients. The best-heldout
    parameters seen anywhere in the run are evaluated on the test split at
    every epoch end. A non-finite loss marks the epoch failed with reward 0.
    """
    if not meta_set.d_train_batches:
        raise ValueError("meta_set has no training batches")
    lam_space = LambdaActionSpace(config.lambda_grid, factory.n_groups)
    hyper_space = HyperActionSpace(config.lr_grid, config.decay_grid, config.width_grid)
    schedule = ExploreSchedule(config.p_explore)
    policy = init_policy(lam_space, hyper_space, alpha_meta)
    policy_rng = substream(seed, "policy")

    baseline = 0.0
    best_reward = -np.inf
    best_hyper: HyperChoice | None = None
    best_params: dict[str, np.ndarray] | None = None
    records: list[EpochRecord] = []

    for epoch in range(config.meta_epochs):
        actions, pending, explored = sample_actions(
            policy, lam_space, hyper_space, schedule, epoch == 0, policy_rng)
        learner = factory.build(meta_set, actions.hyper, substream(seed, "init", epoch))
        lambdas = actions.lambdas
        epoch_lambdas = list(lambdas)
        step_rewards: list[float] = []
        failed = False

        for t in range(len(meta_set.d_train_batches)):
            alpha = lr_schedule(actions.hyper.lr, actions.hyper.decay, t)
            try:
                _, grads = learner.train_loss_and_grads(t)
                scaled = scale_gradients(grads, lambdas)
                scaled_sgd_step(learner.groups(), scaled, alpha)
                if on_step is not None:
                    on_step(epoch, t, learner)
                reward = learner.evaluate("heldout").reward
            except NumericOverflowError:
                failed = True
                reward = 0.0
            step_rewards.append(reward)
            if not failed and reward > best_reward:
                best_reward = reward
                best_hyper = actions.hyper
                best_params = learner.snapshot()
            if not explored:
                if pending:
                    traj = Trajectory([TrajectoryStep(s, i, lp, reward)
                                       for s, i, lp in pending])
                    reinforce_update(policy, traj,
                                     baseline if config.baseline_enabled else 0.0)
                    baseline = BASELINE_DECAY * baseline + (1 - BASELINE_DECAY) * reward
                if failed:
                    break
                _, lambdas, pending = sample_lambda_actions(policy, lam_space, policy_rng)
            elif failed:
                break

        if best_params is not None and best_hyper is not None:
            probe = factory.build(meta_set, best_hyper, substream(seed, "rebuild", epoch))
            probe.restore(best_params)
            test_metric = probe.evaluate("test").reward
        else:
            test_metric = 0.0
        records.append(EpochRecord(
            epoch=epoch, explored=explored, lambdas=epoch_lambdas,
            hyper=actions.hyper.to_json_dict(),
            heldout_accuracy=max(step_rewards) if step_rewards else 0.0,
            reward=step_rewards[-1] if step_rewards else 0.0,
            test_metric=test_metric,
            best_heldout_so_far=best_reward if best_reward > -np.inf else 0.0,
            failed=failed, step_rewards=step_rewards))

    if best_params is not None and best_hyper is not None:
        probe = factory.build(meta_set, best_hyper, substream(seed, "final"))
        probe.restore(best_params)
        final_heldout = probe.evaluate("heldout").metrics
        final_test = probe.evaluate("test").metrics
        best_hyper_json = best_hyper.to_json_dict()
    else:
        final_heldout, final_test, best_hyper_json = {}, {}, {}
    seed_value = seed[0] if isinstance(seed, tuple) else seed
    return RunRecord(
        seed=int(seed_value) if isinstance(seed_value, int) else 0,
        epochs=records,
        best_heldout=best_reward if best_reward > -np.inf else 0.0,
        best_hyper=best_hyper_json,
        final_heldout_metrics=final_heldout,
        final_test_metrics=final_test,
        best_params=best_params)
