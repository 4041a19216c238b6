# src/imitation_learning.py
"""
Imitation of the anticipative policy.

The learner is the ML-CO pipeline (prize model + CPCTSP oracle); it is fit
by minimising a perturbed Fenchel-Young loss against anticipative targets.
Datasets come from one of four paradigms:

    baty                 every state along anticipative trajectories
    sampling             only the first state of each anticipative solve
    anticipative_dagger  states visited by a mixture of expert and learner
    voting_dagger        as above, labelled by M bootstrap scenarios
"""
import logging
import math
import pickle
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from baseline_policies import MLCOPolicy
from config import SolverConfig, TrainConfig
from cpctsp_oracle import (FEASIBILITY_TOL, Tour, TourCostCache, oracle_objective, shared_cache,
                           solve_with_value)
from deterministic_irp import anticipative_first_decision, solve
from errors import ContractViolationError, RejectedInputError
from instance_generator import Episode, Instance, derive_seed, sample_episode
from inventory_mdp import State, context_window, initial_state, rollout, transition, visit_vector
from prize_model import ModelParams, QuantileConfig, prize_backward, prize_forward

logger = logging.getLogger(__name__)

VALIDATION_EPISODES = 5


@dataclass(frozen=True)
class OracleContext:
    quantities: np.ndarray
    B: float
    gamma: np.ndarray
    cache: TourCostCache

    @classmethod
    def for_state(cls, instance: Instance, state: State, cache: Optional[TourCostCache] = None) -> "OracleContext":
        return cls(instance.C - state.inventories, instance.B, instance.gamma,
                   cache or shared_cache(instance.gamma))


@dataclass
class TrainingSample:
    state: State
    target_tour: Tour
    epoch_tag: int
    # position of the state inside its anticipative trajectory
    lookahead_index: int = 0

    def delivered(self, instance: Instance) -> float:
        z = visit_vector(self.target_tour, instance.n)
        return float(np.dot(instance.C - self.state.inventories, z))


# ---------------------------------------------------------------------------
# Fenchel-Young loss

def _perturbations(n: int, n_pert: int, pert_scale: float, seed: int) -> np.ndarray:
    if n_pert < 1:
        raise RejectedInputError("n_pert must be >= 1")
    if pert_scale == 0:
        return np.zeros((n_pert, n))
    return np.random.default_rng(seed).normal(0.0, pert_scale, size=(n_pert, n))


def _check_target(target: Tour, ctx: OracleContext):
    n = ctx.quantities.size
    load = float(np.dot(ctx.quantities, visit_vector(target, n)))
    if load > ctx.B + FEASIBILITY_TOL:
        raise ContractViolationError(f"target tour delivers {load:.4f} > capacity {ctx.B:.4f}",
                                     load=load, capacity=ctx.B)


def fy_terms(theta: np.ndarray, target: Tour, ctx: OracleContext, n_pert: int, pert_scale: float,
             seed: int) -> Tuple[float, np.ndarray]:
    """Loss estimate and gradient with respect to theta, sharing the perturbation draws"""
    theta = np.asarray(theta, dtype=float)
    _check_target(target, ctx)
    n = theta.size
    target_visits = visit_vector(target, n)
    target_value = oracle_objective(theta, target, ctx.gamma)
    losses, mean_visits = [], np.zeros(n)
    for z in _perturbations(n, n_pert, pert_scale, seed):
        perturbed = theta + z
        tour, value = solve_with_value(perturbed, ctx.quantities, ctx.B, ctx.gamma, ctx.cache)
        # the target is feasible, so the perturbed maximum is at least its value
        value = max(value, oracle_objective(perturbed, target, ctx.gamma))
        losses.append(value - target_value)
        mean_visits += visit_vector(tour, n)
    return math.fsum(losses) / n_pert, mean_visits / n_pert - target_visits


def fy_gradient_theta(theta: np.ndarray, target: Tour, ctx: OracleContext, n_pert: int = 20,
                      pert_scale: float = 1.0, seed: int = 0) -> np.ndarray:
    return fy_terms(theta, target, ctx, n_pert, pert_scale, seed)[1]


def fy_loss_estimate(theta: np.ndarray, target: Tour, ctx: OracleContext, n_pert: int = 20,
                     pert_scale: float = 1.0, seed: int = 0) -> float:
    """With pert_scale=0 this is the non-optimality gap of the target"""
    return fy_terms(theta, target, ctx, n_pert, pert_scale, seed)[0]


# ---------------------------------------------------------------------------
# optimisation

class AdamOptimizer:
    """Per-coordinate adaptive steps on a flat parameter vector"""

    def __init__(self, lr: float = 1e-2, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: Optional[np.ndarray] = None
        self.v: Optional[np.ndarray] = None
        self.t = 0

    def step(self, vector: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(vector)
            self.v = np.zeros_like(vector)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return vector - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def dataset_loss(dataset: Sequence[TrainingSample], params: ModelParams, instance: Instance,
                 config: TrainConfig, qconfig: QuantileConfig, seed: int = 0,
                 cache: Optional[TourCostCache] = None) -> float:
    """Mean FY loss; sample k always uses the same perturbation draws"""
    if not dataset:
        return 0.0
    cache = cache or shared_cache(instance.gamma)
    losses = []
    for k, sample in enumerate(dataset):
        theta = prize_forward(sample.state, instance, params, qconfig)
        ctx = OracleContext.for_state(instance, sample.state, cache)
        losses.append(fy_loss_estimate(theta, sample.target_tour, ctx, config.n_pert, config.pert_scale,
                                       derive_seed(seed, k)))
    return math.fsum(losses) / len(losses)


def _fit(dataset: Sequence[TrainingSample], params0: ModelParams, instance: Instance, config: TrainConfig,
         qconfig: QuantileConfig, seed: int, cache: Optional[TourCostCache] = None) -> Tuple[ModelParams, float]:
    if not dataset:
        raise RejectedInputError("cannot fit parameters on an empty dataset")
    cache = cache or shared_cache(instance.gamma)
    loss_seed = derive_seed(seed, 0)
    rng = np.random.default_rng(derive_seed(seed, 1))
    optimizer = AdamOptimizer(config.step_size, config.beta1, config.beta2, config.adam_eps)
    vector = params0.to_vector()
    best, best_loss = params0, dataset_loss(dataset, params0, instance, config, qconfig, loss_seed, cache)
    batch_size = min(config.batch_size, len(dataset))
    for step in range(1, config.fit_steps + 1):
        params = params0.from_vector(vector)
        grad = np.zeros_like(vector)
        for k in rng.choice(len(dataset), size=batch_size, replace=False):
            sample = dataset[int(k)]
            theta = prize_forward(sample.state, instance, params, qconfig)
            ctx = OracleContext.for_state(instance, sample.state, cache)
            dtheta = fy_gradient_theta(theta, sample.target_tour, ctx, config.n_pert, config.pert_scale,
                                       derive_seed(seed, step, int(k)))
            grad += prize_backward(sample.state, instance, params, qconfig, dtheta).to_vector()
        vector = optimizer.step(vector, grad / batch_size)
        if step % config.eval_interval == 0 or step == config.fit_steps:
            candidate = params0.from_vector(vector)
            loss = dataset_loss(dataset, candidate, instance, config, qconfig, loss_seed, cache)
            if loss < best_loss:
                best, best_loss = candidate, loss
    logger.debug("fit on %d samples: best training loss %.4f", len(dataset), best_loss)
    return best, best_loss


def fit_params(dataset: Sequence[TrainingSample], params0: ModelParams, instance: Instance,
               config: TrainConfig, qconfig: Optional[QuantileConfig] = None, seed: int = 0,
               cache: Optional[TourCostCache] = None) -> ModelParams:
    """Mini-batch Adam on the mean FY loss; returns the best parameters seen on the training set"""
    qconfig = qconfig or QuantileConfig(config.quantiles, config.lookahead)
    return _fit(dataset, params0, instance, config, qconfig, seed, cache)[0]


# ---------------------------------------------------------------------------
# datasets

def _anticipative_start(instance: Instance, history: Episode, H: int, seed: int, k: int) -> Tuple[State, Episode]:
    """Initial inventories uniform on [0, C_i] and an H-period episode"""
    rng = np.random.default_rng(derive_seed(seed, k, 1))
    inventories = rng.uniform(0.0, instance.C)
    episode = sample_episode(instance, H, derive_seed(seed, k, 2), context_padding=H - 1)
    return initial_state(instance, history, episode, H, inventories=inventories), episode


def _build_static(instance: Instance, history: Episode, config: TrainConfig, first_only: bool,
                  solver: Optional[SolverConfig], size: Optional[int], seed: Optional[int],
                  epoch_tag: int) -> List[TrainingSample]:
    size = config.dataset_size if size is None else size
    seed = config.seed if seed is None else seed
    H = config.lookahead
    cache = shared_cache(instance.gamma)
    samples: List[TrainingSample] = []
    k = 0
    while len(samples) < size:
        state, episode = _anticipative_start(instance, history, H, seed, k)
        schedule = solve(instance, state, episode.demand, solver, seed=derive_seed(seed, k, 3), cache=cache)
        periods = 1 if first_only else H
        for t in range(periods):
            if len(samples) >= size:
                break
            samples.append(TrainingSample(state, schedule.tours[t], epoch_tag, t))
            state = transition(instance, state, schedule.tours[t], episode.demand[:, t],
                               context_window(episode, t + 1, H))
        k += 1
    logger.info("built %s dataset: %d samples from %d anticipative solves",
                "sampling" if first_only else "baty", len(samples), k)
    return samples


def build_dataset_baty(instance: Instance, history: Episode, config: TrainConfig,
                       solver: Optional[SolverConfig] = None, size: Optional[int] = None,
                       seed: Optional[int] = None, epoch_tag: int = 0) -> List[TrainingSample]:
    """All (state, decision) pairs along anticipative trajectories"""
    return _build_static(instance, history, config, False, solver, size, seed, epoch_tag)


def build_dataset_sampling(instance: Instance, history: Episode, config: TrainConfig,
                           solver: Optional[SolverConfig] = None, size: Optional[int] = None,
                           seed: Optional[int] = None, epoch_tag: int = 0) -> List[TrainingSample]:
    """Only the first-period pair of each anticipative solve"""
    return _build_static(instance, history, config, True, solver, size, seed, epoch_tag)


def age_dataset(dataset: Sequence[TrainingSample], current_epoch: int, seed: int, max_age: int = 10,
                retain_prob: float = 0.5) -> List[TrainingSample]:
    """
    Keep every current-epoch sample, drop samples older than `max_age`
    epochs and keep each remaining past sample with probability
    `retain_prob`.
    """
    draws = np.random.default_rng(derive_seed(seed, current_epoch, 13)).random(len(dataset))
    kept = []
    for sample, u in zip(dataset, draws):
        age = current_epoch - sample.epoch_tag
        if age <= 0 or (age <= max_age and u < retain_prob):
            kept.append(sample)
    return kept


def bootstrap_trajectories(state: State, H: int, M: int, contextual: bool,
                           rng: np.random.Generator) -> List[np.ndarray]:
    """
    M demand scenarios resampled with replacement from the state's history;
    contextual instances resample whole (features, demands) columns.
    """
    n, L = state.history.shape
    scenarios = []
    for _ in range(M):
        if contextual:
            columns = rng.integers(0, L, size=H)
            scenarios.append(state.history[:, columns])
        else:
            columns = rng.integers(0, L, size=(n, H))
            scenarios.append(state.history[np.arange(n)[:, None], columns])
    return scenarios


def vote(tours: Sequence[Tour]) -> Tour:
    """Most frequent first decision; ties go to the smallest customer bitmask"""
    counts = Counter(tour.mask for tour in tours)
    top = max(counts.values())
    winner = min(mask for mask, count in counts.items() if count == top)
    return next(tour for tour in tours if tour.mask == winner)


# ---------------------------------------------------------------------------
# early stopping

@dataclass(frozen=True)
class EarlyStopState:
    best_params: ModelParams
    best_cost: float
    stale_epochs: int = 0
    last_cost: float = math.inf


def validation_cost(params: ModelParams, instance: Instance, history: Episode,
                    validation_episodes: Sequence[Episode], qconfig: QuantileConfig,
                    cache: Optional[TourCostCache] = None) -> float:
    if len(validation_episodes) != VALIDATION_EPISODES:
        raise RejectedInputError(f"early stopping needs exactly {VALIDATION_EPISODES} validation episodes")
    policy = MLCOPolicy(instance, params, qconfig, cache)
    totals = []
    for episode in validation_episodes:
        x0 = initial_state(instance, history, episode, qconfig.H)
        totals.append(rollout(instance, policy, episode, x0)[1].total)
    return math.fsum(totals)


def early_stop_check(params: ModelParams, best: EarlyStopState, validation_episodes: Sequence[Episode],
                     instance: Instance, history: Episode, qconfig: QuantileConfig, patience: int = 3,
                     cache: Optional[TourCostCache] = None) -> Tuple[EarlyStopState, bool]:
    """Strict improvement resets the counter; `patience` stale epochs in a row halt training"""
    cost = validation_cost(params, instance, history, validation_episodes, qconfig, cache)
    if cost < best.best_cost:
        updated = EarlyStopState(params, cost, 0, cost)
    else:
        updated = EarlyStopState(best.best_params, best.best_cost, best.stale_epochs + 1, cost)
    halt = updated.stale_epochs >= patience
    if halt:
        logger.info("early stop: no improvement on %.3f for %d epochs", updated.best_cost, updated.stale_epochs)
    return updated, halt


# ---------------------------------------------------------------------------
# trainer

@dataclass
class EpochRecord:
    epoch: int
    dataset_size: int
    train_fy_loss: float
    validation_cost: float
    alpha: float
    wallclock: float
    sample_generation_s: float
    policy_update_s: float
    other_s: float


@dataclass
class TrainingResult:
    params: ModelParams
    best_validation_cost: float
    records: List[EpochRecord] = field(default_factory=list)
    dataset: List[TrainingSample] = field(default_factory=list)


class ImitationTrainer:
    """
    Epoch loop shared by all paradigms: grow (or build once) the dataset,
    refit the parameters, evaluate on the validation episodes, stop early.
    With `state_path` set, the trainer pickles its state after every epoch
    and resumes from it.
    """

    def __init__(self, instance: Instance, history: Episode, validation_episodes: Sequence[Episode],
                 config: TrainConfig, solver: Optional[SolverConfig] = None,
                 state_path: Optional[Union[str, Path]] = None, progress: bool = False,
                 on_epoch: Optional[Callable[[EpochRecord, ModelParams], None]] = None):
        self.instance = instance
        self.history = history
        self.validation_episodes = list(validation_episodes)
        self.config = config
        self.solver = solver or SolverConfig()
        self.qconfig = QuantileConfig(config.quantiles, config.lookahead)
        self.cache = shared_cache(instance.gamma)
        self.state_path = Path(state_path) if state_path else None
        self.progress = progress
        self.on_epoch = on_epoch

    # -- dataset generation ---------------------------------------------
    def _expert(self, state: State, demands: np.ndarray, seed: int) -> Tour:
        return anticipative_first_decision(self.instance, state, demands, self.solver, seed=seed, cache=self.cache)

    def dagger_samples(self, epoch: int, params: ModelParams) -> List[TrainingSample]:
        cfg = self.config
        H, T = cfg.lookahead, cfg.episode_length
        voting = cfg.paradigm == "voting_dagger"
        per_state = cfg.voting if voting else 1
        alpha = cfg.alpha(epoch)
        learner = MLCOPolicy(self.instance, params, self.qconfig, self.cache)
        samples: List[TrainingSample] = []
        for e in range(math.ceil(cfg.samples_per_epoch / (T * per_state))):
            rng = np.random.default_rng(derive_seed(cfg.seed, epoch, e, 11))
            episode = sample_episode(self.instance, T + H - 1, derive_seed(cfg.seed, epoch, e, 12))
            state = initial_state(self.instance, self.history, episode, H,
                                  inventories=rng.uniform(0.0, self.instance.C))
            for t in range(T):
                solve_seed = derive_seed(cfg.seed, epoch, e, t)
                if voting:
                    scenarios = bootstrap_trajectories(state, H, cfg.voting, self.instance.is_contextual, rng)
                    targets = [self._expert(state, s, solve_seed) for s in scenarios]
                    expert = vote(targets)
                else:
                    expert = self._expert(state, episode.demand[:, t:t + H], solve_seed)
                    targets = [expert]
                samples.extend(TrainingSample(state, tour, epoch, 0) for tour in targets)
                action = expert if rng.random() < alpha else learner(state)
                state = transition(self.instance, state, action, episode.demand[:, t],
                                   context_window(episode, t + 1, H))
        return samples

    # -- persistence -----------------------------------------------------
    def _save_state(self, epoch: int, params: ModelParams, dataset, stop: EarlyStopState, records, halted: bool):
        if self.state_path is None:
            return
        self.state_path.parent.mkdir(parents=True, exist_ok=True)
        payload = {"config": self.config.to_dict(), "epoch": epoch, "params": params, "dataset": dataset,
                   "stop": stop, "records": records, "halted": halted}
        tmp = self.state_path.with_suffix(".tmp")
        with open(tmp, "wb") as handle:
            pickle.dump(payload, handle)
        tmp.replace(self.state_path)

    def _load_state(self) -> Optional[dict]:
        if self.state_path is None or not self.state_path.exists():
            return None
        with open(self.state_path, "rb") as handle:
            payload = pickle.load(handle)
        if payload.get("config") != self.config.to_dict():
            logger.warning("ignoring %s: it was written for a different training configuration", self.state_path)
            return None
        logger.info("resuming training after epoch %d", payload["epoch"])
        return payload

    # -- main loop -------------------------------------------------------
    def train(self, params0: Optional[ModelParams] = None) -> TrainingResult:
        cfg = self.config
        resumed = self._load_state()
        if resumed is not None:
            params, dataset = resumed["params"], resumed["dataset"]
            stop, records = resumed["stop"], resumed["records"]
            start = resumed["epoch"] + 1
            if resumed["halted"]:
                return TrainingResult(stop.best_params, stop.best_cost, records, dataset)
        else:
            params = params0 if params0 is not None else ModelParams.initial(self.qconfig)
            dataset: List[TrainingSample] = []
            records: List[EpochRecord] = []
            stop = EarlyStopState(params, validation_cost(params, self.instance, self.history,
                                                          self.validation_episodes, self.qconfig, self.cache))
            start = 0

        epochs = tqdm(range(start, cfg.epochs), desc=f"{cfg.paradigm} {self.instance.id}",
                      disable=not self.progress, initial=start, total=cfg.epochs)
        for epoch in epochs:
            began = time.perf_counter()
            if cfg.is_dagger:
                dataset = age_dataset(dataset + self.dagger_samples(epoch, params), epoch,
                                      cfg.seed, cfg.max_age, cfg.retain_prob)
                fit_set = dataset
                alpha = cfg.alpha(epoch)
            else:
                if not dataset:
                    builder = build_dataset_sampling if cfg.paradigm == "sampling" else build_dataset_baty
                    dataset = builder(self.instance, self.history, cfg, self.solver)
                fit_set = dataset
                alpha = 1.0
            generated = time.perf_counter()
            params, loss = _fit(fit_set, params, self.instance, cfg, self.qconfig,
                                derive_seed(cfg.seed, epoch, 7), self.cache)
            fitted = time.perf_counter()
            stop, halt = early_stop_check(params, stop, self.validation_episodes, self.instance, self.history,
                                          self.qconfig, cfg.patience, self.cache)
            finished = time.perf_counter()
            record = EpochRecord(epoch, len(fit_set), loss, stop.last_cost, alpha, finished - began,
                                 generated - began, fitted - generated, finished - fitted)
            records.append(record)
            logger.info("epoch %d: %d samples, loss %.4f, validation %.3f (best %.3f)",
                        epoch, record.dataset_size, loss, record.validation_cost, stop.best_cost)
            if self.on_epoch is not None:
                self.on_epoch(record, params)
            self._save_state(epoch, params, dataset, stop, records, halt)
            if halt:
                break
        return TrainingResult(stop.best_params, stop.best_cost, records, dataset)


def train_policy(instance: Instance, history: Episode, validation_episodes: Sequence[Episode],
                 config: TrainConfig, solver: Optional[SolverConfig] = None, **kwargs) -> TrainingResult:
    return ImitationTrainer(instance, history, validation_episodes, config, solver, **kwargs).train()


def dagger_train(instance: Instance, history: Episode, config: TrainConfig,
                 validation_episodes: Sequence[Episode], solver: Optional[SolverConfig] = None,
                 params0: Optional[ModelParams] = None, **kwargs) -> ModelParams:
    """DAgger with the anticipative (or voting) expert; returns the early-stopping best parameters"""
    if not config.is_dagger:
        raise RejectedInputError(f"dagger_train needs a DAgger paradigm, got {config.paradigm!r}")
    trainer = ImitationTrainer(instance, history, validation_episodes, config, solver, **kwargs)
    return trainer.train(params0).params
