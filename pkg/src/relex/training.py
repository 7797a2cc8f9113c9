"""Training loops: structured hinge with subgradients, plus the
fixed-representation structured perceptron and MIRA baselines.

The hinge step solves two MAP problems per bag (KB-constrained and
loss-augmented), takes their objective gap as the loss, and backpropagates
only through mentions whose labels differ between the two argmaxes.  Bags
are visited one at a time (batch size 1); an optional bag-size weight
dampens gradients from large bags where search error grows.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import evaluation
from .data import Corpus
from .encoder import (EncoderConfig, EncoderGradients, EncoderParams,
                      apply_gradients, encode, encode_backward, init_params,
                      score_table)
from .inference import (CONSTRAINED, LOSS_AUGMENTED, MapProblem,
                        SearchBudgetExceeded, astar_map, exhaustive_map,
                        local_search_map)
from .model import Bag, Hyperparams, bag_weight

TRAINERS = ("sgd_hinge", "perceptron", "mira")
MODEL_MODES = ("nmar", "hard_constraint")
REPRESENTATIONS = ("learned_pcnn", "fixed_vectors")
SOLVERS = ("auto", "local_search", "astar", "exhaustive")

# hard-constraint mode: penalties large enough that inference never
# contradicts the KB when a consistent assignment exists
HARD_ALPHA = 1e6


class NonFiniteLossError(Exception):
    def __init__(self, message: str, epoch: int | None = None,
                 pair_id: str | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.pair_id = pair_id


@dataclass(frozen=True)
class TrainerConfig:
    trainer: str = "sgd_hinge"
    model_mode: str = "nmar"
    representations: str = "learned_pcnn"
    epochs: int = 5
    seed: int = 0
    weighting: bool = False
    solver: str = "auto"
    exhaustive_budget: int = 4096
    astar_node_cap: int = 200_000

    def __post_init__(self):
        if self.trainer not in TRAINERS:
            raise ValueError(f"trainer must be one of {TRAINERS}")
        if self.model_mode not in MODEL_MODES:
            raise ValueError(f"model_mode must be one of {MODEL_MODES}")
        if self.representations not in REPRESENTATIONS:
            raise ValueError(f"representations must be one of {REPRESENTATIONS}")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        if self.trainer in ("perceptron", "mira") and self.representations != "fixed_vectors":
            raise ValueError(f"{self.trainer} requires fixed_vectors representations")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass
class TrainState:
    """Mutable training state: either PCNN params or a bare theta matrix."""

    params: EncoderParams | None = None
    theta: np.ndarray | None = None
    epoch: int = 0

    def theta_matrix(self) -> np.ndarray:
        return self.params.theta if self.params is not None else self.theta

    def check_finite(self, epoch: int, pair_id: str) -> None:
        ok = (self.params.all_finite() if self.params is not None
              else bool(np.all(np.isfinite(self.theta))))
        if not ok:
            raise NonFiniteLossError(
                f"non-finite parameters after bag {pair_id!r} in epoch {epoch}",
                epoch=epoch, pair_id=pair_id)


@dataclass(frozen=True)
class StepInfo:
    loss: float = 0.0
    updated: bool = False
    changed_mentions: int = 0
    weight: float = 1.0
    taus: tuple[float, ...] = ()


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    dev_auc: float


@dataclass
class TrainResult:
    params: EncoderParams | None
    theta: np.ndarray | None
    history: list[EpochStats]
    best_epoch: int | None


def make_solver(hp: Hyperparams, config: TrainerConfig, rng: np.random.Generator):
    """MAP solver per config; 'auto' enumerates small bags, searches large."""

    def solve(problem: MapProblem):
        labels = problem.num_relations + 1
        if config.solver == "exhaustive":
            return exhaustive_map(problem)
        if config.solver == "auto" and labels ** problem.num_mentions <= config.exhaustive_budget:
            return exhaustive_map(problem)
        if config.solver == "astar":
            try:
                return astar_map(problem, node_cap=config.astar_node_cap)
            except SearchBudgetExceeded:
                return local_search_map(problem, rng, restarts=hp.restarts)
        return local_search_map(problem, rng, restarts=hp.restarts)

    return solve


def _sentence_vectors(bag: Bag, state: TrainState,
                      fixed_vectors: dict[str, np.ndarray] | None):
    if state.params is not None:
        encodings = [encode(s, state.params) for s in bag.sentences]
        return encodings, np.stack([e.x for e in encodings])
    if fixed_vectors is None or bag.pair_id not in fixed_vectors:
        raise ValueError(f"no fixed vectors for bag {bag.pair_id!r}")
    return None, fixed_vectors[bag.pair_id]


def hinge_step(state: TrainState, bag: Bag, hp: Hyperparams,
               config: TrainerConfig, solve,
               fixed_vectors: dict[str, np.ndarray] | None = None) -> StepInfo:
    """One structured-hinge subgradient step on one bag.

    No update when the loss-augmented optimum does not beat the constrained
    one; otherwise mentions whose labels differ contribute +/- gradient
    pairs, scaled by the learning rate and (optionally) the bag-size weight.
    """
    encodings, x = _sentence_vectors(bag, state, fixed_vectors)
    theta = state.theta_matrix()
    scores = x @ theta.T

    sol_g = solve(MapProblem.from_bag(bag, scores, hp, CONSTRAINED))
    sol_e = solve(MapProblem.from_bag(bag, scores, hp, LOSS_AUGMENTED))
    raw = sol_e.objective - sol_g.objective
    loss = max(0.0, raw)
    if loss <= 0.0:
        return StepInfo(loss=loss)

    z_e, z_g = sol_e.assignment.z, sol_g.assignment.z
    changed = [i for i in range(bag.size) if z_e[i] != z_g[i]]
    weight = bag_weight(bag.size, hp) if config.weighting else 1.0
    if not changed:
        return StepInfo(loss=loss, weight=weight)

    step = hp.learning_rate * weight
    if state.params is not None:
        total = EncoderGradients.zeros_like(state.params)
        for i in changed:
            total.add_(encode_backward(bag.sentences[i], state.params,
                                       [(z_e[i], +1.0), (z_g[i], -1.0)],
                                       encoding=encodings[i]))
        apply_gradients(state.params, total, step)
    else:
        for i in changed:
            state.theta[z_e[i]] -= step * x[i]
            state.theta[z_g[i]] += step * x[i]
    return StepInfo(loss=loss, updated=True, changed_mentions=len(changed),
                    weight=weight)


def _kb_and_free_argmax(bag: Bag, x: np.ndarray, theta: np.ndarray,
                        hp: Hyperparams, solve):
    scores = x @ theta.T
    z_kb = solve(MapProblem.from_bag(bag, scores, hp, CONSTRAINED)).assignment.z
    z_free = tuple(int(v) for v in scores.argmax(axis=1))
    return z_kb, z_free


def perceptron_step(state: TrainState, bag: Bag, hp: Hyperparams, solve,
                    fixed_vectors: dict[str, np.ndarray]) -> StepInfo:
    """Structured perceptron on fixed vectors: move theta toward the
    KB-constrained argmax and away from the unconstrained one."""
    _, x = _sentence_vectors(bag, state, fixed_vectors)
    z_kb, z_free = _kb_and_free_argmax(bag, x, state.theta, hp, solve)
    changed = 0
    for i in range(bag.size):
        if z_kb[i] != z_free[i]:
            state.theta[z_kb[i]] += x[i]
            state.theta[z_free[i]] -= x[i]
            changed += 1
    return StepInfo(loss=float(changed), updated=changed > 0,
                    changed_mentions=changed)


def mira_step(state: TrainState, bag: Bag, hp: Hyperparams, solve,
              fixed_vectors: dict[str, np.ndarray]) -> StepInfo:
    """MIRA on fixed vectors: per disagreeing mention, the smallest update
    reaching unit margin, capped at C; mentions already at margin (or with a
    zero vector) are skipped."""
    _, x = _sentence_vectors(bag, state, fixed_vectors)
    z_kb, z_free = _kb_and_free_argmax(bag, x, state.theta, hp, solve)
    taus = []
    changed = 0
    for i in range(bag.size):
        if z_kb[i] == z_free[i]:
            continue
        changed += 1
        norm2 = float(x[i] @ x[i])
        if norm2 == 0.0:
            continue
        margin = float(state.theta[z_kb[i]] @ x[i] - state.theta[z_free[i]] @ x[i])
        numerator = 1.0 - margin
        if numerator <= 0.0:
            continue
        tau = min(hp.mira_cap, numerator / (2.0 * norm2))
        state.theta[z_kb[i]] += tau * x[i]
        state.theta[z_free[i]] -= tau * x[i]
        taus.append(tau)
    return StepInfo(loss=float(changed), updated=bool(taus),
                    changed_mentions=changed, taus=tuple(taus))


def format_epoch_line(stats: EpochStats) -> str:
    return f"epoch={stats.epoch} mean_loss={stats.mean_loss} dev_auc={stats.dev_auc}"


def effective_hyperparams(hp: Hyperparams, config: TrainerConfig) -> Hyperparams:
    if config.model_mode == "hard_constraint":
        return dataclasses.replace(hp, alpha_t=HARD_ALPHA, alpha_d=HARD_ALPHA,
                                   freq_scaling=False)
    return hp


def train(corpus: Corpus, config: TrainerConfig, hp: Hyperparams, *,
          dev: Corpus | None = None,
          fixed_vectors: dict[str, np.ndarray] | None = None,
          encoder_config: EncoderConfig | None = None,
          initial_params: EncoderParams | None = None,
          log=print) -> TrainResult:
    """Seeded training over shuffled bags, one step per bag per epoch.

    With a gold-labeled dev corpus, the epoch with the best sentential dev
    AUC wins checkpoint selection; otherwise the final parameters are
    returned.  Everything is deterministic in config.seed.
    """
    if not corpus.bags:
        raise ValueError("empty corpus")
    hp = effective_hyperparams(hp, config)

    seq = np.random.SeedSequence(config.seed)
    init_seed, shuffle_seed, search_seed = seq.spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    search_rng = np.random.default_rng(search_seed)

    if config.representations == "learned_pcnn":
        if initial_params is not None:
            params = initial_params.copy()
        else:
            params = init_params(encoder_config or EncoderConfig(),
                                 vocab_size=len(corpus.id_to_token),
                                 num_relations=corpus.num_relations,
                                 rng=np.random.default_rng(init_seed))
        state = TrainState(params=params)
    else:
        if fixed_vectors is None:
            raise ValueError("fixed_vectors representations need a vector table")
        dim = next(iter(fixed_vectors.values())).shape[1]
        state = TrainState(theta=np.zeros((corpus.num_relations + 1, dim)))

    solve = make_solver(hp, config, search_rng)
    history: list[EpochStats] = []
    best_epoch: int | None = None
    best_auc = -np.inf
    best_params = None
    best_theta = None

    for epoch in range(config.epochs):
        state.epoch = epoch
        order = shuffle_rng.permutation(len(corpus.bags))
        losses = []
        for idx in order:
            bag = corpus.bags[int(idx)]
            if config.trainer == "sgd_hinge":
                info = hinge_step(state, bag, hp, config, solve, fixed_vectors)
            elif config.trainer == "perceptron":
                info = perceptron_step(state, bag, hp, solve, fixed_vectors)
            else:
                info = mira_step(state, bag, hp, solve, fixed_vectors)
            if not np.isfinite(info.loss):
                raise NonFiniteLossError(
                    f"non-finite loss on bag {bag.pair_id!r} in epoch {epoch}",
                    epoch=epoch, pair_id=bag.pair_id)
            state.check_finite(epoch, bag.pair_id)
            losses.append(info.loss)

        dev_auc = _dev_auc(dev, state, fixed_vectors)
        stats = EpochStats(epoch=epoch, mean_loss=float(np.mean(losses)),
                           dev_auc=dev_auc)
        history.append(stats)
        if log is not None:
            log(format_epoch_line(stats))
        if not np.isnan(dev_auc) and dev_auc > best_auc:
            best_auc = dev_auc
            best_epoch = epoch
            best_params = state.params.copy() if state.params is not None else None
            best_theta = state.theta.copy() if state.theta is not None else None

    if best_epoch is not None:
        return TrainResult(params=best_params, theta=best_theta,
                           history=history, best_epoch=best_epoch)
    return TrainResult(params=state.params, theta=state.theta,
                       history=history, best_epoch=None)


def _dev_auc(dev: Corpus | None, state: TrainState,
             fixed_vectors: dict[str, np.ndarray] | None) -> float:
    if dev is None or not dev.has_gold:
        return float("nan")
    if state.params is not None:
        preds = evaluation.predict_mentions(dev, state.params)
    else:
        preds = _predict_fixed(dev, state.theta, fixed_vectors)
    curve = evaluation.sentential_pr(preds, dev.gold_mention_map(), dev.na_id)
    return curve.auc


def _predict_fixed(corpus: Corpus, theta: np.ndarray,
                   fixed_vectors: dict[str, np.ndarray] | None):
    if fixed_vectors is None:
        raise ValueError("fixed-vector prediction needs a vector table")
    na = corpus.na_id
    preds = []
    for bag in corpus.bags:
        scores = fixed_vectors[bag.pair_id] @ theta.T
        for i in range(bag.size):
            row = scores[i]
            best = len(row) - 1 - int(np.argmax(row[::-1]))
            preds.append(evaluation.MentionPrediction(
                bag_id=bag.pair_id, sentence_index=i, relation=best,
                confidence=float(row[best] - row[na])))
    return preds
