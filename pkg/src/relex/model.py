"""Factor-graph scoring over a bag of sentences.

A bag couples latent per-sentence relation labels z (NA allowed) to
aggregate extraction bits t through a deterministic OR, and t to the
observed KB bits d through asymmetric soft agreement penalties.  The joint
log score is the sum of mention scores plus mu times the agreement
penalties; three task losses (0/1, relation-level Hamming, mention-level
Hamming) drive loss-augmented inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoder import SentenceExample

LOSS_VARIANTS = ("zero_one", "relation_hamming", "mention_hamming")


@dataclass(frozen=True)
class Bag:
    """All sentences for one entity pair, plus its observed KB bits.

    ``observed_d`` has one bit per KB relation (NA is never a KB fact).
    ``gold`` optionally carries per-sentence annotation: a relation id, the
    NA id (= number of relations), or None for unlabeled.
    """

    pair_id: str
    sentences: tuple[SentenceExample, ...]
    observed_d: tuple[int, ...]
    head_freq: int = 0
    tail_freq: int = 0
    gold: tuple[int | None, ...] | None = None

    def __post_init__(self):
        if len(self.sentences) < 1:
            raise ValueError(f"bag {self.pair_id}: needs at least one sentence")
        if any(b not in (0, 1) for b in self.observed_d):
            raise ValueError(f"bag {self.pair_id}: observed_d must be 0/1 bits")
        if self.head_freq < 0 or self.tail_freq < 0:
            raise ValueError(f"bag {self.pair_id}: negative entity frequency")
        if self.gold is not None and len(self.gold) != len(self.sentences):
            raise ValueError(f"bag {self.pair_id}: gold length mismatch")

    @property
    def size(self) -> int:
        return len(self.sentences)


@dataclass(frozen=True)
class Hyperparams:
    """Model and optimization knobs.

    mu scales the KB agreement penalties; alpha_t penalizes an observed fact
    that was not extracted, alpha_d an extraction absent from the KB.
    beta1/beta2 are the bag-size weighting thresholds.
    """

    mu: float = 100.0
    alpha_t: float = 1.0
    alpha_d: float = 1.0
    beta1: int = 10
    beta2: int = 40
    loss_variant: str = "mention_hamming"
    freq_scaling: bool = False
    freq_ref: float = 1000.0
    restarts: int = 30
    learning_rate: float = 0.01
    mira_cap: float = 1.0

    def __post_init__(self):
        if self.mu < 0 or self.alpha_t < 0 or self.alpha_d < 0:
            raise ValueError("penalties must be non-negative")
        if self.beta1 > self.beta2:
            raise ValueError("beta1 must not exceed beta2")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.restarts < 1:
            raise ValueError("restarts must be positive")
        if self.freq_ref <= 0:
            raise ValueError("freq_ref must be positive")


def implied_t(z, num_relations: int) -> tuple[int, ...]:
    """The unique aggregate bits consistent with the deterministic OR."""
    t = [0] * num_relations
    for zi in z:
        if 0 <= zi < num_relations:
            t[zi] = 1
    return tuple(t)


@dataclass(frozen=True)
class Assignment:
    """A joint configuration (z, t, d_star); t is forced to implied_t(z)."""

    z: tuple[int, ...]
    t: tuple[int, ...]
    d_star: tuple[int, ...]

    def __post_init__(self):
        if self.t != implied_t(self.z, len(self.t)):
            raise ValueError("t inconsistent with the deterministic OR over z")
        if len(self.d_star) != len(self.t):
            raise ValueError("d_star and t must have equal length")

    @classmethod
    def build(cls, z, d_star, num_relations: int) -> "Assignment":
        return cls(z=tuple(int(v) for v in z),
                   t=implied_t(z, num_relations),
                   d_star=tuple(int(v) for v in d_star))


def freq_scale(hp: Hyperparams, bag: Bag) -> float:
    """Popularity factor in [0.1, 1]: popular entities pay fuller penalties."""
    if not hp.freq_scaling:
        return 1.0
    raw = math.log1p(min(bag.head_freq, bag.tail_freq)) / math.log1p(hp.freq_ref)
    return min(1.0, max(0.1, raw))


def effective_alphas(hp: Hyperparams, bag: Bag) -> tuple[float, float]:
    g = freq_scale(hp, bag)
    return hp.alpha_t * g, hp.alpha_d * g


def agreement_logpenalty(t_bit: int, d_bit: int, hp: Hyperparams, bag: Bag) -> float:
    """Log of the agreement factor: 0 on agreement, else a negative penalty."""
    alpha_t, alpha_d = effective_alphas(hp, bag)
    if t_bit == d_bit:
        return 0.0
    return -alpha_t if d_bit == 1 else -alpha_d


def penalty_sum(t, d, alpha_t: float, alpha_d: float) -> float:
    """Sum of agreement log penalties over all relations."""
    t = np.asarray(t)
    d = np.asarray(d)
    missed = (t == 0) & (d == 1)
    extra = (t == 1) & (d == 0)
    return float(-alpha_t * missed.sum() - alpha_d * extra.sum())


def joint_logscore(bag: Bag, scores: np.ndarray, z, d_star,
                   hp: Hyperparams) -> float:
    """Log of the unnormalized joint: mention scores + mu * agreement terms.

    ``scores`` is the precomputed mention-score table, one row per sentence
    and one column per relation including NA as the last column.
    """
    n, cols = scores.shape
    num_relations = cols - 1
    if n != bag.size or len(d_star) != num_relations:
        raise ValueError("score table or d_star shape does not match the bag")
    t = implied_t(z, num_relations)
    alpha_t, alpha_d = effective_alphas(hp, bag)
    mention_part = float(scores[np.arange(n), np.asarray(z)].sum())
    return mention_part + hp.mu * penalty_sum(t, d_star, alpha_t, alpha_d)


def task_loss_bits(z, d_star, observed_d, loss_variant: str) -> float:
    """Task loss of an assignment against observed KB bits.

    zero_one: 1 unless d_star matches exactly.  relation_hamming: number of
    differing bits.  mention_hamming: number of mentions labeled with a
    relation the KB does not list for this pair (NA never penalized).
    """
    d = tuple(int(b) for b in observed_d)
    if loss_variant == "zero_one":
        return 0.0 if tuple(int(b) for b in d_star) == d else 1.0
    if loss_variant == "relation_hamming":
        return float(sum(abs(int(a) - int(b)) for a, b in zip(d_star, d)))
    if loss_variant == "mention_hamming":
        num_relations = len(d)
        return float(sum(1 for zi in z if 0 <= zi < num_relations and d[zi] == 0))
    raise ValueError(f"unknown loss variant {loss_variant!r}")


def task_loss(z, d_star, bag: Bag, loss_variant: str) -> float:
    """Task loss of an assignment against the bag's observed KB bits."""
    return task_loss_bits(z, d_star, bag.observed_d, loss_variant)


def bag_weight(n: int, hp: Hyperparams) -> float:
    """Down-weighting for large bags, where search error inflates gradients."""
    if n < hp.beta1:
        return 1.0
    if n <= hp.beta2:
        return hp.beta1 / n
    return (hp.beta1 / n) ** 2
