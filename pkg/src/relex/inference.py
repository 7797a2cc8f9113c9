"""MAP solvers for the bag-level factor graph.

Two problems arise in training: the KB-constrained maximization (d fixed to
the observed bits) and the loss-augmented maximization (d free, task loss
added).  Three solvers are provided: exhaustive enumeration (exact, used as
the oracle), A* over left-to-right label assignments (exact, admissible
heuristic), and steepest-ascent local search with random restarts
(approximate, scales to large bags).

All solvers share one decomposition.  Given z, the aggregate bits t are
implied; for each relation the best d* bit and its combined penalty+loss
value depend only on t_j, except for the non-decomposable 0/1 loss whose
global bonus is handled separately.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field

import numpy as np

from .model import (Assignment, Bag, Hyperparams, effective_alphas,
                    implied_t, penalty_sum, task_loss_bits)

CONSTRAINED = "constrained"
LOSS_AUGMENTED = "loss_augmented"


class BudgetExceededError(Exception):
    """Exhaustive enumeration would exceed the configured budget."""


class SearchBudgetExceeded(Exception):
    """A* hit its node cap; the caller should fall back to local search."""


@dataclass(frozen=True)
class MapSolution:
    assignment: Assignment
    objective: float
    optimal: bool
    trace: tuple = ()


@dataclass
class MapProblem:
    """One MAP instance distilled to numbers.

    ``scores[i, r]`` is the mention score of labeling sentence i with
    relation r; the last column is NA.  alpha_t/alpha_d are the effective
    (frequency-scaled) penalties for this bag.
    """

    scores: np.ndarray
    observed_d: np.ndarray
    mu: float
    alpha_t: float
    alpha_d: float
    loss_variant: str
    mode: str

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.observed_d = np.asarray(self.observed_d, dtype=np.int64)
        if self.scores.ndim != 2:
            raise ValueError("scores must be a 2D table")
        if self.scores.shape[1] != len(self.observed_d) + 1:
            raise ValueError("scores must have one column per relation plus NA")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if self.mode not in (CONSTRAINED, LOSS_AUGMENTED):
            raise ValueError(f"unknown mode {self.mode!r}")

    @classmethod
    def from_bag(cls, bag: Bag, scores: np.ndarray, hp: Hyperparams,
                 mode: str) -> "MapProblem":
        alpha_t, alpha_d = effective_alphas(hp, bag)
        return cls(scores=scores, observed_d=np.asarray(bag.observed_d),
                   mu=hp.mu, alpha_t=alpha_t, alpha_d=alpha_d,
                   loss_variant=hp.loss_variant, mode=mode)

    @property
    def num_mentions(self) -> int:
        return self.scores.shape[0]

    @property
    def num_relations(self) -> int:
        return self.scores.shape[1] - 1

    @property
    def na_id(self) -> int:
        return self.num_relations

    @property
    def _is_zero_one(self) -> bool:
        return self.mode == LOSS_AUGMENTED and self.loss_variant == "zero_one"

    def effective_scores(self) -> np.ndarray:
        """Score table with decomposable loss terms folded in.

        The mention-level Hamming loss adds 1 to every non-NA relation the KB
        does not list, which makes loss-augmented search identical in shape
        to the constrained one.
        """
        if self.mode == LOSS_AUGMENTED and self.loss_variant == "mention_hamming":
            bonus = np.concatenate([(self.observed_d == 0).astype(np.float64), [0.0]])
            return self.scores + bonus
        return self.scores

    def aggregate_tables(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-relation aggregate value as a function of t_j.

        Returns (agg0, agg1) where agg<b>[j] is the exact contribution of
        relation j when t_j = b: the mu-scaled agreement penalty plus, in
        loss-augmented mode, the best achievable d*-dependent loss term.
        Zero for the 0/1 variant, whose loss does not decompose.
        """
        d = self.observed_d
        mu_at, mu_ad = self.mu * self.alpha_t, self.mu * self.alpha_d
        if self.mode == CONSTRAINED:
            agg0 = np.where(d == 1, -mu_at, 0.0)
            agg1 = np.where(d == 1, 0.0, -mu_ad)
        elif self.loss_variant == "relation_hamming":
            agg0 = np.where(d == 1, 1.0, np.maximum(0.0, 1.0 - mu_at))
            agg1 = np.where(d == 1, np.maximum(0.0, 1.0 - mu_ad), 1.0)
        else:
            # mention_hamming (loss folded into scores) and zero_one: the
            # free d* can always match t, so the aggregate part is 0.
            agg0 = np.zeros(len(d))
            agg1 = np.zeros(len(d))
        return agg0, agg1

    def zero_one_bonus(self, t: np.ndarray) -> float:
        """Exact d*-maximized penalty+loss total for the 0/1 variant, given t.

        The penalty-optimal d* equals t (ties at zero penalties break toward
        the observed bits); if that already disagrees with d the loss bonus
        of 1 is free, otherwise the best single flip is weighed against it.
        """
        d = self.observed_d
        mu_at, mu_ad = self.mu * self.alpha_t, self.mu * self.alpha_d
        tie = np.where(t == 1, mu_ad == 0.0, mu_at == 0.0)
        pen_opt = np.where(tie, d, t)
        if np.any(pen_opt != d):
            return 1.0
        flip_cost = np.where(t == 1, mu_ad, mu_at)
        if len(flip_cost) == 0:
            return 0.0
        return max(0.0, 1.0 - float(flip_cost.min()))

    def aggregate_value(self, t: np.ndarray) -> float:
        agg0, agg1 = self.aggregate_tables()
        total = float(np.where(t == 1, agg1, agg0).sum())
        if self._is_zero_one:
            total += self.zero_one_bonus(t)
        return total

    def solve_d(self, t) -> np.ndarray:
        if self.mode == CONSTRAINED:
            return self.observed_d.copy()
        return solve_d_given_t(t, self.observed_d, self.mu, self.alpha_t,
                               self.alpha_d, self.loss_variant)

    def objective(self, z) -> float:
        """Objective recomputed from scratch through the model definitions."""
        z = np.asarray(z)
        t = np.asarray(implied_t(z, self.num_relations))
        d_star = self.solve_d(t)
        value = float(self.scores[np.arange(len(z)), z].sum())
        value += self.mu * penalty_sum(t, d_star, self.alpha_t, self.alpha_d)
        if self.mode == LOSS_AUGMENTED:
            value += task_loss_bits(z, d_star, self.observed_d, self.loss_variant)
        return value

    def solution_from_z(self, z, optimal: bool, trace=()) -> MapSolution:
        z = tuple(int(v) for v in z)
        t = implied_t(z, self.num_relations)
        d_star = self.solve_d(np.asarray(t))
        assignment = Assignment(z=z, t=t, d_star=tuple(int(b) for b in d_star))
        return MapSolution(assignment=assignment, objective=self.objective(z),
                           optimal=optimal, trace=tuple(trace))


def solve_d_given_t(t, observed_d, mu: float, alpha_t: float, alpha_d: float,
                    loss_variant: str) -> np.ndarray:
    """Best free d* given aggregate bits t, ties broken toward observed bits.

    For the relation-level Hamming loss (and the penalty-only mention case)
    each bit is independent; the 0/1 loss awards a single global bonus for
    any disagreement, so at most one bit is flipped away from the
    penalty-optimal vector.
    """
    t = np.asarray(t, dtype=np.int64)
    d = np.asarray(observed_d, dtype=np.int64)
    mu_at, mu_ad = mu * alpha_t, mu * alpha_d

    def pen(tj: int, b: int) -> float:
        if tj == b:
            return 0.0
        return -mu_at if b == 1 else -mu_ad

    if loss_variant in ("relation_hamming", "mention_hamming"):
        bonus = 1.0 if loss_variant == "relation_hamming" else 0.0
        out = np.empty_like(d)
        for j in range(len(d)):
            keep = pen(t[j], d[j])
            flip = pen(t[j], 1 - d[j]) + bonus
            out[j] = d[j] if keep >= flip else 1 - d[j]
        return out

    if loss_variant == "zero_one":
        tie = np.where(t == 1, mu_ad == 0.0, mu_at == 0.0)
        pen_opt = np.where(tie, d, t)
        if np.any(pen_opt != d):
            return pen_opt.astype(np.int64)
        # Penalty-optimal d* agrees with d everywhere: flip the cheapest bit
        # if the unit loss bonus pays for it, else stay at d.
        flip_cost = np.where(t == 1, mu_ad, mu_at)
        if len(flip_cost) == 0:
            return d.copy()
        j = int(np.argmin(flip_cost))
        if 1.0 - float(flip_cost[j]) > 0.0:
            out = d.copy()
            out[j] = 1 - out[j]
            return out
        return d.copy()

    raise ValueError(f"unknown loss variant {loss_variant!r}")


def exhaustive_map(problem: MapProblem, budget: int = 1_000_000) -> MapSolution:
    """Exact optimum by enumerating every z, lexicographically tie-broken.

    For each configuration the objective is evaluated plainly: the implied
    t, the d* from solve_d_given_t, the mu-scaled penalties and the task
    loss.  Vectorized over all (R+1)^n configurations.
    """
    n, num_rel = problem.num_mentions, problem.num_relations
    labels = num_rel + 1
    total = labels ** n
    if total > budget:
        raise BudgetExceededError(f"{labels}^{n} = {total} exceeds budget {budget}")

    codes = np.arange(total)
    place = labels ** np.arange(n - 1, -1, -1)
    zs = (codes[:, None] // place[None, :]) % labels  # lexicographic order

    svals = problem.scores[np.arange(n)[None, :], zs].sum(axis=1)
    ts = (zs[:, :, None] == np.arange(num_rel)[None, None, :]).any(axis=1)

    d = problem.observed_d
    if problem.mode == CONSTRAINED:
        mu_at = problem.mu * problem.alpha_t
        mu_ad = problem.mu * problem.alpha_d
        pen = np.where(ts, np.where(d == 1, 0.0, -mu_ad),
                       np.where(d == 1, -mu_at, 0.0)).sum(axis=1)
        objectives = svals + pen
    else:
        _, pen_plus_loss_d = _vector_solve_d(problem, ts)
        objectives = svals + pen_plus_loss_d
        if problem.loss_variant == "mention_hamming":
            unobserved = np.concatenate([(d == 0).astype(np.float64), [0.0]])
            objectives = objectives + unobserved[zs].sum(axis=1)

    best = int(np.argmax(objectives))  # first max = lexicographically least z
    return problem.solution_from_z(zs[best], optimal=True)


def _vector_solve_d(problem: MapProblem, ts: np.ndarray):
    """d*-maximized penalty(+d-loss) per configuration, vectorized over ts."""
    d = problem.observed_d
    mu_at = problem.mu * problem.alpha_t
    mu_ad = problem.mu * problem.alpha_d
    variant = problem.loss_variant

    if variant == "relation_hamming":
        keep = np.where(ts == d, 0.0, np.where(d == 1, -mu_at, -mu_ad))
        flip = np.where(ts == (1 - d), 0.0, np.where(d == 0, -mu_at, -mu_ad)) + 1.0
        best = np.maximum(keep, flip)
        dstars = np.where(keep >= flip, d, 1 - d)
        return dstars, best.sum(axis=1)

    if variant == "mention_hamming":
        # free d* tracks t at zero penalty (ties toward d change nothing)
        tie = np.where(ts == 1, mu_ad == 0.0, mu_at == 0.0)
        dstars = np.where(tie, d, ts)
        return dstars, np.zeros(len(ts))

    if variant == "zero_one":
        tie = np.where(ts == 1, mu_ad == 0.0, mu_at == 0.0)
        pen_opt = np.where(tie, d, ts)
        mismatch = (pen_opt != d).any(axis=1)
        if ts.shape[1] == 0:
            return pen_opt, np.zeros(len(ts))
        flip_cost = np.where(ts == 1, mu_ad, mu_at)
        jmin = np.argmin(flip_cost, axis=1)
        gain = 1.0 - flip_cost[np.arange(len(ts)), jmin]
        value = np.where(mismatch, 1.0, np.maximum(0.0, gain))
        dstars = pen_opt.copy()
        do_flip = ~mismatch & (gain > 0.0)
        rows = np.where(do_flip)[0]
        dstars[rows, jmin[rows]] = 1 - dstars[rows, jmin[rows]]
        return dstars, value

    raise ValueError(f"unknown loss variant {variant!r}")


def astar_map(problem: MapProblem, node_cap: int = 200_000) -> MapSolution:
    """Exact optimum via best-first search over left-to-right z assignments.

    The bound adds, for every unassigned mention, its best mention score,
    and for every relation not yet extracted, the better of its two
    aggregate values; relations already extracted contribute their exact
    value.  Term-wise this upper-bounds every completion, and the bound is
    non-increasing along a path, so the first complete node popped is
    optimal (lexicographically least among optima via the tie-break key).
    """
    n, num_rel = problem.num_mentions, problem.num_relations
    eff = problem.effective_scores()
    agg0, agg1 = problem.aggregate_tables()
    agg_best = np.maximum(agg0, agg1)
    bonus_ub = 1.0 if problem._is_zero_one else 0.0

    max_per_mention = eff.max(axis=1)
    suffix = np.zeros(n + 1)
    suffix[:n] = np.cumsum(max_per_mention[::-1])[::-1]
    total_agg_best = float(agg_best.sum())
    agg0_arr = agg0

    def full_f(eff_sum: float, mask: int) -> float:
        extracted = _mask_bits(mask, num_rel)
        committed = float(agg1[extracted].sum()) if extracted.size else 0.0
        rest = float(agg0_arr[~_mask_index(mask, num_rel)].sum())
        value = eff_sum + committed + rest
        if problem._is_zero_one:
            t = _mask_index(mask, num_rel).astype(np.int64)
            value += problem.zero_one_bonus(t)
        return value

    root_f = suffix[0] + total_agg_best + bonus_ub if n > 0 else full_f(0.0, 0)
    heap = [(-root_f, (), 0, 0.0, 0.0)]  # (-f, z_prefix, t_mask, eff_sum, committed_less_best)
    expansions = 0
    while heap:
        neg_f, prefix, mask, eff_sum, adjust = heapq.heappop(heap)
        depth = len(prefix)
        if depth == n:
            return problem.solution_from_z(prefix, optimal=True)
        expansions += 1
        if expansions > node_cap:
            raise SearchBudgetExceeded(f"A* exceeded {node_cap} expansions")
        for r in range(num_rel + 1):
            child_eff = eff_sum + eff[depth, r]
            child_mask = mask
            child_adjust = adjust
            if r < num_rel and not (mask >> r) & 1:
                child_mask |= 1 << r
                child_adjust += float(agg1[r] - agg_best[r])
            child_prefix = prefix + (r,)
            if depth + 1 == n:
                f = full_f(child_eff, child_mask)
            else:
                f = child_eff + suffix[depth + 1] + total_agg_best + child_adjust + bonus_ub
            heapq.heappush(heap, (-f, child_prefix, child_mask, child_eff, child_adjust))
    raise RuntimeError("search exhausted without a complete assignment")


def _mask_bits(mask: int, num_rel: int) -> np.ndarray:
    return np.array([j for j in range(num_rel) if (mask >> j) & 1], dtype=np.int64)


def _mask_index(mask: int, num_rel: int) -> np.ndarray:
    return np.array([(mask >> j) & 1 for j in range(num_rel)], dtype=bool)


def local_search_map(problem: MapProblem, rng: np.random.Generator,
                     restarts: int = 30, max_steps: int = 1000,
                     collect_trace: bool = False) -> MapSolution:
    """Steepest-ascent hill climbing over z with random restarts.

    Restart 0 starts from the per-mention argmax; the rest start from
    uniformly random assignments.  Moves are (a) reassigning a single
    mention to any other label and (b) flipping every mention of one
    relation to NA at once; deltas are evaluated incrementally against the
    shared aggregate decomposition.
    """
    n, num_rel = problem.num_mentions, problem.num_relations
    na = num_rel
    eff = problem.effective_scores()
    agg0, agg1 = problem.aggregate_tables()
    off_gain_tbl = np.concatenate([agg0 - agg1, [0.0]])  # turning a relation off
    on_gain_tbl = np.concatenate([agg1 - agg0, [0.0]])   # turning a relation on
    rows = np.arange(n)

    best_z = None
    best_obj = -np.inf
    trace = []

    for restart in range(restarts):
        if restart == 0:
            z = eff.argmax(axis=1).astype(np.int64)
        else:
            z = rng.integers(0, num_rel + 1, size=n)
        counts = np.bincount(z[z < num_rel], minlength=num_rel)
        obj = _full_objective(problem, eff, agg0, agg1, z, counts)
        if collect_trace:
            trace.append((restart, tuple(int(v) for v in z), obj))

        counts_pad = np.append(counts, 2)  # NA slot: never treated as "last mention"
        for _ in range(max_steps):
            counts_pad[:num_rel] = counts
            cur = eff[rows, z]
            delta = eff - cur[:, None]
            mention_off = np.where(counts_pad[z] == 1, off_gain_tbl[z], 0.0)
            turn_on = np.where(counts == 0, on_gain_tbl[:num_rel], 0.0)
            delta += mention_off[:, None]
            delta[:, :num_rel] += turn_on[None, :]
            delta[rows, z] = -np.inf

            if problem._is_zero_one:
                t_now = (counts > 0).astype(np.int64)
                bonus_now = problem.zero_one_bonus(t_now)
                for i in range(n):
                    for r in range(num_rel + 1):
                        if r == z[i]:
                            continue
                        t_new = t_now.copy()
                        if z[i] < num_rel and counts[z[i]] == 1:
                            t_new[z[i]] = 0
                        if r < num_rel:
                            t_new[r] = 1
                        delta[i, r] += problem.zero_one_bonus(t_new) - bonus_now

            # bulk moves: clear one relation entirely to NA
            clear_delta = np.full(num_rel, -np.inf)
            active = np.where(counts > 0)[0]
            if active.size:
                na_gain = eff[:, na] - cur
                sums = np.bincount(z[z < num_rel], weights=na_gain[z < num_rel],
                                   minlength=num_rel)
                clear_delta[active] = sums[active] + (agg0 - agg1)[active]
                if problem._is_zero_one:
                    t_now = (counts > 0).astype(np.int64)
                    bonus_now = problem.zero_one_bonus(t_now)
                    for j in active:
                        t_new = t_now.copy()
                        t_new[j] = 0
                        clear_delta[j] += problem.zero_one_bonus(t_new) - bonus_now

            best_mention = np.unravel_index(np.argmax(delta), delta.shape)
            mention_gain = delta[best_mention]
            clear_j = int(np.argmax(clear_delta)) if num_rel else -1
            clear_gain = clear_delta[clear_j] if num_rel else -np.inf

            if mention_gain < 1e-12 and clear_gain < 1e-12:
                break
            if mention_gain >= clear_gain:
                i, r = int(best_mention[0]), int(best_mention[1])
                old = int(z[i])
                z[i] = r
                if old < num_rel:
                    counts[old] -= 1
                if r < num_rel:
                    counts[r] += 1
                obj += float(mention_gain)
            else:
                members = np.where(z == clear_j)[0]
                z[members] = na
                counts[clear_j] = 0
                obj += float(clear_gain)
            if collect_trace:
                trace.append((restart, tuple(int(v) for v in z), obj))

        final_obj = _full_objective(problem, eff, agg0, agg1, z, counts)
        if final_obj > best_obj:
            best_obj = final_obj
            best_z = z.copy()

    return problem.solution_from_z(best_z, optimal=False, trace=trace)


def _full_objective(problem, eff, agg0, agg1, z, counts) -> float:
    t = (counts > 0).astype(np.int64)
    value = float(eff[np.arange(len(z)), z].sum())
    value += float(np.where(t == 1, agg1, agg0).sum())
    if problem._is_zero_one:
        value += problem.zero_one_bonus(t)
    return value
