"""Evaluation protocols: sentential PR/AUC, P@N, held-out PR, KB splits,
and paired bootstrap significance.

Mention confidence is the margin over NA (score of the predicted relation
minus the NA score): scale-robust and monotone in the model's own decision
rule.  PR curves are integrated by the trapezoid rule over the achieved
points, with the first point's precision extended back to recall zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import Corpus, NA_NAME
from .encoder import EncoderParams, encode


@dataclass(frozen=True)
class MentionPrediction:
    bag_id: str
    sentence_index: int
    relation: int
    confidence: float

    @property
    def key(self) -> tuple[str, int]:
        return (self.bag_id, self.sentence_index)


@dataclass(frozen=True)
class RankedPoint:
    rank: int
    confidence: float
    precision: float
    recall: float
    correct: bool


@dataclass(frozen=True)
class PRCurve:
    """(recall, precision) points, anchor included, with trapezoidal AUC."""

    points: tuple[tuple[float, float], ...]
    auc: float
    entries: tuple[RankedPoint, ...] = ()


def trapezoid_auc(points) -> float:
    """Area under piecewise-linear precision as a function of recall."""
    area = 0.0
    for (r0, p0), (r1, p1) in zip(points, points[1:]):
        area += (r1 - r0) * (p0 + p1) / 2.0
    return area


def _curve_from_ranked(correct: np.ndarray, confidences: np.ndarray,
                       num_positive: int) -> PRCurve:
    if len(correct) == 0 or num_positive == 0:
        return PRCurve(points=(), auc=0.0)
    cum = np.cumsum(correct)
    ranks = np.arange(1, len(correct) + 1)
    precision = cum / ranks
    recall = cum / num_positive
    points = [(0.0, float(precision[0]))]
    points += [(float(r), float(p)) for r, p in zip(recall, precision)]
    entries = tuple(
        RankedPoint(rank=int(k), confidence=float(c), precision=float(p),
                    recall=float(r), correct=bool(ok))
        for k, c, p, r, ok in zip(ranks, confidences, precision, recall, correct)
    )
    return PRCurve(points=tuple(points), auc=trapezoid_auc(points), entries=entries)


def predict_mentions(corpus: Corpus, params: EncoderParams) -> list[MentionPrediction]:
    """Score every sentence; argmax over relations including NA.

    Exact ties break toward the highest id, so an all-tied (e.g. untrained)
    model predicts NA.  Confidence is the margin over NA.
    """
    if params.num_relations != corpus.num_relations:
        raise ValueError(
            f"checkpoint has {params.num_relations} relations, corpus has "
            f"{corpus.num_relations}"
        )
    na = corpus.na_id
    preds = []
    for bag in corpus.bags:
        for i, sent in enumerate(bag.sentences):
            scores = params.theta @ encode(sent, params).x
            best = len(scores) - 1 - int(np.argmax(scores[::-1]))
            preds.append(MentionPrediction(
                bag_id=bag.pair_id, sentence_index=i, relation=best,
                confidence=float(scores[best] - scores[na])))
    return preds


def _ranked(preds, na_id: int):
    """Non-NA predictions in evaluation order: confidence desc, stable keys."""
    kept = [p for p in preds if p.relation != na_id]
    kept.sort(key=lambda p: (-p.confidence, p.bag_id, p.sentence_index))
    return kept


def sentential_pr(preds, gold_map: dict[tuple[str, int], int],
                  na_id: int) -> PRCurve:
    """Mention-level PR against gold labels.

    Predictions on sentences without a gold label are excluded (the
    evaluation set is whatever was annotated); recall is over gold non-NA
    mentions.
    """
    if not gold_map:
        raise ValueError("no gold labels available for sentential evaluation")
    positives = sum(1 for g in gold_map.values() if g != na_id)
    ranked = [p for p in _ranked(preds, na_id) if p.key in gold_map]
    correct = np.array([gold_map[p.key] == p.relation for p in ranked], dtype=np.float64)
    confidences = np.array([p.confidence for p in ranked], dtype=np.float64)
    return _curve_from_ranked(correct, confidences, positives)


def p_at_n(preds, gold_map: dict[tuple[str, int], int], relation: int,
           n: int, na_id: int) -> tuple[float, int]:
    """Precision among the n most confident predictions of one relation.

    Returns (precision, n_used); n_used < n flags that fewer predictions
    exist.
    """
    ranked = [p for p in _ranked(preds, na_id)
              if p.relation == relation and p.key in gold_map]
    top = ranked[:n]
    if not top:
        return 0.0, 0
    hits = sum(1 for p in top if gold_map[p.key] == p.relation)
    return hits / len(top), len(top)


def heldout_pr(preds, corpus: Corpus) -> PRCurve:
    """Proposition-level PR against the observed KB bits.

    Mention predictions aggregate to (pair, relation) propositions by max
    confidence.  A correct new fact absent from the KB counts against
    precision; that bias is inherent to held-out evaluation.
    """
    na = corpus.na_id
    best: dict[tuple[str, int], float] = {}
    for p in preds:
        if p.relation == na:
            continue
        key = (p.bag_id, p.relation)
        if key not in best or p.confidence > best[key]:
            best[key] = p.confidence
    kb = corpus.kb_facts()
    ranked = sorted(best.items(), key=lambda kv: (-kv[1], kv[0][0], kv[0][1]))
    correct = np.array([key in kb for key, _ in ranked], dtype=np.float64)
    confidences = np.array([conf for _, conf in ranked], dtype=np.float64)
    return _curve_from_ranked(correct, confidences, len(kb))


def in_out_kb_split(preds, gold_map: dict[tuple[str, int], int],
                    kb: set[tuple[str, int]], na_id: int):
    """Sentential PR restricted to gold mentions in vs. absent from the KB.

    Gold non-NA mentions are partitioned by whether their (pair, relation)
    fact appears in the KB; each side is evaluated as its own gold set.  An
    empty partition yields None.
    """
    in_gold, out_gold = {}, {}
    for key, g in gold_map.items():
        if g == na_id:
            continue
        (in_gold if (key[0], g) in kb else out_gold)[key] = g
    in_curve = sentential_pr(preds, in_gold, na_id) if in_gold else None
    out_curve = sentential_pr(preds, out_gold, na_id) if out_gold else None
    return in_curve, out_curve


def paired_bootstrap(preds_a, preds_b, gold_map: dict[tuple[str, int], int],
                     na_id: int, iterations: int = 10_000, seed: int = 0) -> float:
    """Paired bootstrap over gold mentions.

    Resamples the gold-labeled sentences with replacement and recomputes
    both systems' sentential AUC per resample; returns the fraction of
    resamples where system B matches or beats system A, exact ties counting
    one half (so comparing a system with itself yields 0.5).
    """
    if not gold_map:
        raise ValueError("no gold labels available for bootstrap")
    keys = sorted(gold_map)
    index = {k: i for i, k in enumerate(keys)}
    positive_idx = np.array([i for i, k in enumerate(keys) if gold_map[k] != na_id],
                            dtype=np.int64)

    def prepare(preds):
        ranked = [p for p in _ranked(preds, na_id) if p.key in index]
        key_idx = np.array([index[p.key] for p in ranked], dtype=np.int64)
        correct = np.array([gold_map[p.key] == p.relation for p in ranked],
                           dtype=np.float64)
        return key_idx, correct

    systems = [prepare(preds_a), prepare(preds_b)]
    rng = np.random.default_rng(seed)
    n = len(keys)
    wins = 0.0
    for _ in range(iterations):
        weights = np.bincount(rng.integers(0, n, size=n), minlength=n)
        positives = int(weights[positive_idx].sum())
        aucs = []
        for key_idx, correct in systems:
            reps = weights[key_idx]
            expanded = np.repeat(correct, reps)
            if expanded.size == 0 or positives == 0:
                aucs.append(0.0)
                continue
            cum = np.cumsum(expanded)
            precision = cum / np.arange(1, expanded.size + 1)
            recall = cum / positives
            r = np.concatenate([[0.0], recall])
            p = np.concatenate([[precision[0]], precision])
            aucs.append(float(np.sum((r[1:] - r[:-1]) * (p[1:] + p[:-1]) / 2.0)))
        if aucs[1] > aucs[0]:
            wins += 1.0
        elif aucs[1] == aucs[0]:
            wins += 0.5
    return wins / iterations


def write_pr_csv(curve: PRCurve, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("rank,confidence,precision,recall\n")
        for e in curve.entries:
            fh.write(f"{e.rank},{e.confidence!r},{e.precision!r},{e.recall!r}\n")


def read_pr_csv(path: str) -> list[RankedPoint]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if header.strip() != "rank,confidence,precision,recall":
            raise ValueError(f"unexpected PR csv header: {header!r}")
        for line in fh:
            rank, conf, prec, rec = line.strip().split(",")
            entries.append(RankedPoint(rank=int(rank), confidence=float(conf),
                                       precision=float(prec), recall=float(rec),
                                       correct=False))
    return entries


def save_predictions(preds, path: str, relation_names: tuple[str, ...]) -> None:
    na = len(relation_names)
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            name = NA_NAME if p.relation == na else relation_names[p.relation]
            fh.write(json.dumps({
                "pair_id": p.bag_id, "sentence_index": p.sentence_index,
                "relation": name, "confidence": p.confidence,
            }) + "\n")


def load_predictions(path: str, relation_names: tuple[str, ...]) -> list[MentionPrediction]:
    names = {name: i for i, name in enumerate(relation_names)}
    names[NA_NAME] = len(relation_names)
    preds = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["relation"] not in names:
                raise ValueError(f"line {line_no}: unknown relation {rec['relation']!r}")
            preds.append(MentionPrediction(
                bag_id=str(rec["pair_id"]), sentence_index=int(rec["sentence_index"]),
                relation=names[rec["relation"]], confidence=float(rec["confidence"])))
    return preds
