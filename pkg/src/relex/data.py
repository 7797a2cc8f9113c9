"""Corpus ingestion, synthetic data with controlled KB missingness, and IO.

Corpus files are line-delimited JSON, one bag per line:

    {"pair_id": str, "head": str, "tail": str,
     "head_freq": int, "tail_freq": int, "relations": [str],
     "sentences": [{"tokens": [str], "head_pos": int, "tail_pos": int,
                    "gold": str|null}]}

"gold" may name a relation, be the literal string "NA", or be null for
unlabeled.  Checkpoints are a single JSON document with explicit shapes and
flat row-major arrays; Python's shortest-roundtrip float repr makes the
round trip bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderParams, SentenceExample
from .model import Bag

UNK_TOKEN = "<UNK>"
NA_NAME = "NA"
CHECKPOINT_VERSION = 1


class CorpusFormatError(Exception):
    pass


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class Corpus:
    """Relation inventory, vocabulary and bags; gold labels ride on the bags."""

    relation_names: tuple[str, ...]
    id_to_token: tuple[str, ...]
    bags: tuple[Bag, ...]
    true_facts: dict | None = None

    @property
    def vocab(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.id_to_token)}

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    @property
    def na_id(self) -> int:
        return len(self.relation_names)

    @property
    def has_gold(self) -> bool:
        return any(bag.gold is not None for bag in self.bags)

    @property
    def num_sentences(self) -> int:
        return sum(bag.size for bag in self.bags)

    def gold_mention_map(self) -> dict[tuple[str, int], int]:
        """(pair_id, sentence index) -> gold relation id (NA included)."""
        out = {}
        for bag in self.bags:
            if bag.gold is None:
                continue
            for i, g in enumerate(bag.gold):
                if g is not None:
                    out[(bag.pair_id, i)] = g
        return out

    def kb_facts(self) -> set[tuple[str, int]]:
        """(pair_id, relation id) pairs present in the observed KB bits."""
        return {(bag.pair_id, j) for bag in self.bags
                for j, bit in enumerate(bag.observed_d) if bit}


def _relation_id(name: str, relation_names: tuple[str, ...], line_no: int,
                 what: str) -> int:
    try:
        return relation_names.index(name)
    except ValueError:
        raise CorpusFormatError(
            f"line {line_no}: unknown relation name {name!r} in {what}"
        ) from None


def _parse_records(path: str) -> list[tuple[int, dict]]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"line {line_no}: malformed JSON ({exc})") from None
            if not isinstance(rec, dict):
                raise CorpusFormatError(f"line {line_no}: expected a JSON object")
            records.append((line_no, rec))
    return records


def load_corpus(path: str, relation_names: tuple[str, ...] | None = None,
                token_list: tuple[str, ...] | None = None) -> Corpus:
    """Load and validate a JSON-lines corpus.

    With ``relation_names``/``token_list`` given (e.g. from the training
    split), unknown relations are an error and unknown tokens map to UNK;
    otherwise the relation set is collected (sorted) and the vocabulary is
    built in first-appearance order with UNK reserved at id 0.
    """
    records = _parse_records(path)
    if not records:
        raise CorpusFormatError("empty corpus")

    if relation_names is None:
        seen: set[str] = set()
        for _, rec in records:
            seen.update(rec.get("relations", []))
            for sent in rec.get("sentences", []):
                g = sent.get("gold")
                if g is not None and g != NA_NAME:
                    seen.add(g)
        if NA_NAME in seen:
            raise CorpusFormatError(f"{NA_NAME!r} is reserved and cannot be a KB relation")
        relation_names = tuple(sorted(seen))
    else:
        relation_names = tuple(relation_names)

    build_vocab = token_list is None
    if build_vocab:
        vocab: dict[str, int] = {UNK_TOKEN: 0}
    else:
        vocab = {tok: i for i, tok in enumerate(token_list)}
        if UNK_TOKEN not in vocab:
            raise CorpusFormatError(f"supplied vocabulary lacks {UNK_TOKEN}")
    unk = vocab[UNK_TOKEN]

    na = len(relation_names)
    bags = []
    seen_pairs: set[str] = set()
    for line_no, rec in records:
        try:
            pair_id = str(rec["pair_id"])
            raw_sents = rec["sentences"]
        except KeyError as exc:
            raise CorpusFormatError(f"line {line_no}: missing field {exc}") from None
        if pair_id in seen_pairs:
            raise CorpusFormatError(f"line {line_no}: duplicate pair_id {pair_id!r}")
        seen_pairs.add(pair_id)
        if not raw_sents:
            raise CorpusFormatError(f"line {line_no}: bag has no sentences")

        observed = [0] * na
        for name in rec.get("relations", []):
            observed[_relation_id(name, relation_names, line_no, "relations")] = 1

        sentences, gold = [], []
        any_gold = False
        for sent in raw_sents:
            tokens = sent.get("tokens", [])
            if not tokens:
                raise CorpusFormatError(f"line {line_no}: sentence with no tokens")
            ids = []
            for tok in tokens:
                tok = str(tok)
                if tok not in vocab:
                    if build_vocab:
                        vocab[tok] = len(vocab)
                    else:
                        ids.append(unk)
                        continue
                ids.append(vocab[tok])
            head_pos, tail_pos = int(sent["head_pos"]), int(sent["tail_pos"])
            if not (0 <= head_pos < len(ids) and 0 <= tail_pos < len(ids)):
                raise CorpusFormatError(
                    f"line {line_no}: entity position out of range "
                    f"(head={head_pos}, tail={tail_pos}, length={len(ids)})"
                )
            sentences.append(SentenceExample(tokens=tuple(ids),
                                             head_pos=head_pos, tail_pos=tail_pos))
            g = sent.get("gold")
            if g is None:
                gold.append(None)
            elif g == NA_NAME:
                gold.append(na)
                any_gold = True
            else:
                gold.append(_relation_id(g, relation_names, line_no, "gold"))
                any_gold = True

        bags.append(Bag(
            pair_id=pair_id,
            sentences=tuple(sentences),
            observed_d=tuple(observed),
            head_freq=int(rec.get("head_freq", 0)),
            tail_freq=int(rec.get("tail_freq", 0)),
            gold=tuple(gold) if any_gold else None,
        ))

    id_to_token = tuple(sorted(vocab, key=vocab.get)) if build_vocab else tuple(token_list)
    return Corpus(relation_names=relation_names, id_to_token=id_to_token,
                  bags=tuple(bags))


def save_corpus(corpus: Corpus, path: str) -> None:
    """Write the JSON-lines format; inverse of load_corpus for loaded corpora."""
    na = corpus.na_id
    with open(path, "w", encoding="utf-8") as fh:
        for bag in corpus.bags:
            head, tail = _split_pair_id(bag.pair_id)
            rec = {
                "pair_id": bag.pair_id,
                "head": head,
                "tail": tail,
                "head_freq": bag.head_freq,
                "tail_freq": bag.tail_freq,
                "relations": [corpus.relation_names[j]
                              for j, bit in enumerate(bag.observed_d) if bit],
                "sentences": [
                    {
                        "tokens": [corpus.id_to_token[t] for t in sent.tokens],
                        "head_pos": sent.head_pos,
                        "tail_pos": sent.tail_pos,
                        "gold": _gold_name(bag.gold, i, corpus.relation_names, na),
                    }
                    for i, sent in enumerate(bag.sentences)
                ],
            }
            fh.write(json.dumps(rec) + "\n")


def _gold_name(gold, i, relation_names, na):
    if gold is None or gold[i] is None:
        return None
    return NA_NAME if gold[i] == na else relation_names[gold[i]]


def _split_pair_id(pair_id: str) -> tuple[str, str]:
    if "|" in pair_id:
        head, tail = pair_id.split("|", 1)
        return head, tail
    return pair_id, pair_id


def remap_corpus(corpus: Corpus, relation_names: tuple[str, ...],
                 id_to_token: tuple[str, ...]) -> Corpus:
    """Re-express a corpus in another corpus's relation ids and vocabulary.

    Tokens absent from the target vocabulary become UNK; relations must all
    exist in the target inventory.
    """
    vocab = {tok: i for i, tok in enumerate(id_to_token)}
    unk = vocab[UNK_TOKEN]
    old_names = corpus.relation_names
    rel_map = {}
    for i, name in enumerate(old_names):
        if name not in relation_names:
            raise CorpusFormatError(f"relation {name!r} missing from target inventory")
        rel_map[i] = relation_names.index(name)
    old_na, new_na = corpus.na_id, len(relation_names)

    bags = []
    for bag in corpus.bags:
        observed = [0] * len(relation_names)
        for j, bit in enumerate(bag.observed_d):
            if bit:
                observed[rel_map[j]] = 1
        gold = None
        if bag.gold is not None:
            gold = tuple(None if g is None else (new_na if g == old_na else rel_map[g])
                         for g in bag.gold)
        sentences = tuple(
            SentenceExample(
                tokens=tuple(vocab.get(corpus.id_to_token[t], unk) for t in sent.tokens),
                head_pos=sent.head_pos, tail_pos=sent.tail_pos)
            for sent in bag.sentences
        )
        bags.append(Bag(pair_id=bag.pair_id, sentences=sentences,
                        observed_d=tuple(observed), head_freq=bag.head_freq,
                        tail_freq=bag.tail_freq, gold=gold))
    return Corpus(relation_names=tuple(relation_names), id_to_token=tuple(id_to_token),
                  bags=tuple(bags), true_facts=corpus.true_facts)


@dataclass(frozen=True)
class SynthSpec:
    """Configuration of the synthetic distant-supervision generator.

    Each positive bag gets one true relation (the first num_relations
    positive bags cycle through a random permutation of all relations so
    every relation id is realized).  A sentence either expresses a true
    relation of its bag (becoming its gold label, and carrying the
    relation's signal token with probability p_signal) or is NA filler.
    Each true fact is dropped from the observed KB bits independently with
    probability missing_rate * (1 + min entity frequency)^(-freq_decay).
    """

    num_entities: int = 100
    zipf_exponent: float = 1.2
    num_relations: int = 4
    num_bags: int = 100
    na_fraction: float = 0.25
    sent_geom_p: float = 0.5
    max_sentences: int = 10
    big_bag_fraction: float = 0.0
    big_bag_size: int = 50
    vocab_size: int = 50
    p_signal: float = 0.9
    express_prob: float = 0.7
    missing_rate: float = 0.0
    freq_decay: float = 0.0
    min_len: int = 5
    max_len: int = 12
    seed: int = 0

    def __post_init__(self):
        for name in ("na_fraction", "sent_geom_p", "big_bag_fraction",
                     "p_signal", "express_prob", "missing_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.num_bags < 1:
            raise ValueError("num_bags must be positive")
        if self.num_entities < 2:
            raise ValueError("need at least two entities")
        if self.num_relations < 1:
            raise ValueError("need at least one relation")
        if not 2 <= self.min_len <= self.max_len:
            raise ValueError("need 2 <= min_len <= max_len")
        if self.max_sentences < 1 or self.big_bag_size < 1:
            raise ValueError("bag sizes must be positive")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")


def generate_synthetic(spec: SynthSpec) -> Corpus:
    """Deterministic synthetic corpus with gold labels and a true-fact table.

    RNG consumption order is fixed: (1) dyads, NA flags and true relations,
    (2) per-bag sentence counts and contents, (3) KB drops.  Entity
    frequencies are occurrence counts over the generated bags.
    """
    rng = np.random.default_rng(spec.seed)
    relation_names = tuple(f"r{j}" for j in range(spec.num_relations))
    na = spec.num_relations

    weights = (np.arange(spec.num_entities) + 1.0) ** (-spec.zipf_exponent)
    weights /= weights.sum()

    # phase 1: dyads and true facts
    pairs: list[tuple[int, int]] = []
    seen = set()
    attempts = 0
    while len(pairs) < spec.num_bags:
        attempts += 1
        if attempts > 200 * spec.num_bags:
            raise ValueError("could not sample enough distinct entity pairs")
        e1, e2 = rng.choice(spec.num_entities, size=2, replace=False, p=weights)
        if (e1, e2) in seen:
            continue
        seen.add((e1, e2))
        pairs.append((int(e1), int(e2)))

    is_na_bag = rng.random(spec.num_bags) < spec.na_fraction
    first_positives = [b for b in range(spec.num_bags) if not is_na_bag[b]]
    seeded = {}
    if first_positives:
        perm = rng.permutation(spec.num_relations)
        for slot, b in enumerate(first_positives[:spec.num_relations]):
            seeded[b] = int(perm[slot])
    true_rel = rng.integers(0, spec.num_relations, size=spec.num_bags)

    freq = np.zeros(spec.num_entities, dtype=np.int64)
    for e1, e2 in pairs:
        freq[e1] += 1
        freq[e2] += 1

    # phase 2: sentences
    bags_raw = []
    for b, (e1, e2) in enumerate(pairs):
        truths: tuple[int, ...] = ()
        if not is_na_bag[b]:
            truths = (seeded.get(b, int(true_rel[b])),)
        if rng.random() < spec.big_bag_fraction:
            n = spec.big_bag_size
        else:
            n = int(min(rng.geometric(spec.sent_geom_p), spec.max_sentences))
        sentences, gold = [], []
        for _ in range(n):
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            head_pos, tail_pos = (int(v) for v in rng.choice(length, size=2, replace=False))
            tokens = [f"w{int(w)}" for w in rng.integers(0, spec.vocab_size, size=length)]
            tokens[head_pos] = f"e{e1}"
            tokens[tail_pos] = f"e{e2}"
            label = na
            if truths and rng.random() < spec.express_prob:
                label = truths[int(rng.integers(0, len(truths)))]
                slots = [k for k in range(length) if k not in (head_pos, tail_pos)]
                if slots and rng.random() < spec.p_signal:
                    tokens[slots[int(rng.integers(0, len(slots)))]] = f"sig_{relation_names[label]}"
            sentences.append((tokens, head_pos, tail_pos))
            gold.append(label)
        bags_raw.append((b, e1, e2, truths, sentences, gold))

    # phase 3: KB drops
    vocab: dict[str, int] = {UNK_TOKEN: 0}
    bags = []
    true_facts: dict[str, tuple[str, ...]] = {}
    for b, e1, e2, truths, sentences, gold in bags_raw:
        min_freq = int(min(freq[e1], freq[e2]))
        drop_p = spec.missing_rate * (1.0 + min_freq) ** (-spec.freq_decay)
        observed = [0] * spec.num_relations
        for r in truths:
            if rng.random() >= drop_p:
                observed[r] = 1
        pair_id = f"e{e1}|e{e2}"
        sent_objs = []
        for tokens, head_pos, tail_pos in sentences:
            ids = []
            for tok in tokens:
                if tok not in vocab:
                    vocab[tok] = len(vocab)
                ids.append(vocab[tok])
            sent_objs.append(SentenceExample(tokens=tuple(ids),
                                             head_pos=head_pos, tail_pos=tail_pos))
        bags.append(Bag(pair_id=pair_id, sentences=tuple(sent_objs),
                        observed_d=tuple(observed),
                        head_freq=int(freq[e1]), tail_freq=int(freq[e2]),
                        gold=tuple(gold)))
        true_facts[pair_id] = tuple(relation_names[r] for r in truths)

    id_to_token = tuple(sorted(vocab, key=vocab.get))
    return Corpus(relation_names=relation_names, id_to_token=id_to_token,
                  bags=tuple(bags), true_facts=true_facts)


def save_checkpoint(params: EncoderParams, path: str, *,
                    vocab: tuple[str, ...], relation_names: tuple[str, ...],
                    hyperparams: dict | None = None) -> None:
    """Write a self-describing JSON checkpoint (lossless float round trip)."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "dims": {
            "vocab_size": params.vocab_size,
            "word_dim": params.word_dim,
            "pos_dim": params.pos_dim,
            "clip_radius": params.clip_radius,
            "num_filters": params.num_filters,
            "window": params.window,
            "num_relations": params.num_relations,
        },
        "vocab": list(vocab),
        "relation_names": list(relation_names),
        "hyperparams": hyperparams or {},
        "tensors": {
            name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
            for name, arr in params.tensors().items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


@dataclass(frozen=True)
class Checkpoint:
    params: EncoderParams
    vocab: tuple[str, ...]
    relation_names: tuple[str, ...]
    hyperparams: dict


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format_version {version!r} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    tensors = {}
    for name, entry in doc["tensors"].items():
        shape = tuple(entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
        expected = int(np.prod(shape)) if shape else 1
        if data.size != expected:
            raise CheckpointError(
                f"tensor {name}: declared shape {shape} does not match "
                f"{data.size} stored values"
            )
        tensors[name] = data.reshape(shape)
    try:
        params = EncoderParams(**tensors)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"inconsistent tensors: {exc}") from None
    return Checkpoint(params=params, vocab=tuple(doc["vocab"]),
                      relation_names=tuple(doc["relation_names"]),
                      hyperparams=dict(doc.get("hyperparams", {})))


def save_fixed_vectors(table: dict[str, np.ndarray], path: str) -> None:
    dims = {arr.shape[1] for arr in table.values()}
    if len(dims) != 1:
        raise ValueError(f"inconsistent vector dimensions: {sorted(dims)}")
    doc = {"dim": dims.pop(), "vectors": {}}
    for pair_id in sorted(table):
        for i, row in enumerate(table[pair_id]):
            doc["vectors"][f"{pair_id}/{i}"] = list(map(float, row))
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_fixed_vectors(path: str, corpus: Corpus) -> dict[str, np.ndarray]:
    """Per-sentence vectors keyed "<pair_id>/<sentence_index>"; validates
    that every sentence of the corpus is covered at a constant dimension."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    dim = int(doc["dim"])
    vectors = doc["vectors"]
    table = {}
    for bag in corpus.bags:
        rows = []
        for i in range(bag.size):
            key = f"{bag.pair_id}/{i}"
            if key not in vectors:
                raise CorpusFormatError(
                    f"fixed vectors missing sentence {i} of bag {bag.pair_id!r}"
                )
            row = vectors[key]
            if len(row) != dim:
                raise CorpusFormatError(
                    f"vector {key!r} has dimension {len(row)}, expected {dim}"
                )
            rows.append(row)
        table[bag.pair_id] = np.asarray(rows, dtype=np.float64)
    return table
