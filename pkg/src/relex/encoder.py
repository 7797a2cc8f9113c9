"""Piecewise convolutional sentence encoder with hand-rolled backprop.

A sentence is embedded as word vectors concatenated with two position
embeddings (offset to the head entity and to the tail entity), run through a
1D convolution with zero padding, max-pooled separately over the three
sentence segments delimited by the two entity positions, and squashed with
tanh.  The encoder is deliberately free of autodiff frameworks: the backward
pass is written out explicitly so gradients can be checked against finite
differences at 64-bit precision.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np


@dataclass(frozen=True)
class SentenceExample:
    """A tokenized sentence with the positions of the two entity tokens."""

    tokens: tuple[int, ...]
    head_pos: int
    tail_pos: int

    def __post_init__(self):
        m = len(self.tokens)
        if m < 1:
            raise ValueError("sentence must contain at least one token")
        if not (0 <= self.head_pos < m):
            raise ValueError(f"head_pos {self.head_pos} out of range for length {m}")
        if not (0 <= self.tail_pos < m):
            raise ValueError(f"tail_pos {self.tail_pos} out of range for length {m}")
        if any(t < 0 for t in self.tokens):
            raise ValueError("negative token id")


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture sizes (defaults match the usual PCNN setup)."""

    word_dim: int = 50
    pos_dim: int = 5
    num_filters: int = 230
    window: int = 3
    clip_radius: int = 30


@dataclass
class EncoderParams:
    """All learnable tensors.

    ``theta`` has one row per relation plus a final row for NA; its column
    count is three pooled values per filter.  Filter width must equal
    word_dim + 2 * pos_dim.
    """

    word_emb: np.ndarray      # (V, word_dim)
    pos_emb_head: np.ndarray  # (2 * clip_radius + 1, pos_dim)
    pos_emb_tail: np.ndarray  # (2 * clip_radius + 1, pos_dim)
    filters: np.ndarray       # (num_filters, window, word_dim + 2 * pos_dim)
    bias: np.ndarray          # (num_filters,)
    theta: np.ndarray         # (num_relations + 1, 3 * num_filters)

    def __post_init__(self):
        d = self.word_emb.shape[1] + 2 * self.pos_emb_head.shape[1]
        if self.filters.shape[2] != d:
            raise ValueError(
                f"filter width {self.filters.shape[2]} != word_dim + 2*pos_dim = {d}"
            )
        if self.pos_emb_head.shape != self.pos_emb_tail.shape:
            raise ValueError("position embedding tables must have equal shapes")
        if self.pos_emb_head.shape[0] % 2 != 1:
            raise ValueError("position table needs an odd number of rows")
        if self.bias.shape != (self.filters.shape[0],):
            raise ValueError("one bias per filter required")
        if self.theta.shape[1] != 3 * self.filters.shape[0]:
            raise ValueError("theta columns must be 3 * num_filters")

    @property
    def vocab_size(self) -> int:
        return self.word_emb.shape[0]

    @property
    def word_dim(self) -> int:
        return self.word_emb.shape[1]

    @property
    def pos_dim(self) -> int:
        return self.pos_emb_head.shape[1]

    @property
    def clip_radius(self) -> int:
        return (self.pos_emb_head.shape[0] - 1) // 2

    @property
    def num_filters(self) -> int:
        return self.filters.shape[0]

    @property
    def window(self) -> int:
        return self.filters.shape[1]

    @property
    def input_dim(self) -> int:
        return self.filters.shape[2]

    @property
    def num_relations(self) -> int:
        """Number of KB relations, excluding NA."""
        return self.theta.shape[0] - 1

    @property
    def na_id(self) -> int:
        return self.theta.shape[0] - 1

    def tensors(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "EncoderParams":
        return EncoderParams(**{k: v.copy() for k, v in self.tensors().items()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors().values())


@dataclass
class EncoderGradients:
    """Gradient accumulator, one array per parameter tensor."""

    word_emb: np.ndarray
    pos_emb_head: np.ndarray
    pos_emb_tail: np.ndarray
    filters: np.ndarray
    bias: np.ndarray
    theta: np.ndarray

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "EncoderGradients":
        return cls(**{k: np.zeros_like(v) for k, v in params.tensors().items()})

    def tensors(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def add_(self, other: "EncoderGradients") -> None:
        for name, arr in self.tensors().items():
            arr += getattr(other, name)

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(v))) if v.size else 0.0 for v in self.tensors().values())


@dataclass(frozen=True)
class SentenceEncoding:
    """Pooled sentence vector plus the pooling argmax needed for backprop.

    ``x`` is laid out filter-major: x.reshape(num_filters, 3)[i, k] is the
    pooled value of filter i over segment k.  ``pool_argmax`` holds the
    winning window index per (filter, segment), -1 for an empty segment.
    """

    x: np.ndarray
    pool_argmax: np.ndarray


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: EncoderConfig, vocab_size: int, num_relations: int,
                rng: np.random.Generator) -> EncoderParams:
    """Glorot-uniform initialization of every tensor; bias starts at zero."""
    d = config.word_dim + 2 * config.pos_dim
    rows = 2 * config.clip_radius + 1
    return EncoderParams(
        word_emb=glorot_uniform(rng, (vocab_size, config.word_dim),
                                vocab_size, config.word_dim),
        pos_emb_head=glorot_uniform(rng, (rows, config.pos_dim), rows, config.pos_dim),
        pos_emb_tail=glorot_uniform(rng, (rows, config.pos_dim), rows, config.pos_dim),
        filters=glorot_uniform(rng, (config.num_filters, config.window, d),
                               config.window * d, config.num_filters),
        bias=np.zeros(config.num_filters),
        theta=glorot_uniform(rng, (num_relations + 1, 3 * config.num_filters),
                             3 * config.num_filters, num_relations + 1),
    )


def rel_position_index(i: int, p: int, clip_radius: int) -> int:
    """Row index into a position table for token i relative to entity at p."""
    offset = max(-clip_radius, min(clip_radius, i - p))
    return offset + clip_radius


def _position_rows(m: int, p: int, clip_radius: int) -> np.ndarray:
    return np.clip(np.arange(m) - p, -clip_radius, clip_radius) + clip_radius


def _embed(sent: SentenceExample, params: EncoderParams):
    """Input representation: word embedding + two position embeddings."""
    tokens = np.asarray(sent.tokens)
    if tokens.max() >= params.vocab_size:
        raise ValueError(
            f"token id {int(tokens.max())} >= vocab size {params.vocab_size}"
        )
    m = len(sent.tokens)
    hrows = _position_rows(m, sent.head_pos, params.clip_radius)
    trows = _position_rows(m, sent.tail_pos, params.clip_radius)
    emb = np.concatenate(
        [params.word_emb[tokens], params.pos_emb_head[hrows], params.pos_emb_tail[trows]],
        axis=1,
    )
    return emb, tokens, hrows, trows


def _padded_windows(emb: np.ndarray, window: int) -> np.ndarray:
    """All conv windows over the zero-padded input, shape (m+window-1, window, d)."""
    m, d = emb.shape
    padded = np.zeros((m + 2 * (window - 1), d))
    padded[window - 1:window - 1 + m] = emb
    width = m + window - 1
    return np.stack([padded[j:j + window] for j in range(width)])


def conv1d_forward(sent: SentenceExample, params: EncoderParams) -> np.ndarray:
    """1D convolution with zero padding; output width is m + window - 1."""
    emb, _, _, _ = _embed(sent, params)
    windows = _padded_windows(emb, params.window)
    return np.einsum("fwd,jwd->fj", params.filters, windows) + params.bias[:, None]


def _segment_slices(m: int, head_pos: int, tail_pos: int, window: int):
    """Three half-open ranges over conv output indices, partitioning [0, m+window-1).

    A window's index is aligned with the last input token it covers; the cut
    points sit just after the windows ending at each entity token.  Degenerate
    entity placements can make the middle (equal positions) or last segment
    (entity on the final token) empty.
    """
    p_min, p_max = sorted((head_pos, tail_pos))
    width = m + window - 1
    return (
        (0, p_min + window),
        (p_min + window, p_max + window),
        (p_max + window, width),
    )


def piecewise_pool(c: np.ndarray, head_pos: int, tail_pos: int,
                   window: int) -> SentenceEncoding:
    """Segment-wise max pooling followed by tanh; empty segments pool to 0."""
    num_filters, width = c.shape
    m = width - window + 1
    pooled = np.zeros((num_filters, 3))
    argmax = np.full((num_filters, 3), -1, dtype=np.int64)
    for k, (lo, hi) in enumerate(_segment_slices(m, head_pos, tail_pos, window)):
        if hi <= lo:
            continue
        rel = np.argmax(c[:, lo:hi], axis=1)
        argmax[:, k] = lo + rel
        pooled[:, k] = c[np.arange(num_filters), argmax[:, k]]
    return SentenceEncoding(x=np.tanh(pooled).reshape(-1), pool_argmax=argmax)


def encode(sent: SentenceExample, params: EncoderParams) -> SentenceEncoding:
    """Full forward pass; deterministic in its inputs."""
    c = conv1d_forward(sent, params)
    return piecewise_pool(c, sent.head_pos, sent.tail_pos, params.window)


def mention_score(encoding: SentenceEncoding, relation: int,
                  params: EncoderParams) -> float:
    """Log potential of labeling this sentence with ``relation`` (NA included)."""
    if not (0 <= relation <= params.na_id):
        raise ValueError(f"relation id {relation} outside 0..{params.na_id}")
    return float(params.theta[relation] @ encoding.x)


def score_table(encodings: list[SentenceEncoding], params: EncoderParams) -> np.ndarray:
    """Mention scores for every (sentence, relation incl. NA) pair."""
    x = np.stack([e.x for e in encodings])
    return x @ params.theta.T


def encode_backward(sent: SentenceExample, params: EncoderParams,
                    grad_pairs: list[tuple[int, float]],
                    encoding: SentenceEncoding | None = None) -> EncoderGradients:
    """Gradients of sum(weight * x.theta[r]) over grad_pairs w.r.t. all tensors.

    Gradient flows only through the pooling winners; tanh derivative uses the
    already-squashed values.  ``encoding`` must come from the same params if
    supplied.
    """
    if encoding is None:
        encoding = encode(sent, params)
    grads = EncoderGradients.zeros_like(params)

    gx = np.zeros_like(encoding.x)
    for relation, weight in grad_pairs:
        if not (0 <= relation <= params.na_id):
            raise ValueError(f"relation id {relation} outside 0..{params.na_id}")
        grads.theta[relation] += weight * encoding.x
        gx += weight * params.theta[relation]
    if not np.any(gx):
        return grads

    num_filters, window = params.num_filters, params.window
    m = len(sent.tokens)
    width = m + window - 1
    xs = encoding.x.reshape(num_filters, 3)
    gx = gx.reshape(num_filters, 3)

    gc = np.zeros((num_filters, width))
    rows = np.arange(num_filters)
    for k in range(3):
        win = encoding.pool_argmax[:, k]
        live = win >= 0
        gc[rows[live], win[live]] += gx[live, k] * (1.0 - xs[live, k] ** 2)

    emb, tokens, hrows, trows = _embed(sent, params)
    windows = _padded_windows(emb, window)
    grads.filters += np.einsum("fj,jwd->fwd", gc, windows)
    grads.bias += gc.sum(axis=1)

    gwindows = np.einsum("fj,fwd->jwd", gc, params.filters)
    gpadded = np.zeros((m + 2 * (window - 1), params.input_dim))
    for j in range(width):
        gpadded[j:j + window] += gwindows[j]
    gemb = gpadded[window - 1:window - 1 + m]

    dw, dp = params.word_dim, params.pos_dim
    np.add.at(grads.word_emb, tokens, gemb[:, :dw])
    np.add.at(grads.pos_emb_head, hrows, gemb[:, dw:dw + dp])
    np.add.at(grads.pos_emb_tail, trows, gemb[:, dw + dp:])
    return grads


def apply_gradients(params: EncoderParams, grads: EncoderGradients,
                    step: float) -> None:
    """In-place update params -= step * grads (theta first, then the rest)."""
    params.theta -= step * grads.theta
    params.filters -= step * grads.filters
    params.bias -= step * grads.bias
    params.word_emb -= step * grads.word_emb
    params.pos_emb_head -= step * grads.pos_emb_head
    params.pos_emb_tail -= step * grads.pos_emb_tail
