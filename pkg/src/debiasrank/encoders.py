"""Shared representation stack: news encoder and behavior transformer.

The news encoder maps padded title tokens to one vector per article: word
embeddings, a projection to model width, one multi-head self-attention layer
with a residual connection, dropout, then additive-attention pooling. The
behavior transformer applies the same attention structure (its own weights,
no pooling) to position-augmented clicked-news vectors.

Neither transformer adds sequence-order encodings: display-position
embeddings are the only order signal, which makes permutation equivariance
of the layers a testable property.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import tensor as T
from .optim import ParameterStore, seed_for
from .synthgen import PAD_TOKEN

QUANTIZATIONS = ("sqrt", "identity")

NEG_INF = -1e9


class EncoderConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and structural switches for the full click model."""

    vocab_size: int = 2000
    d_model: int = 32
    d_word: int = 32
    n_heads: int = 4
    d_head: int = 8
    title_len: int = 16
    history_len: int = 20
    n_qpos: int = 4  # quantized-position buckets; the embedding table has one extra default row
    quantization: str = "sqrt"
    dropout: float = 0.2

    def validate(self) -> None:
        if self.d_model != self.n_heads * self.d_head:
            raise EncoderConfigError(
                f"d_model ({self.d_model}) must equal n_heads*d_head "
                f"({self.n_heads}*{self.d_head})")
        if self.quantization not in QUANTIZATIONS:
            raise EncoderConfigError(f"quantization must be one of {QUANTIZATIONS}")
        if not 0.0 <= self.dropout < 1.0:
            raise EncoderConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        for name in ("vocab_size", "d_model", "d_word", "n_heads", "d_head",
                     "title_len", "history_len", "n_qpos"):
            if getattr(self, name) <= 0:
                raise EncoderConfigError(f"{name} must be positive")

    @property
    def default_bucket(self) -> int:
        """Index of the dedicated default position-embedding row (last)."""
        return self.n_qpos

    @classmethod
    def desk(cls, vocab_size: int, max_position: int, **kw) -> "ModelConfig":
        quant = kw.pop("quantization", "sqrt")
        cfg = cls(vocab_size=vocab_size, quantization=quant,
                  n_qpos=n_buckets(max_position, quant), **kw)
        cfg.validate()
        return cfg

    @classmethod
    def paper(cls, vocab_size: int, max_position: int, **kw) -> "ModelConfig":
        """Full-scale setting: 300-wide word vectors projected into a
        16-head x 16 attention space, 30-token titles, 50-click histories."""
        quant = kw.pop("quantization", "sqrt")
        cfg = cls(vocab_size=vocab_size, d_model=256, d_word=300, n_heads=16,
                  d_head=16, title_len=30, history_len=50, quantization=quant,
                  n_qpos=n_buckets(max_position, quant), **kw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def with_quantization(self, quantization: str, max_position: int) -> "ModelConfig":
        return replace(self, quantization=quantization,
                       n_qpos=n_buckets(max_position, quantization))


# ---------------------------------------------------------------------------
# position quantization
# ---------------------------------------------------------------------------


def quantize_position(p: int, n_qpos: int | None = None, mode: str = "sqrt") -> int:
    """Bucket a 1-based display position; ceil(sqrt(p-1)) in sqrt mode.

    With ``n_qpos`` given, buckets clamp to n_qpos-1 so unseen test
    positions land in the top bucket.
    """
    if p < 1:
        raise ValueError(f"display position must be >= 1, got {p}")
    if mode == "sqrt":
        k = p - 1
        s = math.isqrt(k)
        b = s if s * s == k else s + 1
    elif mode == "identity":
        b = p
    else:
        raise ValueError(f"unknown quantization mode {mode!r}")
    if n_qpos is not None:
        b = min(b, n_qpos - 1)
    return b


def quantize_positions(positions: np.ndarray, n_qpos: int, mode: str = "sqrt") -> np.ndarray:
    """Vectorized quantize_position over an integer array."""
    p = np.asarray(positions, dtype=np.int64)
    if p.size and p.min() < 1:
        raise ValueError(f"display positions must be >= 1, got min {p.min()}")
    if mode == "sqrt":
        b = np.ceil(np.sqrt(np.maximum(p - 1, 0).astype(np.float64))).astype(np.int64)
        # float sqrt can land a hair above an exact root; recheck perfect squares
        root = np.sqrt(np.maximum(p - 1, 0).astype(np.float64)).astype(np.int64)
        exact = root * root == p - 1
        b = np.where(exact, root, b)
    elif mode == "identity":
        b = p.copy()
    else:
        raise ValueError(f"unknown quantization mode {mode!r}")
    return np.minimum(b, n_qpos - 1)


def n_buckets(max_position: int, mode: str = "sqrt") -> int:
    """Bucket-vocabulary size covering positions 1..max_position."""
    return quantize_position(max_position, mode=mode) + 1


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def register_encoder_params(store: ParameterStore, cfg: ModelConfig, seed: int) -> None:
    """News encoder and behavior transformer weights.

    Each parameter is drawn from its own name-keyed stream, so adding or
    removing unrelated parameters never shifts another one's init.
    """
    def reg(name, array):
        store.register(name, array)

    reg("news.word_emb", seed_for(seed, "news.word_emb").normal(0.0, 0.1,
            size=(cfg.vocab_size, cfg.d_word)))
    reg("news.input_proj", _xavier(seed_for(seed, "news.input_proj"),
            cfg.d_word, cfg.d_model))
    for prefix in ("news", "beh"):
        for i in range(cfg.n_heads):
            for kind in ("q", "k", "v"):
                name = f"{prefix}.attn.{kind}{i}"
                reg(name, _xavier(seed_for(seed, name), cfg.d_model, cfg.d_head))
        name = f"{prefix}.attn.out"
        reg(name, _xavier(seed_for(seed, name), cfg.d_model, cfg.d_model))
    reg("news.pool.proj", _xavier(seed_for(seed, "news.pool.proj"),
            cfg.d_model, cfg.d_model))
    reg("news.pool.query", seed_for(seed, "news.pool.query").normal(0.0, 0.1,
            size=cfg.d_model))


def register_position_table(store: ParameterStore, cfg: ModelConfig) -> None:
    """Quantized-position embedding table plus one dedicated default row.

    Zero-initialized: real rows train through use, while the default row
    (never drawn during training) stays an exact no-op at serving time.
    """
    store.register("pos_emb", np.zeros((cfg.n_qpos + 1, cfg.d_model)))


# ---------------------------------------------------------------------------
# graph builders
# ---------------------------------------------------------------------------


def masked_softmax(logits: T.Tensor, mask: np.ndarray) -> T.Tensor:
    """Softmax over the last axis restricted to mask==1 entries.

    Masked entries get exactly zero weight; a row with empty support yields
    all-zero weights rather than NaN, which realizes the all-pad -> zero
    degenerate rule downstream.
    """
    mask = np.asarray(mask, dtype=np.float64)
    shifted = T.add(logits, T.constant((1.0 - mask) * NEG_INF))
    weights = T.softmax_lastdim(shifted)
    return T.mul_elementwise(weights, T.constant(mask))


def self_attention_layer(store: ParameterStore, prefix: str, x: T.Tensor,
                         mask: np.ndarray, cfg: ModelConfig, *,
                         train: bool = False, seed: int = 0) -> T.Tensor:
    """One multi-head self-attention layer with residual and dropout.

    x: (B, T, d); mask: (B, T) with 1 for real slots. Padded slots are
    excluded as keys/values; their own output rows are garbage by design
    and must be masked by whatever pools over them. The per-head
    projections are concatenated so all heads run in one batched matmul.
    """
    mask = np.asarray(mask, dtype=np.float64)
    b, t = mask.shape
    h, dh = cfg.n_heads, cfg.d_head
    inv_scale = 1.0 / math.sqrt(dh)

    def project(kind):
        w = T.concat([store[f"{prefix}.attn.{kind}{i}"] for i in range(h)], axis=-1)
        out = T.matmul(x, w)  # (B, T, h*dh)
        return T.moveaxis(T.reshape(out, (b, t, h, dh)), 1, 2)  # (B, h, T, dh)

    q, k, v = project("q"), project("k"), project("v")
    scores = T.scale(T.matmul(q, T.transpose(k)), inv_scale)  # (B, h, T, T)
    weights = masked_softmax(scores, mask[:, None, None, :])
    ctx = T.matmul(weights, v)  # (B, h, T, dh)
    merged = T.reshape(T.moveaxis(ctx, 1, 2), (b, t, h * dh))
    attended = T.matmul(merged, store[f"{prefix}.attn.out"])
    out = T.add(x, attended)
    return T.dropout(out, cfg.dropout, seed=seed, training=train)


def additive_pooling(store: ParameterStore, prefix: str, x: T.Tensor,
                     mask: np.ndarray) -> T.Tensor:
    """Attention pooling: softmax(query . tanh(proj(x))) over real slots.

    Returns (B, d). All-pad rows pool to the zero vector.
    """
    keys = T.tanh(T.matmul(x, store[f"{prefix}.pool.proj"]))  # (B, T, d)
    query = store[f"{prefix}.pool.query"]
    logits = T.sum_lastdim(T.mul_elementwise(keys, T.reshape(query, (1, 1, -1))))
    weights = masked_softmax(logits, mask)  # (B, T)
    b, t = weights.shape
    pooled = T.matmul(T.reshape(weights, (b, 1, t)), x)  # (B, 1, d)
    return T.reshape(pooled, (b, x.shape[-1]))


def encode_news_batch(store: ParameterStore, cfg: ModelConfig, tokens: np.ndarray,
                      *, train: bool = False, seed: int = 0) -> T.Tensor:
    """Encode (M, title_len) padded token ids into (M, d) article vectors."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] != cfg.title_len:
        raise EncoderConfigError(
            f"tokens must be (n, {cfg.title_len}), got {tokens.shape}")
    mask = (tokens != PAD_TOKEN).astype(np.float64)
    emb = T.embedding_lookup(store["news.word_emb"], tokens)  # (M, T, d_word)
    x = T.matmul(emb, store["news.input_proj"])  # (M, T, d)
    y = self_attention_layer(store, "news", x, mask, cfg, train=train, seed=seed)
    return additive_pooling(store, "news", y, mask)


def encode_news(store: ParameterStore, cfg: ModelConfig, title_tokens) -> np.ndarray:
    """Single-title convenience wrapper; returns the (d,) vector."""
    tokens = np.asarray(title_tokens).reshape(1, -1)
    return encode_news_batch(store, cfg, tokens).values[0]


def behavior_encode_batch(store: ParameterStore, cfg: ModelConfig,
                          news_vectors: T.Tensor, quantized_positions: np.ndarray | None,
                          mask: np.ndarray, *, train: bool = False,
                          seed: int = 0) -> T.Tensor:
    """Behavior transformer over clicked-news vectors.

    news_vectors: (B, N, d); quantized_positions: (B, N) bucket ids, or None
    to skip the position addition entirely (position-blind variants).
    Returns H with shape (B, N, d); padded history slots are masked as
    attention keys and must be masked again by any pooling over H.
    """
    if quantized_positions is not None:
        qp = np.asarray(quantized_positions)
        if qp.shape != news_vectors.shape[:2]:
            raise EncoderConfigError(
                f"positions shape {qp.shape} != history shape {news_vectors.shape[:2]}")
        pos = T.embedding_lookup(store["pos_emb"], qp)
        z = T.add(news_vectors, pos)
    else:
        z = news_vectors
    return self_attention_layer(store, "beh", z, mask, cfg, train=train, seed=seed)


def behavior_encode(store: ParameterStore, cfg: ModelConfig,
                    clicked_news_vectors: np.ndarray,
                    quantized_positions) -> np.ndarray:
    """Single-user convenience wrapper: (N, d) vectors + N buckets -> (N, d)."""
    vecs = np.asarray(clicked_news_vectors, dtype=np.float64)
    if vecs.ndim != 2:
        raise EncoderConfigError(f"expected (N, d) history vectors, got {vecs.shape}")
    qp = np.asarray(quantized_positions)
    if qp.shape != (vecs.shape[0],):
        raise EncoderConfigError(
            f"positions length {qp.shape} != history length {vecs.shape[0]}")
    h = behavior_encode_batch(store, cfg, T.constant(vecs[None]), qp[None],
                              np.ones((1, vecs.shape[0])))
    return h.values[0]
