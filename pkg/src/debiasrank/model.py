"""Twin click towers, discriminator, and adversarial loss.

The position-aware tower scores a candidate at its true displayed position;
its twin scores the same candidate with a randomized (training) or default
(serving) position so that it learns position-independent interest. Both
towers share the news encoder, the behavior transformer, the position table,
and the final scoring vector; each owns its candidate-attention weights. A
discriminator tries to tell the two interest vectors apart, and a
gradient-reversal layer turns that signal into pressure to make them
indistinguishable.

Position-blind baseline variants (plain training, inverse-propensity
weighting, seen-probability factorization) reuse the same encoder stack with
a single attention tower and no position inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import (ModelConfig, behavior_encode_batch, encode_news_batch,
                       masked_softmax, quantize_positions,
                       register_encoder_params, register_position_table)
from .optim import ParameterStore, seed_for
from .synthgen import NewsArticle

METHODS = ("adversarial", "plain", "ipw", "pal")
POOLINGS = ("candidate", "mean")
TOWERS = ("aware", "invariant", "plain")

# floors for probabilities entering a log
PROB_EPS = 1e-12


class ModelError(ValueError):
    pass


def catalog_tokens(catalog: list[NewsArticle], title_len: int) -> np.ndarray:
    """Stack catalog titles into an (n_news, title_len) id matrix.

    Articles must be densely numbered 0..n-1 so news ids index rows.
    """
    tokens = np.zeros((len(catalog), title_len), dtype=np.int64)
    for a in catalog:
        if not 0 <= a.news_id < len(catalog):
            raise ModelError(f"news_id {a.news_id} not dense in 0..{len(catalog) - 1}")
        tokens[a.news_id] = a.title_tokens
    return tokens


@dataclass
class ScoreBatch:
    """Index arrays for one forward pass over B samples x C candidates."""

    hist_ids: np.ndarray    # (B, N) news ids, pad slots arbitrary
    hist_pos: np.ndarray    # (B, N) raw displayed positions, pad slots 1
    hist_mask: np.ndarray   # (B, N) 1.0 for real history slots
    cand_ids: np.ndarray    # (B, C)
    cand_pos: np.ndarray    # (B, C) raw displayed positions
    cand_mask: np.ndarray | None = None  # (B, C) 1.0 for real candidates

    @property
    def n_samples(self) -> int:
        return self.hist_ids.shape[0]

    @property
    def n_candidates(self) -> int:
        return self.cand_ids.shape[1]


# ---------------------------------------------------------------------------
# single formulas (usable on raw arrays, shared by the batched towers)
# ---------------------------------------------------------------------------


def candidate_attention_graph(h_matrix: T.Tensor, hist_mask: np.ndarray,
                              d_cand: T.Tensor, att_proj: T.Tensor,
                              att_bias: T.Tensor) -> T.Tensor:
    """Candidate-queried attention over behavior rows.

    h_matrix: (B, N, d); d_cand: (B, C, d). Per candidate, attention logits
    are d_cand . tanh(att_proj @ h_i + att_bias) over real history rows;
    the softmax-weighted context is gated elementwise by d_cand. Empty real
    history yields the zero vector.
    """
    keys = T.tanh(T.add(T.matmul(h_matrix, T.transpose(att_proj)),
                        T.reshape(att_bias, (1, 1, -1))))  # (B, N, d)
    logits = T.matmul(d_cand, T.transpose(keys))  # (B, C, N)
    weights = masked_softmax(logits, np.asarray(hist_mask, dtype=np.float64)[:, None, :])
    context = T.matmul(weights, h_matrix)  # (B, C, d)
    return T.mul_elementwise(d_cand, context)


def mean_pooling_graph(h_matrix: T.Tensor, hist_mask: np.ndarray,
                       d_cand: T.Tensor) -> T.Tensor:
    """Ablation pooling: uniform average over real rows instead of attention."""
    mask = np.asarray(hist_mask, dtype=np.float64)
    denom = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    weights = (mask / denom)[:, None, :]  # (B, 1, N)
    n_cand = d_cand.shape[1]
    weights = np.broadcast_to(weights, (mask.shape[0], n_cand, mask.shape[1])).copy()
    context = T.matmul(T.constant(weights), h_matrix)
    return T.mul_elementwise(d_cand, context)


def candidate_attention(h_matrix, d_cand, att_proj, att_bias,
                        hist_mask=None) -> np.ndarray:
    """Single-sample form: (N, d) rows and a (d,) query -> (d,) interest."""
    h = np.asarray(h_matrix, dtype=np.float64)
    q = np.asarray(d_cand, dtype=np.float64)
    mask = np.ones((1, h.shape[0])) if hist_mask is None \
        else np.asarray(hist_mask, dtype=np.float64).reshape(1, -1)
    out = candidate_attention_graph(
        T.constant(h[None]), mask, T.constant(q[None, None]),
        T.constant(np.asarray(att_proj, dtype=np.float64)),
        T.constant(np.asarray(att_bias, dtype=np.float64)))
    return out.values[0, 0]


def discriminate(u, u_prime, proj_aware, proj_invariant) -> float:
    """Probability that (u, u') is in bias-aware-first order:
    sigmoid(proj_aware . u - proj_invariant . u')."""
    s = float(np.dot(proj_aware, u) - np.dot(proj_invariant, u_prime))
    return float(0.5 * (1.0 + np.tanh(0.5 * s)))


def discriminate_graph(u: T.Tensor, u_prime: T.Tensor, proj_aware: T.Tensor,
                       proj_invariant: T.Tensor) -> T.Tensor:
    """Batched discriminator: (B, d) pairs -> (B,) probabilities."""
    d = u.shape[-1]
    s_aware = T.sum_lastdim(T.mul_elementwise(u, T.reshape(proj_aware, (1, d))))
    s_inv = T.sum_lastdim(T.mul_elementwise(u_prime, T.reshape(proj_invariant, (1, d))))
    return T.sigmoid(T.sub(s_aware, s_inv))


def adversarial_loss(z) -> float:
    """-log z with the probability floored away from zero."""
    z = min(max(float(z), PROB_EPS), 1.0 - PROB_EPS)
    return -float(np.log(z))


def adversarial_loss_graph(z: T.Tensor) -> T.Tensor:
    """Batch-mean -log z as a graph scalar."""
    floored = T.clip(z, PROB_EPS, 1.0 - PROB_EPS)
    return T.scale(T.mean_lastdim(T.log(floored)), -1.0)


# ---------------------------------------------------------------------------
# the assembled model
# ---------------------------------------------------------------------------


class DebiasModel:
    """Encoder stack plus the tower set implied by the training method."""

    def __init__(self, cfg: ModelConfig, method: str = "adversarial",
                 pooling: str = "candidate", seed: int = 0,
                 store: ParameterStore | None = None, discriminator: bool = True):
        cfg.validate()
        if method not in METHODS:
            raise ModelError(f"method must be one of {METHODS}, got {method!r}")
        if pooling not in POOLINGS:
            raise ModelError(f"pooling must be one of {POOLINGS}, got {pooling!r}")
        self.cfg = cfg
        self.method = method
        self.pooling = pooling
        self.discriminator = discriminator and method == "adversarial"
        if store is None:
            store = ParameterStore()
            register_encoder_params(store, cfg, seed)
            d = cfg.d_model
            if method == "adversarial":
                register_position_table(store, cfg)
                if pooling == "candidate":
                    for tower in ("aware", "invar"):
                        store.register(f"{tower}.att_proj",
                                       _xavier_like(seed, f"{tower}.att_proj", d))
                        store.register(f"{tower}.att_bias", np.zeros(d))
                if self.discriminator:
                    store.register("disc.proj_aware",
                                   seed_for(seed, "disc.proj_aware").normal(0.0, 0.1, size=d))
                    store.register("disc.proj_invariant",
                                   seed_for(seed, "disc.proj_invariant").normal(0.0, 0.1, size=d))
            else:
                if pooling == "candidate":
                    store.register("attn.att_proj",
                                   _xavier_like(seed, "attn.att_proj", d))
                    store.register("attn.att_bias", np.zeros(d))
                if method == "pal":
                    # per-bucket seen-probability logits; sigmoid(0) = 0.5 start
                    store.register("pal.seen_logit", np.zeros((cfg.n_qpos + 1, 1)))
            store.register("score.w",
                           seed_for(seed, "score.w").normal(0.0, 0.1, size=d))
        self.params = store

    # -- encoding ----------------------------------------------------------

    def encode_catalog(self, tokens: np.ndarray, *, train: bool = False,
                       seed: int = 0) -> T.Tensor:
        return encode_news_batch(self.params, self.cfg, tokens, train=train, seed=seed)

    def history_matrix(self, article_vectors: T.Tensor, batch: ScoreBatch, *,
                       train: bool = False, seed: int = 0) -> T.Tensor:
        """Behavior-transformer output H for a batch; position-blind methods
        skip the position addition."""
        hist_vec = T.embedding_lookup(article_vectors, batch.hist_ids)
        if self.uses_positions:
            qpos = quantize_positions(batch.hist_pos, self.cfg.n_qpos,
                                      self.cfg.quantization)
        else:
            qpos = None
        return behavior_encode_batch(self.params, self.cfg, hist_vec, qpos,
                                     batch.hist_mask, train=train, seed=seed)

    @property
    def uses_positions(self) -> bool:
        return self.method == "adversarial"

    def candidate_vectors(self, article_vectors: T.Tensor, batch: ScoreBatch,
                          buckets: np.ndarray | None) -> T.Tensor:
        """Candidate representations, with a position embedding added when
        bucket ids are supplied."""
        vec = T.embedding_lookup(article_vectors, batch.cand_ids)
        if buckets is None:
            return vec
        pos = T.embedding_lookup(self.params["pos_emb"], buckets)
        return T.add(vec, pos)

    def interest(self, h_matrix: T.Tensor, hist_mask: np.ndarray,
                 d_cand: T.Tensor, tower: str) -> T.Tensor:
        """Per-candidate interest vectors u with the chosen tower's weights."""
        if tower not in TOWERS:
            raise ModelError(f"tower must be one of {TOWERS}, got {tower!r}")
        if self.pooling == "mean":
            return mean_pooling_graph(h_matrix, hist_mask, d_cand)
        prefix = {"aware": "aware", "invariant": "invar", "plain": "attn"}[tower]
        return candidate_attention_graph(h_matrix, hist_mask, d_cand,
                                         self.params[f"{prefix}.att_proj"],
                                         self.params[f"{prefix}.att_bias"])

    def click_scores(self, u: T.Tensor) -> T.Tensor:
        """Shared linear scorer: (B, C, d) interest -> (B, C) scores."""
        w = self.params["score.w"]
        return T.sum_lastdim(T.mul_elementwise(u, T.reshape(w, (1, 1, -1))))

    # -- candidate position policies ---------------------------------------

    def true_buckets(self, batch: ScoreBatch) -> np.ndarray:
        return quantize_positions(batch.cand_pos, self.cfg.n_qpos, self.cfg.quantization)

    def random_buckets(self, batch: ScoreBatch, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, self.cfg.n_qpos,
                            size=(batch.n_samples, batch.n_candidates))

    def default_buckets(self, batch: ScoreBatch) -> np.ndarray:
        return np.full((batch.n_samples, batch.n_candidates),
                       self.cfg.default_bucket, dtype=np.int64)

    # -- single-sample convenience (formula-fidelity surface) ---------------

    def _single_batch(self, history_tokens, positions, candidate_tokens,
                      candidate_position) -> tuple[T.Tensor, ScoreBatch]:
        hist = np.asarray(history_tokens, dtype=np.int64)
        if hist.ndim != 2:
            raise ModelError(f"history tokens must be (N, title_len), got {hist.shape}")
        n = hist.shape[0]
        tokens = np.vstack([hist, np.asarray(candidate_tokens, dtype=np.int64)[None]])
        vecs = self.encode_catalog(tokens)
        batch = ScoreBatch(
            hist_ids=np.arange(n, dtype=np.int64)[None],
            hist_pos=np.asarray(positions, dtype=np.int64)[None],
            hist_mask=np.ones((1, n)),
            cand_ids=np.array([[n]], dtype=np.int64),
            cand_pos=np.array([[candidate_position]], dtype=np.int64))
        return vecs, batch

    def bias_aware_score(self, history_tokens, positions, candidate_tokens,
                         candidate_position: int) -> tuple[float, np.ndarray]:
        """Score one candidate at its true displayed position: (score, u)."""
        if candidate_position < 1:
            raise ModelError(f"candidate_position must be >= 1, got {candidate_position}")
        vecs, batch = self._single_batch(history_tokens, positions,
                                         candidate_tokens, candidate_position)
        h = self.history_matrix(vecs, batch)
        d_c = self.candidate_vectors(vecs, batch, self.true_buckets(batch))
        u = self.interest(h, batch.hist_mask, d_c, "aware")
        score = self.click_scores(u)
        return float(score.values[0, 0]), u.values[0, 0]

    def bias_invariant_score(self, history_tokens, positions, candidate_tokens,
                             mode: str = "test",
                             rng: np.random.Generator | None = None,
                             bucket: int | None = None) -> tuple[float, np.ndarray]:
        """Score one candidate with a randomized (train) or default (test)
        candidate position: (score, u')."""
        vecs, batch = self._single_batch(history_tokens, positions,
                                         candidate_tokens, candidate_position=1)
        if mode == "test":
            buckets = self.default_buckets(batch)
        elif mode == "train":
            if bucket is not None:
                buckets = np.full((1, 1), bucket, dtype=np.int64)
            else:
                if rng is None:
                    raise ModelError("train mode needs an rng (or a forced bucket)")
                buckets = self.random_buckets(batch, rng)
        else:
            raise ModelError(f"mode must be 'train' or 'test', got {mode!r}")
        h = self.history_matrix(vecs, batch)
        d_c = self.candidate_vectors(vecs, batch, buckets)
        u = self.interest(h, batch.hist_mask, d_c, "invariant")
        score = self.click_scores(u)
        return float(score.values[0, 0]), u.values[0, 0]


def _xavier_like(seed: int, name: str, d: int) -> np.ndarray:
    rng = seed_for(seed, name)
    limit = np.sqrt(6.0 / (d + d))
    return rng.uniform(-limit, limit, size=(d, d))
