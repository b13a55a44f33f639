"""Ranking metrics, the evaluation protocol, and baseline debiaser pieces.

Metrics are averaged per impression (unweighted over qualifying impressions),
matching the convention of the news-recommendation baselines this compares
against. Ties: AUC gives half credit to tied pairs; MRR/nDCG rank by stable
descending sort, so tied scores keep their original item order. Both
conventions make constant-score inputs deterministic (AUC exactly 0.5).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import quantize_position, quantize_positions
from .model import DebiasModel, ScoreBatch, catalog_tokens
from .synthgen import Impression, NewsArticle

EVAL_TOWERS = ("bias_invariant_default_pos", "bias_aware_at_true_pos", "plain")
THREADS_ENV = "DEBIAS_RANK_THREADS"

PROPENSITY_FLOOR = 0.05


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# per-impression metrics
# ---------------------------------------------------------------------------


def _check_two_classes(labels: np.ndarray) -> tuple[int, int]:
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvalError("metric needs at least one positive and one negative")
    return n_pos, n_neg


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ascending ranks with ties averaged (midranks)."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Probability a positive outranks a negative; tied pairs count half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos, n_neg = _check_two_classes(labels)
    ranks = _average_ranks(scores)
    r_pos = ranks[labels == 1].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _descending_ranks(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    ranks = np.empty(order.size, dtype=np.int64)
    ranks[order] = np.arange(1, order.size + 1)
    return ranks


def mrr(scores, labels) -> float:
    """Mean reciprocal rank over all positives of the impression."""
    labels = np.asarray(labels)
    _check_two_classes(labels)
    ranks = _descending_ranks(scores)
    return float(np.mean(1.0 / ranks[labels == 1]))


def ndcg_at_k(scores, labels, k: int) -> float:
    """Binary-gain nDCG truncated at rank k."""
    labels = np.asarray(labels)
    n_pos, _ = _check_two_classes(labels)
    ranks = _descending_ranks(scores)
    hit = (labels == 1) & (ranks <= k)
    dcg = float(np.sum(1.0 / np.log2(ranks[hit] + 1.0)))
    idcg = float(sum(1.0 / np.log2(r + 1.0) for r in range(1, min(n_pos, k) + 1)))
    return dcg / idcg


@dataclass(frozen=True)
class MetricReport:
    auc: float
    mrr: float
    ndcg5: float
    ndcg10: float
    n_impressions: int
    n_skipped: int

    def row(self, run_id: str, split: str, tower: str) -> dict:
        return {"run_id": run_id, "split": split, "tower": tower,
                "auc": self.auc, "mrr": self.mrr, "ndcg5": self.ndcg5,
                "ndcg10": self.ndcg10, "n_impressions": self.n_impressions,
                "n_skipped": self.n_skipped}


def aggregate_metrics(scored: list[tuple[np.ndarray, np.ndarray]]) -> MetricReport:
    """Unweighted mean of per-impression metrics; single-class impressions
    are skipped and counted."""
    aucs, mrrs, n5s, n10s = [], [], [], []
    skipped = 0
    for scores, labels in scored:
        labels = np.asarray(labels)
        if labels.sum() == 0 or labels.sum() == labels.size:
            skipped += 1
            continue
        aucs.append(auc(scores, labels))
        mrrs.append(mrr(scores, labels))
        n5s.append(ndcg_at_k(scores, labels, 5))
        n10s.append(ndcg_at_k(scores, labels, 10))
    n = len(aucs)
    if n == 0:
        return MetricReport(float("nan"), float("nan"), float("nan"), float("nan"),
                            0, skipped)
    return MetricReport(float(np.mean(aucs)), float(np.mean(mrrs)),
                        float(np.mean(n5s)), float(np.mean(n10s)), n, skipped)


# ---------------------------------------------------------------------------
# scoring impressions with a trained model
# ---------------------------------------------------------------------------


def user_profiles(train_impressions: list[Impression]) -> dict[int, list[tuple[int, int]]]:
    """Per user, the chronological (news_id, position) clicks of the train split.

    Valid/test evaluation freezes each user's history at the end of training
    data, so every split sees the same profile.
    """
    profiles: dict[int, list[tuple[int, int]]] = {}
    for imp in sorted(train_impressions, key=lambda i: i.impression_id):
        for news_id, pos, clicked in imp.items:
            if clicked:
                profiles.setdefault(imp.user_id, []).append((news_id, pos))
    return profiles


def history_arrays(profile: list[tuple[int, int]], history_len: int
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Most-recent-kept, zero-padded (ids, positions, mask) triple."""
    recent = profile[-history_len:]
    ids = np.zeros(history_len, dtype=np.int64)
    pos = np.ones(history_len, dtype=np.int64)
    mask = np.zeros(history_len, dtype=np.float64)
    for i, (news_id, p) in enumerate(recent):
        ids[i] = news_id
        pos[i] = p
        mask[i] = 1.0
    return ids, pos, mask


def _n_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def score_impressions(model: DebiasModel, catalog: list[NewsArticle],
                      impressions: list[Impression],
                      profiles: dict[int, list[tuple[int, int]]],
                      tower: str, batch_size: int = 512
                      ) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """Score every impression item; returns (impression_id, scores, labels)
    sorted by impression id regardless of batching or thread count."""
    if tower not in EVAL_TOWERS:
        raise EvalError(f"tower must be one of {EVAL_TOWERS}, got {tower!r}")
    if tower == "plain":
        if model.method == "adversarial":
            raise EvalError("plain tower is for position-blind methods")
    elif model.method != "adversarial":
        raise EvalError(f"tower {tower!r} needs an adversarial model; "
                        f"this checkpoint is {model.method!r}")

    ordered = sorted(impressions, key=lambda i: i.impression_id)
    tokens = catalog_tokens(catalog, model.cfg.title_len)
    article_vectors = T.constant(model.encode_catalog(tokens).values)

    batches = [ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size)]

    def run_batch(batch_imps):
        n = len(batch_imps)
        hlen = model.cfg.history_len
        max_c = max(len(imp.items) for imp in batch_imps)
        hist_ids = np.zeros((n, hlen), dtype=np.int64)
        hist_pos = np.ones((n, hlen), dtype=np.int64)
        hist_mask = np.zeros((n, hlen))
        cand_ids = np.zeros((n, max_c), dtype=np.int64)
        cand_pos = np.ones((n, max_c), dtype=np.int64)
        labels = np.zeros((n, max_c), dtype=np.int64)
        counts = np.zeros(n, dtype=np.int64)
        for b, imp in enumerate(batch_imps):
            ids, pos, mask = history_arrays(profiles.get(imp.user_id, []), hlen)
            hist_ids[b], hist_pos[b], hist_mask[b] = ids, pos, mask
            counts[b] = len(imp.items)
            for c, (news_id, p, clicked) in enumerate(imp.items):
                cand_ids[b, c] = news_id
                cand_pos[b, c] = p
                labels[b, c] = clicked
        batch = ScoreBatch(hist_ids, hist_pos, hist_mask, cand_ids, cand_pos)
        h = model.history_matrix(article_vectors, batch)
        if tower == "bias_invariant_default_pos":
            d_c = model.candidate_vectors(article_vectors, batch, model.default_buckets(batch))
            u = model.interest(h, batch.hist_mask, d_c, "invariant")
        elif tower == "bias_aware_at_true_pos":
            d_c = model.candidate_vectors(article_vectors, batch, model.true_buckets(batch))
            u = model.interest(h, batch.hist_mask, d_c, "aware")
        else:
            d_c = model.candidate_vectors(article_vectors, batch, None)
            u = model.interest(h, batch.hist_mask, d_c, "plain")
        scores = model.click_scores(u).values
        if model.method == "pal":
            # serving uses the relevance factor alone, as a probability
            scores = 0.5 * (1.0 + np.tanh(0.5 * scores))
        return [(imp.impression_id, scores[b, :counts[b]].copy(), labels[b, :counts[b]].copy())
                for b, imp in enumerate(batch_imps)]

    threads = _n_threads()
    if threads == 1 or len(batches) <= 1:
        chunks = [run_batch(b) for b in batches]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(run_batch, batches))
    return [item for chunk in chunks for item in chunk]


def evaluate(model: DebiasModel, catalog: list[NewsArticle],
             impressions: list[Impression],
             profiles: dict[int, list[tuple[int, int]]],
             tower: str = "bias_invariant_default_pos",
             batch_size: int = 512) -> MetricReport:
    """Score a split and aggregate AUC/MRR/nDCG@5/nDCG@10."""
    if not impressions:
        return MetricReport(float("nan"), float("nan"), float("nan"), float("nan"), 0, 0)
    scored = score_impressions(model, catalog, impressions, profiles, tower,
                               batch_size=batch_size)
    return aggregate_metrics([(s, l) for _, s, l in scored])


def serving_tower(method: str) -> str:
    return "bias_invariant_default_pos" if method == "adversarial" else "plain"


def write_metrics_csv(path: str, rows: list[dict]) -> None:
    cols = ["run_id", "split", "tower", "auc", "mrr", "ndcg5", "ndcg10",
            "n_impressions", "n_skipped"]
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(cols) + "\n")
        for row in rows:
            f.write(",".join(_csv_cell(row[c]) for c in cols) + "\n")


def _csv_cell(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# inverse propensity weighting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PropensityTable:
    """Per-bucket examination propensity estimates in (0, 1]."""

    values: dict[int, float]
    quantization: str
    n_buckets: int
    p_min: float = PROPENSITY_FLOOR

    def propensity(self, bucket: int) -> float:
        if bucket not in self.values:
            raise EvalError(f"propensity table has no bucket {bucket}")
        return self.values[bucket]

    def propensity_at(self, position: int) -> float:
        return self.propensity(quantize_position(position, self.n_buckets,
                                                 self.quantization))


def estimate_propensities(impressions: list[Impression], n_buckets: int,
                          quantization: str = "sqrt",
                          p_min: float = PROPENSITY_FLOOR) -> PropensityTable:
    """CTR-ratio propensity estimate per quantized position bucket.

    propensity(b) = CTR(b) / CTR(best bucket), clipped to [p_min, 1].
    Buckets without any clicks (or without any data) fall back to the
    global CTR ratio before clipping.
    """
    if not impressions:
        raise EvalError("estimate_propensities: dataset is empty")
    shown = np.zeros(n_buckets, dtype=np.int64)
    clicks = np.zeros(n_buckets, dtype=np.int64)
    for imp in impressions:
        for _, pos, clicked in imp.items:
            b = quantize_position(pos, n_buckets, quantization)
            shown[b] += 1
            clicks[b] += clicked
    total_clicks = int(clicks.sum())
    if total_clicks == 0:
        raise EvalError("estimate_propensities: dataset has no clicks")
    with np.errstate(invalid="ignore"):
        ctr = np.where(shown > 0, clicks / np.maximum(shown, 1), 0.0)
    best = float(ctr.max())
    global_ratio = (total_clicks / shown.sum()) / best
    values = {}
    for b in range(n_buckets):
        if shown[b] > 0 and clicks[b] > 0:
            ratio = ctr[b] / best
        else:
            ratio = global_ratio
        values[b] = float(np.clip(ratio, p_min, 1.0))
    return PropensityTable(values, quantization, n_buckets, p_min)


def ipw_weights(table: PropensityTable, positive_positions: np.ndarray) -> np.ndarray:
    """Per-sample inverse propensity of the clicked item's bucket."""
    buckets = quantize_positions(positive_positions, table.n_buckets, table.quantization)
    return np.array([1.0 / table.propensity(int(b)) for b in buckets])


def ipw_click_loss(scores, positive_position: int, table: PropensityTable):
    """Softmax click loss scaled by the positive's inverse propensity.

    Accepts a (1+K,) Tensor (positive first) like ``click_loss`` and returns
    a scalar Tensor; also accepts a plain array for convenience.
    """
    from .training import click_loss  # local import avoids a module cycle
    base = click_loss(scores)
    return T.scale(base, 1.0 / table.propensity_at(positive_position))


# ---------------------------------------------------------------------------
# seen-probability factorization (PAL-style baseline)
# ---------------------------------------------------------------------------


def pal_seen_prob_graph(model: DebiasModel, buckets: np.ndarray) -> T.Tensor:
    """Learned per-bucket seen probability, sigmoid-squashed into (0, 1)."""
    logits = T.embedding_lookup(model.params["pal.seen_logit"], buckets)
    return T.sigmoid(T.reshape(logits, buckets.shape))


def pal_click_probability_graph(model: DebiasModel, rel_scores: T.Tensor,
                                buckets: np.ndarray) -> T.Tensor:
    """Training-time click probability: sigmoid(relevance) * seen(bucket)."""
    return T.mul_elementwise(T.sigmoid(rel_scores),
                             pal_seen_prob_graph(model, buckets))


def pal_score(model: DebiasModel, relevance_score: float, position: int) -> float:
    """Click probability for one item at a displayed position (training view)."""
    if position < 1:
        raise EvalError(f"position must be >= 1, got {position}")
    bucket = quantize_position(position, model.cfg.n_qpos, model.cfg.quantization)
    out = pal_click_probability_graph(
        model, T.constant(np.array([[relevance_score]])),
        np.array([[bucket]], dtype=np.int64))
    return float(out.values[0, 0])
