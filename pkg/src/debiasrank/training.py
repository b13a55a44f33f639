"""Negative sampling, click losses, and the unified training loop.

One optimizer step minimizes the position-aware click loss plus the
position-randomized click loss plus the discriminator loss, with a
gradient-reversal layer (scaled by ``alpha``) between the interest vectors
and the discriminator. The discriminator descends on its own loss while
every shared parameter receives the alpha-scaled negative of it, which is
exactly the gradient field of (click losses - alpha * adversarial loss).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .encoders import ModelConfig, quantize_positions
from .evaluation import (PropensityTable, estimate_propensities, evaluate,
                         ipw_weights, pal_click_probability_graph,
                         serving_tower, user_profiles)
from .model import (PROB_EPS, DebiasModel, ScoreBatch, adversarial_loss_graph,
                    catalog_tokens, discriminate_graph)
from .synthgen import Impression, NewsArticle

PRESETS = ("desk", "paper")


class TrainError(ValueError):
    pass


class TrainingAbort(RuntimeError):
    """Non-finite loss; carries the batch id and loss components."""

    def __init__(self, epoch: int, batch: int, components: dict[str, float]):
        self.epoch = epoch
        self.batch = batch
        self.components = components
        super().__init__(f"non-finite loss at epoch {epoch} batch {batch}: {components}")


@dataclass(frozen=True)
class TrainingSample:
    """One clicked item with sampled negatives from the same impression."""

    user_id: int
    hist_ids: tuple[int, ...]   # earlier clicked news, most recent kept
    hist_pos: tuple[int, ...]   # their displayed positions
    pos_id: int
    pos_position: int
    neg_ids: tuple[int, ...]
    neg_positions: tuple[int, ...]


@dataclass(frozen=True)
class TrainConfig:
    method: str = "adversarial"  # adversarial | plain | ipw | pal
    alpha: float = 0.5
    k_negatives: int = 4
    epochs: int = 4
    batch_size: int = 32
    lr: float = 1e-3
    dropout: float = 0.2
    seed: int = 0
    pooling: str = "candidate"      # candidate | mean
    quantization: str = "sqrt"      # sqrt | identity
    preset: str = "desk"
    discriminator: bool = True

    def validate(self) -> None:
        if self.alpha < 0:
            raise TrainError(f"alpha must be >= 0, got {self.alpha}")
        if self.k_negatives < 1:
            raise TrainError(f"k_negatives must be >= 1, got {self.k_negatives}")
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainError("epochs and batch_size must be >= 1")
        if self.lr < 0:
            raise TrainError(f"lr must be >= 0, got {self.lr}")
        if self.preset not in PRESETS:
            raise TrainError(f"preset must be one of {PRESETS}, got {self.preset!r}")

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        """Full-scale optimization setting: Adam at 1e-4, batch 32,
        dropout 0.2, alpha 0.5."""
        base = dict(lr=1e-4, batch_size=32, dropout=0.2, alpha=0.5,
                    epochs=10, preset="paper")
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainError(f"unknown training config field(s): {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class TrainResult:
    model: DebiasModel
    epoch_log: list[dict]
    best_epoch: int
    n_samples: int
    n_impressions_skipped: int
    propensities: PropensityTable | None = None


# ---------------------------------------------------------------------------
# sample construction
# ---------------------------------------------------------------------------


def build_samples(impressions: list[Impression], k_negatives: int, seed: int,
                  history_len: int) -> tuple[list[TrainingSample], int]:
    """One sample per clicked train item.

    Negatives come uniformly without replacement from the impression's
    non-clicked items (with replacement when fewer than K exist);
    impressions with no negatives are skipped and counted. Histories use
    strictly earlier impressions only, so a sample never sees its own
    impression's clicks.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 5)))
    history: dict[int, list[tuple[int, int]]] = {}
    samples: list[TrainingSample] = []
    skipped = 0
    for imp in sorted(impressions, key=lambda i: i.impression_id):
        if imp.split != "train":
            raise TrainError(f"build_samples expects the train split, got {imp.split!r}")
        clicked = [(n, p) for n, p, c in imp.items if c == 1]
        non_clicked = [(n, p) for n, p, c in imp.items if c == 0]
        profile = history.setdefault(imp.user_id, [])
        if clicked and not non_clicked:
            skipped += 1
        elif clicked:
            recent = profile[-history_len:]
            hist_ids = tuple(n for n, _ in recent)
            hist_pos = tuple(p for _, p in recent)
            for pos_id, pos_position in clicked:
                if len(non_clicked) >= k_negatives:
                    idx = rng.choice(len(non_clicked), size=k_negatives, replace=False)
                else:
                    idx = rng.integers(0, len(non_clicked), size=k_negatives)
                negs = [non_clicked[i] for i in idx]
                samples.append(TrainingSample(
                    imp.user_id, hist_ids, hist_pos, pos_id, pos_position,
                    tuple(n for n, _ in negs), tuple(p for _, p in negs)))
        profile.extend(clicked)
    return samples, skipped


def sample_batch(samples: list[TrainingSample], history_len: int) -> ScoreBatch:
    """Pack samples into padded index arrays; candidate 0 is the positive.

    History arrays are trimmed to the batch's longest real history (padded
    slots are exact no-ops, so this only saves work).
    """
    b = len(samples)
    c = 1 + len(samples[0].neg_ids)
    n = min(history_len, max(1, max(len(s.hist_ids) for s in samples)))
    hist_ids = np.zeros((b, n), dtype=np.int64)
    hist_pos = np.ones((b, n), dtype=np.int64)
    hist_mask = np.zeros((b, n))
    cand_ids = np.zeros((b, c), dtype=np.int64)
    cand_pos = np.ones((b, c), dtype=np.int64)
    for i, s in enumerate(samples):
        k = len(s.hist_ids)
        hist_ids[i, :k] = s.hist_ids
        hist_pos[i, :k] = s.hist_pos
        hist_mask[i, :k] = 1.0
        cand_ids[i, 0] = s.pos_id
        cand_pos[i, 0] = s.pos_position
        cand_ids[i, 1:] = s.neg_ids
        cand_pos[i, 1:] = s.neg_positions
    return ScoreBatch(hist_ids, hist_pos, hist_mask, cand_ids, cand_pos)


def _dedup_batch(tokens: np.ndarray, batch: ScoreBatch) -> tuple[np.ndarray, ScoreBatch]:
    """Restrict the per-step article encoding to ids the batch touches."""
    ids = np.unique(np.concatenate([batch.hist_ids.ravel(), batch.cand_ids.ravel()]))
    remapped = ScoreBatch(
        np.searchsorted(ids, batch.hist_ids), batch.hist_pos, batch.hist_mask,
        np.searchsorted(ids, batch.cand_ids), batch.cand_pos, batch.cand_mask)
    return tokens[ids], remapped


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def click_loss(scores) -> T.Tensor:
    """(1+K)-way softmax cross-entropy with the positive at index 0."""
    t = scores if isinstance(scores, T.Tensor) else T.constant(np.asarray(scores, dtype=np.float64))
    if t.values.ndim != 1:
        raise TrainError(f"click_loss expects a flat score list, got shape {t.shape}")
    logp = T.log(T.clip(T.softmax_lastdim(t), PROB_EPS, 1.0))
    return T.scale(T.take_index(logp, 0, axis=0), -1.0)


def batch_click_loss(scores: T.Tensor, weights: np.ndarray | None = None) -> T.Tensor:
    """Batch-mean softmax cross-entropy; optional per-sample weights."""
    logp = T.log(T.clip(T.softmax_lastdim(scores), PROB_EPS, 1.0))
    positive = T.take_index(logp, 0, axis=1)  # (B,)
    if weights is not None:
        positive = T.mul_elementwise(positive, T.constant(np.asarray(weights, dtype=np.float64)))
    return T.scale(T.mean_lastdim(positive), -1.0)


def pal_batch_loss(model: DebiasModel, rel_scores: T.Tensor,
                   buckets: np.ndarray) -> T.Tensor:
    """Item-mean binary cross-entropy on sigmoid(rel) * seen(bucket)."""
    q = pal_click_probability_graph(model, rel_scores, buckets)
    log_q = T.log(T.clip(q, PROB_EPS, 1.0))
    log_1mq = T.log(T.clip(T.sub(T.constant(np.ones(q.shape)), q), PROB_EPS, 1.0))
    pos_term = T.take_index(log_q, 0, axis=1)  # (B,)
    neg_term = T.sub(T.sum_lastdim(log_1mq), T.take_index(log_1mq, 0, axis=1))
    n_items = q.shape[1]
    per_sample = T.scale(T.add(pos_term, neg_term), -1.0 / n_items)
    return T.mean_lastdim(per_sample)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


def _seed_int(*entropy) -> int:
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def batch_losses(model: DebiasModel, article_vectors: T.Tensor, batch: ScoreBatch,
                 cfg: TrainConfig, *, train: bool, epoch: int, batch_idx: int,
                 ipw_table: PropensityTable | None = None
                 ) -> tuple[T.Tensor, dict[str, float]]:
    """Build the optimized graph scalar for one batch plus logged components."""
    seed_beh = _seed_int(cfg.seed, 11, epoch, batch_idx)
    h = model.history_matrix(article_vectors, batch, train=train, seed=seed_beh)

    if model.method == "adversarial":
        d_aware = model.candidate_vectors(article_vectors, batch, model.true_buckets(batch))
        u_aware = model.interest(h, batch.hist_mask, d_aware, "aware")
        loss_aware = batch_click_loss(model.click_scores(u_aware))

        pos_rng = np.random.default_rng(np.random.SeedSequence(
            (cfg.seed, 12, epoch, batch_idx)))
        d_inv = model.candidate_vectors(article_vectors, batch,
                                        model.random_buckets(batch, pos_rng))
        u_inv = model.interest(h, batch.hist_mask, d_inv, "invariant")
        loss_inv = batch_click_loss(model.click_scores(u_inv))

        total = T.add(loss_aware, loss_inv)
        loss_adv_value = 0.0
        if model.discriminator:
            if cfg.alpha > 0:
                u_pos = T.gradient_reversal(T.take_index(u_aware, 0, axis=1), cfg.alpha)
                v_pos = T.gradient_reversal(T.take_index(u_inv, 0, axis=1), cfg.alpha)
            else:
                # alpha 0 sends exactly no gradient upstream; detaching keeps
                # the shared branch's accumulation order identical to a run
                # without any discriminator, so trajectories match bitwise
                u_pos = T.constant(u_aware.values[:, 0, :])
                v_pos = T.constant(u_inv.values[:, 0, :])
            z = discriminate_graph(u_pos, v_pos, model.params["disc.proj_aware"],
                                   model.params["disc.proj_invariant"])
            loss_adv = adversarial_loss_graph(z)
            total = T.add(total, loss_adv)
            loss_adv_value = loss_adv.item()
        components = {"loss_aware": loss_aware.item(),
                      "loss_invariant": loss_inv.item(),
                      "loss_adversarial": loss_adv_value}
        return total, components

    d_c = model.candidate_vectors(article_vectors, batch, None)
    u = model.interest(h, batch.hist_mask, d_c, "plain")
    scores = model.click_scores(u)
    if model.method == "plain":
        loss = batch_click_loss(scores)
    elif model.method == "ipw":
        assert ipw_table is not None
        loss = batch_click_loss(scores, ipw_weights(ipw_table, batch.cand_pos[:, 0]))
    else:  # pal
        buckets = quantize_positions(batch.cand_pos, model.cfg.n_qpos,
                                     model.cfg.quantization)
        loss = pal_batch_loss(model, scores, buckets)
    return loss, {"loss_aware": loss.item(), "loss_invariant": 0.0,
                  "loss_adversarial": 0.0}


def train(catalog: list[NewsArticle], splits: dict[str, list[Impression]],
          cfg: TrainConfig, model_cfg: ModelConfig | None = None,
          model: DebiasModel | None = None) -> TrainResult:
    """Train on the biased train split, validating each epoch; the best
    validation-AUC parameters are restored before returning.

    A pre-built ``model`` may be supplied to continue from existing weights;
    otherwise one is constructed from the config (dimensions inferred from
    the data where the preset leaves them open).
    """
    from .optim import AdamState, adam_step

    cfg.validate()
    train_split = splits.get("train", [])
    valid_split = splits.get("valid", [])
    if not train_split:
        raise TrainError("train split is empty")

    if model is not None:
        model_cfg = model.cfg
    elif model_cfg is None:
        max_pos = max(p for imp in train_split for _, p, _ in imp.items)
        vocab = max(max(a.title_tokens, default=0) for a in catalog) + 1
        factory = ModelConfig.desk if cfg.preset == "desk" else ModelConfig.paper
        kw = {}
        if cfg.preset == "desk":
            kw["title_len"] = len(catalog[0].title_tokens)
        model_cfg = factory(vocab_size=vocab, max_position=max_pos,
                            dropout=cfg.dropout, quantization=cfg.quantization, **kw)

    samples, skipped = build_samples(train_split, cfg.k_negatives, cfg.seed,
                                     model_cfg.history_len)
    if not samples:
        raise TrainError("no training samples (no clicked items with negatives)")

    if model is None:
        model = DebiasModel(model_cfg, method=cfg.method, pooling=cfg.pooling,
                            seed=cfg.seed, discriminator=cfg.discriminator)
    adam = AdamState.for_store(model.params, lr=cfg.lr)
    profiles = user_profiles(train_split)
    tokens = catalog_tokens(catalog, model_cfg.title_len)

    ipw_table = None
    if cfg.method == "ipw":
        ipw_table = estimate_propensities(train_split, model_cfg.n_qpos,
                                          model_cfg.quantization)

    shuffle_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 13)))
    epoch_log: list[dict] = []
    best_auc = -np.inf
    best_epoch = -1
    best_values = model.params.snapshot()

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(samples))
        sums = {"loss_aware": 0.0, "loss_invariant": 0.0, "loss_adversarial": 0.0}
        n_batches = 0
        for batch_idx in range(0, len(order), cfg.batch_size):
            chunk = [samples[i] for i in order[batch_idx:batch_idx + cfg.batch_size]]
            batch = sample_batch(chunk, model_cfg.history_len)
            batch_tokens, batch = _dedup_batch(tokens, batch)
            article_vectors = model.encode_catalog(
                batch_tokens, train=True, seed=_seed_int(cfg.seed, 10, epoch, batch_idx))
            total, components = batch_losses(model, article_vectors, batch, cfg,
                                             train=True, epoch=epoch,
                                             batch_idx=batch_idx, ipw_table=ipw_table)
            if not all(np.isfinite(v) for v in components.values()):
                raise TrainingAbort(epoch, batch_idx // cfg.batch_size, components)
            T.backward(total)
            adam_step(model.params, adam)
            for k, v in components.items():
                sums[k] += v
            n_batches += 1

        means = {k: v / n_batches for k, v in sums.items()}
        valid_auc = float("nan")
        if valid_split:
            valid_auc = evaluate(model, catalog, valid_split, profiles,
                                 tower=serving_tower(cfg.method)).auc
        loss_total = means["loss_aware"] + means["loss_invariant"] \
            - cfg.alpha * means["loss_adversarial"]
        epoch_log.append({"epoch": epoch, "loss_aware": means["loss_aware"],
                          "loss_invariant": means["loss_invariant"],
                          "loss_adversarial": means["loss_adversarial"],
                          "loss_total": loss_total, "valid_auc": valid_auc})
        if valid_split and valid_auc > best_auc:
            best_auc = valid_auc
            best_epoch = epoch
            best_values = model.params.snapshot()

    if valid_split:
        model.params.load(best_values)
    else:
        best_epoch = cfg.epochs - 1
    return TrainResult(model, epoch_log, best_epoch, len(samples), skipped,
                       propensities=ipw_table)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def write_training_log(path: str, epoch_log: list[dict]) -> None:
    cols = ["epoch", "loss_aware", "loss_invariant", "loss_adversarial",
            "loss_total", "valid_auc"]
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(cols) + "\n")
        for row in epoch_log:
            f.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                             for c in cols) + "\n")


def save_model(path: str, model: DebiasModel, train_cfg: TrainConfig,
               run_info: dict | None = None) -> None:
    extra = {"model_config": model.cfg.to_dict(), "method": model.method,
             "pooling": model.pooling, "discriminator": model.discriminator,
             "train_config": train_cfg.to_dict()}
    if run_info:
        extra["run_info"] = run_info
    save_checkpoint(path, model.params, extra=extra)


def load_model(path: str) -> tuple[DebiasModel, dict]:
    """Rebuild the model named by a checkpoint and restore its parameters."""
    from .checkpoint import read_checkpoint

    _, extra = read_checkpoint(path)
    model_cfg = ModelConfig.from_dict(extra["model_config"])
    model = DebiasModel(model_cfg, method=extra["method"], pooling=extra["pooling"],
                        discriminator=extra.get("discriminator", True))
    load_checkpoint(path, model.params)
    return model, extra
