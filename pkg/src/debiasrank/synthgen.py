"""Synthetic news corpus, users, and position-biased click logs.

Clicks follow the examination hypothesis: an item at display position p is
examined with probability p**(-gamma * patience_u) and clicked only if also
relevant. "Biased" logs rank candidates by the platform's noisy relevance
estimate; "uniform" logs shuffle candidates uniformly, mirroring a
biased-train / uniform-test collection protocol.

How the biased logs were ranked in the original setting is unknown; the
noisy-relevance ranking here is a stand-in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

import numpy as np

PAD_TOKEN = 0
SPLITS = ("train", "valid", "test_biased", "test_uniform")
RANKING_MODES = ("biased", "uniform")

# contribution of topic-agnostic words to titles
SHARED_WORD_PROB = 0.3


class GenConfigError(ValueError):
    """Invalid generator configuration; message names the field."""


class LogFormatError(ValueError):
    """Malformed or invariant-violating persisted log."""


@dataclass(frozen=True)
class NewsArticle:
    news_id: int
    topic_id: int
    title_tokens: tuple[int, ...]  # padded/truncated to title_len, pad id 0


@dataclass(frozen=True)
class SynthUser:
    user_id: int
    topic_affinity: tuple[float, ...]  # sums to 1
    patience: float  # multiplies the examination exponent; > 0


@dataclass(frozen=True)
class Impression:
    impression_id: int
    user_id: int
    # ordered by display position: (news_id, position starting at 1, clicked)
    items: tuple[tuple[int, int, int], ...]
    split: str


@dataclass(frozen=True)
class GenConfig:
    vocab_size: int = 2000
    n_topics: int = 10
    n_news: int = 500
    n_users: int = 2000
    n_train: int = 20000
    n_valid: int = 2000
    n_test_biased: int = 3000
    n_test_uniform: int = 6000
    list_len: int = 10
    title_len: int = 16
    gamma: float = 1.0
    sigma_rel: float = 0.1
    # lognormal sigma of the per-user patience multiplier; 0 recovers a
    # user-independent position bias
    patience_sigma: float = 0.5
    # sigma of the per-topic display boost added to the platform's ranking
    # score: the platform systematically over-ranks some topics, which is
    # what makes position-blind training genuinely distorted
    sigma_topic_bias: float = 0.6
    # affinity concentration; smaller -> peakier user interests
    affinity_concentration: float = 0.3
    # when set, every (user, item) relevance equals this constant, making
    # click-through depend on position alone
    flat_relevance: float | None = None
    seed: int = 0

    def validate(self) -> None:
        positive = ("vocab_size", "n_topics", "n_users", "list_len", "title_len")
        for name in positive:
            if getattr(self, name) <= 0:
                raise GenConfigError(f"{name} must be positive, got {getattr(self, name)}")
        nonneg = ("n_news", "n_train", "n_valid", "n_test_biased", "n_test_uniform")
        for name in nonneg:
            if getattr(self, name) < 0:
                raise GenConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.gamma < 0:
            raise GenConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.sigma_rel < 0:
            raise GenConfigError(f"sigma_rel must be >= 0, got {self.sigma_rel}")
        if self.patience_sigma < 0:
            raise GenConfigError(f"patience_sigma must be >= 0, got {self.patience_sigma}")
        if self.sigma_topic_bias < 0:
            raise GenConfigError(
                f"sigma_topic_bias must be >= 0, got {self.sigma_topic_bias}")
        if self.n_topics > self.vocab_size:
            raise GenConfigError(
                f"n_topics ({self.n_topics}) must not exceed vocab_size ({self.vocab_size})")
        if self.flat_relevance is not None and not 0.0 <= self.flat_relevance <= 1.0:
            raise GenConfigError(
                f"flat_relevance must be in [0, 1], got {self.flat_relevance}")

    def impressions_for(self, split: str) -> int:
        return {"train": self.n_train, "valid": self.n_valid,
                "test_biased": self.n_test_biased, "test_uniform": self.n_test_uniform}[split]

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise GenConfigError(f"unknown generator config field(s): {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


def examination_prob(position: int, gamma: float) -> float:
    """Inverse-power examination curve: position**(-gamma), in (0, 1]."""
    if position < 1:
        raise GenConfigError(f"position must be >= 1, got {position}")
    return float(position) ** (-gamma)


def _rng(*entropy) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy))


def generate_catalog(cfg: GenConfig) -> list[NewsArticle]:
    """Topic-tagged articles with titles drawn from per-topic vocabularies.

    Token id 0 is the pad symbol. Ids 1..n_shared are shared across topics;
    the remaining vocabulary is sliced evenly per topic. Titles have random
    lengths (at least half of title_len) and are zero-padded to title_len.
    """
    cfg.validate()
    rng = _rng(cfg.seed, 1)
    n_words = cfg.vocab_size - 1  # excluding pad
    n_shared = max(1, int(n_words * 0.2))
    per_topic = max(1, (n_words - n_shared) // cfg.n_topics)
    articles = []
    for news_id in range(cfg.n_news):
        topic = int(rng.integers(cfg.n_topics))
        min_len = max(1, cfg.title_len // 2)
        length = int(rng.integers(min_len, cfg.title_len + 1))
        tokens = np.full(cfg.title_len, PAD_TOKEN, dtype=np.int64)
        for i in range(length):
            if rng.random() < SHARED_WORD_PROB:
                tokens[i] = 1 + rng.integers(n_shared)
            else:
                lo = 1 + n_shared + topic * per_topic
                tokens[i] = lo + rng.integers(per_topic)
        tokens = np.minimum(tokens, cfg.vocab_size - 1)
        articles.append(NewsArticle(news_id, topic, tuple(int(t) for t in tokens)))
    return articles


def generate_users(cfg: GenConfig) -> list[SynthUser]:
    """Users with Dirichlet topic affinities and lognormal position patience."""
    cfg.validate()
    rng = _rng(cfg.seed, 2)
    users = []
    for user_id in range(cfg.n_users):
        affinity = rng.dirichlet(np.full(cfg.n_topics, cfg.affinity_concentration))
        if cfg.patience_sigma > 0:
            patience = float(rng.lognormal(mean=0.0, sigma=cfg.patience_sigma))
        else:
            patience = 1.0
        users.append(SynthUser(user_id, tuple(float(a) for a in affinity), patience))
    return users


def simulate_impressions(cfg: GenConfig, catalog: list[NewsArticle],
                         users: list[SynthUser], ranking_mode: str,
                         n_impressions: int | None = None, split: str = "train",
                         first_impression_id: int = 0) -> list[Impression]:
    """Simulate displayed lists and examination-hypothesis clicks.

    Biased mode ranks candidates by the platform's score: the noisy
    relevance estimate rel(u, d) = affinity[topic(d)] + Normal(0, sigma_rel)
    plus a per-topic display boost Normal(0, sigma_topic_bias) drawn once
    per run (the platform systematically favors some topics). Uniform mode
    shuffles. The rel draw, clipped to [0, 1], is the click relevance, so
    clicks are Bernoulli(exam(pos) * rel_clip); the topic boost affects
    ranking only, never the click itself. Zero-click impressions are kept.

    Per-impression randomness comes from a stream seeded by
    (seed, split, user_id), so generation may be parallelized per user
    without changing the output.
    """
    cfg.validate()
    if ranking_mode not in RANKING_MODES:
        raise GenConfigError(f"ranking_mode must be one of {RANKING_MODES}, got {ranking_mode!r}")
    if split not in SPLITS:
        raise GenConfigError(f"split must be one of {SPLITS}, got {split!r}")
    if not catalog or not users:
        raise GenConfigError("catalog and users must be nonempty")
    if cfg.list_len > len(catalog):
        raise GenConfigError(
            f"list_len ({cfg.list_len}) must not exceed catalog size ({len(catalog)})")
    if n_impressions is None:
        n_impressions = cfg.impressions_for(split)

    topics = np.array([a.topic_id for a in catalog])
    # the platform's per-topic display preference, fixed across splits
    topic_boost = _rng(cfg.seed, 9).normal(0.0, cfg.sigma_topic_bias, size=cfg.n_topics)
    split_code = SPLITS.index(split)
    # impression -> user assignment from its own stream, then per-user streams
    assign_rng = _rng(cfg.seed, 3, split_code)
    assigned = assign_rng.integers(len(users), size=n_impressions)

    user_rngs: dict[int, np.random.Generator] = {}
    impressions = []
    for idx in range(n_impressions):
        user = users[int(assigned[idx])]
        rng = user_rngs.get(user.user_id)
        if rng is None:
            rng = _rng(cfg.seed, 4, split_code, user.user_id)
            user_rngs[user.user_id] = rng

        cand = rng.choice(len(catalog), size=cfg.list_len, replace=False)
        if cfg.flat_relevance is not None:
            rel = np.full(cfg.list_len, cfg.flat_relevance)
        else:
            affinity = np.asarray(user.topic_affinity)
            rel = affinity[topics[cand]] + rng.normal(0.0, cfg.sigma_rel, size=cfg.list_len)
        if ranking_mode == "biased":
            order = np.argsort(-(rel + topic_boost[topics[cand]]), kind="stable")
        else:
            order = rng.permutation(cfg.list_len)
        ranked = cand[order]
        rel_clip = np.clip(rel[order], 0.0, 1.0)
        positions = np.arange(1, cfg.list_len + 1)
        exam = positions.astype(np.float64) ** (-cfg.gamma * user.patience)
        clicks = (rng.random(cfg.list_len) < exam * rel_clip).astype(np.int64)
        items = tuple((int(ranked[i]), int(positions[i]), int(clicks[i]))
                      for i in range(cfg.list_len))
        impressions.append(Impression(first_impression_id + idx, user.user_id, items, split))
    return impressions


def generate_dataset(cfg: GenConfig) -> tuple[list[NewsArticle], dict[str, list[Impression]]]:
    """Full biased-train / uniform-test protocol in one call.

    Train, valid, and test_biased come from biased (relevance-ranked) logs;
    test_uniform from uniformly shuffled lists. Impression ids are globally
    unique across splits.
    """
    cfg.validate()
    catalog = generate_catalog(cfg)
    users = generate_users(cfg)
    splits: dict[str, list[Impression]] = {}
    next_id = 0
    for split in SPLITS:
        mode = "uniform" if split == "test_uniform" else "biased"
        imps = simulate_impressions(cfg, catalog, users, mode, split=split,
                                    first_impression_id=next_id)
        splits[split] = imps
        next_id += len(imps)
    return catalog, splits


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def write_catalog(path: str, catalog: list[NewsArticle]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for a in catalog:
            f.write(json.dumps({"news_id": a.news_id, "topic_id": a.topic_id,
                                "title_tokens": list(a.title_tokens)}) + "\n")


def read_catalog(path: str) -> list[NewsArticle]:
    catalog = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                catalog.append(NewsArticle(int(d["news_id"]), int(d["topic_id"]),
                                           tuple(int(t) for t in d["title_tokens"])))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise LogFormatError(f"{path}:{line_no}: malformed catalog line ({e})") from None
    return catalog


def _validate_impression(imp: Impression, line_no: int, path: str) -> None:
    if not imp.items:
        raise LogFormatError(f"{path}:{line_no}: impression has no items")
    positions = [p for _, p, _ in imp.items]
    if len(set(positions)) != len(positions):
        raise LogFormatError(f"{path}:{line_no}: duplicate display positions {positions}")
    if any(p < 1 for p in positions):
        raise LogFormatError(f"{path}:{line_no}: display positions must start at 1")
    if any(c not in (0, 1) for _, _, c in imp.items):
        raise LogFormatError(f"{path}:{line_no}: clicked must be 0 or 1")
    if imp.split not in SPLITS:
        raise LogFormatError(f"{path}:{line_no}: unknown split {imp.split!r}")


def write_logs(path: str, impressions: list[Impression]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for imp in impressions:
            f.write(json.dumps({"impression_id": imp.impression_id, "user_id": imp.user_id,
                                "split": imp.split,
                                "items": [list(it) for it in imp.items]}) + "\n")


def read_logs(path: str) -> list[Impression]:
    """Load impressions, validating every invariant; errors carry line numbers."""
    impressions = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                imp = Impression(int(d["impression_id"]), int(d["user_id"]),
                                 tuple((int(n), int(p), int(c)) for n, p, c in d["items"]),
                                 str(d["split"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise LogFormatError(f"{path}:{line_no}: malformed log line ({e})") from None
            _validate_impression(imp, line_no, path)
            impressions.append(imp)
    return impressions


# ---------------------------------------------------------------------------
# position report
# ---------------------------------------------------------------------------


def position_report(impressions: list[Impression]) -> list[tuple[int, int, float]]:
    """Rows of (position, impression_count, ctr) over all items shown."""
    if not impressions:
        raise GenConfigError("position_report: dataset is empty")
    shown: dict[int, int] = {}
    clicked: dict[int, int] = {}
    for imp in impressions:
        for _, pos, c in imp.items:
            shown[pos] = shown.get(pos, 0) + 1
            clicked[pos] = clicked.get(pos, 0) + c
    return [(pos, shown[pos], clicked[pos] / shown[pos]) for pos in sorted(shown)]


def write_position_report(path: str, rows: list[tuple[int, int, float]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("position,impression_count,ctr\n")
        for pos, count, ctr in rows:
            f.write(f"{pos},{count},{ctr!r}\n")
