"""Ranking metrics, protocol wiring, propensity estimation, IPW/PAL pieces."""

import numpy as np
import pytest

from debiasrank import evaluation as ev
from debiasrank import synthgen as sg
from debiasrank import tensor as T
from debiasrank.encoders import ModelConfig
from debiasrank.model import DebiasModel
from debiasrank.training import TrainConfig, click_loss, train
from oracles import oracle_auc, oracle_mrr, oracle_ndcg


class TestMetricValues:
    def test_perfect_ranking(self):
        scores, labels = [0.9, 0.5, 0.1], [1, 0, 0]
        assert ev.auc(scores, labels) == 1.0
        assert ev.mrr(scores, labels) == 1.0
        assert ev.ndcg_at_k(scores, labels, 5) == 1.0

    def test_inverted_pair(self):
        scores, labels = [0.5, 0.9], [1, 0]
        assert ev.auc(scores, labels) == 0.0
        assert ev.mrr(scores, labels) == 0.5

    def test_ndcg_second_rank(self):
        scores, labels = [0.9, 0.7, 0.1], [0, 1, 0]
        assert ev.ndcg_at_k(scores, labels, 5) == pytest.approx(1.0 / np.log2(3.0), abs=1e-12)

    def test_constant_scores_auc_exactly_half(self):
        assert ev.auc([0.3, 0.3, 0.3, 0.3], [1, 0, 1, 0]) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(ev.EvalError):
            ev.auc([0.1, 0.2], [1, 1])

    @pytest.mark.parametrize("seed", range(10))
    def test_match_brute_force_oracles(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 9))
        labels = np.zeros(n, dtype=int)
        labels[rng.choice(n, size=int(rng.integers(1, n)), replace=False)] = 1
        if labels.sum() == n:
            labels[0] = 0
        scores = np.round(rng.normal(size=n), 2)  # rounding provokes ties
        assert ev.auc(scores, labels) == pytest.approx(oracle_auc(scores, labels), abs=1e-12)
        assert ev.mrr(scores, labels) == pytest.approx(oracle_mrr(scores, labels), abs=1e-12)
        for k in (5, 10):
            assert ev.ndcg_at_k(scores, labels, k) == pytest.approx(
                oracle_ndcg(scores, labels, k), abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(100 + seed)
        n = 7
        labels = np.array([1, 0, 0, 1, 0, 0, 0])
        scores = rng.normal(size=n)
        transformed = np.exp(2.0 * scores) + 1.5
        for fn in (ev.auc, ev.mrr, lambda s, l: ev.ndcg_at_k(s, l, 5)):
            assert fn(scores, labels) == pytest.approx(fn(transformed, labels), abs=1e-12)

    def test_aggregate_skips_single_class(self):
        scored = [(np.array([0.9, 0.1]), np.array([1, 0])),
                  (np.array([0.9, 0.1]), np.array([0, 0])),
                  (np.array([0.9, 0.1]), np.array([1, 1]))]
        report = ev.aggregate_metrics(scored)
        assert report.n_impressions == 1 and report.n_skipped == 2
        assert report.auc == 1.0


def tiny_world(seed=0, n_users=60, n_train=400, n_test=300):
    cfg = sg.GenConfig(vocab_size=300, n_topics=5, n_news=80, n_users=n_users,
                       n_train=n_train, n_valid=80, n_test_biased=80,
                       n_test_uniform=n_test, list_len=8, title_len=10, seed=seed)
    catalog, splits = sg.generate_dataset(cfg)
    return cfg, catalog, splits


class TestEvaluateProtocol:
    def test_untrained_model_near_half_auc_on_balanced_test(self):
        # clicks independent of content, so a fixed random-feature scorer
        # carries no usable signal
        cfg = sg.GenConfig(vocab_size=300, n_topics=5, n_news=80, n_users=200,
                           n_train=600, n_valid=0, n_test_biased=0,
                           n_test_uniform=2600, list_len=8, title_len=10,
                           flat_relevance=0.4, seed=11)
        catalog, splits = sg.generate_dataset(cfg)
        model_cfg = ModelConfig.desk(vocab_size=300, max_position=8,
                                     title_len=10, dropout=0.0)
        model = DebiasModel(model_cfg, method="adversarial", seed=1)
        profiles = ev.user_profiles(splits["train"])
        report = ev.evaluate(model, catalog, splits["test_uniform"], profiles,
                             "bias_invariant_default_pos")
        assert report.n_impressions >= 1500
        assert abs(report.auc - 0.5) < 0.02

    def test_same_model_evaluates_identically_twice(self):
        _, catalog, splits = tiny_world()
        model_cfg = ModelConfig.desk(vocab_size=300, max_position=8,
                                     title_len=10, dropout=0.0)
        model = DebiasModel(model_cfg, seed=3)
        profiles = ev.user_profiles(splits["train"])
        r1 = ev.evaluate(model, catalog, splits["valid"], profiles,
                         "bias_aware_at_true_pos")
        r2 = ev.evaluate(model, catalog, splits["valid"], profiles,
                         "bias_aware_at_true_pos")
        assert r1 == r2

    def test_empty_split_reports_zero_impressions(self):
        _, catalog, splits = tiny_world()
        model_cfg = ModelConfig.desk(vocab_size=300, max_position=8,
                                     title_len=10, dropout=0.0)
        model = DebiasModel(model_cfg, seed=3)
        report = ev.evaluate(model, catalog, [], {}, "bias_invariant_default_pos")
        assert report.n_impressions == 0 and report.n_skipped == 0

    def test_serving_scores_ignore_candidate_positions(self):
        """The default serving tower never reads candidate display positions."""
        _, catalog, splits = tiny_world()
        model_cfg = ModelConfig.desk(vocab_size=300, max_position=8,
                                     title_len=10, dropout=0.0)
        model = DebiasModel(model_cfg, seed=5)
        profiles = ev.user_profiles(splits["train"])
        imps = splits["test_uniform"][:50]
        shuffled = []
        for imp in imps:
            # reassign positions in reverse; scores must not move
            items = tuple((n, len(imp.items) - i, c)
                          for i, (n, p, c) in enumerate(imp.items))
            shuffled.append(sg.Impression(imp.impression_id, imp.user_id, items, imp.split))
        s1 = ev.score_impressions(model, catalog, imps, profiles,
                                  "bias_invariant_default_pos")
        s2 = ev.score_impressions(model, catalog, shuffled, profiles,
                                  "bias_invariant_default_pos")
        for (_, a, _), (_, b, _) in zip(s1, s2):
            np.testing.assert_array_equal(a, b)

    def test_aware_tower_does_read_positions(self):
        _, catalog, splits = tiny_world()
        model_cfg = ModelConfig.desk(vocab_size=300, max_position=8,
                                     title_len=10, dropout=0.0)
        model = DebiasModel(model_cfg, seed=5)
        # give position rows mass so the aware tower responds to them
        rng = np.random.default_rng(0)
        model.params["pos_emb"].values[...] = rng.normal(size=model.params["pos_emb"].shape)
        profiles = ev.user_profiles(splits["train"])
        imps = splits["test_uniform"][:20]
        flipped = [sg.Impression(i.impression_id, i.user_id,
                                 tuple((n, len(i.items) - k, c)
                                       for k, (n, p, c) in enumerate(i.items)),
                                 i.split) for i in imps]
        s1 = ev.score_impressions(model, catalog, imps, profiles, "bias_aware_at_true_pos")
        s2 = ev.score_impressions(model, catalog, flipped, profiles, "bias_aware_at_true_pos")
        assert any(not np.allclose(a, b) for (_, a, _), (_, b, _) in zip(s1, s2))

    def test_tower_validation(self):
        _, catalog, splits = tiny_world()
        model_cfg = ModelConfig.desk(vocab_size=300, max_position=8,
                                     title_len=10, dropout=0.0)
        adv = DebiasModel(model_cfg, method="adversarial", seed=0)
        plain = DebiasModel(model_cfg, method="plain", seed=0)
        profiles = ev.user_profiles(splits["train"])
        with pytest.raises(ev.EvalError):
            ev.evaluate(adv, catalog, splits["valid"], profiles, "plain")
        with pytest.raises(ev.EvalError):
            ev.evaluate(plain, catalog, splits["valid"], profiles,
                        "bias_invariant_default_pos")
        with pytest.raises(ev.EvalError):
            ev.evaluate(adv, catalog, splits["valid"], profiles, "made_up_tower")

    def test_thread_env_does_not_change_results(self, monkeypatch):
        _, catalog, splits = tiny_world()
        model_cfg = ModelConfig.desk(vocab_size=300, max_position=8,
                                     title_len=10, dropout=0.0)
        model = DebiasModel(model_cfg, seed=7)
        profiles = ev.user_profiles(splits["train"])
        r1 = ev.evaluate(model, catalog, splits["test_uniform"], profiles,
                         "bias_invariant_default_pos", batch_size=64)
        monkeypatch.setenv(ev.THREADS_ENV, "3")
        r2 = ev.evaluate(model, catalog, splits["test_uniform"], profiles,
                         "bias_invariant_default_pos", batch_size=64)
        assert r1 == r2


class TestPropensities:
    def _uniform_flat_logs(self, n, gamma=1.0, seed=0):
        cfg = sg.GenConfig(vocab_size=200, n_topics=4, n_news=60, n_users=50,
                           list_len=10, gamma=gamma, patience_sigma=0.0,
                           flat_relevance=0.5, seed=seed)
        catalog, users = sg.generate_catalog(cfg), sg.generate_users(cfg)
        return sg.simulate_impressions(cfg, catalog, users, "uniform", n, "train")

    def test_recovers_examination_curve_per_bucket(self):
        imps = self._uniform_flat_logs(20000)
        table = ev.estimate_propensities(imps, n_buckets=4)
        # oracle: count-weighted mean of p**-1 within each bucket
        bucket_positions = {0: [1], 1: [2], 2: [3, 4, 5], 3: [6, 7, 8, 9, 10]}
        for b, positions in bucket_positions.items():
            want = np.mean([p ** -1.0 for p in positions])
            assert abs(table.propensity(b) - want) < 0.03

    def test_gamma_zero_gives_unit_propensities(self):
        imps = self._uniform_flat_logs(4000, gamma=0.0)
        table = ev.estimate_propensities(imps, n_buckets=4)
        for b in range(4):
            assert table.propensity(b) > 0.9

    def test_single_bucket_dataset(self):
        imps = [sg.Impression(i, 0, ((i % 7, 1, 1 if i % 2 else 0),), "train")
                for i in range(10)]
        table = ev.estimate_propensities(imps, n_buckets=1)
        assert table.propensity(0) == 1.0

    def test_bucket_without_clicks_falls_back_to_global_ratio(self):
        imps = [sg.Impression(0, 0, ((1, 1, 1), (2, 1000, 0)), "train"),
                sg.Impression(1, 0, ((3, 1, 1), (4, 1000, 0)), "train")]
        table = ev.estimate_propensities(imps, n_buckets=33)
        assert table.propensity(32) == pytest.approx(0.5, abs=1e-12)

    def test_floor_clipping(self):
        # 199 shows with 1 click in the deep bucket vs CTR 1.0 at the top
        items_top = [sg.Impression(i, 0, ((0, 1, 1),), "train") for i in range(100)]
        items_deep = [sg.Impression(100 + i, 0, ((1, 100, 1 if i == 0 else 0),), "train")
                      for i in range(199)]
        table = ev.estimate_propensities(items_top + items_deep, n_buckets=11)
        assert table.propensity(10) == table.p_min == 0.05

    def test_empty_dataset_rejected(self):
        with pytest.raises(ev.EvalError):
            ev.estimate_propensities([], n_buckets=4)


class TestIpwLoss:
    def _table(self, value):
        return ev.PropensityTable({b: value for b in range(4)}, "sqrt", 4)

    def test_half_propensity_doubles_loss(self):
        scores = np.array([1.0, 0.3, -0.2])
        base = click_loss(scores).item()
        weighted = ev.ipw_click_loss(scores, positive_position=4, table=self._table(0.5))
        assert weighted.item() == pytest.approx(2.0 * base, abs=1e-12)

    def test_unit_propensity_identical(self):
        scores = np.array([0.5, 0.1])
        assert ev.ipw_click_loss(scores, 1, self._table(1.0)).item() == \
            pytest.approx(click_loss(scores).item(), abs=1e-15)

    def test_floor_weight_is_twenty(self):
        scores = np.array([0.0, 0.0])
        loss = ev.ipw_click_loss(scores, 1, self._table(0.05))
        assert loss.item() == pytest.approx(20.0 * np.log(2.0), abs=1e-9)


class TestPalScore:
    def _model(self):
        cfg = ModelConfig.desk(vocab_size=100, max_position=10, dropout=0.0)
        return DebiasModel(cfg, method="pal", seed=0)

    def test_seen_half_times_sigmoid(self):
        model = self._model()
        # seen logits start at zero -> seen prob exactly 0.5
        rel = float(np.log(0.4 / 0.6))  # sigmoid(rel) = 0.4
        assert ev.pal_score(model, rel, position=3) == pytest.approx(0.2, abs=1e-12)

    def test_unit_seen_prob_reduces_to_sigmoid(self):
        model = self._model()
        model.params["pal.seen_logit"].values[...] = 50.0  # sigmoid -> 1
        assert ev.pal_score(model, 0.0, position=5) == pytest.approx(0.5, abs=1e-9)

    def test_serving_is_position_invariant(self):
        _, catalog, splits = tiny_world(seed=2)
        tc = TrainConfig(method="pal", epochs=1, lr=1e-3, seed=0)
        result = train(catalog, splits, tc)
        profiles = ev.user_profiles(splits["train"])
        imps = splits["test_uniform"][:30]
        flipped = [sg.Impression(i.impression_id, i.user_id,
                                 tuple((n, len(i.items) - k, c)
                                       for k, (n, p, c) in enumerate(i.items)),
                                 i.split) for i in imps]
        s1 = ev.score_impressions(result.model, catalog, imps, profiles, "plain")
        s2 = ev.score_impressions(result.model, catalog, flipped, profiles, "plain")
        for (_, a, _), (_, b, _) in zip(s1, s2):
            np.testing.assert_array_equal(a, b)


class TestMetricsCsv:
    def test_roundtrip_shape(self, tmp_path):
        report = ev.MetricReport(0.6, 0.4, 0.45, 0.5, 100, 7)
        path = str(tmp_path / "metrics.csv")
        ev.write_metrics_csv(path, [report.row("r1", "test_uniform", "plain")])
        lines = open(path).read().strip().split("\n")
        assert lines[0].startswith("run_id,split,tower,auc")
        assert lines[1].startswith("r1,test_uniform,plain,0.6")
