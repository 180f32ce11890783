"""Corruption statistics (3-sigma binomial/multinomial checks), per-objective
gradient checks, and degenerate-case guards."""

import math

import numpy as np
import pytest

from denseadapt import (LossConfig, Passage, finite_diff_gradcheck,
                        init_encoder, mnrl_loss)
from denseadapt.models import NUM_RESERVED, encode_ids, new_grads
from denseadapt.pretraining import (PretrainConfig, condensor_loss, ct_step,
                                    ict_example, init_condensor_head,
                                    init_tsdae_decoder, mlm_corrupt,
                                    mlm_corrupt_and_loss, pretrain,
                                    simcse_pairs, simcse_step, split_sentences,
                                    token_cross_entropy, tsdae_corrupt,
                                    tsdae_loss, udalm_step)

TOKENS = [f"w{i}" for i in range(24)]


@pytest.fixture
def model():
    return init_encoder(TOKENS, dim=6, seed=0, init_scale=0.3)


class TestTokenCrossEntropy:
    def test_uniform_logits_cost_log_vocab(self):
        logits = np.zeros((4, 50))
        loss, _ = token_cross_entropy(logits, [1, 2, 3, 4])
        assert loss == pytest.approx(math.log(50))

    def test_oracle_logits_near_zero(self):
        logits = np.full((3, 10), -1000.0)
        targets = [2, 5, 7]
        for i, t in enumerate(targets):
            logits[i, t] = 1000.0
        loss, _ = token_cross_entropy(logits, targets)
        assert loss == pytest.approx(0.0, abs=1e-12)


class TestTsdaeCorrupt:
    def test_exact_survivor_count(self):
        tokens = [f"t{i}" for i in range(10)]
        out = tsdae_corrupt(tokens, 0.6, rng=0)
        assert len(out) == 4

    def test_order_preserved(self):
        tokens = [f"t{i}" for i in range(30)]
        out = tsdae_corrupt(tokens, 0.6, rng=1)
        positions = [tokens.index(t) for t in out]
        assert positions == sorted(positions)

    def test_ratio_zero_identity(self):
        tokens = ["a", "b", "c"]
        assert tsdae_corrupt(tokens, 0.0, rng=0) == tokens

    def test_single_token_guard(self):
        assert tsdae_corrupt(["only"], 0.6, rng=0) == ["only"]
        assert tsdae_corrupt(["only"], 1.0, rng=0) == ["only"]

    @pytest.mark.parametrize("n", [1, 2, 5, 9, 17, 100])
    def test_survivor_formula(self, n):
        tokens = [f"t{i}" for i in range(n)]
        out = tsdae_corrupt(tokens, 0.6, rng=3)
        assert len(out) == max(1, n - math.floor(0.6 * n))

    def test_deterministic(self):
        tokens = [f"t{i}" for i in range(20)]
        assert tsdae_corrupt(tokens, 0.6, rng=9) == tsdae_corrupt(tokens, 0.6, rng=9)


class TestTsdaeLoss:
    def test_empty_original_rejected(self, model):
        decoder = init_tsdae_decoder(model.dim, seed=1)
        with pytest.raises(ValueError):
            tsdae_loss(model, decoder, [], [])

    def test_gradcheck(self, model):
        decoder = init_tsdae_decoder(model.dim, seed=1)
        original = ["w0", "w3", "w5", "w7", "w9", "w11"]
        corrupted = tsdae_corrupt(original, 0.6, rng=4)
        params = {"embedding": model.embedding, "projection": model.projection,
                  "decoder": decoder.weight}

        def loss_fn(p):
            model.embedding, model.projection = p["embedding"], p["projection"]
            decoder.weight = p["decoder"]
            return tsdae_loss(model, decoder, original, corrupted)

        report = finite_diff_gradcheck(loss_fn, params, tolerance=1e-4)
        assert report.passed, report


class TestMlm:
    def test_selection_count_ceiling(self):
        ids = list(range(NUM_RESERVED, NUM_RESERVED + 20))
        _, positions, _ = mlm_corrupt(ids, vocab_size=30, mask_ratio=0.15, rng=0)
        assert len(positions) == 3

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mlm_corrupt([], vocab_size=30)

    def test_action_split_multinomial_3sigma(self):
        counts = {"mask": 0, "random": 0, "keep": 0}
        total = 0
        ids = list(range(NUM_RESERVED, NUM_RESERVED + 10))
        draws = 10_000
        for i in range(draws):
            _, _, actions = mlm_corrupt(ids, vocab_size=30, mask_ratio=0.1, rng=i)
            for a in actions:
                counts[a] += 1
                total += 1
        for action, p in (("mask", 0.8), ("random", 0.1), ("keep", 0.1)):
            sigma = math.sqrt(total * p * (1 - p))
            assert abs(counts[action] - total * p) <= 3 * sigma, (action, counts)

    def test_gradcheck(self, model):
        tokens = ["w1", "w2", "w3", "w4", "w5", "w6", "w7", "w8"]

        def loss_fn(m):
            return mlm_corrupt_and_loss(m, tokens, mask_ratio=0.3, rng=11)

        assert finite_diff_gradcheck(loss_fn, model, tolerance=1e-4).passed


class TestIct:
    def test_split_sentences(self):
        text = "First one. Second here! Third? Trailing"
        assert split_sentences(text) == ["First one.", "Second here!",
                                         "Third?", "Trailing"]

    def test_single_sentence_keeps_context(self):
        query, context = ict_example(["only sentence here."], rng=0)
        assert query == "only sentence here."
        assert context == "only sentence here."

    def test_removal_branch_shrinks_context(self):
        sentences = ["one.", "two.", "three."]
        removed = 0
        for seed in range(200):
            query, context = ict_example(sentences, mask_prob=1.0, rng=seed)
            assert query not in split_sentences(context)
            assert len(split_sentences(context)) == 2
            removed += 1
        assert removed == 200

    def test_removal_frequency_binomial_3sigma(self):
        sentences = ["alpha one.", "beta two.", "gamma three."]
        draws = 10_000
        removed = 0
        for seed in range(draws):
            _, context = ict_example(sentences, mask_prob=0.9, rng=seed)
            removed += len(split_sentences(context)) == 2
        sigma = math.sqrt(draws * 0.9 * 0.1)
        assert abs(removed - draws * 0.9) <= 3 * sigma

    def test_no_sentences_rejected(self):
        with pytest.raises(ValueError):
            ict_example([], rng=0)

    def test_gradcheck_through_pair_loss(self, model):
        sentences = ["w0 w1 w2.", "w3 w4.", "w5 w6 w7."]
        pairs = [ict_example(sentences, rng=s) for s in range(3)]
        cfg = LossConfig(tau=10.0, similarity="cosine")

        def loss_fn(m):
            q, qc = encode_ids(m, [m.token_ids(t) for t, _ in pairs])
            c, cc = encode_ids(m, [m.token_ids(t) for _, t in pairs])
            loss, gq, gc = mnrl_loss(q, c, cfg)
            grads = new_grads(m)
            from denseadapt.models import encode_backward
            encode_backward(m, qc, gq, grads)
            encode_backward(m, cc, gc, grads)
            return loss, grads

        assert finite_diff_gradcheck(loss_fn, model, tolerance=1e-4).passed


class TestSimcse:
    def test_rate_zero_identical_views(self, model):
        texts = ["w0 w1", "w2 w3"]
        q, p, _, _ = simcse_pairs(model, texts, dropout_rate=0.0, rng=0)
        np.testing.assert_array_equal(q, p)

    def test_same_seed_identical_pairs(self, model):
        texts = ["w0 w1", "w2 w3", "w4"]
        a = simcse_pairs(model, texts, dropout_rate=0.1, rng=5)
        b = simcse_pairs(model, texts, dropout_rate=0.1, rng=5)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_invalid_rate_rejected(self, model):
        with pytest.raises(ValueError):
            simcse_pairs(model, ["w0"], dropout_rate=1.0, rng=0)

    def test_regression_anchor_finite_positive(self, model):
        texts = [f"w{i} w{i+1}" for i in range(8)]
        cfg = LossConfig(tau=20.0, similarity="cosine")
        loss, _ = simcse_step(model, texts, cfg, dropout_rate=0.1, rng=7)
        assert np.isfinite(loss) and loss > 0

    def test_gradcheck(self, model):
        cfg = LossConfig(tau=10.0, similarity="cosine")

        def loss_fn(m):
            return simcse_step(m, ["w0 w1", "w2 w3", "w4 w5"], cfg,
                               dropout_rate=0.1, rng=13)

        assert finite_diff_gradcheck(loss_fn, model, tolerance=1e-4).passed


class TestCt:
    def test_equal_encoders_match_simcse_rate_zero(self, model):
        texts = ["w0 w1", "w2 w3", "w4 w5"]
        cfg = LossConfig(tau=10.0, similarity="cosine")
        pairs = [(t, t) for t in texts]
        loss_ct, _, _ = ct_step(pairs, model, model, cfg)
        loss_simcse, _ = simcse_step(model, texts, cfg, dropout_rate=0.0, rng=0)
        assert loss_ct == pytest.approx(loss_simcse, abs=1e-12)

    def test_gradients_flow_to_both(self, model):
        other = init_encoder(TOKENS, dim=6, seed=9, init_scale=0.3)
        pairs = [("w0 w1", "w0 w1"), ("w2", "w2"), ("w4 w5", "w4 w5")]
        cfg = LossConfig(tau=10.0, similarity="cosine")
        _, grads_a, grads_b = ct_step(pairs, model, other, cfg)
        assert np.any(grads_a["embedding"] != 0)
        assert np.any(grads_b["embedding"] != 0)

    def test_gradcheck_both_parameter_sets(self, model):
        other = init_encoder(TOKENS, dim=6, seed=9, init_scale=0.3)
        pairs = [("w0 w1", "w0 w1"), ("w2 w3", "w2 w3"), ("w4", "w4")]
        cfg = LossConfig(tau=10.0, similarity="cosine")
        params = {"a_emb": model.embedding, "a_proj": model.projection,
                  "b_emb": other.embedding, "b_proj": other.projection}

        def loss_fn(p):
            model.embedding, model.projection = p["a_emb"], p["a_proj"]
            other.embedding, other.projection = p["b_emb"], p["b_proj"]
            loss, ga, gb = ct_step(pairs, model, other, cfg)
            return loss, {"a_emb": ga["embedding"], "a_proj": ga["projection"],
                          "b_emb": gb["embedding"], "b_proj": gb["projection"]}

        assert finite_diff_gradcheck(loss_fn, params, tolerance=1e-4).passed


class TestCondensor:
    def test_mean_pooling_rejected(self, model):
        head = init_condensor_head(model.dim, seed=0)
        with pytest.raises(ValueError):
            condensor_loss(model, head, ["w0", "w1"], rng=0)

    def test_gradcheck(self):
        cls_model = init_encoder(TOKENS, dim=6, seed=3, pooling="cls",
                                 init_scale=0.3)
        head = init_condensor_head(6, seed=4)
        tokens = ["w0", "w2", "w4", "w6", "w8", "w10"]
        params = {"embedding": cls_model.embedding,
                  "projection": cls_model.projection, "head": head}

        def loss_fn(p):
            cls_model.embedding = p["embedding"]
            cls_model.projection = p["projection"]
            loss, grads = condensor_loss(cls_model, p["head"], tokens,
                                         mask_ratio=0.3, rng=21)
            return loss, grads

        assert finite_diff_gradcheck(loss_fn, params, tolerance=1e-4).passed


class TestUdalm:
    def source_batch(self):
        return (["w0 w1", "w2"], ["w0 w1 w3", "w2 w4"], ["w5", "w6 w7"],
                [1.0, -0.5])

    def test_mix_weight_validation(self, model):
        with pytest.raises(ValueError):
            udalm_step(model, ["w0"], self.source_batch(), mix_weight=1.5)

    def test_pure_endpoints(self, model):
        from denseadapt import margin_mse_loss
        from denseadapt.models import encode_batch

        loss_mse_only, _ = udalm_step(model, ["w0 w1"], self.source_batch(),
                                      mix_weight=0.0, rng=3)
        q, p, n, margins = self.source_batch()
        q_e = encode_batch(model, q)
        pred = (q_e * encode_batch(model, p)).sum(1) \
            - (q_e * encode_batch(model, n)).sum(1)
        expected, _ = margin_mse_loss(pred, np.asarray(margins))
        assert loss_mse_only == pytest.approx(expected)

        loss_mlm_only, _ = udalm_step(model, ["w0 w1 w2 w3"],
                                      self.source_batch(), mix_weight=1.0,
                                      rng=3)
        loss_mlm_direct, _ = mlm_corrupt_and_loss(
            model, ["w0", "w1", "w2", "w3"], 0.15,
            np.random.default_rng(3))
        assert loss_mlm_only == pytest.approx(loss_mlm_direct)

    def test_convex_combination(self, model):
        # with both sub-losses equal, any mix weight returns that value
        half, _ = udalm_step(model, ["w0 w1 w2"], self.source_batch(),
                             mix_weight=0.5, rng=5)
        mlm_part, _ = udalm_step(model, ["w0 w1 w2"], self.source_batch(),
                                 mix_weight=1.0, rng=5)
        mse_part, _ = udalm_step(model, ["w0 w1 w2"], self.source_batch(),
                                 mix_weight=0.0, rng=5)
        assert half == pytest.approx(0.5 * mlm_part + 0.5 * mse_part)

    def test_gradcheck(self, model):
        def loss_fn(m):
            return udalm_step(m, ["w0 w1 w2", "w3 w4"], self.source_batch(),
                              mix_weight=0.5, mask_ratio=0.3, rng=17)

        assert finite_diff_gradcheck(loss_fn, model, tolerance=1e-4).passed


class TestPretrainLoop:
    def corpus(self):
        return [Passage(f"p{i}", "", f"w{2*i} w{2*i+1} tail. w{(3*i) % 24} end.")
                for i in range(8)]

    @pytest.mark.parametrize("method", ["tsdae", "mlm", "ict", "simcse", "ct"])
    def test_runs_and_returns_model(self, method):
        model = init_encoder(TOKENS, dim=6, seed=1, init_scale=0.2)
        before = model.embedding.copy()
        cfg = PretrainConfig(method=method, steps=5, batch_size=4,
                             learning_rate=0.05, seed=2)
        out = pretrain(model, self.corpus(), cfg)
        assert out is model
        assert np.any(out.embedding != before)

    def test_cd_requires_cls(self):
        model = init_encoder(TOKENS, dim=6, seed=1)
        cfg = PretrainConfig(method="cd", steps=2, batch_size=2)
        with pytest.raises(ValueError):
            pretrain(model, self.corpus(), cfg)

    def test_cd_runs_with_cls(self):
        model = init_encoder(TOKENS, dim=6, seed=1, pooling="cls",
                             init_scale=0.2)
        cfg = PretrainConfig(method="cd", steps=3, batch_size=4,
                             learning_rate=0.05, seed=2)
        before = model.embedding.copy()
        pretrain(model, self.corpus(), cfg)
        assert np.any(model.embedding != before)

    def test_deterministic(self):
        cfg = PretrainConfig(method="tsdae", steps=4, batch_size=4,
                             learning_rate=0.05, seed=8)
        m1 = init_encoder(TOKENS, dim=6, seed=1, init_scale=0.2)
        m2 = init_encoder(TOKENS, dim=6, seed=1, init_scale=0.2)
        pretrain(m1, self.corpus(), cfg)
        pretrain(m2, self.corpus(), cfg)
        np.testing.assert_array_equal(m1.embedding, m2.embedding)

    def test_unknown_method_rejected(self):
        with pytest.raises(ValueError):
            PretrainConfig(method="nope")
