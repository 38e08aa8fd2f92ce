"""
Test suite for stochastic-depth training

Tests the depth sampler, truncated back-propagation, the batched and masked
losses, the optimizer and the learning-rate schedule.
"""

from unittest.mock import patch

import numpy as np
import pytest

from looped_vlm import tensor as T
from looped_vlm.errors import CheckpointError, DataError
from looped_vlm.model import MultimodalModel
from looped_vlm.tensor import Array, Graph, Parameter
from looped_vlm.tokenizer import VOCAB, encode
from looped_vlm.training import (AdamW, BatchPrefetcher, DepthDistribution, DepthSample, PreparedBatch, Trainer,
                                 adamw_step, batch_loss, cosine_lr, iterate_forward, masked_ce_loss, pad_batch,
                                 sample_depth, sample_loss)

from test_config import TestConfig


@pytest.mark.unit
class TestDepthSampler:
    """Test cases for sample_depth"""

    def test_empirical_moments(self):
        """Test mean r_bar + 1 and the log-normal-Poisson spread over 10^5 draws"""
        dist = DepthDistribution(r_bar=8, sigma_lambda=0.5, r_max=200, k_grad=4)
        rng = np.random.default_rng(0)
        draws = np.array([sample_depth(dist, rng).r for _ in range(100_000)])
        assert draws.min() >= 1
        assert 8.55 <= draws.mean() <= 9.45
        # Var[r] = E[lambda] + Var[lambda] = 9 + 81 * (exp(0.25) - 1)
        assert draws.std() == pytest.approx(np.sqrt(9.0 + 81.0 * np.expm1(0.25)), rel=0.05)

    def test_bounds_and_split(self):
        """Test clamping to [1, r_max] and the no-grad/grad split"""
        dist = DepthDistribution(r_bar=8, sigma_lambda=1.0, r_max=10, k_grad=4)
        rng = np.random.default_rng(1)
        for _ in range(500):
            d = sample_depth(dist, rng)
            assert 1 <= d.r <= 10
            assert d.n_grad == min(d.r, 4)
            assert d.n_no_grad + d.n_grad == d.r

    def test_fixed_depth(self):
        """Test that a fixed depth is always returned"""
        dist = DepthDistribution(fixed=1, k_grad=4)
        assert sample_depth(dist, 5) == DepthSample(r=1, n_no_grad=0, n_grad=1)

    def test_reproducible(self):
        """Test that integer seeds give repeatable draws"""
        dist = DepthDistribution()
        assert sample_depth(dist, 123) == sample_depth(dist, 123)

    def test_from_config(self):
        """Test building the distribution from a run config"""
        cfg = TestConfig.tiny_config()
        dist = DepthDistribution.from_config(cfg)
        assert (dist.r_bar, dist.r_max, dist.k_grad, dist.fixed) == (3, 8, 2, None)


@pytest.mark.unit
class TestTruncatedBackprop:
    """Test cases for iterate_forward and sample_loss"""

    def setup_method(self):
        """Set up test fixtures"""
        self.cfg = TestConfig.tiny_config()
        self.model = MultimodalModel(self.cfg)
        self.image = np.random.default_rng(0).integers(0, 256, (3, 16, 16)).astype(np.uint8)
        self.sample = encode("how many red squares?", "2", TestConfig.TINY_VISUAL_TOKENS)

    def _forward(self, depth):
        backbone = self.model.backbone
        hierarchy = self.model.encode_image(self.image)
        emb = backbone.embed(self.sample.token_ids, hierarchy)
        prelude_out = backbone.run_prelude(emb.e)
        return iterate_forward(backbone, prelude_out, emb, hierarchy, depth, state_seed=0)

    def test_graph_holds_only_last_k_steps(self):
        """Test that the recorded graph contains exactly n_grad adapter applications"""
        state = self._forward(DepthSample(r=6, n_no_grad=4, n_grad=2))
        graph = Graph.from_output(state.values)
        assert graph.count("concat") == 2
        assert state.iteration == 6

    def test_prefix_steps_are_constants(self):
        """Test that the state entering the recorded steps is a cut leaf"""
        state = self._forward(DepthSample(r=5, n_no_grad=3, n_grad=2))
        graph = Graph.from_output(state.values)
        boundaries = graph.detach_boundaries
        assert any(b.shape == state.values.shape for b in boundaries)

    def test_truncated_gradient_equals_detached_reference(self):
        """Test that prefix-under-no_grad matches an explicit detach of the prefix state"""
        with T.precision("float64"):
            model = MultimodalModel(TestConfig.tiny_config())
            backbone = model.backbone
            model.freeze_except("all")
            hierarchy = model.encode_image(self.image)
            emb = backbone.embed(self.sample.token_ids, hierarchy)
            prelude_out = backbone.run_prelude(emb.e)
            state = iterate_forward(backbone, prelude_out, emb, hierarchy, DepthSample(3, 1, 2), 0)
            loss = masked_ce_loss(backbone.head_logits(state.values), self.sample.token_ids, self.sample.target_mask)
            loss.backward()
            truncated = backbone.adapter.weight.grad.copy()
            model.zero_grad()

            # reference: full graph but with the first step's output detached
            from looped_vlm.backbone import init_state, inject
            schedule = backbone.schedule(3)
            s = init_state(prelude_out.shape[0], backbone.cfg.hidden, backbone.cfg.state_std, 0)
            for i in range(1, 4):
                s = backbone.recurrent_step(s, inject(prelude_out, hierarchy, schedule, i, emb.visual_span))
                if i == 1:
                    s.values = T.detach(s.values)
            ref = masked_ce_loss(backbone.head_logits(s.values), self.sample.token_ids, self.sample.target_mask)
            ref.backward()
        assert ref.item() == pytest.approx(loss.item(), rel=1e-10)
        assert np.allclose(backbone.adapter.weight.grad, truncated, rtol=1e-8, atol=1e-12)

    def test_truncated_run_matches_full_graph_loss_and_drops_early_steps(self):
        """Test r=6, k=2: loss equals the full-graph loss bit for bit, gradients skip steps 1-4"""
        with T.precision("float64"):
            model = MultimodalModel(TestConfig.tiny_config())
            model.freeze_except("all")
            backbone = model.backbone

            def run(depth):
                model.zero_grad()
                hierarchy = model.encode_image(self.image)
                emb = backbone.embed(self.sample.token_ids, hierarchy)
                prelude_out = backbone.run_prelude(emb.e)
                state = iterate_forward(backbone, prelude_out, emb, hierarchy, depth, state_seed=0)
                loss = masked_ce_loss(backbone.head_logits(state.values),
                                      self.sample.token_ids, self.sample.target_mask)
                loss.backward()
                merger_grads = [0.0 if m.proj.weight.grad is None else float(np.abs(m.proj.weight.grad).sum())
                                for m in model.aligner.mergers]
                return loss.item(), Graph.from_output(loss), merger_grads

            full_loss, full_graph, full_merger = run(DepthSample(r=6, n_no_grad=0, n_grad=6))
            loss, graph, merger = run(DepthSample(r=6, n_no_grad=4, n_grad=2))

        assert loss == full_loss
        assert full_graph.count("concat") == 6
        assert graph.count("concat") == 2
        # tiers enter at steps 1-4 only, so their mergers see gradient only through the full graph
        assert all(g > 0 for g in full_merger)
        assert merger == [0.0, 0.0, 0.0, 0.0]

    def test_sample_loss_is_finite_scalar(self):
        """Test a full forward from image to masked loss"""
        loss = sample_loss(self.model, self.sample, self.image, DepthSample(3, 1, 2), state_seed=1)
        assert loss.shape == ()
        assert np.isfinite(loss.item())


@pytest.mark.unit
class TestBatchedLoss:
    """Test cases for pad_batch, batch_loss and the single-pass train step"""

    def setup_method(self):
        """Set up test fixtures"""
        rng = np.random.default_rng(3)
        self.images = [rng.integers(0, 256, (3, 16, 16)).astype(np.uint8) for _ in range(3)]
        self.samples = [
            encode("how many red squares?", "2", TestConfig.TINY_VISUAL_TOKENS),
            encode("what color at row 1 col 3?", "g", TestConfig.TINY_VISUAL_TOKENS),
            encode("how many red squares?", "0", TestConfig.TINY_VISUAL_TOKENS),
        ]

    def test_pad_batch(self):
        """Test right padding of ids and masks to the longest sample"""
        ids, mask = pad_batch(self.samples)
        n = max(len(s.token_ids) for s in self.samples)
        assert ids.shape == mask.shape == (3, n)
        for row, s in enumerate(self.samples):
            assert np.array_equal(ids[row, :len(s.token_ids)], s.token_ids)
            assert np.all(ids[row, len(s.token_ids):] == VOCAB.pad_id)
            assert not mask[row, len(s.token_ids):].any()
        with pytest.raises(DataError):
            pad_batch([])

    def test_batch_loss_equals_mean_of_sample_losses(self):
        """Test that one stacked pass reproduces per-sample losses and gradients"""
        depth = DepthSample(r=3, n_no_grad=1, n_grad=2)
        with T.precision("float64"):
            model = MultimodalModel(TestConfig.tiny_config())
            model.freeze_except("all")
            loss = batch_loss(model, self.samples, self.images, depth, state_seed=5)
            loss.backward()
            batched = {name: p.grad.copy() for name, p in model.named_parameters() if p.grad is not None}
            model.zero_grad()

            total = 0.0
            for sample, image in zip(self.samples, self.images):
                single = sample_loss(model, sample, image, depth, state_seed=5)
                single.backward(np.asarray(1.0 / 3.0))
                total += single.item() / 3.0
            separate = {name: p.grad for name, p in model.named_parameters() if p.grad is not None}

        assert loss.item() == pytest.approx(total, rel=1e-10)
        assert batched.keys() == separate.keys()
        for name, grad in batched.items():
            assert np.allclose(grad, separate[name], rtol=1e-8, atol=1e-12), name

    def test_batch_loss_rejects_mismatched_images(self):
        """Test that every sample needs an image"""
        model = MultimodalModel(TestConfig.tiny_config())
        with pytest.raises(DataError):
            batch_loss(model, self.samples, self.images[:2], DepthSample(2, 0, 2), state_seed=0)

    def test_train_step_runs_one_forward_per_batch(self, temp_dir):
        """Test that a train step builds the batch loss once and never falls back to per-sample passes"""
        cfg = TestConfig.tiny_config()
        trainer = Trainer(cfg, temp_dir, progress=False)
        model = MultimodalModel(cfg)
        optimizer = AdamW(list(model.named_parameters()))
        batch = PreparedBatch(step=0, samples=self.samples, images=self.images,
                              depth=DepthSample(2, 0, 2), state_seed=1)
        with patch("looped_vlm.training.batch_loss", wraps=batch_loss) as wrapped, \
                patch("looped_vlm.training.sample_loss") as per_sample:
            loss, applied = trainer.train_step(model, optimizer, batch, lr=1e-3)
        assert wrapped.call_count == 1
        per_sample.assert_not_called()
        assert applied and np.isfinite(loss)
        assert optimizer.t == 1


@pytest.mark.unit
class TestMaskedLoss:
    """Test cases for masked_ce_loss"""

    def test_uniform_logits_give_ln4(self):
        """Test ln 4 over four equal logits"""
        logits = Array(np.zeros((4, 4)))
        loss = masked_ce_loss(logits, np.array([0, 1, 2, 3]), np.array([False, True, True, False]))
        assert loss.item() == pytest.approx(TestConfig.LN4, abs=1e-9)

    def test_row_shift(self):
        """Test that row i - 1 predicts token i"""
        logits = np.full((3, 5), -20.0)
        logits[0, 4] = 20.0
        loss = masked_ce_loss(Array(logits), np.array([0, 4, 1]), np.array([False, True, False]))
        assert loss.item() < 1e-6

    def test_empty_mask(self):
        """Test that an empty mask is a data error"""
        with pytest.raises(DataError):
            masked_ce_loss(Array(np.zeros((3, 4))), np.array([0, 1, 2]), np.zeros(3, dtype=bool))


@pytest.mark.unit
class TestOptimizer:
    """Test cases for AdamW and the schedule"""

    def test_single_step_value(self):
        """Test one bias-corrected step from zero moments"""
        param = np.array([1.0])
        m, v = np.zeros(1), np.zeros(1)
        adamw_step(param, np.array([1.0]), m, v, t=1, lr=0.1, beta1=0.9, beta2=0.95, weight_decay=1e-3)
        assert param[0] == pytest.approx(TestConfig.ADAMW_ONE_STEP, abs=1e-6)

    def test_skips_non_finite(self):
        """Test that NaN gradients leave parameters and step count untouched"""
        p = Parameter(np.ones(2))
        p.grad = np.array([np.nan, 1.0], dtype=p.dtype)
        opt = AdamW([("w", p)])
        assert opt.step(0.1) is False
        assert opt.t == 0 and opt.skipped == 1
        assert np.array_equal(p.data, np.ones(2))

    def test_state_dict_round_trip(self):
        """Test restoring moments into a fresh optimizer"""
        p = Parameter(np.ones(2))
        p.grad = np.ones(2, dtype=p.dtype)
        opt = AdamW([("w", p)])
        opt.step(0.1)
        fresh = AdamW([("w", Parameter(np.ones(2)))])
        fresh.load_state_dict(opt.state_dict())
        assert fresh.t == 1
        assert np.array_equal(fresh.m["w"], opt.m["w"])
        with pytest.raises(CheckpointError):
            AdamW([("other", p)]).load_state_dict(opt.state_dict())

    def test_cosine_schedule(self):
        """Test peak, midpoint and floor of the cosine schedule"""
        assert cosine_lr(0, 100, 1.0) == pytest.approx(1.0)
        assert cosine_lr(50, 100, 1.0) == pytest.approx(0.55)
        assert cosine_lr(100, 100, 1.0) == pytest.approx(0.1)
        assert cosine_lr(5, 0, 2.0) == 2.0

    def test_freeze_except_aligner(self):
        """Test that stage-1 freezing leaves only the aligner trainable"""
        model = MultimodalModel(TestConfig.tiny_config())
        model.freeze_except("aligner")
        trainable = {id(p) for p in model.parameters() if p.requires_grad}
        assert trainable == {id(p) for p in model.aligner.parameters()}


@pytest.mark.unit
class TestBatchPrefetcher:
    """Test cases for BatchPrefetcher"""

    def test_order(self):
        """Test that batches arrive in step order"""
        prefetcher = BatchPrefetcher(lambda step: step * 10, 2, 7, depth=2)
        try:
            assert list(prefetcher) == [20, 30, 40, 50, 60]
        finally:
            prefetcher.close()

    def test_error_propagates(self):
        """Test that a producer exception reaches the consumer"""
        def make(step):
            if step == 1:
                raise DataError("broken batch")
            return step

        prefetcher = BatchPrefetcher(make, 0, 3)
        try:
            with pytest.raises(DataError):
                list(prefetcher)
        finally:
            prefetcher.close()
