"""
Tests for the three fusion strategies
"""

import numpy as np
import pytest

from exceptions import DataError, ShapeError
from models import (
    AutoencoderHyperParams,
    DatasetSplit,
    FusionStrategy,
    Hypersphere,
    NetSpec,
    SvddHyperParams,
    SvddModel,
    ViewStack,
)
from fusion import (
    fit_fusion_model,
    fuse_embeddings,
    pretrain,
    score_sample,
    score_samples,
    single_view,
    stack_views,
    strategy_net_spec,
)
from ndgrad import Tensor, no_grad
from nets import build_encoder, decode, encode
from svdd import anomaly_score, classify

FAST_AE = AutoencoderHyperParams(lr=1e-3, batch_size=8, epochs=1)
FAST_SVDD = SvddHyperParams(nu=0.4, lr=1e-4, batch_size=8, epochs=2, warmup_epochs=1)


def random_model(spec, strategy, rng, n_views=2):
    net_spec = strategy_net_spec(spec, strategy, n_views)
    encoder = build_encoder(net_spec, rng)
    sphere = Hypersphere(rng.normal(size=spec.latent_dim) + 0.3, 0.5)
    return SvddModel(encoder, sphere, SvddHyperParams(), strategy, net_spec)


# ============================================================
# Embedding fusion
# ============================================================


class TestFuseEmbeddings:
    def test_mean_of_views(self):
        fused = fuse_embeddings([np.array([1.0, 2.0]), np.array([3.0, 6.0])])
        np.testing.assert_allclose(fused.phi_bar, [2.0, 4.0])

    def test_view_order_does_not_matter(self, rng):
        phis = [rng.normal(size=6) for _ in range(4)]
        expected = fuse_embeddings(phis).phi_bar
        for _ in range(5):
            shuffled = [phis[i] for i in rng.permutation(len(phis))]
            np.testing.assert_allclose(fuse_embeddings(shuffled).phi_bar, expected, rtol=1e-12, atol=1e-15)

    def test_rejects_empty_and_mismatched(self):
        with pytest.raises(ShapeError):
            fuse_embeddings([])
        with pytest.raises(ShapeError):
            fuse_embeddings([np.zeros(2), np.zeros(3)])

    def test_averaging_can_hide_a_deviating_view(self, rng):
        """One view far outside the sphere, the other at the center: the fused object looks normal"""
        model = random_model(NetSpec(input_shape=(1, 16, 16), conv_channels=[2], kernel=3, stride=2, padding=1, latent_dim=2), FusionStrategy.LATE, rng)
        model.sphere = Hypersphere(np.array([1.0, 1.0]), 1.0)
        deviating = model.sphere.center + np.array([1.8, 0.0])
        at_center = model.sphere.center.copy()
        assert classify(anomaly_score(model, deviating)) == 1
        fused = fuse_embeddings([deviating, at_center]).phi_bar
        assert anomaly_score(model, fused) == pytest.approx(0.81 - 1.0)
        assert classify(anomaly_score(model, fused)) == 0


# ============================================================
# Scoring
# ============================================================


class TestScoring:
    def test_late_fusion_of_duplicated_view_equals_single_view(self, tiny_spec, rng):
        model = random_model(tiny_spec, FusionStrategy.LATE, rng)
        for i in range(5):
            view = rng.uniform(size=(1, 16, 16))
            duplicated = ViewStack([view, view.copy()], sample_id=f"dup{i}")
            single = single_view(duplicated, 0)
            assert abs(score_sample(model, duplicated) - score_sample(model, single)) <= 1e-12

    @pytest.mark.parametrize("strategy", list(FusionStrategy))
    def test_one_score_per_object(self, tiny_spec, tiny_dices, rng, strategy):
        _, test = tiny_dices
        model = random_model(tiny_spec, strategy, rng)
        scores = score_samples(model, test, batch_size=5)
        assert scores.shape == (len(test),)
        assert scores[3] == pytest.approx(score_sample(model, test.samples[3]), abs=1e-9)

    @pytest.mark.parametrize("strategy", [FusionStrategy.LATE, FusionStrategy.LATE_DUAL])
    def test_late_scores_ignore_view_order(self, tiny_spec, rng, strategy):
        model = random_model(tiny_spec, strategy, rng)
        samples = [ViewStack([rng.uniform(size=(1, 16, 16)) for _ in range(3)], sample_id=f"s{i}") for i in range(4)]
        permuted = [ViewStack([s.views[i] for i in (2, 0, 1)], sample_id=s.sample_id) for s in samples]
        reversed_views = [ViewStack(s.views[::-1], sample_id=s.sample_id) for s in samples]
        expected = score_samples(model, samples)
        np.testing.assert_allclose(score_samples(model, permuted), expected, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(score_samples(model, reversed_views), expected, rtol=1e-9, atol=1e-12)
        assert score_sample(model, reversed_views[1]) == pytest.approx(score_sample(model, samples[1]), rel=1e-9)

    def test_early_fusion_rejects_wrong_view_count(self, tiny_spec, rng):
        model = random_model(tiny_spec, FusionStrategy.EARLY, rng)
        sample = ViewStack([rng.uniform(size=(1, 16, 16))] * 3)
        with pytest.raises(ShapeError):
            score_sample(model, sample)

    def test_late_fusion_accepts_any_view_count(self, tiny_spec, rng):
        model = random_model(tiny_spec, FusionStrategy.LATE, rng)
        three = ViewStack([rng.uniform(size=(1, 16, 16)) for _ in range(3)])
        assert np.isfinite(score_sample(model, three))

    def test_mixed_view_counts_rejected(self, tiny_spec, rng):
        model = random_model(tiny_spec, FusionStrategy.LATE, rng)
        samples = [ViewStack([rng.uniform(size=(1, 16, 16))] * 2), ViewStack([rng.uniform(size=(1, 16, 16))])]
        with pytest.raises(ShapeError):
            score_samples(model, samples)

    def test_wrong_image_size_rejected(self, tiny_spec, rng):
        model = random_model(tiny_spec, FusionStrategy.LATE, rng)
        with pytest.raises(ShapeError):
            score_sample(model, ViewStack([rng.uniform(size=(1, 20, 20))] * 2))

    def test_stack_views_and_single_view(self, rng):
        views = [rng.uniform(size=(1, 4, 4)) for _ in range(2)]
        sample = ViewStack(views, label=1, sample_id="s")
        assert stack_views(sample).shape == (2, 4, 4)
        reduced = single_view(sample, 1)
        assert reduced.n_views == 1
        assert reduced.label == 1
        np.testing.assert_array_equal(reduced.views[0], views[1])
        with pytest.raises(ShapeError):
            single_view(sample, 2)


# ============================================================
# Training per strategy
# ============================================================


class TestFusionTraining:
    @pytest.mark.parametrize(
        "strategy,channels,decoders",
        [(FusionStrategy.EARLY, 2, 1), (FusionStrategy.LATE, 1, 1), (FusionStrategy.LATE_DUAL, 1, 2)],
    )
    def test_pretrain_layout(self, tiny_spec, tiny_dices, strategy, channels, decoders):
        train, _ = tiny_dices
        pretrained = pretrain(strategy, train, tiny_spec, FAST_AE, np.random.default_rng(0))
        assert pretrained.net_spec.input_shape == (channels, 16, 16)
        assert len(pretrained.decoders) == decoders
        assert pretrained.strategy == strategy
        assert len(pretrained.loss_history) == 1

    def test_dual_decoders_share_one_encoder(self, tiny_spec, tiny_dices):
        train, _ = tiny_dices
        pretrained = pretrain(FusionStrategy.LATE_DUAL, train, tiny_spec, FAST_AE, np.random.default_rng(0))
        spec = pretrained.net_spec
        stack = train.stacks()[:2]

        def reconstructions():
            with no_grad():
                return [
                    decode(decoder, encode(pretrained.encoder, Tensor(stack[:, v : v + 1]), spec), spec).data.copy()
                    for v, decoder in enumerate(pretrained.decoders)
                ]

        before = reconstructions()
        pretrained.encoder["fc"].data *= 1.5
        after = reconstructions()
        assert len(before) == 2
        for old, new in zip(before, after):
            assert not np.allclose(old, new)

    @pytest.mark.parametrize("strategy", list(FusionStrategy))
    def test_fit_and_score(self, tiny_spec, tiny_dices, strategy):
        train, test = tiny_dices
        model = fit_fusion_model(strategy, train, tiny_spec, FAST_AE, FAST_SVDD, np.random.default_rng(0))
        assert model.fusion_tag == strategy
        assert len(model.loss_history) == FAST_SVDD.epochs
        scores = score_samples(model, test)
        assert np.all(np.isfinite(scores))

    def test_denoising_pretraining_runs(self, tiny_spec, tiny_dices):
        train, _ = tiny_dices
        pretrained = pretrain(FusionStrategy.EARLY, train, tiny_spec, FAST_AE, np.random.default_rng(0), noise_sigma=0.1)
        assert np.isfinite(pretrained.loss_history[0])

    def test_pretrained_strategy_must_match(self, tiny_spec, tiny_dices):
        train, _ = tiny_dices
        pretrained = pretrain(FusionStrategy.LATE, train, tiny_spec, FAST_AE, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            fit_fusion_model(FusionStrategy.EARLY, train, tiny_spec, FAST_AE, FAST_SVDD, np.random.default_rng(0), pretrained=pretrained)

    def test_empty_training_split_rejected(self, tiny_spec):
        with pytest.raises(DataError):
            pretrain(FusionStrategy.EARLY, DatasetSplit([], "train"), tiny_spec, FAST_AE, np.random.default_rng(0))

    def test_same_seed_same_model(self, tiny_spec, tiny_dices):
        train, test = tiny_dices
        first = fit_fusion_model("late", train, tiny_spec, FAST_AE, FAST_SVDD, np.random.default_rng(4))
        second = fit_fusion_model("late", train, tiny_spec, FAST_AE, FAST_SVDD, np.random.default_rng(4))
        np.testing.assert_array_equal(score_samples(first, test), score_samples(second, test))
