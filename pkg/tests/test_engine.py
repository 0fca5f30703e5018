import math
import random

import numpy as np
import pytest

from takeapeek import autograd as ag
from takeapeek import engine
from takeapeek.autograd import Tensor
from takeapeek.engine import (AdaptConfig, SelectionStrategy, adapt, count_method_trainable,
                              decoder_ft, evaluate, predict_query, query_miou)
from takeapeek.episodes import FoldSplit, replicate_support, sample_episode
from takeapeek.errors import ConfigError, EmptyContextError, OptimizationError
from takeapeek.losses import miou
from takeapeek.optim import OptimizerState, adam_step
from takeapeek.refnet import ModelConfig, build_model

SPLIT = FoldSplit.for_fold(0)


@pytest.fixture(scope="module")
def model():
    return build_model(ModelConfig(variant="conv", seed=1))


@pytest.fixture(scope="module")
def episode():
    return sample_episode(SPLIT, 2, 2, seed=11)


def checksums(m, names):
    return ag.parameters_checksum([(k, m.params[k]) for k in names])


class TestAdam:
    def test_zero_gradients_do_nothing(self):
        p = Tensor(np.array([1.0, -2.0]))
        opt = OptimizerState(lr=0.1)
        for _ in range(5):
            adam_step(opt, [("p", p)], [np.zeros(2)])
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        assert opt.step == 5

    def test_quadratic_matches_scalar_simulation(self):
        # reference Adam written out in plain floats; x0 = 1, lr = 0.1, f = x^2
        ref, m, v, expected = 1.0, 0.0, 0.0, []
        for t in range(1, 21):
            g = 2 * ref
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            expected.append(ref)
        x = Tensor(np.array(1.0))
        opt = OptimizerState(lr=0.1)
        got = []
        for _ in range(20):
            adam_step(opt, [("x", x)], [2 * x.data])
            got.append(x.item())
        np.testing.assert_allclose(got, expected, atol=1e-12, rtol=0)
        # steady descent of about lr per step until the minimum is crossed
        mags = np.abs(got[:11])
        assert np.all(np.diff(mags) < 0)
        assert mags[-1] < 0.01

    def test_quadratic_small_lr_is_monotone(self):
        x = Tensor(np.array(1.0))
        opt = OptimizerState(lr=0.01)
        prev = 1.0
        for _ in range(20):
            adam_step(opt, [("x", x)], [2 * x.data])
            assert abs(x.item()) < prev
            prev = abs(x.item())

    def test_first_step_is_lr_sign(self):
        p = Tensor(np.array([0.5, 0.5, 0.5]))
        adam_step(OptimizerState(lr=0.01), [("p", p)], [np.array([3.0, -1e-3, 250.0])])
        np.testing.assert_allclose(p.data - 0.5, [-0.01, 0.01, -0.01], atol=1e-7)

    def test_nan_gradient_names_parameter(self):
        with pytest.raises(OptimizationError, match="enc.w"):
            adam_step(OptimizerState(), [("enc.w", Tensor(np.zeros(2)))], [np.array([np.nan, 0.0])])

    def test_bad_learning_rate(self):
        with pytest.raises(ConfigError):
            OptimizerState(lr=0.0)


class TestSelection:
    @pytest.mark.parametrize("tag,j", [("identity", 1), ("random_k", 1), ("random_k", 3)])
    def test_never_returns_pseudo_query(self, tag, j):
        sel = SelectionStrategy(tag, j, seed=3)
        for _ in range(20):
            for i in range(5):
                ctx = sel(i, 5)
                assert i not in ctx
                assert len(ctx) == (4 if tag == "identity" else j)

    def test_random_k_bounds(self):
        with pytest.raises(ConfigError):
            SelectionStrategy("random_k", 4)(0, 4)

    def test_engine_passes_exclude_pseudo_query(self, model, episode, monkeypatch):
        seen = []
        original = SelectionStrategy.__call__

        def spy(self, i, n):
            ctx = original(self, i, n)
            seen.append((i, ctx))
            return ctx

        monkeypatch.setattr(SelectionStrategy, "__call__", spy)
        adapt(model, episode, AdaptConfig(method="tap", iterations=1, rank=2))
        assert [i for i, _ in seen] == [0, 1, 2, 3]
        assert all(i not in ctx for i, ctx in seen)


class TestAdapt:
    def test_zero_iterations_is_vanilla(self, model, episode):
        van, _ = predict_query(adapt(model, episode, AdaptConfig(method="vanilla"))[0], episode)
        for method in ("tap", "decoder_ft"):
            adapted, trace = adapt(model, episode, AdaptConfig(method=method, iterations=0))
            pred, _ = predict_query(adapted, episode)
            assert pred.tobytes() == van.tobytes()
            assert trace.passes == 0

    def test_pass_count(self, model):
        ep = sample_episode(SPLIT, 2, 5, seed=2)
        _, trace = adapt(model, ep, AdaptConfig(method="tap", iterations=8, rank=2))
        assert trace.passes == 80 == len(trace.pass_seconds)

    def test_tap_changes_only_adapters(self, model, episode):
        before = checksums(model, model.params)
        adapted, trace = adapt(model, episode, AdaptConfig(method="tap", iterations=2, rank=4,
                                                           learning_rate=1e-2))
        assert checksums(adapted, adapted.params) == before
        assert checksums(model, model.params) == before
        assert all(np.any(a.B.data != 0) for a in adapted.adapters)
        assert model.adapters is None

    def test_decoder_ft_changes_only_decoder(self, model, episode):
        enc = [k for k in model.params if k.startswith("encoder.")]
        dec = [k for k in model.params if k.startswith("decoder.")]
        adapted = decoder_ft(model, episode, AdaptConfig(iterations=2, learning_rate=1e-2))
        assert checksums(adapted, enc) == checksums(model, enc)
        assert checksums(adapted, dec) != checksums(model, dec)
        assert adapted.adapters is None

    def test_trainable_counts(self, model):
        D = model.config.dim
        dec = count_method_trainable(model, AdaptConfig(method="decoder_ft"))
        assert dec == D * D + 1 == 1025
        assert dec < count_method_trainable(model, AdaptConfig(method="full_ft"))
        assert count_method_trainable(model, AdaptConfig(method="tap", rank=16)) == 4096
        assert count_method_trainable(model, AdaptConfig(method="vanilla")) == 0

    def test_single_support_needs_replication(self, model):
        ep = sample_episode(SPLIT, 1, 1, seed=5)
        with pytest.raises(EmptyContextError, match="replicate_support"):
            adapt(model, ep, AdaptConfig(method="tap", iterations=1, rank=2))
        _, trace = adapt(model, replicate_support(ep, 2), AdaptConfig(method="tap", iterations=1, rank=2))
        assert trace.passes == 2 and trace.replicated == 2

    def test_random_k(self, model, episode):
        _, trace = adapt(model, episode, AdaptConfig(method="tap", iterations=2, rank=2,
                                                     select="random_k", select_j=1))
        assert trace.passes == 8
        assert all(np.isfinite(trace.losses))

    def test_support_branch_switch(self, model, episode):
        cfg = dict(method="tap", iterations=1, rank=2, learning_rate=1e-2)
        a, _ = adapt(model, episode, AdaptConfig(**cfg))
        b, _ = adapt(model, episode, AdaptConfig(**cfg, support_grad=False))
        first = next(iter(a.adapters.adapters))
        assert not np.array_equal(a.adapters.adapters[first].B.data, b.adapters.adapters[first].B.data)

    def test_deterministic(self, model, episode):
        cfg = AdaptConfig(method="tap", iterations=1, rank=2)
        a, ta = adapt(model, episode, cfg)
        b, tb = adapt(model, episode, cfg)
        assert ta.losses == tb.losses
        assert predict_query(a, episode)[0].tobytes() == predict_query(b, episode)[0].tobytes()

    def test_trace_tracks_query_per_iteration(self, model, episode):
        _, trace = adapt(model, episode, AdaptConfig(method="tap", iterations=3, rank=2, track_query=True))
        assert len(trace.query_miou) == 4
        assert trace.query_miou[0] == query_miou(model, episode)
        rec = trace.to_record()
        assert {"episode_id", "method", "rank", "T", "per_pass_loss", "per_iteration_query_miou",
                "wall_clock_per_pass"} <= set(rec)


class TestPredict:
    def test_support_order_does_not_matter(self, model, episode):
        perm = np.random.default_rng(0).permutation(len(episode.support_images))
        shuffled = type(episode)(**{**episode.__dict__,
                                    "support_images": episode.support_images[perm],
                                    "support_masks": episode.support_masks[perm]})
        a, la = predict_query(model, episode)
        b, lb = predict_query(model, shuffled)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(la.data, lb.data, atol=1e-12)

    def test_self_episode_beats_random(self, model):
        ep = sample_episode(SPLIT, 1, 3, seed=8)
        ep.query_image, ep.query_mask = ep.support_images[0], ep.support_masks[0]
        pred, logits = predict_query(model, ep)
        assert logits.shape == (2, 32, 32)
        rng = np.random.default_rng(0)
        chance = np.mean([miou(rng.integers(0, 2, size=(32, 32)), ep.query_mask, [1]) for _ in range(20)])
        assert miou(pred, ep.query_mask, [1]) >= chance


def test_evaluation_is_order_independent(model):
    eps = [sample_episode(SPLIT, 2, 1, seed=s) for s in range(6)]
    cfg = AdaptConfig(method="tap", iterations=1, rank=2, learning_rate=1e-2)
    forward = {r.episode_id: r.miou for r in evaluate(model, eps, cfg)}
    shuffled = eps[:]
    random.Random(0).shuffle(shuffled)
    backward = {r.episode_id: r.miou for r in evaluate(model, shuffled, cfg, workers=2)}
    assert forward == backward


def test_unknown_method():
    with pytest.raises(ConfigError):
        AdaptConfig(method="adaptive")


def test_engine_module_exports_methods():
    assert set(engine.METHODS) == {"vanilla", "tap", "decoder_ft", "full_ft"}
