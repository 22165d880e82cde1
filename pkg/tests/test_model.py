"""Whole-model assembly: batching with masks, variants, end-to-end gradients."""

import numpy as np
import pytest

from helpers import fd_check, random_patches, tiny_params
from scriptid.model import (ModelConfig, backward_batch, compute_loss,
                            count_parameters, decayed_weights, forward_batch,
                            forward_image, init_params, is_decayed_weight,
                            named_tensors, state_tensors, xavier_uniform)


class TestInit:
    def test_xavier_bound_and_mean(self):
        rng = np.random.default_rng(0)
        fan_in, fan_out = 300, 200
        t = xavier_uniform((100_000,), fan_in, fan_out, rng, np.float64)
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        assert np.all(np.abs(t) <= bound)
        assert abs(t.mean()) < 0.01

    def test_seeded_init_is_reproducible(self):
        c = ModelConfig.shrunken(3)
        a = init_params(c, np.random.default_rng(5), np.float64)
        b = init_params(c, np.random.default_rng(5), np.float64)
        for (na, ta), (nb, tb) in zip(named_tensors(a), named_tensors(b)):
            assert na == nb and np.array_equal(ta, tb)

    def test_special_initial_values(self):
        c = ModelConfig.shrunken(3)
        p = init_params(c, np.random.default_rng(0), np.float64)
        assert np.all(p.lstm1.b_f == 1.0) and np.all(p.lstm2.b_f == 1.0)
        assert np.all(p.lstm1.b_i == 0.0)
        assert np.all(p.lstm1.w_ci == 0.0)
        for bn in p.encoder.bns:
            assert np.all(bn.gamma == 1.0) and np.all(bn.beta == 0.0)
            assert np.all(bn.running_mean == 0.0) and np.all(bn.running_var == 1.0)
        for conv in p.encoder.convs:
            assert np.all(conv.bias == 0.0)

    def test_decayed_weight_predicate(self):
        assert is_decayed_weight("encoder.conv1.kernels")
        assert is_decayed_weight("encoder.fc1.weights")
        assert is_decayed_weight("lstm1.w_xi")
        assert is_decayed_weight("lstm2.w_ho")
        assert is_decayed_weight("attention.w")
        assert is_decayed_weight("attention.v")
        assert is_decayed_weight("fusion.proj_w")
        assert is_decayed_weight("fusion.local.w_in")
        assert is_decayed_weight("head.weights")
        # biases, peepholes, and batch-norm scale/shift are exempt
        assert not is_decayed_weight("encoder.conv1.bias")
        assert not is_decayed_weight("encoder.bn1.gamma")
        assert not is_decayed_weight("encoder.bn2.beta")
        assert not is_decayed_weight("lstm1.w_ci")
        assert not is_decayed_weight("lstm2.w_co")
        assert not is_decayed_weight("lstm1.b_f")
        assert not is_decayed_weight("attention.b")
        assert not is_decayed_weight("fusion.proj_b")
        assert not is_decayed_weight("head.bias")

    def test_full_size_parameter_count_reported(self):
        p = init_params(ModelConfig(n_classes=13), np.random.default_rng(0))
        n = count_parameters(p)
        # dominated by fc1: 4096*4608 weights alone
        assert n > 4096 * 4608
        assert n == 25316301

    def test_variant_parameter_sets(self):
        v1 = init_params(ModelConfig.shrunken(3, variant="variant1"),
                         np.random.default_rng(0), np.float64)
        assert v1.attention is None and v1.fusion.local is None
        assert v1.head.weights.shape[1] == 16  # concat doubles the head input
        v2 = init_params(ModelConfig.shrunken(3, variant="variant2"),
                         np.random.default_rng(0), np.float64)
        assert v2.attention is not None and v2.fusion.local is None
        full = init_params(ModelConfig.shrunken(3), np.random.default_rng(0), np.float64)
        assert full.fusion.local is not None
        assert full.head.weights.shape[1] == 8


class TestForward:
    def test_batch_of_one_matches_padded_batch(self, rng):
        config, params = tiny_params()
        seqs = [random_patches(rng, d) for d in (3, 1, 4, 2)]
        batched = forward_batch(params, config, seqs, mode="eval")
        for i, s in enumerate(seqs):
            solo = forward_batch(params, config, [s], mode="eval")
            assert np.abs(solo.z[0] - batched.z[i]).max() < 1e-5
            d = s.shape[0]
            assert np.abs(solo.p[0] - batched.p[i, :d]).max() < 1e-6

    def test_masked_slots_carry_zero_weight(self, rng):
        config, params = tiny_params()
        seqs = [random_patches(rng, 4), random_patches(rng, 2)]
        t = forward_batch(params, config, seqs, mode="eval")
        assert np.all(t.p[1, 2:] == 0)
        assert abs(t.p[1].sum() - 1) < 1e-6

    def test_distribution_invariants(self, rng):
        config, params = tiny_params()
        t = forward_batch(params, config, [random_patches(rng, 3)], mode="eval")
        assert abs(t.z.sum() - 1) < 1e-6
        assert np.allclose(t.per_patch.sum(axis=-1), 1.0, atol=1e-6)
        assert np.allclose(t.coh.sum(axis=-1), 1.0, atol=1e-6)

    def test_global_feature_is_shared_per_image(self, rng):
        config, params = tiny_params()
        t = forward_batch(params, config, [random_patches(rng, 3)], mode="eval")
        assert t.global_.shape == (1, config.feature_dim)

    def test_sample_trace_fields(self, rng):
        config, params = tiny_params()
        tr = forward_image(params, config, random_patches(rng, 4))
        assert tr.features.shape == (4, config.feature_dim)
        assert tr.hidden.shape == (4, config.lstm_hidden)
        assert tr.p.shape == (4,)
        assert tr.local.shape == (4, config.feature_dim)
        assert tr.global_.shape == (config.feature_dim,)
        assert tr.coherence.shape == (4, 2)
        assert tr.per_patch.shape == (4, config.n_classes)
        assert abs(tr.z.sum() - 1) < 1e-6

    def test_variant2_shares_attention_weights_with_full(self, rng):
        # identical parameters up to the fusion stage => identical p
        full_cfg, full = tiny_params(variant="full", seed=3)
        v2_cfg = ModelConfig.shrunken(3, variant="variant2")
        v2 = init_params(v2_cfg, np.random.default_rng(99), np.float64)
        v2.encoder = full.encoder
        v2.lstm1, v2.lstm2 = full.lstm1, full.lstm2
        v2.attention = full.attention
        seqs = [random_patches(rng, 4), random_patches(rng, 2)]
        t_full = forward_batch(full, full_cfg, seqs, mode="eval")
        t_v2 = forward_batch(v2, v2_cfg, seqs, mode="eval")
        assert np.allclose(t_full.p, t_v2.p, atol=1e-12)
        # but variant2 aggregates uniformly
        assert np.allclose(t_v2.agg_p[0], [0.25] * 4, atol=1e-12)

    def test_variant1_uses_uniform_weights_and_concat(self, rng):
        cfg = ModelConfig.shrunken(3, variant="variant1")
        params = init_params(cfg, np.random.default_rng(0), np.float64)
        t = forward_batch(params, cfg, [random_patches(rng, 4)], mode="eval")
        assert np.allclose(t.p[0], 0.25)
        assert t.fused.shape[-1] == 2 * cfg.feature_dim
        # concatenation: first half is the local feature, second the global
        assert np.allclose(t.fused[0, :, : cfg.feature_dim], t.local[0], atol=1e-12)
        assert np.allclose(t.fused[0, 1, cfg.feature_dim :], t.global_[0], atol=1e-12)


class TestBackward:
    @pytest.mark.parametrize("variant", ["full", "variant1", "variant2"])
    def test_grad_keys_mirror_parameters(self, rng, variant):
        config, params = tiny_params(variant=variant)
        seqs = [random_patches(rng, 3), random_patches(rng, 2)]
        t = forward_batch(params, config, seqs, mode="eval")
        grads = backward_batch(t, np.array([0, 1]), params, config, 5e-4)
        assert set(grads) == {n for n, _ in named_tensors(params)}
        for name, a in named_tensors(params):
            assert grads[name].shape == a.shape

    @pytest.mark.parametrize("variant", ["full", "variant1", "variant2"])
    def test_end_to_end_gradients(self, rng, variant):
        config, params = tiny_params(variant=variant, seed=1)
        for bn in params.encoder.bns:
            bn.running_mean[:] = rng.normal(0, 0.1, bn.running_mean.shape)
            bn.running_var[:] = rng.uniform(0.5, 1.5, bn.running_var.shape)
        seqs = [random_patches(rng, 3), random_patches(rng, 2)]
        labels = np.array([0, 2])

        def loss():
            t = forward_batch(params, config, seqs, mode="eval")
            return compute_loss(t, labels, params, 5e-4)

        t = forward_batch(params, config, seqs, mode="eval")
        grads = backward_batch(t, labels, params, config, 5e-4)
        worst, where = fd_check(loss, named_tensors(params), grads, rng, per_tensor=2)
        assert worst <= 1e-3, where

    def test_weight_decay_gradient_term(self, rng):
        config, params = tiny_params()
        seqs = [random_patches(rng, 2)]
        labels = np.array([1])
        t = forward_batch(params, config, seqs, mode="eval")
        g0 = backward_batch(t, labels, params, config, 0.0)
        g1 = backward_batch(t, labels, params, config, 1e-2)
        for name, a in named_tensors(params):
            expected = g0[name] + (2e-2 * a if is_decayed_weight(name) else 0)
            assert np.allclose(g1[name], expected, atol=1e-12)

    def test_state_tensors_are_running_stats(self):
        _, params = tiny_params()
        names = [n for n, _ in state_tensors(params)]
        assert "encoder.bn1.running_mean" in names
        assert "encoder.bn4.running_var" in names
        assert len(names) == 8
