"""
Unit tests for the ustd_denoisers module.

Tests the attention primitives, the gate, target flattening and the three
conditioned denoisers' shape and wiring contracts.
"""

import unittest
from dataclasses import replace

import torch
import torch.nn as nn
from torch.func import functional_call

from src.ustd_config import DenoiserConfig
from src.ustd_denoisers import (
    DenoiserContext,
    FullAttentionDenoiser,
    GatedFusion,
    MultiHeadAttention,
    SGADenoiser,
    TGADenoiser,
    count_parameters,
    cross_attention_spatial,
    cross_attention_temporal,
    flatten_targets,
    match_ffn_dim,
    self_attention,
)
from src.ustd_diffusion import make_schedule, training_loss
from src.ustd_errors import ContractError, InputError

LATENT = 8
SPATIAL = 3


def small_config(**overrides) -> DenoiserConfig:
    config = DenoiserConfig(channels=16, heads=2, layers=2,
                            diffusion_embedding_dim=8, ffn_dim=32,
                            zero_init_head=False)
    return replace(config, **overrides)


def tga(config: DenoiserConfig, horizon: int = 12) -> TGADenoiser:
    return TGADenoiser(config, horizon, 1, LATENT, 50, SPATIAL)


def sga(config: DenoiserConfig, window: int = 12, tau: int = 2) -> SGADenoiser:
    return SGADenoiser(config, window, 1, LATENT, tau, 50, SPATIAL)


class TestMultiHeadAttention(unittest.TestCase):
    """Test cases for scaled dot-product attention."""

    def setUp(self):
        torch.manual_seed(0)
        self.attention = MultiHeadAttention(8, heads=2)

    def test_single_key_returns_value(self):
        memory = torch.randn(3, 1, 8)
        expected = self.attention.out(self.attention.value(memory))
        for _ in range(2):
            query = torch.randn(3, 1, 8)
            torch.testing.assert_close(self.attention(query, memory), expected)

    def test_identical_memory_tokens(self):
        token = torch.randn(1, 1, 8)
        memory = token.repeat(1, 5, 1)
        expected = self.attention.out(self.attention.value(token))
        result = self.attention(torch.randn(1, 4, 8), memory)
        torch.testing.assert_close(result, expected.expand(1, 4, 8), atol=1e-6, rtol=1e-5)

    def test_rows_sum_to_one(self):
        self.attention.record_scores = True
        self.attention(torch.randn(2, 6, 8), torch.randn(2, 9, 8))
        scores = self.attention.last_scores
        self.assertEqual(tuple(scores.shape), (2, 2, 6, 9))
        torch.testing.assert_close(scores.sum(dim=-1), torch.ones(2, 2, 6),
                                   atol=1e-6, rtol=0)

    def test_scores_not_kept_by_default(self):
        self.attention(torch.randn(1, 2, 8), torch.randn(1, 2, 8))
        self.assertIsNone(self.attention.last_scores)

    def test_heads_must_divide_channels(self):
        with self.assertRaises(InputError):
            MultiHeadAttention(10, heads=4)


class TestAttentionForms(unittest.TestCase):
    """Test cases for the temporal, spatial and self attention wrappers."""

    def setUp(self):
        torch.manual_seed(1)
        self.attention = MultiHeadAttention(8, heads=2)
        self.attention.record_scores = True

    def test_temporal_scores_are_per_node(self):
        r = torch.randn(2, 5, 8)
        h = torch.randn(2, 5, 3, 8)
        out = cross_attention_temporal(r, h, self.attention)
        self.assertEqual(tuple(out.shape), (2, 5, 8))
        self.assertEqual(tuple(self.attention.last_scores.shape), (10, 2, 1, 3))

    def test_temporal_node_sees_only_its_latent(self):
        r = torch.randn(1, 4, 8)
        h = torch.randn(1, 4, 3, 8)
        base = cross_attention_temporal(r, h, self.attention)
        changed = h.clone()
        changed[:, 2] = 0.0
        other = cross_attention_temporal(r, changed, self.attention)
        torch.testing.assert_close(other[:, [0, 1, 3]], base[:, [0, 1, 3]])
        self.assertFalse(torch.allclose(other[:, 2], base[:, 2]))

    def test_spatial_score_shape(self):
        out = cross_attention_spatial(torch.randn(2, 4, 8), torch.randn(2, 7, 8),
                                      self.attention)
        self.assertEqual(tuple(out.shape), (2, 4, 8))
        self.assertEqual(tuple(self.attention.last_scores.shape), (2, 2, 4, 7))

    def test_spatial_single_observed_node(self):
        memory = torch.randn(1, 1, 8)
        out = cross_attention_spatial(torch.randn(1, 3, 8), memory, self.attention)
        expected = self.attention.out(self.attention.value(memory))
        torch.testing.assert_close(out, expected.expand(1, 3, 8))

    def test_spatial_requires_targets(self):
        with self.assertRaises(InputError):
            cross_attention_spatial(torch.randn(1, 0, 8), torch.randn(1, 3, 8),
                                    self.attention)

    def test_self_attention_single_node(self):
        r = torch.randn(1, 1, 8)
        expected = self.attention.out(self.attention.value(r))
        torch.testing.assert_close(self_attention(r, self.attention), expected)

    def test_self_attention_identical_rows(self):
        row = torch.randn(1, 1, 8)
        r = torch.cat([row, row, torch.randn(1, 1, 8)], dim=1)
        out = self_attention(r, self.attention)
        torch.testing.assert_close(out[:, 0], out[:, 1])


class TestGatedFusion(unittest.TestCase):
    """Test cases for the sigmoid gate."""

    def setUp(self):
        torch.manual_seed(2)
        self.fusion = GatedFusion(6)
        self.r_ca = torch.randn(2, 4, 6)
        self.r_sa = torch.randn(2, 4, 6)

    def _zero(self):
        with torch.no_grad():
            for parameter in self.fusion.parameters():
                parameter.zero_()

    def test_zero_parameters_average(self):
        self._zero()
        gate = self.fusion.gate(self.r_ca, self.r_sa)
        self.assertTrue(torch.all(gate == 0.5))
        torch.testing.assert_close(self.fusion(self.r_ca, self.r_sa),
                                   (self.r_ca + self.r_sa) / 2)

    def test_large_bias_selects_cross_attention(self):
        self._zero()
        with torch.no_grad():
            self.fusion.w_g1.bias.fill_(50.0)
        torch.testing.assert_close(self.fusion(self.r_ca, self.r_sa), self.r_ca)

    def test_equal_inputs_pass_through(self):
        out = self.fusion(self.r_ca, self.r_ca.clone())
        torch.testing.assert_close(out, self.r_ca)

    def test_gate_strictly_inside_unit_interval(self):
        gate = self.fusion.gate(self.r_ca, self.r_sa)
        self.assertTrue(torch.all(gate > 0))
        self.assertTrue(torch.all(gate < 1))

    def test_gradcheck_w_g1(self):
        fusion = self.fusion.double()
        r_ca = self.r_ca.double()
        r_sa = self.r_sa.double()
        weight = fusion.w_g1.weight.detach().clone().requires_grad_(True)

        def run(w):
            return functional_call(fusion, {"w_g1.weight": w}, (r_ca, r_sa))

        self.assertTrue(torch.autograd.gradcheck(run, (weight,), eps=1e-6, atol=1e-6))


class TestFlattenTargets(unittest.TestCase):
    """Test cases for per-node target flattening."""

    def test_forecast_shape(self):
        projection = nn.Linear(12, 96)
        self.assertEqual(tuple(flatten_targets(torch.randn(1, 3, 12, 1), projection).shape),
                         (1, 3, 96))

    def test_kriging_shape(self):
        projection = nn.Linear(12, 96)
        self.assertEqual(tuple(flatten_targets(torch.randn(2, 5, 12, 1), projection).shape),
                         (2, 5, 96))

    def test_zero_projection(self):
        projection = nn.Linear(6, 4)
        nn.init.zeros_(projection.weight)
        nn.init.zeros_(projection.bias)
        out = flatten_targets(torch.randn(1, 2, 3, 2), projection)
        self.assertTrue(torch.all(out == 0))

    def test_slab_mismatch(self):
        with self.assertRaises(ContractError):
            flatten_targets(torch.randn(1, 2, 5, 1), nn.Linear(12, 4))

    def test_rank_mismatch(self):
        with self.assertRaises(ContractError):
            flatten_targets(torch.randn(2, 12), nn.Linear(12, 4))


class TestTGADenoiser(unittest.TestCase):
    """Test cases for the temporal gated attention denoiser."""

    def setUp(self):
        torch.manual_seed(3)
        self.context = DenoiserContext(target_spatial=torch.randn(8, SPATIAL))

    def test_output_shape(self):
        model = tga(small_config())
        y = torch.randn(2, 8, 12, 1)
        h = torch.randn(2, 8, 1, LATENT)
        out = model(y, h, torch.tensor([1, 50]), self.context)
        self.assertEqual(out.shape, y.shape)

    def test_random_shapes(self):
        generator = torch.Generator().manual_seed(4)
        for _ in range(5):
            nodes, horizon, tau = (int(v) for v in torch.randint(1, 6, (3,),
                                                                 generator=generator))
            model = tga(small_config(layers=1), horizon=horizon)
            y = torch.randn(2, nodes, horizon, 1)
            out = model(y, torch.randn(2, nodes, tau, LATENT), torch.tensor([3, 7]))
            self.assertEqual(out.shape, y.shape)

    def test_diffusion_step_changes_output(self):
        model = tga(small_config())
        y = torch.randn(1, 8, 12, 1)
        h = torch.randn(1, 8, 2, LATENT)
        first = model(y, h, torch.tensor([1]), self.context)
        last = model(y, h, torch.tensor([50]), self.context)
        self.assertFalse(torch.allclose(first, last))

    def test_single_layer_keeps_node_locality(self):
        model = tga(small_config(layers=1))
        y = torch.randn(1, 8, 12, 1)
        h = torch.randn(1, 8, 2, LATENT)
        changed = h.clone()
        changed[:, 5] = 0.0
        k = torch.tensor([10])
        base = model(y, h, k, self.context)
        other = model(y, changed, k, self.context)
        keep = [i for i in range(8) if i != 5]
        torch.testing.assert_close(other[:, keep], base[:, keep], atol=1e-6, rtol=1e-5)

    def test_self_attention_flag_changes_output(self):
        torch.manual_seed(5)
        with_sa = tga(small_config())
        torch.manual_seed(5)
        without_sa = tga(small_config(self_attention=False))
        y = torch.randn(1, 8, 12, 1)
        h = torch.randn(1, 8, 1, LATENT)
        k = torch.tensor([7])
        self.assertFalse(torch.allclose(with_sa(y, h, k, self.context),
                                        without_sa(y, h, k, self.context)))

    def test_zero_head_gives_unit_loss(self):
        model = tga(small_config(zero_init_head=True))
        y0 = torch.randn(64, 8, 12, 1)
        h = torch.randn(64, 8, 1, LATENT)
        out = model(y0, h, torch.full((64,), 3), self.context)
        self.assertTrue(torch.all(out == 0))
        generator = torch.Generator().manual_seed(6)
        epsilon = torch.randn(y0.shape, generator=generator)
        loss = training_loss(y0, h, torch.randint(1, 51, (64,), generator=generator),
                             epsilon, model, make_schedule(50), self.context)
        self.assertAlmostEqual(float(loss), 1.0, delta=0.1)

    def test_batch_mismatch(self):
        model = tga(small_config())
        with self.assertRaises(ContractError):
            model(torch.randn(2, 8, 12, 1), torch.randn(2, 7, 1, LATENT),
                  torch.tensor([1, 2]))


    def test_targets_carry_horizon_positions(self):
        model = tga(small_config(), horizon=4).eval()
        y = torch.randn(1, 8, 4, 1)
        h = torch.randn(1, 8, 2, LATENT)
        k = torch.tensor([5])
        before = model(y, h, k, self.context)
        with torch.no_grad():
            model.temporal_embedding.table[6:].normal_()
        torch.testing.assert_close(model(y, h, k, self.context), before)
        with torch.no_grad():
            model.temporal_embedding.table[2:6].zero_()
        self.assertFalse(torch.allclose(model(y, h, k, self.context), before))


class TestSGADenoiser(unittest.TestCase):
    """Test cases for the spatial gated attention denoiser."""

    def setUp(self):
        torch.manual_seed(7)
        self.context = DenoiserContext(target_spatial=torch.randn(4, SPATIAL),
                                       cond_spatial=torch.randn(8, SPATIAL))

    def test_output_shape(self):
        model = sga(small_config())
        y = torch.randn(2, 4, 12, 1)
        out = model(y, torch.randn(2, 8, 2, LATENT), torch.tensor([1, 9]), self.context)
        self.assertEqual(out.shape, y.shape)

    def test_single_target(self):
        model = sga(small_config())
        context = DenoiserContext(target_spatial=torch.randn(1, SPATIAL))
        y = torch.randn(1, 1, 12, 1)
        out = model(y, torch.randn(1, 8, 2, LATENT), torch.tensor([4]), context)
        self.assertEqual(out.shape, y.shape)

    def test_observed_permutation_invariance(self):
        model = sga(small_config())
        y = torch.randn(1, 4, 12, 1)
        h = torch.randn(1, 8, 2, LATENT)
        k = torch.tensor([12])
        perm = torch.randperm(8)
        permuted = DenoiserContext(target_spatial=self.context.target_spatial,
                                   cond_spatial=self.context.cond_spatial[perm])
        torch.testing.assert_close(model(y, h[:, perm], k, permuted),
                                   model(y, h, k, self.context),
                                   atol=1e-5, rtol=1e-4)

    def test_score_matrix_is_targets_by_observed(self):
        model = sga(small_config())
        attention = model.layers[0].cross_attention
        attention.record_scores = True
        model(torch.randn(1, 4, 12, 1), torch.randn(1, 8, 2, LATENT),
              torch.tensor([2]), self.context)
        self.assertEqual(tuple(attention.last_scores.shape), (1, 2, 4, 8))

    def test_self_attention_flag_changes_output(self):
        torch.manual_seed(8)
        with_sa = sga(small_config())
        torch.manual_seed(8)
        without_sa = sga(small_config(self_attention=False))
        y = torch.randn(1, 4, 12, 1)
        h = torch.randn(1, 8, 2, LATENT)
        k = torch.tensor([5])
        self.assertFalse(torch.allclose(with_sa(y, h, k, self.context),
                                        without_sa(y, h, k, self.context)))

    def test_no_targets(self):
        model = sga(small_config())
        with self.assertRaises(InputError):
            model(torch.randn(1, 0, 12, 1), torch.randn(1, 8, 2, LATENT),
                  torch.tensor([1]), self.context)

    def test_missing_target_embedding(self):
        model = sga(small_config())
        with self.assertRaises(ContractError):
            model(torch.randn(1, 4, 12, 1), torch.randn(1, 8, 2, LATENT),
                  torch.tensor([1]), DenoiserContext())
        short = DenoiserContext(target_spatial=torch.randn(3, SPATIAL))
        with self.assertRaises(ContractError):
            model(torch.randn(1, 4, 12, 1), torch.randn(1, 8, 2, LATENT),
                  torch.tensor([1]), short)

    def test_latent_length_mismatch(self):
        model = sga(small_config(), tau=2)
        with self.assertRaises(ContractError):
            model(torch.randn(1, 4, 12, 1), torch.randn(1, 8, 3, LATENT),
                  torch.tensor([1]), self.context)


class TestFullAttentionDenoiser(unittest.TestCase):
    """Test cases for the joint-attention comparison denoiser."""

    def test_score_matrix_covers_all_tokens(self):
        torch.manual_seed(9)
        model = FullAttentionDenoiser(small_config(), 12, 1, LATENT, 50, SPATIAL)
        attention = model.layers[0].attention
        attention.record_scores = True
        y = torch.randn(1, 5, 12, 1)
        out = model(y, torch.randn(1, 5, 3, LATENT), torch.tensor([1]))
        self.assertEqual(out.shape, y.shape)
        tokens = 5 * (3 + 1)
        self.assertEqual(tuple(attention.last_scores.shape), (1, 2, tokens, tokens))

    def test_matched_parameter_count(self):
        config = small_config()
        target = count_parameters(tga(config))

        def build(width):
            return FullAttentionDenoiser(replace(config, ffn_dim=width), 12, 1,
                                         LATENT, 50, SPATIAL)

        width = match_ffn_dim(target, build)
        self.assertGreater(width, 1)
        self.assertLessEqual(abs(count_parameters(build(width)) - target), 0.1 * target)

class TestTrainingLossGradients(unittest.TestCase):
    """Finite-difference checks of the noise-prediction loss through each denoiser."""

    WEIGHT = "layers.0.fusion.w_g1.weight"

    def _gradcheck(self, model, y0, h, context):
        model = model.double()
        weight = dict(model.named_parameters())[self.WEIGHT].detach().clone()
        weight.requires_grad_(True)
        generator = torch.Generator().manual_seed(12)
        epsilon = torch.randn(y0.shape, generator=generator, dtype=torch.float64)
        k = torch.tensor([7, 30])
        schedule = make_schedule(50)

        def run(w):
            def denoiser(y_k, condition, steps, ctx):
                return functional_call(model, {self.WEIGHT: w}, (y_k, condition, steps, ctx))
            return training_loss(y0, h, k, epsilon, denoiser, schedule, context)

        return torch.autograd.gradcheck(run, (weight,), eps=1e-6, atol=1e-6)

    def test_tga_loss_gradient(self):
        torch.manual_seed(21)
        model = tga(small_config(layers=1), horizon=3)
        context = DenoiserContext(target_spatial=torch.randn(3, SPATIAL, dtype=torch.float64))
        y0 = torch.randn(2, 3, 3, 1, dtype=torch.float64)
        h = torch.randn(2, 3, 2, LATENT, dtype=torch.float64)
        self.assertTrue(self._gradcheck(model, y0, h, context))

    def test_sga_loss_gradient(self):
        torch.manual_seed(22)
        model = sga(small_config(layers=1), window=3, tau=2)
        context = DenoiserContext(
            target_spatial=torch.randn(2, SPATIAL, dtype=torch.float64),
            cond_spatial=torch.randn(3, SPATIAL, dtype=torch.float64))
        y0 = torch.randn(2, 2, 3, 1, dtype=torch.float64)
        h = torch.randn(2, 3, 2, LATENT, dtype=torch.float64)
        self.assertTrue(self._gradcheck(model, y0, h, context))



if __name__ == "__main__":
    unittest.main()
