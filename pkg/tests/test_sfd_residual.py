"""Patch embedding, prior-conditioned attention and the residual codec."""

import math

import pytest
import torch
import torch.nn.functional as F

from helpers import fd_gradcheck

from sttvc import sfd_residual as sr
from sttvc.rdt_motion import relative_index


class TestPatchEmbed:
    def test_token_grid_shape(self):
        emb = sr.PatchEmbed(64, 32)
        tok = emb(torch.rand(1, 64, 128, 128))
        assert tok.shape == (1, 64, 64, 32)

    def test_zero_input_gives_bias(self):
        emb = sr.PatchEmbed(8, 16)
        tok = emb(torch.zeros(1, 8, 4, 4))
        assert torch.allclose(tok, emb.proj.bias.expand_as(tok))

    def test_linearity_identity(self):
        torch.manual_seed(0)
        emb = sr.PatchEmbed(8, 16).double()
        a = torch.rand(1, 8, 8, 8, dtype=torch.double)
        b = torch.rand(1, 8, 8, 8, dtype=torch.double)
        lhs = emb(a + b)
        rhs = emb(a) + emb(b) - emb.proj.bias
        assert float((lhs - rhs).abs().max()) < 1e-9

    def test_odd_dims_rejected(self):
        with pytest.raises(ValueError):
            sr.PatchEmbed(8, 16)(torch.rand(1, 8, 5, 8))


class TestLevelWindow:
    @pytest.mark.parametrize("hw,expect", [((16, 16), 8), ((8, 24), 8), ((4, 8), 4),
                                           ((2, 2), 2), ((12, 12), 4), ((6, 10), 2)])
    def test_largest_dividing_window(self, hw, expect):
        assert sr.level_window(*hw, 8) == expect


class TestSfdAttention:
    def test_zero_prior_and_mod_equals_standard(self):
        torch.manual_seed(1)
        attn = sr.SfdAttention(dim=16, heads=4).double()
        x = torch.randn(1, 8, 8, 16, dtype=torch.double)
        plain = attn(x, None)
        with_zero_prior = attn(x, torch.zeros_like(x))
        assert float((plain - with_zero_prior).abs().max()) < 1e-7

    def test_single_token_window_is_value_projection(self):
        torch.manual_seed(2)
        attn = sr.SfdAttention(dim=8, heads=2, max_window=1).double()
        x = torch.randn(1, 3, 3, 8, dtype=torch.double)
        out = attn(x, None)
        normed = attn.norm(x)
        v = attn.qkv(normed)[..., 16:]
        expect = attn.proj(v)
        assert torch.allclose(out, expect, atol=1e-12)

    def test_matches_four_term_brute_force(self):
        torch.manual_seed(3)
        attn = sr.SfdAttention(dim=8, heads=2).double()
        with torch.no_grad():
            attn.mod.normal_(std=0.5)
            attn.rel_bias.normal_(std=0.5)
        x = torch.randn(1, 2, 2, 8, dtype=torch.double)      # one 2x2 window, 4 tokens
        prior = torch.randn(1, 2, 2, 8, dtype=torch.double)
        out = attn(x, prior)

        d_head = 4
        tokens = attn.norm(x).reshape(4, 8)
        qkv = attn.qkv(tokens)
        p = prior.reshape(4, 8)
        wq, wk = attn.qkv.weight[:8], attn.qkv.weight[8:16]
        qp_all, kp_all = p @ wq.t(), p @ wk.t()
        idx = relative_index(2, 8)
        mixed = torch.zeros(4, 8, dtype=torch.double)
        for hd in range(2):
            sl = slice(hd * d_head, (hd + 1) * d_head)
            q, k, v = qkv[:, sl], qkv[:, 8:16][:, sl], qkv[:, 16:][:, sl]
            qp, kp = qp_all[:, sl], kp_all[:, sl]
            for i in range(4):
                logits = torch.tensor([
                    float(q[i] @ k[j]) / math.sqrt(d_head)
                    + float(attn.rel_bias[hd, idx[i, j]])
                    + float(qp[i] @ kp[j])
                    + float(attn.mod[hd])
                    for j in range(4)
                ], dtype=torch.double)
                w = torch.softmax(logits, dim=0)
                assert abs(float(w.sum()) - 1.0) < 1e-12
                mixed[i, sl] = sum(w[j] * v[j] for j in range(4))
        expect = attn.proj(mixed).view(1, 2, 2, 8)
        rel = float((out - expect).norm() / expect.norm())
        assert rel < 1e-5, rel

    def test_gradients_wrt_prior_and_mod(self):
        torch.manual_seed(4)
        attn = sr.SfdAttention(dim=8, heads=2).double()
        x = torch.randn(1, 4, 4, 8, dtype=torch.double)
        prior = torch.randn(1, 4, 4, 8, dtype=torch.double)
        worst = fd_gradcheck([prior, attn.mod], lambda: attn(x, prior).sum(),
                             n_coords=40, seed=3)
        assert worst <= 1e-3, worst

    def test_prior_grid_mismatch_rejected(self):
        attn = sr.SfdAttention(dim=8, heads=2)
        with pytest.raises(ValueError):
            attn(torch.rand(1, 4, 4, 8), torch.rand(1, 2, 2, 8))


class TestPriorPyramid:
    def make(self, dims=(16, 32, 64, 128)):
        torch.manual_seed(5)
        embed = sr.PatchEmbed(8, dims[0])
        return sr.PriorPyramid(embed, dims)

    def test_level_shapes(self):
        pyr = self.make()
        pred = torch.rand(1, 8, 32, 32)
        levels = pyr(pred)
        assert [tuple(p.shape[1:3]) for p in levels] == [(16, 16), (8, 8), (4, 4), (2, 2)]
        assert [p.shape[-1] for p in levels] == [16, 32, 64, 128]

    def test_three_reductions_shrink_count_64x(self):
        pyr = self.make()
        levels = pyr(torch.rand(1, 8, 32, 32))
        n0 = levels[0].shape[1] * levels[0].shape[2]
        n3 = levels[3].shape[1] * levels[3].shape[2]
        assert n3 == n0 // 64

    def test_encoder_decoder_priors_identical(self):
        pyr = self.make()
        pred = torch.rand(1, 8, 32, 32)
        enc_side = pyr(pred)
        dec_side = pyr(pred.clone())
        for a, b in zip(enc_side, dec_side):
            assert torch.equal(a, b)

    def test_odd_grid_rejected(self):
        red = sr.PriorReduce(8, 16)
        with pytest.raises(ValueError):
            red(torch.rand(1, 3, 4, 8))


class TestResidualCodec:
    def build(self, c=8, dims=(16, 32, 64, 128), depths=(2, 2, 6, 2)):
        torch.manual_seed(6)
        embed = sr.PatchEmbed(c, dims[0])
        enc = sr.ResidualEncoder(embed, dims, depths, window=8)
        dec = sr.ResidualDecoder(c, dims, depths, window=8)
        pyr = sr.PriorPyramid(embed, dims)
        return embed, enc, dec, pyr

    def test_latent_shape_for_256_frame(self):
        torch.manual_seed(7)
        dims = (32, 64, 128, 256)
        embed = sr.PatchEmbed(64, 32)
        enc = sr.ResidualEncoder(embed, dims, (2, 2, 6, 2), window=8)
        lat = enc(torch.rand(1, 64, 128, 128), None)
        assert lat.shape == (1, 256, 8, 8)

    def test_decoder_restores_resolution(self):
        _, enc, dec, pyr = self.build()
        resi = torch.rand(1, 8, 32, 32)
        pred = torch.rand(1, 8, 32, 32)
        priors = pyr(pred)
        lat = enc(resi, priors)
        assert lat.shape == (1, 128, 2, 2)
        out = dec(lat, priors)
        assert out.shape == resi.shape

    def test_deterministic(self):
        _, enc, dec, pyr = self.build()
        resi = torch.zeros(1, 8, 32, 32)
        priors = pyr(torch.rand(1, 8, 32, 32))
        a, b = enc(resi, priors), enc(resi, priors)
        assert torch.equal(a, b)
        assert torch.equal(dec(a, priors), dec(b, priors))

    def test_gradients_reach_residual_and_prediction(self):
        _, enc, _, pyr = self.build(depths=(1, 1, 1, 1))
        resi = torch.rand(1, 8, 32, 32, requires_grad=True)
        pred = torch.rand(1, 8, 32, 32, requires_grad=True)
        enc(resi, pyr(pred)).sum().backward()
        assert resi.grad is not None and float(resi.grad.abs().sum()) > 0
        assert pred.grad is not None and float(pred.grad.abs().sum()) > 0

    def test_without_priors_runs(self):
        _, enc, dec, _ = self.build()
        lat = enc(torch.rand(1, 8, 32, 32), None)
        assert dec(lat, None).shape == (1, 8, 32, 32)


class TestAddPrediction:
    def test_inverse_of_residual(self):
        from sttvc.mgp_refine import compute_residual

        a, b = torch.rand(1, 4, 8, 8), torch.rand(1, 4, 8, 8)
        assert torch.equal(sr.add_prediction(compute_residual(a, b), b), a)

    def test_zero_residual_returns_prediction(self):
        p = torch.rand(1, 4, 8, 8)
        assert torch.equal(sr.add_prediction(torch.zeros_like(p), p), p)

    def test_lossless_limit(self):
        f = torch.rand(1, 4, 8, 8)
        pred = torch.rand(1, 4, 8, 8)
        resi = f - pred
        assert torch.allclose(sr.add_prediction(resi, pred), f, atol=1e-7)
