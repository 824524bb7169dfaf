"""Motion estimation, coding and deformable compensation oracles."""

import math

import numpy as np
import pytest
import torch

from helpers import fd_gradcheck

from sttvc import entropy_codec as ec
from sttvc import rdt_motion as rm


class TestPairFusion:
    def test_shape(self):
        fuse = rm.PairFusion(64)
        out = fuse(torch.rand(1, 64, 128, 128), torch.rand(1, 64, 128, 128))
        assert out.shape == (1, 64, 128, 128)

    def test_identity_projection(self):
        fuse = rm.PairFusion(8)
        with torch.no_grad():
            fuse.proj.weight.zero_()
            fuse.proj.bias.zero_()
            fuse.proj.weight[:, :8, 0, 0] = torch.eye(8)
        a, b = torch.rand(2, 8, 6, 6), torch.rand(2, 8, 6, 6)
        assert torch.allclose(fuse(a, b), a)

    def test_matches_explicit_projection(self):
        torch.manual_seed(0)
        fuse = rm.PairFusion(4).double()
        a, b = torch.rand(1, 4, 5, 7, dtype=torch.double), torch.rand(1, 4, 5, 7, dtype=torch.double)
        out = fuse(a, b)
        w = fuse.proj.weight.view(4, 8)
        cat = torch.cat([a, b], dim=1)[0].reshape(8, -1)
        expect = (w @ cat + fuse.proj.bias[:, None]).view(1, 4, 5, 7)
        assert float((out - expect).abs().max()) < 1e-6

    def test_rejects_mismatch(self):
        with pytest.raises(ValueError):
            rm.PairFusion(8)(torch.rand(1, 8, 8, 8), torch.rand(1, 8, 8, 16))


def brute_force_window_attention(attn: rm.WindowAttention, x: torch.Tensor) -> torch.Tensor:
    """Token-by-token softmax(QK^T/sqrt(d) + B)V with explicit loops."""
    b, c, h, w = x.shape
    ws = attn.window
    heads, d = attn.heads, c // attn.heads
    out = torch.zeros_like(x)
    bias = attn.rel_bias[:, attn.rel_index]
    for bi in range(b):
        for wy in range(h // ws):
            for wx in range(w // ws):
                tokens = torch.stack([
                    x[bi, :, wy * ws + i, wx * ws + j]
                    for i in range(ws) for j in range(ws)
                ]) + attn.pos_embed
                normed = attn.norm(tokens)
                qkv = attn.qkv(normed)
                n = ws * ws
                mixed = torch.zeros(n, c, dtype=x.dtype)
                for hd in range(heads):
                    q = qkv[:, hd * d:(hd + 1) * d]
                    k = qkv[:, c + hd * d:c + (hd + 1) * d]
                    v = qkv[:, 2 * c + hd * d:2 * c + (hd + 1) * d]
                    for i in range(n):
                        logits = torch.tensor([
                            float(q[i] @ k[j]) / math.sqrt(d) + float(bias[hd, i, j])
                            for j in range(n)
                        ], dtype=x.dtype)
                        wgt = torch.softmax(logits, dim=0)
                        assert abs(float(wgt.sum()) - 1.0) < 1e-9
                        mixed[i, hd * d:(hd + 1) * d] = sum(wgt[j] * v[j] for j in range(n))
                proj = attn.proj(mixed)
                for t in range(n):
                    out[bi, :, wy * ws + t // ws, wx * ws + t % ws] = proj[t]
    return out


class TestWindowAttention:
    def test_matches_brute_force_8x8(self):
        torch.manual_seed(1)
        attn = rm.WindowAttention(dim=16, heads=4, window=8).double()
        x = torch.randn(1, 16, 8, 8, dtype=torch.double)
        out = attn(x)
        expect = brute_force_window_attention(attn, x)
        rel = float((out - expect).norm() / expect.norm())
        assert rel < 1e-5, rel

    def test_single_token_window(self):
        torch.manual_seed(2)
        attn = rm.WindowAttention(dim=8, heads=2, window=1).double()
        x = torch.randn(1, 8, 3, 3, dtype=torch.double)
        out = attn(x)
        tokens = x.permute(0, 2, 3, 1).reshape(9, 8) + attn.pos_embed
        qkv = attn.qkv(attn.norm(tokens))
        expect = attn.proj(qkv[:, 16:]).view(1, 3, 3, 8).permute(0, 3, 1, 2)
        assert torch.allclose(out, expect, atol=1e-12)

    def test_zero_qk_uniform_average(self):
        torch.manual_seed(3)
        attn = rm.WindowAttention(dim=8, heads=2, window=4).double()
        with torch.no_grad():
            attn.qkv.weight[:16].zero_()
            attn.qkv.bias[:16].zero_()
            attn.rel_bias.zero_()
        x = torch.randn(1, 8, 4, 4, dtype=torch.double)
        out = attn(x)
        tokens = x.permute(0, 2, 3, 1).reshape(16, 8) + attn.pos_embed
        values = attn.qkv(attn.norm(tokens))[:, 16:]
        expect = attn.proj(values.mean(dim=0, keepdim=True).expand(16, 8))
        expect = expect.view(1, 4, 4, 8).permute(0, 3, 1, 2)
        assert torch.allclose(out, expect, atol=1e-10)

    def test_rejects_indivisible(self):
        attn = rm.WindowAttention(dim=8, heads=2, window=8)
        with pytest.raises(ValueError):
            attn(torch.rand(1, 8, 12, 16))


class TestLeWinBlock:
    def test_zeroed_branches_identity(self):
        torch.manual_seed(4)
        blk = rm.LeWinBlock(dim=16, heads=4, window=4)
        with torch.no_grad():
            blk.attn.proj.weight.zero_()
            blk.attn.proj.bias.zero_()
            blk.ff_out.weight.zero_()
            blk.ff_out.bias.zero_()
        x = torch.rand(2, 16, 8, 8)
        assert torch.equal(blk(x), x)

    @pytest.mark.parametrize("hw", [(8, 8), (16, 24), (32, 8)])
    def test_shape_preserved(self, hw):
        blk = rm.LeWinBlock(dim=8, heads=2, window=8)
        x = torch.rand(1, 8, *hw)
        assert blk(x).shape == x.shape

    def test_input_gradients_match_finite_differences(self):
        torch.manual_seed(5)
        blk = rm.LeWinBlock(dim=8, heads=2, window=4, ffn_ratio=2).double()
        x = torch.randn(1, 8, 4, 4, dtype=torch.double)
        worst = fd_gradcheck([x], lambda: blk(x).sum(), n_coords=40, seed=1)
        assert worst <= 1e-3, worst


class TestMotionUformer:
    def test_shape_and_internal_scales(self):
        torch.manual_seed(6)
        uf = rm.MotionUformer(64, 64, (64, 128, 256), heads=8, window=8)
        seen = {}
        uf.down0.register_forward_hook(lambda m, i, o: seen.update(d0=o.shape[-1]))
        uf.down1.register_forward_hook(lambda m, i, o: seen.update(d1=o.shape[-1]))
        out = uf(torch.rand(1, 64, 128, 128))
        assert out.shape == (1, 64, 128, 128)
        assert seen == {"d0": 64, "d1": 32}

    def test_deterministic(self):
        torch.manual_seed(7)
        uf = rm.MotionUformer(8, 8, (8, 8, 8), heads=2, window=8, ffn_ratio=1)
        x = torch.rand(1, 8, 32, 32)
        assert torch.equal(uf(x), uf(x))


class TestMotionCodec:
    def test_eval_deterministic_and_nonnegative_bits(self):
        torch.manual_seed(8)
        codec = rm.MotionCodec(16, 16)
        x = torch.rand(1, 16, 32, 32)
        q1, bits1 = codec.encode(x, "eval")
        q2, bits2 = codec.encode(x, "eval")
        assert torch.equal(q1, q2)
        assert float(bits1) == float(bits2)
        assert float(bits1) >= 0.0
        assert torch.equal(q1, q1.round())

    @torch.no_grad()
    def test_coded_size_tracks_estimate(self):
        torch.manual_seed(9)
        codec = rm.MotionCodec(32, 32)
        x = torch.rand(1, 32, 80, 80) * 2            # latent 32x20x20 = 12800 symbols
        q, bits = codec.encode(x, "eval")
        assert q.numel() >= 10_000
        blob = ec.range_encode(q, codec.model)
        assert len(blob) * 8 <= float(bits) * 1.02 + 64 * 8
        back = ec.range_decode(blob, codec.model, q.shape)
        assert np.array_equal(back, q.numpy().astype(np.int64))

    def test_decode_feature_deterministic(self):
        torch.manual_seed(10)
        codec = rm.MotionCodec(16, 16)
        q, _ = codec.encode(torch.rand(1, 16, 32, 32), "eval")
        assert torch.equal(codec.decode_feature(q), codec.decode_feature(q))


class TestMotionHead:
    def test_equal_logits_give_uniform_mask(self):
        head = rm.MotionHead(16, groups=4)
        mv = head(torch.rand(1, 16, 8, 8))
        assert torch.allclose(mv.mask, torch.full_like(mv.mask, 1 / 9), atol=1e-6)

    def test_mask_sums_to_one(self):
        torch.manual_seed(11)
        head = rm.MotionHead(16, groups=4)
        with torch.no_grad():
            head.head.weight.normal_()
            head.head.bias.normal_()
        mv = head(torch.rand(2, 16, 8, 8))
        sums = mv.mask.sum(dim=2)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_zero_init_cancels_base_grid(self):
        head = rm.MotionHead(8, groups=2)
        mv = head(torch.rand(1, 8, 4, 4))
        base = rm.tap_grid().view(1, 1, 9, 2, 1, 1)
        assert torch.allclose(mv.offsets, -base.expand_as(mv.offsets))

    def test_sigmoid_mode(self):
        head = rm.MotionHead(8, groups=2, mask_mode="sigmoid")
        mv = head(torch.rand(1, 8, 4, 4))
        assert torch.allclose(mv.mask, torch.full_like(mv.mask, 0.5))


def identity_field(b, g, h, w, center=4, dtype=torch.float32):
    """Zero offsets, all mask weight on the centre tap."""
    offsets = torch.zeros(b, g, 9, 2, h, w, dtype=dtype)
    mask = torch.zeros(b, g, 9, h, w, dtype=dtype)
    mask[:, :, center] = 1.0
    return rm.MotionField(offsets, mask)


def identity_weight(g, cg, dtype=torch.float32):
    return torch.eye(cg, dtype=dtype).expand(g, 9, cg, cg).contiguous()


class TestDeformableCompensate:
    def test_identity_kernel_exact(self):
        torch.manual_seed(12)
        ref = torch.rand(1, 8, 6, 7)
        out = rm.deformable_compensate(ref, identity_field(1, 2, 6, 7), identity_weight(2, 4))
        assert torch.equal(out, ref)

    def test_constant_shift_one_column(self):
        torch.manual_seed(13)
        ref = torch.rand(1, 4, 5, 6)
        mv = identity_field(1, 2, 5, 6)
        mv.offsets[:, :, 4, 0] = 1.0                        # centre tap: dx=+1
        out = rm.deformable_compensate(ref, mv, identity_weight(2, 2))
        shifted = torch.cat([ref[:, :, :, 1:], ref[:, :, :, -1:]], dim=3)
        assert torch.allclose(out, shifted, atol=1e-6)

    def test_integer_offsets_equal_direct_gather(self, rng):
        torch.manual_seed(14)
        b, g, cg, h, w = 1, 2, 3, 6, 5
        ref = torch.rand(b, g * cg, h, w)
        offsets = torch.from_numpy(rng.integers(-3, 4, size=(b, g, 9, 2, h, w))).float()
        mask = torch.rand(b, g, 9, h, w)
        weight = identity_weight(g, cg)
        out = rm.deformable_compensate(ref, rm.MotionField(offsets, mask), weight)
        base = rm.tap_grid()
        expect = torch.zeros_like(out)
        refg = ref.view(b, g, cg, h, w)
        for gi in range(g):
            for k in range(9):
                for y in range(h):
                    for x in range(w):
                        xi = min(max(int(x + base[k, 0] + offsets[0, gi, k, 0, y, x]), 0), w - 1)
                        yi = min(max(int(y + base[k, 1] + offsets[0, gi, k, 1, y, x]), 0), h - 1)
                        expect[0, gi * cg:(gi + 1) * cg, y, x] += mask[0, gi, k, y, x] * refg[0, gi, :, yi, xi]
        assert torch.allclose(out, expect, atol=1e-5)

    def test_matches_direct_summation_random(self, rng):
        torch.manual_seed(15)
        b, g, cg, h, w = 1, 4, 1, 5, 5
        ref = torch.rand(b, g * cg, h, w, dtype=torch.double)
        offsets = torch.randn(b, g, 9, 2, h, w, dtype=torch.double) * 2
        mask = torch.rand(b, g, 9, h, w, dtype=torch.double)
        weight = torch.randn(g, 9, cg, cg, dtype=torch.double)
        out = rm.deformable_compensate(ref, rm.MotionField(offsets, mask), weight)
        base = rm.tap_grid(dtype=torch.double)
        expect = torch.zeros_like(out)
        refg = ref.view(b, g, cg, h, w)
        for gi in range(g):
            for k in range(9):
                for y in range(h):
                    for x in range(w):
                        px = x + float(base[k, 0]) + float(offsets[0, gi, k, 0, y, x])
                        py = y + float(base[k, 1]) + float(offsets[0, gi, k, 1, y, x])
                        x0, y0 = math.floor(px), math.floor(py)
                        fx, fy = px - x0, py - y0
                        val = torch.zeros(cg, dtype=torch.double)
                        for dy, wy_ in ((0, 1 - fy), (1, fy)):
                            for dx, wx_ in ((0, 1 - fx), (1, fx)):
                                xi = min(max(x0 + dx, 0), w - 1)
                                yi = min(max(y0 + dy, 0), h - 1)
                                val += wy_ * wx_ * refg[0, gi, :, yi, xi]
                        expect[0, gi * cg:(gi + 1) * cg, y, x] += weight[gi, k] @ (val * mask[0, gi, k, y, x])
        rel = float((out - expect).norm() / expect.norm())
        assert rel < 1e-5, rel

    def test_offset_and_mask_gradients(self):
        torch.manual_seed(16)
        b, g, cg, h, w = 1, 2, 2, 4, 4
        ref = torch.rand(b, g * cg, h, w, dtype=torch.double)
        offsets = (torch.randn(b, g, 9, 2, h, w, dtype=torch.double) * 0.7)
        mask = torch.rand(b, g, 9, h, w, dtype=torch.double)
        weight = torch.randn(g, 9, cg, cg, dtype=torch.double)

        def loss():
            return rm.deformable_compensate(ref, rm.MotionField(offsets, mask), weight).sum()

        worst = fd_gradcheck([offsets, mask], loss, n_coords=60, seed=2)
        assert worst <= 1e-3, worst

    def test_rejects_nan_offsets(self):
        ref = torch.rand(1, 4, 4, 4)
        mv = identity_field(1, 2, 4, 4)
        mv.offsets[0, 0, 0, 0, 0, 0] = float("nan")
        with pytest.raises(ValueError):
            rm.deformable_compensate(ref, mv, identity_weight(2, 2))


class TestFusedScoreDecomposition:
    def test_four_term_expansion_identity(self, rng):
        # dot products of fused features split into the four cross terms
        torch.manual_seed(17)
        fuse = rm.PairFusion(6).double()
        with torch.no_grad():
            fuse.proj.bias.zero_()
        w = fuse.proj.weight.view(6, 12)
        wa, wb = w[:, :6], w[:, 6:]
        worst = 0.0
        for _ in range(100):
            cur = torch.randn(1, 6, 4, 4, dtype=torch.double)
            ref = torch.randn(1, 6, 4, 4, dtype=torch.double)
            fused = fuse(cur, ref)[0].reshape(6, -1)
            i, j = rng.integers(16), rng.integers(16)
            score = float(fused[:, i] @ fused[:, j])
            ci, ri = cur[0].reshape(6, -1)[:, i], ref[0].reshape(6, -1)[:, i]
            cj, rj = cur[0].reshape(6, -1)[:, j], ref[0].reshape(6, -1)[:, j]
            terms = (float((wa @ ci) @ (wa @ cj)) + float((wa @ ci) @ (wb @ rj))
                     + float((wb @ ri) @ (wa @ cj)) + float((wb @ ri) @ (wb @ rj)))
            worst = max(worst, abs(score - terms))
        assert worst <= 1e-6, worst
