"""Reference padding, bit-free alignment and attention fusion."""

import pytest
import torch
import torch.nn.functional as F

from sttvc import mgp_refine as mg
from sttvc.entropy_codec import FactorizedEntropy, GaussianConditional


def feat(seed, c=8, h=8, w=8):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(1, c, h, w, generator=g)


class TestReferenceBuffer:
    def test_newest_first_and_capacity(self):
        buf = mg.ReferenceBuffer(3)
        a, b, c, d = (feat(i) for i in range(4))
        for f in (a, b, c, d):
            buf.push(f)
        entries = buf.entries()
        assert len(entries) == 3
        assert entries[0] is d and entries[1] is c and entries[2] is b

    def test_reset(self):
        buf = mg.ReferenceBuffer(2)
        buf.push(feat(0))
        buf.reset()
        assert len(buf) == 0


class TestPadReferences:
    def test_single_entry_triplicated(self):
        a = feat(0)
        assert mg.pad_references([a]) == (a, a, a)

    def test_two_entries_duplicate_oldest(self):
        a, b = feat(0), feat(1)
        assert mg.pad_references([a, b]) == (a, b, b)

    def test_full_buffer_identity(self):
        a, b, c = feat(0), feat(1), feat(2)
        assert mg.pad_references([a, b, c]) == (a, b, c)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mg.pad_references([])

    def test_buffer_object_accepted(self):
        buf = mg.ReferenceBuffer(3)
        a, b = feat(0), feat(1)
        buf.push(a)
        buf.push(b)
        assert mg.pad_references(buf) == (b, a, a)


class TestUncodedAligner:
    def make(self, c=8):
        torch.manual_seed(0)
        return mg.UncodedAligner(c, (c, c, c), heads=2, window=4, ffn_ratio=1,
                                 mask_mode="softmax")

    def test_identity_at_initialization(self):
        al = self.make()
        coarse = feat(1, c=8, h=16, w=16)
        # fresh head/compensation start as an identity warp of the reference
        out = al.compensation(coarse, al.head(al.estimator(al.fusion(coarse, coarse))))
        assert torch.allclose(out, coarse, atol=1e-6)

    def test_no_entropy_coding_in_path(self):
        al = self.make()
        assert not any(isinstance(m, (FactorizedEntropy, GaussianConditional))
                       for m in al.modules())

    def test_matches_explicit_composition(self):
        al = self.make()
        with torch.no_grad():
            for p in al.parameters():
                p.add_(torch.randn_like(p) * 0.02)
        coarse, ref = feat(2, h=16, w=16), feat(3, h=16, w=16)
        out = al(coarse, ref)
        expect = al.compensation(ref, al.head(al.estimator(al.fusion(coarse, ref))))
        assert torch.equal(out, expect)

    def test_shape_mismatch_rejected(self):
        al = self.make()
        with pytest.raises(ValueError):
            al(feat(0, h=16, w=16), feat(1, h=8, w=8))


class TestPredictionFuser:
    def test_zeroed_fusion_branch_returns_coarse(self):
        torch.manual_seed(1)
        fuser = mg.PredictionFuser(8)
        with torch.no_grad():
            fuser.reduce.weight.zero_()
            fuser.reduce.bias.zero_()
        coarse = feat(4)
        out = fuser(coarse, [feat(5), feat(6), feat(7)])
        assert torch.equal(out, coarse)

    def test_attention_values_in_unit_interval(self):
        torch.manual_seed(2)
        fuser = mg.PredictionFuser(8)
        cat = torch.cat([feat(i) for i in range(4)], dim=1)
        ch = fuser.channel_attn(cat)
        sp = fuser.spatial_attn(torch.rand(1, 8, 8, 8))
        for gate in (ch, sp):
            assert float(gate.min()) > 0.0 and float(gate.max()) < 1.0

    def test_matches_step_by_step_evaluation(self):
        torch.manual_seed(3)
        fuser = mg.PredictionFuser(4).double()
        with torch.no_grad():
            for p in fuser.parameters():
                p.normal_(std=0.3)
        coarse = torch.rand(1, 4, 8, 8, dtype=torch.double)
        aligned = [torch.rand(1, 4, 8, 8, dtype=torch.double) for _ in range(3)]
        out = fuser(coarse, aligned)

        cat = torch.cat([coarse] + aligned, dim=1)
        avg = cat.mean(dim=(2, 3))
        peak = cat.amax(dim=(2, 3))
        gate_c = torch.sigmoid(fuser.channel_attn.mlp(avg) + fuser.channel_attn.mlp(peak))
        attn_ch = gate_c[:, :, None, None] * cat
        enh = F.relu(fuser.reduce(attn_ch))
        stats = torch.cat([enh.mean(dim=1, keepdim=True), enh.amax(dim=1, keepdim=True)], dim=1)
        gate_s = torch.sigmoid(fuser.spatial_attn.conv(stats))
        expect = coarse + gate_s * enh
        assert float((out - expect).abs().max()) < 1e-6

    def test_requires_three_references(self):
        fuser = mg.PredictionFuser(8)
        with pytest.raises(ValueError):
            fuser(feat(0), [feat(1)])


class TestComputeResidual:
    def test_zero_when_equal(self):
        a = feat(0)
        assert torch.equal(mg.compute_residual(a, a), torch.zeros_like(a))

    def test_additive_inverse_exact(self):
        a, b = feat(1), feat(2)
        resi = mg.compute_residual(a, b)
        assert torch.equal(resi + b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mg.compute_residual(feat(0), feat(1, h=4))

    def test_prediction_reduces_residual_on_trained_clip(self, trained_toy, toy_clip):
        # after training, |f_cur - pred| should be well below |f_cur|
        import numpy as np

        model = trained_toy["model"]
        clip = torch.from_numpy(np.ascontiguousarray(toy_clip[:3])).permute(0, 3, 1, 2).unsqueeze(0)
        with torch.no_grad():
            out = model.forward_clip(clip, mode="eval")
            f_cur = model.extractor(clip[:, 1])
            resi = mg.compute_residual(f_cur, out["frames"][0]["pred"])
        assert float(resi.abs().mean()) < float(f_cur.abs().mean())
