"""End-to-end codec assembly.

Wires the feature transforms, the coded motion path, the bit-free
multi-reference refinement and the prior-conditioned residual codec into a
single module.  The decoder-side computation is factored into shared methods
(`predict`, `reconstruct`) that the encoder calls on its own quantized
latents, so encoder and decoder reconstructions are bitwise identical.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import ModelConfig
from .entropy_codec import GaussianConditional, MeanScaleHyperprior, quantize
from .frame_transform import FeatureExtractor, FrameReconstructor, ReconstructionEnhancer
from .mgp_refine import PredictionFuser, ReferenceBuffer, UncodedAligner, pad_references
from .rdt_motion import (CnnMotionEstimator, DeformableCompensation, MotionCodec,
                         MotionHead, MotionUformer, PairFusion)
from .sfd_residual import PatchEmbed, PriorPyramid, ResidualDecoder, ResidualEncoder


class VideoCodec(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        cm = cfg.motion_latent_channels

        self.extractor = FeatureExtractor(c)
        self.reconstructor = FrameReconstructor(c)
        self.enhancer = ReconstructionEnhancer(c, cfg.nonlocal_downsample)

        self.fusion = PairFusion(c)
        if cfg.ablate_rdt:
            self.motion_est = CnnMotionEstimator(c, cm, cfg.uformer_dims[0])
        else:
            self.motion_est = MotionUformer(c, cm, cfg.uformer_dims, cfg.heads,
                                            cfg.window, cfg.ffn_ratio)
        self.motion_codec = MotionCodec(cm, cm)
        self.motion_head = MotionHead(cm, cfg.heads, cfg.mask_mode)
        self.compensation = DeformableCompensation(c, cfg.heads)

        if not cfg.ablate_mgp:
            self.aligner = UncodedAligner(c, cfg.uformer_dims, cfg.heads, cfg.window,
                                          cfg.ffn_ratio, cfg.mask_mode,
                                          use_transformer=not cfg.ablate_rdt)
            self.fuser = PredictionFuser(c)

        dims = cfg.sfd_dims
        self.patch_embed = PatchEmbed(c, dims[0])
        self.prior_pyramid = None if cfg.ablate_sfd else PriorPyramid(self.patch_embed, dims)
        self.sfd_enc = ResidualEncoder(self.patch_embed, dims, cfg.sfd_depths, cfg.sfd_window)
        self.sfd_dec = ResidualDecoder(c, dims, cfg.sfd_depths, cfg.sfd_window)
        self.hyper = MeanScaleHyperprior(dims[-1], cfg.hyper_channels)

        # training-only head projecting the fused prediction back to pixels
        self.warmup_proj = nn.ConvTranspose2d(c, 3, 5, stride=2, padding=2, output_padding=1)

    # -- shape bookkeeping (frame dims are padded, i.e. multiples of 64) ----

    def motion_latent_shape(self, hw: tuple[int, int], batch: int = 1):
        return (batch, self.cfg.motion_latent_channels, hw[0] // 8, hw[1] // 8)

    def residual_latent_shape(self, hw: tuple[int, int], batch: int = 1):
        return (batch, self.cfg.residual_latent_channels, hw[0] // 32, hw[1] // 32)

    def hyper_latent_shape(self, hw: tuple[int, int], batch: int = 1):
        lh, lw = hw[0] // 32, hw[1] // 32
        return (batch, self.cfg.hyper_channels, (lh + 3) // 4, (lw + 3) // 4)

    # -- shared decoder-side paths ------------------------------------------

    def priors(self, pred: torch.Tensor):
        if self.prior_pyramid is None:
            return None
        return self.prior_pyramid(pred)

    def predict(self, q_mv: torch.Tensor, buffer: ReferenceBuffer):
        """Coarse + fused prediction from the (quantized) motion latent and the
        reference buffer.  Runs identically on encoder and decoder."""
        refs = pad_references(buffer)
        motion_feat = self.motion_codec.decode_feature(q_mv)
        mv = self.motion_head(motion_feat)
        coarse = self.compensation(refs[0], mv)
        if self.cfg.ablate_mgp:
            return coarse, coarse
        stacked_refs = torch.cat(list(refs), dim=0)
        stacked_coarse = coarse.repeat(3, 1, 1, 1)
        aligned = list(self.aligner(stacked_coarse, stacked_refs).chunk(3, dim=0))
        return coarse, self.fuser(coarse, aligned)

    def sfd_encode(self, resi: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
        return self.sfd_enc(resi, self.priors(pred))

    def sfd_decode(self, y_hat: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
        return self.sfd_dec(y_hat, self.priors(pred))

    def reconstruct(self, y_hat: torch.Tensor, pred, priors, buffer: ReferenceBuffer,
                    clamp: bool = True):
        """Residual decode, prediction add, multi-reference enhancement and the
        pixel-domain head.  `y_hat` is the dequantized residual latent."""
        resi_hat = self.sfd_dec(y_hat, priors)
        f_hat = self.enhancer(pred + resi_hat, pad_references(buffer))
        x_hat = self.reconstructor(f_hat, clamp=clamp)
        return f_hat, x_hat

    # -- differentiable training pass ---------------------------------------

    def forward_p_frame(self, x_t: torch.Tensor, buffer: ReferenceBuffer, mode: str = "train"):
        """Code one inter frame against the buffer; returns the per-frame
        tensors needed by the loss plus the feature to push into the buffer."""
        f_cur = self.extractor(x_t)
        refs = pad_references(buffer)
        motion_feat = self.motion_est(self.fusion(f_cur, refs[0]))
        q_mv, bits_mv = self.motion_codec.encode(motion_feat, mode)
        coarse, pred = self.predict(q_mv, buffer)
        priors = self.priors(pred)

        resi = f_cur - pred
        lat = self.sfd_enc(resi, priors)
        z = self.hyper.encode_hyper(lat)
        z_hat = quantize(z, mode)
        bits_z = self.hyper.hyper_model.bits(z_hat)
        means, scales = self.hyper.decode_params(z_hat, lat.shape[-2:])
        r = GaussianConditional.quantize_centered(lat, means, mode)
        bits_y = self.hyper.gaussian.bits(r, torch.zeros_like(r), scales)
        y_hat = r + means

        f_hat, x_hat = self.reconstruct(y_hat, pred, priors, buffer, clamp=(mode == "eval"))
        out = {
            "x_hat": x_hat,
            "f_hat": f_hat,
            "pred": pred,
            "coarse": coarse,
            "x_mpre": self.warmup_proj(pred),
            "bits_mv": bits_mv,
            "bits_resi": bits_y + bits_z,
        }
        if mode == "eval":
            out["pred_frame"] = self.reconstructor(pred)
        return out

    # -- byte-level coding (eval mode, shared decode path) --------------------

    def code_p_frame(self, x_pad: torch.Tensor, buffer: ReferenceBuffer) -> dict:
        """Encode one padded inter frame to its three byte streams, running the
        decoder path on the quantized latents so the returned reconstruction is
        exactly what the decoder will produce."""
        from .entropy_codec import range_encode

        f_cur = self.extractor(x_pad)
        refs = pad_references(buffer)
        motion_feat = self.motion_est(self.fusion(f_cur, refs[0]))
        q_mv = quantize(self.motion_codec.enc(motion_feat), "eval")
        coarse, pred = self.predict(q_mv, buffer)
        priors = self.priors(pred)

        lat = self.sfd_enc(f_cur - pred, priors)
        z = self.hyper.encode_hyper(lat)
        q_z = quantize(z, "eval")
        means, scales = self.hyper.decode_params(q_z, lat.shape[-2:])
        r = GaussianConditional.quantize_centered(lat, means, "eval")
        y_hat = r + means
        f_hat, x_hat = self.reconstruct(y_hat, pred, priors, buffer)

        streams = (
            range_encode(q_z, self.hyper.hyper_model),
            range_encode(r, self.hyper.gaussian, scales=scales),
            range_encode(q_mv, self.motion_codec.model),
        )
        return {"streams": streams, "f_hat": f_hat, "x_hat": x_hat}

    def decode_p_frame(self, streams: tuple[bytes, bytes, bytes], buffer: ReferenceBuffer,
                       padded_hw: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor]:
        """Decode the (hyper, residual, motion) streams of one inter frame."""
        from .entropy_codec import range_decode

        b_z, b_y, b_mv = streams
        q_mv = torch.from_numpy(
            range_decode(b_mv, self.motion_codec.model, self.motion_latent_shape(padded_hw))
        ).float()
        coarse, pred = self.predict(q_mv, buffer)
        priors = self.priors(pred)
        q_z = torch.from_numpy(
            range_decode(b_z, self.hyper.hyper_model, self.hyper_latent_shape(padded_hw))
        ).float()
        lat_hw = (padded_hw[0] // 32, padded_hw[1] // 32)
        means, scales = self.hyper.decode_params(q_z, lat_hw)
        r = torch.from_numpy(
            range_decode(b_y, self.hyper.gaussian, self.residual_latent_shape(padded_hw), scales=scales)
        ).float()
        f_hat, x_hat = self.reconstruct(r + means, pred, priors, buffer)
        return f_hat, x_hat

    def forward_clip(self, clip: torch.Tensor, mode: str = "train"):
        """Sequentially code frames 1..T-1 of a (B, T, 3, H, W) clip; frame 0
        provides the initial reference feature (taken from the original)."""
        b, t, _, h, w = clip.shape
        if t < 2:
            raise ValueError("clips must have at least 2 frames")
        buffer = ReferenceBuffer(self.cfg.max_refs)
        buffer.push(self.extractor(clip[:, 0]))
        outs = []
        for i in range(1, t):
            out = self.forward_p_frame(clip[:, i], buffer, mode)
            buffer.push(out["f_hat"])
            outs.append(out)
        pixels = float(b * (t - 1) * h * w)
        return {
            "frames": outs,
            "bpp_mv": torch.stack([o["bits_mv"] for o in outs]).sum() / pixels,
            "bpp_resi": torch.stack([o["bits_resi"] for o in outs]).sum() / pixels,
        }
