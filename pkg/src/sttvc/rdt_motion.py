"""Motion estimation, coding and compensation.

The current and reference features are fused and run through a windowed
self-attention U-net that produces a motion feature.  That feature is coded
with a small convolutional autoencoder; the decoded feature is turned into
per-position sampling offsets plus a per-tap confidence mask, and the
reference is warped by a grouped deformable convolution whose taps follow
those offsets.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .entropy_codec import FactorizedEntropy, quantize

KERNEL_TAPS = 9  # 3x3 sampling grid


def tap_grid(device=None, dtype=torch.float32) -> torch.Tensor:
    """(K, 2) base displacements of the 3x3 taps, (dx, dy) order, row-major."""
    offs = [(float(j - 1), float(i - 1)) for i in range(3) for j in range(3)]
    return torch.tensor(offs, device=device, dtype=dtype)


class MotionField(NamedTuple):
    """offsets: (B, G, K, 2, H, W) in feature-grid pixels, (dx, dy) per tap;
    mask: (B, G, K, H, W) non-negative tap weights."""

    offsets: torch.Tensor
    mask: torch.Tensor


class PairFusion(nn.Module):
    """1x1 convolution reducing the concatenated feature pair back to C channels."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, f_cur: torch.Tensor, f_ref: torch.Tensor) -> torch.Tensor:
        if f_cur.shape != f_ref.shape:
            raise ValueError("feature pair shapes differ")
        return self.proj(torch.cat([f_cur, f_ref], dim=1))


def window_partition(x: torch.Tensor, w: int) -> torch.Tensor:
    """(B, C, H, W) -> (B * num_windows, w*w, C)."""
    b, c, h, wd = x.shape
    x = x.view(b, c, h // w, w, wd // w, w)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(-1, w * w, c)


def window_merge(tokens: torch.Tensor, w: int, shape: tuple[int, int, int, int]) -> torch.Tensor:
    b, c, h, wd = shape
    x = tokens.view(b, h // w, wd // w, w, w, c)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(b, c, h, wd)


def relative_index(w: int, w_max: int) -> torch.Tensor:
    """(w*w, w*w) lookup into a (2*w_max-1)**2 relative-position bias table."""
    coords = torch.stack(torch.meshgrid(torch.arange(w), torch.arange(w), indexing="ij"))
    flat = coords.flatten(1)                                   # (2, w*w)
    rel = flat[:, :, None] - flat[:, None, :]                  # (2, N, N) in (-w, w)
    rel = rel + (w_max - 1)
    return rel[0] * (2 * w_max - 1) + rel[1]


class WindowAttention(nn.Module):
    """Multi-head self-attention inside non-overlapping windows.

    A learned absolute within-window embedding is added to the input before
    normalization and the Q/K/V projection; a relative-position bias is added
    to the attention logits.
    """

    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.dim = dim
        self.heads = heads
        self.window = window
        self.scale = (dim // heads) ** -0.5
        self.pos_embed = nn.Parameter(torch.zeros(window * window, dim))
        self.rel_bias = nn.Parameter(torch.zeros(heads, (2 * window - 1) ** 2))
        self.register_buffer("rel_index", relative_index(window, window), persistent=False)
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.rel_bias, std=0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, wd = x.shape
        w = self.window
        if h % w or wd % w:
            raise ValueError(f"spatial dims {h}x{wd} not divisible by window {w}")
        tokens = window_partition(x, w) + self.pos_embed
        nw, n, _ = tokens.shape
        qkv = self.qkv(self.norm(tokens)).view(nw, n, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)         # (nw, heads, n, d)
        logits = q @ k.transpose(-2, -1) * self.scale
        logits = logits + self.rel_bias[:, self.rel_index].unsqueeze(0)
        attn = torch.softmax(logits, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(nw, n, c)
        return window_merge(self.proj(out), w, x.shape)


class LeWinBlock(nn.Module):
    """Windowed attention followed by a depthwise-convolution feed-forward
    branch; both branches are residual."""

    def __init__(self, dim: int, heads: int, window: int, ffn_ratio: int = 4):
        super().__init__()
        hidden = dim * ffn_ratio
        self.attn = WindowAttention(dim, heads, window)
        self.norm = nn.LayerNorm(dim)
        self.ff_in = nn.Conv2d(dim, hidden, 1)
        self.dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.ff_out = nn.Conv2d(hidden, dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(x)
        y = self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        y = self.ff_out(F.gelu(self.dw(F.gelu(self.ff_in(y)))))
        return x + y


class MotionUformer(nn.Module):
    """3-scale U-shaped stack of LeWin blocks (two stride-2 stages, mirrored
    upsampling, skip concatenation, 2 blocks per scale)."""

    def __init__(self, in_channels: int, out_channels: int, dims: tuple[int, int, int],
                 heads: int, window: int, ffn_ratio: int = 4):
        super().__init__()
        d0, d1, d2 = dims

        def blocks(dim):
            return nn.Sequential(LeWinBlock(dim, heads, window, ffn_ratio),
                                 LeWinBlock(dim, heads, window, ffn_ratio))

        self.inp = nn.Conv2d(in_channels, d0, 3, padding=1)
        self.enc0 = blocks(d0)
        self.down0 = nn.Conv2d(d0, d1, 4, stride=2, padding=1)
        self.enc1 = blocks(d1)
        self.down1 = nn.Conv2d(d1, d2, 4, stride=2, padding=1)
        self.mid = blocks(d2)
        self.up1 = nn.ConvTranspose2d(d2, d1, 2, stride=2)
        self.fuse1 = nn.Conv2d(2 * d1, d1, 1)
        self.dec1 = blocks(d1)
        self.up0 = nn.ConvTranspose2d(d1, d0, 2, stride=2)
        self.fuse0 = nn.Conv2d(2 * d0, d0, 1)
        self.dec0 = blocks(d0)
        self.out = nn.Conv2d(d0, out_channels, 3, padding=1)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        e0 = self.enc0(self.inp(fused))
        e1 = self.enc1(self.down0(e0))
        m = self.mid(self.down1(e1))
        d1 = self.dec1(self.fuse1(torch.cat([self.up1(m), e1], dim=1)))
        d0 = self.dec0(self.fuse0(torch.cat([self.up0(d1), e0], dim=1)))
        return self.out(d0)


class CnnMotionEstimator(nn.Module):
    """Plain convolutional offset-feature estimator (ablation stand-in)."""

    def __init__(self, in_channels: int, out_channels: int, width: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(width, out_channels, 3, padding=1),
        )

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        return self.net(fused)


class MotionHead(nn.Module):
    """1x1 convolution emitting per-group tap offsets and mask logits.

    Zero-initialized; the offset bias cancels the base 3x3 grid so that the
    initial compensation samples every tap at the centre position (an identity
    warp when the tap weights start as identity).
    """

    def __init__(self, in_channels: int, groups: int, mask_mode: str = "softmax"):
        super().__init__()
        self.groups = groups
        self.mask_mode = mask_mode
        self.head = nn.Conv2d(in_channels, groups * KERNEL_TAPS * 3, 1)
        nn.init.zeros_(self.head.weight)
        with torch.no_grad():
            bias = self.head.bias.view(groups, KERNEL_TAPS, 3)
            bias.zero_()
            bias[:, :, :2] = -tap_grid()

    def forward(self, x: torch.Tensor) -> MotionField:
        b, _, h, w = x.shape
        raw = self.head(x).view(b, self.groups, KERNEL_TAPS, 3, h, w)
        offsets = raw[:, :, :, :2]
        logits = raw[:, :, :, 2]
        if self.mask_mode == "softmax":
            mask = torch.softmax(logits, dim=2)
        else:
            mask = torch.sigmoid(logits)
        return MotionField(offsets=offsets, mask=mask)


class DeformableCompensation(nn.Module):
    """Grouped 3x3 deformable warp with non-shared per-tap mixing weights.

    Initialized so every tap applies the identity mixing; combined with the
    zero-initialized head this makes the whole compensation start at identity.
    """

    def __init__(self, channels: int, groups: int):
        super().__init__()
        if channels % groups:
            raise ValueError("channels must be divisible by groups")
        cg = channels // groups
        weight = torch.eye(cg).expand(groups, KERNEL_TAPS, cg, cg).contiguous()
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(torch.zeros(channels))
        self.groups = groups

    def forward(self, f_ref: torch.Tensor, mv: MotionField) -> torch.Tensor:
        return deformable_compensate(f_ref, mv, self.weight, self.bias)


def deformable_compensate(f_ref: torch.Tensor, mv: MotionField,
                          weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Sample 9 bilinear taps per group (base 3x3 grid plus offsets, border
    clamped), scale by the mask and mix with per-tap weights."""
    offsets, mask = mv
    if not torch.isfinite(offsets).all():
        raise ValueError("non-finite motion offsets")
    b, c, h, w = f_ref.shape
    g, k, cg = weight.shape[0], weight.shape[1], weight.shape[2]
    if offsets.shape != (b, g, k, 2, h, w) or mask.shape != (b, g, k, h, w):
        raise ValueError("motion field shape inconsistent with reference feature")
    if c != g * cg:
        raise ValueError("weight shape inconsistent with channels/groups")

    base = tap_grid(f_ref.device, f_ref.dtype).view(1, 1, k, 2, 1, 1)
    gy = torch.arange(h, device=f_ref.device, dtype=f_ref.dtype).view(1, 1, 1, h, 1)
    gx = torch.arange(w, device=f_ref.device, dtype=f_ref.dtype).view(1, 1, 1, 1, w)
    px = gx + base[:, :, :, 0] + offsets[:, :, :, 0]           # (B, G, K, H, W)
    py = gy + base[:, :, :, 1] + offsets[:, :, :, 1]

    x0 = px.floor()
    y0 = py.floor()
    wx = px - x0
    wy = py - y0
    x0l = x0.long().clamp(0, w - 1)
    x1l = (x0.long() + 1).clamp(0, w - 1)
    y0l = y0.long().clamp(0, h - 1)
    y1l = (y0.long() + 1).clamp(0, h - 1)

    ref = f_ref.view(b, g, cg, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).view(b, g, 1, k * h * w).expand(b, g, cg, k * h * w)
        return ref.gather(3, idx).view(b, g, cg, k, h, w)

    v00 = gather(y0l, x0l)
    v01 = gather(y0l, x1l)
    v10 = gather(y1l, x0l)
    v11 = gather(y1l, x1l)
    wx = wx.unsqueeze(2)
    wy = wy.unsqueeze(2)
    samp = (v00 * (1 - wx) * (1 - wy) + v01 * wx * (1 - wy)
            + v10 * (1 - wx) * wy + v11 * wx * wy)             # (B, G, cg, K, H, W)
    samp = samp * mask.unsqueeze(2)
    out = torch.einsum("bgckhw,gkoc->bgohw", samp, weight).reshape(b, c, h, w)
    if bias is not None:
        out = out + bias.view(1, c, 1, 1)
    return out


class MotionCodec(nn.Module):
    """Convolutional autoencoder (two stride-2 stages each way) with a
    factorized entropy model for the motion feature."""

    def __init__(self, feature_channels: int, latent_channels: int):
        super().__init__()
        self.enc = nn.Sequential(
            nn.Conv2d(feature_channels, latent_channels, 5, stride=2, padding=2),
            nn.LeakyReLU(inplace=True),
            nn.Conv2d(latent_channels, latent_channels, 5, stride=2, padding=2),
        )
        self.dec = nn.Sequential(
            nn.ConvTranspose2d(latent_channels, latent_channels, 5, stride=2, padding=2, output_padding=1),
            nn.LeakyReLU(inplace=True),
            nn.ConvTranspose2d(latent_channels, feature_channels, 5, stride=2, padding=2, output_padding=1),
        )
        self.model = FactorizedEntropy(latent_channels)

    def encode(self, motion_feature: torch.Tensor, mode: str) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns the (noisy or integer) quantized latent and its bit estimate."""
        q = quantize(self.enc(motion_feature), mode)
        return q, self.model.bits(q)

    def decode_feature(self, q: torch.Tensor) -> torch.Tensor:
        return self.dec(q)
