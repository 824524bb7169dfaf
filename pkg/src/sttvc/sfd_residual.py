"""Residual compression with a prediction-similarity prior.

The residual feature is tokenized into 2x2 patches and compressed by a
4-stage windowed-attention encoder (depths 2,2,6,2, patch merging between
stages); the decoder mirrors it.  At every attention layer the logits receive
an extra similarity term computed from the fused prediction feature, embedded
with the same linear maps as the residual tokens, plus a learnable per-head
modulator.  Both sides derive identical priors from the shared decoded
prediction, so the term costs no bits.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .rdt_motion import relative_index


def level_window(hg: int, wg: int, max_window: int) -> int:
    """Largest power-of-two window <= max_window dividing both grid dims."""
    w = max_window
    while w > 1 and (hg % w or wg % w):
        w //= 2
    return w


def default_heads(dim: int) -> int:
    return min(8, max(2, dim // 8))


class PatchEmbed(nn.Module):
    """2x2 patches -> linear embedding; shared by residual and prior tokens."""

    def __init__(self, channels: int, dim: int):
        super().__init__()
        self.proj = nn.Linear(4 * channels, dim)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        b, c, h, w = feature.shape
        if h % 2 or w % 2:
            raise ValueError("feature dims must be even for 2x2 patching")
        x = feature.view(b, c, h // 2, 2, w // 2, 2)
        x = x.permute(0, 2, 4, 3, 5, 1).reshape(b, h // 2, w // 2, 4 * c)
        return self.proj(x)


class PatchMerge(nn.Module):
    """2x2 token grouping: half the grid, renormalize, project channels."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * in_dim)
        self.reduce = nn.Linear(4 * in_dim, out_dim)

    @staticmethod
    def group(x: torch.Tensor) -> torch.Tensor:
        b, h, w, d = x.shape
        if h % 2 or w % 2:
            raise ValueError("token grid dims must be even")
        x = x.view(b, h // 2, 2, w // 2, 2, d)
        return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h // 2, w // 2, 4 * d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.reduce(self.norm(self.group(x)))


class PatchSplit(nn.Module):
    """Inverse of PatchMerge: each token expands into a 2x2 block."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(in_dim)
        self.expand = nn.Linear(in_dim, 4 * out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, _ = x.shape
        y = self.expand(self.norm(x)).view(b, h, w, 2, 2, -1)
        return y.permute(0, 1, 3, 2, 4, 5).reshape(b, 2 * h, 2 * w, y.shape[-1])


class PriorReduce(nn.Module):
    """Per-level prior downsampling: 2x2 reshape, channel-reducing linear, LN."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.proj = nn.Linear(4 * in_dim, out_dim)
        self.norm = nn.LayerNorm(out_dim)

    def forward(self, prior: torch.Tensor) -> torch.Tensor:
        if prior.shape[1] % 2 or prior.shape[2] % 2:
            raise ValueError("prior grid dims must be even")
        return self.norm(self.proj(PatchMerge.group(prior)))


class PriorPyramid(nn.Module):
    """Prediction-feature tokens at every stage resolution.

    Level 0 uses the same patch embedding as the residual tokens; deeper
    levels are produced by the per-level reductions.  Pure function of the
    prediction, so encoder and decoder priors match exactly.
    """

    def __init__(self, embed: PatchEmbed, dims: tuple[int, ...]):
        super().__init__()
        self.embed = embed
        self.reducers = nn.ModuleList(
            PriorReduce(dims[i], dims[i + 1]) for i in range(len(dims) - 1)
        )

    def forward(self, pred: torch.Tensor) -> list[torch.Tensor]:
        levels = [self.embed(pred)]
        for red in self.reducers:
            levels.append(red(levels[-1]))
        return levels


def _partition(x: torch.Tensor, w: int) -> torch.Tensor:
    b, h, wd, d = x.shape
    x = x.view(b, h // w, w, wd // w, w, d)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, w * w, d)


def _merge(tokens: torch.Tensor, w: int, shape) -> torch.Tensor:
    b, h, wd, d = shape
    x = tokens.view(b, h // w, wd // w, w, w, d)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, wd, d)


class SfdAttention(nn.Module):
    """Windowed multi-head attention whose logits add a prediction-similarity
    term: softmax(Q K^T / sqrt(d) + rel_bias + Qp Kp^T + mod) V.

    The prior queries/keys reuse this layer's Q/K weights (no bias), so a zero
    prior contributes exactly nothing.  `mod` is a per-head scalar, zero-init.
    """

    def __init__(self, dim: int, heads: int, max_window: int = 8):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.dim = dim
        self.heads = heads
        self.max_window = max_window
        self.scale = (dim // heads) ** -0.5
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.rel_bias = nn.Parameter(torch.zeros(heads, (2 * max_window - 1) ** 2))
        self.mod = nn.Parameter(torch.zeros(heads))
        nn.init.trunc_normal_(self.rel_bias, std=0.02)

    def forward(self, x: torch.Tensor, prior: torch.Tensor | None = None) -> torch.Tensor:
        b, hg, wg, d = x.shape
        if prior is not None and prior.shape[:3] != x.shape[:3]:
            raise ValueError("prior token grid does not match residual token grid")
        w = level_window(hg, wg, self.max_window)
        n = w * w
        h = self.heads
        tokens = _partition(self.norm(x), w)
        nw = tokens.shape[0]
        qkv = self.qkv(tokens).view(nw, n, 3, h, d // h)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        logits = q @ k.transpose(-2, -1) * self.scale
        idx = relative_index(w, self.max_window).to(x.device)
        logits = logits + self.rel_bias[:, idx].unsqueeze(0)
        if prior is not None:
            pw = _partition(prior, w)
            wq, wk = self.qkv.weight[:d], self.qkv.weight[d:2 * d]
            qp = F.linear(pw, wq).view(nw, n, h, d // h).transpose(1, 2)
            kp = F.linear(pw, wk).view(nw, n, h, d // h).transpose(1, 2)
            logits = logits + qp @ kp.transpose(-2, -1) + self.mod.view(1, h, 1, 1)
        attn = torch.softmax(logits, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(nw, n, d)
        return _merge(self.proj(out), w, x.shape)


class SfdBlock(nn.Module):
    def __init__(self, dim: int, heads: int, window: int, mlp_ratio: int = 4):
        super().__init__()
        self.attn = SfdAttention(dim, heads, window)
        self.norm = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim)
        )

    def forward(self, x: torch.Tensor, prior: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attn(x, prior)
        return x + self.mlp(self.norm(x))


class ResidualEncoder(nn.Module):
    """4 stages of prior-conditioned blocks with patch merging between them."""

    def __init__(self, embed: PatchEmbed, dims: tuple[int, ...], depths: tuple[int, ...], window: int):
        super().__init__()
        self.embed = embed
        self.stages = nn.ModuleList(
            nn.ModuleList(SfdBlock(dims[i], default_heads(dims[i]), window) for _ in range(depths[i]))
            for i in range(4)
        )
        self.merges = nn.ModuleList(PatchMerge(dims[i], dims[i + 1]) for i in range(3))

    def forward(self, resi: torch.Tensor, priors: list[torch.Tensor] | None) -> torch.Tensor:
        x = self.embed(resi)
        for lvl, stage in enumerate(self.stages):
            p = priors[lvl] if priors is not None else None
            for blk in stage:
                x = blk(x, p)
            if lvl < 3:
                x = self.merges[lvl](x)
        return x.permute(0, 3, 1, 2)                           # (B, C_r, H/32, W/32)


class ResidualDecoder(nn.Module):
    """Mirrored stages (2,6,2,2) with patch splitting, ending in an unembed
    back to the residual feature resolution."""

    def __init__(self, channels: int, dims: tuple[int, ...], depths: tuple[int, ...], window: int):
        super().__init__()
        rev_depth = tuple(reversed(depths))
        self.stages = nn.ModuleList(
            nn.ModuleList(SfdBlock(dims[3 - i], default_heads(dims[3 - i]), window) for _ in range(rev_depth[i]))
            for i in range(4)
        )
        self.splits = nn.ModuleList(PatchSplit(dims[3 - i], dims[2 - i]) for i in range(3))
        self.unembed = nn.Linear(dims[0], 4 * channels)
        self.channels = channels

    def forward(self, latent: torch.Tensor, priors: list[torch.Tensor] | None) -> torch.Tensor:
        x = latent.permute(0, 2, 3, 1)
        for i, stage in enumerate(self.stages):
            p = priors[3 - i] if priors is not None else None
            for blk in stage:
                x = blk(x, p)
            if i < 3:
                x = self.splits[i](x)
        b, hg, wg, _ = x.shape
        y = self.unembed(x).view(b, hg, wg, 2, 2, self.channels)
        return y.permute(0, 5, 1, 3, 2, 4).reshape(b, self.channels, 2 * hg, 2 * wg)


def add_prediction(resi_hat: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    if resi_hat.shape != pred.shape:
        raise ValueError("shapes differ")
    return resi_hat + pred
