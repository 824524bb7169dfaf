"""Multi-reference prediction refinement.

Up to three previously decoded features are aligned to the coarse prediction
without spending any bits (the alignment inputs exist on both sides), then
fused through channel and spatial attention.  The fused prediction is added
on top of the coarse one, so a silent fusion branch degrades gracefully to
the coarse prediction.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .rdt_motion import (CnnMotionEstimator, DeformableCompensation, MotionHead,
                         MotionUformer, PairFusion)


class ReferenceBuffer:
    """Decoded reference features, newest first, bounded capacity."""

    def __init__(self, capacity: int = 3):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._entries: list[torch.Tensor] = []

    def push(self, feature: torch.Tensor):
        self._entries.insert(0, feature)
        del self._entries[self.capacity:]

    def entries(self) -> list[torch.Tensor]:
        return list(self._entries)

    def reset(self):
        self._entries.clear()

    def __len__(self) -> int:
        return len(self._entries)


def pad_references(buf) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Expand a (possibly short) newest-first reference list to exactly three
    entries by duplicating the oldest available feature into the missing
    older slots: [A] -> (A, A, A); [A, B] -> (A, B, B)."""
    entries = buf.entries() if isinstance(buf, ReferenceBuffer) else list(buf)
    if not entries:
        raise ValueError("reference buffer is empty; an intra frame must be decoded first")
    entries = entries[:3]
    while len(entries) < 3:
        entries.append(entries[-1])
    return tuple(entries)


class UncodedAligner(nn.Module):
    """Motion path reused for bit-free alignment of references to the coarse
    prediction: fuse, estimate, emit offsets/mask directly, compensate.
    Separate parameters from the coded motion path; shared across references.
    """

    def __init__(self, channels: int, dims: tuple[int, int, int], heads: int,
                 window: int, ffn_ratio: int, mask_mode: str, use_transformer: bool = True):
        super().__init__()
        self.fusion = PairFusion(channels)
        if use_transformer:
            self.estimator = MotionUformer(channels, channels, dims, heads, window, ffn_ratio)
        else:
            self.estimator = CnnMotionEstimator(channels, channels, dims[0])
        self.head = MotionHead(channels, heads, mask_mode)
        self.compensation = DeformableCompensation(channels, heads)

    def forward(self, coarse: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
        if coarse.shape != ref.shape:
            raise ValueError("aligner inputs must share a shape")
        mv = self.head(self.estimator(self.fusion(coarse, ref)))
        return self.compensation(ref, mv)


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.mlp = nn.Sequential(
            nn.Linear(channels, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, channels)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        avg = x.mean(dim=(2, 3))
        peak = x.amax(dim=(2, 3))
        gate = torch.sigmoid(self.mlp(avg) + self.mlp(peak))
        return gate[:, :, None, None]


class SpatialAttention(nn.Module):
    def __init__(self, kernel: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel, padding=kernel // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        stats = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(stats))


class PredictionFuser(nn.Module):
    """Channel attention over the concatenated predictions, 1x1 reduction,
    spatial attention, then a skip add of the coarse prediction."""

    def __init__(self, channels: int):
        super().__init__()
        self.channel_attn = ChannelAttention(4 * channels)
        self.reduce = nn.Conv2d(4 * channels, channels, 1)
        self.spatial_attn = SpatialAttention()

    def forward(self, coarse: torch.Tensor, aligned: list[torch.Tensor]) -> torch.Tensor:
        if len(aligned) != 3:
            raise ValueError("expected exactly 3 aligned references")
        cat = torch.cat([coarse] + list(aligned), dim=1)
        cat = self.channel_attn(cat) * cat
        conv = F.relu(self.reduce(cat))
        return coarse + self.spatial_attn(conv) * conv


def compute_residual(f_cur: torch.Tensor, f_pred: torch.Tensor) -> torch.Tensor:
    if f_cur.shape != f_pred.shape:
        raise ValueError("feature shapes differ")
    return f_cur - f_pred
