"""Pixel <-> feature transforms and frame ingestion.

Frames are RGB arrays in [0, 1].  All prediction and residual work happens on
half-resolution features, so frames are replicate-padded to multiples of 64
before entering the codec and cropped back after reconstruction.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PAD_MULTIPLE = 64


def to_tensor(frame: np.ndarray) -> torch.Tensor:
    """HxWx3 float array in [0,1] -> (1,3,H,W) float32 tensor."""
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"expected HxWx3 frame, got {frame.shape}")
    return torch.from_numpy(np.ascontiguousarray(frame)).float().permute(2, 0, 1).unsqueeze(0)


def to_frame(x: torch.Tensor) -> np.ndarray:
    """(1,3,H,W) tensor -> HxWx3 float32 array."""
    return x.detach().squeeze(0).permute(1, 2, 0).contiguous().cpu().numpy()


def pad_to_multiple(x: torch.Tensor, multiple: int = PAD_MULTIPLE) -> tuple[torch.Tensor, tuple[int, int]]:
    """Replicate-pad (bottom/right) so H and W are multiples of `multiple`.

    Returns the padded tensor and the original (H, W) for the final crop.
    """
    h, w = x.shape[-2], x.shape[-1]
    ph = (multiple - h % multiple) % multiple
    pw = (multiple - w % multiple) % multiple
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return x, (h, w)


def crop_to(x: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    return x[..., : hw[0], : hw[1]]


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class FeatureExtractor(nn.Module):
    """Stride-2 stem followed by three residual blocks with an outer skip."""

    def __init__(self, channels: int):
        super().__init__()
        self.stem = nn.Conv2d(3, channels, 5, stride=2, padding=2)
        self.blocks = nn.Sequential(ResBlock(channels), ResBlock(channels), ResBlock(channels))

    def forward(self, frame: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(frame).all():
            raise ValueError("non-finite frame")
        if frame.shape[-2] % 2 or frame.shape[-1] % 2:
            raise ValueError("frame dims must be even (codec inputs are padded to multiples of 64)")
        conv = F.relu(self.stem(frame))
        return self.blocks(conv) + conv


class FrameReconstructor(nn.Module):
    """Mirror of the extractor: residual blocks then a stride-2 upsampling head."""

    def __init__(self, channels: int):
        super().__init__()
        self.blocks = nn.Sequential(ResBlock(channels), ResBlock(channels), ResBlock(channels))
        self.head = nn.ConvTranspose2d(channels, 3, 5, stride=2, padding=2, output_padding=1)

    def forward(self, feature: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        x = self.head(self.blocks(feature) + feature)
        return x.clamp(0.0, 1.0) if clamp else x


class ReconstructionEnhancer(nn.Module):
    """Dot-product non-local block mixing the current reconstructed feature
    with up to three reference features, computed on a 4x-downsampled grid.

    The output projection is zero-initialized, so the block starts as (and can
    be forced back to) an identity mapping.
    """

    def __init__(self, channels: int, downsample: int = 4):
        super().__init__()
        inner = channels // 2
        self.downsample = downsample
        self.theta = nn.Conv2d(channels, inner, 1)
        self.phi = nn.Conv2d(channels, inner, 1)
        self.g = nn.Conv2d(channels, inner, 1)
        self.out = nn.Conv2d(inner, channels, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, feature: torch.Tensor, refs: list[torch.Tensor]) -> torch.Tensor:
        if not refs:
            raise ValueError("reference buffer must be non-empty")
        for r in refs:
            if r.shape != feature.shape:
                raise ValueError("reference feature shape mismatch")
        b, c, h, w = feature.shape
        d = self.downsample
        inner = c // 2
        q_in = F.avg_pool2d(feature, d)
        hq, wq = q_in.shape[-2:]
        srcs = torch.stack([feature] + list(refs), dim=1)                  # (B, S, C, H, W)
        s = srcs.shape[1]
        srcs = F.avg_pool2d(srcs.flatten(0, 1), d)
        q = self.theta(q_in).flatten(2).transpose(1, 2)                    # (B, Nq, C/2)
        k = self.phi(srcs).flatten(2).view(b, s, inner, -1).permute(0, 1, 3, 2).reshape(b, -1, inner)
        v = self.g(srcs).flatten(2).view(b, s, inner, -1).permute(0, 1, 3, 2).reshape(b, -1, inner)
        attn = torch.softmax(q @ k.transpose(1, 2) / inner**0.5, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, inner, hq, wq)
        y = F.interpolate(self.out(y), scale_factor=d, mode="nearest")
        return feature + y[..., :h, :w]


# ---------------------------------------------------------------------------
# Ingestion: PNG sequences or raw planar RGB24 files

_IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp"}


def load_frames(path: str | Path, size: tuple[int, int] | None = None, limit: int | None = None) -> np.ndarray:
    """Load a frame sequence as a (T, H, W, 3) float32 array in [0, 1].

    `path` is either a directory of image files (frame index = sorted file
    order) or a raw planar RGB24 file, which requires `size` = (width, height).
    """
    from PIL import Image

    p = Path(path)
    if p.is_dir():
        files = sorted(f for f in p.iterdir() if f.suffix.lower() in _IMAGE_EXTS)
        if not files:
            raise FileNotFoundError(f"no image files in {p}")
        if limit is not None:
            files = files[:limit]
        frames = [np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0 for f in files]
        return np.stack(frames)
    if not p.is_file():
        raise FileNotFoundError(str(p))
    if size is None:
        raise ValueError("raw RGB24 input requires size=(width, height)")
    w, h = size
    plane = w * h
    raw = np.fromfile(p, dtype=np.uint8)
    frame_bytes = plane * 3
    count = len(raw) // frame_bytes
    if count == 0:
        raise ValueError("raw file smaller than one frame")
    if limit is not None:
        count = min(count, limit)
    raw = raw[: count * frame_bytes].reshape(count, 3, h, w)
    return raw.transpose(0, 2, 3, 1).astype(np.float32) / 255.0


def save_frames_png(frames: np.ndarray, out_dir: str | Path, prefix: str = "frame"):
    from PIL import Image

    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    for i, frame in enumerate(frames):
        img = Image.fromarray(np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8))
        img.save(out / f"{prefix}_{i:05d}.png")
