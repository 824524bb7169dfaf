"""Model and training configuration.

A single ModelConfig fully determines the network architecture; its hash is
embedded in checkpoints and bitstream containers so that encoder and decoder
can refuse to run with mismatched weights.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

LAMBDA_SET = (256, 512, 1024, 2048)

# lambda_id byte stored in the container header; 255 = value outside LAMBDA_SET
LAMBDA_ID_CUSTOM = 255


@dataclass(frozen=True)
class ModelConfig:
    # feature domain (half input resolution)
    channels: int = 64                 # C, channels of frame features
    heads: int = 8                     # attention heads == deformable groups
    window: int = 8                    # attention window inside the motion estimator
    # motion estimator (3-scale U: two stride-2 stages)
    uformer_dims: tuple[int, ...] = (64, 128, 256)
    ffn_ratio: int = 4                 # hidden ratio of the conv feed-forward branch
    motion_latent_channels: int = 64   # channels of the coded motion latent
    # residual transformer
    sfd_embed_dim: int = 32            # token dim at the first stage; doubles per merge
    sfd_depths: tuple[int, ...] = (2, 2, 6, 2)
    sfd_window: int = 8
    hyper_channels: int = 64
    # reconstruction enhancement
    nonlocal_downsample: int = 4
    # multi-reference prediction
    max_refs: int = 3
    # mask normalization over the 9 sampling taps: "softmax" (default) or "sigmoid"
    mask_mode: str = "softmax"
    # ablation switches
    ablate_rdt: bool = False           # replace the transformer motion estimator with a plain CNN
    ablate_mgp: bool = False           # skip multi-reference refinement (fused pred = coarse pred)
    ablate_sfd: bool = False           # drop the prediction-similarity term from residual attention

    def __post_init__(self):
        if self.channels % self.heads:
            raise ValueError("channels must be divisible by heads")
        if len(self.uformer_dims) != 3:
            raise ValueError("uformer_dims must list 3 scales")
        if len(self.sfd_depths) != 4:
            raise ValueError("sfd_depths must list 4 stages")
        if self.mask_mode not in ("softmax", "sigmoid"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")

    @property
    def sfd_dims(self) -> tuple[int, ...]:
        d = self.sfd_embed_dim
        return (d, 2 * d, 4 * d, 8 * d)

    @property
    def residual_latent_channels(self) -> int:
        return self.sfd_dims[-1]

    def to_dict(self) -> dict:
        return asdict(self)


def toy_config(**overrides) -> ModelConfig:
    """Small configuration used by the test suite (C=32, 64x64 inputs)."""
    cfg = ModelConfig(
        channels=32,
        heads=8,
        window=8,
        uformer_dims=(32, 32, 32),
        ffn_ratio=2,
        motion_latent_channels=32,
        sfd_embed_dim=16,
        hyper_channels=32,
    )
    return replace(cfg, **overrides) if overrides else cfg


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1024.0                # Lagrange multiplier weighting distortion
    batch_size: int = 8
    crop: int = 256                    # training crop, must be a multiple of 64
    warmup_epochs: int = 15            # epochs with the extra prediction-quality term
    total_steps: int = 200_000
    lr: float = 1e-4
    lr_final: float = 1e-5             # used for the last 20% of steps
    grad_clip: float = 1.0
    seed: int = 0
    distortion: str = "mse"            # "mse" or "msssim" (1 - MS-SSIM)
    clip_frames: int | None = None     # train on a random window of this many frames (None = full clip)

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.crop % 64:
            raise ValueError("crop must be a multiple of 64")
        if self.distortion not in ("mse", "msssim"):
            raise ValueError(f"unknown distortion {self.distortion!r}")

    def lr_at(self, step: int) -> float:
        return self.lr if step < 0.8 * self.total_steps else self.lr_final

    def to_dict(self) -> dict:
        return asdict(self)


def lambda_id(lam: float) -> int:
    for i, v in enumerate(LAMBDA_SET):
        if abs(lam - v) < 1e-9:
            return i
    return LAMBDA_ID_CUSTOM


def config_hash(model_cfg: ModelConfig, lam: float) -> bytes:
    """8-byte digest of the architecture hyperparameters plus lambda."""
    payload = {"model": model_cfg.to_dict(), "lambda": float(lam)}
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).digest()[:8]
