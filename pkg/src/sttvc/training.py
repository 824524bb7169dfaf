"""Rate-distortion training loop and checkpoint handling.

The loss is bits-per-pixel (motion + residual) plus lambda times the frame
distortion; for the first warmup epochs an extra lambda-weighted distortion
between the projected prediction and the original accelerates the motion and
refinement paths.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig, TrainConfig, config_hash
from .model import VideoCodec

CHECKPOINT_FORMAT = 1
LOG_FIELDS = ("step", "bpp_mv", "bpp_resi", "distortion", "loss")


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.mean((a - b) ** 2)


def distortion_fn(name: str):
    if name == "mse":
        return mse
    if name == "msssim":
        from .eval_harness import ms_ssim_torch

        return lambda a, b: 1.0 - ms_ssim_torch(a, b)
    raise ValueError(f"unknown distortion {name!r}")


def rd_loss(bpp_mv, bpp_resi, x, x_hat, lam, distortion: str = "mse"):
    """L = R_mv + R_resi + lambda * d(x, x_hat), rates in bits per pixel."""
    return bpp_mv + bpp_resi + lam * distortion_fn(distortion)(x_hat, x)


def warmup_loss(loss, x_mpre, x, lam, distortion: str = "mse"):
    """Adds the prediction-quality term used during the warmup epochs."""
    return loss + lam * distortion_fn(distortion)(x_mpre, x)


# ---------------------------------------------------------------------------
# Checkpoints


def checkpoint_state(model: VideoCodec, lam: float, train_cfg: TrainConfig, step: int) -> dict:
    return {
        "format_version": CHECKPOINT_FORMAT,
        "model_config": model.cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
        "lambda": float(lam),
        "config_hash": config_hash(model.cfg, lam),
        "step": int(step),
        "state_dict": {k: v.clone() for k, v in model.state_dict().items()},
        "rng": {"torch": torch.get_rng_state(), "numpy": np.random.get_state()},
    }


def save_checkpoint(path, model: VideoCodec, lam: float, train_cfg: TrainConfig, step: int):
    torch.save(checkpoint_state(model, lam, train_cfg, step), path)


def load_checkpoint(source) -> tuple[VideoCodec, dict]:
    """Load a checkpoint from a path or a state dict; returns (model, meta)."""
    if isinstance(source, (str, Path)):
        state = torch.load(source, map_location="cpu", weights_only=False)
    elif isinstance(source, (bytes, bytearray)):
        state = torch.load(io.BytesIO(source), map_location="cpu", weights_only=False)
    else:
        state = source
    if state.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {state.get('format_version')!r}")
    cfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v
                         for k, v in state["model_config"].items()})
    expect = config_hash(cfg, state["lambda"])
    if bytes(state["config_hash"]) != expect:
        raise ValueError("checkpoint config hash mismatch")
    model = VideoCodec(cfg)
    model.load_state_dict(state["state_dict"])
    model.eval()
    return model, state


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    model: VideoCodec
    checkpoint: dict
    history: list[dict]
    checkpoint_path: str | None = None


def _as_clip_tensor(clip) -> torch.Tensor:
    """(T, H, W, 3) array -> (T, 3, H, W) float tensor."""
    if isinstance(clip, torch.Tensor):
        t = clip.float()
    else:
        t = torch.from_numpy(np.ascontiguousarray(clip)).float()
    if t.dim() != 4 or t.shape[-1] != 3:
        raise ValueError("clips must be (T, H, W, 3)")
    if t.shape[0] < 2:
        raise ValueError("clips need at least 2 frames")
    return t.permute(0, 3, 1, 2)


def _sample_batch(clips: list[torch.Tensor], cfg: TrainConfig, rng: np.random.Generator) -> torch.Tensor:
    views = []
    batch = min(cfg.batch_size, max(1, len(clips)))
    for _ in range(batch):
        clip = clips[rng.integers(len(clips))]
        t, _, h, w = clip.shape
        if cfg.clip_frames is not None and cfg.clip_frames < t:
            start = int(rng.integers(t - cfg.clip_frames + 1))
            clip = clip[start:start + cfg.clip_frames]
        size = min(cfg.crop, h - h % 64, w - w % 64)
        if size < 64:
            raise ValueError("frames smaller than 64x64 cannot be trained on")
        y0 = int(rng.integers(h - size + 1))
        x0 = int(rng.integers(w - size + 1))
        views.append(clip[:, :, y0:y0 + size, x0:x0 + size])
    return torch.stack(views)


def train_loop(clips, model_cfg: ModelConfig, cfg: TrainConfig, steps: int | None = None,
               out_path=None, log_path=None, model: VideoCodec | None = None,
               quiet: bool = True) -> TrainResult:
    """Train on a set of clips; frame 0 of each clip provides the starting
    reference feature and the remaining frames are coded sequentially."""
    torch.manual_seed(cfg.seed)
    torch.set_flush_denormal(True)
    rng = np.random.default_rng(cfg.seed)
    clip_tensors = [_as_clip_tensor(c) for c in clips]
    if not clip_tensors:
        raise ValueError("no training clips")

    if model is None:
        model = VideoCodec(model_cfg)
    model.train()
    total_steps = steps if steps is not None else cfg.total_steps
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    dist = distortion_fn(cfg.distortion)
    steps_per_epoch = max(1, math.ceil(len(clip_tensors) / min(cfg.batch_size, len(clip_tensors))))

    log_file = open(log_path, "w", newline="") if log_path else None
    writer = None
    if log_file:
        writer = csv.DictWriter(log_file, fieldnames=LOG_FIELDS)
        writer.writeheader()

    history: list[dict] = []
    try:
        for step in range(total_steps):
            lr = cfg.lr if step < 0.8 * total_steps else cfg.lr_final
            for group in opt.param_groups:
                group["lr"] = lr
            batch = _sample_batch(clip_tensors, cfg, rng)
            out = model.forward_clip(batch, mode="train")
            d = torch.stack([dist(f["x_hat"], batch[:, i + 1]) for i, f in enumerate(out["frames"])]).mean()
            loss = out["bpp_mv"] + out["bpp_resi"] + cfg.lam * d
            epoch = step // steps_per_epoch
            if epoch < cfg.warmup_epochs:
                d_pred = torch.stack(
                    [dist(f["x_mpre"], batch[:, i + 1]) for i, f in enumerate(out["frames"])]
                ).mean()
                loss = loss + cfg.lam * d_pred
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at step {step}: bpp_mv={float(out['bpp_mv'])} "
                    f"bpp_resi={float(out['bpp_resi'])} distortion={float(d)}"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()

            row = {
                "step": step,
                "bpp_mv": float(out["bpp_mv"]),
                "bpp_resi": float(out["bpp_resi"]),
                "distortion": float(d),
                "loss": float(loss),
            }
            history.append(row)
            if writer:
                writer.writerow(row)
            if not quiet and step % 50 == 0:
                print(f"step {step}: loss {row['loss']:.4f} bpp {row['bpp_mv'] + row['bpp_resi']:.4f} "
                      f"d {row['distortion']:.6f}", flush=True)
    finally:
        if log_file:
            log_file.close()

    model.eval()
    ckpt = checkpoint_state(model, cfg.lam, cfg, total_steps)
    path_str = None
    if out_path is not None:
        torch.save(ckpt, out_path)
        path_str = str(out_path)
    return TrainResult(model=model, checkpoint=ckpt, history=history, checkpoint_path=path_str)


@torch.no_grad()
def eval_clip(model: VideoCodec, clip, lam: float, distortion: str = "mse") -> dict:
    """Deterministic eval-mode pass over one clip (model bit estimates, no
    byte coding); reports rates, distortions and the RD loss."""
    model.eval()
    batch = _as_clip_tensor(clip).unsqueeze(0)
    out = model.forward_clip(batch, mode="eval")
    dist = distortion_fn(distortion)
    d = torch.stack([dist(f["x_hat"], batch[:, i + 1]) for i, f in enumerate(out["frames"])]).mean()
    d_pred = torch.stack(
        [dist(f["pred_frame"], batch[:, i + 1]) for i, f in enumerate(out["frames"])]
    ).mean()
    return {
        "bpp_mv": float(out["bpp_mv"]),
        "bpp_resi": float(out["bpp_resi"]),
        "bpp": float(out["bpp_mv"] + out["bpp_resi"]),
        "distortion": float(d),
        "pred_distortion": float(d_pred),
        "rd_loss": float(out["bpp_mv"] + out["bpp_resi"] + lam * d),
    }
