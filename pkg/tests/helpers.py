"""Shared test utilities: synthetic clips and finite-difference gradients."""

from __future__ import annotations

import numpy as np
import torch


def make_clip(frames: int = 7, size: int = 64, seed: int = 0, noise: float = 0.015) -> np.ndarray:
    """Synthetic (T, size, size, 3) clip in [0,1], 8-bit quantized: a textured
    drifting background with repetitive structure, a moving patch, and small
    per-frame noise so residual coding has real work to do."""
    rng = np.random.default_rng(seed)
    big = 2 * size
    yy, xx = np.mgrid[0:big, 0:big].astype(np.float64) / size
    chans = []
    for c in range(3):
        phase = 0.7 * c
        base = 0.5 + 0.18 * np.sin(2 * np.pi * (2 * xx + phase)) * np.cos(2 * np.pi * (1.5 * yy - phase))
        base += 0.1 * np.sin(2 * np.pi * (xx + yy) * 4.0 + phase)
        chans.append(base)
    bg = np.stack(chans, axis=-1) + 0.08 * rng.random((big, big, 1))
    patch = rng.random((10, 10, 3)) * 0.8 + 0.1

    clip = np.empty((frames, size, size, 3), dtype=np.float64)
    for t in range(frames):
        ox, oy = 2 * t, t
        frame = bg[oy:oy + size, ox:ox + size].copy()
        py, px = 6 + 3 * t, 8 + 2 * t
        frame[py:py + 10, px:px + 10] = patch
        frame += noise * rng.standard_normal((size, size, 3))
        clip[t] = np.clip(frame, 0.0, 1.0)
    return (np.round(clip * 255.0) / 255.0).astype(np.float32)


def fd_gradcheck(tensors: list[torch.Tensor], loss_fn, n_coords: int = 60,
                 eps: float = 1e-4, seed: int = 0) -> float:
    """Max relative error between autograd and central finite differences of
    `loss_fn()` over sampled coordinates of `tensors` (double precision)."""
    for t in tensors:
        assert t.dtype == torch.float64, "finite differences need double precision"
        t.grad = None
        t.requires_grad_(True)
    loss = loss_fn()
    loss.backward()
    grads = [t.grad.detach().clone() for t in tensors]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_coords):
            ti = int(rng.integers(len(tensors)))
            flat = tensors[ti].view(-1)
            ci = int(rng.integers(flat.numel()))
            orig = float(flat[ci])
            flat[ci] = orig + eps
            up = float(loss_fn())
            flat[ci] = orig - eps
            down = float(loss_fn())
            flat[ci] = orig
            fd = (up - down) / (2 * eps)
            an = float(grads[ti].view(-1)[ci])
            denom = max(abs(an), abs(fd), 1e-6)
            worst = max(worst, abs(fd - an) / denom)
    return worst
