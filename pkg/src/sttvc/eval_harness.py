"""Quality metrics, GOP-structured codec evaluation and BD-rate.

Rates are byte-accurate: the numerator is the bitstream container size in
bits, never a model estimate.
"""

from __future__ import annotations

import csv
import math
import shlex
import subprocess
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

PSNR_CAP = 100.0

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) over RGB in [0,1], capped at 100 dB."""
    if a.shape != b.shape:
        raise ValueError("frame shapes differ")
    err = np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2)
    if err <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / err))


def _gaussian_window(size: int, sigma: float, dtype) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - size // 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    return (g / g.sum()).view(1, 1, 1, size)


def _blur(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    w = win.expand(c, 1, 1, win.shape[-1])
    x = F.conv2d(x, w, groups=c)
    return F.conv2d(x, w.transpose(2, 3), groups=c)


def ms_ssim_torch(a: torch.Tensor, b: torch.Tensor, win_size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """5-scale structural similarity on (N,3,H,W) tensors in [0,1].

    The window shrinks (keeping it odd) when the last scale would be smaller
    than the window, so small test frames remain measurable.
    """
    if a.shape != b.shape:
        raise ValueError("shapes differ")
    levels = len(MSSSIM_WEIGHTS)
    smallest = min(a.shape[-2], a.shape[-1]) >> (levels - 1)
    win = min(win_size, smallest if smallest % 2 else smallest - 1)
    if win < 3:
        raise ValueError("frames too small for the 5-scale computation")
    k1, k2 = 0.01, 0.03
    c1, c2 = k1**2, k2**2
    window = _gaussian_window(win, sigma, a.dtype).to(a.device)
    weights = torch.tensor(MSSSIM_WEIGHTS, dtype=a.dtype, device=a.device)

    values = []
    x, y = a, b
    for lvl in range(levels):
        mu_x, mu_y = _blur(x, window), _blur(y, window)
        sxx = _blur(x * x, window) - mu_x * mu_x
        syy = _blur(y * y, window) - mu_y * mu_y
        sxy = _blur(x * y, window) - mu_x * mu_y
        cs = (2 * sxy + c2) / (sxx + syy + c2)
        if lvl == levels - 1:
            lum = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
            values.append((lum * cs).mean())
        else:
            values.append(cs.mean())
            pad = (x.shape[-2] % 2, x.shape[-1] % 2)
            x = F.avg_pool2d(x, 2, padding=pad)
            y = F.avg_pool2d(y, 2, padding=pad)
    stack = torch.stack(values).clamp_min(1e-8)
    return torch.prod(stack ** weights)


def ms_ssim(a: np.ndarray, b: np.ndarray) -> float:
    ta = torch.from_numpy(np.ascontiguousarray(a, np.float64)).permute(2, 0, 1).unsqueeze(0)
    tb = torch.from_numpy(np.ascontiguousarray(b, np.float64)).permute(2, 0, 1).unsqueeze(0)
    return float(ms_ssim_torch(ta, tb))


# ---------------------------------------------------------------------------
# RD curves and BD-rate


@dataclass(frozen=True)
class RDPoint:
    rate: float      # bits per pixel
    quality: float   # PSNR dB or MS-SSIM

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("rate must be positive")
        if not math.isfinite(self.quality):
            raise ValueError("quality must be finite")


@dataclass(frozen=True)
class RDCurve:
    points: tuple[RDPoint, ...]

    def __post_init__(self):
        pts = tuple(sorted(self.points, key=lambda p: p.rate))
        if any(b.rate <= a.rate for a, b in zip(pts, pts[1:])):
            raise ValueError("rates must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.rate for p in self.points])

    @property
    def qualities(self) -> np.ndarray:
        return np.array([p.quality for p in self.points])


def bd_rate(test: RDCurve, anchor: RDCurve) -> float:
    """Average rate difference of `test` against `anchor` in percent
    (negative = test needs fewer bits at equal quality).

    Cubic fit of log-rate against quality, integrated over the overlapping
    quality interval.
    """
    if len(test.points) < 4 or len(anchor.points) < 4:
        raise ValueError("BD-rate needs at least 4 points per curve")
    lo = max(test.qualities.min(), anchor.qualities.min())
    hi = min(test.qualities.max(), anchor.qualities.max())
    if hi <= lo:
        raise ValueError("quality ranges do not overlap")
    pt = np.polyfit(test.qualities, np.log(test.rates), 3)
    pa = np.polyfit(anchor.qualities, np.log(anchor.rates), 3)
    it = np.polyval(np.polyint(pt), hi) - np.polyval(np.polyint(pt), lo)
    ia = np.polyval(np.polyint(pa), hi) - np.polyval(np.polyint(pa), lo)
    return float((math.exp((it - ia) / (hi - lo)) - 1.0) * 100.0)


# ---------------------------------------------------------------------------
# Intra-frame plugins


class VerbatimIntra:
    """Stores frames as raw 8-bit RGB: lossless for 8-bit sources, used to
    isolate the inter-frame machinery."""

    name = "verbatim"

    def encode(self, frame: np.ndarray) -> bytes:
        return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8).tobytes()

    def decode(self, payload: bytes, hw: tuple[int, int]) -> np.ndarray:
        h, w = hw
        arr = np.frombuffer(payload, dtype=np.uint8)
        if arr.size != h * w * 3:
            raise ValueError("intra payload size mismatch")
        return arr.reshape(h, w, 3).astype(np.float32) / 255.0


class ExternalIntra:
    """Shell-out contract to any image codec CLI.

    `encode_cmd` and `decode_cmd` are command templates with {inp} and {out}
    placeholders; encoding converts a PNG to the codec's format and decoding
    converts it back to a PNG.
    """

    name = "external"

    def __init__(self, encode_cmd: str, decode_cmd: str):
        self.encode_cmd = encode_cmd
        self.decode_cmd = decode_cmd

    @staticmethod
    def _run(template: str, inp: Path, out: Path):
        cmd = [part.format(inp=str(inp), out=str(out)) for part in shlex.split(template)]
        proc = subprocess.run(cmd, capture_output=True)
        if proc.returncode != 0 or not out.exists():
            raise RuntimeError(f"intra codec command failed: {' '.join(cmd)}: {proc.stderr.decode(errors='replace')}")

    def encode(self, frame: np.ndarray) -> bytes:
        from PIL import Image

        with tempfile.TemporaryDirectory() as td:
            inp = Path(td) / "frame.png"
            out = Path(td) / "frame.bin"
            Image.fromarray(np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8)).save(inp)
            self._run(self.encode_cmd, inp, out)
            return out.read_bytes()

    def decode(self, payload: bytes, hw: tuple[int, int]) -> np.ndarray:
        from PIL import Image

        with tempfile.TemporaryDirectory() as td:
            inp = Path(td) / "frame.bin"
            out = Path(td) / "frame.png"
            inp.write_bytes(payload)
            self._run(self.decode_cmd, inp, out)
            arr = np.asarray(Image.open(out).convert("RGB"), dtype=np.float32) / 255.0
        if arr.shape[:2] != hw:
            raise ValueError("external intra codec returned wrong frame size")
        return arr


# ---------------------------------------------------------------------------
# Codec evaluation


def run_codec_eval(frames: np.ndarray, checkpoints, intra=None, intra_period: int = 32,
                   max_frames: int = 96, refs: int = 3, out_dir=None,
                   sequence_name: str = "seq", plot: bool = False):
    """Code a sequence with every checkpoint and assemble the RD curve.

    `checkpoints` maps lambda -> checkpoint source (path or state dict).
    Returns (curve_points, per_lambda_records); CSVs are written to out_dir.
    """
    from .cli_bitstream import encode_sequence
    from .training import load_checkpoint

    intra = intra or VerbatimIntra()
    if len(frames) < max_frames:
        warnings.warn(f"sequence has {len(frames)} frames, fewer than the requested {max_frames}")
    frames = frames[:max_frames]
    h, w = frames.shape[1:3]

    points = []
    per_lambda = {}
    for lam, source in sorted(checkpoints.items()):
        model, meta = load_checkpoint(source)
        blob, recons, records = encode_sequence(frames, model, float(meta["lambda"]),
                                                intra, intra_period=intra_period, refs=refs)
        for rec, recon, orig in zip(records, recons, frames):
            rec["psnr"] = psnr(orig, recon)
            rec["msssim"] = ms_ssim(orig, recon)
        rate = len(blob) * 8.0 / (len(frames) * h * w)
        quality = float(np.mean([r["psnr"] for r in records]))
        points.append(RDPoint(rate=rate, quality=quality))
        per_lambda[lam] = {
            "records": records,
            "rate_bpp": rate,
            "psnr": quality,
            "msssim": float(np.mean([r["msssim"] for r in records])),
            "container_bytes": len(blob),
        }

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for lam, entry in per_lambda.items():
            with open(out / f"{sequence_name}_lambda{int(lam)}_frames.csv", "w", newline="") as fh:
                wr = csv.DictWriter(fh, fieldnames=("sequence", "frame", "type", "bytes", "psnr", "msssim"))
                wr.writeheader()
                for rec in entry["records"]:
                    wr.writerow({"sequence": sequence_name, **rec})
        with open(out / f"{sequence_name}_curve.csv", "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=("lambda", "bpp", "psnr", "msssim"))
            wr.writeheader()
            for lam, entry in sorted(per_lambda.items()):
                wr.writerow({"lambda": lam, "bpp": entry["rate_bpp"],
                             "psnr": entry["psnr"], "msssim": entry["msssim"]})
        if plot:
            _plot_curve(per_lambda, out / f"{sequence_name}_rd.png", sequence_name)

    return points, per_lambda


def _plot_curve(per_lambda: dict, path: Path, title: str):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    entries = sorted(per_lambda.values(), key=lambda e: e["rate_bpp"])
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot([e["rate_bpp"] for e in entries], [e["psnr"] for e in entries], "o-")
    ax.set_xlabel("bpp")
    ax.set_ylabel("PSNR (dB)")
    ax.set_title(title)
    ax.grid(True, alpha=0.4)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
