"""Quantization, learned probability models, bit estimation and range coding.

One coder is shared by the motion, residual and hyper streams.  Probability
models produce per-symbol pmfs in float64; for actual coding the pmfs are
frozen to 16-bit fixed-point cumulative tables (total 2**16, every symbol kept
above the 2**-16 floor) so that encoder and decoder derive identical tables
from identical parameters.
"""

from __future__ import annotations

import math
from bisect import bisect_right

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ALPHABET_MIN = -255
ALPHABET_MAX = 255
ALPHABET_SIZE = ALPHABET_MAX - ALPHABET_MIN + 1

CDF_BITS = 16
CDF_TOTAL = 1 << CDF_BITS
PROB_FLOOR = 2.0 ** -CDF_BITS

# log-spaced scales for the conditional Gaussian coder tables
SCALE_MIN = 0.11
SCALE_MAX = 256.0
SCALE_LEVELS = 64


class TruncatedStreamError(ValueError):
    """Raised when a byte stream ends before all symbols are decoded."""


def quantize(x: torch.Tensor, mode: str) -> torch.Tensor:
    """Quantization surrogate: additive uniform noise when training,
    round-half-away-from-zero clamped to the coder alphabet when evaluating."""
    if not torch.isfinite(x).all():
        raise ValueError("non-finite values cannot be quantized")
    if mode == "train":
        noise = torch.empty_like(x).uniform_(-0.5, 0.5)
        return x + noise
    if mode == "eval":
        q = torch.sign(x) * torch.floor(torch.abs(x) + 0.5)
        return q.clamp_(ALPHABET_MIN, ALPHABET_MAX)
    raise ValueError(f"unknown quantize mode {mode!r}")


# ---------------------------------------------------------------------------
# 16-bit CDF tables


def pmf_to_cdf_table(pmf: np.ndarray) -> np.ndarray:
    """Freeze float pmf rows (M, A) to cumulative uint32 tables (M, A+1).

    Every symbol receives at least one count (probability floor 2**-16) and
    each row sums to exactly CDF_TOTAL; the rounding deficit goes to the most
    probable symbol, which keeps the table deterministic.
    """
    p = np.atleast_2d(np.asarray(pmf, dtype=np.float64))
    if p.ndim != 2:
        raise ValueError("pmf must be 1-D or 2-D")
    n_sym = p.shape[1]
    if n_sym + 1 > CDF_TOTAL:
        raise ValueError("alphabet too large for 16-bit tables")
    p = np.maximum(p, 0.0)
    p = p / p.sum(axis=1, keepdims=True)
    counts = np.floor(p * float(CDF_TOTAL - n_sym)).astype(np.int64) + 1
    deficit = CDF_TOTAL - counts.sum(axis=1)
    counts[np.arange(len(counts)), counts.argmax(axis=1)] += deficit
    cdf = np.zeros((len(counts), n_sym + 1), dtype=np.uint32)
    cdf[:, 1:] = np.cumsum(counts, axis=1)
    return cdf


def table_bits(cdf: np.ndarray, row_idx: np.ndarray, symbols: np.ndarray) -> float:
    """Exact code length implied by frozen tables, in bits (without coder overhead)."""
    rows = np.asarray(row_idx, dtype=np.intp)
    sym = np.asarray(symbols, dtype=np.intp)
    freq = cdf[rows, sym + 1].astype(np.int64) - cdf[rows, sym].astype(np.int64)
    return float(-np.log2(freq / CDF_TOTAL).sum())


# ---------------------------------------------------------------------------
# Range coder (carry-aware byte renormalization, 16-bit probability precision)

_TOP = 1 << 24
_MASK32 = (1 << 32) - 1


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            self.out.append((self.cache + carry) & 0xFF)
            if self.cache_size > 1:
                self.out.extend(bytes([(0xFF + carry) & 0xFF]) * (self.cache_size - 1))
            self.cache_size = 0
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & _MASK32

    def encode(self, cum_low: int, cum_high: int):
        """Narrow the interval to [cum_low, cum_high) / 2**16."""
        r = self.range >> CDF_BITS
        self.low += r * cum_low
        self.range = r * (cum_high - cum_low)
        while self.range < _TOP:
            self.range = (self.range << 8) & _MASK32
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        if len(data) < 5:
            raise TruncatedStreamError("stream shorter than coder preamble")
        if data[0] != 0:
            raise ValueError("corrupt stream: bad leading byte")
        self.data = data
        self.pos = 5
        self.range = _MASK32
        self.code = int.from_bytes(data[1:5], "big")
        self._r = 0

    def _next_byte(self) -> int:
        if self.pos >= len(self.data):
            raise TruncatedStreamError("stream exhausted mid-decode")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode_target(self) -> int:
        self._r = self.range >> CDF_BITS
        t = self.code // self._r
        return t if t < CDF_TOTAL else CDF_TOTAL - 1

    def advance(self, cum_low: int, cum_high: int):
        self.code -= cum_low * self._r
        self.range = self._r * (cum_high - cum_low)
        while self.range < _TOP:
            self.code = (self.code << 8) | self._next_byte()
            self.range = (self.range << 8) & _MASK32


def encode_symbols(symbols: np.ndarray, cdf: np.ndarray, row_idx: np.ndarray) -> bytes:
    """Encode symbols[i] using cdf[row_idx[i]]; symbols are table-relative (>= 0)."""
    sym = np.asarray(symbols, dtype=np.intp).ravel()
    if sym.size == 0:
        return b""
    rows = np.asarray(row_idx, dtype=np.intp).ravel()
    if rows.shape != sym.shape:
        raise ValueError("row index / symbol shape mismatch")
    if sym.min() < 0 or sym.max() >= cdf.shape[1] - 1:
        raise ValueError("symbol outside table alphabet")
    lows = cdf[rows, sym].tolist()
    highs = cdf[rows, sym + 1].tolist()
    enc = RangeEncoder()
    encode = enc.encode
    for lo, hi in zip(lows, highs):
        encode(lo, hi)
    return enc.finish()


def decode_symbols(data: bytes, cdf: np.ndarray, row_idx: np.ndarray) -> np.ndarray:
    rows_i = np.asarray(row_idx, dtype=np.intp).ravel()
    n = rows_i.size
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    tables = [row.tolist() for row in cdf.astype(np.int64)]
    dec = RangeDecoder(data)
    out = np.empty(n, dtype=np.int64)
    for i, m in enumerate(rows_i.tolist()):
        row = tables[m]
        t = dec.decode_target()
        s = bisect_right(row, t) - 1
        dec.advance(row[s], row[s + 1])
        out[i] = s
    return out


# ---------------------------------------------------------------------------
# Probability models


def _fold_tails(cdf_hi: np.ndarray, cdf_lo: np.ndarray) -> np.ndarray:
    """Interval pmf with out-of-alphabet mass folded into the edge symbols."""
    pmf = cdf_hi - cdf_lo
    pmf[..., 0] = cdf_hi[..., 0]
    pmf[..., -1] = 1.0 - cdf_lo[..., -1]
    return pmf


class FixedPmfModel:
    """Entropy model with a fixed pmf over [offset, offset + len(pmf)) symbols.

    Used for calibration and for coding streams whose statistics are known.
    Bit estimates come from the frozen 16-bit table, so the probability floor
    holds exactly and estimates match the coder's own model.
    """

    def __init__(self, pmf, offset: int = 0):
        self.pmf = np.asarray(pmf, dtype=np.float64)
        if self.pmf.ndim != 1 or self.pmf.size < 2:
            raise ValueError("pmf must be a 1-D array with >= 2 symbols")
        self.pmf = self.pmf / self.pmf.sum()
        self.offset = int(offset)
        self._cdf = pmf_to_cdf_table(self.pmf[None])

    def bits(self, q) -> float:
        sym = np.asarray(q).ravel().astype(np.int64) - self.offset
        return table_bits(self._cdf, np.zeros(sym.size, dtype=np.intp), sym)

    def coding_plan(self, n: int):
        return self._cdf, np.zeros(n, dtype=np.intp), self.offset


class FactorizedEntropy(nn.Module):
    """Per-channel logistic-mixture CDF; channels are modeled independently."""

    def __init__(self, channels: int, components: int = 3):
        super().__init__()
        self.channels = channels
        self.components = components
        spread = torch.linspace(-2.0, 2.0, components)
        self.means = nn.Parameter(spread.repeat(channels, 1))
        self.log_scales = nn.Parameter(torch.zeros(channels, components))
        self.weight_logits = nn.Parameter(torch.zeros(channels, components))

    def _cdf(self, x: torch.Tensor) -> torch.Tensor:
        # x: (..., C, H, W) -> mixture CDF evaluated elementwise
        c = x.shape[-3]
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        shape = [1] * (x.dim() - 3) + [c, 1, 1, self.components]
        mu = self.means.view(shape)
        s = self.log_scales.exp().clamp_min(1e-3).view(shape)
        w = torch.softmax(self.weight_logits, dim=-1).view(shape)
        z = (x.unsqueeze(-1) - mu) / s
        return (torch.sigmoid(z) * w).sum(dim=-1)

    def likelihood(self, x: torch.Tensor) -> torch.Tensor:
        p = self._cdf(x + 0.5) - self._cdf(x - 0.5)
        return p.clamp_min(PROB_FLOOR)

    def bits(self, x: torch.Tensor) -> torch.Tensor:
        return -torch.log2(self.likelihood(x)).sum()

    @torch.no_grad()
    def channel_pmf(self) -> np.ndarray:
        grid = torch.arange(ALPHABET_MIN, ALPHABET_MAX + 1, dtype=torch.float64)
        x = grid.view(1, 1, -1).repeat(self.channels, 1, 1)  # (C, 1, A) as (C, H=1, W=A)
        dev_self = self.means.dtype
        hi = self._cdf((x + 0.5).to(dev_self)).double().squeeze(1).cpu().numpy()
        lo = self._cdf((x - 0.5).to(dev_self)).double().squeeze(1).cpu().numpy()
        return _fold_tails(hi, lo)

    def coding_plan(self, shape):
        """CDF tables plus per-element row indexes for a latent of `shape` (N,C,H,W)."""
        n, c, h, w = shape
        if c != self.channels:
            raise ValueError("channel mismatch")
        cdf = pmf_to_cdf_table(self.channel_pmf())
        rows = np.broadcast_to(np.arange(c, dtype=np.intp)[None, :, None, None], shape)
        return cdf, rows.ravel(), ALPHABET_MIN


def _std_normal_cdf(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.vectorize(math.erf)(z / math.sqrt(2.0)))


_SCALE_TABLE = np.exp(np.linspace(math.log(SCALE_MIN), math.log(SCALE_MAX), SCALE_LEVELS))
_GAUSS_CDF_CACHE: np.ndarray | None = None


def _gaussian_tables() -> np.ndarray:
    """Frozen zero-mean Gaussian tables, one row per scale level."""
    global _GAUSS_CDF_CACHE
    if _GAUSS_CDF_CACHE is None:
        grid = np.arange(ALPHABET_MIN, ALPHABET_MAX + 1, dtype=np.float64)[None, :]
        sig = _SCALE_TABLE[:, None]
        hi = _std_normal_cdf((grid + 0.5) / sig)
        lo = _std_normal_cdf((grid - 0.5) / sig)
        _GAUSS_CDF_CACHE = pmf_to_cdf_table(_fold_tails(hi, lo))
    return _GAUSS_CDF_CACHE


class GaussianConditional(nn.Module):
    """Mean/scale Gaussian model; coding recentres symbols on round(mean) ... no:
    symbols are round(x - mean) so the coded residual is zero-mean by construction."""

    def likelihood(self, x: torch.Tensor, means: torch.Tensor, scales: torch.Tensor) -> torch.Tensor:
        sig = scales.clamp_min(0.04)
        rt2 = math.sqrt(2.0)
        hi = 0.5 * (1.0 + torch.erf((x - means + 0.5) / (sig * rt2)))
        lo = 0.5 * (1.0 + torch.erf((x - means - 0.5) / (sig * rt2)))
        return (hi - lo).clamp_min(PROB_FLOOR)

    def bits(self, x: torch.Tensor, means: torch.Tensor, scales: torch.Tensor) -> torch.Tensor:
        return -torch.log2(self.likelihood(x, means, scales)).sum()

    @staticmethod
    def scale_indexes(scales: torch.Tensor) -> np.ndarray:
        sig = scales.detach().double().cpu().numpy().ravel().clip(SCALE_MIN, SCALE_MAX)
        log_table = np.log(_SCALE_TABLE)
        mids = (log_table[1:] + log_table[:-1]) / 2.0
        return np.searchsorted(mids, np.log(sig)).astype(np.intp)

    @staticmethod
    def quantize_centered(x: torch.Tensor, means: torch.Tensor, mode: str) -> torch.Tensor:
        """Quantize x - mean; eval reconstruction is symbols + mean."""
        return quantize(x - means, mode)

    def coding_plan(self, scales: torch.Tensor):
        return _gaussian_tables(), self.scale_indexes(scales), ALPHABET_MIN

    def frozen_bits(self, symbols: torch.Tensor, scales: torch.Tensor) -> float:
        cdf, rows, off = self.coding_plan(scales)
        sym = symbols.detach().long().cpu().numpy().ravel() - off
        return table_bits(cdf, rows, sym)


def bit_estimate(q, model, **ctx):
    """-sum log2 P(q) under `model`; torch models stay differentiable."""
    return model.bits(q, **ctx)


def range_encode(q, model, **ctx) -> bytes:
    """Losslessly encode an integer latent under `model`'s frozen tables."""
    if isinstance(q, torch.Tensor):
        arr = q.detach().long().cpu().numpy()
    else:
        arr = np.asarray(q, dtype=np.int64)
    if isinstance(model, FactorizedEntropy):
        cdf, rows, off = model.coding_plan(arr.shape)
    elif isinstance(model, GaussianConditional):
        cdf, rows, off = model.coding_plan(ctx["scales"])
    else:
        cdf, rows, off = model.coding_plan(arr.size)
    return encode_symbols(arr.ravel() - off, cdf, rows)


def range_decode(data: bytes, model, shape, **ctx) -> np.ndarray:
    """Inverse of range_encode; `shape` restores the latent layout."""
    n = int(np.prod(shape))
    if n == 0:
        return np.zeros(shape, dtype=np.int64)
    if isinstance(model, FactorizedEntropy):
        cdf, rows, off = model.coding_plan(shape)
    elif isinstance(model, GaussianConditional):
        cdf, rows, off = model.coding_plan(ctx["scales"])
    else:
        cdf, rows, off = model.coding_plan(n)
    if rows.size != n:
        raise ValueError("shape does not match coding context")
    sym = decode_symbols(data, cdf, rows)
    return (sym + off).reshape(shape)


class MeanScaleHyperprior(nn.Module):
    """Hyper-analysis/synthesis pair emitting per-element Gaussian mean/scale
    for the residual latent; the hyper-latent itself uses a factorized model."""

    def __init__(self, latent_channels: int, hyper_channels: int):
        super().__init__()
        c, h = latent_channels, hyper_channels
        self.analysis = nn.Sequential(
            nn.Conv2d(c, h, 3, stride=1, padding=1),
            nn.LeakyReLU(inplace=True),
            nn.Conv2d(h, h, 3, stride=2, padding=1),
            nn.LeakyReLU(inplace=True),
            nn.Conv2d(h, h, 3, stride=2, padding=1),
        )
        self.syn1 = nn.Conv2d(h, h, 3, padding=1)
        self.syn2 = nn.Conv2d(h, h * 3 // 2, 3, padding=1)
        self.syn3 = nn.Conv2d(h * 3 // 2, 2 * c, 3, padding=1)
        self.hyper_model = FactorizedEntropy(h)
        self.gaussian = GaussianConditional()

    def encode_hyper(self, y: torch.Tensor) -> torch.Tensor:
        return self.analysis(y)

    def decode_params(self, z_hat: torch.Tensor, target_hw: tuple[int, int]):
        h2 = ((target_hw[0] + 1) // 2, (target_hw[1] + 1) // 2)
        x = F.leaky_relu(self.syn1(z_hat))
        x = F.interpolate(x, scale_factor=2, mode="nearest")[:, :, : h2[0], : h2[1]]
        x = F.leaky_relu(self.syn2(x))
        x = F.interpolate(x, scale_factor=2, mode="nearest")[:, :, : target_hw[0], : target_hw[1]]
        x = self.syn3(x)
        means, raw = x.chunk(2, dim=1)
        scales = F.softplus(raw) + 1e-2
        return means, scales
