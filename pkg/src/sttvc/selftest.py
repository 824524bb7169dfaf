"""Built-in oracle checks for `sttvc selftest`.

Each check recomputes its expected value independently of the code path it
validates (explicit loops, closed forms).  Returns a nonzero exit code if any
check fails.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from . import entropy_codec as ec


def _check_quantize():
    x = torch.tensor([2.4, -1.5, 0.49, -0.5, 254.7, 400.0])
    q = ec.quantize(x, "eval")
    assert q.tolist() == [2.0, -2.0, 0.0, -1.0, 255.0, 255.0], q.tolist()
    noisy = ec.quantize(torch.zeros(1000), "train")
    assert float(noisy.abs().max()) <= 0.5


def _check_coder_roundtrip():
    rng = np.random.default_rng(7)
    for trial in range(200):
        n_sym = int(rng.integers(2, 40))
        pmf = rng.dirichlet(np.full(n_sym, 0.3))
        model = ec.FixedPmfModel(pmf)
        symbols = rng.integers(0, n_sym, size=int(rng.integers(0, 64)))
        cdf, rows, off = model.coding_plan(len(symbols))
        blob = ec.encode_symbols(symbols, cdf, rows)
        back = ec.decode_symbols(blob, cdf, rows)
        assert np.array_equal(back, symbols), f"round trip failed on trial {trial}"


def _check_coder_length():
    rng = np.random.default_rng(11)
    pmf = rng.dirichlet(np.full(64, 0.5))
    model = ec.FixedPmfModel(pmf)
    symbols = rng.choice(64, size=10_000, p=pmf)
    cdf, rows, _ = model.coding_plan(len(symbols))
    blob = ec.encode_symbols(symbols, cdf, rows)
    estimate = model.bits(symbols)
    assert len(blob) * 8 <= estimate * 1.02 + 64 * 8, (len(blob) * 8, estimate)
    assert np.array_equal(ec.decode_symbols(blob, cdf, rows), symbols)


def _check_deformable():
    from .rdt_motion import MotionField, deformable_compensate, tap_grid

    torch.manual_seed(3)
    b, g, cg, h, w = 1, 2, 3, 5, 6
    ref = torch.randn(b, g * cg, h, w, dtype=torch.double)
    off = torch.randn(b, g, 9, 2, h, w, dtype=torch.double) * 1.5
    mask = torch.rand(b, g, 9, h, w, dtype=torch.double)
    weight = torch.randn(g, 9, cg, cg, dtype=torch.double)
    out = deformable_compensate(ref, MotionField(off, mask), weight)

    base = tap_grid(dtype=torch.double)
    expect = torch.zeros_like(out)
    refg = ref.view(b, g, cg, h, w)
    for gi in range(g):
        for k in range(9):
            for y in range(h):
                for x in range(w):
                    px = x + float(base[k, 0]) + float(off[0, gi, k, 0, y, x])
                    py = y + float(base[k, 1]) + float(off[0, gi, k, 1, y, x])
                    x0, y0 = math.floor(px), math.floor(py)
                    wx, wy = px - x0, py - y0
                    val = torch.zeros(cg, dtype=torch.double)
                    for dy, fy in ((0, 1 - wy), (1, wy)):
                        for dx, fx in ((0, 1 - wx), (1, wx)):
                            xi = min(max(x0 + dx, 0), w - 1)
                            yi = min(max(y0 + dy, 0), h - 1)
                            val += fy * fx * refg[0, gi, :, yi, xi]
                    contrib = weight[gi, k] @ (val * mask[0, gi, k, y, x])
                    expect[0, gi * cg:(gi + 1) * cg, y, x] += contrib
    rel = float((out - expect).norm() / expect.norm())
    assert rel < 1e-10, rel


def _check_attention():
    from .rdt_motion import WindowAttention

    torch.manual_seed(5)
    attn = WindowAttention(dim=16, heads=4, window=4).double()
    x = torch.randn(1, 16, 4, 4, dtype=torch.double)
    out = attn(x)

    tokens = x.permute(0, 2, 3, 1).reshape(16, 16) + attn.pos_embed
    normed = attn.norm(tokens)
    qkv = attn.qkv(normed).view(16, 3, 4, 4)
    expect = torch.zeros(16, 16, dtype=torch.double)
    bias = attn.rel_bias[:, attn.rel_index]
    for head in range(4):
        q = qkv[:, 0, head]
        k = qkv[:, 1, head]
        v = qkv[:, 2, head]
        logits = q @ k.t() / 2.0 + bias[head]
        w = torch.softmax(logits, dim=-1)
        expect[:, head * 4:(head + 1) * 4] = w @ v
    expect = attn.proj(expect).view(1, 4, 4, 16).permute(0, 3, 1, 2)
    rel = float((out - expect).norm() / expect.norm())
    assert rel < 1e-10, rel


def _check_bd_rate():
    from .eval_harness import RDCurve, RDPoint, bd_rate

    curve = RDCurve(tuple(RDPoint(r, q) for r, q in
                          [(0.1, 30.0), (0.2, 33.0), (0.4, 36.0), (0.8, 39.0)]))
    assert abs(bd_rate(curve, curve)) < 1e-9
    shifted = RDCurve(tuple(RDPoint(p.rate * 1.1, p.quality) for p in curve.points))
    assert abs(bd_rate(shifted, curve) - 10.0) < 0.01


def _check_container():
    from .cli_bitstream import StreamContainer

    c = StreamContainer(width=65, height=33, channels=3, lambda_id=2, intra_period=32,
                        config_hash=b"\x01" * 8, records=[(0, b"abc"), (1, b"defgh")])
    back = StreamContainer.from_bytes(c.to_bytes())
    assert back == c


CHECKS = [
    ("quantize rules", _check_quantize),
    ("range coder round trip", _check_coder_roundtrip),
    ("coded size tracks estimate", _check_coder_length),
    ("deformable compensation vs direct loop", _check_deformable),
    ("window attention vs explicit softmax", _check_attention),
    ("bd-rate identities", _check_bd_rate),
    ("container round trip", _check_container),
]


def run_selftest(verbose: bool = True) -> int:
    failures = 0
    for name, fn in CHECKS:
        try:
            with torch.no_grad():
                fn()
        except Exception as exc:  # report and continue
            failures += 1
            if verbose:
                print(f"[FAIL] {name}: {exc}")
        else:
            if verbose:
                print(f"[ ok ] {name}")
    if verbose and failures:
        print(f"{failures} selftest check(s) failed")
    return 1 if failures else 0
