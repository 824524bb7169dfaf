"""On-disk bitstream container, sequence encode/decode, and the CLI.

Container layout (little-endian):
  magic "STTV" | version u8 | width u16 | height u16 | channels u8 |
  lambda_id u8 | intra_period u16 | frame_count u32 | config_hash u64
followed by per-frame records: type u8 (0=I, 1=P) | payload_len u32 | payload.
P payloads hold three length-prefixed sub-streams in fixed order:
hyper, residual, motion.
"""

from __future__ import annotations

import argparse
import os
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import LAMBDA_ID_CUSTOM, lambda_id
from .frame_transform import crop_to, load_frames, pad_to_multiple, save_frames_png, to_frame, to_tensor
from .mgp_refine import ReferenceBuffer

MAGIC = b"STTV"
VERSION = 1
HEADER = struct.Struct("<4sBHHBBHI8s")
RECORD_HEAD = struct.Struct("<BI")
FRAME_I, FRAME_P = 0, 1


class ContainerError(ValueError):
    pass


@dataclass
class StreamContainer:
    width: int
    height: int
    channels: int
    lambda_id: int
    intra_period: int
    config_hash: bytes
    records: list[tuple[int, bytes]]

    def to_bytes(self) -> bytes:
        head = HEADER.pack(MAGIC, VERSION, self.width, self.height, self.channels,
                           self.lambda_id, self.intra_period, len(self.records),
                           self.config_hash)
        parts = [head]
        for ftype, payload in self.records:
            parts.append(RECORD_HEAD.pack(ftype, len(payload)))
            parts.append(payload)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "StreamContainer":
        if len(blob) < HEADER.size:
            raise ContainerError("container shorter than header")
        magic, version, width, height, channels, lam_id, period, count, chash = \
            HEADER.unpack_from(blob, 0)
        if magic != MAGIC:
            raise ContainerError("bad magic")
        if version != VERSION:
            raise ContainerError(f"unknown container version {version}")
        pos = HEADER.size
        records = []
        for i in range(count):
            if pos + RECORD_HEAD.size > len(blob):
                raise ContainerError(f"truncated container at frame {i}")
            ftype, length = RECORD_HEAD.unpack_from(blob, pos)
            pos += RECORD_HEAD.size
            if ftype not in (FRAME_I, FRAME_P):
                raise ContainerError(f"bad frame type {ftype} at frame {i}")
            if pos + length > len(blob):
                raise ContainerError(f"truncated payload at frame {i}")
            records.append((ftype, blob[pos:pos + length]))
            pos += length
        if pos != len(blob):
            raise ContainerError("trailing bytes after last record")
        return cls(width=width, height=height, channels=channels, lambda_id=lam_id,
                   intra_period=period, config_hash=chash, records=records)


def _pack_streams(streams: tuple[bytes, bytes, bytes]) -> bytes:
    out = bytearray()
    for s in streams:
        out += struct.pack("<I", len(s))
        out += s
    return bytes(out)


def _unpack_streams(payload: bytes, frame_idx: int) -> tuple[bytes, bytes, bytes]:
    streams = []
    pos = 0
    for _ in range(3):
        if pos + 4 > len(payload):
            raise ContainerError(f"corrupt sub-stream prefix at frame {frame_idx}")
        (length,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        if pos + length > len(payload):
            raise ContainerError(f"corrupt sub-stream length at frame {frame_idx}")
        streams.append(payload[pos:pos + length])
        pos += length
    if pos != len(payload):
        raise ContainerError(f"trailing payload bytes at frame {frame_idx}")
    return tuple(streams)


# ---------------------------------------------------------------------------


@torch.inference_mode()
def encode_sequence(frames: np.ndarray, model, lam: float, intra, intra_period: int = 32,
                    refs: int = 3):
    """Encode a (T, H, W, 3) sequence; returns (container bytes, encoder-side
    reconstructions, per-frame records).

    The encoder maintains its reference buffer by running the decoder path on
    its own quantized latents, so the reconstructions match the decoder's.
    """
    from .config import config_hash

    model.eval()
    t, h, w = frames.shape[:3]
    if intra_period < 1:
        raise ValueError("intra period must be >= 1")
    buffer = ReferenceBuffer(refs)
    records = []
    recons = np.empty_like(frames, dtype=np.float32)
    payloads: list[tuple[int, bytes]] = []

    for i in range(t):
        if i % intra_period == 0:
            payload = intra.encode(frames[i])
            recon = intra.decode(payload, (h, w))
            x_pad, _ = pad_to_multiple(to_tensor(recon))
            buffer.reset()
            buffer.push(model.extractor(x_pad))
            payloads.append((FRAME_I, payload))
            recons[i] = recon
            records.append({"frame": i, "type": "I", "bytes": RECORD_HEAD.size + len(payload)})
        else:
            x_pad, orig_hw = pad_to_multiple(to_tensor(frames[i]))
            out = model.code_p_frame(x_pad, buffer)
            buffer.push(out["f_hat"])
            payload = _pack_streams(out["streams"])
            payloads.append((FRAME_P, payload))
            recons[i] = to_frame(crop_to(out["x_hat"], orig_hw))
            records.append({"frame": i, "type": "P", "bytes": RECORD_HEAD.size + len(payload)})

    container = StreamContainer(width=w, height=h, channels=3, lambda_id=lambda_id(lam),
                                intra_period=intra_period, config_hash=config_hash(model.cfg, lam),
                                records=payloads)
    return container.to_bytes(), recons, records


@torch.inference_mode()
def decode_sequence(blob: bytes, model, lam: float, intra, refs: int = 3) -> np.ndarray:
    """Decode a container back to (T, H, W, 3) frames; rejects containers whose
    config hash does not match the checkpoint."""
    from .config import config_hash

    model.eval()
    container = StreamContainer.from_bytes(blob)
    expect = config_hash(model.cfg, lam)
    if container.config_hash != expect:
        raise ContainerError("container/checkpoint config hash mismatch")
    if container.channels != 3:
        raise ContainerError("unsupported channel count")
    h, w = container.height, container.width
    pad_h = (64 - h % 64) % 64 + h
    pad_w = (64 - w % 64) % 64 + w
    buffer = ReferenceBuffer(refs)
    frames = np.empty((len(container.records), h, w, 3), dtype=np.float32)

    for i, (ftype, payload) in enumerate(container.records):
        try:
            if ftype == FRAME_I:
                recon = intra.decode(payload, (h, w))
                x_pad, _ = pad_to_multiple(to_tensor(recon))
                buffer.reset()
                buffer.push(model.extractor(x_pad))
                frames[i] = recon
            else:
                if len(buffer) == 0:
                    raise ContainerError("inter frame before any intra frame")
                streams = _unpack_streams(payload, i)
                f_hat, x_hat = model.decode_p_frame(streams, buffer, (pad_h, pad_w))
                buffer.push(f_hat)
                frames[i] = to_frame(crop_to(x_hat, (h, w)))
        except ContainerError:
            raise
        except Exception as exc:  # surface the failing frame index
            raise ContainerError(f"decode failed at frame {i}: {exc}") from exc
    return frames


# ---------------------------------------------------------------------------
# CLI


def _resolve_checkpoint(path: str) -> str:
    if os.path.exists(path):
        return path
    root = os.environ.get("STTVC_CHECKPOINT_DIR")
    if root and os.path.exists(os.path.join(root, path)):
        return os.path.join(root, path)
    raise FileNotFoundError(f"checkpoint {path} not found (STTVC_CHECKPOINT_DIR honored)")


def _make_intra(args) -> object:
    from .eval_harness import ExternalIntra, VerbatimIntra

    if getattr(args, "intra", "verbatim") == "external":
        if not (args.intra_encode_cmd and args.intra_decode_cmd):
            raise SystemExit("--intra external requires --intra-encode-cmd and --intra-decode-cmd")
        return ExternalIntra(args.intra_encode_cmd, args.intra_decode_cmd)
    return VerbatimIntra()


def _parse_size(text: str | None):
    if text is None:
        return None
    w, h = text.lower().split("x")
    return int(w), int(h)


def _add_intra_args(p: argparse.ArgumentParser):
    p.add_argument("--intra", choices=("verbatim", "external"), default="verbatim")
    p.add_argument("--intra-encode-cmd", default=None)
    p.add_argument("--intra-decode-cmd", default=None)


def _cmd_train(args) -> int:
    from .config import ModelConfig, TrainConfig, toy_config
    from .training import train_loop

    data = Path(args.data)
    clip_dirs = sorted(d for d in data.iterdir() if d.is_dir()) if data.is_dir() else []
    if clip_dirs:
        clips = [load_frames(d) for d in clip_dirs]
    else:
        clips = [load_frames(data, size=_parse_size(args.size))]
    ablate = set(args.ablate or [])
    overrides = {f"ablate_{k}": True for k in ablate}
    model_cfg = toy_config(**overrides) if args.toy else ModelConfig(**overrides)
    train_cfg = TrainConfig(lam=args.lam, batch_size=args.batch, crop=args.crop,
                            warmup_epochs=args.warmup_epochs, total_steps=args.steps,
                            seed=args.seed, distortion=args.distortion,
                            clip_frames=args.clip_frames)
    result = train_loop(clips, model_cfg, train_cfg, out_path=args.out,
                        log_path=args.log, quiet=args.quiet)
    last = result.history[-1]
    print(f"trained {args.steps} steps: loss {last['loss']:.4f} "
          f"bpp {last['bpp_mv'] + last['bpp_resi']:.4f} -> {args.out}")
    return 0


def _cmd_encode(args) -> int:
    from .training import load_checkpoint

    model, meta = load_checkpoint(_resolve_checkpoint(args.checkpoint))
    frames = load_frames(args.input, size=_parse_size(args.size), limit=args.frames)
    intra = _make_intra(args)
    blob, recons, records = encode_sequence(frames, model, meta["lambda"], intra,
                                            intra_period=args.intra_period, refs=args.gop_refs)
    Path(args.out).write_bytes(blob)
    bpp = len(blob) * 8.0 / (frames.shape[0] * frames.shape[1] * frames.shape[2])
    print(f"encoded {len(records)} frames -> {args.out} ({len(blob)} bytes, {bpp:.4f} bpp)")
    if args.self_check:
        decoded = decode_sequence(blob, model, meta["lambda"], intra, refs=args.gop_refs)
        if not np.array_equal(decoded, recons):
            print("self-check FAILED: decoder output differs from encoder reconstruction")
            return 1
        print("self-check ok: decode matches encoder reconstruction bitwise")
    return 0


def _cmd_decode(args) -> int:
    from .training import load_checkpoint

    model, meta = load_checkpoint(_resolve_checkpoint(args.checkpoint))
    blob = Path(args.input).read_bytes()
    frames = decode_sequence(blob, model, meta["lambda"], _make_intra(args), refs=args.gop_refs)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "recon.npy", frames)
    if args.png:
        save_frames_png(frames, out, prefix="recon")
    print(f"decoded {len(frames)} frames -> {out / 'recon.npy'}")
    return 0


def _cmd_eval(args) -> int:
    from .eval_harness import ms_ssim, psnr, run_codec_eval

    frames = load_frames(args.input, size=_parse_size(args.size), limit=args.frames)
    if args.recon:
        recon = np.load(Path(args.recon) / "recon.npy" if Path(args.recon).is_dir() else args.recon)
        n = min(len(frames), len(recon))
        print("frame,psnr,msssim")
        for i in range(n):
            print(f"{i},{psnr(frames[i], recon[i]):.6f},{ms_ssim(frames[i], recon[i]):.6f}")
        return 0
    from .training import load_checkpoint

    checkpoints = {}
    for path in args.checkpoints:
        _, meta = load_checkpoint(_resolve_checkpoint(path))
        checkpoints[meta["lambda"]] = _resolve_checkpoint(path)
    points, per_lambda = run_codec_eval(frames, checkpoints, intra=_make_intra(args),
                                        intra_period=args.intra_period, max_frames=args.frames,
                                        refs=args.gop_refs, out_dir=args.out_dir,
                                        sequence_name=args.sequence_name, plot=args.plot)
    for lam, entry in sorted(per_lambda.items()):
        print(f"lambda={lam:g}: {entry['rate_bpp']:.4f} bpp, {entry['psnr']:.2f} dB, "
              f"ms-ssim {entry['msssim']:.4f}")
    return 0


def _read_curve_csv(path: str, metric: str):
    import csv as _csv

    from .eval_harness import RDCurve, RDPoint

    with open(path, newline="") as fh:
        rows = list(_csv.DictReader(fh))
    return RDCurve(tuple(RDPoint(rate=float(r["bpp"]), quality=float(r[metric])) for r in rows))


def _cmd_bdrate(args) -> int:
    from .eval_harness import bd_rate

    value = bd_rate(_read_curve_csv(args.test, args.metric), _read_curve_csv(args.anchor, args.metric))
    print(f"{value:.2f}%")
    return 0


def _cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return run_selftest(verbose=True)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sttvc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on clip directories")
    p.add_argument("--data", required=True, help="directory of clip subdirectories (or one image dir)")
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=1024.0)
    p.add_argument("--steps", type=int, default=10000)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--crop", type=int, default=256)
    p.add_argument("--warmup-epochs", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--distortion", choices=("mse", "msssim"), default="mse")
    p.add_argument("--clip-frames", type=int, default=None)
    p.add_argument("--size", default=None, help="WxH for raw RGB24 input")
    p.add_argument("--toy", action="store_true", help="use the small test configuration")
    p.add_argument("--ablate", action="append", choices=("rdt", "mgp", "sfd"))
    p.add_argument("--log", default=None, help="CSV training log path")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("encode", help="encode frames to a bitstream container")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", default=None, help="WxH for raw RGB24 input")
    p.add_argument("--frames", type=int, default=96)
    p.add_argument("--intra-period", type=int, default=32)
    p.add_argument("--gop-refs", type=int, default=3)
    p.add_argument("--self-check", action="store_true")
    _add_intra_args(p)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("decode", help="decode a bitstream container")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--gop-refs", type=int, default=3)
    p.add_argument("--png", action="store_true", help="also write PNG frames")
    _add_intra_args(p)
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("eval", help="RD evaluation (or --recon comparison)")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoints", nargs="*", default=[])
    p.add_argument("--recon", default=None, help="decoded recon.npy (or its directory) to compare against")
    p.add_argument("--size", default=None)
    p.add_argument("--frames", type=int, default=96)
    p.add_argument("--intra-period", type=int, default=32)
    p.add_argument("--gop-refs", type=int, default=3)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--sequence-name", default="seq")
    p.add_argument("--plot", action="store_true")
    _add_intra_args(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bdrate", help="BD-rate between two curve CSVs")
    p.add_argument("test")
    p.add_argument("anchor")
    p.add_argument("--metric", choices=("psnr", "msssim"), default="psnr")
    p.set_defaults(func=_cmd_bdrate)

    p = sub.add_parser("selftest", help="run the built-in oracle checks")
    p.set_defaults(func=_cmd_selftest)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
