"""End-to-end compression and decompression of single images."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .entropy_model import build_schedule
from .model import DKIC
from .quantizer import dequantize_symbols, extract_symbols, round_half_away
from .range_coder import (
    Bitstream,
    BitstreamError,
    decode_with_escape,
    encode_with_escape,
    gaussian_cdf_tables,
    pack_bitstream,
    unpack_bitstream,
)

__all__ = [
    "ALIGN",
    "NumericFailure",
    "compress",
    "compress_file",
    "decompress",
    "decompress_file",
    "load_image",
    "pad_image",
    "save_image",
    "unpad",
]

ALIGN = 64


class NumericFailure(RuntimeError):
    pass


def pad_image(x: torch.Tensor, align: int = ALIGN) -> tuple[torch.Tensor, tuple[int, int]]:
    """Replicate-pad a ``(3, H, W)`` image on the right/bottom to multiples of ``align``."""
    h, w = x.shape[-2:]
    if h == 0 or w == 0:
        raise ValueError("zero-sized image")
    ph = -h % align
    pw = -w % align
    if ph or pw:
        x = F.pad(x.unsqueeze(0), (0, pw, 0, ph), mode="replicate").squeeze(0)
    return x, (h, w)


def unpad(x: torch.Tensor, dims: tuple[int, int]) -> torch.Tensor:
    h, w = dims
    return x[..., :h, :w]


def load_image(path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(x: torch.Tensor, path) -> None:
    arr = (x.detach().clamp(0, 1) * 255.0).round().to(torch.uint8).permute(1, 2, 0).numpy()
    Image.fromarray(arr).save(path, format="PNG")


def _check_finite(*tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericFailure("numeric failure")


def _z_tables(model: DKIC):
    return model.prior.cdf_tables()


def _channel_tables(tables, shape) -> list:
    _, c, h, w = shape
    return [tables[ch] for ch in range(c) for _ in range(h * w)]


def _step_tables(sigma: torch.Tensor):
    return gaussian_cdf_tables(0.0, sigma.double().numpy())


@torch.no_grad()
def compress(x: torch.Tensor, model: DKIC, trace: dict | None = None) -> Bitstream:
    """Encode a ``(3, H, W)`` image in [0, 1].

    The encoder keeps a decoder-identical buffer of already coded latents, so
    every context it computes is the one the decoder will compute.
    """
    model.eval()
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {tuple(x.shape)}")
    x_pad, (h, w) = pad_image(x)
    y = model.g_a(x_pad.unsqueeze(0))
    z = model.h_a(y)
    _check_finite(y, z)

    z_sym = round_half_away(z)
    z_stream = encode_with_escape(z_sym.to(torch.int64).flatten().tolist(), _channel_tables(_z_tables(model), z.shape))
    gc = model.h_s(z_sym)

    sched = model.schedule
    y_groups = [y[:, sched.channel_slice(i)] for i in range(sched.num_groups)]
    streams: list[bytes] = []

    def code_step(step, i, j, mu, sigma, mask):
        _check_finite(mu, sigma)
        mu_sel = mu[0][:, mask]
        tables = _step_tables(sigma[0][:, mask])
        sym = extract_symbols(y_groups[i][0][:, mask], mu_sel)
        streams.append(encode_with_escape(sym.flatten().tolist(), tables))
        values = torch.zeros_like(mu)
        values[0][:, mask] = dequantize_symbols(sym, mu_sel)
        if trace is not None:
            trace.setdefault("mu", []).append(mu.clone())
            trace.setdefault("sigma", []).append(sigma.clone())
        return values

    y_hat = torch.cat(model.context.run(gc, code_step), dim=1)
    if trace is not None:
        trace["y_hat"] = y_hat
        trace["z_hat"] = z_sym
    return Bitstream(
        width=w,
        height=h,
        lambda_index=int(model.lambda_index),
        group_sizes=list(sched.group_sizes),
        stage_counts=list(sched.stage_counts),
        z_stream=z_stream,
        y_streams=streams,
    )


@torch.no_grad()
def decompress(b: Bitstream | bytes, model: DKIC, trace: dict | None = None) -> torch.Tensor:
    """Decode a bitstream into a ``(3, H, W)`` image clamped to [0, 1]."""
    model.eval()
    if isinstance(b, (bytes, bytearray)):
        b = unpack_bitstream(b)
    sched = model.schedule
    if build_schedule(b.group_sizes, b.stage_counts) != sched:
        raise BitstreamError("schedule/header mismatch")
    if len(b.y_streams) != sched.num_steps:
        raise BitstreamError("schedule/header mismatch")
    hp = math.ceil(b.height / ALIGN) * ALIGN
    wp = math.ceil(b.width / ALIGN) * ALIGN
    zc = model.cfg.entropy.hyper_channels
    z_shape = (1, zc, hp // ALIGN, wp // ALIGN)

    z_sym = decode_with_escape(b.z_stream, _channel_tables(_z_tables(model), z_shape))
    z_hat = torch.tensor(z_sym, dtype=torch.float32).view(z_shape)
    gc = model.h_s(z_hat)

    def code_step(step, i, j, mu, sigma, mask):
        _check_finite(mu, sigma)
        mu_sel = mu[0][:, mask]
        tables = _step_tables(sigma[0][:, mask])
        sym = torch.tensor(decode_with_escape(b.y_streams[step], tables)).view(mu_sel.shape)
        values = torch.zeros_like(mu)
        values[0][:, mask] = dequantize_symbols(sym, mu_sel)
        if trace is not None:
            trace.setdefault("mu", []).append(mu.clone())
            trace.setdefault("sigma", []).append(sigma.clone())
        return values

    y_hat = torch.cat(model.context.run(gc, code_step), dim=1)
    if trace is not None:
        trace["y_hat"] = y_hat
        trace["z_hat"] = z_hat
    x_hat = model.g_s(y_hat)[0]
    _check_finite(x_hat)
    return unpad(x_hat, (b.height, b.width)).clamp(0, 1)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def compress_file(image_path, out_path, model: DKIC) -> float:
    """Compress a PNG to a ``.dkic`` file; returns bits per pixel."""
    x = load_image(image_path)
    data = pack_bitstream(compress(x, model))
    _atomic_write(Path(out_path), data)
    return 8 * len(data) / (x.shape[1] * x.shape[2])


def decompress_file(stream_path, out_path, model: DKIC) -> float:
    data = Path(stream_path).read_bytes()
    b = unpack_bitstream(data)
    x_hat = decompress(b, model)
    out_path = Path(out_path)
    tmp = out_path.with_name(out_path.name + ".tmp")
    save_image(x_hat, tmp)
    tmp.replace(out_path)
    return 8 * len(data) / (b.width * b.height)
