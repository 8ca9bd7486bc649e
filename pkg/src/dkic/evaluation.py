"""Rate-distortion metrics, BD-rate, and the data behind offset and latent-statistics plots."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw
from scipy.interpolate import PchipInterpolator

from .codec import compress, decompress, load_image, pad_image
from .dynamic_kernel import LDCN, kernel_grid
from .model import DKIC
from .range_coder import Bitstream, pack_bitstream, unpack_bitstream

__all__ = [
    "OFFSET_RECORD_SCHEMA",
    "PSNR_CAP",
    "RdCurve",
    "bd_rate",
    "block_means",
    "bpp",
    "evaluate_images",
    "lag1_autocorrelation",
    "latent_group_stats",
    "ldcn_blocks",
    "nonincreasing_within_noise",
    "psnr",
    "visualize_offsets",
]

PSNR_CAP = 100.0


def psnr(a, b, *, scale: str = "auto") -> float:
    """PSNR in dB on the 0-255 scale, capped at 100 dB for identical inputs.

    ``scale`` is ``"unit"`` for [0, 1] inputs, ``"byte"`` for 0-255 inputs,
    or ``"auto"`` (unit when both arrays are floating point, byte otherwise).
    """
    a_is_float = _is_float(a)
    b_is_float = _is_float(b)
    a = _as_array(a)
    b = _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if scale == "auto":
        scale = "unit" if (a_is_float and b_is_float) else "byte"
    if scale == "unit":
        a, b = a * 255.0, b * 255.0
    elif scale != "byte":
        raise ValueError(f"unknown scale {scale!r}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0**2 / mse))


def _is_float(a) -> bool:
    if isinstance(a, torch.Tensor):
        return a.is_floating_point()
    return np.asarray(a).dtype.kind == "f"


def _as_array(a) -> np.ndarray:
    if isinstance(a, torch.Tensor):
        a = a.detach().cpu().numpy()
    return np.asarray(a, dtype=np.float64)


def bpp(b: Bitstream | bytes, width: int, height: int) -> float:
    """``8 * container bytes / (width * height)``."""
    if isinstance(b, (bytes, bytearray)):
        data = bytes(b)
        b = unpack_bitstream(data)
        nbytes = len(data)
    else:
        nbytes = len(b)
    if (b.width, b.height) != (width, height):
        raise ValueError(f"header dims {b.width}x{b.height} do not match {width}x{height}")
    return 8.0 * nbytes / (width * height)


@dataclass
class RdCurve:
    """Rate-distortion points ``(bpp, psnr_db)`` with strictly increasing rate."""

    points: list[tuple[float, float]] = field(default_factory=list)
    label: str = ""

    def __post_init__(self):
        self.points = [(float(r), float(d)) for r, d in self.points]
        rates = [r for r, _ in self.points]
        if any(r <= 0 or not math.isfinite(r) for r in rates):
            raise ValueError("rates must be positive and finite")
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError("RD points must be strictly increasing in bpp")

    @classmethod
    def from_unsorted(cls, points: Iterable[tuple[float, float]], label: str = "") -> "RdCurve":
        return cls(sorted(points), label)

    @property
    def rates(self) -> np.ndarray:
        return np.array([r for r, _ in self.points])

    @property
    def psnrs(self) -> np.ndarray:
        return np.array([d for _, d in self.points])

    def __len__(self) -> int:
        return len(self.points)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["bpp", "psnr"])
        for r, d in self.points:
            writer.writerow([f"{r:.6f}", f"{d:.4f}"])
        text = buf.getvalue()
        if path is not None:
            _atomic_text(Path(path), text)
        return text

    @classmethod
    def from_csv(cls, source, label: str = "") -> "RdCurve":
        """Parse ``bpp,psnr`` rows; a header row and extra columns are tolerated."""
        text = Path(source).read_text() if not _looks_like_csv_text(source) else source
        points = []
        for row in csv.reader(io.StringIO(text)):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                points.append((float(row[0]), float(row[1])))
            except (ValueError, IndexError):
                if points:
                    raise ValueError(f"malformed RD row: {row}") from None
                continue  # header
        return cls.from_unsorted(points, label)

    def to_json(self, path=None) -> str:
        text = json.dumps({"label": self.label, "points": [{"bpp": r, "psnr": d} for r, d in self.points]}, indent=2)
        if path is not None:
            _atomic_text(Path(path), text)
        return text

    @classmethod
    def from_json(cls, source) -> "RdCurve":
        text = Path(source).read_text() if not str(source).lstrip().startswith("{") else source
        d = json.loads(text)
        return cls.from_unsorted([(p["bpp"], p["psnr"]) for p in d["points"]], d.get("label", ""))


def _looks_like_csv_text(source) -> bool:
    return isinstance(source, str) and ("\n" in source or "," in source)


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def bd_rate(test: RdCurve, anchor: RdCurve) -> float:
    """Bjøntegaard delta rate in percent; negative means ``test`` needs fewer bits.

    Log-rate is interpolated as a piecewise-cubic (monotone Hermite) function
    of PSNR for each curve and integrated over the common PSNR interval.
    """
    for name, c in (("test", test), ("anchor", anchor)):
        if len(c) < 4:
            raise ValueError(f"{name} curve needs at least 4 points, has {len(c)}")
    lo = max(test.psnrs.min(), anchor.psnrs.min())
    hi = min(test.psnrs.max(), anchor.psnrs.max())
    if not hi > lo:
        raise ValueError("RD curves have no overlapping PSNR range")

    def integral(c: RdCurve) -> float:
        order = np.argsort(c.psnrs)
        d, r = c.psnrs[order], np.log(c.rates[order])
        if np.any(np.diff(d) <= 0):
            raise ValueError("PSNR values must be distinct within a curve")
        return float(PchipInterpolator(d, r).integrate(lo, hi))

    avg_diff = (integral(test) - integral(anchor)) / (hi - lo)
    return (math.exp(avg_diff) - 1.0) * 100.0


# --- dynamic sampling locations -------------------------------------------------

OFFSET_RECORD_SCHEMA = {
    "type": "object",
    "required": ["block", "stride", "feature_shape", "target", "kernel_side", "offset_clamp", "groups", "points"],
    "properties": {
        "block": {"type": "string"},
        "stride": {"type": "integer", "minimum": 1},
        "feature_shape": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
        "target": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2},
        "kernel_side": {"type": "integer", "minimum": 1},
        "offset_clamp": {"type": "number", "minimum": 0},
        "groups": {"type": "integer", "minimum": 1},
        "points": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["group", "point", "row", "col", "weight"],
                "properties": {
                    "group": {"type": "integer", "minimum": 0},
                    "point": {"type": "integer", "minimum": 0},
                    "row": {"type": "number"},
                    "col": {"type": "number"},
                    "weight": {"type": "number", "minimum": 0, "maximum": 1},
                },
                "additionalProperties": False,
            },
        },
    },
    "additionalProperties": False,
}


def ldcn_blocks(model: DKIC, transform: str = "g_a") -> list[tuple[str, LDCN]]:
    """Named LDCN layers of a transform in forward order."""
    module = getattr(model, transform)
    return [(f"{transform}.{n}", m) for n, m in module.named_modules() if isinstance(m, LDCN)]


@torch.no_grad()
def visualize_offsets(
    model: DKIC,
    image: torch.Tensor,
    target: tuple[int, int],
    block: int = 0,
    json_path=None,
    png_path=None,
) -> dict:
    """Absolute sampling positions of one analysis-side LDCN at ``target``.

    ``target`` is ``(row, col)`` on that layer's feature grid. Positions are
    in feature-grid units; the PNG marks them on the input image, one colour
    per group, with the target as a white cross.
    """
    blocks = ldcn_blocks(model, "g_a")
    if not blocks:
        raise ValueError("model has no dynamic-kernel layers in the analysis transform")
    if not 0 <= block < len(blocks):
        raise ValueError(f"block index {block} out of range (0..{len(blocks) - 1})")
    name, layer = blocks[block]
    x_pad, _ = pad_image(image)
    captured = {}
    handle = layer.register_forward_pre_hook(lambda m, args: captured.setdefault("x", args[0]))
    try:
        model.eval()
        model.g_a(x_pad.unsqueeze(0))
    finally:
        handle.remove()
    feat = captured["x"]
    h, w = feat.shape[-2:]
    r0, c0 = int(target[0]), int(target[1])
    if not (0 <= r0 < h and 0 <= c0 < w):
        raise ValueError(f"target {target} outside the {h}x{w} feature grid")
    offsets, mods = layer.sampling_fields(feat)
    cfg = layer.cfg
    points = []
    for g in range(cfg.groups):
        for k, (dy, dx) in enumerate(kernel_grid(cfg.kernel_side)):
            points.append(
                {
                    "group": g,
                    "point": k,
                    "row": float(r0 + dy + offsets[0, g, k, 0, r0, c0]),
                    "col": float(c0 + dx + offsets[0, g, k, 1, r0, c0]),
                    "weight": float(mods[0, g, k, r0, c0]),
                }
            )
    record = {
        "block": name,
        "stride": int(x_pad.shape[-1] // w),
        "feature_shape": [int(h), int(w)],
        "target": [r0, c0],
        "kernel_side": cfg.kernel_side,
        "offset_clamp": float(cfg.offset_clamp),
        "groups": cfg.groups,
        "points": points,
    }
    if json_path is not None:
        _atomic_text(Path(json_path), json.dumps(record, indent=2))
    if png_path is not None:
        _offset_png(image, record, Path(png_path))
    return record


def _offset_png(image: torch.Tensor, record: dict, path: Path) -> None:
    arr = (image.clamp(0, 1) * 255).round().to(torch.uint8).permute(1, 2, 0).numpy()
    im = Image.fromarray(arr).convert("RGB")
    draw = ImageDraw.Draw(im)
    s = record["stride"]
    rng = np.random.default_rng(0)
    colours = [tuple(int(v) for v in rng.integers(60, 256, 3)) for _ in range(record["groups"])]

    def to_px(row, col):
        return (col + 0.5) * s, (row + 0.5) * s

    for p in record["points"]:
        x, y = to_px(p["row"], p["col"])
        rad = 1 + 3 * p["weight"] * record["kernel_side"] ** 2 / 2
        draw.ellipse([x - rad, y - rad, x + rad, y + rad], outline=colours[p["group"]])
    tx, ty = to_px(*record["target"])
    draw.line([tx - 4, ty, tx + 4, ty], fill=(255, 255, 255))
    draw.line([tx, ty - 4, tx, ty + 4], fill=(255, 255, 255))
    tmp = path.with_name(path.name + ".tmp")
    im.save(tmp, format="PNG")
    os.replace(tmp, path)


# --- per-group latent statistics ------------------------------------------------


def lag1_autocorrelation(values: torch.Tensor) -> float:
    """Mean lag-1 spatial correlation of a ``(C, H, W)`` map.

    For each channel, the Pearson correlation between horizontally adjacent
    pairs and between vertically adjacent pairs is computed and the two are
    averaged; channels (or directions) with zero variance contribute 0.
    """
    v = values.detach().double()
    if v.ndim != 3:
        raise ValueError("expected a (C, H, W) map")
    out = []
    for ch in v:
        corrs = []
        for a, b in ((ch[:, :-1], ch[:, 1:]), (ch[:-1, :], ch[1:, :])):
            a, b = a.flatten(), b.flatten()
            if a.numel() < 2:
                corrs.append(0.0)
                continue
            a = a - a.mean()
            b = b - b.mean()
            denom = math.sqrt(float((a * a).sum()) * float((b * b).sum()))
            corrs.append(float((a * b).sum()) / denom if denom > 1e-12 else 0.0)
        out.append(sum(corrs) / 2)
    return float(np.mean(out)) if out else 0.0


@torch.no_grad()
def latent_group_stats(model: DKIC, images: Sequence[torch.Tensor], bootstrap: int = 1000, seed: int = 0) -> dict:
    """Per schedule group: mean |y_hat|, mean |symbol| and mean lag-1 correlation.

    Symbols are the coded residuals ``round(y - mu)``. Values are averaged over
    images. ``mean_abs_y_hat_se`` is a bootstrap standard error that resamples
    images and, independently, channels within the group, so a two-channel
    group carries the uncertainty of having only two channels. A model that
    has never been trained is processed anyway and the result carries
    ``"untrained": True``.
    """
    model.eval()
    sched = model.schedule
    acc = [{"mean_abs_y_hat": [], "mean_abs_symbol": [], "lag1_autocorr": []} for _ in range(sched.num_groups)]
    per_channel = []
    for img in images:
        x, _ = pad_image(img)
        out = model(x.unsqueeze(0), noise=False)
        sym = out["y_hat"] - out["mu"]
        per_channel.append(out["y_hat"][0].abs().mean(dim=(1, 2)).double().numpy())
        for i in range(sched.num_groups):
            sl = sched.channel_slice(i)
            yh = out["y_hat"][0, sl]
            acc[i]["mean_abs_y_hat"].append(float(yh.abs().mean()))
            acc[i]["mean_abs_symbol"].append(float(sym[0, sl].round().abs().mean()))
            acc[i]["lag1_autocorr"].append(lag1_autocorrelation(yh))
    table = np.stack(per_channel) if per_channel else np.zeros((0, sum(sched.group_sizes)))
    rng = np.random.default_rng(seed)
    groups = []
    for i, a in enumerate(acc):
        sl = sched.channel_slice(i)
        entry = {"group": i + 1, "channels": sched.group_sizes[i], **{k: float(np.mean(v)) for k, v in a.items()}}
        entry["mean_abs_y_hat_se"] = _two_way_bootstrap_se(table[:, sl], bootstrap, rng)
        groups.append(entry)
    return {"untrained": model.trained_steps == 0, "images": len(images), "groups": groups}


def _two_way_bootstrap_se(values: np.ndarray, reps: int, rng: np.random.Generator) -> float:
    """Standard error of ``values.mean()`` resampling rows and columns independently."""
    n, c = values.shape
    if n == 0 or reps <= 0:
        return 0.0
    stats = np.empty(reps)
    for r in range(reps):
        rows = rng.integers(0, n, n)
        cols = rng.integers(0, c, c)
        stats[r] = values[np.ix_(rows, cols)].mean()
    return float(stats.std(ddof=1)) if reps > 1 else 0.0


def block_means(values: Sequence[float], window: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Means and standard errors of consecutive non-overlapping windows.

    A trailing partial window is dropped. This is the window-smoothed curve
    sampled once per window, so neighbouring points share no samples and
    their difference has a simple standard error.
    """
    v = np.asarray(values, dtype=np.float64)
    if window < 2:
        raise ValueError("window must be at least 2")
    n = len(v) // window
    if n == 0:
        raise ValueError(f"need at least {window} values, got {len(v)}")
    blocks = v[: n * window].reshape(n, window)
    return blocks.mean(axis=1), blocks.std(axis=1, ddof=1) / math.sqrt(window)


def nonincreasing_within_noise(means, ses, z: float = 2.0) -> tuple[bool, float]:
    """Whether no step up between neighbours exceeds ``z`` combined standard errors.

    Returns ``(ok, worst)`` where ``worst`` is the largest standardised
    increase (negative when every step goes down).
    """
    m = np.asarray(means, dtype=np.float64)
    s = np.asarray(ses, dtype=np.float64)
    if m.shape != s.shape or m.ndim != 1 or len(m) < 2:
        raise ValueError("need matching 1-D means and standard errors with at least two entries")
    denom = np.hypot(s[1:], s[:-1])
    diff = np.diff(m)
    with np.errstate(divide="ignore", invalid="ignore"):
        score = np.where(denom > 0, diff / denom, np.sign(diff) * np.inf)
    score = np.where(diff == 0, 0.0, score)
    worst = float(score.max())
    return worst <= z, worst


# --- RD points -----------------------------------------------------------------


@torch.no_grad()
def evaluate_images(model: DKIC, paths: Sequence) -> list[dict]:
    """Compress and decompress each image; rows of ``name, width, height, bpp, psnr``."""
    rows = []
    for p in paths:
        x = load_image(p)
        data = pack_bitstream(compress(x, model))
        x_hat = decompress(data, model)
        x8 = (x * 255).round()
        xh8 = (x_hat * 255).round()
        rows.append(
            {
                "name": Path(p).name,
                "width": x.shape[2],
                "height": x.shape[1],
                "bpp": 8.0 * len(data) / (x.shape[1] * x.shape[2]),
                "psnr": psnr(x8.numpy(), xh8.numpy(), scale="byte"),
            }
        )
    return rows
