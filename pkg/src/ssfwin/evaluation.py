"""Metrics, RD-curve assembly, BD-rate, sweeps and baseline wrappers.

PSNR is computed on the 0-255 scale (frames live in [0, 1] and are
rescaled), MS-SSIM on 5 scales with the conventional weights and
reported as -10*log10(1 - m). Results flow out as line-delimited JSON
records plus optional matplotlib figures.
"""

from __future__ import annotations

import json
import logging
import math
import shutil
import subprocess
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data_model import Clip, Frame, ModelConfig, RDPoint
from .video_codec import BitstreamContainer, VideoModel, decode_gop, encode_gop

__all__ = [
    "PSNR_CAP_DB",
    "MSSSIM_LOG_CAP_DB",
    "psnr",
    "msssim",
    "msssim_log",
    "bpp",
    "bd_rate",
    "encode_sequence",
    "gop_sweep",
    "ncc_map",
    "latent_correlation",
    "BaselineResult",
    "baseline_command",
    "vtm_command",
    "run_baseline",
    "write_records",
]

log = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0
MSSSIM_LOG_CAP_DB = 40.0

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_SSIM_WIN = 11
_SSIM_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03


def psnr(x: np.ndarray, x_hat: np.ndarray) -> float:
    """10*log10(255^2 / MSE) on the 0-255 scale; identical inputs cap at
    100 dB. The reference goes first."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    mse = float(np.mean((255.0 * (x - x_hat)) ** 2))
    if mse == 0.0:
        warnings.warn("identical frames: PSNR capped at 100 dB")
        return PSNR_CAP_DB
    value = 10.0 * math.log10(255.0 ** 2 / mse)
    if value > PSNR_CAP_DB:
        warnings.warn("PSNR capped at 100 dB")
        return PSNR_CAP_DB
    return value


def _gauss_win(device, dtype):
    coords = torch.arange(_SSIM_WIN, dtype=dtype, device=device) - _SSIM_WIN // 2
    g = torch.exp(-(coords ** 2) / (2 * _SSIM_SIGMA ** 2))
    g = (g / g.sum()).view(1, 1, 1, -1)
    return g


def _filter2d(x, win):
    x = F.conv2d(x, win, padding=0)
    return F.conv2d(x, win.transpose(2, 3), padding=0)


def _ssim_cs(x, y):
    win = _gauss_win(x.device, x.dtype)
    mu_x = _filter2d(x, win)
    mu_y = _filter2d(y, win)
    sxx = _filter2d(x * x, win) - mu_x ** 2
    syy = _filter2d(y * y, win) - mu_y ** 2
    sxy = _filter2d(x * y, win) - mu_x * mu_y
    c1 = _K1 ** 2
    c2 = _K2 ** 2
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    ssim = ((2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)) * cs
    return ssim.mean(), cs.mean()


def msssim(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Multi-scale SSIM on single-channel [0, 1] frames.

    Uses 5 scales when the frame allows it ((11-1)*2^4 + 1 = 161 px
    minimum), otherwise falls back to the scales that fit, renormalizes
    their weights and warns.
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    min_side = min(x.shape)
    levels = len(MSSSIM_WEIGHTS)
    while levels > 1 and (min_side - 1) // (2 ** (levels - 1)) + 1 <= _SSIM_WIN:
        levels -= 1
    weights = np.asarray(MSSSIM_WEIGHTS[:levels])
    if levels < len(MSSSIM_WEIGHTS):
        weights = weights / weights.sum()
        warnings.warn(
            f"frame {x.shape} too small for 5-scale MS-SSIM; using {levels} "
            "scales with renormalized weights"
        )
    a = torch.from_numpy(x)[None, None]
    b = torch.from_numpy(x_hat)[None, None]
    mcs = []
    value = None
    for i in range(levels):
        ssim_val, cs = _ssim_cs(a, b)
        if i < levels - 1:
            mcs.append(torch.clamp(cs, min=0.0))
            a = F.avg_pool2d(a, 2)
            b = F.avg_pool2d(b, 2)
        else:
            value = torch.clamp(ssim_val, min=0.0)
    result = value ** weights[-1]
    for w, cs in zip(weights[:-1], mcs):
        result = result * cs ** w
    return float(result)


def log_scale_db(m: float) -> float:
    """-10*log10(1 - m), capped at 40 dB for m -> 1."""
    if m >= 1.0 - 1e-12:
        warnings.warn("MS-SSIM of 1: log scale capped at 40 dB")
        return MSSSIM_LOG_CAP_DB
    value = -10.0 * math.log10(1.0 - m)
    if value > MSSSIM_LOG_CAP_DB:
        warnings.warn("log MS-SSIM capped at 40 dB")
        return MSSSIM_LOG_CAP_DB
    return value


def msssim_log(x: np.ndarray, x_hat: np.ndarray) -> float:
    """MS-SSIM on the logarithmic dB scale."""
    return log_scale_db(msssim(x, x_hat))


def bpp(container: "BitstreamContainer | int", n_frames: int | None = None,
        height: int | None = None, width: int | None = None) -> float:
    """Container bits divided by total pixels.

    Accepts a container (dims default to its header fields) or a raw
    byte count. A zero payload is degenerate and flagged with a warning.
    """
    if isinstance(container, BitstreamContainer):
        n_bytes = container.serialized_bytes
        n_frames = n_frames if n_frames is not None else container.n_frames
        height = height if height is not None else container.height
        width = width if width is not None else container.width
    else:
        n_bytes = int(container)
    if n_frames is None or height is None or width is None:
        raise ValueError("frame count and dimensions are required for a raw byte count")
    if n_bytes == 0:
        warnings.warn("empty payload: bpp reported as 0")
        return 0.0
    return 8.0 * n_bytes / (n_frames * height * width)


def _curve_arrays(curve: Sequence[RDPoint], quality_attr: str):
    rates = np.array([p.bpp for p in curve], dtype=np.float64)
    quality = np.array([getattr(p, quality_attr) for p in curve], dtype=np.float64)
    return rates, quality


def bd_rate(curve_a: Sequence[RDPoint], curve_b: Sequence[RDPoint],
            quality_attr: str = "psnr_db") -> float:
    """Mean percent rate difference of curve_b relative to curve_a.

    Cubic fit of log-rate against quality, integrated over the common
    quality interval. Negative means b needs fewer bits than a.
    """
    if len(curve_a) < 4 or len(curve_b) < 4:
        raise ValueError(
            f"BD-rate needs at least 4 points per curve, got {len(curve_a)} and {len(curve_b)}"
        )
    r_a, q_a = _curve_arrays(curve_a, quality_attr)
    r_b, q_b = _curve_arrays(curve_b, quality_attr)
    lo = max(q_a.min(), q_b.min())
    hi = min(q_a.max(), q_b.max())
    if hi <= lo:
        raise ValueError(
            f"quality ranges do not overlap: [{q_a.min()}, {q_a.max()}] vs "
            f"[{q_b.min()}, {q_b.max()}]"
        )
    poly_a = np.polyfit(q_a, np.log(r_a), 3)
    poly_b = np.polyfit(q_b, np.log(r_b), 3)
    int_a = np.polyint(poly_a)
    int_b = np.polyint(poly_b)
    avg_diff = (
        (np.polyval(int_b, hi) - np.polyval(int_b, lo))
        - (np.polyval(int_a, hi) - np.polyval(int_a, lo))
    ) / (hi - lo)
    return float((math.exp(avg_diff) - 1.0) * 100.0)


@torch.no_grad()
def encode_sequence(model: VideoModel, sequence: Clip, gop_size: int,
                    with_msssim: bool = True, backend=None):
    """Chunk a frame sequence into GoPs, code each, aggregate one RDPoint."""
    frames = sequence.frames
    total_bytes = 0
    psnrs = []
    mssims = []
    containers = []
    for start in range(0, len(frames), gop_size):
        chunk = Clip(frames=frames[start:start + gop_size])
        container, recons = encode_gop(model, chunk, backend=backend)
        containers.append(container)
        total_bytes += container.serialized_bytes
        for f, r in zip(chunk.frames, recons):
            rec = r[0, 0].cpu().numpy()
            psnrs.append(psnr(f.pixels, rec))
            if with_msssim:
                mssims.append(msssim_log(f.pixels, rec))
    point = RDPoint(
        bpp=8.0 * total_bytes / (len(frames) * sequence.height * sequence.width),
        psnr_db=float(np.mean(psnrs)),
        msssim_log_db=float(np.mean(mssims)) if mssims else 0.0,
    )
    return point, containers


@torch.no_grad()
def gop_sweep(models: Sequence[VideoModel], sequence: Clip,
              gop_sizes: Sequence[int], backend=None) -> list[dict]:
    """Bitrate saving of GoP coding against all-intra, per GoP size.

    ``models`` is the rate ladder (one trained model per lambda); the
    matched intra reference reuses each model's own I-codec by coding
    with GoP size 1.
    """
    if max(gop_sizes) > sequence.gop_size:
        raise ValueError(
            f"sequence has {sequence.gop_size} frames, shorter than GoP {max(gop_sizes)}"
        )
    intra_curve = [encode_sequence(m, sequence, 1, backend=backend)[0] for m in models]
    rows = []
    for g in gop_sizes:
        if g == 1:
            video_curve = intra_curve
        else:
            video_curve = [encode_sequence(m, sequence, g, backend=backend)[0] for m in models]
        delta = bd_rate(intra_curve, video_curve)
        rows.append({
            "gop": int(g),
            "bd_rate_pct": delta,
            "bitrate_saving_pct": -delta,
        })
    return rows


def ncc_map(latents: torch.Tensor, window: int = 5) -> np.ndarray:
    """Mean per-channel normalized cross-correlation against each offset
    in a window x window neighborhood; the center entry is 1."""
    t = latents.detach().to(torch.float64).cpu().numpy()
    if t.ndim == 3:
        t = t[None]
    n, c, h, w = t.shape
    r = window // 2
    out = np.zeros((window, window), dtype=np.float64)
    for dr in range(-r, r + 1):
        for dc in range(-r, r + 1):
            r0, r1 = max(0, dr), min(h, h + dr)
            c0, c1 = max(0, dc), min(w, w + dc)
            corrs = []
            for ch in range(c):
                a = t[:, ch, r0:r1, c0:c1].reshape(-1)
                b = t[:, ch, r0 - dr:r1 - dr, c0 - dc:c1 - dc].reshape(-1)
                sa, sb = a.std(), b.std()
                if sa < 1e-12 or sb < 1e-12:
                    corrs.append(0.0)
                    continue
                corrs.append(float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb)))
            out[dr + r, dc + r] = np.mean(corrs)
    return out


@torch.no_grad()
def latent_correlation(model: VideoModel, frames: Clip | np.ndarray,
                       window: int = 5) -> tuple[np.ndarray, float]:
    """Spatial correlation of the I-model's normalized latents.

    Latents are normalized by the entropy model's (mu, sigma); returns
    the window x window mean |NCC| map and its mean absolute off-center
    value.
    """
    if isinstance(frames, Clip):
        arr = frames.as_array()
    else:
        arr = np.asarray(frames, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None]
    x = torch.from_numpy(arr).unsqueeze(1)
    y = model.intra.analysis(x)
    out = model.intra.entropy(y, training=False)
    y_norm = (y - out["mu"]) / out["sigma"]
    m = ncc_map(y_norm, window)
    mask = np.ones_like(m, dtype=bool)
    mask[window // 2, window // 2] = False
    return m, float(np.abs(m[mask]).mean())


# -- traditional-codec baselines ------------------------------------------


@dataclass
class BaselineResult:
    status: str  # ok | skipped | failed
    rd: RDPoint | None
    command: str
    detail: str = ""


def baseline_command(codec: str, width: int, height: int, q: int, gop: int,
                     inp: str, outp: str) -> list[str]:
    """The documented encoder invocation, parameterized."""
    if codec == "h264":
        lib, params = "libx264", "-x264-params"
    elif codec == "h265":
        lib, params = "libx265", "-x265-params"
    else:
        raise ValueError(f"unknown baseline codec {codec!r}")
    return [
        "ffmpeg", "-y", "-i", inp, "-s", f"{width}x{height}",
        "-c:v", lib, "-crf", str(q), "-g", str(gop),
        params, "bframes=0", "-preset", "medium", outp,
    ]


def vtm_command(input_file: str = "[input video]", frames: int = 30,
                width: int = 512, height: int = 512, qp: int = 32) -> str:
    """Reference low-delay VTM-12.1 invocation (documentation hook; the
    encoder binary is not shipped or exercised here)."""
    return (
        "TAppEncoder -c encoder-lowdelay-main-rext.cfg "
        f"-InputFile={input_file} --InputBitDepth=8 --OutputBitDepth=8 "
        f"OutputBitDepthC=8 --DecodingRefreshType=2 -FramesToBeEncoded={frames} "
        f"--SourceWidth={width} --SourceHeight={height} --IntraPeriod=32 "
        f"--QP={qp} --Level=6.2"
    )


def _write_y4m(path: Path, clip: Clip):
    h, w = clip.height, clip.width
    with open(path, "wb") as fh:
        fh.write(f"YUV4MPEG2 W{w} H{h} F25:1 Ip A1:1 Cmono\n".encode())
        for frame in clip.frames:
            fh.write(b"FRAME\n")
            fh.write(np.clip(np.rint(frame.pixels * 255.0), 0, 255).astype(np.uint8).tobytes())


def run_baseline(codec: str, clip: Clip, q: int, gop: int = 30) -> BaselineResult:
    """Code the clip with an external encoder and measure the RD point.

    A missing ffmpeg binary yields status "skipped", never an error; the
    clip is exported as 8-bit grayscale y4m using the same [0,1] -> 255
    mapping PSNR uses.
    """
    command_doc = " ".join(baseline_command(codec, clip.width, clip.height, q, gop,
                                            "[input video]", "[output]"))
    if shutil.which("ffmpeg") is None:
        return BaselineResult(status="skipped", rd=None, command=command_doc,
                              detail="ffmpeg not on PATH")
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        src = tmp / "in.y4m"
        enc = tmp / f"out_{codec}.mkv"
        raw = tmp / "dec.raw"
        _write_y4m(src, clip)
        cmd = baseline_command(codec, clip.width, clip.height, q, gop, str(src), str(enc))
        try:
            subprocess.run(cmd, check=True, capture_output=True)
            subprocess.run(
                ["ffmpeg", "-y", "-i", str(enc), "-pix_fmt", "gray",
                 "-f", "rawvideo", str(raw)],
                check=True, capture_output=True,
            )
        except subprocess.CalledProcessError as exc:
            return BaselineResult(status="failed", rd=None, command=" ".join(cmd),
                                  detail=exc.stderr.decode(errors="replace")[-400:])
        data = np.fromfile(raw, dtype=np.uint8)
        n = clip.gop_size * clip.height * clip.width
        if len(data) < n:
            return BaselineResult(status="failed", rd=None, command=" ".join(cmd),
                                  detail=f"decoded {len(data)} bytes, expected {n}")
        frames8 = data[:n].reshape(clip.gop_size, clip.height, clip.width) / 255.0
        ref8 = np.stack([
            np.clip(np.rint(f.pixels * 255.0), 0, 255) / 255.0 for f in clip.frames
        ])
        psnrs = [psnr(a, b) for a, b in zip(ref8, frames8)]
        mss = [msssim_log(a, b) for a, b in zip(ref8, frames8)]
        rd = RDPoint(
            bpp=8.0 * enc.stat().st_size / (clip.gop_size * clip.height * clip.width),
            psnr_db=float(np.mean(psnrs)),
            msssim_log_db=float(np.mean(mss)),
        )
        return BaselineResult(status="ok", rd=rd, command=" ".join(cmd))


def write_records(path, records: list[dict]):
    """Line-delimited JSON, one record per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
