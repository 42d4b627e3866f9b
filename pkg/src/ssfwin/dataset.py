"""Clip ingestion: a deterministic synthetic generator for desk-scale
training plus a thin reader for directory archives of grayscale images.

Directory layout requirement (documented): ``<root>/<timestamp>.png``
where lexicographic filename order equals temporal order; point the
source at the wavelength subdirectory of an archive. PNG-8, PNG-16 and
``.npy`` arrays are accepted; pixels are normalized to [0, 1].
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .data_model import Clip, Frame

__all__ = [
    "ClipSource",
    "EmptySourceError",
    "load_clips",
    "random_crop",
    "make_synthetic_clip",
    "worker_rng",
]

log = logging.getLogger(__name__)

_IMAGE_SUFFIXES = (".png", ".npy")


class EmptySourceError(ValueError):
    """The archive yields no frames at all."""


@dataclass(frozen=True)
class ClipSource:
    """Where clips come from and how to window them."""

    kind: str = "synthetic"  # synthetic | directory_archive
    root: str | None = None
    seed: int = 0
    clip_length: int = 4
    crop: int | None = None
    overlap_stride: int | None = None  # None: disjoint windows
    n_clips: int = 32  # synthetic only
    frame_size: int = 64  # synthetic only
    motion: str = "translate"  # translate | rotate | brighten

    def __post_init__(self):
        if self.kind not in ("synthetic", "directory_archive"):
            raise ValueError(f"unknown source kind {self.kind!r}")
        if self.clip_length < 1:
            raise ValueError("clip_length must be >= 1")
        if self.crop is not None and self.crop % 16 != 0:
            raise ValueError(f"crop side {self.crop} must be divisible by 16")
        if self.kind == "directory_archive" and not self.root:
            raise ValueError("directory_archive source needs a root path")


def worker_rng(global_seed: int, worker_id: int) -> np.random.Generator:
    """Independent, reproducible stream per (seed, worker)."""
    return np.random.default_rng(np.random.SeedSequence((global_seed, worker_id)))


def random_crop(clip: Clip, side: int, rng: np.random.Generator) -> Clip:
    """Crop the same window out of every frame; offsets come from rng."""
    h, w = clip.height, clip.width
    if side > h or side > w:
        raise ValueError(f"crop side {side} exceeds frame size {h}x{w}")
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    frames = tuple(
        Frame(pixels=f.pixels[top:top + side, left:left + side],
              bit_depth_origin=f.bit_depth_origin)
        for f in clip.frames
    )
    return Clip(frames=frames)


def _blob_params(rng: np.random.Generator, h: int, w: int):
    k = 6
    cx = rng.uniform(0.15 * w, 0.85 * w, size=k)
    cy = rng.uniform(0.15 * h, 0.85 * h, size=k)
    s = rng.uniform(min(h, w) / 16, min(h, w) / 6, size=k)
    a = rng.uniform(0.25, 0.7, size=k)
    return cx, cy, s, a


def _blob_field(xs, ys, cx, cy, s, a):
    out = np.full(xs.shape, 0.08, dtype=np.float64)
    for i in range(len(cx)):
        out += a[i] * np.exp(-((xs - cx[i]) ** 2 + (ys - cy[i]) ** 2) / (2 * s[i] ** 2))
    return np.clip(out, 0.0, 1.0)


def make_synthetic_clip(
    seed: int,
    n_frames: int,
    h: int,
    w: int,
    motion: str = "translate",
    shift: tuple[float, float] | None = None,
    rate: float | None = None,
) -> Clip:
    """Smooth blobs moving analytically under the named motion.

    The field is evaluated in closed form per frame, so integer total
    displacements reproduce exact array shifts (away from borders).
    ``shift`` is pixels/frame for translation; ``rate`` is degrees/frame
    for rotation or relative gain/frame for brightening.
    """
    if h % 16 or w % 16:
        raise ValueError(f"frame dims {h}x{w} must be divisible by 16")
    if motion not in ("translate", "rotate", "brighten"):
        raise ValueError(f"unknown motion {motion!r}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC11F)))
    cx, cy, s, a = _blob_params(rng, h, w)
    if shift is None:
        mag = rng.uniform(0.4, 1.3, size=2)
        sign = rng.choice([-1.0, 1.0], size=2)
        shift = (float(mag[0] * sign[0]), float(mag[1] * sign[1]))
    if rate is None:
        rate = float(rng.uniform(0.6, 2.0)) if motion == "rotate" else 0.05
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    frames = []
    for t in range(n_frames):
        if motion == "translate":
            fx = xs - t * shift[0]
            fy = ys - t * shift[1]
            field = _blob_field(fx, fy, cx, cy, s, a)
        elif motion == "rotate":
            theta = math.radians(rate) * t
            c0x, c0y = (w - 1) / 2, (h - 1) / 2
            dx, dy = xs - c0x, ys - c0y
            rx = c0x + math.cos(-theta) * dx - math.sin(-theta) * dy
            ry = c0y + math.sin(-theta) * dx + math.cos(-theta) * dy
            field = _blob_field(rx, ry, cx, cy, s, a)
        else:  # brighten
            field = np.clip(_blob_field(xs, ys, cx, cy, s, a) * (1.0 + rate * t), 0.0, 1.0)
        frames.append(Frame(pixels=field.astype(np.float32)))
    return Clip(frames=tuple(frames))


def _load_image(path: Path) -> tuple[np.ndarray, int]:
    """Returns pixels in [0, 1] plus the source quantization level count."""
    if path.suffix == ".npy":
        arr = np.asarray(np.load(path), dtype=np.float64)
        peak = arr.max() if arr.size else 1.0
        if peak > 255:
            return (arr / 65535.0).astype(np.float32), 65536
        if peak > 1:
            return (arr / 255.0).astype(np.float32), 256
        return np.clip(arr, 0.0, 1.0).astype(np.float32), 256
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[..., 0]
    if arr.dtype == np.uint8:
        return (arr / 255.0).astype(np.float32), 256
    # uint16, or PIL mode I (16-bit PNG widened to int32)
    return (arr / 65535.0).astype(np.float32), 65536


def _directory_clips(source: ClipSource) -> Iterator[Clip]:
    root = Path(source.root)
    paths = sorted(p for p in root.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not paths:
        raise EmptySourceError(f"no images under {root}")
    stride = source.overlap_stride or source.clip_length
    n = source.clip_length
    if len(paths) < n:
        log.warning("only %d images under %s, need %d for one clip", len(paths), root, n)
        return
    start = 0
    while start + n <= len(paths):
        window = paths[start:start + n]
        frames = []
        for p in window:
            try:
                px, levels = _load_image(p)
                frames.append(Frame(pixels=px, bit_depth_origin=levels))
            except Exception as exc:  # corrupt or unreadable image
                log.warning("skipping clip at %s: %s", p.name, exc)
                frames = None
                break
        if frames is not None:
            yield Clip(frames=tuple(frames))
        start += stride


def _synthetic_clips(source: ClipSource) -> Iterator[Clip]:
    for i in range(source.n_clips):
        clip_seed = int(
            np.random.SeedSequence((source.seed, i)).generate_state(1, np.uint32)[0]
        )
        yield make_synthetic_clip(
            clip_seed, source.clip_length, source.frame_size, source.frame_size,
            motion=source.motion,
        )


def load_clips(source: ClipSource) -> Iterator[Clip]:
    """Yield clips of exactly clip_length time-ordered frames.

    Disjoint windows by default (overlap_stride configures otherwise);
    corrupt images skip their clip with a log line; a source with no
    frames at all raises EmptySourceError.
    """
    gen = _synthetic_clips(source) if source.kind == "synthetic" else _directory_clips(source)
    for i, clip in enumerate(gen):
        if source.crop is not None:
            rng = np.random.default_rng(np.random.SeedSequence((source.seed, i, 0xCB0B)))
            clip = random_crop(clip, source.crop, rng)
        yield clip
