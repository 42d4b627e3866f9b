"""Core value types shared across the codec pipeline.

Everything here is an immutable value object: frames, clips, latent
tensors, flow fields, model configuration and rate-distortion points.
Validation lives next to the types so every other module can assume
well-formed inputs.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "Frame",
    "Clip",
    "LatentKind",
    "LatentTensor",
    "FlowField",
    "ModelConfig",
    "RDPoint",
    "ClipValidationError",
    "validate_clip",
    "PAPER_LAMBDAS",
]

# Lagrange multipliers used for the full-scale rate ladder.
PAPER_LAMBDAS = (0.00125, 0.0025, 0.005, 0.01, 0.02, 0.04, 0.08, 0.160, 0.320)


class ClipValidationError(ValueError):
    """Raised when a frame or clip violates a structural invariant."""


@dataclass(frozen=True)
class Frame:
    """Single-channel image with pixel values normalized to [0, 1].

    ``bit_depth_origin`` records the quantization level count of the
    source data (256 for 8-bit, 65536 for 16-bit) so exporters can map
    back without guessing.
    """

    pixels: np.ndarray
    bit_depth_origin: int = 256

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        object.__setattr__(self, "pixels", px)
        if px.ndim != 2:
            raise ClipValidationError(f"frame must be 2-D, got shape {px.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class Clip:
    """Ordered frame sequence forming one GoP; frame 0 is the I-frame."""

    frames: tuple[Frame, ...]

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if not self.frames:
            raise ClipValidationError("clip must contain at least one frame")

    @property
    def gop_size(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def width(self) -> int:
        return self.frames[0].width

    def as_array(self) -> np.ndarray:
        """Stack frames into a (T, H, W) float32 array."""
        return np.stack([f.pixels for f in self.frames], axis=0)


class LatentKind(enum.Enum):
    Y_INTRA = "y_intra"
    M_FLOW = "m_flow"
    R_RESIDUAL = "r_residual"
    Z_HYPER = "z_hyper"


@dataclass(frozen=True)
class LatentTensor:
    """4-D (N, C, h, w) latent with its pipeline role attached."""

    data: np.ndarray
    kind: LatentKind

    def __post_init__(self):
        arr = np.asarray(self.data)
        object.__setattr__(self, "data", arr)
        if arr.ndim != 4:
            raise ValueError(f"latent must be 4-D (N,C,h,w), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"latent of kind {self.kind.value} contains non-finite entries")

    @property
    def channels(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement (fx, fy) in pixels plus scale coordinate fz."""

    fx: np.ndarray
    fy: np.ndarray
    fz: np.ndarray

    def __post_init__(self):
        fx, fy, fz = (np.asarray(a, dtype=np.float32) for a in (self.fx, self.fy, self.fz))
        if not (fx.shape == fy.shape == fz.shape):
            raise ValueError(
                f"flow components must share shape, got {fx.shape}, {fy.shape}, {fz.shape}"
            )
        object.__setattr__(self, "fx", fx)
        object.__setattr__(self, "fy", fy)
        object.__setattr__(self, "fz", fz)


@dataclass(frozen=True)
class RDPoint:
    """One operating point of a rate-distortion curve."""

    bpp: float
    psnr_db: float
    msssim_log_db: float

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError(f"bpp must be positive, got {self.bpp}")
        for name in ("psnr_db", "msssim_log_db"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


def _as_tuple(value):
    if isinstance(value, (list, tuple)):
        return tuple(_as_tuple(v) for v in value)
    return value


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and coding hyperparameters.

    The config hash is embedded in bitstreams and checkpoints so that a
    decoder can refuse weights that do not match the stream.
    """

    # Input contract
    frame_channels: int = 1
    patch_size: int = 2

    # Transform stages (patchify + 3 merges: total downsampling x16)
    transform_kind: str = "hcmwin"  # conv | swin_mlp | hcmwin
    stage_dims: tuple[int, ...] = (32, 48, 64, 96)
    stage_depths: tuple[int, ...] = (2, 2, 2, 2)
    stage_heads: tuple[int, ...] = (2, 4, 4, 8)
    window_size: int = 4
    mlp_ratio: int = 4
    locality_ratio: int = 2
    se_reduction: int = 4

    # Latent widths per kind (flow/residual codecs default to the I width)
    latent_channels: int = 96
    hyper_channels: int = 48

    # Entropy model
    segment_plan: tuple[int, ...] = (8, 8, 16, 32, 32)
    sigma_min: float = 1e-2
    likelihood_floor: float = 1e-9
    local_ctx_kernel: int = 5
    global_ctx_heads: int = 4
    mean_offset_coding: bool = True

    # Scale-space warping
    scale_sigmas: tuple[float, ...] = (0.75, 1.5, 3.0, 6.0, 12.0)

    # Operating point (checkpoints are tagged by lambda)
    lambda_rd: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "stage_dims", tuple(self.stage_dims))
        object.__setattr__(self, "stage_depths", tuple(self.stage_depths))
        object.__setattr__(self, "stage_heads", tuple(self.stage_heads))
        object.__setattr__(self, "segment_plan", tuple(self.segment_plan))
        object.__setattr__(self, "scale_sigmas", tuple(float(s) for s in self.scale_sigmas))
        self._validate()

    def _validate(self):
        if not (len(self.stage_dims) == len(self.stage_depths) == len(self.stage_heads)):
            raise ValueError("stage_dims, stage_depths and stage_heads must align")
        for d in self.stage_depths:
            if d % 2 != 0:
                raise ValueError(f"stage depths must be even (W-MSA/SW-MSA pairing), got {d}")
        for dim, heads in zip(self.stage_dims, self.stage_heads):
            if dim % heads != 0:
                raise ValueError(f"head count {heads} must divide stage dim {dim}")
        if self.stage_dims[-1] != self.latent_channels:
            raise ValueError(
                f"final stage dim {self.stage_dims[-1]} must equal latent_channels "
                f"{self.latent_channels}"
            )
        if any(c <= 0 for c in self.segment_plan):
            raise ValueError(f"segment plan entries must be positive, got {self.segment_plan}")
        if sum(self.segment_plan) != self.latent_channels:
            raise ValueError(
                f"segment plan {self.segment_plan} sums to {sum(self.segment_plan)}, "
                f"expected latent_channels={self.latent_channels}"
            )
        sig = self.scale_sigmas
        if any(s <= 0 for s in sig) or any(b <= a for a, b in zip(sig, sig[1:])):
            raise ValueError(f"scale sigmas must be positive and strictly increasing: {sig}")
        if self.lambda_rd <= 0:
            raise ValueError("lambda_rd must be positive")

    @property
    def downsample_factor(self) -> int:
        """Total spatial reduction of the analysis transform."""
        return self.patch_size * 2 ** (len(self.stage_dims) - 1)

    @property
    def num_scales(self) -> int:
        return len(self.scale_sigmas)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**{k: _as_tuple(v) for k, v in data.items()})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))

    def config_hash(self) -> bytes:
        """16-byte stable digest of the canonical serialized form."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).digest()[:16]

    def replace(self, **kwargs) -> "ModelConfig":
        return dataclasses.replace(self, **kwargs)

    # Presets -----------------------------------------------------------

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small config trainable on one CPU/GPU in minutes."""
        return cls(**overrides)

    @classmethod
    def mini(cls, **overrides) -> "ModelConfig":
        """Tiny config for fast tests and sweeps."""
        base = dict(
            stage_dims=(16, 24, 32, 64),
            stage_depths=(2, 2, 2, 2),
            stage_heads=(2, 2, 4, 4),
            window_size=2,
            latent_channels=64,
            hyper_channels=32,
            segment_plan=(8, 8, 16, 16, 16),
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        """Full-scale config (not used by the desk test suite)."""
        base = dict(
            stage_dims=(96, 144, 192, 192),
            stage_depths=(2, 2, 6, 2),
            stage_heads=(3, 6, 12, 24),
            window_size=4,
            latent_channels=192,
            hyper_channels=96,
            segment_plan=(16, 16, 32, 64, 64),
        )
        base.update(overrides)
        return cls(**base)


def validate_clip(clip: Clip, config: ModelConfig) -> Clip:
    """Check clip invariants and return the clip unchanged.

    Raises ClipValidationError naming the offending frame or citing the
    required divisibility factor.
    """
    factor = config.downsample_factor
    h, w = clip.height, clip.width
    if h % factor != 0 or w % factor != 0:
        raise ClipValidationError(
            f"frame dimensions {h}x{w} must be divisible by the transform factor {factor} "
            f"({h} % {factor} = {h % factor}, {w} % {factor} = {w % factor})"
        )
    for i, frame in enumerate(clip.frames):
        if frame.pixels.shape != (h, w):
            raise ClipValidationError(
                f"frame {i} has shape {frame.pixels.shape}, expected ({h}, {w})"
            )
        if not np.all(np.isfinite(frame.pixels)):
            raise ClipValidationError(f"frame {i} contains non-finite pixels")
        lo, hi = float(frame.pixels.min()), float(frame.pixels.max())
        if lo < 0.0 or hi > 1.0:
            raise ClipValidationError(
                f"frame {i} has pixels outside [0, 1] (min={lo:.4g}, max={hi:.4g})"
            )
    return clip
