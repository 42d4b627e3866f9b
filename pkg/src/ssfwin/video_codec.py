"""End-to-end I-frame and P-frame models, GoP coding and the container.

The P-frame pipeline: a flow codec jointly estimates and compresses the
motion-plus-scale field from the stacked (current, previous-recon) pair;
the previous reconstruction is warped through a scale-space volume; the
residual against that prediction goes through its own codec. Every frame
is reconstructed from decoded latents on both sides, so encoder and
decoder reconstructions are bitwise identical and P-chains never drift
apart.

Container grammar (byte-exact):

    header:  magic "SSFW" | version u8 | config-hash 16B | gop u16 |
             n_frames u16 | height u16 | width u16          (29 bytes)
    per frame section:
             tag u8 ("I" or "P") | varint content-len | content |
             crc32(content) u32 LE
    section content:
             varint n_substreams | (varint len | bytes) * n

Substream order per codec is [hyper, seg0-anchor, seg0-nonanchor, ...];
a P section carries the flow codec's substreams then the residual's.
Containers are self-delimiting, so multi-GoP files are concatenations.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .data_model import Clip, Frame, FlowField, ModelConfig
from .entropy_model import ChannelCheckerboardEntropy, CodedLatent
from .scale_space import build_volume, warp_volume
from .transform import build_decoder, build_encoder

__all__ = [
    "MAGIC",
    "VERSION",
    "BitstreamContainer",
    "ContainerError",
    "VideoModel",
    "encode_gop",
    "decode_gop",
    "parse_containers",
]

MAGIC = b"SSFW"
VERSION = 1
_HEADER = struct.Struct("<4sB16sHHHH")

TAG_I = ord("I")
TAG_P = ord("P")


class ContainerError(ValueError):
    """Malformed or mismatched bitstream container."""


def _write_varint(value: int) -> bytes:
    out = bytearray()
    while True:
        b = value & 0x7F
        value >>= 7
        if value:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _read_varint(data: bytes, pos: int) -> tuple[int, int]:
    value = 0
    shift = 0
    while True:
        if pos >= len(data):
            raise ContainerError("truncated varint")
        b = data[pos]
        pos += 1
        value |= (b & 0x7F) << shift
        if not b & 0x80:
            return value, pos
        shift += 7
        if shift > 63:
            raise ContainerError("oversized varint")


@dataclass
class BitstreamContainer:
    """Self-describing byte container for one coded GoP."""

    config_hash: bytes
    gop_size: int
    height: int
    width: int
    sections: list[tuple[int, list[bytes]]] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return len(self.sections)

    def add_section(self, tag: int, substreams: list[bytes]):
        self.sections.append((tag, list(substreams)))

    @staticmethod
    def _section_content(substreams: list[bytes]) -> bytes:
        parts = [_write_varint(len(substreams))]
        for s in substreams:
            parts.append(_write_varint(len(s)))
            parts.append(s)
        return b"".join(parts)

    def serialize(self) -> bytes:
        out = bytearray(
            _HEADER.pack(MAGIC, VERSION, self.config_hash, self.gop_size,
                         self.n_frames, self.height, self.width)
        )
        for tag, subs in self.sections:
            content = self._section_content(subs)
            out.append(tag)
            out += _write_varint(len(content))
            out += content
            out += struct.pack("<I", zlib.crc32(content))
        return bytes(out)

    @classmethod
    def parse(cls, data: bytes, pos: int = 0) -> tuple["BitstreamContainer", int]:
        if len(data) - pos < _HEADER.size:
            raise ContainerError("truncated container header")
        magic, version, chash, gop, n_frames, h, w = _HEADER.unpack_from(data, pos)
        if magic != MAGIC:
            raise ContainerError(f"bad magic {magic!r}")
        if version != VERSION:
            raise ContainerError(f"unsupported container version {version}")
        pos += _HEADER.size
        container = cls(config_hash=chash, gop_size=gop, height=h, width=w)
        for _ in range(n_frames):
            if pos >= len(data):
                raise ContainerError("truncated container: missing section")
            tag = data[pos]
            pos += 1
            length, pos = _read_varint(data, pos)
            if pos + length + 4 > len(data):
                raise ContainerError("truncated section")
            content = data[pos:pos + length]
            pos += length
            (crc_stored,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if zlib.crc32(content) != crc_stored:
                raise ContainerError("section checksum mismatch")
            subs = []
            sp = 0
            n_subs, sp = _read_varint(content, sp)
            for _ in range(n_subs):
                sl, sp = _read_varint(content, sp)
                subs.append(content[sp:sp + sl])
                sp += sl
            if sp != len(content):
                raise ContainerError("trailing bytes in section content")
            container.sections.append((tag, subs))
        return container, pos

    def section_sizes(self) -> list[dict]:
        """Per-section byte accounting for the inspect command."""
        rows = []
        for i, (tag, subs) in enumerate(self.sections):
            content = self._section_content(subs)
            rows.append({
                "frame": i,
                "type": chr(tag),
                "substreams": len(subs),
                "payload_bytes": sum(len(s) for s in subs),
                "section_bytes": 1 + len(_write_varint(len(content))) + len(content) + 4,
            })
        return rows

    @property
    def payload_bytes(self) -> int:
        """Sum of serialized section bytes (everything but the header)."""
        return sum(r["section_bytes"] for r in self.section_sizes())

    @property
    def serialized_bytes(self) -> int:
        return _HEADER.size + self.payload_bytes


def parse_containers(data: bytes) -> list[BitstreamContainer]:
    """Split a concatenated multi-GoP file into containers."""
    out = []
    pos = 0
    while pos < len(data):
        container, pos = BitstreamContainer.parse(data, pos)
        out.append(container)
    return out


class _Codec(nn.Module):
    """Transform pair plus entropy model for one latent kind."""

    def __init__(self, config: ModelConfig, in_channels: int, out_channels: int):
        super().__init__()
        self.analysis = build_encoder(config, in_channels)
        self.synthesis = build_decoder(config, out_channels)
        self.entropy = ChannelCheckerboardEntropy(config)

    def forward(self, x: torch.Tensor, training: bool, generator=None):
        y = self.analysis(x)
        out = self.entropy(y, training=training, generator=generator)
        recon = self.synthesis(out["y_hat"])
        return recon, out

    def compress(self, x: torch.Tensor, backend=None) -> tuple[list[bytes], CodedLatent, torch.Tensor]:
        y = self.analysis(x)
        coded = self.entropy.compress(y, backend=backend)
        recon = self.synthesis(coded.y_hat)
        substreams = [coded.z_stream] + coded.streams
        return substreams, coded, recon

    def decompress(self, substreams: list[bytes], latent_shape, backend=None) -> torch.Tensor:
        z_stream, streams = substreams[0], substreams[1:]
        y_hat = self.entropy.decompress(streams, z_stream, latent_shape, backend=backend)
        return self.synthesis(y_hat)


class VideoModel(nn.Module):
    """I-frame codec plus the flow/residual P-frame pair."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.intra = _Codec(config, config.frame_channels, config.frame_channels)
        self.flow = _Codec(config, 2 * config.frame_channels, 3)
        self.residual = _Codec(config, config.frame_channels, config.frame_channels)

    # -- shared P-frame machinery ---------------------------------------

    def _flow_field(self, flow_raw: torch.Tensor):
        # fx, fy are raw pixel displacements; fz maps through a scaled
        # sigmoid onto the open scale interval (0, M).
        fx = flow_raw[:, 0]
        fy = flow_raw[:, 1]
        fz = float(self.config.num_scales) * torch.sigmoid(flow_raw[:, 2])
        return fx, fy, fz

    def flow_field(self, flow_raw: torch.Tensor) -> FlowField:
        """Decoded motion field as a value object (batch of one)."""
        fx, fy, fz = self._flow_field(flow_raw)
        return FlowField(
            fx=fx[0].detach().cpu().numpy(),
            fy=fy[0].detach().cpu().numpy(),
            fz=fz[0].detach().cpu().numpy(),
        )

    def _warp_prediction(self, x_prev: torch.Tensor, flow_raw: torch.Tensor) -> torch.Tensor:
        volume = build_volume(x_prev, self.config.scale_sigmas)
        fx, fy, fz = self._flow_field(flow_raw)
        return warp_volume(volume, fx, fy, fz).unsqueeze(1)

    # -- training forward -------------------------------------------------

    def forward(self, clips: torch.Tensor, training: bool = True, generator=None) -> dict:
        """clips: (B, T, 1, H, W) in [0, 1]. Returns reconstructions and
        per-frame likelihood collections for the RD loss."""
        b, t = clips.shape[0], clips.shape[1]
        recons = []
        likelihoods = []  # list of dicts with y/z likelihood tensors
        x0_hat, intra_out = self.intra(clips[:, 0], training, generator)
        x0_hat = x0_hat.clamp(0.0, 1.0) if not training else x0_hat
        recons.append(x0_hat)
        likelihoods.append({
            "y": intra_out["y_likelihood"], "z": intra_out["z_likelihood"],
        })
        x_prev = x0_hat
        for i in range(1, t):
            x_t = clips[:, i]
            flow_in = torch.cat([x_t, x_prev], dim=1)
            flow_raw, flow_out = self.flow(flow_in, training, generator)
            x_bar = self._warp_prediction(x_prev, flow_raw)
            r = x_t - x_bar
            r_hat, res_out = self.residual(r, training, generator)
            x_hat = x_bar + r_hat
            if not training:
                x_hat = x_hat.clamp(0.0, 1.0)
            recons.append(x_hat)
            likelihoods.append({
                "y": flow_out["y_likelihood"], "z": flow_out["z_likelihood"],
                "y_res": res_out["y_likelihood"], "z_res": res_out["z_likelihood"],
            })
            x_prev = x_hat
        return {"recons": recons, "likelihoods": likelihoods}

    # -- coding -----------------------------------------------------------

    @torch.no_grad()
    def i_frame_encode(self, x0: torch.Tensor, backend=None):
        subs, coded, recon = self.intra.compress(x0, backend=backend)
        return subs, recon.clamp(0.0, 1.0), coded

    @torch.no_grad()
    def i_frame_decode(self, substreams: list[bytes], latent_shape, backend=None):
        recon = self.intra.decompress(substreams, latent_shape, backend=backend)
        return recon.clamp(0.0, 1.0)

    @torch.no_grad()
    def p_frame_encode(self, x_t: torch.Tensor, x_prev: torch.Tensor, backend=None):
        flow_in = torch.cat([x_t, x_prev], dim=1)
        flow_subs, flow_coded, flow_raw = self.flow.compress(flow_in, backend=backend)
        x_bar = self._warp_prediction(x_prev, flow_raw)
        r = x_t - x_bar
        res_subs, res_coded, r_hat = self.residual.compress(r, backend=backend)
        x_hat = (x_bar + r_hat).clamp(0.0, 1.0)
        return flow_subs + res_subs, x_hat, (flow_coded, res_coded)

    @torch.no_grad()
    def p_frame_decode(self, substreams: list[bytes], x_prev: torch.Tensor,
                       latent_shape, backend=None):
        n = len(substreams) // 2
        flow_raw = self.flow.decompress(substreams[:n], latent_shape, backend=backend)
        x_bar = self._warp_prediction(x_prev, flow_raw)
        r_hat = self.residual.decompress(substreams[n:], latent_shape, backend=backend)
        return (x_bar + r_hat).clamp(0.0, 1.0)

    def latent_shape(self, height: int, width: int) -> tuple[int, int]:
        f = self.config.downsample_factor
        return height // f, width // f


def _clip_to_tensor(clip: Clip, device) -> torch.Tensor:
    arr = clip.as_array()  # (T, H, W)
    return torch.from_numpy(arr).unsqueeze(1).to(device)  # (T, 1, H, W)


@torch.no_grad()
def encode_gop(model: VideoModel, clip: Clip, backend=None) -> tuple[BitstreamContainer, list[torch.Tensor]]:
    """Code one clip; returns the container and encoder-side recons."""
    from .data_model import validate_clip

    validate_clip(clip, model.config)
    device = next(model.parameters()).device
    frames = _clip_to_tensor(clip, device)
    container = BitstreamContainer(
        config_hash=model.config.config_hash(),
        gop_size=clip.gop_size,
        height=clip.height,
        width=clip.width,
    )
    recons = []
    subs, x_hat, _ = model.i_frame_encode(frames[0:1], backend=backend)
    container.add_section(TAG_I, subs)
    recons.append(x_hat)
    x_prev = x_hat
    for t in range(1, clip.gop_size):
        subs, x_hat, _ = model.p_frame_encode(frames[t:t + 1], x_prev, backend=backend)
        container.add_section(TAG_P, subs)
        recons.append(x_hat)
        x_prev = x_hat
    return container, recons


@torch.no_grad()
def decode_gop(model: VideoModel, container: BitstreamContainer,
               backend=None, force: bool = False) -> tuple[Clip, list[torch.Tensor]]:
    """Decode a container back to reconstructed frames."""
    if not force and container.config_hash != model.config.config_hash():
        raise ContainerError(
            "container was coded with a different model config "
            f"(hash {container.config_hash.hex()} != {model.config.config_hash().hex()}); "
            "pass force=True to override"
        )
    latent_shape = model.latent_shape(container.height, container.width)
    recons = []
    x_prev = None
    for i, (tag, subs) in enumerate(container.sections):
        if tag == TAG_I:
            x_hat = model.i_frame_decode(subs, latent_shape, backend=backend)
        elif tag == TAG_P:
            if x_prev is None:
                raise ContainerError(f"P section {i} without a preceding I frame")
            x_hat = model.p_frame_decode(subs, x_prev, latent_shape, backend=backend)
        else:
            raise ContainerError(f"unknown section tag {tag:#x} at frame {i}")
        recons.append(x_hat)
        x_prev = x_hat
    frames = tuple(
        Frame(pixels=r[0, 0].cpu().numpy()) for r in recons
    )
    return Clip(frames=frames), recons
