"""Windowed-transformer analysis/synthesis transforms.

The encoder patchifies, runs attention blocks inside non-overlapping
(optionally shifted) windows and halves resolution between stages; the
decoder mirrors it with patch splitting and a final unpatchify. Blocks
come in two flavors: the plain MLP feed-forward and the hybrid variant
that adds a depthwise-conv locality branch with channel gating. A small
strided-conv autoencoder is included as the non-transformer baseline.

Token maps are kept channels-last (B, H, W, C) inside the transformer
stages; the module boundary is NCHW.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data_model import ModelConfig

__all__ = [
    "window_partition",
    "window_reverse",
    "WindowAttention",
    "SwinBlock",
    "BlockPair",
    "HCMFF",
    "Mlp",
    "PatchEmbed",
    "PatchUnembed",
    "PatchMerge",
    "PatchSplit",
    "TransformEncoder",
    "TransformDecoder",
    "ConvEncoder",
    "ConvDecoder",
    "build_encoder",
    "build_decoder",
]


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nH * nW, window*window, C)."""
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ValueError(f"token map {h}x{w} not divisible by window {window}")
    x = x.view(b, h // window, window, w // window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)


def window_reverse(windows: torch.Tensor, window: int, h: int, w: int) -> torch.Tensor:
    """Exact inverse of window_partition."""
    b = windows.shape[0] // ((h // window) * (w // window))
    x = windows.view(b, h // window, w // window, window, window, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


def relative_position_index(window: int) -> torch.Tensor:
    """(M^2, M^2) lookup into the (2M-1)^2 relative-position bias table."""
    coords = torch.stack(
        torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")
    )
    flat = coords.flatten(1)  # 2, M^2
    rel = flat[:, :, None] - flat[:, None, :]  # 2, M^2, M^2
    rel = rel.permute(1, 2, 0).contiguous()
    rel[:, :, 0] += window - 1
    rel[:, :, 1] += window - 1
    rel[:, :, 0] *= 2 * window - 1
    return rel.sum(-1)


class WindowAttention(nn.Module):
    """Multi-head self-attention within a window, with a learnable
    relative-position bias shared across windows."""

    def __init__(self, dim: int, window: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"heads {num_heads} must divide dim {dim}")
        self.dim = dim
        self.window = window
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)
        self.bias_table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, num_heads))
        self.register_buffer("bias_index", relative_position_index(window), persistent=False)
        nn.init.trunc_normal_(self.bias_table, std=0.02)

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor | None = None) -> torch.Tensor:
        """x: (num_windows*B, N, C); attn_mask: (num_windows, N, N) additive."""
        b_, n, c = x.shape
        qkv = self.qkv(x).reshape(b_, n, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)  # each (b_, heads, N, d)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        bias = self.bias_table[self.bias_index.view(-1)].view(n, n, -1)
        attn = attn + bias.permute(2, 0, 1).unsqueeze(0)
        if attn_mask is not None:
            nw = attn_mask.shape[0]
            attn = attn.view(b_ // nw, nw, self.num_heads, n, n) + attn_mask[None, :, None]
            attn = attn.view(b_, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b_, n, c)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.fc2 = nn.Linear(dim * ratio, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SqueezeExcite(nn.Module):
    """Global-average channel gating."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):  # (B, C, H, W)
        s = x.mean(dim=(2, 3))
        s = torch.sigmoid(self.fc2(F.gelu(self.fc1(s))))
        return x * s[:, :, None, None]


class HCMFF(nn.Module):
    """Hybrid feed-forward: parallel MLP branch and conv locality branch.

    The locality branch expands each token, reshapes tokens to a 2-D map,
    applies a 3x3 depthwise conv plus squeeze-excite gating, and projects
    back to the token dimension. Branch outputs are summed.
    """

    def __init__(self, dim: int, mlp_ratio: int = 4, locality_ratio: int = 2, se_reduction: int = 4):
        super().__init__()
        self.mlp = Mlp(dim, mlp_ratio)
        hidden = dim * locality_ratio
        self.expand = nn.Linear(dim, hidden)
        self.dwconv = nn.Conv2d(hidden, hidden, kernel_size=3, padding=1, groups=hidden)
        self.se = SqueezeExcite(hidden, se_reduction)
        self.project = nn.Linear(hidden, dim)

    def forward(self, x):  # (B, H, W, C)
        b, h, w, c = x.shape
        loc = F.gelu(self.expand(x)).permute(0, 3, 1, 2)
        loc = F.gelu(self.dwconv(loc))
        loc = self.se(loc)
        loc = self.project(loc.permute(0, 2, 3, 1))
        return self.mlp(x) + loc


def shift_attn_mask(h: int, w: int, window: int, shift: int, device=None) -> torch.Tensor | None:
    """Additive mask forbidding attention across pre-roll window borders.

    Uses -inf so suppressed pairs get exactly zero weight after softmax;
    every row keeps at least its own token.
    """
    if shift == 0:
        return None
    img = torch.zeros(1, h, w, 1, device=device)
    cnt = 0
    for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            img[:, hs, ws, :] = cnt
            cnt += 1
    mask_windows = window_partition(img, window).squeeze(-1)  # nW, N
    diff = mask_windows.unsqueeze(1) - mask_windows.unsqueeze(2)
    return torch.where(diff != 0, torch.full_like(diff, float("-inf")), torch.zeros_like(diff))


class SwinBlock(nn.Module):
    """LN -> (S)W-MSA -> residual -> LN -> feed-forward -> residual."""

    def __init__(self, dim: int, num_heads: int, window: int, shift: int,
                 kind: str, mlp_ratio: int = 4, locality_ratio: int = 2, se_reduction: int = 4):
        super().__init__()
        if shift not in (0, window // 2):
            raise ValueError(f"shift must be 0 or window/2, got {shift}")
        self.window = window
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        if kind == "hcmwin":
            self.ffn = HCMFF(dim, mlp_ratio, locality_ratio, se_reduction)
        elif kind == "swin_mlp":
            self.ffn = Mlp(dim, mlp_ratio)
        else:
            raise ValueError(f"unknown block kind {kind!r}")
        self._mask_cache: dict[tuple, torch.Tensor | None] = {}

    def _mask_for(self, h, w, shift, device):
        key = (h, w, shift, str(device))
        if key not in self._mask_cache:
            self._mask_cache[key] = shift_attn_mask(h, w, self.window, shift, device)
        return self._mask_cache[key]

    def forward(self, x):  # (B, H, W, C)
        b, h, w, c = x.shape
        # Shifting is pointless (and the roll a no-op modulo the map) when
        # one window covers the whole map.
        shift = self.shift if min(h, w) > self.window else 0

        shortcut = x
        x = self.norm1(x)
        if shift:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
        windows = window_partition(x, self.window)
        windows = self.attn(windows, self._mask_for(h, w, shift, x.device))
        x = window_reverse(windows, self.window, h, w)
        if shift:
            x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
        x = shortcut + x
        return x + self.ffn(self.norm2(x))


class BlockPair(nn.Module):
    """W-MSA block followed by its shifted counterpart."""

    def __init__(self, dim, num_heads, window, kind, **ffn_kwargs):
        super().__init__()
        self.block1 = SwinBlock(dim, num_heads, window, 0, kind, **ffn_kwargs)
        self.block2 = SwinBlock(dim, num_heads, window, window // 2, kind, **ffn_kwargs)

    def forward(self, x):
        return self.block2(self.block1(x))


class PatchEmbed(nn.Module):
    """Split into non-overlapping patches and linearly embed."""

    def __init__(self, in_channels: int, embed_dim: int, patch: int):
        super().__init__()
        self.patch = patch
        self.proj = nn.Conv2d(in_channels, embed_dim, kernel_size=patch, stride=patch)

    def forward(self, x):  # (B, C, H, W) -> (B, H/p, W/p, C')
        if x.shape[-2] % self.patch or x.shape[-1] % self.patch:
            raise ValueError(
                f"input {tuple(x.shape[-2:])} not divisible by patch size {self.patch}"
            )
        return self.proj(x).permute(0, 2, 3, 1)


class PatchUnembed(nn.Module):
    """De-embed tokens back to pixel space (inverse-shaped to PatchEmbed)."""

    def __init__(self, embed_dim: int, out_channels: int, patch: int):
        super().__init__()
        self.patch = patch
        self.out_channels = out_channels
        self.proj = nn.Linear(embed_dim, out_channels * patch * patch)

    def forward(self, x):  # (B, h, w, C) -> (B, C_out, h*p, w*p)
        x = self.proj(x).permute(0, 3, 1, 2)
        return F.pixel_shuffle(x, self.patch)


class PatchMerge(nn.Module):
    """Concatenate 2x2 neighborhoods depthwise and project."""

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, out_dim, bias=False)

    def forward(self, x):  # (B, H, W, C) -> (B, H/2, W/2, out)
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"token map {h}x{w} must have even dims to merge")
        x = x.view(b, h // 2, 2, w // 2, 2, c).permute(0, 1, 3, 2, 4, 5).reshape(b, h // 2, w // 2, 4 * c)
        return self.reduction(self.norm(x))


class PatchSplit(nn.Module):
    """Project then expand 2x2 spatially (inverse-shaped to PatchMerge)."""

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.expansion = nn.Linear(dim, 4 * out_dim, bias=False)

    def forward(self, x):  # (B, h, w, C) -> (B, 2h, 2w, out)
        b, h, w, c = x.shape
        x = self.expansion(self.norm(x)).view(b, h, w, 2, 2, -1)
        return x.permute(0, 1, 3, 2, 4, 5).reshape(b, 2 * h, 2 * w, -1)


class TransformEncoder(nn.Module):
    """Analysis transform: patchify, block stages, merges; x16 overall."""

    def __init__(self, config: ModelConfig, in_channels: int):
        super().__init__()
        dims = config.stage_dims
        self.config = config
        self.embed = PatchEmbed(in_channels, dims[0], config.patch_size)
        ffn_kwargs = dict(
            mlp_ratio=config.mlp_ratio,
            locality_ratio=config.locality_ratio,
            se_reduction=config.se_reduction,
        )
        stages = []
        merges = []
        for i, dim in enumerate(dims):
            stages.append(
                nn.Sequential(*[
                    BlockPair(dim, config.stage_heads[i], config.window_size,
                              config.transform_kind, **ffn_kwargs)
                    for _ in range(config.stage_depths[i] // 2)
                ])
            )
            if i + 1 < len(dims):
                merges.append(PatchMerge(dim, dims[i + 1]))
        self.stages = nn.ModuleList(stages)
        self.merges = nn.ModuleList(merges)

    def forward(self, x):  # (B, C_in, H, W) -> (B, C_y, H/16, W/16)
        t = self.embed(x)
        for i, stage in enumerate(self.stages):
            t = stage(t)
            if i < len(self.merges):
                t = self.merges[i](t)
        # NCHW layout, not a channels-last view: coding requires encoder
        # and decoder to feed identically laid out tensors to the convs.
        return t.permute(0, 3, 1, 2).contiguous()


class TransformDecoder(nn.Module):
    """Synthesis transform mirroring TransformEncoder."""

    def __init__(self, config: ModelConfig, out_channels: int):
        super().__init__()
        dims = config.stage_dims
        self.config = config
        ffn_kwargs = dict(
            mlp_ratio=config.mlp_ratio,
            locality_ratio=config.locality_ratio,
            se_reduction=config.se_reduction,
        )
        stages = []
        splits = []
        for i in range(len(dims) - 1, -1, -1):
            stages.append(
                nn.Sequential(*[
                    BlockPair(dims[i], config.stage_heads[i], config.window_size,
                              config.transform_kind, **ffn_kwargs)
                    for _ in range(config.stage_depths[i] // 2)
                ])
            )
            if i > 0:
                splits.append(PatchSplit(dims[i], dims[i - 1]))
        self.stages = nn.ModuleList(stages)
        self.splits = nn.ModuleList(splits)
        self.unembed = PatchUnembed(dims[0], out_channels, config.patch_size)

    def forward(self, y):  # (B, C_y, h, w) -> (B, C_out, 16h, 16w)
        t = y.permute(0, 2, 3, 1)
        for i, stage in enumerate(self.stages):
            t = stage(t)
            if i < len(self.splits):
                t = self.splits[i](t)
        return self.unembed(t)


class ConvEncoder(nn.Module):
    """Strided-conv baseline analysis transform (same x16 reduction)."""

    def __init__(self, config: ModelConfig, in_channels: int):
        super().__init__()
        dims = (in_channels,) + tuple(config.stage_dims)
        layers = []
        for i in range(len(config.stage_dims)):
            layers.append(nn.Conv2d(dims[i], dims[i + 1], kernel_size=5, stride=2, padding=2))
            if i + 1 < len(config.stage_dims):
                layers.append(nn.GELU())
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class ConvDecoder(nn.Module):
    def __init__(self, config: ModelConfig, out_channels: int):
        super().__init__()
        dims = tuple(config.stage_dims)[::-1] + (out_channels,)
        layers = []
        for i in range(len(dims) - 1):
            layers.append(
                nn.ConvTranspose2d(dims[i], dims[i + 1], kernel_size=5, stride=2,
                                   padding=2, output_padding=1)
            )
            if i < len(dims) - 2:
                layers.append(nn.GELU())
        self.net = nn.Sequential(*layers)

    def forward(self, y):
        return self.net(y)


def build_encoder(config: ModelConfig, in_channels: int) -> nn.Module:
    if config.transform_kind == "conv":
        return ConvEncoder(config, in_channels)
    return TransformEncoder(config, in_channels)


def build_decoder(config: ModelConfig, out_channels: int) -> nn.Module:
    if config.transform_kind == "conv":
        return ConvDecoder(config, out_channels)
    return TransformDecoder(config, out_channels)
