"""Probability modeling of latents.

Three layers of conditioning feed the per-element Gaussian parameters:
a factorized-prior hyper latent (forward adaptation), previously decoded
channel segments (channel context) and, within each segment, already
decoded checkerboard anchors (local conv + global attention spatial
context). Decoding runs segment by segment, two spatial passes per
segment, every pass fully position-parallel.

The same likelihood function serves training (noise-quantized latents)
and coding (rounded latents): a Gaussian CDF difference over the unit
bin, lower-bounded for coder stability.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import entropy_coding as ec
from .data_model import ModelConfig
from .quantization import noise_quantize, round_quantize

__all__ = [
    "LowerBound",
    "lower_bound",
    "gaussian_conditional_likelihood",
    "FactorizedPrior",
    "default_segment_plan",
    "split_channels",
    "merge_channels",
    "anchor_mask",
    "checkerboard_kernel_mask",
    "CheckerboardConv",
    "GlobalContext",
    "HyperEncoder",
    "HyperDecoder",
    "ChannelCheckerboardEntropy",
    "CodedLatent",
]

_INV_SQRT2 = 0.5 ** 0.5


class LowerBound(torch.autograd.Function):
    """max(x, bound) whose gradient passes through when the clamp would
    otherwise trap x below the bound (gradient ascent can escape)."""

    @staticmethod
    def forward(ctx, x, bound):
        b = torch.as_tensor(bound, dtype=x.dtype, device=x.device)
        ctx.save_for_backward(x, b)
        return torch.maximum(x, b)

    @staticmethod
    def backward(ctx, grad_output):
        x, b = ctx.saved_tensors
        pass_through = (x >= b) | (grad_output < 0)
        return grad_output * pass_through, None


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return LowerBound.apply(x, bound)


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x * _INV_SQRT2)


def gaussian_conditional_likelihood(
    y: torch.Tensor,
    mu: torch.Tensor,
    sigma: torch.Tensor,
    sigma_min: float = 1e-2,
    floor: float = 1e-9,
) -> torch.Tensor:
    """P(y) = Phi((y + 1/2 - mu)/sigma) - Phi((y - 1/2 - mu)/sigma).

    Evaluated symmetrically around the mean for numerical stability and
    floored at ``floor`` (pass 0 to get the raw probability).
    """
    sigma = lower_bound(sigma, sigma_min)
    v = torch.abs(y - mu)
    upper = _std_normal_cdf((0.5 - v) / sigma)
    lower = _std_normal_cdf((-0.5 - v) / sigma)
    p = upper - lower
    if floor > 0:
        p = lower_bound(p, floor)
    return p


class FactorizedPrior(nn.Module):
    """Per-channel learned univariate density (monotone-MLP CDF).

    A stack of softplus-weighted affine layers with tanh gating models
    the logit of the CDF independently per channel; integer likelihoods
    are CDF differences over the unit bin.
    """

    def __init__(self, channels: int, filters: tuple[int, ...] = (3, 3, 3),
                 init_scale: float = 3.0, floor: float = 1e-9):
        super().__init__()
        self.channels = channels
        self.filters = tuple(filters)
        self.floor = floor
        dims = (1,) + self.filters + (1,)
        scale = init_scale ** (1.0 / (len(self.filters) + 1))
        self._matrices = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._gates = nn.ParameterList()
        for k in range(len(self.filters) + 1):
            init = math.log(math.expm1(1.0 / scale / dims[k + 1]))
            m = nn.Parameter(torch.full((channels, dims[k + 1], dims[k]), init))
            self._matrices.append(m)
            b = nn.Parameter(torch.empty(channels, dims[k + 1], 1).uniform_(-0.5, 0.5))
            self._biases.append(b)
            if k < len(self.filters):
                self._gates.append(nn.Parameter(torch.zeros(channels, dims[k + 1], 1)))
        self._cdf_cache: ec.QuantizedCDF | None = None

    def _logits(self, x: torch.Tensor) -> torch.Tensor:
        """x: (C, 1, N) sample positions -> CDF logits, monotone in x."""
        for k, matrix in enumerate(self._matrices):
            x = torch.bmm(F.softplus(matrix.to(x.dtype)), x) + self._biases[k].to(x.dtype)
            if k < len(self._gates):
                x = x + torch.tanh(self._gates[k].to(x.dtype)) * torch.tanh(x)
        return x

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        """CDF at positions x of shape (C, N)."""
        return torch.sigmoid(self._logits(x.unsqueeze(1))).squeeze(1)

    def likelihood(self, z: torch.Tensor, floor: float | None = None) -> torch.Tensor:
        """z: (B, C, h, w) -> per-element bin probability."""
        b, c, h, w = z.shape
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        floor = self.floor if floor is None else floor
        x = z.permute(1, 0, 2, 3).reshape(c, 1, -1)
        upper = self._logits(x + 0.5)
        lower = self._logits(x - 0.5)
        # Evaluate the difference on the side with smaller magnitude to
        # avoid catastrophic cancellation of two near-one sigmoids.
        sign = -torch.sign(upper + lower).detach()
        p = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        p = p.reshape(c, b, h, w).permute(1, 0, 2, 3)
        if floor > 0:
            p = lower_bound(p, floor)
        return p

    @torch.no_grad()
    def build_cdf(self, tail_mass: float = 1e-6, max_half_width: int = 4096) -> ec.QuantizedCDF:
        """Tabulate per-channel integer CDF rows for the coder."""
        if self._cdf_cache is not None:
            return self._cdf_cache
        half = 16
        while True:
            bounds = torch.arange(-half - 0.5, half + 1.5, 1.0, dtype=torch.float64)
            grid = bounds.repeat(self.channels, 1)
            cdf = self.cdf(grid)  # (C, 2*half+2) at double precision
            covered = (cdf[:, 0] < tail_mass / 2) & (cdf[:, -1] > 1 - tail_mass / 2)
            if bool(covered.all()) or half >= max_half_width:
                break
            half *= 4
        cdf_np = cdf.numpy()
        rows, offsets = [], []
        n_bounds = cdf_np.shape[1]
        for c in range(self.channels):
            lo = 0
            while lo + 2 < n_bounds and cdf_np[c, lo + 1] < tail_mass / 2:
                lo += 1
            hi = n_bounds - 1
            while hi - 2 > lo and cdf_np[c, hi - 1] > 1 - tail_mass / 2:
                hi -= 1
            inner = cdf_np[c, lo:hi + 1] - cdf_np[c, lo]
            cdf_float = np.concatenate([[0.0], inner[1:], [1.0]])
            rows.append(ec.quantize_cdf(cdf_float))
            offsets.append(lo - half)
        self._cdf_cache = ec.QuantizedCDF(rows=rows, offsets=np.asarray(offsets))
        return self._cdf_cache

    def invalidate_cdf(self):
        self._cdf_cache = None


def default_segment_plan(channels: int) -> tuple[int, ...]:
    """Uneven grouping: small early segments, the bulk at the end."""
    if channels <= 128:
        raise ValueError(
            f"default plan (16, 16, 32, 64, C-128) needs more than 128 channels, got {channels}"
        )
    return (16, 16, 32, 64, channels - 128)


def split_channels(y: torch.Tensor, plan) -> list[torch.Tensor]:
    plan = tuple(plan)
    if sum(plan) != y.shape[1]:
        raise ValueError(f"plan {plan} sums to {sum(plan)}, tensor has {y.shape[1]} channels")
    return list(torch.split(y, list(plan), dim=1))


def merge_channels(segments) -> torch.Tensor:
    return torch.cat(list(segments), dim=1)


def anchor_mask(h: int, w: int, device=None) -> torch.Tensor:
    """Boolean (h, w) map, True where (row + col) is even."""
    r = torch.arange(h, device=device)[:, None]
    c = torch.arange(w, device=device)[None, :]
    return (r + c) % 2 == 0


def checkerboard_kernel_mask(kernel: int) -> torch.Tensor:
    """(k, k) 0/1 mask keeping taps whose offset parity is odd.

    Centered at a non-anchor position these taps land exactly on the
    anchors; the center tap (parity even) is always zero.
    """
    if kernel % 2 == 0:
        raise ValueError("kernel size must be odd")
    r = torch.arange(kernel)[:, None] - kernel // 2
    c = torch.arange(kernel)[None, :] - kernel // 2
    return ((r + c) % 2 != 0).to(torch.float32)


class CheckerboardConv(nn.Module):
    """Conv with a structurally zeroed checkerboard kernel.

    Bias-free so an all-anchor-zero map yields an exactly zero context.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 5):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel, padding=kernel // 2, bias=False)
        self.register_buffer("kernel_mask", checkerboard_kernel_mask(kernel), persistent=False)

    def forward(self, x):
        return F.conv2d(
            x,
            self.conv.weight * self.kernel_mask,
            None,
            padding=self.conv.padding,
        )


class GlobalContext(nn.Module):
    """Masked multi-head attention over the map's tokens.

    Non-anchor queries attend to anchor keys only; anchor positions get a
    zero output. Computed by gathering the two position classes, which is
    exactly the additive -inf masked softmax restricted to its support.

    The checkerboard conv feeding this block is structurally zero at
    anchor positions, which would leave the keys constant and the q/k/v
    projections untrainable; when ``anchor_visible`` is given, anchor
    tokens therefore also embed the decoded anchor latents (bias-free
    1x1, zero at the zeroed non-anchor positions), keeping pass-2
    causality intact while giving the attention something to key on.
    """

    def __init__(self, dim: int, num_heads: int, latent_channels: int | None = None):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"heads {num_heads} must divide context dim {dim}")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.norm = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        if latent_channels is not None:
            self.anchor_embed = nn.Conv2d(latent_channels, dim, 1, bias=False)
        else:
            self.anchor_embed = None

    def forward(self, local_ctx: torch.Tensor, anchors: torch.Tensor,
                anchor_visible: torch.Tensor | None = None) -> torch.Tensor:
        """local_ctx: (B, C, H, W); anchors: (H, W) bool; anchor_visible:
        the segment latents with non-anchors zeroed, or None for plain
        local-context tokens."""
        b, c, h, w = local_ctx.shape
        tokens = local_ctx
        if anchor_visible is not None and self.anchor_embed is not None:
            tokens = tokens + self.anchor_embed(anchor_visible)
        tokens = self.norm(tokens.permute(0, 2, 3, 1).reshape(b, h * w, c))
        amask = anchors.reshape(-1)
        kv = tokens[:, amask]
        qt = tokens[:, ~amask]
        n_q = qt.shape[1]
        out = torch.zeros(b, h * w, c, dtype=local_ctx.dtype, device=local_ctx.device)
        if n_q > 0 and kv.shape[1] > 0:
            d = c // self.num_heads
            q = self.q(qt).view(b, n_q, self.num_heads, d).transpose(1, 2)
            k = self.k(kv).view(b, kv.shape[1], self.num_heads, d).transpose(1, 2)
            v = self.v(kv).view(b, kv.shape[1], self.num_heads, d).transpose(1, 2)
            attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
            ctx = (attn @ v).transpose(1, 2).reshape(b, n_q, c)
            out[:, ~amask] = self.proj(ctx)
        return out.reshape(b, h, w, c).permute(0, 3, 1, 2)


class HyperEncoder(nn.Module):
    """Strided conv stack: latent resolution / 4."""

    def __init__(self, latent_channels: int, hyper_channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(latent_channels, hyper_channels, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(hyper_channels, hyper_channels, 5, stride=2, padding=2),
            nn.GELU(),
            nn.Conv2d(hyper_channels, hyper_channels, 5, stride=2, padding=2),
        )

    def forward(self, y):
        return self.net(y)


class HyperDecoder(nn.Module):
    """Mirror of HyperEncoder; emits 2*C_y feature channels."""

    def __init__(self, latent_channels: int, hyper_channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.ConvTranspose2d(hyper_channels, hyper_channels, 5, stride=2,
                               padding=2, output_padding=1),
            nn.GELU(),
            nn.ConvTranspose2d(hyper_channels, hyper_channels * 3 // 2, 5, stride=2,
                               padding=2, output_padding=1),
            nn.GELU(),
            nn.Conv2d(hyper_channels * 3 // 2, latent_channels * 2, 3, padding=1),
        )

    def forward(self, z_hat):
        return self.net(z_hat)


class CodedLatent:
    """Result of running the coding schedule over one latent tensor."""

    def __init__(self, streams, z_stream, y_hat, z_hat, likelihood, z_likelihood, mu, sigma):
        self.streams = streams          # 10 byte strings: (segment, pass) order
        self.z_stream = z_stream
        self.y_hat = y_hat
        self.z_hat = z_hat
        self.likelihood = likelihood    # evaluated at the coded latent
        self.z_likelihood = z_likelihood
        self.mu = mu
        self.sigma = sigma

    def total_bytes(self) -> int:
        return len(self.z_stream) + sum(len(s) for s in self.streams)

    def estimated_bits(self) -> float:
        bits = -torch.log2(self.likelihood).sum() - torch.log2(self.z_likelihood).sum()
        return float(bits)


class ChannelCheckerboardEntropy(nn.Module):
    """Channel-conditional checkerboard entropy model for one latent kind."""

    def __init__(self, config: ModelConfig, latent_channels: int | None = None):
        super().__init__()
        self.config = config
        c_total = latent_channels if latent_channels is not None else config.latent_channels
        plan = tuple(config.segment_plan)
        if sum(plan) != c_total:
            plan = default_segment_plan(c_total)
        self.plan = plan
        self.latent_channels = c_total
        self.sigma_min = config.sigma_min
        self.floor = config.likelihood_floor
        self.mean_offset = config.mean_offset_coding

        ch = config.hyper_channels
        self.hyper_encoder = HyperEncoder(c_total, ch)
        self.hyper_decoder = HyperDecoder(c_total, ch)
        self.prior = FactorizedPrior(ch, floor=config.likelihood_floor)

        ctx_dims = [2 * c for c in plan]
        self.channel_ctx = nn.ModuleList()
        self.local_ctx = nn.ModuleList()
        self.global_ctx = nn.ModuleList()
        self.param_nets = nn.ModuleList()
        prev = 0
        for k, c_k in enumerate(plan):
            d = ctx_dims[k]
            if k == 0:
                self.channel_ctx.append(nn.Identity())  # placeholder, zero context
            else:
                self.channel_ctx.append(nn.Sequential(
                    nn.Conv2d(prev, d, 3, padding=1),
                    nn.GELU(),
                    nn.Conv2d(d, d, 3, padding=1),
                ))
            self.local_ctx.append(CheckerboardConv(c_k, d, config.local_ctx_kernel))
            self.global_ctx.append(GlobalContext(d, config.global_ctx_heads, c_k))
            in_ch = 2 * c_total + 3 * d
            hidden = max(4 * c_k, 2 * c_k + 16)
            self.param_nets.append(nn.Sequential(
                nn.Conv2d(in_ch, hidden, 1),
                nn.GELU(),
                nn.Conv2d(hidden, 2 * c_k, 1),
            ))
            prev += c_k

        self.register_buffer(
            "sigma_table", torch.from_numpy(ec.default_sigma_table()), persistent=False
        )
        self._gauss_cdf: ec.QuantizedCDF | None = None

    # -- parameter computation (single code path for both sides) --------

    def _segment_channel_ctx(self, k: int, decoded_prev: list[torch.Tensor],
                             like: torch.Tensor) -> torch.Tensor:
        d = 2 * self.plan[k]
        if k == 0:
            b, _, h, w = like.shape
            return torch.zeros(b, d, h, w, dtype=like.dtype, device=like.device)
        return self.channel_ctx[k](torch.cat(decoded_prev, dim=1))

    def _pass_params(self, k: int, hyper: torch.Tensor, ch_ctx: torch.Tensor,
                     local: torch.Tensor | None, global_: torch.Tensor | None):
        d = 2 * self.plan[k]
        b, _, h, w = hyper.shape
        if local is None:
            local = torch.zeros(b, d, h, w, dtype=hyper.dtype, device=hyper.device)
        if global_ is None:
            global_ = torch.zeros(b, d, h, w, dtype=hyper.dtype, device=hyper.device)
        raw = self.param_nets[k](torch.cat([hyper, ch_ctx, local, global_], dim=1))
        mu, sigma_raw = raw.chunk(2, dim=1)
        sigma = self.sigma_min + F.softplus(sigma_raw)
        return mu, sigma

    def _spatial_ctx(self, k: int, y_anchor_visible: torch.Tensor, anchors: torch.Tensor):
        local = self.local_ctx[k](y_anchor_visible)
        global_ = self.global_ctx[k](local, anchors, y_anchor_visible)
        return local, global_

    # -- training / estimation ------------------------------------------

    def forward(self, y: torch.Tensor, training: bool = True,
                generator: torch.Generator | None = None) -> dict:
        """Noise-quantized (training) or rounded (eval) likelihood pass.

        Returns y_hat, z_hat, per-element likelihoods and the merged
        (mu, sigma) maps.
        """
        y = y.contiguous()
        z = self.hyper_encoder(y)
        if training:
            z_hat = noise_quantize(z, generator)
            y_q = noise_quantize(y, generator)
        else:
            z_hat = round_quantize(z)
            y_q = None  # built per segment (mean-offset needs mu)
        z_likelihood = self.prior.likelihood(z_hat)
        hyper = self._hyper_features(z_hat, y.shape[2], y.shape[3])
        b, _, h, w = y.shape
        anchors = anchor_mask(h, w, device=y.device)
        a = anchors[None, None].to(y.dtype)

        segments_in = split_channels(y, self.plan)
        segments_q_in = split_channels(y_q, self.plan) if y_q is not None else None
        decoded: list[torch.Tensor] = []
        likes: list[torch.Tensor] = []
        mus: list[torch.Tensor] = []
        sigmas: list[torch.Tensor] = []
        for k in range(len(self.plan)):
            ch_ctx = self._segment_channel_ctx(k, decoded, hyper)
            mu_a, sigma_a = self._pass_params(k, hyper, ch_ctx, None, None)
            if training:
                y_hat_k = segments_q_in[k]
            else:
                if self.mean_offset:
                    y_hat_anchor = round_quantize(segments_in[k] - mu_a) + mu_a
                else:
                    y_hat_anchor = round_quantize(segments_in[k])
                y_hat_k = y_hat_anchor
            visible = y_hat_k * a
            local, global_ = self._spatial_ctx(k, visible, anchors)
            mu_na, sigma_na = self._pass_params(k, hyper, ch_ctx, local, global_)
            mu = mu_a * a + mu_na * (1 - a)
            sigma = sigma_a * a + sigma_na * (1 - a)
            if not training:
                if self.mean_offset:
                    y_hat_k = round_quantize(segments_in[k] - mu) + mu
                else:
                    y_hat_k = round_quantize(segments_in[k])
            like = gaussian_conditional_likelihood(
                y_hat_k, mu, sigma, self.sigma_min, self.floor
            )
            decoded.append(y_hat_k)
            likes.append(like)
            mus.append(mu)
            sigmas.append(sigma)

        return {
            "y_hat": merge_channels(decoded),
            "z_hat": z_hat,
            "y_likelihood": merge_channels(likes),
            "z_likelihood": z_likelihood,
            "mu": merge_channels(mus),
            "sigma": merge_channels(sigmas),
        }

    # -- coding -----------------------------------------------------------

    @staticmethod
    def hyper_shape(h: int, w: int) -> tuple[int, int]:
        """Hyper latent spatial dims for a (h, w) latent (two stride-2 convs)."""
        return (h + 3) // 4, (w + 3) // 4

    def _hyper_features(self, z_hat: torch.Tensor, h: int, w: int) -> torch.Tensor:
        # The x4 upsampling overshoots when the latent dims are not
        # multiples of 4; crop back to the latent grid.
        return self.hyper_decoder(z_hat)[..., :h, :w]

    def _gaussian_cdf(self) -> ec.QuantizedCDF:
        if self._gauss_cdf is None:
            self._gauss_cdf = ec.build_cdf_gaussian(self.sigma_table.numpy())
        return self._gauss_cdf

    def _code_positions(self, y_seg, mu, sigma, mask4):
        """Symbols, row indices and reconstruction at masked positions."""
        if self.mean_offset:
            sym = round_quantize(y_seg - mu)
            recon = sym + mu
        else:
            recon = round_quantize(y_seg)
            sym = recon - round_quantize(mu)
        symbols = sym[mask4].to(torch.int64).cpu().numpy()
        rows = ec.sigma_bucket_indices(
            sigma[mask4].detach().cpu().numpy(), self.sigma_table.numpy()
        )
        return symbols, rows, recon

    def _reconstruct_positions(self, symbols, mu, mask4):
        """Decoder-side reconstruction at masked positions."""
        sym = torch.zeros_like(mu)
        sym[mask4] = torch.from_numpy(symbols.astype(np.float32)).to(mu.device)
        if self.mean_offset:
            return sym + mu
        return sym + round_quantize(mu)

    @torch.no_grad()
    def compress(self, y: torch.Tensor, backend: str | None = None,
                 z_hat: torch.Tensor | None = None) -> CodedLatent:
        """Encode a (1, C, h, w) latent into hyper + 10 pass streams.

        ``z_hat`` overrides the derived hyper latent; any integer tensor
        of the right shape yields a decodable stream since the hyper is
        transmitted, not re-derived.
        """
        if y.shape[0] != 1:
            raise ValueError("coding operates on batch size 1")
        y = y.contiguous()
        if z_hat is None:
            z_hat = round_quantize(self.hyper_encoder(y))
        z_hat = z_hat.contiguous()
        z_cdf = self.prior.build_cdf()
        z_sym = z_hat.to(torch.int64).cpu().numpy().reshape(-1)
        z_rows = np.tile(
            np.arange(z_hat.shape[1], dtype=np.int64)[:, None],
            (1, z_hat.shape[2] * z_hat.shape[3]),
        ).reshape(-1)
        z_stream = ec.encode_symbols(z_sym, z_cdf, z_rows, backend=backend)
        z_likelihood = self.prior.likelihood(z_hat)

        h, w = y.shape[2], y.shape[3]
        hyper = self._hyper_features(z_hat, h, w)
        anchors = anchor_mask(h, w, device=y.device)
        cdf = self._gaussian_cdf()

        segments = split_channels(y, self.plan)
        decoded: list[torch.Tensor] = []
        streams: list[bytes] = []
        likes, mus, sigmas = [], [], []
        for k, c_k in enumerate(self.plan):
            ch_ctx = self._segment_channel_ctx(k, decoded, hyper)
            a4 = anchors[None, None].expand(1, c_k, h, w)
            mu_a, sigma_a = self._pass_params(k, hyper, ch_ctx, None, None)
            sym_a, rows_a, recon_a = self._code_positions(segments[k], mu_a, sigma_a, a4)
            streams.append(ec.encode_symbols(sym_a, cdf, rows_a, backend=backend))
            y_hat_k = torch.where(a4, recon_a, torch.zeros_like(recon_a))

            local, global_ = self._spatial_ctx(k, y_hat_k, anchors)
            mu_na, sigma_na = self._pass_params(k, hyper, ch_ctx, local, global_)
            sym_n, rows_n, recon_n = self._code_positions(segments[k], mu_na, sigma_na, ~a4)
            streams.append(ec.encode_symbols(sym_n, cdf, rows_n, backend=backend))
            y_hat_k = torch.where(a4, y_hat_k, recon_n)

            af = a4.to(y.dtype)
            mu = mu_a * af + mu_na * (1 - af)
            sigma = sigma_a * af + sigma_na * (1 - af)
            likes.append(gaussian_conditional_likelihood(
                y_hat_k, mu, sigma, self.sigma_min, self.floor
            ))
            mus.append(mu)
            sigmas.append(sigma)
            decoded.append(y_hat_k)

        return CodedLatent(
            streams=streams,
            z_stream=z_stream,
            y_hat=merge_channels(decoded),
            z_hat=z_hat,
            likelihood=merge_channels(likes),
            z_likelihood=z_likelihood,
            mu=merge_channels(mus),
            sigma=merge_channels(sigmas),
        )

    @torch.no_grad()
    def decompress(self, streams: list[bytes], z_stream: bytes, shape: tuple[int, int],
                   backend: str | None = None, return_params: bool = False):
        """Blind reconstruction of the latent from bits alone."""
        h, w = shape
        if len(streams) != 2 * len(self.plan):
            raise ValueError(
                f"expected {2 * len(self.plan)} pass streams, got {len(streams)}"
            )
        device = self.sigma_table.device
        z_h, z_w = self.hyper_shape(h, w)
        z_cdf = self.prior.build_cdf()
        c_z = self.prior.channels
        z_rows = np.tile(
            np.arange(c_z, dtype=np.int64)[:, None], (1, z_h * z_w)
        ).reshape(-1)
        z_sym = ec.decode_symbols(z_stream, z_cdf, z_rows, c_z * z_h * z_w, backend=backend)
        z_hat = torch.from_numpy(
            z_sym.astype(np.float32).reshape(1, c_z, z_h, z_w)
        ).to(device)

        hyper = self._hyper_features(z_hat, h, w)
        anchors = anchor_mask(h, w, device=device)
        cdf = self._gaussian_cdf()

        decoded: list[torch.Tensor] = []
        params: list[tuple[torch.Tensor, torch.Tensor]] = []
        for k, c_k in enumerate(self.plan):
            ch_ctx = self._segment_channel_ctx(k, decoded, hyper)
            a4 = anchors[None, None].expand(1, c_k, h, w)
            mu_a, sigma_a = self._pass_params(k, hyper, ch_ctx, None, None)
            rows_a = ec.sigma_bucket_indices(
                sigma_a[a4].cpu().numpy(), self.sigma_table.numpy()
            )
            sym_a = ec.decode_symbols(streams[2 * k], cdf, rows_a, int(a4.sum()), backend=backend)
            recon_a = self._reconstruct_positions(sym_a, mu_a, a4)
            y_hat_k = torch.where(a4, recon_a, torch.zeros_like(recon_a))

            local, global_ = self._spatial_ctx(k, y_hat_k, anchors)
            mu_na, sigma_na = self._pass_params(k, hyper, ch_ctx, local, global_)
            rows_n = ec.sigma_bucket_indices(
                sigma_na[~a4].cpu().numpy(), self.sigma_table.numpy()
            )
            sym_n = ec.decode_symbols(streams[2 * k + 1], cdf, rows_n, int((~a4).sum()), backend=backend)
            recon_n = self._reconstruct_positions(sym_n, mu_na, ~a4)
            y_hat_k = torch.where(a4, y_hat_k, recon_n)
            decoded.append(y_hat_k)
            params.append((mu_a, sigma_a))
            params.append((mu_na, sigma_na))

        y_hat = merge_channels(decoded)
        if return_params:
            return y_hat, z_hat, params
        return y_hat

    @torch.no_grad()
    def schedule_params(self, y: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """Encoder-side per-(segment, pass) parameters, in decode order."""
        y = y.contiguous()
        z_hat = round_quantize(self.hyper_encoder(y))
        h, w = y.shape[2], y.shape[3]
        hyper = self._hyper_features(z_hat, h, w)
        anchors = anchor_mask(h, w, device=y.device)
        segments = split_channels(y, self.plan)
        decoded: list[torch.Tensor] = []
        params = []
        for k, c_k in enumerate(self.plan):
            ch_ctx = self._segment_channel_ctx(k, decoded, hyper)
            a4 = anchors[None, None].expand(1, c_k, h, w)
            mu_a, sigma_a = self._pass_params(k, hyper, ch_ctx, None, None)
            _, _, recon_a = self._code_positions(segments[k], mu_a, sigma_a, a4)
            y_hat_k = torch.where(a4, recon_a, torch.zeros_like(recon_a))
            local, global_ = self._spatial_ctx(k, y_hat_k, anchors)
            mu_na, sigma_na = self._pass_params(k, hyper, ch_ctx, local, global_)
            _, _, recon_n = self._code_positions(segments[k], mu_na, sigma_na, ~a4)
            y_hat_k = torch.where(a4, y_hat_k, recon_n)
            decoded.append(y_hat_k)
            params.append((mu_a, sigma_a))
            params.append((mu_na, sigma_na))
        return params
