"""Quantization surrogates: additive uniform noise for training, hard
rounding for coding.

Rounding ties break away from zero so that the arithmetic coder and the
trainer agree on every platform (torch.round would round half to even).
"""

from __future__ import annotations

import torch

__all__ = ["noise_quantize", "round_quantize"]


def noise_quantize(y: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """Add i.i.d. U(-1/2, 1/2) noise; gradient w.r.t. y is identity."""
    noise = torch.rand(y.shape, generator=generator, dtype=y.dtype, device=y.device) - 0.5
    return y + noise


def round_quantize(y: torch.Tensor) -> torch.Tensor:
    """Element-wise round half away from zero."""
    return torch.sign(y) * torch.floor(torch.abs(y) + 0.5)
