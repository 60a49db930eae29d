"""Neural building blocks shared by the autoencoder, U-Net, MAE and alignment module."""

import math
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from priorfill.errors import TrainingDivergedError
from priorfill.models import TrainingLog


def group_count(channels: int) -> int:
    """Largest GroupNorm group count (at most 32) dividing `channels`."""
    for groups in (32, 16, 8, 4, 2, 1):
        if channels % groups == 0 and groups <= channels:
            return groups
    return 1


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None, :]
    embedding = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        embedding = F.pad(embedding, (0, 1))
    return embedding


class ResBlock(nn.Module):
    """GroupNorm / SiLU / conv residual block with an optional time embedding."""

    def __init__(self, in_channels: int, out_channels: int, temb_dim: Optional[int] = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(group_count(in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_channels) if temb_dim else None
        self.norm2 = nn.GroupNorm(group_count(out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x: torch.Tensor, temb: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb is not None and temb is not None:
            h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class FeedForward(nn.Module):
    def __init__(self, dim: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class TransformerBlock(nn.Module):
    """
    Pre-norm transformer block: attention then feedforward, each with a residual.

    With `context_dim` set, the attention sublayer cross-attends from the tokens
    to a separate context sequence instead of attending to itself.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0, context_dim: Optional[int] = None):
        super().__init__()
        self.cross = context_dim is not None
        self.norm1 = nn.LayerNorm(dim)
        self.context_norm = nn.LayerNorm(context_dim) if context_dim is not None else None
        self.attn = nn.MultiheadAttention(
            dim, heads, batch_first=True, kdim=context_dim or dim, vdim=context_dim or dim
        )
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, mlp_ratio)

    def forward(
        self,
        x: torch.Tensor,
        context: Optional[torch.Tensor] = None,
        key_padding_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        h = self.norm1(x)
        if self.cross:
            if context is None:
                raise ValueError("Cross-attention block needs a context sequence")
            kv = self.context_norm(context) if self.context_norm is not None else context
        else:
            kv = h
        attended, _ = self.attn(h, kv, kv, key_padding_mask=key_padding_mask, need_weights=False)
        x = x + attended
        return x + self.ff(self.norm2(x))


class SpatialCrossAttention(nn.Module):
    """Feature-map tokens (B, C, H, W) cross-attend to a condition sequence (B, N, D)."""

    def __init__(self, channels: int, context_dim: int, heads: int):
        super().__init__()
        self.norm = nn.GroupNorm(group_count(channels), channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True, kdim=context_dim, vdim=context_dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        B, C, H, W = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        attended, _ = self.attn(tokens, context, context, need_weights=False)
        return x + attended.transpose(1, 2).reshape(B, C, H, W)


# ============================================================================
# Training helpers
# ============================================================================


def check_finite_loss(loss: torch.Tensor, log: TrainingLog, step: int, lr: float) -> float:
    """Return the loss as a float, aborting the stage when it is not finite."""
    value = float(loss.detach())
    if not math.isfinite(value):
        last = log.steps[-1].loss if log.steps else None
        raise TrainingDivergedError(log.stage, step, last, lr)
    return value


def cosine_lr(base_lr: float, step: int, total: int) -> float:
    """Cosine decay from base_lr to zero over `total` steps."""
    if total <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step, total) / total))


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr
