"""Toy latent-diffusion inpainting backbone: noise schedule, U-Net, DDIM and the one-step latent estimate."""

from collections.abc import Callable
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import Dataset

from priorfill.config import BackboneConfig, MaskMixtureConfig, SamplerConfig
from priorfill.corpus import sample_batch
from priorfill.errors import ConfigurationError, ShapeMismatchError
from priorfill.maskgen import masks_to_tensor, sample_training_mask
from priorfill.models import TrainingLog, TrainingStep
from priorfill.nets import (
    Downsample,
    ResBlock,
    SpatialCrossAttention,
    Upsample,
    check_finite_loss,
    group_count,
    timestep_embedding,
)
from priorfill.vae import KLAutoencoder, decode_latent, encode_latent


class EpsModel(Protocol):
    def __call__(self, x_in: torch.Tensor, t: torch.Tensor, cond: Optional[torch.Tensor]) -> torch.Tensor: ...


@dataclass
class NoiseSchedule:
    """Variance schedule in float64; alpha_bars[t] is the cumulative product of alphas up to t."""

    betas: torch.Tensor

    @classmethod
    def linear(cls, timesteps: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "NoiseSchedule":
        if timesteps < 2:
            raise ConfigurationError("A noise schedule needs at least 2 timesteps")
        return cls(betas=torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64))

    @classmethod
    def from_config(cls, config: BackboneConfig) -> "NoiseSchedule":
        return cls.linear(config.timesteps, config.beta_start, config.beta_end)

    @property
    def timesteps(self) -> int:
        return int(self.betas.numel())

    @property
    def alphas(self) -> torch.Tensor:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> torch.Tensor:
        return torch.cumprod(self.alphas, dim=0)

    def alpha_bar(self, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        """alpha_bar at integer timesteps (B,), shaped to broadcast against `like`."""
        values = self.alpha_bars[t.long().cpu()].to(dtype=like.dtype, device=like.device)
        return values.view(-1, *([1] * (like.dim() - 1)))


def q_sample(schedule: NoiseSchedule, z0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """Forward noising: sqrt(ab) * z0 + sqrt(1 - ab) * noise."""
    ab = schedule.alpha_bar(t, z0)
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * noise


def estimate_z0(z_t: torch.Tensor, eps: torch.Tensor, alpha_bar: torch.Tensor) -> torch.Tensor:
    """Invert forward noising given a noise estimate."""
    return (z_t - (1.0 - alpha_bar).sqrt() * eps) / alpha_bar.sqrt()


def unet_input(z_t: torch.Tensor, z0_masked: torch.Tensor, m_lat: torch.Tensor) -> torch.Tensor:
    """Channel concat [z_t; z0_masked; mask] after checking the spatial shapes agree."""
    if z_t.shape != z0_masked.shape:
        raise ShapeMismatchError(f"z_t {tuple(z_t.shape)} and z0 {tuple(z0_masked.shape)} differ")
    if m_lat.shape[0] != z_t.shape[0] or m_lat.shape[1] != 1 or m_lat.shape[2:] != z_t.shape[2:]:
        raise ShapeMismatchError(f"Latent mask {tuple(m_lat.shape)} does not fit latent {tuple(z_t.shape)}")
    return torch.cat([z_t, z0_masked, m_lat.to(z_t.dtype)], dim=1)


def downsample_mask(mask: torch.Tensor, size: int | tuple[int, int]) -> torch.Tensor:
    """Pixel mask (B, 1, H, W) -> latent mask; a latent cell is masked if any pixel under it is."""
    return F.adaptive_max_pool2d(mask.float(), size)


class InpaintUNet(nn.Module):
    """
    Epsilon-prediction U-Net over [z_t; z0_masked; mask] with cross-attention to a condition.

    When no condition is given the learned null tokens are used, which is the
    pathway the alignment module later feeds with MAE conditions.
    """

    def __init__(self, config: BackboneConfig, latent_channels: int):
        super().__init__()
        self.config = config
        self.latent_channels = latent_channels
        widths = [config.base_channels * m for m in config.channel_mult]
        temb_dim = config.base_channels * 4
        self.temb = nn.Sequential(
            nn.Linear(config.base_channels, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim)
        )
        self.null_cond = nn.Parameter(torch.randn(config.null_tokens, config.cond_dim) * 0.02)
        self.conv_in = nn.Conv2d(2 * latent_channels + 1, widths[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downs = nn.ModuleList()
        current = widths[0]
        for level, width in enumerate(widths):
            self.down_blocks.append(ResBlock(current, width, temb_dim))
            self.down_attn.append(SpatialCrossAttention(width, config.cond_dim, config.heads))
            current = width
            self.downs.append(Downsample(width) if level < len(widths) - 1 else nn.Identity())

        self.mid_block1 = ResBlock(current, current, temb_dim)
        self.mid_attn = SpatialCrossAttention(current, config.cond_dim, config.heads)
        self.mid_block2 = ResBlock(current, current, temb_dim)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.ups = nn.ModuleList()
        for level in reversed(range(len(widths))):
            width = widths[level]
            self.up_blocks.append(ResBlock(current + width, width, temb_dim))
            self.up_attn.append(SpatialCrossAttention(width, config.cond_dim, config.heads))
            current = width
            self.ups.append(Upsample(width) if level > 0 else nn.Identity())

        self.norm_out = nn.GroupNorm(group_count(current), current)
        self.conv_out = nn.Conv2d(current, latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, x_in: torch.Tensor, t: torch.Tensor, cond: Optional[torch.Tensor] = None) -> torch.Tensor:
        if x_in.shape[1] != 2 * self.latent_channels + 1:
            raise ShapeMismatchError(f"Expected {2 * self.latent_channels + 1} input channels, got {x_in.shape[1]}")
        if cond is None:
            cond = self.null_cond.unsqueeze(0).expand(x_in.shape[0], -1, -1)
        elif cond.shape[-1] != self.config.cond_dim:
            raise ShapeMismatchError(f"Condition dim {cond.shape[-1]} != backbone cond_dim {self.config.cond_dim}")
        cond = cond.to(x_in.dtype)
        temb = self.temb(timestep_embedding(t, self.config.base_channels).to(x_in.dtype))

        h = self.conv_in(x_in)
        skips = []
        for block, attn, down in zip(self.down_blocks, self.down_attn, self.downs, strict=True):
            h = attn(block(h, temb), cond)
            skips.append(h)
            h = down(h)
        h = self.mid_block2(self.mid_attn(self.mid_block1(h, temb), cond), temb)
        for block, attn, up in zip(self.up_blocks, self.up_attn, self.ups, strict=True):
            h = attn(block(torch.cat([h, skips.pop()], dim=1), temb), cond)
            h = up(h)
        return self.conv_out(F.silu(self.norm_out(h)))


def one_step_estimate(
    eps_model: EpsModel,
    z_t: torch.Tensor,
    z0_cond: torch.Tensor,
    m_lat: torch.Tensor,
    t: torch.Tensor,
    cond: Optional[torch.Tensor],
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """
    One-step estimate of the clean latent from a noised one.

    z0_hat = (z_t - sqrt(1 - ab[t]) * eps_hat) / sqrt(ab[t]) where
    eps_hat = eps_model([z_t; z0_cond; m_lat], t, cond).

    Raises:
        ConfigurationError: If any t is outside [0, T)
        ShapeMismatchError: If the latent shapes disagree
    """
    if int(t.min()) < 0 or int(t.max()) >= schedule.timesteps:
        raise ConfigurationError(f"Timesteps must be in [0, {schedule.timesteps}), got {t.tolist()}")
    eps = eps_model(unet_input(z_t, z0_cond, m_lat), t, cond)
    return estimate_z0(z_t, eps, schedule.alpha_bar(t, z_t))


def ddim_timesteps(num_steps: int, total: int) -> list[int]:
    """Descending, evenly spaced timesteps from T - 1 to 0."""
    if num_steps < 1:
        raise ConfigurationError(f"num_steps must be at least 1, got {num_steps}")
    if num_steps > total:
        raise ConfigurationError(f"num_steps ({num_steps}) exceeds the schedule length ({total})")
    return [int(v) for v in np.linspace(total - 1, 0, num_steps).round()]


def ddim_sample(
    eps_model: EpsModel,
    schedule: NoiseSchedule,
    z_T: torch.Tensor,
    z0_masked: torch.Tensor,
    m_lat: torch.Tensor,
    cond: Optional[torch.Tensor],
    num_steps: int,
    eta: float = 0.0,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """
    DDIM sampling from z_T down to a z_0 estimate.

    Deterministic for eta = 0. The final step returns the clean-latent estimate.
    """
    steps = ddim_timesteps(num_steps, schedule.timesteps)
    alpha_bars = schedule.alpha_bars
    z = z_T
    for i, t in enumerate(steps):
        t_batch = torch.full((z.shape[0],), t, dtype=torch.long)
        eps = eps_model(unet_input(z, z0_masked, m_lat), t_batch, cond)
        ab = float(alpha_bars[t])
        z0_hat = (z - (1.0 - ab) ** 0.5 * eps) / ab**0.5
        if i == len(steps) - 1:
            return z0_hat
        ab_prev = float(alpha_bars[steps[i + 1]])
        sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)) ** 0.5 * (1.0 - ab / ab_prev) ** 0.5
        direction = max(1.0 - ab_prev - sigma**2, 0.0) ** 0.5 * eps
        z = ab_prev**0.5 * z0_hat + direction
        if sigma > 0:
            z = z + sigma * torch.randn(z.shape, generator=generator, dtype=z.dtype)
    return z


@dataclass
class FrozenBackbone:
    """Autoencoder, U-Net and schedule used read-only by every downstream stage."""

    vae: KLAutoencoder
    unet: InpaintUNet
    schedule: NoiseSchedule

    def eps(self, x_in: torch.Tensor, t: torch.Tensor, cond: Optional[torch.Tensor]) -> torch.Tensor:
        return self.unet(x_in, t, cond)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        return encode_latent(self.vae, image)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return decode_latent(self.vae, z)

    @property
    def latent_hw(self) -> tuple[int, int]:
        size = self.vae.config.latent_size
        return size, size

    def latent_mask(self, mask: torch.Tensor) -> torch.Tensor:
        return downsample_mask(mask, self.latent_hw)


def _check_pair(image: torch.Tensor, mask: torch.Tensor) -> None:
    if image.dim() != 4 or mask.dim() != 4 or mask.shape[1] != 1:
        raise ShapeMismatchError(
            f"Expected B x 3 x H x W image and B x 1 x H x W mask, got {tuple(image.shape)}, {tuple(mask.shape)}"
        )
    if image.shape[0] != mask.shape[0] or image.shape[2:] != mask.shape[2:]:
        raise ShapeMismatchError(f"Image {tuple(image.shape)} and mask {tuple(mask.shape)} do not pair")


@torch.no_grad()
def inpaint_latent(
    backbone: FrozenBackbone,
    image: torch.Tensor,
    mask: torch.Tensor,
    cond: Optional[torch.Tensor],
    sampler: SamplerConfig,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Run DDIM from pure noise with the masked-image latent and latent mask as concat conditioning."""
    _check_pair(image, mask)
    generator = generator or torch.Generator().manual_seed(sampler.seed)
    z0_masked = backbone.encode(image * (1.0 - mask))
    m_lat = backbone.latent_mask(mask)
    z_T = torch.randn(z0_masked.shape, generator=generator, dtype=z0_masked.dtype)
    return ddim_sample(
        backbone.eps, backbone.schedule, z_T, z0_masked, m_lat, cond, sampler.num_steps, sampler.eta, generator
    )


def sample_mask_batch(config: MaskMixtureConfig, rng: np.random.Generator, batch_size: int, size: int) -> torch.Tensor:
    """B x 1 x H x W training masks drawn from the mixture."""
    return masks_to_tensor([sample_training_mask(config, rng, size, size).mask for _ in range(batch_size)])


def train_backbone(
    config: BackboneConfig,
    vae: KLAutoencoder,
    dataset: Dataset,
    mask_config: MaskMixtureConfig,
    seed: int,
    steps: Optional[int] = None,
    progress: Optional[Callable[[TrainingStep], None]] = None,
) -> tuple[InpaintUNet, NoiseSchedule, TrainingLog]:
    """
    Train the inpainting U-Net with the epsilon-prediction MSE and the null condition.

    The autoencoder must already be trained; it is only read.
    """
    config.validate()
    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    schedule = NoiseSchedule.from_config(config)
    unet = InpaintUNet(config, vae.config.latent_channels)
    optimizer = torch.optim.AdamW(unet.parameters(), lr=config.lr)
    log = TrainingLog(stage="backbone")
    latent = vae.config.latent_size

    unet.train()
    for step in range(steps if steps is not None else config.steps):
        image = sample_batch(dataset, generator, config.batch_size)
        mask = sample_mask_batch(mask_config, rng, config.batch_size, image.shape[-1])
        with torch.no_grad():
            z0 = encode_latent(vae, image)
            z0_masked = encode_latent(vae, image * (1.0 - mask))
        m_lat = downsample_mask(mask, latent)
        t = torch.randint(0, schedule.timesteps, (config.batch_size,), generator=generator)
        noise = torch.randn(z0.shape, generator=generator)
        z_t = q_sample(schedule, z0, t, noise)
        loss = F.mse_loss(unet(unet_input(z_t, z0_masked, m_lat), t), noise)
        value = check_finite_loss(loss, log, step, config.lr)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        entry = log.append(step, value, config.lr)
        if progress:
            progress(entry)

    unet.eval()
    return unet, schedule, log
