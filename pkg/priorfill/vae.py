"""KL-regularized autoencoder providing the diffusion latent space."""

from collections.abc import Callable
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import Dataset

from priorfill.config import VAEConfig
from priorfill.corpus import sample_batch
from priorfill.errors import NonFiniteError
from priorfill.models import TrainingLog, TrainingStep
from priorfill.nets import Downsample, ResBlock, Upsample, check_finite_loss, group_count


class Encoder(nn.Module):
    def __init__(self, config: VAEConfig):
        super().__init__()
        widths = [config.base_channels * m for m in config.channel_mult]
        self.conv_in = nn.Conv2d(3, widths[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        current = widths[0]
        for level, width in enumerate(widths):
            self.blocks.append(ResBlock(current, width))
            current = width
            self.downs.append(Downsample(width) if level < len(widths) - 1 else nn.Identity())
        self.mid = ResBlock(current, current)
        self.norm_out = nn.GroupNorm(group_count(current), current)
        self.conv_out = nn.Conv2d(current, 2 * config.latent_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv_in(x)
        for block, down in zip(self.blocks, self.downs, strict=True):
            h = down(block(h))
        h = self.mid(h)
        return self.conv_out(F.silu(self.norm_out(h)))


class Decoder(nn.Module):
    """
    Latent -> image decoder.

    `level_channels[i]` is the width at resolution image_size / 2**i. The forward
    pass accepts additive injections keyed by level, which is how the inpainting
    decoder fuses its pixel branch.
    """

    def __init__(self, config: VAEConfig):
        super().__init__()
        self.level_channels = [config.base_channels * m for m in config.channel_mult]
        top = self.level_channels[-1]
        self.conv_in = nn.Conv2d(config.latent_channels, top, 3, padding=1)
        self.mid = ResBlock(top, top)
        self.blocks = nn.ModuleList()
        self.ups = nn.ModuleList()
        current = top
        for level in reversed(range(len(self.level_channels))):
            width = self.level_channels[level]
            self.blocks.append(ResBlock(current, width))
            current = width
            self.ups.append(Upsample(width) if level > 0 else nn.Identity())
        self.norm_out = nn.GroupNorm(group_count(current), current)
        self.conv_out = nn.Conv2d(current, 3, 3, padding=1)

    def forward(self, z: torch.Tensor, injections: Optional[dict[int, torch.Tensor]] = None) -> torch.Tensor:
        h = self.mid(self.conv_in(z))
        levels = list(reversed(range(len(self.level_channels))))
        for level, block, up in zip(levels, self.blocks, self.ups, strict=True):
            h = block(h)
            if injections and level in injections:
                h = h + injections[level]
            h = up(h)
        return self.conv_out(F.silu(self.norm_out(h)))


class KLAutoencoder(nn.Module):
    """Encoder / decoder pair with a diagonal Gaussian posterior and a latent scale factor."""

    def __init__(self, config: VAEConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)
        self.register_buffer("latent_scale", torch.tensor(1.0))

    def posterior(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        moments = self.encoder(image)
        mean, logvar = moments.chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)


def kl_divergence(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, exp(logvar)) || N(0, 1)) summed per sample, averaged over the batch."""
    per_sample = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).flatten(1).sum(dim=1)
    return per_sample.mean()


def vae_encode(
    vae: KLAutoencoder,
    image: torch.Tensor,
    noise: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Encode an image batch in [-1, 1].

    Args:
        vae: Autoencoder
        image: B x 3 x H x W
        noise: Reparameterization noise; drawn from `generator` when omitted

    Returns:
        (mean, logvar, sample) in unscaled latent units

    Raises:
        NonFiniteError: If the posterior contains NaN or inf
    """
    mean, logvar = vae.posterior(image)
    if noise is None:
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    sample = mean + torch.exp(0.5 * logvar) * noise
    if not torch.isfinite(sample).all():
        raise NonFiniteError("VAE encoder produced a non-finite latent")
    return mean, logvar, sample


def vae_decode(vae: KLAutoencoder, z: torch.Tensor) -> torch.Tensor:
    """Decode an unscaled latent. Output is unclamped; clamp at the file boundary."""
    if not torch.isfinite(z).all():
        raise NonFiniteError("Cannot decode a non-finite latent")
    return vae.decoder(z)


def encode_latent(vae: KLAutoencoder, image: torch.Tensor) -> torch.Tensor:
    """Posterior mean in diffusion units (multiplied by the latent scale)."""
    mean, _ = vae.posterior(image)
    if not torch.isfinite(mean).all():
        raise NonFiniteError("VAE encoder produced a non-finite latent")
    return mean * vae.latent_scale


def decode_latent(vae: KLAutoencoder, z: torch.Tensor) -> torch.Tensor:
    """Inverse of encode_latent's scaling, then decode."""
    return vae_decode(vae, z / vae.latent_scale)


@torch.no_grad()
def estimate_latent_scale(vae: KLAutoencoder, dataset: Dataset, generator: torch.Generator, batches: int) -> float:
    """1 / std of posterior means over a few calibration batches."""
    means = [vae.posterior(sample_batch(dataset, generator, vae.config.batch_size))[0] for _ in range(batches)]
    std = float(torch.cat(means).std())
    return 1.0 / std if std > 0 else 1.0


def train_vae(
    config: VAEConfig,
    dataset: Dataset,
    seed: int,
    steps: Optional[int] = None,
    progress: Optional[Callable[[TrainingStep], None]] = None,
) -> tuple[KLAutoencoder, TrainingLog]:
    """
    Train the autoencoder with L1 reconstruction plus a small KL term.

    Returns:
        (trained autoencoder in eval mode with its latent scale set, training log)
    """
    config.validate()
    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    vae = KLAutoencoder(config)
    optimizer = torch.optim.AdamW(vae.parameters(), lr=config.lr)
    log = TrainingLog(stage="vae")

    vae.train()
    for step in range(steps if steps is not None else config.steps):
        batch = sample_batch(dataset, generator, config.batch_size)
        mean, logvar, z = vae_encode(vae, batch, generator=generator)
        reconstruction = vae_decode(vae, z)
        loss = F.l1_loss(reconstruction, batch) + config.kl_weight * kl_divergence(mean, logvar)
        value = check_finite_loss(loss, log, step, config.lr)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        entry = log.append(step, value, config.lr)
        if progress:
            progress(entry)

    vae.eval()
    vae.latent_scale.fill_(estimate_latent_scale(vae, dataset, generator, config.scale_batches))
    return vae, log
