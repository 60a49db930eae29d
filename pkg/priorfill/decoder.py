"""Mask-unmask consistent decoder: a latent decoder that also sees the unmasked pixels and the mask."""

from collections.abc import Callable
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torchvision.transforms.functional as TF
from torch import nn
from torch.utils.data import Dataset

from priorfill.backbone import EpsModel, FrozenBackbone, one_step_estimate, q_sample, sample_mask_batch
from priorfill.checkpoint import freeze, parameter_hash
from priorfill.config import ColorJitterParams, DecoderConfig, LatentAugmentConfig, MaskMixtureConfig, VAEConfig
from priorfill.corpus import sample_batch
from priorfill.errors import FrozenParameterError, ShapeMismatchError
from priorfill.models import TrainingLog, TrainingStep
from priorfill.nets import Downsample, ResBlock, check_finite_loss, cosine_lr, set_lr
from priorfill.vae import Decoder, KLAutoencoder

# ============================================================================
# Color augmentation
# ============================================================================


@dataclass
class JitterFactors:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0

    @property
    def is_identity(self) -> bool:
        return self.brightness == 1.0 and self.contrast == 1.0 and self.saturation == 1.0 and self.hue == 0.0


def sample_jitter_factors(rng: np.random.Generator, params: ColorJitterParams) -> JitterFactors:
    """Factors uniform in [1 - m, 1 + m]; hue shift uniform in [-h, h]."""
    return JitterFactors(
        brightness=float(rng.uniform(1 - params.brightness, 1 + params.brightness)),
        contrast=float(rng.uniform(1 - params.contrast, 1 + params.contrast)),
        saturation=float(rng.uniform(1 - params.saturation, 1 + params.saturation)),
        hue=float(rng.uniform(-params.hue, params.hue)),
    )


def apply_color_jitter(image: torch.Tensor, factors: JitterFactors) -> torch.Tensor:
    """Brightness, contrast, saturation then hue on an image in [-1, 1]; output clamped to [-1, 1]."""
    if factors.is_identity:
        return image.clone()
    unit = (image.clamp(-1.0, 1.0) + 1.0) / 2.0
    if factors.brightness != 1.0:
        unit = TF.adjust_brightness(unit, factors.brightness)
    if factors.contrast != 1.0:
        unit = TF.adjust_contrast(unit, factors.contrast)
    if factors.saturation != 1.0:
        unit = TF.adjust_saturation(unit, factors.saturation)
    if factors.hue != 0.0:
        unit = TF.adjust_hue(unit, factors.hue)
    return unit * 2.0 - 1.0


def color_augment(image: torch.Tensor, rng: np.random.Generator, params: ColorJitterParams) -> torch.Tensor:
    """Independently jitter every image of a (B, 3, H, W) batch, or a single (3, H, W) image."""
    if image.dim() == 3:
        return apply_color_jitter(image, sample_jitter_factors(rng, params))
    return torch.stack([apply_color_jitter(x, sample_jitter_factors(rng, params)) for x in image])


# ============================================================================
# Latent augmentation
# ============================================================================


def draw_latent_augment_flags(rng: np.random.Generator, count: int, probability: float) -> np.ndarray:
    return rng.random(count) < probability


def sample_augment_timesteps(
    generator: torch.Generator, count: int, config: LatentAugmentConfig, timesteps: int
) -> torch.Tensor:
    """Uniform integer timesteps in [t_min, t_max) on a 1000-step scale, rescaled to `timesteps`."""
    low = config.t_min * timesteps // 1000
    high = max(low + 1, config.t_max * timesteps // 1000)
    return torch.randint(low, high, (count,), generator=generator)


@torch.no_grad()
def latent_augment(
    image: torch.Tensor,
    backbone: FrozenBackbone,
    generator: torch.Generator,
    config: LatentAugmentConfig,
    noise: Optional[torch.Tensor] = None,
    t: Optional[torch.Tensor] = None,
    eps_model: Optional[EpsModel] = None,
) -> torch.Tensor:
    """
    Realistically degraded latent of an image batch.

    Noise the clean latent to a high timestep, take the one-step clean estimate with
    the clean latent as concat condition and an all-zero mask, then by default
    decode and re-encode that estimate.
    """
    z0 = backbone.encode(image)
    if t is None:
        t = sample_augment_timesteps(generator, z0.shape[0], config, backbone.schedule.timesteps)
    if noise is None:
        noise = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = q_sample(backbone.schedule, z0, t, noise)
    m_lat = torch.zeros(z0.shape[0], 1, *z0.shape[2:], dtype=z0.dtype)
    z0_hat = one_step_estimate(eps_model or backbone.eps, z_t, z0, m_lat, t, None, backbone.schedule)
    if not config.round_trip:
        return z0_hat
    return backbone.encode(backbone.decode(z0_hat))


# ============================================================================
# Decoder
# ============================================================================


class PixelBranch(nn.Module):
    """Strided encoder over (masked image, mask) producing one feature map per decoder resolution."""

    def __init__(self, level_channels: list[int], width: int):
        super().__init__()
        self.conv_in = nn.Conv2d(4, width, 3, padding=1)
        self.blocks = nn.ModuleList(ResBlock(width, width) for _ in level_channels)
        last = len(level_channels) - 1
        self.downs = nn.ModuleList(Downsample(width) if level < last else nn.Identity() for level in range(last + 1))
        self.injections = nn.ModuleList(nn.Conv2d(width, channels, 1) for channels in level_channels)
        for conv in self.injections:
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def forward(self, pixel_cond: torch.Tensor, mask: torch.Tensor) -> dict[int, torch.Tensor]:
        h = self.conv_in(torch.cat([pixel_cond, mask], dim=1))
        features: dict[int, torch.Tensor] = {}
        for level, (block, down, inject) in enumerate(zip(self.blocks, self.downs, self.injections, strict=True)):
            h = block(h)
            features[level] = inject(h)
            h = down(h)
        return features


class InpaintDecoder(nn.Module):
    """Autoencoder decoder plus a zero-initialized pixel branch; at init it decodes exactly like the VAE."""

    def __init__(self, vae_config: VAEConfig, pixel_channels: int):
        super().__init__()
        self.vae_config = vae_config
        self.decoder = Decoder(vae_config)
        self.pixel_branch = PixelBranch(self.decoder.level_channels, pixel_channels)
        self.register_buffer("latent_scale", torch.tensor(1.0))

    @classmethod
    def from_vae(cls, vae: KLAutoencoder, pixel_channels: int) -> "InpaintDecoder":
        model = cls(vae.config, pixel_channels)
        model.decoder.load_state_dict(vae.decoder.state_dict())
        model.latent_scale.copy_(vae.latent_scale)
        return model

    def forward(self, z: torch.Tensor, pixel_cond: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        mask = mask.to(pixel_cond.dtype)
        pixel_cond = pixel_cond * (1.0 - mask)
        injections = self.pixel_branch(pixel_cond, mask)
        return self.decoder(z / self.latent_scale, injections)


def decode_inpaint(
    decoder: InpaintDecoder,
    z: torch.Tensor,
    masked_image: torch.Tensor,
    mask: torch.Tensor,
    paste_unmasked: bool = False,
) -> torch.Tensor:
    """
    Decode a latent while fusing the unmasked pixels.

    Args:
        decoder: Trained inpainting decoder
        z: Latent in diffusion units (B, c, h, w)
        masked_image: (B, 3, H, W); masked pixels are ignored
        mask: (B, 1, H, W), 1 = masked
        paste_unmasked: Composite the input's unmasked pixels over the output

    Raises:
        ShapeMismatchError: If image, mask and latent do not agree
    """
    if mask.shape[0] != masked_image.shape[0] or mask.shape[1] != 1 or mask.shape[2:] != masked_image.shape[2:]:
        raise ShapeMismatchError(f"Mask {tuple(mask.shape)} does not pair with image {tuple(masked_image.shape)}")
    factor = decoder.vae_config.downsample_factor
    expected = (masked_image.shape[2] // factor, masked_image.shape[3] // factor)
    if tuple(z.shape[2:]) != expected or z.shape[0] != masked_image.shape[0]:
        raise ShapeMismatchError(f"Latent {tuple(z.shape)} does not match image {tuple(masked_image.shape)}")
    output = decoder(z, masked_image, mask)
    if paste_unmasked:
        output = torch.where(mask.bool().expand_as(output), output, masked_image)
    return output


def masked_l1(output: torch.Tensor, target: torch.Tensor, mask: torch.Tensor, masked_weight: float) -> torch.Tensor:
    """Pixelwise L1 with weight `masked_weight` on masked pixels and 1 elsewhere."""
    weights = 1.0 + (masked_weight - 1.0) * mask
    return ((output - target).abs() * weights).mean()


@dataclass
class DecoderResult:
    decoder: InpaintDecoder
    log: TrainingLog
    frozen_hashes: dict[str, str]
    latent_augment_draws: int = 0


def train_decoder(
    config: DecoderConfig,
    backbone: FrozenBackbone,
    dataset: Dataset,
    mask_config: MaskMixtureConfig,
    seed: int,
    steps: Optional[int] = None,
    progress: Optional[Callable[[TrainingStep], None]] = None,
) -> DecoderResult:
    """
    Fine-tune an inpainting decoder initialized from the autoencoder's decoder.

    Every training image is color-augmented (when enabled); with probability
    `latent_augment.probability` its latent is replaced by a degraded one.

    Raises:
        FrozenParameterError: If the backbone or autoencoder parameters change
    """
    config.validate()
    freeze(backbone.vae)
    freeze(backbone.unet)
    before = {"vae": parameter_hash(backbone.vae), "backbone": parameter_hash(backbone.unet)}

    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    decoder = InpaintDecoder.from_vae(backbone.vae, config.pixel_channels)
    optimizer = torch.optim.AdamW(decoder.parameters(), lr=config.lr)
    log = TrainingLog(stage="decoder")
    total = steps if steps is not None else config.steps
    augmented = 0

    decoder.train()
    for step in range(total):
        lr = cosine_lr(config.lr, step, total) if config.cosine_decay else config.lr
        set_lr(optimizer, lr)
        image = sample_batch(dataset, generator, config.batch_size)
        if config.color_augment:
            image = color_augment(image, rng, config.color_jitter)
        mask = sample_mask_batch(mask_config, rng, config.batch_size, image.shape[-1])

        with torch.no_grad():
            z = backbone.encode(image)
            if config.use_latent_augment:
                flags = torch.from_numpy(
                    draw_latent_augment_flags(rng, config.batch_size, config.latent_augment.probability)
                )
                if bool(flags.any()):
                    z[flags] = latent_augment(image[flags], backbone, generator, config.latent_augment)
                    augmented += int(flags.sum())

        output = decoder(z, image * (1.0 - mask), mask)
        loss = masked_l1(output, image, mask, config.masked_weight)
        value = check_finite_loss(loss, log, step, lr)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        entry = log.append(step, value, lr)
        if progress:
            progress(entry)

    decoder.eval()
    after = {"vae": parameter_hash(backbone.vae), "backbone": parameter_hash(backbone.unet)}
    if after != before:
        raise FrozenParameterError("Frozen autoencoder or backbone changed during decoder training")
    return DecoderResult(decoder=decoder, log=log, frozen_hashes=after, latent_augment_draws=augmented)


def vanilla_decoder(backbone: FrozenBackbone, pixel_channels: int) -> InpaintDecoder:
    """Untrained inpainting decoder, equivalent to the plain autoencoder decoder."""
    return InpaintDecoder.from_vae(backbone.vae, pixel_channels).eval()


def masked_mean_color_error(output: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> float:
    """Mean over samples and channels of |mean_masked(output) - mean_masked(target)|."""
    weights = mask.to(output.dtype).expand_as(output)
    count = weights.sum(dim=(2, 3)).clamp_min(1.0)
    out_mean = (output * weights).sum(dim=(2, 3)) / count
    tgt_mean = (target * weights).sum(dim=(2, 3)) / count
    return float((out_mean - tgt_mean).abs().mean())


def unmasked_psnr(output: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> float:
    """PSNR over unmasked pixels with images in [-1, 1] mapped to [0, 1]."""
    keep = (1.0 - mask.to(output.dtype)).expand_as(output)
    diff = ((output.clamp(-1, 1) - target.clamp(-1, 1)) / 2.0) ** 2
    mse = float((diff * keep).sum() / keep.sum().clamp_min(1.0))
    return 99.0 if mse == 0 else float(10.0 * np.log10(1.0 / mse))
