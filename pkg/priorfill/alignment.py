"""Maps MAE prior tokens into the frozen backbone's condition space and trains the mapping."""

from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import Dataset

from priorfill.backbone import FrozenBackbone, q_sample, unet_input
from priorfill.checkpoint import assert_no_grad, freeze, parameter_hash
from priorfill.config import AlignmentConfig, AlignVariant, MaskMixtureConfig
from priorfill.corpus import sample_batch
from priorfill.errors import ConfigurationError, FrozenParameterError, ShapeMismatchError
from priorfill.mae import MaskedAutoEncoder, visible_patch_mask
from priorfill.maskgen import masks_to_tensor, sample_training_mask
from priorfill.models import TrainingLog, TrainingStep
from priorfill.nets import TransformerBlock, check_finite_loss


class AlignmentModule(nn.Module):
    """
    Linear projection M_m -> M_s followed by transformer blocks.

    Self-attention variants keep one output token per prior token. The cross
    variant uses learned queries that cross-attend to the projected prior.
    """

    def __init__(self, config: AlignmentConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.variant = AlignVariant(config.variant)
        self.proj = nn.Linear(config.in_dim, config.cond_dim)
        use_pos = config.positional_encoding and self.variant is not AlignVariant.LINEAR_ONLY
        self.pos_embed = nn.Parameter(torch.randn(1, config.num_tokens, config.cond_dim) * 0.02) if use_pos else None

        context_dim = config.cond_dim if self.variant is AlignVariant.CROSS_X4 else None
        self.queries = (
            nn.Parameter(torch.randn(1, config.num_tokens, config.cond_dim) * 0.02)
            if self.variant is AlignVariant.CROSS_X4
            else None
        )
        self.blocks = nn.ModuleList(
            TransformerBlock(config.cond_dim, config.heads, config.mlp_ratio, context_dim=context_dim)
            for _ in range(config.effective_blocks)
        )

    def reset_to_identity(self) -> None:
        """Identity-initialize the square projection."""
        if self.config.in_dim != self.config.cond_dim:
            raise ConfigurationError("Identity projection needs in_dim == cond_dim")
        with torch.no_grad():
            self.proj.weight.copy_(torch.eye(self.config.in_dim))
            self.proj.bias.zero_()

    def forward(self, prior: torch.Tensor) -> torch.Tensor:
        if prior.dim() != 3 or prior.shape[-1] != self.config.in_dim:
            raise ShapeMismatchError(f"Prior must be (B, N, {self.config.in_dim}), got {tuple(prior.shape)}")
        needs_fixed_length = self.pos_embed is not None or self.queries is not None
        if needs_fixed_length and prior.shape[1] != self.config.num_tokens:
            raise ShapeMismatchError(f"Prior has {prior.shape[1]} tokens, expected {self.config.num_tokens}")

        x = self.proj(prior)
        if self.pos_embed is not None:
            x = x + self.pos_embed.to(x.dtype)
        if self.queries is None:
            for block in self.blocks:
                x = block(x)
            return x

        h = self.queries.to(x.dtype).expand(x.shape[0], -1, -1)
        for block in self.blocks:
            h = block(h, context=x)
        return h


@torch.no_grad()
def align(module: AlignmentModule, prior: torch.Tensor) -> torch.Tensor:
    """Eval-mode condition tokens for a prior."""
    module.eval()
    return module(prior)


def p_schedule(step: int, config: AlignmentConfig) -> float:
    """Probability of feeding the full image to the MAE at a training step."""
    if step < 0:
        raise ConfigurationError(f"step must be nonnegative, got {step}")
    decay = config.p_decay_steps
    if decay == 0 or step >= decay:
        return config.p_end
    return (config.p_start * (decay - step) + config.p_end * step) / decay


@dataclass
class AlignmentResult:
    module: AlignmentModule
    log: TrainingLog
    frozen_hashes: dict[str, str] = field(default_factory=dict)
    full_image_draws: int = 0


def _prior_inputs(
    image: torch.Tensor,
    mask: torch.Tensor,
    pixel_masks: list[np.ndarray],
    use_full: np.ndarray,
    patch_size: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    keep = torch.from_numpy(use_full.astype(np.float32))[:, None, None, None]
    mae_image = keep * image + (1.0 - keep) * image * (1.0 - mask)
    flags = [
        np.zeros_like(visible_patch_mask(m, patch_size)) if full else visible_patch_mask(m, patch_size)
        for m, full in zip(pixel_masks, use_full, strict=True)
    ]
    return mae_image, torch.from_numpy(np.stack(flags))


def frozen_hashes(mae: MaskedAutoEncoder, backbone: FrozenBackbone) -> dict[str, str]:
    return {
        "mae": parameter_hash(mae),
        "backbone": parameter_hash(backbone.unet),
        "vae": parameter_hash(backbone.vae),
    }


def train_alignment(
    config: AlignmentConfig,
    mae: MaskedAutoEncoder,
    backbone: FrozenBackbone,
    dataset: Dataset,
    mask_config: MaskMixtureConfig,
    seed: int,
    steps: Optional[int] = None,
    progress: Optional[Callable[[TrainingStep], None]] = None,
) -> AlignmentResult:
    """
    Train the alignment module with the diffusion objective through the frozen backbone.

    Each sample feeds the full image to the MAE with probability p(step), else the
    masked image. Only alignment parameters are updated.

    Raises:
        FrozenParameterError: If a frozen parameter receives a gradient or changes
    """
    for frozen in (mae, backbone.unet, backbone.vae):
        freeze(frozen)
    before = frozen_hashes(mae, backbone)

    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    module = AlignmentModule(config)
    optimizer = torch.optim.AdamW(module.parameters(), lr=config.effective_lr, weight_decay=config.weight_decay)
    log = TrainingLog(stage="alignment")
    schedule = backbone.schedule
    height = mae.config.image_hw[0]
    full_draws = 0

    module.train()
    for step in range(steps if steps is not None else config.steps):
        image = sample_batch(dataset, generator, config.batch_size)
        pixel_masks = [sample_training_mask(mask_config, rng, height, height).mask for _ in range(config.batch_size)]
        use_full = rng.random(config.batch_size) < p_schedule(step, config)
        full_draws += int(use_full.sum())
        mask = masks_to_tensor(pixel_masks)
        mae_image, flags = _prior_inputs(image, mask, pixel_masks, use_full, mae.config.patch_size)

        with torch.no_grad():
            prior, _ = mae(mae_image, flags)
            z0 = backbone.encode(image)
            z0_masked = backbone.encode(image * (1.0 - mask))
        m_lat = backbone.latent_mask(mask)
        t = torch.randint(0, schedule.timesteps, (config.batch_size,), generator=generator)
        noise = torch.randn(z0.shape, generator=generator)
        z_t = q_sample(schedule, z0, t, noise)

        cond = module(prior)
        loss = F.mse_loss(backbone.eps(unet_input(z_t, z0_masked, m_lat), t, cond), noise)
        value = check_finite_loss(loss, log, step, config.effective_lr)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        assert_no_grad(mae, "mae")
        assert_no_grad(backbone.unet, "backbone")
        assert_no_grad(backbone.vae, "vae")
        optimizer.step()
        entry = log.append(step, value, config.effective_lr)
        if progress:
            progress(entry)

    module.eval()
    after = frozen_hashes(mae, backbone)
    changed = [name for name in before if before[name] != after[name]]
    if changed:
        raise FrozenParameterError(f"Frozen modules changed during alignment training: {', '.join(changed)}")
    return AlignmentResult(module=module, log=log, frozen_hashes=after, full_image_draws=full_draws)
