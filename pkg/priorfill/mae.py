"""Miniature masked auto-encoder: pretraining, inpainting fine-tuning and prior extraction.

Patch masks are boolean tensors (B, L) with True = masked. The encoder only ever
sees tokens of unmasked patches; the decoder fills the full grid with a learned
mask token and predicts every patch.
"""

import copy
from collections.abc import Callable
from typing import Optional

import numpy as np
import torch
from torch import nn
from torch.utils.data import Dataset

from priorfill.config import MAEConfig, MaskMixtureConfig, PriorTap
from priorfill.corpus import sample_batch
from priorfill.errors import ConfigurationError, MAEError, ShapeMismatchError
from priorfill.maskgen import enlarge_to_ratio, random_patch_mask, sample_rng, sample_training_mask, to_patch_mask
from priorfill.models import TrainingLog, TrainingStep
from priorfill.nets import TransformerBlock, check_finite_loss


def patchify(image: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, L, P * P * C), patches in row-major order."""
    B, C, H, W = image.shape
    if H % patch_size or W % patch_size:
        raise ConfigurationError(f"Image size {H}x{W} not divisible by patch size {patch_size}")
    rows, cols = H // patch_size, W // patch_size
    x = image.reshape(B, C, rows, patch_size, cols, patch_size)
    x = x.permute(0, 2, 4, 3, 5, 1)
    return x.reshape(B, rows * cols, patch_size * patch_size * C)


def unpatchify(tokens: torch.Tensor, patch_size: int, image_hw: tuple[int, int], channels: int = 3) -> torch.Tensor:
    """Exact inverse of patchify."""
    B, L, D = tokens.shape
    H, W = image_hw
    rows, cols = H // patch_size, W // patch_size
    if rows * cols != L or D != patch_size * patch_size * channels:
        raise ShapeMismatchError(f"Tokens {tuple(tokens.shape)} do not tile a {H}x{W} image with patch {patch_size}")
    x = tokens.reshape(B, rows, cols, patch_size, patch_size, channels)
    x = x.permute(0, 5, 1, 3, 2, 4)
    return x.reshape(B, channels, H, W)


class MaskedAutoEncoder(nn.Module):
    def __init__(self, config: MAEConfig):
        super().__init__()
        config.validate()
        self.config = config
        dim = config.token_dim
        L = config.num_patches
        self.patch_embed = nn.Linear(config.patch_dim, dim)
        self.pos_embed = nn.Parameter(torch.randn(1, L, dim) * 0.02)
        self.encoder = nn.ModuleList(
            TransformerBlock(dim, config.heads, config.mlp_ratio) for _ in range(config.encoder_depth)
        )
        self.encoder_norm = nn.LayerNorm(dim)

        self.decoder_embed = nn.Linear(dim, dim)
        self.mask_token = nn.Parameter(torch.randn(1, 1, dim) * 0.02)
        self.decoder_pos_embed = nn.Parameter(torch.randn(1, L, dim) * 0.02)
        self.decoder = nn.ModuleList(
            TransformerBlock(dim, config.heads, config.mlp_ratio) for _ in range(config.decoder_depth)
        )
        self.decoder_norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, config.patch_dim)

    def _check_input(self, image: torch.Tensor, patch_mask: torch.Tensor) -> None:
        expected = self.config.image_hw
        if image.dim() != 4 or tuple(image.shape[2:]) != expected or image.shape[1] != 3:
            raise ShapeMismatchError(
                f"MAE expects B x 3 x {expected[0]} x {expected[1]} images, got {tuple(image.shape)}"
            )
        if patch_mask.shape != (image.shape[0], self.config.num_patches):
            raise ShapeMismatchError(
                f"Patch mask {tuple(patch_mask.shape)} does not match ({image.shape[0]}, {self.config.num_patches})"
            )
        if bool(patch_mask.all(dim=1).any()):
            raise MAEError("Every patch is masked; the encoder needs at least one visible patch")

    def forward(self, image: torch.Tensor, patch_mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """
        Run encoder and decoder.

        Returns:
            (prior tokens (B, L, D) at the configured tap, patch predictions (B, L, P*P*3))
        """
        self._check_input(image, patch_mask)
        patch_mask = patch_mask.bool()
        B, L = patch_mask.shape
        tokens = self.patch_embed(patchify(image, self.config.patch_size)) + self.pos_embed

        # Visible patches first, in grid order, padded to the largest visible count
        order = torch.argsort(patch_mask.int(), dim=1, stable=True)
        visible_count = (~patch_mask).sum(dim=1)
        width = int(visible_count.max())
        index = order[:, :width]
        valid = torch.arange(width, device=image.device)[None, :] < visible_count[:, None]
        gathered = torch.gather(tokens, 1, index[..., None].expand(-1, -1, tokens.shape[-1]))
        x = torch.where(valid[..., None], gathered, torch.zeros_like(gathered))
        for block in self.encoder:
            x = block(x, key_padding_mask=~valid)
        x = self.encoder_norm(x)

        rows = torch.arange(B, device=image.device)[:, None].expand(-1, width)
        embedded = self.decoder_embed(x)
        full = self.mask_token.expand(B, L, -1).to(embedded.dtype).clone()
        full[rows[valid], index[valid]] = embedded[valid]
        h = full + self.decoder_pos_embed
        for block in self.decoder:
            h = block(h)
        h = self.decoder_norm(h)
        prediction = self.head(h)
        if self.config.prior_tap == PriorTap.ENCODER_LAST.value:
            # Encoder output on the full grid, mask token at masked positions
            prior = self.mask_token.expand(B, L, -1).to(x.dtype).clone()
            prior[rows[valid], index[valid]] = x[valid]
        else:
            prior = h
        return prior, prediction


def mae_forward(
    model: MaskedAutoEncoder, image: torch.Tensor, patch_mask: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Reconstruct an image batch and compute the masked-patch MSE.

    Raises:
        MAEError: If a sample has no masked patch (empty loss set) or no visible patch
    """
    if bool((~patch_mask.bool()).all(dim=1).any()):
        raise MAEError("A sample has no masked patches; the reconstruction loss would be empty")
    _, prediction = model(image, patch_mask)
    target = patchify(image, model.config.patch_size).detach()
    if model.config.norm_pix_loss:
        mean = target.mean(dim=-1, keepdim=True)
        var = target.var(dim=-1, keepdim=True)
        target = (target - mean) / (var + 1e-6).sqrt()
    per_patch = (prediction - target).pow(2).mean(dim=-1)
    weights = patch_mask.to(per_patch.dtype)
    loss = (per_patch * weights).sum() / weights.sum()
    reconstruction = unpatchify(prediction, model.config.patch_size, model.config.image_hw)
    return reconstruction, loss


def composite(reconstruction: torch.Tensor, image: torch.Tensor, pixel_mask: torch.Tensor) -> torch.Tensor:
    """Reconstruction inside the mask, ground truth outside."""
    return torch.where(pixel_mask.bool(), reconstruction, image)


@torch.no_grad()
def extract_prior(model: MaskedAutoEncoder, masked_image: torch.Tensor, patch_mask: torch.Tensor) -> torch.Tensor:
    """Prior tokens (B, L, D) for the full grid, row-major patch order."""
    model.eval()
    prior, _ = model(masked_image, patch_mask)
    return prior


def inpainting_patch_mask(
    mask_config: MaskMixtureConfig,
    rng: np.random.Generator,
    config: MAEConfig,
    enlarge: Optional[float],
) -> np.ndarray:
    """One patch mask from the inpainting mask policy, optionally enlarged; never fully masked."""
    height, width = config.image_hw
    for _ in range(mask_config.max_attempts):
        pixel = sample_training_mask(mask_config, rng, height, width).mask
        flags = to_patch_mask(pixel, config.patch_size)
        if enlarge is not None:
            flags = enlarge_to_ratio(flags, enlarge, rng)
        if flags.any() and not flags.all():
            return flags
    raise MAEError(f"Could not draw a patch mask with visible patches after {mask_config.max_attempts} attempts")


def _optimizer(model: nn.Module, config: MAEConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay, betas=(0.9, 0.95))


def _train(
    model: MaskedAutoEncoder,
    config: MAEConfig,
    dataset: Dataset,
    stage: str,
    steps: int,
    seed: int,
    draw_mask: Callable[[np.random.Generator], np.ndarray],
    progress: Optional[Callable[[TrainingStep], None]],
) -> TrainingLog:
    generator = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    optimizer = _optimizer(model, config)
    log = TrainingLog(stage=stage)
    model.train()
    for step in range(steps):
        image = sample_batch(dataset, generator, config.batch_size)
        patch_mask = torch.from_numpy(np.stack([draw_mask(rng) for _ in range(config.batch_size)]))
        _, loss = mae_forward(model, image, patch_mask)
        value = check_finite_loss(loss, log, step, config.lr)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        entry = log.append(step, value, config.lr)
        if progress:
            progress(entry)
    model.eval()
    return log


def pretrain_mae(
    config: MAEConfig,
    dataset: Dataset,
    seed: int,
    steps: Optional[int] = None,
    progress: Optional[Callable[[TrainingStep], None]] = None,
) -> tuple[MaskedAutoEncoder, TrainingLog]:
    """Pretrain from scratch with uniform-random patch masking at `pretrain_mask_ratio`."""
    torch.manual_seed(seed)
    model = MaskedAutoEncoder(config)
    log = _train(
        model,
        config,
        dataset,
        "mae_pretrain",
        steps if steps is not None else config.pretrain_steps,
        seed,
        lambda rng: random_patch_mask(rng, config.num_patches, config.pretrain_mask_ratio),
        progress,
    )
    return model, log


def finetune_mae(
    pretrained: MaskedAutoEncoder,
    dataset: Dataset,
    mask_config: MaskMixtureConfig,
    seed: int,
    steps: Optional[int] = None,
    progress: Optional[Callable[[TrainingStep], None]] = None,
) -> tuple[MaskedAutoEncoder, TrainingLog]:
    """
    Fine-tune a copy of a pretrained MAE on inpainting masks enlarged to `finetune_enlarge_ratio`.

    The pretrained model is left untouched.
    """
    config = pretrained.config
    torch.manual_seed(seed)
    model = copy.deepcopy(pretrained)
    for param in model.parameters():
        param.requires_grad_(True)
    log = _train(
        model,
        config,
        dataset,
        "mae",
        steps if steps is not None else config.finetune_steps,
        seed,
        lambda rng: inpainting_patch_mask(mask_config, rng, config, config.finetune_enlarge_ratio),
        progress,
    )
    return model, log


@torch.no_grad()
def evaluate_mae(
    model: MaskedAutoEncoder, dataset: Dataset, mask_config: MaskMixtureConfig, seed: int, batch_size: int = 32
) -> float:
    """Held-out masked-patch MSE under (unenlarged) inpainting masks; per-item masks from sample_rng(seed, i)."""
    model.eval()
    total, count = 0.0, 0
    for start in range(0, len(dataset), batch_size):  # type: ignore[arg-type]
        indices = range(start, min(start + batch_size, len(dataset)))  # type: ignore[arg-type]
        image = torch.stack([dataset[i][0] for i in indices])
        flags = np.stack([inpainting_patch_mask(mask_config, sample_rng(seed, i), model.config, None) for i in indices])
        _, loss = mae_forward(model, image, torch.from_numpy(flags))
        total += float(loss) * len(indices)
        count += len(indices)
    return total / max(count, 1)


def visible_patch_mask(pixel_mask: np.ndarray, patch_size: int) -> np.ndarray:
    """
    Patch mask for prior extraction from a pixel mask.

    When every patch overlaps the mask, the patch with the fewest masked pixels is
    left visible so the encoder has a token; masked pixels are zeroed in the MAE
    input, so nothing under the mask leaks.
    """
    flags = to_patch_mask(pixel_mask, patch_size)
    if flags.all():
        height, width = pixel_mask.shape
        blocks = (pixel_mask > 0).reshape(height // patch_size, patch_size, width // patch_size, patch_size)
        flags = flags.copy()
        flags[int(np.argmin(blocks.sum(axis=(1, 3)).reshape(-1)))] = False
    return flags
