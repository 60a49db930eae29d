"""Shared fixtures: miniature run configs and an isolated run ledger."""

from pathlib import Path

import pytest
import torch

from priorfill.backbone import FrozenBackbone, InpaintUNet, NoiseSchedule
from priorfill.config import (
    AlignmentConfig,
    BackboneConfig,
    CorpusConfig,
    CurationConfig,
    DecoderConfig,
    FeatNetConfig,
    MAEConfig,
    RunConfig,
    SamplerConfig,
    VAEConfig,
)
from priorfill.mae import MaskedAutoEncoder
from priorfill.vae import KLAutoencoder


@pytest.fixture
def temp_cache_dir(tmp_path: Path, monkeypatch) -> Path:
    """Create a temporary cache directory for the run ledger."""
    cache_dir = tmp_path / "test_cache"
    cache_dir.mkdir()

    # Mock platformdirs to use our temp directory
    monkeypatch.setattr("priorfill.ledger.user_cache_dir", lambda app_name: str(cache_dir))

    return cache_dir


def tiny_run_config(run_dir: Path, seed: int = 0) -> RunConfig:
    """A desk-profile config whose networks are small enough to train for a few steps in a test."""
    config = RunConfig(
        seed=seed,
        run_dir=str(run_dir),
        vae=VAEConfig(base_channels=8, channel_mult=(1, 2, 2), steps=2, batch_size=2, scale_batches=1),
        backbone=BackboneConfig(
            base_channels=8, channel_mult=(1, 2), cond_dim=16, heads=2, timesteps=20, steps=2, batch_size=2
        ),
        mae=MAEConfig(
            patch_size=16,
            encoder_depth=1,
            decoder_depth=1,
            token_dim=16,
            heads=2,
            pretrain_steps=2,
            finetune_steps=2,
            batch_size=2,
        ),
        alignment=AlignmentConfig(
            in_dim=16, cond_dim=16, num_tokens=16, num_blocks=1, heads=2, p_decay_steps=2, steps=2, batch_size=2
        ),
        decoder=DecoderConfig(pixel_channels=8, steps=2, batch_size=2),
        featnet=FeatNetConfig(channels=(4, 8), steps=2, batch_size=4),
        sampler=SamplerConfig(num_steps=4),
        corpus=CorpusConfig(train_size=8, holdout_size=4),
        curation=CurationConfig(per_source_k=2, embed_dim=16, embed_input=8),
    )
    config.validate()
    return config


@pytest.fixture
def tiny_config(tmp_path: Path) -> RunConfig:
    """Miniature run configuration writing into a temporary run directory."""
    return tiny_run_config(tmp_path / "run")


def tiny_backbone(seed: int = 0, image_size: int = 32) -> FrozenBackbone:
    """Untrained autoencoder + U-Net small enough for per-test construction."""
    torch.manual_seed(seed)
    vae = KLAutoencoder(VAEConfig(image_size=image_size, base_channels=8)).eval()
    config = BackboneConfig(base_channels=8, channel_mult=(1, 2), cond_dim=16, heads=2, timesteps=20)
    unet = InpaintUNet(config, latent_channels=vae.config.latent_channels).eval()
    return FrozenBackbone(vae, unet, NoiseSchedule.from_config(config))


def tiny_mae(seed: int = 0, image_size: int = 32) -> MaskedAutoEncoder:
    """Untrained 16-pixel-patch MAE with 16-wide tokens."""
    torch.manual_seed(seed)
    config = MAEConfig(
        image_size=image_size, patch_size=16, encoder_depth=1, decoder_depth=1, token_dim=16, heads=2, batch_size=2
    )
    return MaskedAutoEncoder(config).eval()
