"""Tests for color augmentation, latent augmentation and the inpainting decoder."""

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from priorfill.backbone import q_sample
from priorfill.config import ColorJitterParams, DecoderConfig, LatentAugmentConfig, MaskMixtureConfig
from priorfill.corpus import SceneDataset
from priorfill.decoder import (
    InpaintDecoder,
    JitterFactors,
    apply_color_jitter,
    color_augment,
    decode_inpaint,
    draw_latent_augment_flags,
    latent_augment,
    masked_l1,
    masked_mean_color_error,
    sample_augment_timesteps,
    train_decoder,
    unmasked_psnr,
    vanilla_decoder,
)
from priorfill.errors import ShapeMismatchError
from priorfill.vae import decode_latent
from tests.conftest import tiny_backbone


class TestColorJitter:
    """Tests for color augmentation."""

    def test_identity_factors(self) -> None:
        """Test that identity factors return an equal copy."""
        image = torch.rand(3, 8, 8) * 2 - 1

        result = apply_color_jitter(image, JitterFactors())

        assert torch.equal(result, image)
        assert result is not image

    def test_brightness(self) -> None:
        """Test brightness 1.2 on mid-gray: 0.5 -> 0.6 in unit space, 0.2 in [-1, 1]."""
        result = apply_color_jitter(torch.zeros(3, 4, 4), JitterFactors(brightness=1.2))

        assert torch.allclose(result, torch.full((3, 4, 4), 0.2), atol=1e-6)

    def test_hue_leaves_gray_unchanged(self) -> None:
        """Test that a hue rotation does not change achromatic pixels."""
        image = torch.full((3, 4, 4), -0.4)

        assert torch.allclose(apply_color_jitter(image, JitterFactors(hue=0.1)), image, atol=1e-5)

    def test_output_range(self) -> None:
        """Test that strong jitter stays inside [-1, 1]."""
        result = apply_color_jitter(torch.ones(3, 4, 4) * 0.9, JitterFactors(brightness=2.0, contrast=1.5))

        assert float(result.max()) <= 1.0 and float(result.min()) >= -1.0

    def test_batch_samples_independent_factors(self) -> None:
        """Test that two identical images in a batch get different jitter."""
        image = torch.rand(1, 3, 8, 8).repeat(2, 1, 1, 1) * 2 - 1

        result = color_augment(image, np.random.default_rng(0), ColorJitterParams())

        assert result.shape == image.shape
        assert not torch.allclose(result[0], result[1])

    def test_half_hue_twice_is_identity(self) -> None:
        """Test that two hue shifts of half a turn bring every color back."""
        image = torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(0)) * 2 - 1

        once = apply_color_jitter(image, JitterFactors(hue=0.5))
        twice = apply_color_jitter(once, JitterFactors(hue=0.5))

        assert not torch.allclose(once, image, atol=1e-2)
        assert torch.allclose(twice, image, atol=1e-4)


class TestLatentAugment:
    """Tests for one-step latent degradation."""

    def test_oracle_estimate_returns_clean_latent(self) -> None:
        """Test that with a perfect noise predictor and no round trip the clean latent comes back."""
        backbone = tiny_backbone()
        image = torch.rand(2, 3, 32, 32) * 2 - 1
        z0 = backbone.encode(image)
        generator = torch.Generator().manual_seed(0)
        noise = torch.randn(z0.shape, generator=generator)
        t = torch.tensor([12, 19])
        schedule = backbone.schedule

        def oracle(x_in: torch.Tensor, timesteps: torch.Tensor, cond) -> torch.Tensor:
            ab = schedule.alpha_bar(timesteps, z0)
            return (q_sample(schedule, z0, timesteps, noise) - ab.sqrt() * z0) / (1.0 - ab).sqrt()

        config = LatentAugmentConfig(round_trip=False)
        result = latent_augment(image, backbone, generator, config, noise=noise, t=t, eps_model=oracle)

        assert torch.allclose(result, z0, atol=1e-4)

    def test_round_trip_shape(self) -> None:
        """Test that the default round trip returns a latent of the same shape."""
        backbone = tiny_backbone()
        image = torch.zeros(1, 3, 32, 32)

        result = latent_augment(image, backbone, torch.Generator().manual_seed(0), LatentAugmentConfig())

        assert result.shape == (1, 4, 8, 8)

    def test_timesteps_rescaled(self) -> None:
        """Test that [500, 1000) maps to [10, 20) on a 20-step schedule."""
        t = sample_augment_timesteps(torch.Generator().manual_seed(0), 500, LatentAugmentConfig(), 20)

        assert int(t.min()) >= 10 and int(t.max()) < 20
        assert set(t.tolist()) == set(range(10, 20))

    def test_flag_frequency(self) -> None:
        """Test that latent augmentation is drawn with the configured probability."""
        flags = draw_latent_augment_flags(np.random.default_rng(0), 10_000, 0.5)

        assert abs(flags.mean() - 0.5) < 0.02

    def test_timesteps_uniform(self) -> None:
        """Test that 10 000 drawn timesteps are uniform over the configured interval."""
        t = sample_augment_timesteps(torch.Generator().manual_seed(1), 10_000, LatentAugmentConfig(), 1000)

        counts = np.bincount(t.numpy() - 500, minlength=500)

        assert len(counts) == 500
        assert chisquare(counts).pvalue > 0.01

    def test_augment_draws_configured_timesteps(self) -> None:
        """Test that latent augmentation noises at timesteps from the configured interval."""
        backbone = tiny_backbone()
        seen = []

        def recording(x_in: torch.Tensor, timesteps: torch.Tensor, cond) -> torch.Tensor:
            seen.append(timesteps.clone())
            return torch.zeros(x_in.shape[0], 4, *x_in.shape[2:])

        config = LatentAugmentConfig(round_trip=False)
        generator = torch.Generator().manual_seed(2)
        latent_augment(torch.zeros(64, 3, 32, 32), backbone, generator, config, eps_model=recording)

        low = config.t_min * backbone.schedule.timesteps // 1000
        high = config.t_max * backbone.schedule.timesteps // 1000
        assert int(seen[0].min()) >= low and int(seen[0].max()) < high


class TestInpaintDecoder:
    """Tests for decoding with pixel fusion."""

    def test_init_matches_autoencoder(self) -> None:
        """Test that before training the decoder output equals the autoencoder decode."""
        backbone = tiny_backbone()
        decoder = vanilla_decoder(backbone, pixel_channels=8)
        z = torch.randn(1, 4, 8, 8)
        mask = torch.zeros(1, 1, 32, 32)
        mask[..., :16, :] = 1.0

        with torch.no_grad():
            output = decode_inpaint(decoder, z, torch.rand(1, 3, 32, 32), mask)
            expected = decode_latent(backbone.vae, z)

        assert torch.allclose(output, expected, atol=1e-6)

    def test_paste_unmasked(self) -> None:
        """Test that pasting keeps the input exactly outside the mask."""
        decoder = vanilla_decoder(tiny_backbone(), pixel_channels=8)
        image = torch.rand(1, 3, 32, 32)
        mask = torch.zeros(1, 1, 32, 32)
        mask[..., 8:24, 8:24] = 1.0

        with torch.no_grad():
            output = decode_inpaint(decoder, torch.zeros(1, 4, 8, 8), image, mask, paste_unmasked=True)

        keep = mask.expand_as(image) == 0
        assert torch.equal(output[keep], image[keep])

    def test_shape_checks(self) -> None:
        """Test that latent and mask shapes are checked against the image."""
        decoder = InpaintDecoder(tiny_backbone().vae.config, pixel_channels=8)
        image = torch.zeros(1, 3, 32, 32)

        with pytest.raises(ShapeMismatchError, match="Latent"):
            decode_inpaint(decoder, torch.zeros(1, 4, 4, 4), image, torch.zeros(1, 1, 32, 32))
        with pytest.raises(ShapeMismatchError, match="Mask"):
            decode_inpaint(decoder, torch.zeros(1, 4, 8, 8), image, torch.zeros(1, 1, 16, 16))

    def test_masked_pixels_get_no_gradient(self) -> None:
        """Test that the pixel branch cannot see masked pixels: their gradient is exactly zero."""
        decoder = InpaintDecoder(tiny_backbone().vae.config, pixel_channels=8)
        torch.manual_seed(0)
        for conv in decoder.pixel_branch.injections:
            torch.nn.init.normal_(conv.weight, std=0.1)
        image = torch.rand(1, 3, 32, 32, requires_grad=True)
        mask = torch.zeros(1, 1, 32, 32)
        mask[..., 8:24, 8:24] = 1.0

        decode_inpaint(decoder, torch.randn(1, 4, 8, 8), image, mask).pow(2).sum().backward()

        masked = mask.expand_as(image) == 1
        assert torch.count_nonzero(image.grad[masked]) == 0
        assert torch.count_nonzero(image.grad[~masked]) > 0


class TestDecoderLosses:
    """Tests for the decoder loss and scores."""

    def test_masked_weight(self) -> None:
        """Test that masked pixels are weighted by masked_weight."""
        output = torch.ones(1, 1, 1, 2)
        target = torch.zeros(1, 1, 1, 2)
        mask = torch.tensor([[[[1.0, 0.0]]]])

        assert float(masked_l1(output, target, mask, 3.0)) == pytest.approx(2.0)

    def test_scores(self) -> None:
        """Test masked color error and unmasked PSNR on known inputs."""
        target = torch.zeros(1, 3, 2, 2)
        output = target.clone()
        mask = torch.tensor([[[[1.0, 0.0], [0.0, 0.0]]]])
        output[..., 0, 0] = 0.5

        assert masked_mean_color_error(output, target, mask) == pytest.approx(0.5)
        assert unmasked_psnr(output, target, mask) == 99.0


class TestTrainDecoder:
    """Tests for decoder training."""

    def test_short_run(self) -> None:
        """Test the cosine learning rate, frozen backbone and latent augmentation counts."""
        backbone = tiny_backbone()
        config = DecoderConfig(pixel_channels=8, steps=3, batch_size=2)
        config.latent_augment.probability = 1.0

        result = train_decoder(config, backbone, SceneDataset(size=32, length=4), MaskMixtureConfig(), seed=0)

        lrs = [s.lr for s in result.log.steps]
        assert lrs[0] == pytest.approx(8e-5)
        assert lrs[1] < lrs[0] and lrs[2] < lrs[1]
        assert result.latent_augment_draws == 6
        assert set(result.frozen_hashes) == {"vae", "backbone"}
        assert not result.decoder.training

    def test_augmentations_disabled(self) -> None:
        """Test that disabling latent augmentation draws no degraded latents."""
        config = DecoderConfig(pixel_channels=8, steps=1, batch_size=2, use_latent_augment=False, color_augment=False)

        result = train_decoder(config, tiny_backbone(), SceneDataset(size=32, length=4), MaskMixtureConfig(), seed=0)

        assert result.latent_augment_draws == 0
