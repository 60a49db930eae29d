"""Tests for the noise schedule, DDIM sampling and the inpainting U-Net."""

import pytest
import torch

from priorfill.backbone import (
    FrozenBackbone,
    InpaintUNet,
    NoiseSchedule,
    ddim_sample,
    ddim_timesteps,
    downsample_mask,
    estimate_z0,
    inpaint_latent,
    one_step_estimate,
    q_sample,
    unet_input,
)
from priorfill.config import BackboneConfig, SamplerConfig, VAEConfig
from priorfill.errors import ConfigurationError, ShapeMismatchError
from priorfill.vae import KLAutoencoder


def oracle_eps(schedule: NoiseSchedule, z0: torch.Tensor, channels: int):
    """An eps model that knows the clean latent and returns the exact noise."""

    def eps(x_in: torch.Tensor, t: torch.Tensor, cond) -> torch.Tensor:
        z_t = x_in[:, :channels]
        ab = schedule.alpha_bar(t, z_t)
        return (z_t - ab.sqrt() * z0) / (1.0 - ab).sqrt()

    return eps


def tiny_unet_config() -> BackboneConfig:
    return BackboneConfig(base_channels=8, channel_mult=(1, 2), cond_dim=16, heads=2, timesteps=20)


class TestNoiseSchedule:
    """Tests for the linear variance schedule."""

    def test_linear_schedule(self) -> None:
        """Test endpoints and that alpha_bar decreases strictly."""
        schedule = NoiseSchedule.linear(1000)

        assert schedule.timesteps == 1000
        assert float(schedule.betas[0]) == pytest.approx(1e-4)
        assert float(schedule.betas[-1]) == pytest.approx(2e-2)
        assert torch.all(schedule.alpha_bars[1:] < schedule.alpha_bars[:-1])

    def test_too_short_schedule(self) -> None:
        """Test that fewer than 2 timesteps raise."""
        with pytest.raises(ConfigurationError):
            NoiseSchedule.linear(1)

    def test_noising_inverts_with_true_noise(self) -> None:
        """Test that estimate_z0 inverts q_sample when given the exact noise."""
        schedule = NoiseSchedule.linear(100)
        generator = torch.Generator().manual_seed(0)
        z0 = torch.randn(3, 4, 8, 8, generator=generator, dtype=torch.float64)
        noise = torch.randn(3, 4, 8, 8, generator=generator, dtype=torch.float64)
        t = torch.tensor([0, 50, 99])

        z_t = q_sample(schedule, z0, t, noise)

        assert torch.allclose(estimate_z0(z_t, noise, schedule.alpha_bar(t, z_t)), z0, atol=1e-9)


class TestOneStepEstimate:
    """Tests for the single-step clean latent estimate."""

    def test_oracle_model_recovers_clean_latent(self) -> None:
        """Test that a perfect noise predictor yields z0 exactly."""
        schedule = NoiseSchedule.linear(50)
        generator = torch.Generator().manual_seed(1)
        z0 = torch.randn(2, 4, 4, 4, generator=generator, dtype=torch.float64)
        noise = torch.randn(2, 4, 4, 4, generator=generator, dtype=torch.float64)
        t = torch.tensor([10, 40])
        z_t = q_sample(schedule, z0, t, noise)
        m_lat = torch.zeros(2, 1, 4, 4, dtype=torch.float64)

        z0_hat = one_step_estimate(oracle_eps(schedule, z0, 4), z_t, z0, m_lat, t, None, schedule)

        assert torch.allclose(z0_hat, z0, atol=1e-9)

    def test_timestep_out_of_range(self) -> None:
        """Test that t >= T raises."""
        schedule = NoiseSchedule.linear(10)
        z = torch.zeros(1, 4, 4, 4)

        with pytest.raises(ConfigurationError, match="Timesteps"):
            one_step_estimate(
                lambda x, t, c: x[:, :4], z, z, torch.zeros(1, 1, 4, 4), torch.tensor([10]), None, schedule
            )

    def test_unet_input_rejects_mismatched_latents(self) -> None:
        """Test that differing latent shapes raise."""
        with pytest.raises(ShapeMismatchError):
            unet_input(torch.zeros(1, 4, 4, 4), torch.zeros(1, 4, 8, 8), torch.zeros(1, 1, 4, 4))


class TestDDIM:
    """Tests for DDIM sampling."""

    def test_timesteps(self) -> None:
        """Test evenly spaced descending timesteps."""
        assert ddim_timesteps(4, 20) == [19, 13, 6, 0]
        assert ddim_timesteps(1, 20) == [19]

    @pytest.mark.parametrize("num_steps", [0, 21])
    def test_invalid_step_count(self, num_steps: int) -> None:
        """Test that zero steps or more steps than the schedule raise."""
        with pytest.raises(ConfigurationError):
            ddim_timesteps(num_steps, 20)

    def test_oracle_sampling_is_exact(self) -> None:
        """Test that deterministic DDIM with a perfect noise predictor lands on z0."""
        schedule = NoiseSchedule.linear(100)
        generator = torch.Generator().manual_seed(2)
        z0 = torch.randn(1, 4, 4, 4, generator=generator, dtype=torch.float64)
        z_T = torch.randn(1, 4, 4, 4, generator=generator, dtype=torch.float64)
        m_lat = torch.zeros(1, 1, 4, 4, dtype=torch.float64)

        result = ddim_sample(oracle_eps(schedule, z0, 4), schedule, z_T, z0, m_lat, None, num_steps=10)

        assert torch.allclose(result, z0, atol=1e-8)


class TestInpaintUNet:
    """Tests for the U-Net and latent inpainting."""

    def test_latent_mask_any_pixel(self) -> None:
        """Test that a latent cell is masked when any pixel under it is."""
        mask = torch.zeros(1, 1, 8, 8)
        mask[0, 0, 5, 6] = 1.0

        m_lat = downsample_mask(mask, 2)

        assert m_lat.squeeze().tolist() == [[0.0, 0.0], [0.0, 1.0]]

    def test_forward_shape_and_zero_init(self) -> None:
        """Test the output shape and that the output projection starts at zero."""
        torch.manual_seed(0)
        unet = InpaintUNet(tiny_unet_config(), latent_channels=4)

        eps = unet(torch.randn(2, 9, 8, 8), torch.tensor([0, 5]))

        assert eps.shape == (2, 4, 8, 8)
        assert torch.count_nonzero(eps) == 0

    def test_condition_dimension_checked(self) -> None:
        """Test that a condition of the wrong width raises."""
        unet = InpaintUNet(tiny_unet_config(), latent_channels=4)

        with pytest.raises(ShapeMismatchError, match="cond_dim"):
            unet(torch.randn(1, 9, 8, 8), torch.tensor([0]), torch.randn(1, 3, 8))

    def test_inpaint_latent_is_seeded(self) -> None:
        """Test that the same sampler seed reproduces the latent and masks must pair with images."""
        torch.manual_seed(0)
        vae = KLAutoencoder(VAEConfig(image_size=32, base_channels=8)).eval()
        unet = InpaintUNet(tiny_unet_config(), latent_channels=4).eval()
        backbone = FrozenBackbone(vae, unet, NoiseSchedule.from_config(tiny_unet_config()))
        image = torch.zeros(1, 3, 32, 32)
        mask = torch.zeros(1, 1, 32, 32)
        sampler = SamplerConfig(num_steps=3, seed=4)

        first = inpaint_latent(backbone, image, mask, None, sampler)
        second = inpaint_latent(backbone, image, mask, None, sampler)

        assert first.shape == (1, 4, 8, 8)
        assert torch.equal(first, second)
        with pytest.raises(ShapeMismatchError):
            inpaint_latent(backbone, image, torch.zeros(1, 1, 16, 16), None, sampler)
