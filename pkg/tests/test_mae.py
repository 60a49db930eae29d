"""Tests for the masked auto-encoder."""

import numpy as np
import pytest
import torch

from priorfill.checkpoint import parameter_hash
from priorfill.config import MAEConfig, MaskMixtureConfig, PriorTap
from priorfill.corpus import SceneDataset
from priorfill.errors import ConfigurationError, MAEError, ShapeMismatchError
from priorfill.mae import (
    MaskedAutoEncoder,
    composite,
    evaluate_mae,
    extract_prior,
    finetune_mae,
    inpainting_patch_mask,
    mae_forward,
    patchify,
    pretrain_mae,
    unpatchify,
    visible_patch_mask,
)


def small_config(**overrides) -> MAEConfig:
    values = dict(
        image_size=32,
        patch_size=16,
        encoder_depth=1,
        decoder_depth=1,
        token_dim=16,
        heads=2,
        batch_size=2,
        pretrain_steps=2,
        finetune_steps=2,
    )
    values.update(overrides)
    return MAEConfig(**values)


def small_model(seed: int = 0, **overrides) -> MaskedAutoEncoder:
    torch.manual_seed(seed)
    return MaskedAutoEncoder(small_config(**overrides)).eval()


class TestPatchify:
    """Tests for the patch layout."""

    def test_row_major_order(self) -> None:
        """Test that token 1 is the top row, second column patch."""
        image = torch.zeros(1, 3, 4, 4)
        image[0, :, 0:2, 2:4] = 1.0

        tokens = patchify(image, 2)

        assert tokens.shape == (1, 4, 12)
        assert tokens[0, 1].eq(1.0).all()
        assert tokens[0, [0, 2, 3]].eq(0.0).all()

    def test_unpatchify_inverts(self) -> None:
        """Test that unpatchify restores the image exactly."""
        image = torch.randn(2, 3, 8, 12)

        assert torch.equal(unpatchify(patchify(image, 4), 4, (8, 12)), image)

    def test_non_divisible(self) -> None:
        """Test that sizes not divisible by the patch size raise."""
        with pytest.raises(ConfigurationError):
            patchify(torch.zeros(1, 3, 10, 8), 4)


class TestMaskedAutoEncoder:
    """Tests for the encoder / decoder forward pass."""

    def test_shapes(self) -> None:
        """Test prior and prediction shapes."""
        model = small_model()
        patch_mask = torch.tensor([[True, False, True, False]])

        prior, prediction = model(torch.randn(1, 3, 32, 32), patch_mask)

        assert prior.shape == (1, 4, 16)
        assert prediction.shape == (1, 4, 16 * 16 * 3)

    def test_masked_content_does_not_leak(self) -> None:
        """Test that changing pixels under masked patches leaves every output unchanged."""
        model = small_model()
        patch_mask = torch.tensor([[True, False, False, True]])
        image = torch.randn(1, 3, 32, 32)
        altered = image.clone()
        altered[:, :, 0:16, 0:16] = 5.0
        altered[:, :, 16:32, 16:32] = -5.0

        prior_a, prediction_a = model(image, patch_mask)
        prior_b, prediction_b = model(altered, patch_mask)

        assert torch.equal(prior_a, prior_b)
        assert torch.equal(prediction_a, prediction_b)

    def test_padding_does_not_change_outputs(self) -> None:
        """Test that a sample's outputs do not depend on other samples' visible counts."""
        model = small_model()
        image = torch.randn(2, 3, 32, 32)
        patch_mask = torch.tensor([[True, True, True, False], [False, False, True, False]])

        batched, _ = model(image, patch_mask)
        alone, _ = model(image[:1], patch_mask[:1])

        assert torch.allclose(batched[:1], alone, atol=1e-5)

    def test_encoder_tap(self) -> None:
        """Test that the encoder tap exports mask tokens at masked positions."""
        model = small_model(prior_tap=PriorTap.ENCODER_LAST.value)
        patch_mask = torch.tensor([[True, False, True, False]])

        prior, _ = model(torch.randn(1, 3, 32, 32), patch_mask)

        assert torch.equal(prior[0, 0], model.mask_token[0, 0])
        assert torch.equal(prior[0, 2], model.mask_token[0, 0])

    def test_encoder_tap_exports_encoder_tokens(self) -> None:
        """Test that visible positions of the encoder tap hold the encoder output, not the decoder embedding."""
        model = small_model(prior_tap=PriorTap.ENCODER_LAST.value).eval()
        patch_mask = torch.tensor([[True, False, True, False]])
        captured = []
        handle = model.encoder_norm.register_forward_hook(lambda _m, _i, out: captured.append(out))
        try:
            with torch.no_grad():
                prior, _ = model(torch.randn(1, 3, 32, 32), patch_mask)
        finally:
            handle.remove()

        encoded = captured[0]
        assert torch.equal(prior[0, 1], encoded[0, 0])
        assert torch.equal(prior[0, 3], encoded[0, 1])

    def test_prior_gradients_match_finite_differences(self) -> None:
        """Test analytic gradients of the prior against finite differences in double precision."""
        model = small_model().double().train()
        patch_mask = torch.tensor([[True, False, False, True]])
        image = torch.randn(1, 3, 32, 32, dtype=torch.float64, requires_grad=True)

        assert torch.autograd.gradcheck(lambda x: model(x, patch_mask)[0], (image,), eps=1e-6, atol=1e-4)

    def test_fully_masked_rejected(self) -> None:
        """Test that a sample with no visible patch raises."""
        with pytest.raises(MAEError, match="Every patch"):
            small_model()(torch.zeros(1, 3, 32, 32), torch.ones(1, 4, dtype=torch.bool))

    def test_wrong_image_size(self) -> None:
        """Test that images of the wrong size raise."""
        with pytest.raises(ShapeMismatchError):
            small_model()(torch.zeros(1, 3, 64, 64), torch.zeros(1, 4, dtype=torch.bool))


class TestMAELoss:
    """Tests for the masked-patch reconstruction loss."""

    def test_no_masked_patch_rejected(self) -> None:
        """Test that an empty loss set raises."""
        with pytest.raises(MAEError, match="no masked patches"):
            mae_forward(small_model(), torch.zeros(1, 3, 32, 32), torch.zeros(1, 4, dtype=torch.bool))

    def test_loss_only_counts_masked_patches(self) -> None:
        """Test that the loss equals the MSE over masked patches of the prediction."""
        model = small_model()
        image = torch.randn(1, 3, 32, 32)
        patch_mask = torch.tensor([[False, True, False, False]])

        reconstruction, loss = mae_forward(model, image, patch_mask)
        expected = (patchify(reconstruction, 16)[0, 1] - patchify(image, 16)[0, 1]).pow(2).mean()

        assert float(loss) == pytest.approx(float(expected), rel=1e-5)

    def test_composite(self) -> None:
        """Test that compositing keeps ground truth outside the mask."""
        image = torch.zeros(1, 3, 2, 2)
        reconstruction = torch.ones(1, 3, 2, 2)
        mask = torch.tensor([[[[1.0, 0.0], [0.0, 0.0]]]])

        result = composite(reconstruction, image, mask)

        assert result[0, :, 0, 0].eq(1.0).all()
        assert float(result.sum()) == 3.0


class TestPatchMaskPolicy:
    """Tests for the inpainting patch masks."""

    def test_inpainting_patch_mask_enlarged(self) -> None:
        """Test that enlarged masks reach the target ratio and keep a visible patch."""
        config = small_config(image_size=64)
        for i in range(20):
            flags = inpainting_patch_mask(MaskMixtureConfig(), np.random.default_rng(i), config, 0.75)

            assert flags.sum() >= 12
            assert not flags.all()

    def test_visible_patch_fallback(self) -> None:
        """Test that the least-masked patch stays visible when every patch overlaps the mask."""
        mask = np.ones((32, 32), np.uint8)
        mask[16:32, 0:16] = 0
        mask[20, 4] = 1

        flags = visible_patch_mask(mask, 16)

        assert flags.tolist() == [True, True, False, True]

    def test_visible_patch_mask_passthrough(self) -> None:
        """Test that partial masks are converted without changes."""
        mask = np.zeros((32, 32), np.uint8)
        mask[0, 0] = 1

        assert visible_patch_mask(mask, 16).tolist() == [True, False, False, False]


class TestTraining:
    """Tests for pretraining and fine-tuning."""

    def test_finetune_leaves_pretrained_untouched(self) -> None:
        """Test that fine-tuning trains a copy and both logs cover every step."""
        dataset = SceneDataset(size=32, length=4, seed=0)
        pretrained, pretrain_log = pretrain_mae(small_config(), dataset, seed=0)
        before = parameter_hash(pretrained)

        finetuned, finetune_log = finetune_mae(pretrained, dataset, MaskMixtureConfig(), seed=0)

        assert parameter_hash(pretrained) == before
        assert parameter_hash(finetuned) != before
        assert pretrain_log.stage == "mae_pretrain" and len(pretrain_log.steps) == 2
        assert finetune_log.stage == "mae" and len(finetune_log.steps) == 2

    def test_evaluate_and_extract(self) -> None:
        """Test held-out evaluation and prior extraction."""
        model = small_model()
        dataset = SceneDataset(size=32, length=3, seed=1)

        score = evaluate_mae(model, dataset, MaskMixtureConfig(), seed=0, batch_size=2)
        prior = extract_prior(model, torch.zeros(2, 3, 32, 32), torch.tensor([[True, False, True, True]] * 2))

        assert np.isfinite(score) and score > 0
        assert prior.shape == (2, 4, 16)
