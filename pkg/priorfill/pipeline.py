"""Stage orchestration: the training DAG, inference, curation, evaluation and ablation presets."""

import json
import platform
import sys
import time
from collections.abc import Callable
from dataclasses import asdict, dataclass, replace
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch
from torch.utils.data import ConcatDataset, Dataset

from priorfill import __version__
from priorfill.alignment import AlignmentModule, align, train_alignment
from priorfill.backbone import FrozenBackbone, InpaintUNet, NoiseSchedule, inpaint_latent, train_backbone
from priorfill.checkpoint import Checkpoint, freeze
from priorfill.config import (
    AlignmentConfig,
    AlignVariant,
    BackboneConfig,
    DecoderConfig,
    FeatNetConfig,
    MAEConfig,
    MaskMixtureConfig,
    RunConfig,
    SamplerConfig,
    VAEConfig,
    from_mapping,
)
from priorfill.corpus import (
    SCENE_FAMILIES,
    SceneDataset,
    load_image,
    load_mask,
    mask_to_tensor,
    save_image,
    save_mask,
    write_synthetic_source,
)
from priorfill.curation import CurationResult, ImageFolderDataset, SourceSpec, build_eval_set
from priorfill.decoder import (
    InpaintDecoder,
    decode_inpaint,
    latent_augment,
    masked_mean_color_error,
    train_decoder,
    unmasked_psnr,
    vanilla_decoder,
)
from priorfill.errors import ConfigurationError, DependencyError, FrozenParameterError, ShapeMismatchError
from priorfill.featnet import ClassifierEmbedder, SceneClassifier, train_featnet
from priorfill.ledger import RunLedger
from priorfill.mae import MaskedAutoEncoder, evaluate_mae, extract_prior, finetune_mae, pretrain_mae, visible_patch_mask
from priorfill.maskgen import sample_eval_mask, sample_rng, sample_training_mask
from priorfill.metrics import evaluate
from priorfill.models import AblationReport, AblationRow, EvalManifest, MaskSample, MetricReport, StageRecord
from priorfill.models import TrainingLog, TrainingStep
from priorfill.vae import KLAutoencoder, train_vae


class Stage(str, Enum):
    VAE = "vae"
    BACKBONE = "backbone"
    MAE = "mae"
    ALIGNMENT = "alignment"
    DECODER = "decoder"
    FEATNET = "featnet"


STAGE_DEPENDENCIES: dict[Stage, tuple[Stage, ...]] = {
    Stage.VAE: (),
    Stage.BACKBONE: (Stage.VAE,),
    Stage.MAE: (),
    Stage.ALIGNMENT: (Stage.VAE, Stage.BACKBONE, Stage.MAE),
    Stage.DECODER: (Stage.VAE, Stage.BACKBONE),
    Stage.FEATNET: (),
}

# Stages whose parameters every later stage treats as frozen
FROZEN_UPSTREAM: dict[Stage, tuple[Stage, ...]] = {
    Stage.ALIGNMENT: (Stage.VAE, Stage.BACKBONE, Stage.MAE),
    Stage.DECODER: (Stage.VAE, Stage.BACKBONE),
}

MAE_PRETRAINED = "mae_pretrained"
STAGE_COMMANDS = {stage: f"train-{stage.value}" for stage in Stage} | {Stage.MAE: "finetune-mae"}
ABLATION_PRESETS = ("mae", "alignment", "decoder")

Progress = Optional[Callable[[TrainingStep], None]]


# ============================================================================
# Run directory layout
# ============================================================================


def checkpoint_path(run_dir: Path, name: str) -> Path:
    return run_dir / "checkpoints" / f"{name}.pt"


def log_path(run_dir: Path, name: str) -> Path:
    return run_dir / "logs" / f"{name}.csv"


def build_dataset(config: RunConfig) -> Dataset:
    """Procedural training scenes plus any configured user image folders."""
    corpus = config.corpus
    parts: list[Dataset] = [SceneDataset(corpus.image_size, corpus.train_size, corpus.seed)]
    parts.extend(ImageFolderDataset(Path(d), corpus.image_size) for d in corpus.image_dirs)
    return parts[0] if len(parts) == 1 else ConcatDataset(parts)


def build_holdout(config: RunConfig) -> SceneDataset:
    """Held-out scenes, rendered from a seed disjoint from the training corpus."""
    return SceneDataset(config.corpus.image_size, config.corpus.holdout_size, config.corpus.seed + 1)


# ============================================================================
# Loading trained stages
# ============================================================================


def _load(run_dir: Path, name: str, module_id: str, profile: str, stage: str) -> Checkpoint:
    path = checkpoint_path(run_dir, name)
    if not path.exists():
        raise DependencyError(stage, module_id, f"no checkpoint at {path}")
    return Checkpoint.load(path, module_id=module_id, profile=profile)


def load_vae(run_dir: Path, profile: str, stage: str = "inpaint") -> KLAutoencoder:
    checkpoint = _load(run_dir, Stage.VAE.value, Stage.VAE.value, profile, stage)
    vae = KLAutoencoder(from_mapping(VAEConfig, checkpoint.config))
    return checkpoint.load_into(vae).eval()


def load_backbone(run_dir: Path, profile: str, stage: str = "inpaint") -> FrozenBackbone:
    vae = load_vae(run_dir, profile, stage)
    checkpoint = _load(run_dir, Stage.BACKBONE.value, Stage.BACKBONE.value, profile, stage)
    config = from_mapping(BackboneConfig, checkpoint.config)
    unet = checkpoint.load_into(InpaintUNet(config, int(checkpoint.extra["latent_channels"]))).eval()
    return FrozenBackbone(vae=vae, unet=unet, schedule=NoiseSchedule.from_config(config))


def load_mae(run_dir: Path, profile: str, stage: str = "inpaint", pretrained: bool = False) -> MaskedAutoEncoder:
    name = MAE_PRETRAINED if pretrained else Stage.MAE.value
    checkpoint = _load(run_dir, name, name, profile, stage)
    model = MaskedAutoEncoder(from_mapping(MAEConfig, checkpoint.config))
    return checkpoint.load_into(model).eval()


def load_alignment(run_dir: Path, profile: str, stage: str = "inpaint") -> AlignmentModule:
    checkpoint = _load(run_dir, Stage.ALIGNMENT.value, Stage.ALIGNMENT.value, profile, stage)
    module = AlignmentModule(from_mapping(AlignmentConfig, checkpoint.config))
    return checkpoint.load_into(module).eval()


def load_decoder(run_dir: Path, profile: str, stage: str = "inpaint") -> InpaintDecoder:
    checkpoint = _load(run_dir, Stage.DECODER.value, Stage.DECODER.value, profile, stage)
    decoder = InpaintDecoder(
        from_mapping(VAEConfig, checkpoint.extra["vae_config"]), int(checkpoint.extra["pixel_channels"])
    )
    return checkpoint.load_into(decoder).eval()


def load_featnet(run_dir: Path, profile: str) -> Optional[ClassifierEmbedder]:
    """The trained feature network as an embedder, or None when that stage has not run."""
    path = checkpoint_path(run_dir, Stage.FEATNET.value)
    if not path.exists():
        return None
    checkpoint = Checkpoint.load(path, module_id=Stage.FEATNET.value, profile=profile)
    net = SceneClassifier(from_mapping(FeatNetConfig, checkpoint.config))
    return ClassifierEmbedder(checkpoint.load_into(net))


# ============================================================================
# Stages
# ============================================================================


def check_dependencies(stage: Stage, run_dir: Path) -> None:
    """
    Raise unless every upstream checkpoint of `stage` exists.

    Raises:
        DependencyError: Naming the first missing upstream stage
    """
    for required in STAGE_DEPENDENCIES[stage]:
        path = checkpoint_path(run_dir, required.value)
        if not path.exists():
            hint = f"no checkpoint at {path}; run 'priorfill {STAGE_COMMANDS[required]}' first"
            raise DependencyError(stage.value, required.value, hint)


def _upstream_hashes(stage: Stage, run_dir: Path, profile: str) -> dict[str, str]:
    hashes = {}
    for required in STAGE_DEPENDENCIES[stage]:
        checkpoint = Checkpoint.load(checkpoint_path(run_dir, required.value), profile=profile)
        hashes[required.value] = checkpoint.content_hash
    return hashes


def check_frozen_records(stage: Stage, run_dir: Path, ledger: RunLedger, upstream: dict[str, str]) -> None:
    """
    Refuse to train on frozen modules whose checkpoints differ from the ledger's record.

    Raises:
        DependencyError: If a frozen upstream stage has no ledger record
        FrozenParameterError: If a frozen checkpoint's hash differs from its record
    """
    for required in FROZEN_UPSTREAM.get(stage, ()):
        record = ledger.get_record(run_dir, required.value)
        if record is None:
            raise DependencyError(stage.value, required.value, "no frozen record in the run ledger")
        if record.content_hash != upstream[required.value]:
            raise FrozenParameterError(
                f"Checkpoint of stage '{required.value}' no longer matches its frozen record "
                f"({upstream[required.value][:12]} != {record.content_hash[:12]}); retrain downstream stages from it"
            )


@dataclass
class _StageOutput:
    checkpoint: Checkpoint
    log: TrainingLog
    frozen_hashes: dict[str, str]
    extra_logs: tuple[TrainingLog, ...] = ()


def _train_stage(
    stage: Stage, config: RunConfig, run_dir: Path, steps: Optional[int], progress: Progress
) -> _StageOutput:
    seed = config.seed
    profile = config.profile
    if stage is Stage.FEATNET:
        corpus = config.corpus
        net, log = train_featnet(
            config.featnet, SceneDataset(corpus.image_size, corpus.train_size, corpus.seed), seed, steps, progress
        )
        checkpoint = Checkpoint.from_module(stage.value, net, asdict(config.featnet), len(log.steps), profile)
        return _StageOutput(checkpoint, log, {})

    dataset = build_dataset(config)
    if stage is Stage.VAE:
        vae, log = train_vae(config.vae, dataset, seed, steps, progress)
        extra = {"latent_scale": float(vae.latent_scale)}
        checkpoint = Checkpoint.from_module(stage.value, vae, asdict(config.vae), len(log.steps), profile, extra)
        return _StageOutput(checkpoint, log, {})

    if stage is Stage.BACKBONE:
        vae = freeze(load_vae(run_dir, profile, stage.value))
        unet, _, log = train_backbone(config.backbone, vae, dataset, config.masks, seed, steps, progress)
        extra = {"latent_channels": vae.config.latent_channels}
        checkpoint = Checkpoint.from_module(stage.value, unet, asdict(config.backbone), len(log.steps), profile, extra)
        return _StageOutput(checkpoint, log, {})

    if stage is Stage.MAE:
        pretrained, pretrain_log = pretrain_mae(config.mae, dataset, seed, steps, progress)
        Checkpoint.from_module(
            MAE_PRETRAINED, pretrained, asdict(config.mae), len(pretrain_log.steps), profile
        ).save(checkpoint_path(run_dir, MAE_PRETRAINED))
        model, log = finetune_mae(pretrained, dataset, config.masks, seed, steps, progress)
        checkpoint = Checkpoint.from_module(stage.value, model, asdict(config.mae), len(log.steps), profile)
        return _StageOutput(checkpoint, log, {}, (pretrain_log,))

    if stage is Stage.ALIGNMENT:
        mae = load_mae(run_dir, profile, stage.value)
        backbone = load_backbone(run_dir, profile, stage.value)
        result = train_alignment(config.alignment, mae, backbone, dataset, config.masks, seed, steps, progress)
        checkpoint = Checkpoint.from_module(
            stage.value,
            result.module,
            asdict(config.alignment),
            len(result.log.steps),
            profile,
            {"full_image_draws": result.full_image_draws},
        )
        return _StageOutput(checkpoint, result.log, result.frozen_hashes)

    backbone = load_backbone(run_dir, profile, stage.value)
    result = train_decoder(config.decoder, backbone, dataset, config.masks, seed, steps, progress)
    extra = {
        "vae_config": asdict(backbone.vae.config),
        "pixel_channels": config.decoder.pixel_channels,
        "latent_augment_draws": result.latent_augment_draws,
    }
    checkpoint = Checkpoint.from_module(
        stage.value, result.decoder, asdict(config.decoder), len(result.log.steps), profile, extra
    )
    return _StageOutput(checkpoint, result.log, result.frozen_hashes)


def run_stage(stage: Stage | str, config: RunConfig, steps: Optional[int] = None, progress: Progress = None) -> Path:
    """
    Execute exactly one training stage and record it in the run ledger.

    Holds the run directory lock for the duration. Upstream checkpoints are
    audited after training; a stage never rewrites them.

    Args:
        stage: Stage to run
        config: Validated run configuration
        steps: Override of the stage's configured step count
        progress: Called once per optimization step

    Returns:
        Path of the written checkpoint

    Raises:
        DependencyError: If an upstream stage has not run
        FrozenParameterError: If a frozen upstream checkpoint changed
    """
    stage = Stage(stage)
    run_dir = config.resolved_run_dir
    check_dependencies(stage, run_dir)

    with RunLedger() as ledger:
        lock = ledger.try_lock(run_dir)
        try:
            upstream = _upstream_hashes(stage, run_dir, config.profile)
            check_frozen_records(stage, run_dir, ledger, upstream)

            started = time.time()
            output = _train_stage(stage, config, run_dir, steps, progress)
            duration = time.time() - started

            path = output.checkpoint.save(checkpoint_path(run_dir, stage.value))
            output.log.write_csv(log_path(run_dir, output.log.stage))
            for extra_log in output.extra_logs:
                extra_log.write_csv(log_path(run_dir, extra_log.stage))

            after = _upstream_hashes(stage, run_dir, config.profile)
            if after != upstream:
                changed = [name for name in upstream if upstream[name] != after.get(name)]
                raise FrozenParameterError(f"Stage '{stage.value}' modified upstream checkpoints: {', '.join(changed)}")

            ledger.save_record(
                run_dir,
                StageRecord(
                    stage=stage.value,
                    checkpoint_path=str(path),
                    content_hash=output.checkpoint.content_hash,
                    seed=config.seed,
                    timestamp=datetime.now().isoformat(),
                    duration_seconds=round(duration, 3),
                    config=config.to_dict(),
                    upstream_hashes=upstream,
                    frozen_hashes=output.frozen_hashes,
                    final_loss=output.log.final_loss if output.log.steps else None,
                    log_path=str(log_path(run_dir, output.log.stage)),
                    priorfill_version=__version__,
                    torch_version=torch.__version__,
                    python_version=sys.version.split()[0],
                    platform=platform.platform(),
                ),
            )
        finally:
            lock.release()
    return path


# ============================================================================
# Inference
# ============================================================================


class Inpainter:
    """The four trained modules wired into the inference path."""

    def __init__(
        self,
        backbone: FrozenBackbone,
        mae: MaskedAutoEncoder,
        alignment: AlignmentModule,
        decoder: InpaintDecoder,
        hashes: Optional[dict[str, str]] = None,
    ):
        self.backbone = backbone
        self.mae = mae
        self.alignment = alignment
        self.decoder = decoder
        self.hashes = hashes or {}

    @classmethod
    def load(cls, run_dir: Path, profile: str) -> "Inpainter":
        hashes = {}
        for name in (Stage.VAE, Stage.BACKBONE, Stage.MAE, Stage.ALIGNMENT, Stage.DECODER):
            path = checkpoint_path(run_dir, name.value)
            if not path.exists():
                raise DependencyError("inpaint", name.value, f"no checkpoint at {path}")
            hashes[name.value] = Checkpoint.load(path, profile=profile).content_hash
        return cls(
            load_backbone(run_dir, profile),
            load_mae(run_dir, profile),
            load_alignment(run_dir, profile),
            load_decoder(run_dir, profile),
            hashes,
        )

    @property
    def image_size(self) -> int:
        return self.mae.config.image_hw[0]

    def check_inputs(self, image: torch.Tensor, mask: np.ndarray) -> None:
        """Raise before any model call when the image and mask do not pair."""
        if image.dim() != 3 or image.shape[0] != 3:
            raise ShapeMismatchError(f"Expected a 3 x H x W image, got {tuple(image.shape)}")
        if mask.ndim != 2 or tuple(mask.shape) != tuple(image.shape[1:]):
            raise ShapeMismatchError(f"Mask {mask.shape} does not match image {tuple(image.shape[1:])}")
        if tuple(mask.shape) != self.mae.config.image_hw:
            raise ShapeMismatchError(f"Inputs are {mask.shape}; this run works at {self.mae.config.image_hw}")

    @torch.no_grad()
    def __call__(
        self, image: torch.Tensor, mask: np.ndarray, sampler: SamplerConfig, generator: torch.Generator
    ) -> torch.Tensor:
        """Inpaint one (3, H, W) image under an (H, W) mask; returns (3, H, W) in [-1, 1]."""
        self.check_inputs(image, mask)
        image = image.unsqueeze(0)
        pixel_mask = mask_to_tensor(mask).unsqueeze(0)
        masked = image * (1.0 - pixel_mask)
        flags = torch.from_numpy(visible_patch_mask(mask, self.mae.config.patch_size)).unsqueeze(0)
        cond = align(self.alignment, extract_prior(self.mae, masked, flags))
        z = inpaint_latent(self.backbone, image, pixel_mask, cond, sampler, generator)
        output = decode_inpaint(self.decoder, z, masked, pixel_mask, sampler.paste_unmasked)
        return output[0].clamp(-1.0, 1.0)


def _provenance(config: RunConfig, sampler: SamplerConfig, hashes: dict[str, str], **inputs: Any) -> dict[str, Any]:
    return {
        "seed": sampler.seed,
        "num_steps": sampler.num_steps,
        "eta": sampler.eta,
        "paste_unmasked": sampler.paste_unmasked,
        "profile": config.profile,
        "checkpoint_hashes": hashes,
        "priorfill_version": __version__,
        **inputs,
    }


def inpaint(
    image_path: Path, mask_path: Path, config: RunConfig, out_path: Path, sampler: Optional[SamplerConfig] = None
) -> Path:
    """
    Inpaint one image with the run's trained modules.

    Writes the PNG and a JSON provenance sidecar (same stem) next to it.

    Raises:
        ShapeMismatchError: If the image and mask do not pair (checked before loading models)
        DependencyError: If a required checkpoint is missing
    """
    sampler = sampler or config.sampler
    image = load_image(image_path)
    mask = load_mask(mask_path)
    if tuple(mask.shape) != tuple(image.shape[1:]):
        raise ShapeMismatchError(f"Mask {mask.shape} does not match image {tuple(image.shape[1:])}")

    inpainter = Inpainter.load(config.resolved_run_dir, config.profile)
    output = inpainter(image, mask, sampler, torch.Generator().manual_seed(sampler.seed))
    save_image(output, out_path)
    provenance = _provenance(
        config, sampler, inpainter.hashes, image=str(image_path.resolve()), mask=str(mask_path.resolve())
    )
    out_path.with_suffix(".json").write_text(json.dumps(provenance, indent=2, sort_keys=True))
    return out_path


def inpaint_manifest(
    manifest_path: Path, out_dir: Path, config: RunConfig, sampler: Optional[SamplerConfig] = None
) -> list[Path]:
    """Inpaint every manifest record into `<out_dir>/<record_id>.png`; record i uses seed + i."""
    sampler = sampler or config.sampler
    manifest = EvalManifest.read(manifest_path)
    inpainter = Inpainter.load(config.resolved_run_dir, config.profile)
    root = manifest_path.parent
    outputs = []
    for index, record in enumerate(manifest.records):
        image = load_image(manifest.resolve(record.image_path, root))
        mask = load_mask(manifest.resolve(record.mask_path, root))
        output = inpainter(image, mask, sampler, torch.Generator().manual_seed(sampler.seed + index))
        path = out_dir / f"{record.record_id}.png"
        save_image(output, path)
        outputs.append(path)
    provenance = _provenance(config, sampler, inpainter.hashes, manifest=str(manifest_path.resolve()))
    (out_dir / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True))
    return outputs


# ============================================================================
# Masks, curation and evaluation
# ============================================================================


def generate_mask_batch(
    mask_config: MaskMixtureConfig, count: int, size: int, seed: int, out_dir: Path, eval_mode: bool = False
) -> list[MaskSample]:
    """Write `count` masks as PNGs plus a stats.json sidecar; mask i is drawn from sample_rng(seed, i)."""
    samples = []
    for index in range(count):
        rng = sample_rng(seed, index)
        if eval_mode:
            sample = sample_eval_mask(rng, size, size, mask_config)
        else:
            sample = sample_training_mask(mask_config, rng, size, size)
        sample.seed = seed
        save_mask(sample.mask, out_dir / f"{index:05d}.png")
        samples.append(sample)
    stats = {
        "seed": seed,
        "size": size,
        "mode": "eval" if eval_mode else "train",
        "config": asdict(mask_config.eval_mixture() if eval_mode else mask_config),
        "masks": [{"index": i, **s.stats()} for i, s in enumerate(samples)],
    }
    (out_dir / "stats.json").write_text(json.dumps(stats, indent=2))
    return samples


def synthetic_sources(out_dir: Path, count: int, size: int, seed: int) -> list[SourceSpec]:
    """One generated source per scene family, tagged with the family name."""
    sources = []
    for number, family in enumerate(SCENE_FAMILIES):
        image_dir, seg_dir = write_synthetic_source(out_dir / family, family, count, size, seed + number)
        sources.append(
            SourceSpec(
                name=family,
                image_dir=str(image_dir),
                domain_tag=family,
                segmentation_dir=str(seg_dir) if seg_dir else None,
            )
        )
    return sources


def curate(
    config: RunConfig, out_dir: Path, sources: Optional[list[SourceSpec]] = None, synthetic_count: int = 100
) -> CurationResult:
    """Build an evaluation set; without sources, four synthetic domains are generated first."""
    if sources is None:
        sources = synthetic_sources(out_dir / "sources", synthetic_count, config.curation.size, config.seed)
    embedder = load_featnet(config.resolved_run_dir, config.profile)
    return build_eval_set(sources, out_dir, config.masks, config.curation, config.seed, embedder)


def evaluate_run(
    config: RunConfig, manifest_path: Path, outputs_dir: Path, report_dir: Optional[Path] = None
) -> MetricReport:
    """Score outputs with the run's feature network when it exists."""
    embedder = load_featnet(config.resolved_run_dir, config.profile)
    return evaluate(manifest_path, outputs_dir, embedder, config.metrics, report_dir)


# ============================================================================
# Ablations
# ============================================================================


def _ablate_mae(config: RunConfig, run_dir: Path) -> list[AblationRow]:
    holdout = build_holdout(config)
    rows = []
    for variant, pretrained in (("pretrained", True), ("finetuned", False)):
        model = load_mae(run_dir, config.profile, "ablate", pretrained=pretrained)
        loss = evaluate_mae(model, holdout, config.masks, config.seed)
        rows.append(AblationRow(variant=variant, metrics={"masked_mse": loss}, seed=config.seed))
    return rows


def _ablate_alignment(config: RunConfig, run_dir: Path, steps: Optional[int], progress: Progress) -> list[AblationRow]:
    mae = load_mae(run_dir, config.profile, "ablate")
    backbone = load_backbone(run_dir, config.profile, "ablate")
    dataset = build_dataset(config)
    rows = []
    for variant in (AlignVariant.LINEAR_ONLY, AlignVariant.ATTN1, AlignVariant.CROSS_X4, AlignVariant.SELF_X4):
        variant_config = replace(config.alignment, variant=variant.value)
        result = train_alignment(variant_config, mae, backbone, dataset, config.masks, config.seed, steps, progress)
        metrics = {
            "first_loss": result.log.window_mean(first=True),
            "final_loss": result.log.window_mean(first=False),
        }
        rows.append(AblationRow(variant=variant.value, metrics=metrics, seed=config.seed))
    return rows


@torch.no_grad()
def score_decoder(
    decoder: InpaintDecoder, backbone: FrozenBackbone, config: RunConfig, batch_size: int = 16
) -> dict[str, float]:
    """
    Decode degraded latents of held-out scenes and measure mask-unmask consistency.

    Each item gets an evaluation mask from sample_rng(seed, i); latents are degraded
    with the same one-step estimate used for training so every variant sees identical inputs.
    """
    holdout = build_holdout(config)
    size = config.corpus.image_size
    generator = torch.Generator().manual_seed(config.seed)
    color, psnr = [], []
    for start in range(0, len(holdout), batch_size):
        indices = range(start, min(start + batch_size, len(holdout)))
        image = torch.stack([holdout[i][0] for i in indices])
        masks = [sample_eval_mask(sample_rng(config.seed, i), size, size, config.masks).mask for i in indices]
        mask = torch.stack([mask_to_tensor(m) for m in masks])
        z = latent_augment(image, backbone, generator, config.decoder.latent_augment)
        output = decode_inpaint(decoder, z, image * (1.0 - mask), mask)
        color.append(masked_mean_color_error(output, image, mask) * len(indices))
        psnr.append(unmasked_psnr(output, image, mask) * len(indices))
    return {"masked_color_error": sum(color) / len(holdout), "unmasked_psnr": sum(psnr) / len(holdout)}


def _ablate_decoder(config: RunConfig, run_dir: Path, steps: Optional[int], progress: Progress) -> list[AblationRow]:
    backbone = load_backbone(run_dir, config.profile, "ablate")
    dataset = build_dataset(config)
    variants: list[tuple[str, Optional[DecoderConfig]]] = [
        ("vanilla", None),
        ("color_aug_only", replace(config.decoder, color_augment=True, use_latent_augment=False)),
        ("full", replace(config.decoder, color_augment=True, use_latent_augment=True)),
    ]
    rows = []
    for name, decoder_config in variants:
        if decoder_config is None:
            decoder = vanilla_decoder(backbone, config.decoder.pixel_channels)
        else:
            decoder = train_decoder(
                decoder_config, backbone, dataset, config.masks, config.seed, steps, progress
            ).decoder
        rows.append(AblationRow(variant=name, metrics=score_decoder(decoder, backbone, config), seed=config.seed))
    return rows


def ablate(
    preset: str,
    config: RunConfig,
    steps: Optional[int] = None,
    progress: Progress = None,
    out_dir: Optional[Path] = None,
) -> AblationReport:
    """
    Train and evaluate the variants of one preset under identical seeds and data.

    Presets: "mae" (pretrained vs fine-tuned held-out masked MSE), "alignment"
    (four alignment variants, diffusion loss) and "decoder" (vanilla, color
    augmentation only, full). Writes ablations/<preset>.json and .csv under
    `out_dir` (default: the run directory).

    Raises:
        ConfigurationError: For an unknown preset
        DependencyError: If the shared frozen modules have not been trained
    """
    run_dir = config.resolved_run_dir
    if preset == "mae":
        if not checkpoint_path(run_dir, MAE_PRETRAINED).exists():
            raise DependencyError("ablate", Stage.MAE.value, "no pretrained MAE checkpoint")
        rows = _ablate_mae(config, run_dir)
    elif preset == "alignment":
        check_dependencies(Stage.ALIGNMENT, run_dir)
        rows = _ablate_alignment(config, run_dir, steps, progress)
    elif preset == "decoder":
        check_dependencies(Stage.DECODER, run_dir)
        rows = _ablate_decoder(config, run_dir, steps, progress)
    else:
        raise ConfigurationError(f"Unknown ablation preset '{preset}'; choose from {', '.join(ABLATION_PRESETS)}")

    report = AblationReport(preset=preset, rows=rows)
    target = (out_dir or run_dir) / "ablations"
    target.mkdir(parents=True, exist_ok=True)
    (target / f"{preset}.json").write_text(report.to_json())
    (target / f"{preset}.csv").write_text(report.to_csv())
    return report
