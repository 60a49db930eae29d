"""Configuration dataclasses for every stage, plus TOML loading."""

import math
import os
import tomllib
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Optional, get_origin, get_type_hints

from platformdirs import user_data_dir

from priorfill.errors import ConfigurationError

RUN_DIR_ENV = "PRIORFILL_RUN_DIR"

# Resolution profiles: name -> image side length
PROFILES = {"desk": 64, "full": 512}
SUPPORTED_PROFILES = {"desk"}


class MaskFamily(str, Enum):
    """Families of the training mask mixture."""

    OBJECT = "object"
    COMOD = "comod"
    LAMA = "lama"
    RECT = "rect"
    RECT_COMPLEMENT = "rect_complement"


class AlignVariant(str, Enum):
    """Alignment module variants compared by the alignment ablation."""

    LINEAR_ONLY = "linear_only"
    ATTN1 = "attn1"
    SELF_X4 = "self_x4"
    CROSS_X4 = "cross_x4"


class PriorTap(str, Enum):
    """Which MAE activation is exported as the prior."""

    DECODER_PENULTIMATE = "decoder_penultimate"
    ENCODER_LAST = "encoder_last"


def _check_range(name: str, bounds: tuple[float, float], low: float = 0.0, high: float = math.inf) -> None:
    lo, hi = bounds
    if not (low <= lo <= hi <= high):
        raise ConfigurationError(f"{name} must satisfy {low} <= min <= max <= {high}, got {bounds}")


@dataclass
class MaskMixtureConfig:
    """Mixture of mask families with ratio bounds.

    Size ranges are fractions of the shorter image side so the same config works
    at every resolution.
    """

    weights: dict[str, float] = field(
        default_factory=lambda: {
            MaskFamily.OBJECT.value: 0.50,
            MaskFamily.COMOD.value: 0.20,
            MaskFamily.LAMA.value: 0.20,
            MaskFamily.RECT.value: 0.05,
            MaskFamily.RECT_COMPLEMENT.value: 0.05,
        }
    )
    union_chance: float = 0.25
    ratio_min: float = 0.1
    ratio_max: float = 0.75
    eval_ratio_min: float = 0.2
    eval_ratio_max: float = 0.8
    seed: int = 0
    max_attempts: int = 100

    # Object-shape blobs
    object_vertices: tuple[int, int] = (8, 16)
    object_radius: tuple[float, float] = (0.12, 0.4)
    segmentation_dir: Optional[str] = None

    # Co-Mod style: rectangles plus medium strokes
    comod_max_rects: int = 3
    comod_rect_size: tuple[float, float] = (0.1, 0.5)
    comod_strokes: tuple[int, int] = (1, 4)
    comod_width: tuple[float, float] = (0.03, 0.08)
    comod_vertices: tuple[int, int] = (4, 8)

    # LaMa style: wide polyline strokes
    lama_strokes: tuple[int, int] = (1, 5)
    lama_width: tuple[float, float] = (0.06, 0.2)
    lama_vertices: tuple[int, int] = (4, 10)

    stroke_length: tuple[float, float] = (0.1, 0.35)
    rect_size: tuple[float, float] = (0.3, 0.9)
    complement_rect_size: tuple[float, float] = (0.5, 0.95)

    def validate(self) -> None:
        """Raise ConfigurationError when an invariant is violated."""
        unknown = set(self.weights) - {family.value for family in MaskFamily}
        if unknown:
            raise ConfigurationError(f"Unknown mask families: {sorted(unknown)}")
        if any(w < 0 for w in self.weights.values()):
            raise ConfigurationError(f"Mask family weights must be nonnegative: {self.weights}")
        total = sum(self.weights.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigurationError(f"Mask family weights must sum to 1, got {total}")
        if not 0.0 <= self.union_chance <= 1.0:
            raise ConfigurationError(f"union_chance must be a probability, got {self.union_chance}")
        if not 0.0 <= self.ratio_min < self.ratio_max <= 1.0:
            raise ConfigurationError(f"Need 0 <= ratio_min < ratio_max <= 1, got [{self.ratio_min}, {self.ratio_max}]")
        if not 0.0 <= self.eval_ratio_min < self.eval_ratio_max <= 1.0:
            raise ConfigurationError(
                f"Need 0 <= eval_ratio_min < eval_ratio_max <= 1, got [{self.eval_ratio_min}, {self.eval_ratio_max}]"
            )
        if self.max_attempts < 1:
            raise ConfigurationError("max_attempts must be at least 1")
        _check_range("object_vertices", self.object_vertices, low=3)
        _check_range("object_radius", self.object_radius, high=1.0)
        _check_range("comod_rect_size", self.comod_rect_size, high=1.0)
        _check_range("comod_strokes", self.comod_strokes)
        _check_range("comod_width", self.comod_width, high=1.0)
        _check_range("comod_vertices", self.comod_vertices, low=2)
        _check_range("lama_strokes", self.lama_strokes, low=1)
        _check_range("lama_width", self.lama_width, high=1.0)
        _check_range("lama_vertices", self.lama_vertices, low=2)
        _check_range("stroke_length", self.stroke_length, high=1.0)
        _check_range("rect_size", self.rect_size, high=1.0)
        _check_range("complement_rect_size", self.complement_rect_size, high=1.0)

    def eval_mixture(self) -> "MaskMixtureConfig":
        """Evaluation variant: rectangle families dropped, weights renormalized, eval ratio bounds."""
        kept = {
            name: weight
            for name, weight in self.weights.items()
            if name in (MaskFamily.OBJECT.value, MaskFamily.COMOD.value, MaskFamily.LAMA.value)
        }
        total = sum(kept.values())
        if total <= 0:
            raise ConfigurationError("Evaluation mixture needs positive weight on object, comod or lama masks")
        return replace(
            self,
            weights={name: weight / total for name, weight in kept.items()},
            ratio_min=self.eval_ratio_min,
            ratio_max=self.eval_ratio_max,
        )


@dataclass
class VAEConfig:
    """KL-regularized autoencoder."""

    image_size: int = 64
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2, 2)
    latent_channels: int = 4
    kl_weight: float = 1e-6
    steps: int = 2000
    batch_size: int = 16
    lr: float = 2e-4
    scale_batches: int = 4

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.channel_mult) - 1)

    @property
    def latent_size(self) -> int:
        return self.image_size // self.downsample_factor

    def validate(self) -> None:
        if not self.channel_mult:
            raise ConfigurationError("channel_mult must not be empty")
        if self.image_size % self.downsample_factor:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by downsample factor {self.downsample_factor}"
            )


@dataclass
class BackboneConfig:
    """Inpainting U-Net and its noise schedule."""

    base_channels: int = 64
    channel_mult: tuple[int, ...] = (1, 2)
    cond_dim: int = 64
    heads: int = 4
    null_tokens: int = 1
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    steps: int = 4000
    batch_size: int = 16
    lr: float = 2e-4

    def validate(self) -> None:
        if self.timesteps < 2:
            raise ConfigurationError("timesteps must be at least 2")
        if not 0.0 < self.beta_start < self.beta_end < 1.0:
            raise ConfigurationError(f"Need 0 < beta_start < beta_end < 1, got {self.beta_start}, {self.beta_end}")
        if self.cond_dim % self.heads:
            raise ConfigurationError(f"cond_dim {self.cond_dim} not divisible by heads {self.heads}")


@dataclass
class MAEConfig:
    """Miniature masked auto-encoder."""

    image_size: int | tuple[int, int] = 64
    patch_size: int = 8
    encoder_depth: int = 4
    decoder_depth: int = 2
    token_dim: int = 128
    heads: int = 4
    mlp_ratio: float = 4.0
    norm_pix_loss: bool = False
    prior_tap: str = PriorTap.DECODER_PENULTIMATE.value
    pretrain_mask_ratio: float = 0.75
    finetune_enlarge_ratio: float = 0.75
    pretrain_steps: int = 2000
    finetune_steps: int = 1000
    batch_size: int = 32
    lr: float = 1.5e-4
    weight_decay: float = 0.05

    @property
    def image_hw(self) -> tuple[int, int]:
        if isinstance(self.image_size, int):
            return self.image_size, self.image_size
        height, width = self.image_size
        return int(height), int(width)

    @property
    def grid_size(self) -> tuple[int, int]:
        height, width = self.image_hw
        return height // self.patch_size, width // self.patch_size

    @property
    def num_patches(self) -> int:
        rows, cols = self.grid_size
        return rows * cols

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    def validate(self) -> None:
        height, width = self.image_hw
        if height % self.patch_size or width % self.patch_size:
            raise ConfigurationError(f"MAE image size {self.image_hw} not divisible by patch size {self.patch_size}")
        if self.token_dim % self.heads:
            raise ConfigurationError(f"token_dim {self.token_dim} not divisible by heads {self.heads}")
        if self.prior_tap not in {tap.value for tap in PriorTap}:
            raise ConfigurationError(f"Unknown prior_tap '{self.prior_tap}'")
        for name in ("pretrain_mask_ratio", "finetune_enlarge_ratio"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigurationError(f"{name} must be in (0, 1), got {value}")


@dataclass
class AlignmentConfig:
    """Maps MAE prior tokens into the backbone's cross-attention space."""

    in_dim: int = 128
    cond_dim: int = 64
    num_tokens: int = 64
    num_blocks: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    variant: str = AlignVariant.SELF_X4.value
    positional_encoding: bool = True
    p_start: float = 1.0
    p_end: float = 0.1
    p_decay_steps: int = 2000
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-4
    large_lr: float = 5e-2
    use_large_lr: bool = False
    weight_decay: float = 0.01

    @property
    def effective_lr(self) -> float:
        return self.large_lr if self.use_large_lr else self.lr

    @property
    def effective_blocks(self) -> int:
        variant = AlignVariant(self.variant)
        if variant is AlignVariant.LINEAR_ONLY:
            return 0
        if variant is AlignVariant.ATTN1:
            return 1
        return self.num_blocks

    def validate(self) -> None:
        if self.variant not in {v.value for v in AlignVariant}:
            raise ConfigurationError(f"Unknown alignment variant '{self.variant}'")
        if self.num_blocks < 0:
            raise ConfigurationError("num_blocks must be nonnegative")
        if self.cond_dim % self.heads:
            raise ConfigurationError(f"cond_dim {self.cond_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.p_end <= 1.0 or not 0.0 <= self.p_start <= 1.0:
            raise ConfigurationError("p_start and p_end must be probabilities")
        if self.p_decay_steps < 0:
            raise ConfigurationError("p_decay_steps must be nonnegative")


@dataclass
class ColorJitterParams:
    """Maximum jitter magnitudes for decoder color augmentation."""

    brightness: float = 0.15
    contrast: float = 0.2
    saturation: float = 0.1
    hue: float = 0.03

    def validate(self) -> None:
        for name in ("brightness", "contrast", "saturation", "hue"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} jitter must be nonnegative")
        if self.brightness > 1 or self.contrast > 1 or self.saturation > 1:
            raise ConfigurationError("brightness, contrast and saturation jitter must be <= 1")
        if self.hue > 0.5:
            raise ConfigurationError(f"hue jitter must be <= 0.5, got {self.hue}")


@dataclass
class LatentAugmentConfig:
    """One-step degraded latent estimation used while training the decoder.

    t_min / t_max are expressed on a 1000-step schedule and rescaled to the
    backbone's actual step count.
    """

    t_min: int = 500
    t_max: int = 1000
    round_trip: bool = True
    probability: float = 0.5

    def validate(self) -> None:
        if not 0 <= self.t_min < self.t_max <= 1000:
            raise ConfigurationError(f"Need 0 <= t_min < t_max <= 1000, got [{self.t_min}, {self.t_max})")
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigurationError("latent augmentation probability must be in [0, 1]")


@dataclass
class DecoderConfig:
    """Mask-unmask consistent decoder training."""

    color_jitter: ColorJitterParams = field(default_factory=ColorJitterParams)
    latent_augment: LatentAugmentConfig = field(default_factory=LatentAugmentConfig)
    color_augment: bool = True
    use_latent_augment: bool = True
    masked_weight: float = 1.0
    pixel_channels: int = 32
    steps: int = 2000
    batch_size: int = 8
    lr: float = 8e-5
    cosine_decay: bool = True

    def validate(self) -> None:
        self.color_jitter.validate()
        self.latent_augment.validate()
        if self.masked_weight < 0:
            raise ConfigurationError("masked_weight must be nonnegative")


@dataclass
class FeatNetConfig:
    """Small scene classifier used as the metric feature extractor."""

    image_size: int = 64
    channels: tuple[int, ...] = (16, 32, 64)
    steps: int = 800
    batch_size: int = 32
    lr: float = 1e-3


@dataclass
class SamplerConfig:
    """DDIM sampling flags."""

    num_steps: int = 50
    eta: float = 0.0
    seed: int = 0
    paste_unmasked: bool = False


@dataclass
class CorpusConfig:
    """Procedural toy corpus (optionally extended with user image folders)."""

    image_size: int = 64
    train_size: int = 2048
    holdout_size: int = 128
    seed: int = 0
    image_dirs: list[str] = field(default_factory=list)


@dataclass
class CurationConfig:
    """Evaluation-set construction."""

    per_source_k: int = 25
    size: int = 64
    split_trials: int = 5
    split_rule: str = "sse"
    embed_dim: int = 256
    embed_input: int = 32

    def validate(self) -> None:
        if self.split_rule not in ("sse", "size"):
            raise ConfigurationError(f"split_rule must be 'sse' or 'size', got '{self.split_rule}'")
        if self.per_source_k < 1:
            raise ConfigurationError("per_source_k must be at least 1")


@dataclass
class MetricsConfig:
    """Metric kernel constants."""

    psnr_cap: float = 99.0
    fid_eps: float = 1e-6
    imag_tol: float = 1e-3
    svm_c: float = 1.0
    svm_max_iter: int = 20000


@dataclass
class RunConfig:
    """Everything a run needs: one config per stage plus global settings."""

    seed: int = 0
    run_dir: Optional[str] = None
    profile: str = "desk"
    masks: MaskMixtureConfig = field(default_factory=MaskMixtureConfig)
    vae: VAEConfig = field(default_factory=VAEConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    mae: MAEConfig = field(default_factory=MAEConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    featnet: FeatNetConfig = field(default_factory=FeatNetConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    curation: CurationConfig = field(default_factory=CurationConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    @property
    def resolved_run_dir(self) -> Path:
        return Path(self.run_dir).expanduser().resolve() if self.run_dir else default_run_dir()

    def validate(self) -> None:
        """Check every stage config and the cross-stage agreements."""
        if self.profile not in PROFILES:
            raise ConfigurationError(f"Unknown resolution profile '{self.profile}'")
        if self.profile not in SUPPORTED_PROFILES:
            raise ConfigurationError(
                f"Resolution profile '{self.profile}' ({PROFILES[self.profile]}px) is not supported at desk scale"
            )
        size = PROFILES[self.profile]
        self.masks.validate()
        self.vae.validate()
        self.backbone.validate()
        self.mae.validate()
        self.alignment.validate()
        self.decoder.validate()
        self.curation.validate()

        sizes = {
            "vae.image_size": self.vae.image_size,
            "mae.image_size": self.mae.image_hw[0] if self.mae.image_hw[0] == self.mae.image_hw[1] else -1,
            "corpus.image_size": self.corpus.image_size,
            "featnet.image_size": self.featnet.image_size,
        }
        for name, value in sizes.items():
            if value != size:
                raise ConfigurationError(f"{name} = {value} does not match the '{self.profile}' profile ({size}px)")
        if self.alignment.in_dim != self.mae.token_dim:
            raise ConfigurationError(
                f"alignment.in_dim ({self.alignment.in_dim}) must equal mae.token_dim ({self.mae.token_dim})"
            )
        if self.alignment.cond_dim != self.backbone.cond_dim:
            raise ConfigurationError(
                f"alignment.cond_dim ({self.alignment.cond_dim}) must equal "
                f"backbone.cond_dim ({self.backbone.cond_dim})"
            )
        if self.alignment.num_tokens != self.mae.num_patches:
            raise ConfigurationError(
                f"alignment.num_tokens ({self.alignment.num_tokens}) must equal "
                f"the MAE patch count ({self.mae.num_patches})"
            )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def default_run_dir() -> Path:
    """Run directory from the environment, else the per-user data directory."""
    env_value = os.environ.get(RUN_DIR_ENV)
    if env_value:
        return Path(env_value).expanduser().resolve()
    return Path(user_data_dir("priorfill")) / "runs" / "default"


def from_mapping[T](cls: type[T], data: dict[str, Any]) -> T:
    """Build a (nested) config dataclass from a plain mapping, rejecting unknown keys."""
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}  # type: ignore[arg-type]
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"Unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")

    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        hint = hints[name]
        if isinstance(hint, type) and is_dataclass(hint) and isinstance(value, dict):
            kwargs[name] = from_mapping(hint, value)
        elif isinstance(value, list) and get_origin(hint) is not list:
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_toml(path: Path) -> dict[str, Any]:
    """Read a TOML file, wrapping I/O and parse failures."""
    try:
        with path.open("rb") as f:
            return tomllib.load(f)
    except OSError as e:
        raise ConfigurationError(f"Cannot read config file {path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(f"Invalid TOML in {path}: {e}") from e


def load_run_config(path: Optional[Path] = None, overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    """Load a run config from TOML (or defaults) and apply top-level overrides."""
    data = load_toml(path) if path is not None else {}
    config = from_mapping(RunConfig, data)
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(config, key, value)
    config.validate()
    return config


def load_mask_config(path: Optional[Path] = None) -> MaskMixtureConfig:
    """Load a standalone mask generator config (a bare table or a [masks] table)."""
    if path is None:
        config = MaskMixtureConfig()
    else:
        data = load_toml(path)
        config = from_mapping(MaskMixtureConfig, data.get("masks", data))
    config.validate()
    return config


def _set_dotted(config: Any, dotted: str, value: Any) -> None:
    target = config
    *parents, leaf = dotted.split(".")
    for part in parents:
        if not is_dataclass(getattr(target, part, None)):
            raise ConfigurationError(f"Unknown config section '{part}' in '{dotted}'")
        target = getattr(target, part)
    if not hasattr(target, leaf):
        raise ConfigurationError(f"Unknown config key '{dotted}'")
    setattr(target, leaf, value)
