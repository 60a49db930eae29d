"""Training and evaluation mask synthesis.

Every sampler is a pure function of an explicit numpy Generator. Workers that
generate masks in parallel each own a generator from sample_rng(seed, index).
Masks are H x W uint8 arrays with 1 = masked.
"""

import math
from pathlib import Path
from typing import Optional

import cv2
import numpy as np
import torch
from PIL import Image

from priorfill.config import MaskFamily, MaskMixtureConfig
from priorfill.errors import ConfigurationError, MaskGenerationError, ShapeMismatchError
from priorfill.models import MaskSample, StrokeParams

MIN_MASK_SIDE = 32

# Free-form stroke geometry (angles in radians)
STROKE_MEAN_ANGLE = 2 * math.pi / 15
STROKE_MAX_ANGLE = 2 * math.pi / 5


def sample_rng(global_seed: int, index: int) -> np.random.Generator:
    """Independent generator for one sample, derived from (global seed, sample index)."""
    return np.random.default_rng([global_seed, index])


def _check_dims(height: int, width: int) -> None:
    if height < MIN_MASK_SIDE or width < MIN_MASK_SIDE:
        raise ConfigurationError(f"Mask dimensions must be at least {MIN_MASK_SIDE}, got {height}x{width}")


def mask_ratio(mask: np.ndarray) -> float:
    """Fraction of masked pixels."""
    return float(mask.mean()) if mask.size else 0.0


def _largest_component(mask: np.ndarray) -> np.ndarray:
    count, labels, stats, _ = cv2.connectedComponentsWithStats(mask, connectivity=4)
    if count <= 1:
        return mask
    largest = 1 + int(np.argmax(stats[1:, cv2.CC_STAT_AREA]))
    return (labels == largest).astype(np.uint8)


def _load_silhouette(rng: np.random.Generator, directory: Path, height: int, width: int) -> Optional[np.ndarray]:
    files = sorted(p for p in directory.glob("*.png"))
    if not files:
        return None
    path = files[int(rng.integers(0, len(files)))]
    with Image.open(path) as img:
        resized = img.convert("L").resize((width, height), Image.Resampling.NEAREST)
    return (np.asarray(resized) > 127).astype(np.uint8)


# ============================================================================
# Family samplers
# ============================================================================


def sample_object_mask(
    rng: np.random.Generator, height: int, width: int, config: Optional[MaskMixtureConfig] = None
) -> np.ndarray:
    """
    One connected blob: a random star-shaped polygon with a smoothed boundary.

    When the config names a segmentation directory, a random silhouette from it is
    used instead.

    Raises:
        ConfigurationError: If either side is below 32 pixels
    """
    _check_dims(height, width)
    config = config or MaskMixtureConfig()
    if config.segmentation_dir:
        silhouette = _load_silhouette(rng, Path(config.segmentation_dir), height, width)
        if silhouette is not None:
            return silhouette

    side = min(height, width)
    count = int(rng.integers(config.object_vertices[0], config.object_vertices[1] + 1))
    angles = np.sort(rng.uniform(0.0, 2 * math.pi, size=count))
    mean_radius = rng.uniform(*config.object_radius) * side
    radii = mean_radius * rng.uniform(0.75, 1.25, size=count)
    radii = (np.roll(radii, 1) + 2 * radii + np.roll(radii, -1)) / 4
    cx = rng.uniform(0.2, 0.8) * width
    cy = rng.uniform(0.2, 0.8) * height
    points = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)

    polygon = np.zeros((height, width), np.float32)
    cv2.fillPoly(polygon, [points.round().astype(np.int32)], 1.0)
    smoothed = cv2.GaussianBlur(polygon, (0, 0), sigmaX=max(1.0, 0.02 * side))
    mask = (smoothed > 0.5).astype(np.uint8)
    if not mask.any():
        mask = (polygon > 0.5).astype(np.uint8)
    return _largest_component(mask)


def _draw_strokes(
    rng: np.random.Generator,
    canvas: np.ndarray,
    count_range: tuple[int, int],
    width_range: tuple[float, float],
    vertex_range: tuple[int, int],
    length_range: tuple[float, float],
    log: Optional[list[StrokeParams]],
) -> None:
    height, width = canvas.shape
    side = min(height, width)
    for _ in range(int(rng.integers(count_range[0], count_range[1] + 1))):
        vertices = int(rng.integers(vertex_range[0], vertex_range[1] + 1))
        brush = max(1, round(rng.uniform(*width_range) * side))
        x, y = rng.uniform(0, width), rng.uniform(0, height)
        start = (int(x), int(y))
        for i in range(vertices):
            angle = rng.uniform(STROKE_MEAN_ANGLE - STROKE_MAX_ANGLE, STROKE_MEAN_ANGLE + STROKE_MAX_ANGLE)
            if i % 2 == 0:
                angle = 2 * math.pi - angle
            length = rng.uniform(*length_range) * side
            nx = float(np.clip(x + length * math.sin(angle), 0, width - 1))
            ny = float(np.clip(y + length * math.cos(angle), 0, height - 1))
            cv2.line(canvas, (int(x), int(y)), (int(nx), int(ny)), 1, thickness=brush)
            cv2.circle(canvas, (int(nx), int(ny)), brush // 2, 1, -1)
            x, y = nx, ny
        if log is not None:
            log.append(StrokeParams(num_vertices=vertices, width=brush, start=start))


def sample_comod_mask(
    rng: np.random.Generator,
    height: int,
    width: int,
    config: Optional[MaskMixtureConfig] = None,
    log: Optional[list[StrokeParams]] = None,
) -> np.ndarray:
    """Co-Mod style mask: union of random rectangles and medium brush strokes."""
    _check_dims(height, width)
    config = config or MaskMixtureConfig()
    canvas = np.zeros((height, width), np.uint8)
    for _ in range(int(rng.integers(0, config.comod_max_rects + 1))):
        rh = max(1, round(rng.uniform(*config.comod_rect_size) * height))
        rw = max(1, round(rng.uniform(*config.comod_rect_size) * width))
        top = int(rng.integers(0, height - rh + 1))
        left = int(rng.integers(0, width - rw + 1))
        canvas[top : top + rh, left : left + rw] = 1
    _draw_strokes(
        rng, canvas, config.comod_strokes, config.comod_width, config.comod_vertices, config.stroke_length, log
    )
    return canvas


def sample_lama_mask(
    rng: np.random.Generator,
    height: int,
    width: int,
    config: Optional[MaskMixtureConfig] = None,
    log: Optional[list[StrokeParams]] = None,
) -> np.ndarray:
    """LaMa style mask: wide polyline brush strokes."""
    _check_dims(height, width)
    config = config or MaskMixtureConfig()
    canvas = np.zeros((height, width), np.uint8)
    _draw_strokes(rng, canvas, config.lama_strokes, config.lama_width, config.lama_vertices, config.stroke_length, log)
    return canvas


def rect_mask(height: int, width: int, top: int, left: int, bottom: int, right: int) -> np.ndarray:
    """Mask of the axis-aligned rectangle rows [top, bottom) x cols [left, right)."""
    canvas = np.zeros((height, width), np.uint8)
    canvas[max(0, top) : max(0, bottom), max(0, left) : max(0, right)] = 1
    return canvas


def complement_rect_mask(height: int, width: int, top: int, left: int, bottom: int, right: int) -> np.ndarray:
    """Everything outside the rectangle rows [top, bottom) x cols [left, right)."""
    return 1 - rect_mask(height, width, top, left, bottom, right)


def _random_rect(
    rng: np.random.Generator, height: int, width: int, size_range: tuple[float, float]
) -> tuple[int, int, int, int]:
    rh = max(1, round(rng.uniform(*size_range) * height))
    rw = max(1, round(rng.uniform(*size_range) * width))
    top = int(rng.integers(0, height - rh + 1))
    left = int(rng.integers(0, width - rw + 1))
    return top, left, top + rh, left + rw


def sample_rect_mask(
    rng: np.random.Generator, height: int, width: int, config: Optional[MaskMixtureConfig] = None
) -> np.ndarray:
    """One random axis-aligned rectangle."""
    _check_dims(height, width)
    config = config or MaskMixtureConfig()
    return rect_mask(height, width, *_random_rect(rng, height, width, config.rect_size))


def sample_complement_rect_mask(
    rng: np.random.Generator, height: int, width: int, config: Optional[MaskMixtureConfig] = None
) -> np.ndarray:
    """Everything outside one random rectangle."""
    _check_dims(height, width)
    config = config or MaskMixtureConfig()
    return complement_rect_mask(height, width, *_random_rect(rng, height, width, config.complement_rect_size))


def _sample_family(
    family: MaskFamily,
    rng: np.random.Generator,
    height: int,
    width: int,
    config: MaskMixtureConfig,
    log: list[StrokeParams],
) -> np.ndarray:
    if family is MaskFamily.OBJECT:
        return sample_object_mask(rng, height, width, config)
    if family is MaskFamily.COMOD:
        return sample_comod_mask(rng, height, width, config, log)
    if family is MaskFamily.LAMA:
        return sample_lama_mask(rng, height, width, config, log)
    if family is MaskFamily.RECT:
        return sample_rect_mask(rng, height, width, config)
    return sample_complement_rect_mask(rng, height, width, config)


# ============================================================================
# Mixtures
# ============================================================================


def sample_training_mask(config: MaskMixtureConfig, rng: np.random.Generator, height: int, width: int) -> MaskSample:
    """
    Draw one family from the mixture, then resample within it until the ratio fits.

    Object-shape draws are unioned with a Co-Mod mask and, independently, with a
    LaMa mask, each with probability `union_chance`.

    Raises:
        ConfigurationError: If the config is invalid or the dimensions are too small
        MaskGenerationError: If `max_attempts` draws all fall outside the ratio bounds
    """
    config.validate()
    _check_dims(height, width)

    names = list(config.weights)
    probs = np.array([config.weights[name] for name in names], dtype=np.float64)
    family = MaskFamily(names[int(rng.choice(len(names), p=probs / probs.sum()))])

    for attempt in range(1, config.max_attempts + 1):
        strokes: list[StrokeParams] = []
        mask = _sample_family(family, rng, height, width, config, strokes)
        unions: list[str] = []
        if family is MaskFamily.OBJECT:
            if rng.random() < config.union_chance:
                mask = mask | sample_comod_mask(rng, height, width, config, strokes)
                unions.append(MaskFamily.COMOD.value)
            if rng.random() < config.union_chance:
                mask = mask | sample_lama_mask(rng, height, width, config, strokes)
                unions.append(MaskFamily.LAMA.value)
        ratio = mask_ratio(mask)
        if config.ratio_min <= ratio <= config.ratio_max:
            return MaskSample(
                mask=mask, family=family.value, ratio=ratio, attempts=attempt, unions=unions, strokes=strokes
            )

    raise MaskGenerationError(
        f"No '{family.value}' mask with ratio in [{config.ratio_min}, {config.ratio_max}] "
        f"after {config.max_attempts} attempts at {height}x{width} (config: {config})"
    )


def sample_eval_mask(
    rng: np.random.Generator, height: int, width: int, config: Optional[MaskMixtureConfig] = None
) -> MaskSample:
    """Evaluation mask: object / Co-Mod / LaMa families only, with the evaluation ratio bounds."""
    return sample_training_mask((config or MaskMixtureConfig()).eval_mixture(), rng, height, width)


def subtract_foreground(mask: np.ndarray, segmentation: np.ndarray) -> np.ndarray:
    """Unmask every foreground pixel: mask AND NOT segmentation."""
    if mask.shape != segmentation.shape:
        raise ShapeMismatchError(f"Mask shape {mask.shape} does not match segmentation shape {segmentation.shape}")
    return ((mask > 0) & ~(segmentation > 0)).astype(np.uint8)


# ============================================================================
# Patch masks
# ============================================================================


def to_patch_mask(mask: np.ndarray, patch_size: int) -> np.ndarray:
    """
    Flag every patch that contains at least one masked pixel.

    Returns:
        Boolean vector of length (H / P) * (W / P) in row-major patch order

    Raises:
        ConfigurationError: If H or W is not divisible by the patch size
    """
    height, width = mask.shape
    if patch_size < 1 or height % patch_size or width % patch_size:
        raise ConfigurationError(f"Mask size {height}x{width} not divisible by patch size {patch_size}")
    blocks = (mask > 0).reshape(height // patch_size, patch_size, width // patch_size, patch_size)
    return blocks.any(axis=(1, 3)).reshape(-1)


def enlarge_to_ratio(patch_mask: np.ndarray, target_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """
    Flag uniformly random extra patches until ceil(target_ratio * L) are flagged.

    Never unflags; masks already at or above the target are returned unchanged.
    """
    if not 0.0 < target_ratio <= 1.0:
        raise ConfigurationError(f"target_ratio must be in (0, 1], got {target_ratio}")
    total = patch_mask.size
    target = math.ceil(round(target_ratio * total, 9))
    flagged = int(patch_mask.sum())
    if flagged >= target:
        return patch_mask.copy()
    unflagged = np.flatnonzero(~patch_mask)
    extra = rng.choice(unflagged, size=target - flagged, replace=False)
    enlarged = patch_mask.copy()
    enlarged[extra] = True
    return enlarged


def random_patch_mask(rng: np.random.Generator, num_patches: int, ratio: float) -> np.ndarray:
    """Uniform random patch mask keeping int(L * (1 - ratio)) patches visible."""
    keep = max(1, int(num_patches * (1.0 - ratio)))
    flags = np.ones(num_patches, dtype=bool)
    flags[rng.permutation(num_patches)[:keep]] = False
    return flags


def masks_to_tensor(masks: list[np.ndarray]) -> torch.Tensor:
    """Stack H x W masks into a B x 1 x H x W float tensor."""
    return torch.from_numpy(np.stack([(m > 0) for m in masks]).astype(np.float32)).unsqueeze(1)
