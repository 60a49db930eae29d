"""Procedural toy scene corpus and image / mask file I/O.

Images are float tensors in [-1, 1] (C x H x W) inside the package and 8-bit
PNGs in [0, 255] on disk. Masks are H x W uint8 arrays in {0, 1} in memory and
single-channel PNGs with 0 = keep, 255 = masked on disk.
"""

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import cv2
import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

from priorfill.errors import ConfigurationError, ShapeMismatchError
from priorfill.maskgen import sample_rng

# Scene families double as curation domains and as feature-network classes
SCENE_FAMILIES = ("indoor", "landscape", "building", "background")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}
SCENE_CACHE_SIZE = 2048


# ============================================================================
# File I/O
# ============================================================================


def uint8_to_tensor(array: np.ndarray) -> torch.Tensor:
    """H x W x 3 uint8 -> 3 x H x W float in [-1, 1]."""
    if array.ndim != 3 or array.shape[2] != 3:
        raise ShapeMismatchError(f"Expected an H x W x 3 array, got shape {array.shape}")
    return torch.from_numpy(array.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def tensor_to_uint8(image: torch.Tensor) -> np.ndarray:
    """3 x H x W float in [-1, 1] -> H x W x 3 uint8 (clamped)."""
    unit = (image.detach().float().clamp(-1.0, 1.0) + 1.0) / 2.0
    return (unit * 255.0).round().to(torch.uint8).permute(1, 2, 0).cpu().numpy()


def tensor_to_unit(image: torch.Tensor) -> np.ndarray:
    """3 x H x W float in [-1, 1] -> H x W x 3 float64 in [0, 1], the metric boundary convention."""
    return ((image.detach().double().clamp(-1.0, 1.0) + 1.0) / 2.0).permute(1, 2, 0).cpu().numpy()


def load_image(path: Path) -> torch.Tensor:
    """Read an image file as a 3 x H x W tensor in [-1, 1]."""
    with Image.open(path) as img:
        return uint8_to_tensor(np.asarray(img.convert("RGB")))


def save_image(image: torch.Tensor, path: Path) -> None:
    """Write a 3 x H x W tensor in [-1, 1] as an 8-bit PNG."""
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(tensor_to_uint8(image)).save(path, format="PNG")


def load_mask(path: Path) -> np.ndarray:
    """Read a mask PNG; pixels above mid-gray count as masked."""
    with Image.open(path) as img:
        return (np.asarray(img.convert("L")) > 127).astype(np.uint8)


def save_mask(mask: np.ndarray, path: Path) -> None:
    """Write a {0, 1} mask as a single-channel PNG (0 = keep, 255 = masked)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((mask > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def mask_to_tensor(mask: np.ndarray) -> torch.Tensor:
    """H x W {0, 1} array -> 1 x H x W float tensor."""
    return torch.from_numpy((mask > 0).astype(np.float32)).unsqueeze(0)


def list_images(directory: Path) -> list[Path]:
    """Image files directly inside a directory, sorted by name."""
    if not directory.is_dir():
        raise ConfigurationError(f"Image directory does not exist: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# ============================================================================
# Procedural scenes
# ============================================================================


@dataclass
class Scene:
    """A rendered toy scene."""

    image: np.ndarray  # H x W x 3 uint8
    family: str
    segmentation: Optional[np.ndarray] = None  # H x W {0, 1}; foreground object


def _color(rng: np.random.Generator, low: int = 0, high: int = 256) -> tuple[int, int, int]:
    return tuple(int(c) for c in rng.integers(low, high, size=3))  # type: ignore[return-value]


def _vertical_gradient(size: int, top: tuple[int, int, int], bottom: tuple[int, int, int]) -> np.ndarray:
    t = np.linspace(0.0, 1.0, size, dtype=np.float32)[:, None, None]
    column = (1.0 - t) * np.array(top, np.float32) + t * np.array(bottom, np.float32)
    return np.repeat(column, size, axis=1)


def _stripes(rng: np.random.Generator, size: int, color_a, color_b) -> np.ndarray:
    period = int(rng.integers(4, 12))
    angle = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size]
    phase = (np.cos(angle) * xx + np.sin(angle) * yy) / period
    band = (np.floor(phase) % 2).astype(np.float32)[..., None]
    return band * np.array(color_a, np.float32) + (1 - band) * np.array(color_b, np.float32)


def _render_landscape(rng: np.random.Generator, size: int) -> np.ndarray:
    sky = _vertical_gradient(size, _color(rng, 120, 256), _color(rng, 150, 256))
    horizon = int(size * rng.uniform(0.4, 0.7))
    xs = np.arange(size)
    freq = rng.uniform(1.0, 3.0)
    amp = rng.uniform(0.03, 0.12) * size
    ridge = horizon + amp * np.sin(2 * np.pi * freq * xs / size + rng.uniform(0, 2 * np.pi))
    ground = _vertical_gradient(size, _color(rng, 20, 160), _color(rng, 10, 120))
    yy = np.arange(size)[:, None]
    below = (yy >= ridge[None, :])[..., None]
    image = np.where(below, ground, sky)
    if rng.random() < 0.6:
        center = (int(rng.integers(0, size)), int(rng.integers(0, max(1, horizon // 2))))
        cv2.circle(image, center, int(size * rng.uniform(0.05, 0.1)), _color(rng, 200, 256), -1)
    return image


def _render_indoor(rng: np.random.Generator, size: int) -> np.ndarray:
    image = np.empty((size, size, 3), np.float32)
    image[:] = _color(rng, 80, 230)
    floor_y = int(size * rng.uniform(0.55, 0.75))
    floor = np.array(
        [[0, size], [size, size], [int(size * 0.8), floor_y], [int(size * 0.2), floor_y]],
        dtype=np.int32,
    )
    cv2.fillPoly(image, [floor], _color(rng, 40, 160))
    for _ in range(int(rng.integers(2, 5))):
        w, h = (int(v) for v in rng.integers(size // 8, size // 3, size=2))
        x, y = int(rng.integers(0, size - w)), int(rng.integers(0, floor_y))
        patch = _stripes(rng, size, _color(rng), _color(rng))
        image[y : y + h, x : x + w] = patch[y : y + h, x : x + w]
    return image


def _render_building(rng: np.random.Generator, size: int) -> np.ndarray:
    image = _vertical_gradient(size, _color(rng, 130, 256), _color(rng, 160, 256))
    left = int(size * rng.uniform(0.05, 0.3))
    right = int(size * rng.uniform(0.7, 0.95))
    top = int(size * rng.uniform(0.1, 0.35))
    cv2.rectangle(image, (left, top), (right, size - 1), _color(rng, 60, 200), -1)
    window = _color(rng, 0, 90)
    step = int(rng.integers(6, 11))
    for y in range(top + 3, size - 4, step):
        for x in range(left + 3, right - 3, step):
            cv2.rectangle(image, (x, y), (x + step // 2, y + step // 2), window, -1)
    return image


def _render_background(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    image = _stripes(rng, size, _color(rng), _color(rng))
    segmentation = np.zeros((size, size), np.uint8)
    center = rng.uniform(0.3, 0.7, size=2) * size
    count = int(rng.integers(6, 11))
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=count))
    radii = size * rng.uniform(0.08, 0.18, size=count)
    points = np.stack([center[0] + radii * np.cos(angles), center[1] + radii * np.sin(angles)], axis=1)
    cv2.fillPoly(segmentation, [points.round().astype(np.int32)], 1)
    image[segmentation > 0] = _color(rng)
    return image, segmentation


def render_scene(rng: np.random.Generator, size: int, family: str) -> Scene:
    """Render one procedural multi-texture scene of the given family."""
    if size < 16:
        raise ConfigurationError(f"Scene size must be at least 16, got {size}")
    segmentation = None
    if family == "landscape":
        image = _render_landscape(rng, size)
    elif family == "indoor":
        image = _render_indoor(rng, size)
    elif family == "building":
        image = _render_building(rng, size)
    elif family == "background":
        image, segmentation = _render_background(rng, size)
    else:
        raise ConfigurationError(f"Unknown scene family '{family}'")

    noise = rng.normal(0.0, 4.0, size=image.shape)
    pixels = np.clip(image + noise, 0, 255).round().astype(np.uint8)
    return Scene(image=pixels, family=family, segmentation=segmentation)


@lru_cache(maxsize=SCENE_CACHE_SIZE)
def cached_scene(seed: int, index: int, size: int, family: str) -> Scene:
    """Rendered scene, shared by every dataset with the same seed. Callers must not modify it."""
    return render_scene(sample_rng(seed, index), size, family)


class SceneDataset(Dataset):
    """Deterministic procedural dataset: item i is rendered from rng(seed, i).

    Families cycle with the index so every family is equally represented.
    """

    def __init__(self, size: int, length: int, seed: int = 0, families: tuple[str, ...] = SCENE_FAMILIES):
        if length < 1:
            raise ConfigurationError("SceneDataset length must be at least 1")
        self.size = size
        self.length = length
        self.seed = seed
        self.families = families

    def __len__(self) -> int:
        return self.length

    def scene(self, index: int) -> Scene:
        return cached_scene(self.seed, index, self.size, self.families[index % len(self.families)])

    def __getitem__(self, index: int) -> tuple[torch.Tensor, int]:
        scene = self.scene(index)
        return uint8_to_tensor(scene.image), SCENE_FAMILIES.index(scene.family)


def sample_batch(dataset: Dataset, generator: torch.Generator, batch_size: int) -> torch.Tensor:
    """Draw a batch of images (B x 3 x H x W) with replacement."""
    indices = torch.randint(0, len(dataset), (batch_size,), generator=generator)  # type: ignore[arg-type]
    return torch.stack([dataset[int(i)][0] for i in indices])


def sample_labelled_batch(
    dataset: Dataset, generator: torch.Generator, batch_size: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Like sample_batch but also returns the integer labels."""
    indices = torch.randint(0, len(dataset), (batch_size,), generator=generator)  # type: ignore[arg-type]
    items = [dataset[int(i)] for i in indices]
    return torch.stack([x for x, _ in items]), torch.tensor([y for _, y in items])


def write_synthetic_source(out_dir: Path, family: str, count: int, size: int, seed: int) -> tuple[Path, Optional[Path]]:
    """Write `count` scenes of one family as PNGs; returns (image dir, segmentation dir or None)."""
    image_dir = out_dir / "images"
    seg_dir = out_dir / "segmentations"
    image_dir.mkdir(parents=True, exist_ok=True)
    has_segmentation = False
    for index in range(count):
        scene = render_scene(sample_rng(seed, index), size, family)
        name = f"{index:04d}.png"
        Image.fromarray(scene.image).save(image_dir / name, format="PNG")
        if scene.segmentation is not None:
            has_segmentation = True
            save_mask(scene.segmentation, seg_dir / name)
    return image_dir, (seg_dir if has_segmentation else None)
