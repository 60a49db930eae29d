"""Evaluation-set curation: embed, cluster each source, keep cluster representatives, pair with masks."""

from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image
from sklearn.cluster import BisectingKMeans
from torch.utils.data import Dataset

from priorfill.config import CurationConfig, MaskMixtureConfig
from priorfill.corpus import list_images, save_image, save_mask, uint8_to_tensor
from priorfill.errors import ClusteringError, CurationError
from priorfill.featnet import Embedder, RandomProjectionEmbedder
from priorfill.maskgen import mask_ratio, sample_eval_mask, sample_rng, subtract_foreground
from priorfill.models import EvalManifest, ManifestRecord

MANIFEST_NAME = "manifest.jsonl"


def center_crop_resize(
    image: Image.Image, size: int, resample: Image.Resampling = Image.Resampling.BILINEAR
) -> Image.Image:
    """Crop the largest centered square, then resize it to size x size."""
    width, height = image.size
    side = min(width, height)
    left = (width - side) // 2
    top = (height - side) // 2
    if side != width or side != height:
        image = image.crop((left, top, left + side, top + side))
    if side == size:
        return image.copy()
    return image.resize((size, size), resample)


def load_rgb(path: Path, size: int) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(center_crop_resize(img.convert("RGB"), size))


def load_segmentation(path: Path, size: int) -> np.ndarray:
    with Image.open(path) as img:
        resized = center_crop_resize(img.convert("L"), size, Image.Resampling.NEAREST)
    return (np.asarray(resized) > 127).astype(np.uint8)


class ImageFolderDataset(Dataset):
    """User images, center-cropped and resized; items carry label -1 (no scene family)."""

    def __init__(self, directory: Path, size: int):
        self.paths = list_images(directory)
        if not self.paths:
            raise CurationError(f"No images found in {directory}")
        self.size = size

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, index: int) -> tuple[torch.Tensor, int]:
        return uint8_to_tensor(load_rgb(self.paths[index], self.size)), -1


# ============================================================================
# Embedding
# ============================================================================


@dataclass
class EmbeddingResult:
    features: np.ndarray  # n x d, rows in input order minus failures
    kept: list[int]  # Input indices of the rows
    failures: list[tuple[str, str]] = field(default_factory=list)  # (item, error)


def embed(images: Sequence[torch.Tensor | Path], embedder: Embedder, size: int = 64) -> EmbeddingResult:
    """
    Embed images one by one; failures are recorded and skipped.

    Args:
        images: (3, H, W) tensors in [-1, 1], or image paths loaded at `size`
        embedder: Deterministic image -> vector function
    """
    rows: list[np.ndarray] = []
    kept: list[int] = []
    failures: list[tuple[str, str]] = []
    for index, item in enumerate(images):
        try:
            tensor = uint8_to_tensor(load_rgb(item, size)) if isinstance(item, Path) else item
            row = np.asarray(embedder.embed(tensor.unsqueeze(0))[0], np.float64)
            if not np.isfinite(row).all():
                raise ValueError("non-finite embedding")
        except Exception as e:
            failures.append((str(item) if isinstance(item, Path) else f"#{index}", str(e)))
            continue
        rows.append(row)
        kept.append(index)
    features = np.stack(rows) if rows else np.zeros((0, 0))
    return EmbeddingResult(features=features, kept=kept, failures=failures)


# ============================================================================
# Clustering
# ============================================================================


@dataclass
class ClusteringResult:
    labels: np.ndarray  # n, values in [0, k)
    centroids: np.ndarray  # k x d, member means
    initial_sse: float  # SSE of the single cluster holding every point
    final_sse: float


SPLIT_STRATEGIES = {"sse": "biggest_inertia", "size": "largest_cluster"}


def cluster_sse(points: np.ndarray) -> float:
    if len(points) == 0:
        return 0.0
    return float(((points - points.mean(axis=0)) ** 2).sum())


def total_sse(features: np.ndarray, labels: np.ndarray) -> float:
    return sum(cluster_sse(features[labels == c]) for c in np.unique(labels))


def bisecting_kmeans(
    features: np.ndarray,
    k: int,
    seed: int = 0,
    split_trials: int = 5,
    split_rule: str = "sse",
) -> ClusteringResult:
    """
    Top-down clustering: repeatedly split one cluster in two with 2-means.

    The cluster split is the one with the largest within-cluster SSE (or the
    largest membership with split_rule="size"); each split keeps the best of
    `split_trials` seeded 2-means restarts.

    Raises:
        ClusteringError: If n < k, k < 1, there are fewer than k distinct points, or a cluster ends up empty
    """
    features = np.asarray(features, np.float64)
    n = len(features)
    if k < 1 or n < k:
        raise ClusteringError(f"Need n >= k >= 1 for clustering, got n={n}, k={k}")
    if split_rule not in SPLIT_STRATEGIES:
        raise ClusteringError(f"Unknown split rule '{split_rule}'")
    distinct = len(np.unique(features, axis=0))
    if distinct < k:
        raise ClusteringError(f"Cannot reach {k} clusters from {distinct} distinct points: too many identical points")

    if k == 1:
        labels = np.zeros(n, dtype=np.int64)
    else:
        model = BisectingKMeans(
            n_clusters=k,
            n_init=split_trials,
            random_state=seed % (2**32),
            bisecting_strategy=SPLIT_STRATEGIES[split_rule],
        )
        labels = model.fit_predict(features).astype(np.int64)

    found = np.unique(labels)
    if len(found) != k:
        raise ClusteringError(f"Clustering produced {len(found)} non-empty clusters instead of {k}")

    centroids = np.stack([features[labels == c].mean(axis=0) for c in range(k)])
    return ClusteringResult(
        labels=labels,
        centroids=centroids,
        initial_sse=cluster_sse(features),
        final_sse=total_sse(features, labels),
    )


def select_representatives(features: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> list[int]:
    """Per cluster, the member nearest its centroid; ties go to the lowest index."""
    representatives = []
    for cluster, centroid in enumerate(centroids):
        members = np.flatnonzero(labels == cluster)
        if len(members) == 0:
            raise ClusteringError(f"Cluster {cluster} is empty")
        distances = np.sqrt(((features[members] - centroid) ** 2).sum(axis=1))
        nearest = np.isclose(distances, distances.min(), rtol=1e-9, atol=1e-12)
        representatives.append(int(members[np.argmax(nearest)]))
    return representatives


# ============================================================================
# Evaluation sets
# ============================================================================


@dataclass
class SourceSpec:
    """One curation source: an image folder, optional segmentations, and its domain tag."""

    name: str
    image_dir: str
    domain_tag: str
    segmentation_dir: Optional[str] = None


@dataclass
class CurationResult:
    manifest: EvalManifest
    manifest_path: Path
    failures: list[tuple[str, str]] = field(default_factory=list)


def _background_mask(
    rng: np.random.Generator, segmentation: np.ndarray, size: int, mask_config: MaskMixtureConfig
) -> np.ndarray:
    eval_config = mask_config.eval_mixture()
    for _ in range(mask_config.max_attempts):
        mask = subtract_foreground(sample_eval_mask(rng, size, size, mask_config).mask, segmentation)
        if eval_config.ratio_min <= mask_ratio(mask) <= eval_config.ratio_max:
            return mask
    raise CurationError(
        f"No background mask within [{eval_config.ratio_min}, {eval_config.ratio_max}] after subtraction"
    )


def build_eval_set(
    sources: list[SourceSpec],
    out_dir: Path,
    mask_config: MaskMixtureConfig,
    config: CurationConfig,
    seed: int,
    embedder: Optional[Embedder] = None,
) -> CurationResult:
    """
    Build a benchmark: per source, cluster into `per_source_k` groups, keep the
    representative of each, crop/resize it and pair it with an evaluation mask.

    Segmentation-annotated sources get background-only masks. Writes
    images/, masks/ and manifest.jsonl under `out_dir`.

    Raises:
        CurationError: If a source has fewer than `per_source_k` usable images
    """
    config.validate()
    embedder = embedder or RandomProjectionEmbedder(config.embed_dim, config.embed_input, seed)
    records: list[ManifestRecord] = []
    failures: list[tuple[str, str]] = []
    index = 0

    for source_number, source in enumerate(sources):
        paths = list_images(Path(source.image_dir))
        if len(paths) < config.per_source_k:
            raise CurationError(
                f"Source '{source.name}' has {len(paths)} images, needs at least {config.per_source_k}"
            )
        result = embed(paths, embedder, config.size)
        failures.extend(result.failures)
        if len(result.kept) < config.per_source_k:
            raise CurationError(
                f"Source '{source.name}' has only {len(result.kept)} embeddable images, needs {config.per_source_k}"
            )
        clustering = bisecting_kmeans(
            result.features,
            config.per_source_k,
            seed + source_number,
            config.split_trials,
            config.split_rule,
        )
        chosen = select_representatives(result.features, clustering.labels, clustering.centroids)

        for rank, row in enumerate(chosen):
            path = paths[result.kept[row]]
            record_id = f"{source.name}-{rank:04d}"
            rng = sample_rng(seed, index)
            index += 1
            image = uint8_to_tensor(load_rgb(path, config.size))
            if source.segmentation_dir:
                segmentation = load_segmentation(Path(source.segmentation_dir) / path.name, config.size)
                mask = _background_mask(rng, segmentation, config.size, mask_config)
            else:
                mask = sample_eval_mask(rng, config.size, config.size, mask_config).mask
            image_rel = f"images/{record_id}.png"
            mask_rel = f"masks/{record_id}.png"
            save_image(image, out_dir / image_rel)
            save_mask(mask, out_dir / mask_rel)
            records.append(
                ManifestRecord(
                    record_id=record_id,
                    image_path=image_rel,
                    mask_path=mask_rel,
                    domain_tag=source.domain_tag,
                    source_id=f"{source.name}/{path.name}",
                    ratio=round(mask_ratio(mask), 6),
                )
            )

    manifest = EvalManifest(
        records=records,
        config={
            "seed": seed,
            "curation": asdict(config),
            "masks": asdict(mask_config.eval_mixture()),
            "embedder": embedder.identity,
            "sources": [asdict(s) for s in sources],
        },
    )
    manifest_path = out_dir / MANIFEST_NAME
    manifest.write(manifest_path)
    return CurationResult(manifest=manifest, manifest_path=manifest_path, failures=failures)
