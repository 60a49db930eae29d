"""Image embedders: a small scene classifier and a fixed random projection.

Both map (B, 3, H, W) images in [-1, 1] to (B, d) float64 feature rows. The
classifier also exposes its intermediate activations for patch-level distances.
"""

from collections.abc import Callable
from typing import Optional, Protocol

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import Dataset

from priorfill.checkpoint import parameter_hash
from priorfill.config import FeatNetConfig
from priorfill.corpus import SCENE_FAMILIES, sample_labelled_batch
from priorfill.models import TrainingLog, TrainingStep
from priorfill.nets import check_finite_loss, group_count


class Embedder(Protocol):
    """Deterministic image -> vector function."""

    identity: str

    def embed(self, images: torch.Tensor) -> np.ndarray: ...


class SceneClassifier(nn.Module):
    def __init__(self, config: FeatNetConfig, num_classes: int = len(SCENE_FAMILIES)):
        super().__init__()
        self.config = config
        stages = []
        current = 3
        for width in config.channels:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(current, width, 3, padding=1),
                    nn.GroupNorm(group_count(width), width),
                    nn.SiLU(),
                    nn.Conv2d(width, width, 3, stride=2, padding=1),
                    nn.SiLU(),
                )
            )
            current = width
        self.stages = nn.ModuleList(stages)
        self.head = nn.Linear(current, num_classes)

    def _resize(self, x: torch.Tensor) -> torch.Tensor:
        size = self.config.image_size
        if x.shape[-2:] != (size, size):
            x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
        return x

    def feature_layers(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = self._resize(x)
        layers = []
        for stage in self.stages:
            h = stage(h)
            layers.append(h)
        return layers

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.feature_layers(x)[-1].mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class ClassifierEmbedder:
    """Adapter exposing the scene classifier as an embedder and layer-feature source."""

    def __init__(self, net: SceneClassifier):
        self.net = net.eval()
        self.identity = f"scene-classifier:{parameter_hash(net)[:12]}"

    @torch.no_grad()
    def embed(self, images: torch.Tensor) -> np.ndarray:
        return self.net.features(images.float()).double().numpy()

    @torch.no_grad()
    def layers(self, images: torch.Tensor) -> list[torch.Tensor]:
        return [layer.double() for layer in self.net.feature_layers(images.float())]


class RandomProjectionEmbedder:
    """Fixed Gaussian projection of area-downsampled pixels."""

    def __init__(self, dim: int = 256, input_size: int = 32, seed: int = 0):
        self.dim = dim
        self.input_size = input_size
        self.seed = seed
        self.identity = f"random-projection:{dim}x{input_size}:{seed}"
        rng = np.random.default_rng(seed)
        self.matrix = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(3 * input_size * input_size, dim))

    def project(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.matrix

    def embed(self, images: torch.Tensor) -> np.ndarray:
        small = F.interpolate(images.double(), size=(self.input_size, self.input_size), mode="area")
        return self.project(small.flatten(1).numpy())


def train_featnet(
    config: FeatNetConfig,
    dataset: Dataset,
    seed: int,
    steps: Optional[int] = None,
    progress: Optional[Callable[[TrainingStep], None]] = None,
) -> tuple[SceneClassifier, TrainingLog]:
    """Train the scene-family classifier with cross-entropy."""
    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    net = SceneClassifier(config)
    optimizer = torch.optim.AdamW(net.parameters(), lr=config.lr)
    log = TrainingLog(stage="featnet")
    net.train()
    for step in range(steps if steps is not None else config.steps):
        images, labels = sample_labelled_batch(dataset, generator, config.batch_size)
        loss = F.cross_entropy(net(images), labels)
        value = check_finite_loss(loss, log, step, config.lr)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        entry = log.append(step, value, config.lr)
        if progress:
            progress(entry)
    net.eval()
    return net, log
