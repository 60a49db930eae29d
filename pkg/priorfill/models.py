"""Data records shared across stages: mask samples, training logs, manifests, reports and run history."""

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from priorfill.errors import ConfigurationError

# ============================================================================
# Masks
# ============================================================================


@dataclass
class StrokeParams:
    """Parameters of one drawn brush stroke."""

    num_vertices: int
    width: int  # Brush thickness in pixels
    start: tuple[int, int]  # (x, y)


@dataclass
class MaskSample:
    """A generated mask together with how it was produced."""

    mask: np.ndarray  # H x W uint8 in {0, 1}; 1 = masked
    family: str
    ratio: float
    attempts: int = 1
    unions: list[str] = field(default_factory=list)  # Families unioned into an object mask
    strokes: list[StrokeParams] = field(default_factory=list)
    seed: Optional[int] = None

    def stats(self) -> dict[str, Any]:
        """JSON-friendly summary (everything except the pixel grid)."""
        return {
            "family": self.family,
            "ratio": round(self.ratio, 6),
            "attempts": self.attempts,
            "unions": list(self.unions),
            "seed": self.seed,
        }


# ============================================================================
# Training
# ============================================================================


@dataclass
class TrainingStep:
    """One logged optimization step."""

    stage: str
    step: int
    loss: float
    lr: float


@dataclass
class TrainingLog:
    """Training curve of a stage."""

    stage: str
    steps: list[TrainingStep] = field(default_factory=list)

    def append(self, step: int, loss: float, lr: float) -> TrainingStep:
        entry = TrainingStep(stage=self.stage, step=step, loss=loss, lr=lr)
        self.steps.append(entry)
        return entry

    @property
    def losses(self) -> list[float]:
        return [s.loss for s in self.steps]

    def window_mean(self, first: bool, window: int = 20) -> float:
        """Mean loss over the first or last `window` logged steps."""
        if not self.steps:
            raise ConfigurationError(f"No steps logged for stage '{self.stage}'")
        values = self.losses[:window] if first else self.losses[-window:]
        return float(np.mean(values))

    @property
    def final_loss(self) -> float:
        return self.steps[-1].loss

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["step", "loss", "lr"])
        for s in self.steps:
            writer.writerow([s.step, f"{s.loss:.8g}", f"{s.lr:.8g}"])
        return buffer.getvalue()

    def write_csv(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path: Path) -> "TrainingLog":
        """Read a curve written by write_csv; the stage is the file stem."""
        log = cls(stage=path.stem)
        with path.open(newline="") as f:
            for row in csv.DictReader(f):
                log.append(int(row["step"]), float(row["loss"]), float(row["lr"]))
        return log


# ============================================================================
# Evaluation sets and reports
# ============================================================================


@dataclass
class ManifestRecord:
    """One benchmark example."""

    record_id: str
    image_path: str
    mask_path: str
    domain_tag: str
    source_id: str
    ratio: float


@dataclass
class EvalManifest:
    """Ordered benchmark definition, serialized as JSON lines (header line first)."""

    records: list[ManifestRecord] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"kind": "header", "config": self.config}, sort_keys=True)]
        lines.extend(json.dumps({"kind": "record", **asdict(r)}, sort_keys=True) for r in self.records)
        return "\n".join(lines) + "\n"

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "EvalManifest":
        manifest = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            item = json.loads(line)
            kind = item.pop("kind", "record")
            if kind == "header":
                manifest.config = item.get("config", {})
            else:
                manifest.records.append(ManifestRecord(**item))
        return manifest

    @classmethod
    def read(cls, path: Path) -> "EvalManifest":
        return cls.from_jsonl(path.read_text())

    def resolve(self, path: str, root: Path) -> Path:
        """Resolve a manifest-relative path against the manifest directory."""
        candidate = Path(path)
        return candidate if candidate.is_absolute() else root / candidate


# Column order mirrors the usual inpainting results table
REPORT_COLUMNS = ("psnr", "ssim", "lpips", "fid", "u_ids", "p_ids")


@dataclass
class MetricReport:
    """Six-metric evaluation summary."""

    psnr: float
    ssim: float
    lpips: Optional[float]  # None when no feature network was available
    fid: Optional[float]  # None when a distribution metric could not be computed
    u_ids: Optional[float]
    p_ids: Optional[float]
    n_samples: int
    config: dict[str, Any] = field(default_factory=dict)
    incomplete: bool = False
    missing: list[str] = field(default_factory=list)
    per_domain: dict[str, dict[str, Optional[float]]] = field(default_factory=dict)

    def row(self) -> dict[str, Optional[float]]:
        return {name: getattr(self, name) for name in REPORT_COLUMNS}

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["domain", *(c.upper().replace("_", "-") for c in REPORT_COLUMNS), "n"])
        writer.writerow(["all", *(_fmt(v) for v in self.row().values()), self.n_samples])
        for domain, values in sorted(self.per_domain.items()):
            writer.writerow([domain, *(_fmt(values.get(c)) for c in REPORT_COLUMNS), _fmt(values.get("n"))])
        return buffer.getvalue()


def _fmt(value: Optional[float]) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return f"{value:.6f}"


# ============================================================================
# Run history
# ============================================================================


@dataclass
class StageRecord:
    """What a stage produced, sufficient to reproduce it."""

    stage: str
    checkpoint_path: str
    content_hash: str
    seed: int
    timestamp: str  # ISO 8601
    duration_seconds: float
    config: dict[str, Any] = field(default_factory=dict)
    upstream_hashes: dict[str, str] = field(default_factory=dict)
    frozen_hashes: dict[str, str] = field(default_factory=dict)  # Parameter hashes of modules later frozen
    final_loss: Optional[float] = None
    log_path: Optional[str] = None

    # System info
    priorfill_version: str = ""
    torch_version: str = ""
    python_version: str = ""
    platform: str = ""


@dataclass
class AblationRow:
    """One variant of an ablation preset."""

    variant: str
    metrics: dict[str, float]
    seed: int


@dataclass
class AblationReport:
    """Comparative table of variants trained and evaluated under identical seeds."""

    preset: str
    rows: list[AblationRow] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        names: list[str] = []
        for row in self.rows:
            names.extend(name for name in row.metrics if name not in names)
        return names

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        columns = self.columns
        writer.writerow(["variant", *columns, "seed"])
        for row in self.rows:
            writer.writerow([row.variant, *(_fmt(row.metrics.get(c)) for c in columns), row.seed])
        return buffer.getvalue()
