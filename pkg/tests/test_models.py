"""Tests for data records."""

from pathlib import Path

import numpy as np
import pytest

from priorfill.errors import ConfigurationError
from priorfill.models import (
    AblationReport,
    AblationRow,
    EvalManifest,
    ManifestRecord,
    MaskSample,
    MetricReport,
    TrainingLog,
)


class TestTrainingLog:
    """Tests for training curves."""

    def test_window_means(self) -> None:
        """Test first and last window means."""
        log = TrainingLog(stage="alignment")
        for step, loss in enumerate([4.0, 3.0, 2.0, 1.0]):
            log.append(step, loss, 1e-4)

        assert log.window_mean(first=True, window=2) == 3.5
        assert log.window_mean(first=False, window=2) == 1.5
        assert log.final_loss == 1.0

    def test_empty_log_window_raises(self) -> None:
        """Test that an empty curve has no window mean."""
        with pytest.raises(ConfigurationError, match="No steps"):
            TrainingLog(stage="vae").window_mean(first=True)

    def test_csv(self, tmp_path: Path) -> None:
        """Test the step,loss,lr CSV layout."""
        log = TrainingLog(stage="vae")
        log.append(0, 0.5, 2e-4)
        path = tmp_path / "logs" / "vae.csv"
        log.write_csv(path)

        assert path.read_text().splitlines() == ["step,loss,lr", "0,0.5,0.0002"]

    def test_read_csv(self, tmp_path: Path) -> None:
        """Test reading a written curve back, with the stage taken from the file name."""
        log = TrainingLog(stage="backbone")
        log.append(0, 0.75, 1e-4)
        log.append(1, 0.5, 1e-4)
        path = tmp_path / "backbone.csv"
        log.write_csv(path)

        assert TrainingLog.read_csv(path) == log


class TestMaskSample:
    """Tests for mask sample summaries."""

    def test_stats_exclude_pixels(self) -> None:
        """Test that stats carry provenance but not the pixel grid."""
        sample = MaskSample(mask=np.ones((2, 2), np.uint8), family="object", ratio=1 / 3, unions=["comod"], seed=4)

        stats = sample.stats()

        assert "mask" not in stats
        assert stats == {"family": "object", "ratio": 0.333333, "attempts": 1, "unions": ["comod"], "seed": 4}


class TestEvalManifest:
    """Tests for the JSON-lines manifest."""

    def test_header_and_records(self, tmp_path: Path) -> None:
        """Test that the header carries the config and records keep their order."""
        manifest = EvalManifest(
            records=[
                ManifestRecord("a-0000", "images/a-0000.png", "masks/a-0000.png", "a", "a/0.png", 0.3),
                ManifestRecord("b-0000", "images/b-0000.png", "masks/b-0000.png", "b", "b/0.png", 0.4),
            ],
            config={"seed": 3},
        )
        path = tmp_path / "manifest.jsonl"
        manifest.write(path)

        lines = path.read_text().splitlines()
        loaded = EvalManifest.read(path)

        assert '"kind": "header"' in lines[0]
        assert len(lines) == 3
        assert loaded.config == {"seed": 3}
        assert [r.record_id for r in loaded.records] == ["a-0000", "b-0000"]

    def test_resolve_relative_paths(self, tmp_path: Path) -> None:
        """Test that relative paths resolve against the manifest directory."""
        manifest = EvalManifest()

        assert manifest.resolve("images/x.png", tmp_path) == tmp_path / "images" / "x.png"
        assert manifest.resolve("/abs/x.png", tmp_path) == Path("/abs/x.png")


class TestReports:
    """Tests for metric and ablation reports."""

    def test_metric_report_csv_blanks_missing_values(self) -> None:
        """Test that absent metrics are written as empty cells."""
        report = MetricReport(
            psnr=20.0,
            ssim=0.5,
            lpips=None,
            fid=1.25,
            u_ids=0.1,
            p_ids=None,
            n_samples=4,
            per_domain={"indoor": {"psnr": 21.0, "ssim": 0.6, "lpips": None, "fid": None, "n": 2}},
        )

        lines = report.to_csv().splitlines()

        assert lines[0] == "domain,PSNR,SSIM,LPIPS,FID,U-IDS,P-IDS,n"
        assert lines[1] == "all,20.000000,0.500000,,1.250000,0.100000,,4"
        assert lines[2] == "indoor,21.000000,0.600000,,,,,2"

    def test_metric_report_json(self) -> None:
        """Test that the JSON form restores the report."""
        report = MetricReport(psnr=1.0, ssim=0.2, lpips=None, fid=None, u_ids=None, p_ids=None, n_samples=1)

        assert MetricReport.from_json(report.to_json()) == report

    def test_ablation_columns_and_csv(self) -> None:
        """Test that ablation columns are the union of row metrics in first-seen order."""
        report = AblationReport(
            preset="decoder",
            rows=[
                AblationRow("vanilla", {"masked_color_error": 0.1}, seed=0),
                AblationRow("full", {"masked_color_error": 0.05, "unmasked_psnr": 30.0}, seed=0),
            ],
        )

        assert report.columns == ["masked_color_error", "unmasked_psnr"]
        assert report.to_csv().splitlines() == [
            "variant,masked_color_error,unmasked_psnr,seed",
            "vanilla,0.100000,,0",
            "full,0.050000,30.000000,0",
        ]
