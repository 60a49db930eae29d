"""Tests for output formatting."""

from io import StringIO
from unittest.mock import patch

from priorfill.models import AblationReport, AblationRow, MetricReport, StageRecord, TrainingStep
from priorfill.output import (
    SYMBOL_ERROR,
    SYMBOL_SUCCESS,
    format_ablation_report,
    format_metric_report,
    format_progress,
    print_error,
    print_header,
    print_history,
    print_progress,
    print_success,
    print_warning,
)


class TestFormatProgress:
    """Tests for training progress lines."""

    def test_format_progress(self) -> None:
        """Test the stage, position, percentage, loss and learning rate."""
        result = format_progress(TrainingStep(stage="vae", step=49, loss=0.123456, lr=2e-4), 100)

        assert "[vae 50/100 - 50%]" in result
        assert "loss 0.12346" in result
        assert "lr 2.00e-04" in result

    def test_format_progress_zero_total(self) -> None:
        """Test progress with a zero total."""
        assert "0%" in format_progress(TrainingStep(stage="vae", step=0, loss=1.0, lr=1e-3), 0)

    def test_print_progress_interval(self) -> None:
        """Test that progress prints every interval and on the last step only."""
        with patch("sys.stdout", new=StringIO()) as mock_stdout:
            for step in range(7):
                print_progress(TrainingStep(stage="mae", step=step, loss=1.0, lr=1e-4), 7, every=3)
            lines = mock_stdout.getvalue().strip().splitlines()

        assert len(lines) == 3
        assert "1/7" in lines[0] and "7/7" in lines[-1]


class TestMessages:
    """Tests for status messages."""

    def test_print_header(self) -> None:
        """Test printing a header."""
        with patch("sys.stdout", new=StringIO()) as mock_stdout:
            print_header("Test Header", width=40)
            output = mock_stdout.getvalue()

        assert "Test Header" in output
        assert "=" * 40 in output

    def test_status_messages(self) -> None:
        """Test error, success and warning prefixes."""
        with patch("sys.stdout", new=StringIO()) as mock_stdout:
            print_error("boom")
            print_success("done")
            print_warning("careful")
            output = mock_stdout.getvalue()

        assert f"{SYMBOL_ERROR} Error: boom" in output
        assert f"{SYMBOL_SUCCESS} done" in output
        assert "Warning: careful" in output


class TestReportTables:
    """Tests for metric and ablation tables."""

    def test_metric_report_table(self) -> None:
        """Test that missing metrics show as n/a and incomplete reports are flagged."""
        report = MetricReport(
            psnr=21.5,
            ssim=0.75,
            lpips=None,
            fid=3.0,
            u_ids=0.1,
            p_ids=0.05,
            n_samples=4,
            incomplete=True,
            missing=["x-0001"],
            per_domain={"indoor": {"psnr": 20.0, "ssim": 0.7, "lpips": None, "fid": None, "n": 2}},
        )

        table = format_metric_report(report)

        assert "PSNR" in table and "P-IDS" in table
        assert "21.5000" in table
        assert "n/a" in table
        assert "indoor" in table
        assert "Incomplete: 1 outputs missing" in table

    def test_ablation_table(self) -> None:
        """Test one row per variant with its seed."""
        report = AblationReport(
            preset="alignment",
            rows=[AblationRow("linear_only", {"final_loss": 0.5}, 0), AblationRow("self_x4", {"final_loss": 0.25}, 0)],
        )

        lines = format_ablation_report(report).splitlines()

        assert len(lines) == 4
        assert lines[2].startswith("linear_only")
        assert "0.2500" in lines[3]


class TestPrintHistory:
    """Tests for the run history view."""

    def test_print_history(self) -> None:
        """Test stage details with upstream and frozen hashes."""
        record = StageRecord(
            stage="alignment",
            checkpoint_path="/runs/a/checkpoints/alignment.pt",
            content_hash="c" * 64,
            seed=3,
            timestamp="2026-03-04T05:06:07",
            duration_seconds=12.5,
            upstream_hashes={"mae": "m" * 64},
            frozen_hashes={"backbone": "b" * 64},
            final_loss=0.0123,
            log_path="/runs/a/logs/alignment.csv",
            priorfill_version="0.3.0",
            torch_version="2.5.0",
        )

        with patch("sys.stdout", new=StringIO()) as mock_stdout:
            print_history("/runs/a", [record])
            output = mock_stdout.getvalue()

        assert "Run History" in output
        assert "Stage: alignment" in output
        assert "2026-03-04 05:06:07" in output
        assert "12.50 seconds" in output
        assert "Seed: 3" in output
        assert "Final loss: 0.012300" in output
        assert f"mae: {'m' * 16}" in output
        assert f"backbone: {'b' * 16}" in output
