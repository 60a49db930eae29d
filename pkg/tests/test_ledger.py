"""Tests for the persistent run ledger."""

import os
import socket
import time
from pathlib import Path

import pytest

from priorfill.ledger import LOCK_PREFIX, RunLedger, RunLockedError
from priorfill.models import StageRecord

DEAD_PID = 2**31 - 1


@pytest.fixture
def ledger(temp_cache_dir: Path):
    """Create a RunLedger instance for testing."""
    manager = RunLedger()
    yield manager
    manager.close()


def make_record(stage: str, timestamp: str, **overrides) -> StageRecord:
    values = dict(
        stage=stage,
        checkpoint_path=f"/runs/a/checkpoints/{stage}.pt",
        content_hash="ab" * 32,
        seed=0,
        timestamp=timestamp,
        duration_seconds=1.5,
        config={"lr": 1e-4, "channel_mult": [1, 2]},
        final_loss=0.25,
        priorfill_version="0.3.0",
        torch_version="2.5.0",
        python_version="3.12.0",
        platform="Linux-x86_64",
    )
    values.update(overrides)
    return StageRecord(**values)


class TestRunLedgerInitialization:
    """Tests for RunLedger initialization."""

    def test_creates_cache_directory(self, ledger: RunLedger, temp_cache_dir: Path) -> None:
        """Test that RunLedger creates its cache directory."""
        assert (temp_cache_dir / "ledger").is_dir()
        assert ledger.cache is not None

    def test_context_manager(self, temp_cache_dir: Path) -> None:
        """Test using RunLedger as a context manager."""
        with RunLedger() as ledger:
            assert ledger.cache is not None


class TestRunLedgerRecords:
    """Tests for saving and retrieving stage records."""

    def test_save_and_retrieve(self, ledger: RunLedger, tmp_path: Path) -> None:
        """Test saving and retrieving a record."""
        run_dir = tmp_path / "run"
        record = make_record("vae", "2026-01-02T10:00:00", upstream_hashes={"x": "y"})

        ledger.save_record(run_dir, record)

        assert ledger.get_record(run_dir, "vae") == record
        assert ledger.has_record(run_dir, "vae")

    def test_missing_record(self, ledger: RunLedger, tmp_path: Path) -> None:
        """Test retrieving a record that does not exist returns None."""
        assert ledger.get_record(tmp_path, "decoder") is None
        assert not ledger.has_record(tmp_path, "decoder")

    def test_rerun_replaces_record(self, ledger: RunLedger, tmp_path: Path) -> None:
        """Test that re-running a stage overwrites its record."""
        ledger.save_record(tmp_path, make_record("vae", "2026-01-02T10:00:00", final_loss=0.5))
        ledger.save_record(tmp_path, make_record("vae", "2026-01-02T11:00:00", final_loss=0.1))

        assert ledger.get_record(tmp_path, "vae").final_loss == 0.1

    def test_delete_record(self, ledger: RunLedger, tmp_path: Path) -> None:
        """Test deleting a record."""
        ledger.save_record(tmp_path, make_record("mae", "2026-01-02T10:00:00"))

        assert ledger.delete_record(tmp_path, "mae")
        assert not ledger.delete_record(tmp_path, "mae")

    def test_run_records_sorted_and_scoped(self, ledger: RunLedger, tmp_path: Path) -> None:
        """Test that a run's records come back oldest first and other runs are excluded."""
        run_a = tmp_path / "a"
        run_b = tmp_path / "b"
        ledger.save_record(run_a, make_record("backbone", "2026-01-02T12:00:00"))
        ledger.save_record(run_a, make_record("vae", "2026-01-02T10:00:00"))
        ledger.save_record(run_b, make_record("vae", "2026-01-02T09:00:00"))

        assert [r.stage for r in ledger.run_records(run_a)] == ["vae", "backbone"]
        assert ledger.list_runs() == sorted([str(run_a.resolve()), str(run_b.resolve())])

    def test_cache_stats(self, ledger: RunLedger, tmp_path: Path) -> None:
        """Test getting cache statistics."""
        ledger.save_record(tmp_path, make_record("vae", "2026-01-02T10:00:00"))

        stats = ledger.get_cache_stats()

        assert stats["total_entries"] == 1
        assert stats["size_bytes"] > 0
        assert "cache_directory" in stats


class TestRunLock:
    """Tests for the per-run stage lock."""

    @staticmethod
    def hold_lock(ledger: RunLedger, run_dir: Path, pid: int, host: str) -> None:
        ledger.cache.set(f"{LOCK_PREFIX}{run_dir.resolve()}", {"pid": pid, "host": host, "started": "earlier"})

    def test_second_stage_is_rejected(self, ledger: RunLedger, tmp_path: Path) -> None:
        """Test that a held lock rejects another stage in the same run directory."""
        lock = ledger.try_lock(tmp_path / "run")
        try:
            with pytest.raises(RunLockedError, match="Another stage"):
                ledger.try_lock(tmp_path / "run")
            other = ledger.try_lock(tmp_path / "other")
            other.release()
        finally:
            lock.release()

        ledger.try_lock(tmp_path / "run").release()

    def test_lock_held_by_live_process(self, ledger: RunLedger, tmp_path: Path) -> None:
        """Test that a lock written by a running process raises instead of waiting."""
        self.hold_lock(ledger, tmp_path, os.getpid(), socket.gethostname())

        with pytest.raises(RunLockedError, match=f"pid {os.getpid()}"):
            ledger.try_lock(tmp_path)
        assert ledger.is_locked(tmp_path)

    def test_lock_held_on_another_host(self, ledger: RunLedger, tmp_path: Path) -> None:
        """Test that a lock from another host is never treated as stale."""
        self.hold_lock(ledger, tmp_path, DEAD_PID, "elsewhere")

        with pytest.raises(RunLockedError, match="unlock"):
            ledger.try_lock(tmp_path)

    def test_stale_lock_is_reclaimed(self, ledger: RunLedger, tmp_path: Path) -> None:
        """Test that a lock left by a process that no longer exists is taken over."""
        self.hold_lock(ledger, tmp_path, DEAD_PID, socket.gethostname())

        with ledger.try_lock(tmp_path):
            assert ledger.lock_holder(tmp_path)["pid"] == os.getpid()
        assert not ledger.is_locked(tmp_path)

    def test_lock_expires(self, ledger: RunLedger, tmp_path: Path) -> None:
        """Test that an expired lock no longer blocks the run directory."""
        ledger.try_lock(tmp_path, expire=0.05)
        time.sleep(0.2)

        lock = ledger.try_lock(tmp_path)
        lock.release()

    def test_release_keeps_newer_holder(self, ledger: RunLedger, tmp_path: Path) -> None:
        """Test that releasing a reclaimed lock leaves the new holder in place."""
        old = ledger.try_lock(tmp_path)
        assert ledger.force_unlock(tmp_path)
        new = ledger.try_lock(tmp_path)

        old.release()

        assert ledger.is_locked(tmp_path)
        new.release()
        assert not ledger.is_locked(tmp_path)

    def test_force_unlock(self, ledger: RunLedger, tmp_path: Path) -> None:
        """Test that force_unlock clears a held lock and reports whether there was one."""
        self.hold_lock(ledger, tmp_path, os.getpid(), socket.gethostname())

        assert ledger.force_unlock(tmp_path)
        assert not ledger.force_unlock(tmp_path)
        ledger.try_lock(tmp_path).release()

    def test_lock_is_not_a_record(self, ledger: RunLedger, tmp_path: Path) -> None:
        """Test that lock entries do not appear among runs."""
        lock = ledger.try_lock(tmp_path)
        try:
            assert ledger.list_runs() == []
            assert ledger.run_records(tmp_path) == []
        finally:
            lock.release()
