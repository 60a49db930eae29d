"""Persistent run ledger using diskcache: one StageRecord per (run directory, stage)."""

import json
import os
import socket
from dataclasses import asdict, dataclass
from datetime import datetime
from pathlib import Path
from typing import Optional

from diskcache import Cache
from platformdirs import user_cache_dir

from priorfill.errors import PriorFillError
from priorfill.models import StageRecord

LOCK_PREFIX = "lock::"
LOCK_EXPIRE_SECONDS = 24 * 60 * 60


class RunLockedError(PriorFillError):
    """Raised when another stage already holds the run directory lock."""

    pass


def _process_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    except (OverflowError, OSError):
        return False
    return True


def is_stale(holder: dict) -> bool:
    """A lock is stale when its holder ran on this host and that process is gone."""
    return holder.get("host") == socket.gethostname() and not _process_alive(int(holder.get("pid", -1)))


@dataclass
class RunLock:
    """A held run directory lock. Releasing only removes the entry this lock wrote."""

    cache: Cache
    key: str
    holder: dict

    def release(self) -> None:
        with self.cache.transact():
            if self.cache.get(self.key) == self.holder:
                self.cache.delete(self.key)

    def __enter__(self) -> "RunLock":
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.release()
        return False


class RunLedger:
    """Manages persistent stage records and the per-run stage lock."""

    def __init__(self):
        """Open the ledger cache shared by every run directory."""
        cache_dir = Path(user_cache_dir("priorfill")) / "ledger"
        cache_dir.mkdir(parents=True, exist_ok=True)
        self.cache = Cache(str(cache_dir))

    def close(self) -> None:
        """Flush and close the ledger; records stay on disk."""
        if self.cache is not None:
            self.cache.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()
        return False

    @staticmethod
    def _key(run_dir: Path, stage: str) -> str:
        return f"{run_dir.resolve()}::{stage}"

    def save_record(self, run_dir: Path, record: StageRecord) -> None:
        """
        Save the record of a finished stage, replacing any earlier one.

        Args:
            run_dir: Run directory the stage wrote into
            record: Stage record to save
        """
        self.cache.set(self._key(run_dir, record.stage), json.dumps(asdict(record), indent=2))

    def get_record(self, run_dir: Path, stage: str) -> Optional[StageRecord]:
        """
        Retrieve the record of a stage.

        Returns:
            StageRecord if the stage has run for this directory, None otherwise
        """
        record_json = self.cache.get(self._key(run_dir, stage))
        if record_json is None:
            return None
        return StageRecord(**json.loads(record_json))

    def has_record(self, run_dir: Path, stage: str) -> bool:
        return self._key(run_dir, stage) in self.cache

    def delete_record(self, run_dir: Path, stage: str) -> bool:
        return self.cache.delete(self._key(run_dir, stage))

    def run_records(self, run_dir: Path) -> list[StageRecord]:
        """All stage records of one run directory, oldest first."""
        prefix = f"{run_dir.resolve()}::"
        records = []
        for key in self.cache.iterkeys():
            if isinstance(key, str) and key.startswith(prefix):
                record = self.get_record(run_dir, key[len(prefix) :])
                if record is not None:
                    records.append(record)
        return sorted(records, key=lambda r: r.timestamp)

    def list_runs(self) -> list[str]:
        """Run directories that have at least one record."""
        runs = {
            key.rsplit("::", 1)[0]
            for key in self.cache.iterkeys()
            if isinstance(key, str) and "::" in key and not key.startswith(LOCK_PREFIX)
        }
        return sorted(runs)

    def get_cache_stats(self) -> dict:
        """Number of ledger entries (records and held locks) and their footprint on disk."""
        return {
            "total_entries": len(self.cache),
            "size_bytes": self.cache.volume(),
            "cache_directory": str(self.cache.directory),
        }

    @staticmethod
    def _lock_key(run_dir: Path) -> str:
        return f"{LOCK_PREFIX}{run_dir.resolve()}"

    def lock_holder(self, run_dir: Path) -> Optional[dict]:
        """Process holding the run lock (pid, host, started), or None."""
        return self.cache.get(self._lock_key(run_dir))

    def is_locked(self, run_dir: Path) -> bool:
        return self.lock_holder(run_dir) is not None

    def try_lock(self, run_dir: Path, expire: Optional[float] = LOCK_EXPIRE_SECONDS) -> RunLock:
        """
        Take the run lock without waiting.

        The entry is added atomically and expires after `expire` seconds. A lock
        left by a process on this host that no longer exists is reclaimed.

        Raises:
            RunLockedError: If a stage is already running in this run directory
        """
        key = self._lock_key(run_dir)
        holder = {"pid": os.getpid(), "host": socket.gethostname(), "started": datetime.now().isoformat()}
        with self.cache.transact():
            current = self.cache.get(key)
            if current is not None and is_stale(current):
                self.cache.delete(key)
            added = self.cache.add(key, holder, expire=expire)
        if not added:
            current = self.lock_holder(run_dir) or {}
            raise RunLockedError(
                f"Another stage is running in {run_dir} "
                f"(pid {current.get('pid', '?')} on {current.get('host', '?')} since {current.get('started', '?')}); "
                "run 'priorfill unlock' if it is no longer running"
            )
        return RunLock(self.cache, key, holder)

    def force_unlock(self, run_dir: Path) -> bool:
        """Remove the run lock whoever holds it. Returns whether a lock was removed."""
        return self.cache.delete(self._lock_key(run_dir))
