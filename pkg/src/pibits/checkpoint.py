"""Durable per-job partial sums, one directory per run.

Layout::

    <dir>/run.meta        key=value header identifying the request and plan
    <dir>/job-<i>.sum     slice=<id>
                          sum=p=<bits>:<hex limbs>

Every file is written to a temporary name, fsynced and renamed into place,
so a record that exists is a complete record.
"""

from __future__ import annotations

import datetime as _dt
import os
import threading
from dataclasses import dataclass
from pathlib import Path

from .fixedpoint import FixedFraction

FORMAT_VERSION = 1
META_NAME = "run.meta"


class StorageError(OSError):
    """Checkpoint directory could not be read or written."""


class CheckpointMismatch(ValueError):
    """Stored records belong to a different request or plan."""


@dataclass(frozen=True)
class CheckpointRecord:
    slice_id: str
    partial_sum: FixedFraction
    status: str = "complete"
    timestamp: _dt.datetime | None = None


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed line {line!r}")
        out[key.strip()] = value.strip()
    return out


class CheckpointStore:
    def __init__(self, directory: str | os.PathLike):
        self.directory = Path(directory)
        self._lock = threading.Lock()

    def _atomic_write(self, name: str, text: str) -> None:
        target = self.directory / name
        tmp = self.directory / f".{name}.tmp-{os.getpid()}-{threading.get_ident()}"
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
            with open(tmp, "w", encoding="ascii") as fh:
                fh.write(text)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, target)
            _fsync_dir(self.directory)
        except OSError as exc:
            try:
                tmp.unlink()
            except OSError:
                pass
            raise StorageError(f"cannot write {target}: {exc}") from exc

    # header

    def read_meta(self) -> dict[str, str] | None:
        path = self.directory / META_NAME
        try:
            text = path.read_text(encoding="ascii")
        except FileNotFoundError:
            return None
        except OSError as exc:
            raise StorageError(f"cannot read {path}: {exc}") from exc
        try:
            return _parse_kv(text)
        except ValueError as exc:
            raise StorageError(f"corrupt {path}: {exc}") from exc

    def write_meta(self, meta: dict[str, object]) -> None:
        body = "".join(f"{k}={v}\n" for k, v in meta.items())
        with self._lock:
            self._atomic_write(META_NAME, body)

    def ensure_meta(self, meta: dict[str, object], keys) -> None:
        """Create the header, or check an existing one agrees on ``keys``."""
        wanted = {k: str(v) for k, v in meta.items()}
        existing = self.read_meta()
        if existing is None:
            self.write_meta(wanted)
            return
        if existing.get("format") != str(FORMAT_VERSION):
            raise CheckpointMismatch(f"unsupported checkpoint format {existing.get('format')!r}")
        diffs = [
            f"{k}: stored {existing.get(k)!r}, requested {wanted[k]!r}"
            for k in keys
            if existing.get(k) != wanted[k]
        ]
        if diffs:
            raise CheckpointMismatch(
                f"checkpoint in {self.directory} belongs to another run ({'; '.join(diffs)})"
            )

    # job records

    @staticmethod
    def job_name(index: int) -> str:
        return f"job-{index}.sum"

    def write_job(self, index: int, slice_id: str, partial: FixedFraction) -> None:
        with self._lock:
            self._atomic_write(self.job_name(index), f"slice={slice_id}\nsum={partial.to_hex()}\n")

    def read_job(self, index: int) -> CheckpointRecord | None:
        path = self.directory / self.job_name(index)
        try:
            text = path.read_text(encoding="ascii")
            mtime = path.stat().st_mtime
        except FileNotFoundError:
            return None
        except OSError as exc:
            raise StorageError(f"cannot read {path}: {exc}") from exc
        try:
            kv = _parse_kv(text)
            record = CheckpointRecord(
                slice_id=kv["slice"],
                partial_sum=FixedFraction.from_hex(kv["sum"]),
                timestamp=_dt.datetime.fromtimestamp(mtime),
            )
        except (KeyError, ValueError) as exc:
            raise StorageError(f"corrupt record {path}: {exc}") from exc
        return record

    def job_indices(self) -> list[int]:
        if not self.directory.is_dir():
            return []
        out = []
        for p in self.directory.glob("job-*.sum"):
            stem = p.name[len("job-") : -len(".sum")]
            if stem.isdigit():
                out.append(int(stem))
        return sorted(out)
