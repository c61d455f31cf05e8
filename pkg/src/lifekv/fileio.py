"""Instrumented file layer: per-kind byte accounting and crash injection.

Every byte the engine writes flows through a FileManager, which tags writes
with a file kind (wal/sst/vlog/vmap/manifest/model) for write-amplification
accounting.  Tests arm `crash_after_writes`; the N-th write call then raises
CrashInjected, optionally after writing a torn prefix, which models a stop at
an arbitrary I/O boundary.
"""
from __future__ import annotations

import os


class CrashInjected(Exception):
    pass


FILE_KINDS = ("wal", "sst", "vlog", "vmap", "manifest", "model", "other")


class IoStats:
    def __init__(self):
        self.bytes_by_kind = {k: 0 for k in FILE_KINDS}
        self.write_calls = 0

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes_by_kind.values())

    def snapshot(self) -> dict:
        d = dict(self.bytes_by_kind)
        d["total"] = self.total_bytes
        d["write_calls"] = self.write_calls
        return d


class FileManager:
    """All engine file access goes through here, rooted at one directory."""

    def __init__(self, root: str):
        self.root = root
        self.stats = IoStats()
        self.crash_after_writes: int | None = None
        self.torn_final_write = False
        self.write_log: list[str] | None = None  # kind per write call, if armed
        os.makedirs(root, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.root, name)

    def _check_crash(self, fh, data: bytes, kind: str) -> None:
        self.stats.write_calls += 1
        if self.write_log is not None:
            self.write_log.append(kind)
        if (self.crash_after_writes is not None
                and self.stats.write_calls > self.crash_after_writes):
            if self.torn_final_write and len(data) > 1:
                torn = data[: len(data) // 2]
                fh.write(torn)
                fh.flush()
            raise CrashInjected(f"write #{self.stats.write_calls} suppressed")

    def open_append(self, name: str, kind: str) -> "AppendFile":
        return AppendFile(self, name, kind)

    def read_bytes(self, name: str) -> bytes:
        with open(self.path(name), "rb") as f:
            return f.read()

    def read_at(self, name: str, offset: int, size: int) -> bytes:
        with open(self.path(name), "rb") as f:
            f.seek(offset)
            return f.read(size)

    def write_file(self, name: str, data: bytes, kind: str) -> None:
        """Create-and-write in one logical (crash-atomic up to tearing) op."""
        with open(self.path(name), "wb") as f:
            self._check_crash(f, data, kind)
            f.write(data)
            self.stats.bytes_by_kind[kind] += len(data)

    def record_external_write(self, kind: str, nbytes: int) -> None:
        self.stats.bytes_by_kind[kind] += nbytes

    def exists(self, name: str) -> bool:
        return os.path.exists(self.path(name))

    def file_size(self, name: str) -> int:
        return os.path.getsize(self.path(name))

    def delete(self, name: str) -> None:
        try:
            os.remove(self.path(name))
        except FileNotFoundError:
            pass

    def truncate(self, name: str, size: int) -> None:
        with open(self.path(name), "r+b") as f:
            f.truncate(size)

    def listdir(self) -> list[str]:
        return sorted(os.listdir(self.root))


class AppendFile:
    """Append-only handle; every write is counted and crash-checkable."""

    def __init__(self, fm: FileManager, name: str, kind: str):
        self.fm = fm
        self.name = name
        self.kind = kind
        self._fh = open(fm.path(name), "ab")

    def tell(self) -> int:
        return self._fh.tell()

    def write(self, data: bytes) -> None:
        self.fm._check_crash(self._fh, data, self.kind)
        self._fh.write(data)
        self._fh.flush()
        self.fm.stats.bytes_by_kind[self.kind] += len(data)

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()
