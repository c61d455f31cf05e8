"""Shared primitive types, ordering rules and byte codecs.

Everything on disk (tables, value files, index maps, manifest, WAL) builds on
the varint codec and the internal-key ordering defined here.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple

from .gbdt import GbdtParams
from .lifetime import LifetimeParams

MAX_U64 = (1 << 64) - 1
MAX_SEQ = MAX_U64


class KeyKind(IntEnum):
    PUT = 0
    DELETE = 1


class StorageError(Exception):
    """Base class for engine errors."""


class CodecError(StorageError):
    pass


class TruncatedInput(CodecError):
    """Input ends in the middle of an encoded item."""


class VarintOverflow(CodecError):
    """Varint has more than 10 bytes or does not fit in 64 bits."""


class ChecksumMismatch(StorageError):
    pass


class FileMissingError(StorageError):
    """A locator points at a dead file with no covering index map."""


class DanglingLocator(StorageError):
    pass


class CorruptManifest(StorageError):
    pass


class SequenceNumber(int):
    """Monotonic per-write counter used as the engine's logical clock."""


class InternalKey(NamedTuple):
    user_key: bytes
    seq: int
    kind: KeyKind = KeyKind.PUT

    def order_key(self) -> tuple[bytes, int]:
        # user_key ascending, then seq descending (newest first)
        return (self.user_key, MAX_U64 - self.seq)


def internal_key_compare(a: InternalKey, b: InternalKey) -> int:
    """Total order: user_key ascending, newest sequence first. Returns -1/0/1."""
    ka, kb = a.order_key(), b.order_key()
    if ka < kb:
        return -1
    if ka > kb:
        return 1
    return 0


class ValueLocator(NamedTuple):
    """(value-file id, byte offset, record byte length) reference into a value file."""

    file_no: int
    offset: int
    size: int


def varint_encode(u: int) -> bytes:
    """LEB128 base-128 little-endian encoding of an unsigned 64-bit integer."""
    if u < 0 or u > MAX_U64:
        raise ValueError(f"varint out of range: {u}")
    out = bytearray()
    while True:
        b = u & 0x7F
        u >>= 7
        if u:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def varint_decode(buf, pos: int = 0) -> tuple[int, int]:
    """Decode a varint from buf[pos:]. Returns (value, bytes_consumed)."""
    result = 0
    shift = 0
    consumed = 0
    n = len(buf)
    while True:
        if pos + consumed >= n:
            raise TruncatedInput("varint ends mid-stream")
        b = buf[pos + consumed]
        consumed += 1
        if consumed > 10 or (consumed == 10 and b > 0x01):
            raise VarintOverflow("varint exceeds 64 bits")
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, consumed
        shift += 7


@dataclass
class EngineConfig:
    """Tunables for the engine; byte sizes are per-file/per-buffer limits."""

    memtable_bytes: int = 8 << 20
    value_file_bytes: int = 32 << 20
    min_separated_value_bytes: int = 1024
    sst_target_bytes: int = 2 << 20
    level1_target_bytes: int = 8 << 20
    level_fanout: int = 10
    max_levels: int = 7
    l0_compaction_trigger: int = 4
    max_deltas: int = 32
    edwc_count: int = 10
    dataset_threshold: int = 128_000
    sample_queue_capacity: int = 256_000
    consumer_batches_per_recompute: int = 4
    lifetime: LifetimeParams = field(default_factory=LifetimeParams)
    gbdt: GbdtParams = field(default_factory=GbdtParams)
    seed: int = 0
    wal_enabled: bool = True
    compact_feature_encoding: bool = False
    decay_write_bonus: bool = False
    gc_label_literal: bool = False
    gc_classify: str = "model"  # "model" or "long" (model ablation)
    gc_trigger: str = "ttl"  # "ttl" or "ratio"
    gc_ratio_trigger: float = 0.2
    gc_estimate_samples: int = 64
    gc_estimate_interval: int = 50_000  # seqs between garbage re-estimates
    gc_max_files_per_job: int = 8
    train_async: bool = False
    table_cache_bytes: int = 256 << 20
    dataset_dump_dir: str | None = None

    def validate(self) -> None:
        if not (0 < self.max_deltas <= 32):
            raise ValueError("max_deltas must be in (0, 32]")
        if not (0 < self.edwc_count <= 10):
            raise ValueError("edwc_count must be in (0, 10]")
        for name in ("memtable_bytes", "value_file_bytes", "min_separated_value_bytes",
                     "sst_target_bytes", "level1_target_bytes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.gc_classify not in ("model", "long"):
            raise ValueError("gc_classify must be 'model' or 'long'")
        if self.gc_trigger not in ("ttl", "ratio"):
            raise ValueError("gc_trigger must be 'ttl' or 'ratio'")
        self.lifetime.validate()
        self.gbdt.validate()
