"""Lifetime-classed value files, index maps, and garbage collection.

Large values live in append-only value files.  Each file gets a TTL at
creation (from the then-current class threshold) and becomes a collection
candidate once that many sequence units have passed.  A collection job scans
candidate files, drops records whose key has a newer write, and relocates the
rest into fresh short- or long-lifetime files as chosen by the model.  Instead
of writing new locators back into the LSM, the job persists one immutable
index map (old file/offset -> new locator); reads and compactions chase these
maps until compaction lazily rewrites the locators.
"""
from __future__ import annotations

import struct
import time
import zlib
from bisect import bisect_left
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .core import (ChecksumMismatch, DanglingLocator, FileMissingError,
                   KeyKind, TruncatedInput, varint_decode, varint_encode)
from .features import FeatureBlock, build_feature_vector, edwc_decay, feature_decode
from .fileio import FileManager
from .learn import SampleSource, TrainingSample

VMAP_MAGIC = 0x6B766D70  # "kvmp"
_CRC = struct.Struct("<I")
_SEQ = struct.Struct("<Q")
_VMAP_FOOTER = struct.Struct("<II")  # crc, magic


class FileClass(IntEnum):
    DEFAULT = 0
    SHORT = 1
    LONG = 2


class FileState(IntEnum):
    OPEN = 0
    SEALED = 1


def encode_value_record(key: bytes, seq: int, value: bytes) -> bytes:
    seq8 = _SEQ.pack(seq)
    crc = zlib.crc32(key + seq8 + value) & 0xFFFFFFFF
    out = bytearray(_CRC.pack(crc))
    out += varint_encode(len(key))
    out += key
    out += seq8
    out += varint_encode(len(value))
    out += value
    return bytes(out)


def decode_value_record(buf, pos: int = 0):
    """Returns (key, seq, value, consumed); verifies the checksum."""
    if pos + 4 > len(buf):
        raise TruncatedInput("value record header cut short")
    crc = _CRC.unpack_from(buf, pos)[0]
    p = pos + 4
    klen, n = varint_decode(buf, p)
    p += n
    key = bytes(buf[p:p + klen])
    if len(key) != klen:
        raise TruncatedInput("value record key cut short")
    p += klen
    if p + 8 > len(buf):
        raise TruncatedInput("value record seq cut short")
    seq8 = bytes(buf[p:p + 8])
    seq = _SEQ.unpack(seq8)[0]
    p += 8
    vlen, n = varint_decode(buf, p)
    p += n
    value = bytes(buf[p:p + vlen])
    if len(value) != vlen:
        raise TruncatedInput("value record value cut short")
    p += vlen
    if zlib.crc32(key + seq8 + value) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch("value record checksum mismatch")
    return key, seq, value, p - pos


@dataclass
class ValueFileMeta:
    id: int
    klass: FileClass
    created_seq: int
    ttl: int
    state: FileState = FileState.OPEN
    size: int = 0
    count: int = 0

    @property
    def name(self) -> str:
        return f"{self.id:06d}.vlog"


class ValueLog:
    """Registry of live value files plus the open per-class append targets."""

    def __init__(self, fm: FileManager, cfg):
        self.fm = fm
        self.cfg = cfg
        self.files: dict[int, ValueFileMeta] = {}
        self.dead_ids: set[int] = set()
        self.open_by_class: dict[FileClass, int] = {}
        self._buffers: dict[int, bytearray] = {}
        self._flushed: dict[int, int] = {}
        self.pending_ops: list[dict] = []  # manifest ops awaiting the next edit
        self.reads = 0

    def register(self, meta: ValueFileMeta) -> None:
        """Recovery path: adopt a file already recorded in the manifest."""
        self.files[meta.id] = meta
        if meta.state == FileState.OPEN:
            self.open_by_class[meta.klass] = meta.id
            self._flushed[meta.id] = meta.size

    def ensure_open(self, klass: FileClass, ttl: int, created_seq: int,
                    alloc_file_no) -> ValueFileMeta:
        fid = self.open_by_class.get(klass)
        if fid is not None:
            return self.files[fid]
        meta = ValueFileMeta(id=alloc_file_no(), klass=klass,
                             created_seq=created_seq, ttl=max(int(ttl), 1))
        self.files[meta.id] = meta
        self.open_by_class[klass] = meta.id
        self._buffers[meta.id] = bytearray()
        self._flushed[meta.id] = 0
        self.fm.write_file(meta.name, b"", "vlog")
        self.pending_ops.append({"op": "add_vfile", "id": meta.id,
                                 "class": int(klass), "created_seq": created_seq,
                                 "ttl": meta.ttl})
        return meta

    def append(self, klass: FileClass, key: bytes, seq: int, value: bytes,
               ttl: int, created_seq: int, alloc_file_no) -> tuple[int, int, int]:
        meta = self.ensure_open(klass, ttl, created_seq, alloc_file_no)
        rec = encode_value_record(key, seq, value)
        offset = meta.size
        self._buffers.setdefault(meta.id, bytearray()).extend(rec)
        meta.size += len(rec)
        meta.count += 1
        if meta.size >= self.cfg.value_file_bytes:
            self.seal(meta.id)
        return meta.id, offset, len(rec)

    def seal(self, file_no: int) -> None:
        meta = self.files[file_no]
        if meta.state == FileState.SEALED:
            return
        self._flush_buffer(file_no)
        meta.state = FileState.SEALED
        if self.open_by_class.get(meta.klass) == file_no:
            del self.open_by_class[meta.klass]
        self.pending_ops.append({"op": "seal_vfile", "id": file_no,
                                 "size": meta.size, "count": meta.count})

    def _flush_buffer(self, file_no: int) -> None:
        buf = self._buffers.get(file_no)
        if not buf:
            return
        fh = self.fm.open_append(self.files[file_no].name, "vlog")
        try:
            fh.write(bytes(buf))
        finally:
            fh.close()
        self._flushed[file_no] = self._flushed.get(file_no, 0) + len(buf)
        buf.clear()

    def sync(self) -> None:
        for fid in list(self._buffers):
            self._flush_buffer(fid)

    def read(self, locator: tuple[int, int, int]) -> tuple[bytes, int, bytes]:
        file_no, offset, size = locator
        meta = self.files.get(file_no)
        if meta is None:
            raise FileMissingError(f"value file {file_no} is gone")
        if meta.state == FileState.OPEN and offset + size > self._flushed.get(file_no, 0):
            self._flush_buffer(file_no)
        raw = self.fm.read_at(meta.name, offset, size)
        if len(raw) < size:
            raise TruncatedInput(f"short read in value file {file_no}")
        key, seq, value, _ = decode_value_record(raw)
        self.reads += 1
        return key, seq, value

    def iter_records(self, file_no: int):
        """(offset, size, key, seq, value) for every record in the file."""
        self.sync()
        data = self.fm.read_bytes(self.files[file_no].name)
        pos = 0
        while pos < len(data):
            key, seq, value, consumed = decode_value_record(data, pos)
            yield pos, consumed, key, seq, value
            pos += consumed

    def scan_recover(self, file_no: int) -> None:
        """Truncate a torn tail left by a crash; rebuild size/count."""
        meta = self.files[file_no]
        data = self.fm.read_bytes(meta.name)
        pos = 0
        count = 0
        while pos < len(data):
            try:
                _, _, _, consumed = decode_value_record(data, pos)
            except (TruncatedInput, ChecksumMismatch):
                break
            pos += consumed
            count += 1
        if pos < len(data):
            self.fm.truncate(meta.name, pos)
        meta.size = pos
        meta.count = count
        self._flushed[file_no] = pos

    def expired(self, current_seq: int) -> list[int]:
        out = [m.id for m in self.files.values()
               if m.state == FileState.SEALED and current_seq - m.created_seq >= m.ttl]
        out.sort()
        return out

    def mark_dead(self, file_ids) -> None:
        for fid in file_ids:
            meta = self.files.pop(fid, None)
            self.dead_ids.add(fid)
            self._buffers.pop(fid, None)
            self._flushed.pop(fid, None)
            if meta is not None:
                self.fm.delete(meta.name)

    def is_dead(self, file_no: int) -> bool:
        return file_no in self.dead_ids

    def total_bytes(self) -> int:
        return sum(m.size for m in self.files.values())


@dataclass
class ValueIndexMap:
    map_id: int
    covered: frozenset[int]
    keys: list[tuple[int, int]]            # (old_file, old_offset), sorted
    targets: list[tuple[int, int, int]]    # (new_file, new_offset, size)

    @property
    def name(self) -> str:
        return f"{self.map_id:06d}.vmap"

    def lookup(self, file_no: int, offset: int):
        i = bisect_left(self.keys, (file_no, offset))
        if i < len(self.keys) and self.keys[i] == (file_no, offset):
            return self.targets[i]
        return None

    def target_files(self) -> set[int]:
        return {t[0] for t in self.targets}


def encode_map(m: ValueIndexMap) -> bytes:
    body = bytearray(varint_encode(len(m.keys)))
    body += varint_encode(len(m.covered))
    for fid in sorted(m.covered):
        body += varint_encode(fid)
    for (of, oo), (nf, no, sz) in zip(m.keys, m.targets):
        body += varint_encode(of)
        body += varint_encode(oo)
        body += varint_encode(nf)
        body += varint_encode(no)
        body += varint_encode(sz)
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    return bytes(body) + _VMAP_FOOTER.pack(crc, VMAP_MAGIC)


def decode_map(map_id: int, data: bytes) -> ValueIndexMap:
    if len(data) < _VMAP_FOOTER.size:
        raise TruncatedInput("index map too small")
    crc, magic = _VMAP_FOOTER.unpack_from(data, len(data) - _VMAP_FOOTER.size)
    body = data[:-_VMAP_FOOTER.size]
    if magic != VMAP_MAGIC or zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch(f"index map {map_id} corrupt")
    count, pos = varint_decode(body, 0)
    ncov, n = varint_decode(body, pos)
    pos += n
    covered = set()
    for _ in range(ncov):
        fid, n = varint_decode(body, pos)
        pos += n
        covered.add(fid)
    keys = []
    targets = []
    for _ in range(count):
        of, n = varint_decode(body, pos); pos += n
        oo, n = varint_decode(body, pos); pos += n
        nf, n = varint_decode(body, pos); pos += n
        no, n = varint_decode(body, pos); pos += n
        sz, n = varint_decode(body, pos); pos += n
        keys.append((of, oo))
        targets.append((nf, no, sz))
    return ValueIndexMap(map_id, frozenset(covered), keys, targets)


class MapRegistry:
    """In-memory view of all live index maps, keyed by covered file id."""

    def __init__(self):
        self.maps: dict[int, ValueIndexMap] = {}
        self.by_covered: dict[int, int] = {}
        self.max_chain = 0
        self.chain_hops = 0
        self.resolves = 0

    def add(self, m: ValueIndexMap) -> None:
        self.maps[m.map_id] = m
        for fid in m.covered:
            self.by_covered[fid] = m.map_id

    def drop(self, map_id: int) -> ValueIndexMap | None:
        m = self.maps.pop(map_id, None)
        if m is not None:
            for fid in m.covered:
                if self.by_covered.get(fid) == map_id:
                    del self.by_covered[fid]
        return m

    def resolve(self, locator: tuple[int, int, int], is_dead) -> tuple[int, int, int]:
        """Chase map redirections until the locator lands in a live file."""
        file_no, offset, size = locator
        hops = 0
        while is_dead(file_no):
            mid = self.by_covered.get(file_no)
            if mid is None:
                raise DanglingLocator(f"no index map covers dead file {file_no}")
            target = self.maps[mid].lookup(file_no, offset)
            if target is None:
                raise DanglingLocator(
                    f"({file_no},{offset}) missing from index map {mid}")
            file_no, offset, size = target
            hops += 1
        self.resolves += 1
        self.chain_hops += hops
        if hops > self.max_chain:
            self.max_chain = hops
        return file_no, offset, size

    def retire(self, live_table_refs: set[int], is_dead) -> list[int]:
        """Maps reachable from live tables (transitively through dead targets)
        are kept; everything else can be dropped."""
        needed_files = set(live_table_refs)
        needed_maps: set[int] = set()
        changed = True
        while changed:
            changed = False
            for mid, m in self.maps.items():
                if mid in needed_maps:
                    continue
                if any(fid in needed_files for fid in m.covered):
                    needed_maps.add(mid)
                    needed_files |= {f for f in m.target_files() if is_dead(f)}
                    changed = True
        return [mid for mid in self.maps if mid not in needed_maps]


@dataclass
class GcJobStats:
    scanned: int = 0
    valid: int = 0
    invalid: int = 0
    bytes_relocated: dict = field(default_factory=lambda: {FileClass.SHORT: 0,
                                                           FileClass.LONG: 0})
    per_class: dict = field(default_factory=dict)  # input class -> [scanned, invalid]
    output_files: list = field(default_factory=list)
    map_id: int | None = None
    elapsed_s: float = 0.0


def run_gc(eng, file_ids: list[int]) -> GcJobStats:
    """One collection job over sealed, expired input files.

    Validity is a sequence-number match against the newest LSM entry; valid
    records are classified (model score >= 0.5 -> long, ablation forces long),
    relocated, and redirected through a single per-job index map.  The LSM is
    never written.  On failure the partial outputs are deleted and inputs
    remain live, so a retry is safe.
    """
    t0 = time.perf_counter()
    vlog: ValueLog = eng.vlog
    cfg = eng.cfg
    current_seq = eng.seq
    use_model = cfg.gc_classify == "model" and eng.model is not None
    stats = GcJobStats()
    out_metas: list[ValueFileMeta] = []
    out_bufs: dict[int, bytearray] = {}
    open_out: dict[FileClass, ValueFileMeta] = {}
    map_pairs: list[tuple[tuple[int, int], tuple[int, int, int]]] = []

    new_map: ValueIndexMap | None = None

    def out_file(klass: FileClass) -> ValueFileMeta:
        meta = open_out.get(klass)
        if meta is None:
            ttl = (eng.thresholds.short_ttl if klass == FileClass.SHORT
                   else eng.thresholds.long_ttl)
            meta = ValueFileMeta(id=eng.alloc_file_no(), klass=klass,
                                 created_seq=current_seq, ttl=max(int(ttl), 1))
            open_out[klass] = meta
            out_metas.append(meta)
            out_bufs[meta.id] = bytearray()
        return meta

    try:
        for fid in file_ids:
            in_class = vlog.files[fid].klass
            cls_stats = stats.per_class.setdefault(int(in_class), [0, 0])
            batch = []
            for off, size, key, seq, value in vlog.iter_records(fid):
                stats.scanned += 1
                cls_stats[0] += 1
                hit = eng.gc_lookup(key)
                if hit is None or hit[1] != KeyKind.PUT or hit[0] != seq:
                    stats.invalid += 1
                    cls_stats[1] += 1
                    continue
                val = hit[2]
                if isinstance(val, tuple):
                    block, _ = feature_decode(val[3])
                    block.static_value_size = val[2]
                else:
                    block = FeatureBlock(static_value_size=len(val))
                batch.append((off, size, key, seq, value, block,
                              current_seq - seq))
            stats.valid += len(batch)
            if not batch:
                continue
            if use_model:
                X = np.array([build_feature_vector(b, elapsed,
                                                   cfg.decay_write_bonus)
                              for *_x, b, elapsed in batch], dtype=np.float64)
                tp = time.perf_counter()
                scores = eng.model.predict(X)
                eng.metrics.model_call_seconds += time.perf_counter() - tp
                eng.metrics.model_calls += len(batch)
                classes = [FileClass.LONG if s >= 0.5 else FileClass.SHORT
                           for s in scores]
            else:
                classes = [FileClass.LONG] * len(batch)
            for (off, size, key, seq, value, block, elapsed), klass in zip(batch, classes):
                meta = out_file(klass)
                rec = encode_value_record(key, seq, value)
                new_off = meta.size
                out_bufs[meta.id].extend(rec)
                meta.size += len(rec)
                meta.count += 1
                map_pairs.append(((fid, off), (meta.id, new_off, len(rec))))
                stats.bytes_relocated[klass] += len(rec)
                if meta.size >= cfg.value_file_bytes:
                    del open_out[klass]
                if block.edwcs:
                    sample_edwcs = edwc_decay(block.edwcs, elapsed,
                                              cfg.decay_write_bonus)
                else:
                    sample_edwcs = []
                eng.h_long.record(elapsed)
                if eng.rng.random() < eng.tracker.valid_ratio:
                    sample = TrainingSample(
                        SampleSource.GC,
                        FeatureBlock(deltas=list(block.deltas),
                                     edwcs=sample_edwcs,
                                     static_value_size=block.static_value_size),
                        elapsed)
                    eng.gc_queue.offer(sample)

        # persist outputs and the job's index map, then commit atomically
        ops = []
        for meta in out_metas:
            eng.fm.write_file(meta.name, bytes(out_bufs[meta.id]), "vlog")
            meta.state = FileState.SEALED
            ops.append({"op": "add_vfile", "id": meta.id, "class": int(meta.klass),
                        "created_seq": meta.created_seq, "ttl": meta.ttl})
            ops.append({"op": "seal_vfile", "id": meta.id, "size": meta.size,
                        "count": meta.count})
        if map_pairs:
            map_pairs.sort(key=lambda p: p[0])
            new_map = ValueIndexMap(eng.alloc_file_no(), frozenset(file_ids),
                                    [p[0] for p in map_pairs],
                                    [p[1] for p in map_pairs])
            eng.fm.write_file(new_map.name, encode_map(new_map), "vmap")
            ops.append({"op": "add_map", "id": new_map.map_id,
                        "covered": sorted(new_map.covered)})
            stats.map_id = new_map.map_id
        for fid in file_ids:
            ops.append({"op": "dead_vfile", "id": fid})
        eng.commit_edit(ops)
    except Exception:
        for meta in out_metas:
            eng.fm.delete(meta.name)
        if new_map is not None:
            eng.fm.delete(new_map.name)
        raise

    for meta in out_metas:
        vlog.files[meta.id] = meta
        vlog._flushed[meta.id] = meta.size
    if stats.map_id is not None:
        eng.maps.add(new_map)
    vlog.mark_dead(file_ids)
    stats.output_files = [m.id for m in out_metas]
    stats.elapsed_s = time.perf_counter() - t0
    return stats
