"""LSM-tree: memtable, sorted table files, leveled compaction.

Under key-value separation the tree stays small: separated entries hold a
value locator plus the key's feature bytes instead of the value itself.  The
L0->L1 compaction doubles as the feature-enrichment pass: for every surviving
L0 entry it looks up the previous version of the key below L0, measures the
completed lifetime, offers a training sample, and folds the interval into the
entry's stored features.

Entry convention used throughout: (key, seq, kind, val) where val is
  bytes                            inline value (small puts)
  (file_no, offset, size, feat)    separated value locator + encoded features
  None                             tombstone
"""
from __future__ import annotations

import heapq
import struct
from bisect import bisect_left, bisect_right
from collections import OrderedDict
from dataclasses import dataclass

from .core import (CodecError, DanglingLocator, KeyKind, MAX_SEQ, MAX_U64,
                   TruncatedInput, varint_decode, varint_encode)
from .features import FeatureBlock, feature_decode, merge_on_rewrite, feature_encode
from .fileio import FileManager

SST_MAGIC = 0x6C69666B5F737374  # "lifk_sst"
_FOOTER = struct.Struct("<QQQQQ")  # index_off, meta_off, entry_count, min_ref, magic
_SEQ = struct.Struct("<Q")
_OFF = struct.Struct("<I")

INLINE = 0
SEPARATED = 1


class Memtable:
    """In-memory write buffer: user_key -> versions ascending by sequence."""

    __slots__ = ("data", "bytes", "count", "max_seq")

    def __init__(self):
        self.data: dict[bytes, list] = {}
        self.bytes = 0
        self.count = 0
        self.max_seq = 0

    def add(self, key: bytes, seq: int, kind: int, value: bytes | None) -> None:
        versions = self.data.get(key)
        if versions is None:
            self.data[key] = versions = []
        versions.append((seq, kind, value))
        self.bytes += len(key) + (len(value) if value is not None else 0) + 24
        self.count += 1
        self.max_seq = seq

    def get(self, key: bytes, snap: int = MAX_SEQ):
        versions = self.data.get(key)
        if not versions:
            return None
        for entry in reversed(versions):
            if entry[0] <= snap:
                return entry
        return None

    def iter_entries(self):
        """Internal-key order: user key ascending, newest sequence first."""
        for key in sorted(self.data):
            for seq, kind, value in reversed(self.data[key]):
                yield key, seq, kind, value


@dataclass(frozen=True)
class TableMeta:
    id: int
    name: str
    min_key: bytes
    max_key: bytes
    entry_count: int
    file_size: int
    refs: frozenset[int]
    min_ref: int
    max_seq: int

    def contains(self, key: bytes) -> bool:
        return self.min_key <= key <= self.max_key


def encode_entry(key: bytes, seq: int, kind: int, val) -> bytes:
    out = bytearray(varint_encode(len(key)))
    out += key
    out += _SEQ.pack(seq)
    out.append(kind)
    if kind == KeyKind.PUT:
        if isinstance(val, bytes):
            out.append(INLINE)
            out += varint_encode(len(val))
            out += val
        else:
            file_no, offset, size, feat = val
            out.append(SEPARATED)
            out += varint_encode(file_no)
            out += varint_encode(offset)
            out += varint_encode(size)
            out += varint_encode(len(feat))
            out += feat
    return bytes(out)


def decode_entry(buf, pos: int):
    klen, n = varint_decode(buf, pos)
    pos += n
    key = bytes(buf[pos:pos + klen])
    if len(key) != klen:
        raise TruncatedInput("entry key cut short")
    pos += klen
    seq = _SEQ.unpack_from(buf, pos)[0]
    pos += 8
    kind = buf[pos]
    pos += 1
    if kind == KeyKind.DELETE:
        return key, seq, kind, None, pos
    vtag = buf[pos]
    pos += 1
    if vtag == INLINE:
        vlen, n = varint_decode(buf, pos)
        pos += n
        val = bytes(buf[pos:pos + vlen])
        if len(val) != vlen:
            raise TruncatedInput("entry value cut short")
        return key, seq, kind, val, pos + vlen
    file_no, n = varint_decode(buf, pos)
    pos += n
    offset, n = varint_decode(buf, pos)
    pos += n
    size, n = varint_decode(buf, pos)
    pos += n
    flen, n = varint_decode(buf, pos)
    pos += n
    feat = bytes(buf[pos:pos + flen])
    if len(feat) != flen:
        raise TruncatedInput("entry features cut short")
    return key, seq, kind, (file_no, offset, size, feat), pos + flen


def write_sstable(fm: FileManager, file_no: int, entries: list) -> TableMeta:
    """entries: already in internal-key order."""
    name = f"{file_no:06d}.sst"
    body = bytearray()
    offsets = []
    refs = set()
    max_seq = 0
    for key, seq, kind, val in entries:
        offsets.append(len(body))
        body += encode_entry(key, seq, kind, val)
        if kind == KeyKind.PUT and not isinstance(val, bytes):
            refs.add(val[0])
        if seq > max_seq:
            max_seq = seq
    index_off = len(body)
    for off in offsets:
        body += _OFF.pack(off)
    meta_off = len(body)
    body += varint_encode(len(refs))
    for r in sorted(refs):
        body += varint_encode(r)
    body += varint_encode(max_seq)
    min_ref = min(refs) if refs else MAX_U64
    body += _FOOTER.pack(index_off, meta_off, len(entries), min_ref, SST_MAGIC)
    fm.write_file(name, bytes(body), "sst")
    return TableMeta(id=file_no, name=name, min_key=entries[0][0],
                     max_key=entries[-1][0], entry_count=len(entries),
                     file_size=len(body), refs=frozenset(refs), min_ref=min_ref,
                     max_seq=max_seq)


def read_sstable(fm: FileManager, name: str):
    """Parse a table file into aligned (keys, entries) lists."""
    data = fm.read_bytes(name)
    if len(data) < _FOOTER.size:
        raise CodecError(f"{name}: too small")
    index_off, meta_off, count, _min_ref, magic = _FOOTER.unpack_from(
        data, len(data) - _FOOTER.size)
    if magic != SST_MAGIC:
        raise CodecError(f"{name}: bad magic")
    keys = []
    entries = []
    pos = 0
    for _ in range(count):
        key, seq, kind, val, pos = decode_entry(data, pos)
        keys.append(key)
        entries.append((seq, kind, val))
    if pos != index_off:
        raise CodecError(f"{name}: record region size mismatch")
    return keys, entries


def read_table_footer_meta(fm: FileManager, file_no: int) -> TableMeta:
    """Rebuild a TableMeta from the file alone (used by tooling/tests)."""
    name = f"{file_no:06d}.sst"
    data = fm.read_bytes(name)
    index_off, meta_off, count, min_ref, magic = _FOOTER.unpack_from(
        data, len(data) - _FOOTER.size)
    if magic != SST_MAGIC:
        raise CodecError(f"{name}: bad magic")
    pos = meta_off
    nrefs, n = varint_decode(data, pos)
    pos += n
    refs = set()
    for _ in range(nrefs):
        r, n = varint_decode(data, pos)
        pos += n
        refs.add(r)
    max_seq, _ = varint_decode(data, pos)
    first_off = _OFF.unpack_from(data, index_off)[0]
    key0, seq0, kind0, val0, _ = decode_entry(data, first_off)
    last_off = _OFF.unpack_from(data, index_off + (count - 1) * 4)[0]
    keyn, *_rest = decode_entry(data, last_off)
    return TableMeta(id=file_no, name=name, min_key=key0, max_key=keyn,
                     entry_count=count, file_size=len(data),
                     refs=frozenset(refs), min_ref=min_ref, max_seq=max_seq)


class TableCache:
    """LRU cache of parsed tables, bounded by an estimated byte budget."""

    def __init__(self, fm: FileManager, budget_bytes: int):
        self.fm = fm
        self.budget = budget_bytes
        self._cache: OrderedDict[int, tuple] = OrderedDict()
        self._bytes = 0

    def get(self, meta: TableMeta):
        hit = self._cache.get(meta.id)
        if hit is not None:
            self._cache.move_to_end(meta.id)
            return hit[0], hit[1]
        keys, entries = read_sstable(self.fm, meta.name)
        cost = meta.file_size * 2 + 64 * meta.entry_count
        self._cache[meta.id] = (keys, entries, cost)
        self._bytes += cost
        while self._bytes > self.budget and len(self._cache) > 1:
            _, (_k, _e, old_cost) = self._cache.popitem(last=False)
            self._bytes -= old_cost
        return keys, entries

    def evict(self, table_id: int) -> None:
        hit = self._cache.pop(table_id, None)
        if hit is not None:
            self._bytes -= hit[2]


def table_get(keys: list, entries: list, key: bytes, snap: int):
    """Newest version with seq <= snap inside one table, or None."""
    i = bisect_left(keys, key)
    n = len(keys)
    while i < n and keys[i] == key:
        entry = entries[i]
        if entry[0] <= snap:
            return entry
        i += 1
    return None


@dataclass
class CompactionJob:
    level: int              # input level (0 for the L0->L1 job)
    out_level: int
    inputs_upper: list[TableMeta]
    inputs_lower: list[TableMeta]
    enrich: bool

    def input_ids(self) -> set[int]:
        return {m.id for m in self.inputs_upper} | {m.id for m in self.inputs_lower}


class LsmTree:
    """Levels, read path, compaction.  File/manifest commits stay with the engine."""

    def __init__(self, fm: FileManager, cfg, resolve_locator=None):
        self.fm = fm
        self.cfg = cfg
        self.mem = Memtable()
        self.imm: list[Memtable] = []
        self.levels: list[list[TableMeta]] = [[] for _ in range(cfg.max_levels)]
        self._minkeys: list[list[bytes]] = [[] for _ in range(cfg.max_levels)]
        self.cache = TableCache(fm, cfg.table_cache_bytes)
        self.resolve_locator = resolve_locator
        self.write_count = 0
        self.stale_locators = 0
        self.max_feature_bytes = 1  # flush writes the 1-byte empty block

    # -- write/read path -------------------------------------------------

    def add(self, key: bytes, seq: int, kind: int, value: bytes | None) -> None:
        self.mem.add(key, seq, kind, value)
        self.write_count += 1

    def seal_memtable(self) -> Memtable | None:
        if self.mem.count == 0:
            return None
        sealed = self.mem
        self.imm.append(sealed)
        self.mem = Memtable()
        return sealed

    def drop_immutable(self, mem: Memtable) -> None:
        """Called once a sealed memtable's contents are durable in a table."""
        self.imm = [m for m in self.imm if m is not mem]

    def get(self, key: bytes, snap: int = MAX_SEQ):
        hit = self.mem.get(key, snap)
        if hit is not None:
            return hit
        for mt in reversed(self.imm):
            hit = mt.get(key, snap)
            if hit is not None:
                return hit
        return self.get_tables_only(key, snap)

    def get_tables_only(self, key: bytes, snap: int = MAX_SEQ,
                        exclude_ids: set[int] | None = None):
        for meta in self.levels[0]:
            if exclude_ids and meta.id in exclude_ids:
                continue
            if meta.contains(key):
                keys, entries = self.cache.get(meta)
                hit = table_get(keys, entries, key, snap)
                if hit is not None:
                    return hit
        for level in range(1, len(self.levels)):
            metas = self.levels[level]
            if not metas:
                continue
            i = bisect_right(self._minkeys[level], key) - 1
            if i >= 0 and metas[i].contains(key):
                if exclude_ids and metas[i].id in exclude_ids:
                    continue
                keys, entries = self.cache.get(metas[i])
                hit = table_get(keys, entries, key, snap)
                if hit is not None:
                    return hit
        return None

    # -- level maintenance ------------------------------------------------

    def level_bytes(self, level: int) -> int:
        return sum(m.file_size for m in self.levels[level])

    def level_target(self, level: int) -> int:
        return self.cfg.level1_target_bytes * self.cfg.level_fanout ** (level - 1)

    def apply_edit(self, add: list[tuple[int, TableMeta]], drop: set[int]) -> None:
        if drop:
            for level in range(len(self.levels)):
                self.levels[level] = [m for m in self.levels[level]
                                      if m.id not in drop]
            for tid in drop:
                self.cache.evict(tid)
        for level, meta in add:
            if level == 0:
                self.levels[0].insert(0, meta)  # newest first
            else:
                metas = self.levels[level]
                i = bisect_right([m.min_key for m in metas], meta.min_key)
                metas.insert(i, meta)
        for level in range(1, len(self.levels)):
            self._minkeys[level] = [m.min_key for m in self.levels[level]]

    def overlapping(self, level: int, min_key: bytes, max_key: bytes) -> list[TableMeta]:
        return [m for m in self.levels[level]
                if not (m.max_key < min_key or m.min_key > max_key)]

    def key_may_exist_below(self, key: bytes, level: int) -> bool:
        for lv in range(level + 1, len(self.levels)):
            metas = self.levels[lv]
            if not metas:
                continue
            i = bisect_right(self._minkeys[lv], key) - 1
            if i >= 0 and metas[i].contains(key):
                return True
        return False

    def pick_compaction(self) -> CompactionJob | None:
        l0 = self.levels[0]
        if len(l0) >= self.cfg.l0_compaction_trigger:
            min_key = min(m.min_key for m in l0)
            max_key = max(m.max_key for m in l0)
            return CompactionJob(level=0, out_level=1, inputs_upper=list(l0),
                                 inputs_lower=self.overlapping(1, min_key, max_key),
                                 enrich=True)
        for level in range(1, len(self.levels) - 1):
            metas = self.levels[level]
            if not metas or self.level_bytes(level) <= self.level_target(level):
                continue
            victim = min(metas, key=lambda m: m.id)  # oldest table first
            lower = self.overlapping(level + 1, victim.min_key, victim.max_key)
            return CompactionJob(level=level, out_level=level + 1,
                                 inputs_upper=[victim], inputs_lower=lower,
                                 enrich=False)
        return None

    # -- compaction -------------------------------------------------------

    def _merged_input(self, job: CompactionJob):
        def gen(meta: TableMeta, rank: int):
            keys, entries = self.cache.get(meta)
            for key, entry in zip(keys, entries):
                yield (key, MAX_U64 - entry[0], rank), entry
        # ranks are unique; upper-level inputs sort first on (key, seq) ties
        its = [gen(m, i) for i, m in enumerate(job.inputs_upper)]
        nu = len(its)
        its += [gen(m, nu + i) for i, m in enumerate(job.inputs_lower)]
        return heapq.merge(*its)

    def run_compaction(self, job: CompactionJob, alloc_file_no, sampler=None):
        """Merge inputs into new tables at job.out_level.

        sampler(old_block, lifetime) is invoked for each enriched entry's
        previous write.  Returns (new_metas, dropped_ids).  Files are written
        here; the caller commits the edit.
        """
        cfg = self.cfg
        resolve = self.resolve_locator
        l0_ids = {m.id for m in job.inputs_upper} if job.enrich else set()
        out_entries: list = []
        out_bytes = 0
        new_metas: list[TableMeta] = []

        def cut():
            nonlocal out_entries, out_bytes
            if out_entries:
                new_metas.append(write_sstable(self.fm, alloc_file_no(), out_entries))
                out_entries = []
                out_bytes = 0

        n_upper = len(job.inputs_upper)
        prev_key = None
        for (key, _negseq, rank), entry in self._merged_input(job):
            if key == prev_key:
                continue  # an older version (or duplicate) of the survivor
            prev_key = key
            seq, kind, val = entry
            origin_l0 = rank < n_upper
            if kind == KeyKind.DELETE:
                if not self.key_may_exist_below(key, job.out_level):
                    continue  # tombstone no longer shadows anything
            elif not isinstance(val, bytes):
                file_no, offset, size, feat = val
                if resolve is not None:
                    try:
                        file_no, offset, size = resolve((file_no, offset, size))
                    except DanglingLocator:
                        # stale entry: its record was collected as invalid, so
                        # a newer version shadows this one and a later merge
                        # will drop it; the locator is never followed
                        self.stale_locators += 1
                if job.enrich and origin_l0:
                    feat = self._enrich(key, seq, feat, l0_ids, sampler)
                val = (file_no, offset, size, feat)
            enc_len = len(key) + 20 + (
                len(val) if isinstance(val, bytes)
                else (len(val[3]) + 16) if val is not None else 0)
            out_entries.append((key, seq, kind, val))
            out_bytes += enc_len
            if out_bytes >= cfg.sst_target_bytes:
                cut()
        cut()
        return new_metas, job.input_ids()

    def _enrich(self, key: bytes, seq: int, feat: bytes, l0_ids: set[int],
                sampler) -> bytes:
        old = self.get_tables_only(key, snap=seq - 1, exclude_ids=l0_ids)
        if old is None or old[1] == KeyKind.DELETE:
            return feat
        old_seq, _old_kind, old_val = old
        lifetime = seq - old_seq
        if lifetime <= 0:
            return feat
        if isinstance(old_val, bytes):
            old_block = FeatureBlock(static_value_size=len(old_val))
        else:
            old_block, _ = feature_decode(old_val[3])
            old_block.static_value_size = old_val[2]
        if sampler is not None:
            sampler(old_block, lifetime)
        merged = merge_on_rewrite(old_block, lifetime)
        enc = feature_encode(merged, compact=self.cfg.compact_feature_encoding)
        if len(enc) > self.max_feature_bytes:
            self.max_feature_bytes = len(enc)
        return enc

    # -- iteration (scans, verification) ----------------------------------

    def iter_live(self, start: bytes | None = None, end: bytes | None = None):
        """Newest live (non-tombstone) version per key in [start, end)."""
        def mem_gen(mt: Memtable, rank: int):
            for key, seq, kind, value in mt.iter_entries():
                yield (key, MAX_U64 - seq, rank), (seq, kind, value)

        def table_gen(meta: TableMeta, rank: int):
            keys, entries = self.cache.get(meta)
            for key, entry in zip(keys, entries):
                yield (key, MAX_U64 - entry[0], rank), entry

        its = [mem_gen(self.mem, 0)]
        rank = 1
        for mt in reversed(self.imm):
            its.append(mem_gen(mt, rank))
            rank += 1
        for meta in self.levels[0]:
            its.append(table_gen(meta, rank))
            rank += 1
        for level in range(1, len(self.levels)):
            for meta in self.levels[level]:
                its.append(table_gen(meta, rank))
                rank += 1
        prev_key = None
        for (key, _ns, _rank), entry in heapq.merge(*its):
            if key == prev_key:
                continue
            prev_key = key
            if start is not None and key < start:
                continue
            if end is not None and key >= end:
                return
            if entry[1] == KeyKind.DELETE:
                continue
            yield key, entry
