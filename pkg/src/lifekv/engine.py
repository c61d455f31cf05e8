"""Public storage engine: write path, reads, crash recovery, maintenance.

Directory layout: CURRENT names the live MANIFEST; tables are *.sst, value
files *.vlog, index maps *.vmap, write-ahead logs *.wal, and the latest
trained model MODEL-<version>.txt.  Every file-set change is one crc-framed
manifest edit (a JSON list of ops written in a single append), so replay
either sees a whole edit or none of it.  Maintenance runs synchronously from
maintenance_tick in priority order: flush, compaction, collection, training,
threshold recomputation.
"""
from __future__ import annotations

import json
import struct
import threading
import time
import zlib

from .core import CorruptManifest, EngineConfig, KeyKind
from .features import EMPTY_FEATURES
from .fileio import FileManager
from .gbdt import DegenerateDataset, model_load, model_save, train
from .learn import (DatasetBuilder, SampleQueue, SampleSource, TrainingSample,
                    compaction_sample_probability)
from .lifetime import (GcRatioTracker, LifetimeHistogram, compute_thresholds,
                       initial_thresholds)
from .lsm import LsmTree, Memtable, TableMeta, write_sstable
from .vlog import (FileClass, FileState, MapRegistry, ValueFileMeta, ValueLog,
                   decode_map, run_gc)

import random

_FRAME = struct.Struct("<II")  # length, crc32


class Manifest:
    """Append-only edit log; one frame per edit, each a JSON op list."""

    def __init__(self, fm: FileManager, name: str):
        self.fm = fm
        self.name = name
        self._fh = fm.open_append(name, "manifest")
        self._lock = threading.Lock()

    def append_edit(self, ops: list[dict]) -> None:
        payload = json.dumps(ops, separators=(",", ":")).encode()
        frame = _FRAME.pack(len(payload), zlib.crc32(payload) & 0xFFFFFFFF) + payload
        with self._lock:
            self._fh.write(frame)

    def close(self) -> None:
        self._fh.close()

    @staticmethod
    def replay(fm: FileManager, name: str) -> list[list[dict]]:
        data = fm.read_bytes(name)
        edits = []
        pos = 0
        n = len(data)
        while pos < n:
            if pos + _FRAME.size > n:
                break  # torn tail: tolerated
            ln, crc = _FRAME.unpack_from(data, pos)
            end = pos + _FRAME.size + ln
            if end > n:
                break  # torn tail
            payload = data[pos + _FRAME.size:end]
            if zlib.crc32(payload) & 0xFFFFFFFF != crc:
                if end == n:
                    break  # torn final write
                raise CorruptManifest(f"bad crc at offset {pos} of {name}")
            edits.append(json.loads(payload))
            pos = end
        return edits


_WAL_FRAME = struct.Struct("<II")


def _wal_record(seq: int, kind: int, key: bytes, value: bytes | None) -> bytes:
    from .core import varint_encode
    payload = bytearray(struct.pack("<QB", seq, kind))
    payload += varint_encode(len(key))
    payload += key
    v = value if value is not None else b""
    payload += varint_encode(len(v))
    payload += v
    return _WAL_FRAME.pack(len(payload), zlib.crc32(bytes(payload)) & 0xFFFFFFFF) + bytes(payload)


def _wal_replay(data: bytes):
    from .core import varint_decode
    pos = 0
    n = len(data)
    while pos < n:
        if pos + _WAL_FRAME.size > n:
            return
        ln, crc = _WAL_FRAME.unpack_from(data, pos)
        end = pos + _WAL_FRAME.size + ln
        if end > n:
            return
        payload = data[pos + _WAL_FRAME.size:end]
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            return  # torn tail
        seq, kind = struct.unpack_from("<QB", payload, 0)
        p = 9
        klen, c = varint_decode(payload, p)
        p += c
        key = bytes(payload[p:p + klen])
        p += klen
        vlen, c = varint_decode(payload, p)
        p += c
        value = bytes(payload[p:p + vlen])
        yield seq, kind, key, (value if kind == KeyKind.PUT else None)
        pos = end


class EngineMetrics:
    def __init__(self):
        self.logical_bytes_written = 0
        self.puts = 0
        self.deletes = 0
        self.gets = 0
        self.flushes = 0
        self.compactions = 0
        self.gc_jobs = 0
        self.gc_scanned = 0
        self.gc_invalid = 0
        self.gc_bytes_relocated = 0
        self.per_class_gc: dict[int, list[int]] = {}  # class -> [scanned, invalid]
        self.trainings = 0
        self.training_seconds = 0.0
        self.degenerate_datasets = 0
        self.model_calls = 0
        self.model_call_seconds = 0.0
        self.gc_timeline: list[dict] = []
        self.threshold_timeline: list[tuple[int, int, int, int]] = []

    def snapshot(self) -> dict:
        d = {k: v for k, v in self.__dict__.items()
             if not k.endswith("timeline") and k != "per_class_gc"}
        d["per_class_gc"] = {str(k): list(v) for k, v in self.per_class_gc.items()}
        return d


class Engine:
    """One logical writer, any number of readers; background work runs
    synchronously inside maintenance_tick (deterministic for a given seed)."""

    @classmethod
    def open(cls, path: str, cfg: EngineConfig | None = None,
             auto_maintenance: bool = True) -> "Engine":
        return cls(path, cfg, auto_maintenance)

    def __init__(self, path: str, cfg: EngineConfig | None = None,
                 auto_maintenance: bool = True):
        cfg = cfg or EngineConfig()
        cfg.validate()
        self.cfg = cfg
        self.path = path
        self.auto_maintenance = auto_maintenance
        self.fm = FileManager(path)
        self.metrics = EngineMetrics()
        self.rng = random.Random(cfg.seed)
        self.seq = 0
        self.flushed_seq = 0
        self.next_file_no = 1
        self.closed = False

        self.tracker = GcRatioTracker(cfg.lifetime.ratio_ewma_weight)
        self.h_short = LifetimeHistogram()
        self.h_long = LifetimeHistogram()
        self.thresholds = initial_thresholds(cfg.lifetime)
        self.compaction_queue = SampleQueue(cfg.sample_queue_capacity)
        self.gc_queue = SampleQueue(cfg.sample_queue_capacity)
        self.builder = DatasetBuilder(self.compaction_queue, self.gc_queue,
                                      self.h_short, cfg.dataset_threshold,
                                      cfg.gc_label_literal)
        self._consumer_batches = 0
        self.model = None
        self.model_version = 0
        self._train_thread: threading.Thread | None = None

        self.maps = MapRegistry()
        self.vlog = ValueLog(self.fm, cfg)
        self.lsm = LsmTree(self.fm, cfg,
                           resolve_locator=lambda loc: self.maps.resolve(
                               loc, self.vlog.is_dead))
        self._pending_flush: list[tuple[Memtable, str | None]] = []
        self._wal = None
        self._wal_name: str | None = None
        self._last_estimate: dict[int, int] = {}

        self._recover()
        self._record_thresholds()

    # ------------------------------------------------------------------
    # recovery

    def _recover(self) -> None:
        fm = self.fm
        fresh = not fm.exists("CURRENT")
        if fresh:
            manifest_name = "MANIFEST-000001"
            fm.write_file(manifest_name, b"", "manifest")
            fm.write_file("CURRENT", manifest_name.encode(), "manifest")
            edits: list[list[dict]] = []
        else:
            manifest_name = fm.read_bytes("CURRENT").decode().strip()
            edits = Manifest.replay(fm, manifest_name)

        tables: dict[int, dict] = {}
        vfiles: dict[int, dict] = {}
        dead: set[int] = set()
        map_ops: dict[int, list[int]] = {}
        thresholds_op = None
        model_version = 0
        checkpoint = 0
        max_id = 0
        for edit in edits:
            for op in edit:
                kind = op["op"]
                oid = op.get("id", 0)
                if oid > max_id:
                    max_id = oid
                if kind == "add_table":
                    tables[oid] = op
                elif kind == "drop_table":
                    tables.pop(oid, None)
                elif kind == "add_vfile":
                    vfiles[oid] = dict(op, size=0, count=0, sealed=False)
                elif kind == "seal_vfile":
                    if oid in vfiles:
                        vfiles[oid].update(size=op["size"], count=op["count"],
                                           sealed=True)
                elif kind == "dead_vfile":
                    vfiles.pop(oid, None)
                    dead.add(oid)
                elif kind == "add_map":
                    map_ops[oid] = op["covered"]
                elif kind == "drop_map":
                    map_ops.pop(oid, None)
                elif kind == "thresholds":
                    thresholds_op = op
                elif kind == "model_version":
                    model_version = op["version"]
                elif kind == "seq_checkpoint":
                    checkpoint = max(checkpoint, op["seq"])

        live_names = {"CURRENT", manifest_name}
        # tables
        adds = []
        for oid, op in sorted(tables.items()):
            meta = TableMeta(id=oid, name=f"{oid:06d}.sst",
                             min_key=bytes.fromhex(op["min"]),
                             max_key=bytes.fromhex(op["max"]),
                             entry_count=op["count"], file_size=op["size"],
                             refs=frozenset(op["refs"]), min_ref=op["min_ref"],
                             max_seq=op["max_seq"])
            if not fm.exists(meta.name):
                raise CorruptManifest(f"live table {meta.name} missing on disk")
            adds.append((op["level"], meta))
        self.lsm.apply_edit(adds, set())
        live_names |= {m.name for _, m in adds}

        # value files
        self.vlog.dead_ids = dead
        for oid, op in sorted(vfiles.items()):
            meta = ValueFileMeta(id=oid, klass=FileClass(op["class"]),
                                 created_seq=op["created_seq"], ttl=op["ttl"],
                                 state=FileState.SEALED if op["sealed"] else FileState.OPEN,
                                 size=op["size"], count=op["count"])
            if not fm.exists(meta.name):
                raise CorruptManifest(f"live value file {meta.name} missing on disk")
            self.vlog.register(meta)
            if meta.state == FileState.OPEN:
                self.vlog.scan_recover(oid)
                if meta.size >= self.cfg.value_file_bytes:
                    self.vlog.seal(oid)
            live_names.add(meta.name)

        # index maps
        for oid in sorted(map_ops):
            name = f"{oid:06d}.vmap"
            m = decode_map(oid, fm.read_bytes(name))
            self.maps.add(m)
            live_names.add(name)

        if thresholds_op is not None:
            from .lifetime import LifetimeThresholds
            self.thresholds = LifetimeThresholds(
                thresholds_op["d"], thresholds_op["s"], thresholds_op["l"],
                thresholds_op["si"], thresholds_op["li"])

        if model_version:
            name = f"MODEL-{model_version:06d}.txt"
            self.model = model_load(fm.path(name))
            self.model_version = model_version
            live_names.add(name)

        # delete orphans from interrupted jobs
        wal_numbers = []
        for fname in fm.listdir():
            if fname in live_names:
                continue
            if fname.endswith(".wal"):
                wal_numbers.append(int(fname.split(".")[0]))
                continue
            if fname.endswith((".sst", ".vlog", ".vmap")) or fname.startswith("MODEL-"):
                fm.delete(fname)

        self.seq = max(checkpoint,
                       max((m.max_seq for _, m in adds), default=0))
        self.flushed_seq = self.seq
        self.next_file_no = max(max_id, *(wal_numbers or [0])) + 1

        # WAL replay into a fresh memtable (skip already-flushed sequences)
        replayed = 0
        for no in sorted(wal_numbers):
            data = fm.read_bytes(f"{no:06d}.wal")
            for seq, kind, key, value in _wal_replay(data):
                if seq <= checkpoint:
                    continue
                self.lsm.add(key, seq, kind, value)
                if seq > self.seq:
                    self.seq = seq
                replayed += 1
        if self.cfg.wal_enabled:
            self._open_wal()
            if replayed:
                # re-log in sequence order; replay feeds the memtable oldest
                # version first
                records = []
                for key, versions in self.lsm.mem.data.items():
                    for seq, kind, value in versions:
                        records.append((seq, kind, key, value))
                records.sort(key=lambda r: r[0])
                out = bytearray()
                for seq, kind, key, value in records:
                    out += _wal_record(seq, kind, key, value)
                self._wal.write(bytes(out))
        for no in sorted(wal_numbers):
            fm.delete(f"{no:06d}.wal")
        if not self.cfg.wal_enabled and replayed:
            # no durable home for replayed entries: flush them right away
            sealed = self.lsm.seal_memtable()
            if sealed is not None:
                self._pending_flush.append((sealed, None))
                self._flush_one()

    def _open_wal(self) -> None:
        no = self.alloc_file_no()
        self._wal_name = f"{no:06d}.wal"
        self.fm.write_file(self._wal_name, b"", "wal")
        self._wal = self.fm.open_append(self._wal_name, "wal")

    # ------------------------------------------------------------------
    # plumbing

    def alloc_file_no(self) -> int:
        no = self.next_file_no
        self.next_file_no += 1
        return no

    def commit_edit(self, ops: list[dict]) -> None:
        pending = self.vlog.pending_ops
        if pending:
            ops = pending + ops
            self.vlog.pending_ops = []
        if ops:
            self.manifest.append_edit(ops)

    @property
    def manifest(self) -> Manifest:
        if getattr(self, "_manifest", None) is None:
            manifest_name = self.fm.read_bytes("CURRENT").decode().strip()
            self._manifest = Manifest(self.fm, manifest_name)
        return self._manifest

    def gc_lookup(self, key: bytes):
        """Validity lookup for collection: restricted to durable state when
        the WAL is off (a memtable-only newer version could vanish in a crash
        and must not cause the durable copy to be dropped)."""
        if self.cfg.wal_enabled:
            return self.lsm.get(key)
        return self.lsm.get_tables_only(key)

    # ------------------------------------------------------------------
    # public API

    def put(self, key: bytes, value: bytes) -> None:
        self._write(key, value, KeyKind.PUT)
        self.metrics.puts += 1

    def delete(self, key: bytes) -> None:
        self._write(key, None, KeyKind.DELETE)
        self.metrics.deletes += 1

    def _write(self, key: bytes, value: bytes | None, kind: int) -> None:
        if self.closed:
            raise RuntimeError("engine is closed")
        seq = self.seq + 1
        if self._wal is not None:
            self._wal.write(_wal_record(seq, kind, key, value))
        self.seq = seq
        self.lsm.add(key, seq, kind, value)
        self.metrics.logical_bytes_written += len(key) + (len(value) if value else 0)
        if self.lsm.mem.bytes >= self.cfg.memtable_bytes:
            self._seal_memtable()
            if self.auto_maintenance:
                self.maintenance_tick()

    def get(self, key: bytes) -> bytes | None:
        self.metrics.gets += 1
        hit = self.lsm.get(key)
        if hit is None or hit[1] == KeyKind.DELETE:
            return None
        val = hit[2]
        if isinstance(val, bytes):
            return val
        loc = self.maps.resolve((val[0], val[1], val[2]), self.vlog.is_dead)
        _key, _seq, value = self.vlog.read(loc)
        return value

    def scan(self, start: bytes | None = None, end: bytes | None = None):
        """Newest live version per key in [start, end), in key order."""
        for key, entry in self.lsm.iter_live(start, end):
            val = entry[2]
            if isinstance(val, bytes):
                yield key, val
            else:
                loc = self.maps.resolve((val[0], val[1], val[2]), self.vlog.is_dead)
                yield key, self.vlog.read(loc)[2]

    def flush(self) -> None:
        """Seal the active memtable and run maintenance until quiescent."""
        self._seal_memtable()
        self.maintenance_tick()

    def close(self) -> None:
        if self.closed:
            return
        if self._train_thread is not None:
            self._train_thread.join()
        if not self.cfg.wal_enabled and self.lsm.mem.count:
            self.flush()
        self.vlog.sync()
        self.commit_edit([])  # flush any pending vlog ops
        if self._wal is not None:
            self._wal.close()
        if getattr(self, "_manifest", None) is not None:
            self._manifest.close()
        self.closed = True

    # ------------------------------------------------------------------
    # maintenance

    def _seal_memtable(self) -> None:
        sealed = self.lsm.seal_memtable()
        if sealed is None:
            return
        self._pending_flush.append((sealed, self._wal_name))
        if self._wal is not None:
            self._wal.close()
            self._open_wal()

    def maintenance_tick(self) -> list[str]:
        """Run due jobs in priority order until nothing is pending."""
        jobs: list[str] = []
        check_expiry = True
        while True:
            if self._pending_flush:
                self._flush_one()
                jobs.append("flush")
                check_expiry = True
                continue
            job = self.lsm.pick_compaction()
            if job is not None:
                self._run_compaction(job)
                jobs.append(f"compact-L{job.level}")
                check_expiry = True
                continue
            if check_expiry:
                check_expiry = False
                cands = self._gc_candidates()
                if cands:
                    self._run_gc(cands)
                    jobs.append("gc")
                    check_expiry = True
                    continue
            break
        if len(self.compaction_queue) or len(self.gc_queue):
            self.builder.drain_and_label(self.thresholds)
            self._consumer_batches += 1
            if self._consumer_batches % self.cfg.consumer_batches_per_recompute == 0:
                self._recompute_thresholds()
        ds = self.builder.try_build()
        if ds is not None and self.cfg.gc_classify == "model":
            self._train(ds)
            jobs.append("train")
        return jobs

    def _flush_one(self) -> None:
        mem, wal_name = self._pending_flush.pop(0)
        if mem.count == 0:
            self.lsm.drop_immutable(mem)
            if wal_name:
                self.fm.delete(wal_name)
            return
        cfg = self.cfg
        entries = []
        for key, seq, kind, value in mem.iter_entries():
            if kind == KeyKind.PUT and len(value) >= cfg.min_separated_value_bytes:
                loc = self.vlog.append(FileClass.DEFAULT, key, seq, value,
                                       ttl=self.thresholds.default_ttl,
                                       created_seq=self.seq,
                                       alloc_file_no=self.alloc_file_no)
                entries.append((key, seq, kind, (loc[0], loc[1], loc[2],
                                                 EMPTY_FEATURES)))
            else:
                entries.append((key, seq, kind, value))
        self.vlog.sync()
        meta = write_sstable(self.fm, self.alloc_file_no(), entries)
        self.commit_edit([_add_table_op(meta, 0),
                          {"op": "seq_checkpoint", "seq": mem.max_seq}])
        self.lsm.apply_edit([(0, meta)], set())
        self.lsm.drop_immutable(mem)
        self.flushed_seq = max(self.flushed_seq, mem.max_seq)
        if wal_name:
            self.fm.delete(wal_name)
        self.metrics.flushes += 1

    def _run_compaction(self, job) -> None:
        thresholds = self.thresholds
        rng = self.rng
        queue = self.compaction_queue

        def sampler(old_block, lifetime):
            p = compaction_sample_probability(old_block.edwcs,
                                              thresholds.short_idx,
                                              thresholds.long_idx)
            if p >= 1.0 or rng.random() < p:
                queue.offer(TrainingSample(SampleSource.COMPACTION, old_block,
                                           lifetime))

        new_metas, drop_ids = self.lsm.run_compaction(
            job, self.alloc_file_no, sampler if job.enrich else None)
        ops = [_add_table_op(m, job.out_level) for m in new_metas]
        ops += [{"op": "drop_table", "id": tid} for tid in sorted(drop_ids)]
        self.commit_edit(ops)
        self.lsm.apply_edit([(job.out_level, m) for m in new_metas], drop_ids)
        self.metrics.compactions += 1
        self._retire_maps()

    def _gc_candidates(self) -> list[int]:
        cfg = self.cfg
        if cfg.gc_trigger == "ttl":
            return self.vlog.expired(self.seq)[:cfg.gc_max_files_per_job]
        # ratio-triggered baseline: estimate garbage in sealed files
        cands = []
        for fid, meta in sorted(self.vlog.files.items()):
            if meta.state != FileState.SEALED:
                continue
            last = self._last_estimate.get(fid, -1 << 60)
            if self.seq - last < cfg.gc_estimate_interval:
                continue
            self._last_estimate[fid] = self.seq
            ratio = self.estimate_garbage(fid, cfg.gc_estimate_samples)
            if ratio >= cfg.gc_ratio_trigger:
                cands.append(fid)
                if len(cands) >= cfg.gc_max_files_per_job:
                    break
        return cands

    def estimate_garbage(self, file_no: int, sample_n: int) -> float:
        """Validity-check a uniform sample of records; return invalid fraction."""
        records = list(self.vlog.iter_records(file_no))
        if not records:
            return 0.0
        if len(records) > sample_n:
            records = self.rng.sample(records, sample_n)
        invalid = 0
        for _off, _size, key, seq, _value in records:
            hit = self.gc_lookup(key)
            if hit is None or hit[1] != KeyKind.PUT or hit[0] != seq:
                invalid += 1
        return invalid / len(records)

    def _run_gc(self, file_ids: list[int]) -> None:
        stats = run_gc(self, file_ids)
        m = self.metrics
        m.gc_jobs += 1
        m.gc_scanned += stats.scanned
        m.gc_invalid += stats.invalid
        m.gc_bytes_relocated += sum(stats.bytes_relocated.values())
        for klass, (scanned, invalid) in stats.per_class.items():
            tot = m.per_class_gc.setdefault(klass, [0, 0])
            tot[0] += scanned
            tot[1] += invalid
            m.gc_timeline.append({
                "seq": self.seq, "class": int(klass), "scanned": scanned,
                "invalid": invalid,
                "invalid_ratio": invalid / scanned if scanned else 0.0})
        if stats.scanned:
            self.tracker.update(stats.invalid, stats.scanned)
        self._recompute_thresholds()
        self._retire_maps()

    def _retire_maps(self) -> None:
        if not self.maps.maps:
            return
        live_refs: set[int] = set()
        for level in self.lsm.levels:
            for meta in level:
                live_refs |= meta.refs
        drop = self.maps.retire(live_refs, self.vlog.is_dead)
        if not drop:
            return
        self.commit_edit([{"op": "drop_map", "id": mid} for mid in sorted(drop)])
        for mid in drop:
            m = self.maps.drop(mid)
            if m is not None:
                self.fm.delete(m.name)

    def _recompute_thresholds(self) -> None:
        new = compute_thresholds(self.h_short, self.h_long,
                                 self.tracker.invalid_ratio, self.cfg.lifetime)
        if new == self.thresholds:
            return
        self.thresholds = new
        self.commit_edit([{"op": "thresholds", "d": new.default_ttl,
                           "s": new.short_ttl, "l": new.long_ttl,
                           "si": new.short_idx, "li": new.long_idx}])
        self._record_thresholds()

    def _record_thresholds(self) -> None:
        t = self.thresholds
        self.metrics.threshold_timeline.append(
            (self.seq, t.default_ttl, t.short_ttl, t.long_ttl))

    def _train(self, dataset) -> None:
        if self._train_thread is not None:
            self._train_thread.join()
            self._train_thread = None
        if self.cfg.train_async:
            t = threading.Thread(target=self._train_now, args=(dataset,),
                                 daemon=True)
            self._train_thread = t
            t.start()
        else:
            self._train_now(dataset)

    def _train_now(self, dataset) -> None:
        t0 = time.perf_counter()
        version = self.model_version + 1
        try:
            model = train(dataset.X, dataset.y, self.cfg.gbdt, version=version,
                          trained_at_seq=self.seq)
        except DegenerateDataset:
            self.metrics.degenerate_datasets += 1
            return
        name = f"MODEL-{version:06d}.txt"
        data = model_save(model, self.fm.path(name))
        self.fm.record_external_write("model", len(data))
        old_name = f"MODEL-{self.model_version:06d}.txt" if self.model_version else None
        self.commit_edit([{"op": "model_version", "version": version}])
        self.model = model
        self.model_version = version
        if old_name:
            self.fm.delete(old_name)
        if self.cfg.dataset_dump_dir:
            from .learn import dump_dataset_csv
            import os
            dump_dataset_csv(dataset, os.path.join(self.cfg.dataset_dump_dir,
                                                   f"dataset-{version:06d}.csv"))
        self.metrics.trainings += 1
        self.metrics.training_seconds += time.perf_counter() - t0

    # ------------------------------------------------------------------
    # introspection

    def live_file_bytes(self) -> dict[str, int]:
        sizes = {"sst": 0, "vlog": 0, "vmap": 0, "model": 0, "wal": 0,
                 "manifest": 0}
        for fname in self.fm.listdir():
            size = self.fm.file_size(fname)
            if fname.endswith(".sst"):
                sizes["sst"] += size
            elif fname.endswith(".vlog"):
                sizes["vlog"] += size
            elif fname.endswith(".vmap"):
                sizes["vmap"] += size
            elif fname.endswith(".wal"):
                sizes["wal"] += size
            elif fname.startswith("MODEL-"):
                sizes["model"] += size
            else:
                sizes["manifest"] += size
        sizes["total"] = sum(sizes.values())
        return sizes

    def stats(self) -> dict:
        t = self.thresholds
        return {
            "seq": self.seq,
            "levels": [len(lv) for lv in self.lsm.levels],
            "lsm_bytes": sum(m.file_size for lv in self.lsm.levels for m in lv),
            "value_files": len(self.vlog.files),
            "value_bytes": self.vlog.total_bytes(),
            "index_maps": len(self.maps.maps),
            "dead_files": len(self.vlog.dead_ids),
            "thresholds": {"default": t.default_ttl, "short": t.short_ttl,
                           "long": t.long_ttl, "short_idx": t.short_idx,
                           "long_idx": t.long_idx},
            "gc_invalid_ratio_ewma": self.tracker.invalid_ratio,
            "model_version": self.model_version,
            "resolve_max_chain": self.maps.max_chain,
            "io": self.fm.stats.snapshot(),
            "metrics": self.metrics.snapshot(),
            "max_feature_bytes": self.lsm.max_feature_bytes,
        }


def _add_table_op(meta: TableMeta, level: int) -> dict:
    return {"op": "add_table", "id": meta.id, "level": level,
            "min": meta.min_key.hex(), "max": meta.max_key.hex(),
            "count": meta.entry_count, "size": meta.file_size,
            "refs": sorted(meta.refs), "min_ref": meta.min_ref,
            "max_seq": meta.max_seq}
