import random

import pytest

from lifekv.core import EngineConfig, KeyKind, MAX_SEQ
from lifekv.features import EMPTY_FEATURES, feature_decode
from lifekv.fileio import FileManager
from lifekv.lsm import (LsmTree, Memtable, read_table_footer_meta,
                        table_get, write_sstable)


def make_tree(tmp_path, **kw):
    cfg = EngineConfig(**kw)
    return LsmTree(FileManager(str(tmp_path)), cfg)


def entry_inline(key, seq, value):
    return (key, seq, KeyKind.PUT, value)


def entry_sep(key, seq, file_no, off, size, feat=EMPTY_FEATURES):
    return (key, seq, KeyKind.PUT, (file_no, off, size, feat))


def test_memtable_versions_and_snapshots():
    mt = Memtable()
    mt.add(b"a", 1, KeyKind.PUT, b"v1")
    mt.add(b"a", 5, KeyKind.PUT, b"v5")
    mt.add(b"a", 9, KeyKind.DELETE, None)
    assert mt.get(b"a")[0] == 9
    assert mt.get(b"a", snap=6) == (5, KeyKind.PUT, b"v5")
    assert mt.get(b"a", snap=1) == (1, KeyKind.PUT, b"v1")
    assert mt.get(b"b") is None
    ordered = list(mt.iter_entries())
    assert [e[1] for e in ordered] == [9, 5, 1]


def test_memtable_size_tracking():
    mt = Memtable()
    for i in range(100):
        mt.add(b"k%03d" % i, i + 1, KeyKind.PUT, b"x" * 10)
    assert mt.count == 100
    assert mt.bytes == 100 * (4 + 10 + 24)


def test_sstable_round_trip(tmp_path):
    fm = FileManager(str(tmp_path))
    entries = [
        (b"a", 3, KeyKind.PUT, b"small"),
        (b"b", 7, KeyKind.PUT, (4, 1024, 512, EMPTY_FEATURES)),
        (b"b", 2, KeyKind.DELETE, None),
        (b"c", 5, KeyKind.PUT, b""),
    ]
    meta = write_sstable(fm, 12, entries)
    assert meta.min_key == b"a" and meta.max_key == b"c"
    assert meta.refs == frozenset({4})
    assert meta.min_ref == 4
    assert meta.max_seq == 7
    from lifekv.lsm import read_sstable
    keys, parsed = read_sstable(fm, meta.name)
    assert keys == [b"a", b"b", b"b", b"c"]
    assert parsed[1] == (7, KeyKind.PUT, (4, 1024, 512, EMPTY_FEATURES))
    assert parsed[2] == (2, KeyKind.DELETE, None)
    footer_meta = read_table_footer_meta(fm, 12)
    assert footer_meta.refs == meta.refs
    assert footer_meta.min_key == meta.min_key
    assert footer_meta.max_seq == meta.max_seq


def test_table_get_snapshot_semantics(tmp_path):
    fm = FileManager(str(tmp_path))
    entries = [(b"k", 9, KeyKind.PUT, b"new"), (b"k", 4, KeyKind.PUT, b"old")]
    meta = write_sstable(fm, 1, entries)
    from lifekv.lsm import read_sstable
    keys, parsed = read_sstable(fm, meta.name)
    assert table_get(keys, parsed, b"k", MAX_SEQ)[2] == b"new"
    assert table_get(keys, parsed, b"k", 8)[2] == b"old"
    assert table_get(keys, parsed, b"k", 3) is None
    assert table_get(keys, parsed, b"zzz", MAX_SEQ) is None


def seal_and_flush(tree, alloc):
    """Flush every version straight into an L0 table (values inline)."""
    sealed = tree.seal_memtable()
    if sealed is None:
        return None
    entries = list(sealed.iter_entries())
    meta = write_sstable(tree.fm, alloc(), entries)
    tree.apply_edit([(0, meta)], set())
    tree.drop_immutable(sealed)
    return meta


def test_get_precedence_memtable_over_tables(tmp_path):
    tree = make_tree(tmp_path)
    counter = iter(range(1, 100))
    alloc = lambda: next(counter)
    tree.add(b"k", 1, KeyKind.PUT, b"old")
    seal_and_flush(tree, alloc)
    tree.add(b"k", 2, KeyKind.PUT, b"new")
    assert tree.get(b"k")[2] == b"new"
    seal_and_flush(tree, alloc)
    assert tree.get(b"k")[2] == b"new"  # newest-first across L0 tables


def test_tombstone_wins(tmp_path):
    tree = make_tree(tmp_path)
    tree.add(b"k", 1, KeyKind.PUT, b"v")
    tree.add(b"k", 2, KeyKind.DELETE, None)
    hit = tree.get(b"k")
    assert hit[1] == KeyKind.DELETE


def test_pick_compaction_l0_trigger(tmp_path):
    tree = make_tree(tmp_path, l0_compaction_trigger=4)
    counter = iter(range(1, 100))
    alloc = lambda: next(counter)
    seq = 0
    for _ in range(3):
        seq += 1
        tree.add(b"k%d" % seq, seq, KeyKind.PUT, b"v")
        seal_and_flush(tree, alloc)
    assert tree.pick_compaction() is None
    seq += 1
    tree.add(b"k%d" % seq, seq, KeyKind.PUT, b"v")
    seal_and_flush(tree, alloc)
    job = tree.pick_compaction()
    assert job is not None and job.level == 0 and job.enrich
    assert len(job.inputs_upper) == 4


def test_pick_compaction_size_trigger(tmp_path):
    tree = make_tree(tmp_path, level1_target_bytes=1000, level_fanout=10)
    fm = tree.fm
    counter = iter(range(1, 100))
    # two small L1 tables exceeding the 1000-byte target
    for start in (0, 50):
        entries = [(b"k%03d" % (start + i), start + i + 1, KeyKind.PUT,
                    b"x" * 40) for i in range(20)]
        meta = write_sstable(fm, next(counter), entries)
        tree.apply_edit([(1, meta)], set())
    job = tree.pick_compaction()
    assert job is not None
    assert job.level == 1 and job.out_level == 2 and not job.enrich
    assert len(job.inputs_upper) == 1
    assert job.inputs_upper[0].id == 1  # oldest table is the victim


def run_full_compaction(tree, alloc):
    while True:
        job = tree.pick_compaction()
        if job is None:
            return
        metas, dropped = tree.run_compaction(job, alloc)
        tree.apply_edit([(job.out_level, m) for m in metas], dropped)


def test_compaction_preserves_reads(tmp_path):
    tree = make_tree(tmp_path, l0_compaction_trigger=2, sst_target_bytes=512)
    counter = iter(range(1, 1000))
    alloc = lambda: next(counter)
    rnd = random.Random(5)
    shadow = {}
    seq = 0
    for _ in range(30):
        for _ in range(40):
            seq += 1
            k = b"key%02d" % rnd.randrange(60)
            if rnd.random() < 0.15:
                tree.add(k, seq, KeyKind.DELETE, None)
                shadow[k] = None
            else:
                v = b"val%06d" % seq
                tree.add(k, seq, KeyKind.PUT, v)
                shadow[k] = v
        seal_and_flush(tree, alloc)
        run_full_compaction(tree, alloc)
    for k, v in shadow.items():
        hit = tree.get(k)
        if v is None:
            assert hit is None or hit[1] == KeyKind.DELETE
        else:
            assert hit is not None and hit[2] == v
    # levels >= 1 stay disjoint
    for level in range(1, len(tree.levels)):
        metas = tree.levels[level]
        for a, b in zip(metas, metas[1:]):
            assert a.max_key < b.min_key


def test_enrichment_lifetime_and_features(tmp_path):
    tree = make_tree(tmp_path, l0_compaction_trigger=1)
    counter = iter(range(1, 100))
    alloc = lambda: next(counter)
    # older version lives in L1 (as if previously compacted)
    old = [entry_sep(b"k", 100, 1, 0, 64)]
    meta = write_sstable(tree.fm, alloc(), old)
    tree.apply_edit([(2, meta)], set())
    # new version arrives via L0
    tree.add(b"k", 150, KeyKind.PUT, (2, 0, 64, EMPTY_FEATURES))
    sealed = tree.seal_memtable()
    l0 = write_sstable(tree.fm, alloc(), list(sealed.iter_entries()))
    tree.apply_edit([(0, l0)], set())
    tree.drop_immutable(sealed)
    samples = []
    job = tree.pick_compaction()
    metas, dropped = tree.run_compaction(
        job, alloc, sampler=lambda block, life: samples.append((block, life)))
    tree.apply_edit([(1, m) for m in metas], dropped)
    assert samples and samples[0][1] == 50
    hit = tree.get(b"k")
    block, _ = feature_decode(hit[2][3])
    assert block.deltas == [50]
    assert block.edwcs == [1.0] * 10


def test_enrichment_caps_history(tmp_path):
    tree = make_tree(tmp_path, l0_compaction_trigger=1)
    counter = iter(range(1, 300))
    alloc = lambda: next(counter)
    seq = 0
    for round_no in range(40):
        seq += 10
        tree.add(b"k", seq, KeyKind.PUT, (round_no + 1, 0, 64, EMPTY_FEATURES))
        sealed = tree.seal_memtable()
        l0 = write_sstable(tree.fm, alloc(), list(sealed.iter_entries()))
        tree.apply_edit([(0, l0)], set())
        tree.drop_immutable(sealed)
        run_full_compaction(tree, alloc)
    hit = tree.get(b"k")
    block, _ = feature_decode(hit[2][3])
    assert len(block.deltas) == 32
    assert all(d == 10 for d in block.deltas)


def test_tombstones_persist_until_bottom(tmp_path):
    from lifekv.lsm import CompactionJob
    tree = make_tree(tmp_path, l0_compaction_trigger=1)
    counter = iter(range(1, 100))
    alloc = lambda: next(counter)
    # an old put sits deep in the tree
    deep = write_sstable(tree.fm, alloc(), [entry_inline(b"k", 1, b"v")])
    tree.apply_edit([(3, deep)], set())
    # the delete arrives and compacts L0 -> L1
    tree.add(b"k", 2, KeyKind.DELETE, None)
    seal_and_flush(tree, alloc)
    run_full_compaction(tree, alloc)
    l1 = tree.levels[1]
    assert l1 and l1[0].entry_count == 1  # tombstone kept: it still shadows L3
    assert tree.get(b"k")[1] == KeyKind.DELETE
    # push the tombstone down; merging with the put at the bottom drops both
    job = CompactionJob(level=1, out_level=2, inputs_upper=list(l1),
                        inputs_lower=[], enrich=False)
    metas, dropped = tree.run_compaction(job, alloc)
    tree.apply_edit([(2, m) for m in metas], dropped)
    assert tree.levels[2][0].entry_count == 1  # still shadowing
    job = CompactionJob(level=2, out_level=3, inputs_upper=list(tree.levels[2]),
                        inputs_lower=list(tree.levels[3]), enrich=False)
    metas, dropped = tree.run_compaction(job, alloc)
    tree.apply_edit([(3, m) for m in metas], dropped)
    assert sum(m.entry_count for lv in tree.levels for m in lv) == 0
    assert tree.get(b"k") is None


def test_compaction_canonicalizes_locators(tmp_path):
    cfg = EngineConfig(l0_compaction_trigger=1)
    fm = FileManager(str(tmp_path))
    remap = {(9, 0): (20, 4096, 64)}
    tree = LsmTree(fm, cfg,
                   resolve_locator=lambda loc: remap.get((loc[0], loc[1]), loc))
    counter = iter(range(1, 100))
    alloc = lambda: next(counter)
    tree.add(b"k", 5, KeyKind.PUT, (9, 0, 64, EMPTY_FEATURES))
    sealed = tree.seal_memtable()
    l0 = write_sstable(fm, alloc(), list(sealed.iter_entries()))
    tree.apply_edit([(0, l0)], set())
    tree.drop_immutable(sealed)
    job = tree.pick_compaction()
    metas, dropped = tree.run_compaction(job, alloc)
    tree.apply_edit([(1, m) for m in metas], dropped)
    hit = tree.get(b"k")
    assert hit[2][:3] == (20, 4096, 64)
    assert metas[0].refs == frozenset({20})
