"""Training-sample collection, labelling and dataset assembly.

Compaction and garbage collection feed two bounded queues.  A consumer drains
them, records lifetimes into the distribution histograms, labels each sample
against the current TTL thresholds and pools the labelled rows until enough
accumulate for a training run.  Queue producers never block: a full queue
drops the new sample and bumps a counter.
"""
from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .features import FEATURE_SLOTS, FeatureBlock, build_feature_vector
from .lifetime import LifetimeHistogram, LifetimeThresholds


class SampleSource(IntEnum):
    COMPACTION = 0
    GC = 1


@dataclass
class TrainingSample:
    source: SampleSource
    block: FeatureBlock
    observed_lifetime: int  # ground truth (compaction) or elapsed age (gc)


class SampleQueue:
    """Bounded MPSC queue; overflow drops the incoming sample."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: deque[TrainingSample] = deque()
        self._lock = threading.Lock()
        self.dropped = 0

    def __len__(self) -> int:
        return len(self._items)

    def offer(self, sample: TrainingSample) -> bool:
        with self._lock:
            if len(self._items) >= self.capacity:
                self.dropped += 1
                return False
            self._items.append(sample)
            return True

    def drain(self) -> list[TrainingSample]:
        with self._lock:
            items = list(self._items)
            self._items.clear()
        return items


def compaction_sample_probability(edwcs: list[float], s_idx: int, l_idx: int) -> float:
    """Admission probability for compaction samples: short-window count over
    long-window count.  Frequently written keys (large short-window counts are
    capped at the long window's) are admitted less often; with no frequency
    signal at all everything is admitted."""
    denom = edwcs[l_idx] if edwcs else 0.0
    if denom == 0.0:
        return 1.0
    p = edwcs[s_idx] / denom
    return min(max(p, 0.0), 1.0)


def label_compaction_sample(lifetime: int, default_ttl: int, short_ttl: int) -> int | None:
    """Ground-truth label; None excludes lifetimes the first collection
    reclaims anyway."""
    if lifetime <= default_ttl:
        return None
    return 1 if lifetime - default_ttl > short_ttl else 0


def label_gc_sample(block: FeatureBlock, s_idx: int, literal: bool = False) -> int:
    """Heuristic label for still-valid keys seen during collection.

    Keys written only once are assumed long-lived.  Otherwise a short-window
    count that has decayed to <= 1 write means the key went inactive (long
    remaining lifetime); `literal` flips the comparison.
    """
    if not block.deltas:
        return 1
    active = block.edwcs[s_idx] > 1.0
    if literal:
        return 1 if active else 0
    return 0 if active else 1


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    compaction_rows: int
    gc_rows: int

    def __len__(self) -> int:
        return int(self.y.shape[0])


class DatasetBuilder:
    """Drains the two queues, labels rows, and emits balanced datasets.

    Pools keep at most `threshold` freshest labelled rows per source; a build
    fires once the pooled total reaches `threshold`, taking at most
    `threshold // 2` rows from each source.
    """

    def __init__(self, compaction_queue: SampleQueue, gc_queue: SampleQueue,
                 h_short: LifetimeHistogram, threshold: int,
                 gc_label_literal: bool = False):
        self.compaction_queue = compaction_queue
        self.gc_queue = gc_queue
        self.h_short = h_short
        self.threshold = threshold
        self.gc_label_literal = gc_label_literal
        self._pools: tuple[deque, deque] = (deque(maxlen=threshold),
                                            deque(maxlen=threshold))
        self.labelled = 0
        self.excluded = 0

    def pool_sizes(self) -> tuple[int, int]:
        return len(self._pools[0]), len(self._pools[1])

    def drain_and_label(self, thresholds: LifetimeThresholds) -> None:
        for sample in self.compaction_queue.drain():
            self.h_short.record(sample.observed_lifetime)
            label = label_compaction_sample(sample.observed_lifetime,
                                            thresholds.default_ttl,
                                            thresholds.short_ttl)
            if label is None:
                self.excluded += 1
                continue
            vec = build_feature_vector(sample.block)
            self._pools[SampleSource.COMPACTION].append((vec, label))
            self.labelled += 1
        for sample in self.gc_queue.drain():
            label = label_gc_sample(sample.block, thresholds.short_idx,
                                    self.gc_label_literal)
            vec = build_feature_vector(sample.block)
            self._pools[SampleSource.GC].append((vec, label))
            self.labelled += 1

    def try_build(self) -> Dataset | None:
        comp, gc = self._pools
        if len(comp) + len(gc) < self.threshold:
            return None
        cap = self.threshold // 2
        n_comp = min(len(comp), cap)
        n_gc = min(len(gc), cap)
        if n_comp + n_gc == 0:
            return None
        rows: list[list[float]] = []
        labels: list[int] = []
        for pool, take in ((comp, n_comp), (gc, n_gc)):
            for _ in range(take):
                vec, label = pool.popleft()
                rows.append(vec)
                labels.append(label)
        X = np.array(rows, dtype=np.float32).reshape(len(rows), FEATURE_SLOTS)
        y = np.array(labels, dtype=np.uint8)
        return Dataset(X=X, y=y, compaction_rows=n_comp, gc_rows=n_gc)

    def build(self, thresholds: LifetimeThresholds) -> Dataset | None:
        """One consumer batch: drain, label, and emit a dataset when ready."""
        self.drain_and_label(thresholds)
        return self.try_build()


def dump_dataset_csv(dataset: Dataset, path: str) -> None:
    """Debug dump: one row per sample, empty cells for missing features."""
    with open(path, "w") as f:
        f.write(",".join(f"f{i}" for i in range(FEATURE_SLOTS)) + ",label\n")
        for row, label in zip(dataset.X, dataset.y):
            cells = ["" if np.isnan(v) else repr(float(v)) for v in row]
            f.write(",".join(cells) + f",{int(label)}\n")
