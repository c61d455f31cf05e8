"""Workload generation, baseline collection policies, and benchmark runs.

Workloads are deterministic streams of put operations with keys drawn from a
scrambled zipfian (or uniform) distribution, YCSB style.  A run loads the
stream into a fresh engine under one policy and reports byte accounting,
write amplification, final on-disk size, and the threshold / collection-ratio
timelines needed for the adaptivity comparisons.
"""
from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .core import EngineConfig
from .engine import Engine

INLINE_THRESHOLD = 1 << 62  # effectively "never separate"


@dataclass
class WorkloadSpec:
    key_count: int
    op_count: int
    value_size: int = 4096
    distribution: str = "zipfian"  # "zipfian" or "uniform"
    theta: float = 0.99
    key_size: int = 24
    seed: int = 1

    def validate(self) -> None:
        if self.distribution not in ("zipfian", "uniform"):
            raise ValueError("distribution must be zipfian or uniform")
        if self.distribution == "zipfian" and not (0.0 <= self.theta < 1.0):
            raise ValueError("zipfian theta must be in [0, 1)")
        if min(self.key_count, self.op_count, self.value_size, self.key_size) <= 0:
            raise ValueError("workload sizes must be positive")


def _fnv1a64(x: np.ndarray) -> np.ndarray:
    """Vectorized FNV-1a over the 8 little-endian bytes of each value."""
    h = np.full(x.shape, 0xCBF29CE484222325, dtype=np.uint64)
    prime = np.uint64(0x100000001B3)
    v = x.astype(np.uint64)
    for shift in range(0, 64, 8):
        h = (h ^ ((v >> np.uint64(shift)) & np.uint64(0xFF))) * prime
    return h


class ZipfianGenerator:
    """Skewed-integer sampling with the standard rejection-free formula.

    Ranks are scrambled through FNV so popular keys spread over the keyspace.
    """

    def __init__(self, n: int, theta: float):
        self.n = n
        self.theta = theta
        ranks = np.arange(1, n + 1, dtype=np.float64)
        self.zetan = float(np.sum(ranks ** -theta))
        self.zeta2 = 1.0 + 0.5 ** theta
        self.alpha = 1.0 / (1.0 - theta) if theta != 1.0 else 1.0
        self.eta = ((1.0 - (2.0 / n) ** (1.0 - theta))
                    / (1.0 - self.zeta2 / self.zetan))

    def top_rank_mass(self) -> float:
        return 1.0 / self.zetan

    def draw_ranks(self, rng: np.random.Generator, m: int) -> np.ndarray:
        u = rng.random(m)
        uz = u * self.zetan
        ranks = np.floor(self.n * (self.eta * u - self.eta + 1.0) ** self.alpha)
        ranks = np.where(uz < 1.0, 0.0, ranks)
        ranks = np.where((uz >= 1.0) & (uz < self.zeta2), 1.0, ranks)
        return np.clip(ranks, 0, self.n - 1).astype(np.int64)


def gen_workload(spec: WorkloadSpec, chunk: int = 65536):
    """Yield (key_bytes, value_bytes) deterministically from the spec."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    zipf = ZipfianGenerator(spec.key_count, spec.theta) \
        if spec.distribution == "zipfian" else None
    template = bytes((i * 131 + 17) & 0xFF for i in range(spec.value_size + 16))
    remaining = spec.op_count
    op = 0
    width = max(spec.key_size - 4, 1)
    while remaining > 0:
        m = min(chunk, remaining)
        if zipf is not None:
            ranks = zipf.draw_ranks(rng, m)
            keys = _fnv1a64(ranks) % np.uint64(spec.key_count)
        else:
            keys = rng.integers(0, spec.key_count, m, dtype=np.int64)
        for k in keys:
            key = (b"key:" + str(int(k)).zfill(width))[:spec.key_size]
            # stamp the op number so rewrites change the value bytes
            header = op.to_bytes(8, "little") + int(k).to_bytes(8, "little")
            value = (header + template)[:spec.value_size]
            yield key, value
            op += 1
        remaining -= m


def key_frequencies(spec: WorkloadSpec) -> dict[bytes, int]:
    counts: dict[bytes, int] = {}
    for key, _value in gen_workload(spec):
        counts[key] = counts.get(key, 0) + 1
    return counts


@dataclass
class GcPolicy:
    """Which collection policy a bench run exercises."""

    name: str  # "learned", "nomodel", "ratio", "inline"
    ratio_threshold: float = 0.2
    sample_n: int = 64

    @classmethod
    def parse(cls, text: str) -> "GcPolicy":
        if text in ("learned", "nomodel", "inline"):
            return cls(text)
        if text.startswith("ratio:"):
            return cls("ratio", ratio_threshold=float(text.split(":", 1)[1]))
        raise ValueError(f"unknown policy {text!r}")

    def apply(self, cfg: EngineConfig) -> None:
        if self.name == "learned":
            cfg.gc_classify = "model"
            cfg.gc_trigger = "ttl"
        elif self.name == "nomodel":
            cfg.gc_classify = "long"
            cfg.gc_trigger = "ttl"
        elif self.name == "ratio":
            cfg.gc_classify = "long"
            cfg.gc_trigger = "ratio"
            cfg.gc_ratio_trigger = self.ratio_threshold
            cfg.gc_estimate_samples = self.sample_n
        elif self.name == "inline":
            cfg.min_separated_value_bytes = INLINE_THRESHOLD
        else:
            raise ValueError(f"unknown policy {self.name!r}")


def desk_config(op_count: int, seed: int = 0, wal: bool = False) -> EngineConfig:
    """Desk-scale defaults: 8MB memtables, 32MB value files, 4KB values."""
    cfg = EngineConfig(seed=seed, wal_enabled=wal)
    cfg.lifetime.initial_default_ttl = max(1000, op_count // 5)
    return cfg


@dataclass
class BenchReport:
    policy: str
    workload: dict
    ops: int
    elapsed_s: float
    throughput_ops_s: float
    logical_bytes_written: int
    total_bytes_written: int
    bytes_by_kind: dict
    write_amplification: float
    final_total_size: int
    final_lsm_size: int
    final_value_size: int
    training_count: int
    mean_model_call_us: float
    model_file_bytes: int
    max_feature_bytes: int
    gc_jobs: int
    gc_scanned: int
    gc_invalid: int
    per_class_gc: dict
    resolve_max_chain: int
    threshold_timeline: list = field(default_factory=list)
    gc_timeline: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, default=str)

    def byte_fields(self) -> dict:
        """Deterministic subset (excludes wall-clock numbers)."""
        return {k: v for k, v in self.__dict__.items()
                if k not in ("elapsed_s", "throughput_ops_s")}


def run_bench(cfg: EngineConfig, spec: WorkloadSpec, policy: GcPolicy,
              dirpath: str, out_path: str | None = None,
              progress: bool = False) -> BenchReport:
    """Stream the workload into a fresh engine directory under one policy."""
    if os.path.exists(dirpath) and os.listdir(dirpath):
        raise ValueError(f"bench directory {dirpath} is not empty")
    policy.apply(cfg)
    eng = Engine(dirpath, cfg)
    t0 = time.perf_counter()
    done = 0
    for key, value in gen_workload(spec):
        eng.put(key, value)
        done += 1
        if progress and done % 200_000 == 0:
            print(f"  {policy.name}: {done}/{spec.op_count} ops, "
                  f"{eng.fm.stats.total_bytes >> 20} MiB written", flush=True)
    eng.flush()
    elapsed = time.perf_counter() - t0
    report = _build_report(eng, spec, policy, elapsed)
    eng.close()
    if out_path:
        write_report(report, out_path)
    return report


def _build_report(eng: Engine, spec: WorkloadSpec, policy: GcPolicy,
                  elapsed: float) -> BenchReport:
    io = eng.fm.stats
    sizes = eng.live_file_bytes()
    m = eng.metrics
    model_bytes = 0
    if eng.model_version:
        model_bytes = eng.fm.file_size(f"MODEL-{eng.model_version:06d}.txt")
    mean_call_us = (m.model_call_seconds / m.model_calls * 1e6
                    if m.model_calls else 0.0)
    logical = m.logical_bytes_written
    return BenchReport(
        policy=policy.name,
        workload=spec.__dict__.copy(),
        ops=spec.op_count,
        elapsed_s=elapsed,
        throughput_ops_s=spec.op_count / elapsed if elapsed else 0.0,
        logical_bytes_written=logical,
        total_bytes_written=io.total_bytes,
        bytes_by_kind=io.snapshot(),
        write_amplification=io.total_bytes / logical if logical else 0.0,
        final_total_size=sizes["total"],
        final_lsm_size=sizes["sst"],
        final_value_size=sizes["vlog"],
        training_count=m.trainings,
        mean_model_call_us=mean_call_us,
        model_file_bytes=model_bytes,
        max_feature_bytes=eng.lsm.max_feature_bytes,
        gc_jobs=m.gc_jobs,
        gc_scanned=m.gc_scanned,
        gc_invalid=m.gc_invalid,
        per_class_gc={str(k): list(v) for k, v in m.per_class_gc.items()},
        resolve_max_chain=eng.maps.max_chain,
        threshold_timeline=[list(row) for row in m.threshold_timeline],
        gc_timeline=list(m.gc_timeline),
    )


def write_report(report: BenchReport, out_path: str) -> None:
    with open(out_path, "w") as f:
        f.write(report.to_json())
    csv_path = os.path.splitext(out_path)[0] + ".csv"
    write_timeline_csv(report, csv_path)


def write_timeline_csv(report: BenchReport, csv_path: str) -> None:
    """One row per (collection job, input class): seq, TTLs, class, ratio."""
    thresholds = report.threshold_timeline
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seq", "l_d", "l_s", "l_l", "class", "gc_invalid_ratio"])
        ti = 0
        current = thresholds[0] if thresholds else (0, 0, 0, 0)
        for row in report.gc_timeline:
            while ti + 1 < len(thresholds) and thresholds[ti + 1][0] <= row["seq"]:
                ti += 1
                current = thresholds[ti]
            w.writerow([row["seq"], current[1], current[2], current[3],
                        row["class"], f"{row['invalid_ratio']:.4f}"])


def steady_state_mean(timeline: list, index: int, tail_frac: float = 0.25) -> float:
    """Mean of one threshold column over the trailing fraction of the run."""
    if not timeline:
        return 0.0
    tail = timeline[int(len(timeline) * (1.0 - tail_frac)):] or timeline[-1:]
    return float(sum(row[index] for row in tail)) / len(tail)


def class_invalid_ratio(report: BenchReport, klass: int) -> float | None:
    row = report.per_class_gc.get(str(klass))
    if not row or row[0] == 0:
        return None
    return row[1] / row[0]
