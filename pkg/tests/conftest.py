import random

from lifekv.core import EngineConfig
from lifekv.engine import Engine
from lifekv.lifetime import LifetimeParams


def small_config(**kw) -> EngineConfig:
    """Tiny limits so flush/compaction/collection all fire within a test."""
    defaults = dict(
        memtable_bytes=16 << 10,
        value_file_bytes=32 << 10,
        min_separated_value_bytes=256,
        sst_target_bytes=8 << 10,
        level1_target_bytes=32 << 10,
        dataset_threshold=2000,
        seed=0,
        lifetime=LifetimeParams(initial_default_ttl=400),
    )
    defaults.update(kw)
    return EngineConfig(**defaults)


class ShadowRunner:
    """Drives an engine and an in-memory shadow map with the same random ops."""

    def __init__(self, path, cfg: EngineConfig, seed: int, key_count: int = 400,
                 separated_frac: float = 0.2):
        self.cfg = cfg
        self.eng = Engine(path, cfg)
        self.rnd = random.Random(seed)
        self.key_count = key_count
        self.separated_frac = separated_frac
        self.shadow: dict[bytes, bytes | None] = {}
        self.acked = 0

    def key(self) -> bytes:
        return b"user%06d" % self.rnd.randrange(self.key_count)

    def value(self, i: int) -> bytes:
        if self.rnd.random() < self.separated_frac:
            size = self.cfg.min_separated_value_bytes + self.rnd.randrange(1024)
        else:
            size = self.rnd.randrange(8, self.cfg.min_separated_value_bytes)
        stamp = b"%08d:" % i
        filler = bytes((i + j) & 0xFF for j in range(size))
        return (stamp + filler)[:max(size, len(stamp))]

    def step(self, i: int) -> None:
        key = self.key()
        if self.rnd.random() < 0.1:
            self.eng.delete(key)
            self.shadow[key] = None
        else:
            value = self.value(i)
            self.eng.put(key, value)
            self.shadow[key] = value
        self.acked += 1

    def run(self, ops: int) -> None:
        for i in range(ops):
            self.step(i)

    def verify(self, eng: Engine | None = None) -> None:
        eng = eng or self.eng
        for key, expect in self.shadow.items():
            got = eng.get(key)
            assert got == expect, (
                f"key {key!r}: engine={got!r} shadow={expect!r}")

    def verify_scan(self, eng: Engine | None = None) -> None:
        eng = eng or self.eng
        live = sorted((k, v) for k, v in self.shadow.items() if v is not None)
        got = list(eng.scan())
        assert got == live
