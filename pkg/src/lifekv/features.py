"""Per-key write-history features and their on-disk encoding.

Each separated key carries up to 32 past write intervals ("deltas", newest
first) and 10 exponentially decayed write counters.  Counter i halves every
2^(19+i) sequence units, so low windows see only recent activity while high
windows remember long-term popularity.  The block is stored verbatim inside
the LSM value part and re-read at compaction and garbage-collection time.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

from .core import CodecError, TruncatedInput, varint_decode, varint_encode
from .lifetime import EDWC_COUNT, EDWC_WINDOW_BASE

MAX_DELTAS = 32
FEATURE_SLOTS = 43  # 32 delta buckets + 10 counters + value size
SIZE_SLOT = 42
BUCKET_UNIT_BITS = 20  # first delta bucket covers [0, 2^20)

_F32 = struct.Struct("<f")
_F32x10 = struct.Struct("<10f")
_MISSING = float("nan")


class TooManyDeltas(CodecError):
    pass


class BadDeltaCount(CodecError):
    pass


def _f32(x: float) -> float:
    """Quantize to IEEE-754 single precision (the stored width)."""
    return _F32.unpack(_F32.pack(x))[0]


@dataclass
class FeatureBlock:
    """Write-history features as stored with a separated LSM entry.

    edwcs is exactly 10 entries when the key has at least one past write
    (deltas nonempty) and empty otherwise.  static_value_size is transient
    context (the associated value record's byte length), never serialized.
    """

    deltas: list[int] = field(default_factory=list)
    edwcs: list[float] = field(default_factory=list)
    static_value_size: int = 0


def edwc_update_on_write(edwcs: list[float], delta0: int) -> list[float]:
    """Apply an arriving write: counter_i = 1 + counter_i * 2^(-delta0 / 2^(19+i))."""
    out = []
    for i in range(EDWC_COUNT):
        factor = 2.0 ** (-delta0 / (1 << (EDWC_WINDOW_BASE + i)))
        out.append(_f32(1.0 + edwcs[i] * factor))
    return out


def edwc_decay(edwcs: list[float], elapsed: int, write_bonus: bool = False) -> list[float]:
    """Age counters by `elapsed` sequence units without a new write.

    write_bonus restores the additive +1 of the write-update rule for callers
    that want the literal refresh-at-read behaviour.
    """
    bonus = 1.0 if write_bonus else 0.0
    out = []
    for i in range(EDWC_COUNT):
        factor = 2.0 ** (-elapsed / (1 << (EDWC_WINDOW_BASE + i)))
        out.append(_f32(bonus + edwcs[i] * factor))
    return out


def delta_bucket(delta: int) -> int:
    """Map an interval onto exponentially growing buckets (2^20, 2^21, ...)."""
    if delta < (1 << BUCKET_UNIT_BITS):
        return 0
    b = (delta >> BUCKET_UNIT_BITS).bit_length()  # floor(log2(delta/unit)) + 1
    return min(b, 63)


def feature_encode(block: FeatureBlock, compact: bool = False) -> bytes:
    """Serialize: [count u8][deltas][10 counters f32le, iff count >= 1].

    Fixed mode stores deltas as 8-byte little-endian words (1/49/57/65/.../297
    bytes for 0/1/2/3/../32 past writes); compact mode uses varints.
    """
    count = len(block.deltas)
    if count > MAX_DELTAS:
        raise TooManyDeltas(f"{count} deltas exceeds {MAX_DELTAS}")
    out = bytearray()
    out.append(count)
    if compact:
        for d in block.deltas:
            out += varint_encode(d)
    elif count:
        out += struct.pack(f"<{count}Q", *block.deltas)
    if count:
        out += _F32x10.pack(*block.edwcs)
    return bytes(out)


def feature_decode(buf, pos: int = 0, compact: bool = False) -> tuple[FeatureBlock, int]:
    """Inverse of feature_encode; bit-exact on counter floats."""
    if pos >= len(buf):
        raise TruncatedInput("empty feature block")
    count = buf[pos]
    if count > MAX_DELTAS:
        raise BadDeltaCount(f"delta count {count} exceeds {MAX_DELTAS}")
    consumed = 1
    deltas: list[int] = []
    if compact:
        for _ in range(count):
            v, n = varint_decode(buf, pos + consumed)
            deltas.append(v)
            consumed += n
    elif count:
        end = pos + consumed + 8 * count
        if end > len(buf):
            raise TruncatedInput("feature deltas cut short")
        deltas = list(struct.unpack_from(f"<{count}Q", buf, pos + consumed))
        consumed += 8 * count
    edwcs: list[float] = []
    if count:
        if pos + consumed + 40 > len(buf):
            raise TruncatedInput("feature counters cut short")
        edwcs = list(_F32x10.unpack_from(buf, pos + consumed))
        consumed += 40
    return FeatureBlock(deltas=deltas, edwcs=edwcs), consumed


EMPTY_FEATURES = feature_encode(FeatureBlock())


def fixed_encoded_size(delta_count: int) -> int:
    return 1 + 8 * delta_count + (40 if delta_count else 0)


def merge_on_rewrite(old: FeatureBlock, lifetime: int) -> FeatureBlock:
    """Fold a completed write interval into the history kept for the new write.

    The newest interval is prepended (oldest beyond 32 dropped) and every
    counter absorbs the write through the update rule.
    """
    deltas = [lifetime] + old.deltas
    if len(deltas) > MAX_DELTAS:
        deltas = deltas[:MAX_DELTAS]
    edwcs = old.edwcs if old.edwcs else [0.0] * EDWC_COUNT
    return FeatureBlock(deltas=deltas,
                        edwcs=edwc_update_on_write(edwcs, lifetime),
                        static_value_size=old.static_value_size)


def build_feature_vector(block: FeatureBlock, elapsed: int = 0,
                         write_bonus: bool = False) -> list[float]:
    """Dense 43-slot vector with NaN marking missing entries.

    Slots 0-31: bucketed intervals (missing past writes stay NaN).
    Slots 32-41: counters decayed by `elapsed`; NaN when the key has none.
    Slot 42: log2-scaled value size, always present.
    """
    vec = [_MISSING] * FEATURE_SLOTS
    for i, d in enumerate(block.deltas):
        vec[i] = float(delta_bucket(d))
    if block.edwcs:
        decayed = (edwc_decay(block.edwcs, elapsed, write_bonus)
                   if elapsed or write_bonus else block.edwcs)
        for i in range(EDWC_COUNT):
            vec[32 + i] = decayed[i]
    vec[SIZE_SLOT] = float(math.floor(math.log2(block.static_value_size + 1)))
    return vec
