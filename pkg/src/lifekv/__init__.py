"""lifekv: an embedded LSM key-value store with key-value separation whose
garbage collector learns per-key lifetimes from write history and sorts
surviving values into TTL-classed value files."""

from .core import EngineConfig, InternalKey, KeyKind, ValueLocator
from .engine import Engine
from .lifetime import LifetimeParams, LifetimeThresholds
from .gbdt import GbdtParams

__all__ = ["Engine", "EngineConfig", "GbdtParams", "InternalKey", "KeyKind",
           "LifetimeParams", "LifetimeThresholds", "ValueLocator"]
__version__ = "0.1.0"
