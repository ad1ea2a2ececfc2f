"""Domain types, configuration and deterministic block generation.

Everything here is immutable after construction and safe to hand between
worker threads. ``gen_block`` is a pure function of its arguments.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Iterator, Mapping, Sequence

import numpy as np

from ._kernels import digest64
from .errors import CorruptBlockError, InvalidConfigurationError, InvalidInputError


class TransportKind(str, Enum):
    """How a block travels from a producer to a consumer.

    ``channel`` and ``tcp`` are message paths (in-process bounded channel,
    localhost socket stream); ``file`` stages blocks through a directory.
    """

    CHANNEL = "channel"
    FILE = "file"
    TCP = "tcp"


@dataclass(frozen=True, order=True)
class BlockId:
    """Identifier of one fine-grain block: (producer index, sequence)."""

    producer_index: int
    sequence: int

    def __post_init__(self):
        if self.producer_index < 0 or self.sequence < 0:
            raise InvalidInputError(f"block id components must be >= 0: {self}")

    def __str__(self) -> str:
        return f"({self.producer_index},{self.sequence})"


@dataclass(frozen=True)
class BlockPayload:
    """One block's bytes plus its 64-bit digest."""

    id: BlockId
    data: bytes
    checksum: int

    @classmethod
    def wrap(cls, block_id: BlockId, data: bytes) -> "BlockPayload":
        return cls(block_id, data, digest64(data))

    @property
    def size(self) -> int:
        return len(self.data)

    def verify(self) -> "BlockPayload":
        """Recompute the digest, raising CorruptBlockError on mismatch."""
        actual = digest64(self.data)
        if actual != self.checksum:
            raise CorruptBlockError(
                f"block {self.id}: checksum {actual:#018x} != recorded {self.checksum:#018x}")
        return self


@dataclass(frozen=True)
class StageTimes:
    """Per-block durations (seconds) for the four pipeline stages."""

    t_comp: float
    t_o: float
    t_i: float
    t_analy: float

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if not math.isfinite(value) or value < 0:
                raise InvalidInputError(f"{name} must be finite and >= 0, got {value}")

    def as_tuple(self) -> tuple:
        return (self.t_comp, self.t_o, self.t_i, self.t_analy)

    def as_dict(self) -> dict:
        return {"t_comp": self.t_comp, "t_o": self.t_o,
                "t_i": self.t_i, "t_analy": self.t_analy}

    def scaled(self, k: float) -> "StageTimes":
        return StageTimes(*(v * k for v in self.as_tuple()))


class Clock:
    """Process-wide monotonic time source; readings are seconds since creation.

    All reported durations are differences of ``now()`` readings, so
    wall-clock adjustments cannot corrupt measurements.
    """

    def __init__(self):
        self._origin = time.perf_counter()

    def now(self) -> float:
        return time.perf_counter() - self._origin


def sleep_for(seconds: float) -> None:
    """Sleep at least ``seconds`` against the monotonic clock.

    Re-sleeps on early wakeup so the elapsed time never undershoots; sleeping
    (rather than spinning) keeps many concurrent timed workers from fighting
    over cores they do not need.
    """
    if seconds <= 0:
        return
    deadline = time.perf_counter() + seconds
    while True:
        remaining = deadline - time.perf_counter()
        if remaining <= 0:
            return
        time.sleep(remaining)


def blocks_count(total_data: int, block_size: int) -> int:
    """Number of fine-grain blocks covering ``total_data`` bytes: ceil(D/B)."""
    if block_size < 1:
        raise InvalidConfigurationError(f"block_size must be >= 1, got {block_size}")
    if total_data < 0:
        raise InvalidInputError(f"total_data must be >= 0, got {total_data}")
    return -(-total_data // block_size)


def gen_block(seed: int, block_id: BlockId, block_size: int) -> BlockPayload:
    """Deterministic pseudo-random block: same (seed, id, size) -> same bytes."""
    if block_size < 1:
        raise InvalidConfigurationError(f"block_size must be >= 1, got {block_size}")
    ss = np.random.SeedSequence(
        [seed & 0xFFFFFFFFFFFFFFFF, block_id.producer_index, block_id.sequence])
    data = np.random.Generator(np.random.PCG64(ss)).bytes(block_size)
    return BlockPayload.wrap(block_id, data)


def owned_range(producers: int, consumers: int, consumer_index: int) -> range:
    """Producer indices owned by one consumer under the static mapping."""
    lo = consumer_index * producers // consumers
    hi = (consumer_index + 1) * producers // consumers
    return range(lo, hi)


def static_mapping(producers: int, consumers: int) -> dict:
    """Contiguous-range partition of producer indices across consumers.

    Consumer q owns producers [q*P//Q, (q+1)*P//Q); when Q > P the trailing
    consumers own nothing.
    """
    if producers < 1 or consumers < 1:
        raise InvalidConfigurationError("producers and consumers must be >= 1")
    return {q: list(owned_range(producers, consumers, q)) for q in range(consumers)}


def owner_of(producers: int, consumers: int, producer_index: int) -> int:
    """Consumer index owning a producer under the static mapping."""
    if not 0 <= producer_index < producers:
        raise InvalidInputError(f"producer index {producer_index} out of range")
    q = producer_index * consumers // producers
    while producer_index >= (q + 1) * producers // consumers:
        q += 1
    while producer_index < q * producers // consumers:
        q -= 1
    return q


def producer_block_counts(n_blocks: int, producers: int) -> list:
    """Balanced split of ``n_blocks`` across producers (first ones get the remainder)."""
    if producers < 1:
        raise InvalidConfigurationError("producers must be >= 1")
    base, extra = divmod(n_blocks, producers)
    return [base + (1 if p < extra else 0) for p in range(producers)]


def consumption_order(owned: Sequence[int], counts: Mapping[int, int]) -> Iterator[BlockId]:
    """Expected analysis-side consumption order for a consumer.

    Ascending sequence within each owned producer, round-robin across owned
    producers: (p0,0), (p1,0), (p0,1), (p1,1), ...
    """
    s = 0
    remaining = True
    while remaining:
        remaining = False
        for p in owned:
            if s < counts[p]:
                remaining = True
                yield BlockId(p, s)
        s += 1


@dataclass(frozen=True)
class SyntheticWorkloadSpec:
    """Compute stage generates blocks; analysis sums sqrt of bytes ``iters`` times."""

    iters: int = 1
    kind: str = field(default="synthetic", init=False, repr=False)

    def __post_init__(self):
        if self.iters < 1:
            raise InvalidConfigurationError(f"iters must be >= 1, got {self.iters}")

    def to_dict(self) -> dict:
        return {"kind": "synthetic", "iters": self.iters}


@dataclass(frozen=True)
class SleepWorkloadSpec:
    """Every stage costs a configured duration per block (timing-controlled runs)."""

    times: StageTimes
    kind: str = field(default="sleep", init=False, repr=False)

    def to_dict(self) -> dict:
        return {"kind": "sleep", **self.times.as_dict()}


def workload_from_dict(obj: Mapping) -> object:
    if not isinstance(obj, Mapping):
        raise InvalidConfigurationError("workload must be an object")
    kind = obj.get("kind")
    if kind == "synthetic":
        unknown = set(obj) - {"kind", "iters"}
        if unknown:
            raise InvalidConfigurationError(f"unknown workload keys: {sorted(unknown)}")
        return SyntheticWorkloadSpec(iters=int(obj.get("iters", 1)))
    if kind == "sleep":
        unknown = set(obj) - {"kind", "t_comp", "t_o", "t_i", "t_analy"}
        if unknown:
            raise InvalidConfigurationError(f"unknown workload keys: {sorted(unknown)}")
        try:
            times = StageTimes(float(obj["t_comp"]), float(obj["t_o"]),
                               float(obj["t_i"]), float(obj["t_analy"]))
        except KeyError as exc:
            raise InvalidConfigurationError(f"sleep workload missing key {exc}") from exc
        return SleepWorkloadSpec(times)
    raise InvalidConfigurationError(f"workload kind must be synthetic or sleep, got {kind!r}")


@dataclass(frozen=True)
class PipelineConfig:
    """Full description of one pipeline run."""

    producers: int
    consumers: int
    total_data: int
    block_size: int
    transport: TransportKind = TransportKind.CHANNEL
    producer_ring_capacity: int = 16
    consumer_ring_capacity: int = 16
    prefetch_depth: int = 8
    workload: object = field(default_factory=SyntheticWorkloadSpec)
    data_dir: str = ""
    seed: int = 1

    def __post_init__(self):
        if self.producers < 1 or self.consumers < 1:
            raise InvalidConfigurationError("producers and consumers must be >= 1")
        if self.block_size < 1:
            raise InvalidConfigurationError("block_size must be >= 1")
        if self.total_data < 0:
            raise InvalidConfigurationError("total_data must be >= 0")
        if self.producer_ring_capacity < 1 or self.consumer_ring_capacity < 1:
            raise InvalidConfigurationError("ring capacities must be >= 1")
        if not 0 <= self.prefetch_depth <= self.consumer_ring_capacity:
            raise InvalidConfigurationError(
                "prefetch_depth must be between 0 and consumer_ring_capacity")
        if not 0 <= self.seed < 2 ** 64:
            raise InvalidConfigurationError("seed must fit in 64 bits")
        if not isinstance(self.transport, TransportKind):
            object.__setattr__(self, "transport", TransportKind(self.transport))
        if self.transport == TransportKind.FILE and not self.data_dir:
            raise InvalidConfigurationError("file transport requires data_dir")
        if not isinstance(self.workload, (SyntheticWorkloadSpec, SleepWorkloadSpec)):
            raise InvalidConfigurationError("workload must be a workload spec")

    @property
    def n_blocks(self) -> int:
        return blocks_count(self.total_data, self.block_size)

    def block_counts(self) -> list:
        return producer_block_counts(self.n_blocks, self.producers)

    def to_dict(self) -> dict:
        return {
            "producers": self.producers,
            "consumers": self.consumers,
            "total_data": self.total_data,
            "block_size": self.block_size,
            "transport": self.transport.value,
            "producer_ring_capacity": self.producer_ring_capacity,
            "consumer_ring_capacity": self.consumer_ring_capacity,
            "prefetch_depth": self.prefetch_depth,
            "workload": self.workload.to_dict(),
            "data_dir": self.data_dir,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "PipelineConfig":
        if not isinstance(obj, Mapping):
            raise InvalidConfigurationError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise InvalidConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(obj)
        if "workload" in kwargs:
            kwargs["workload"] = workload_from_dict(kwargs["workload"])
        if "transport" in kwargs:
            try:
                kwargs["transport"] = TransportKind(kwargs["transport"])
            except ValueError:
                raise InvalidConfigurationError(
                    f"transport must be one of channel/file/tcp, got {kwargs['transport']!r}")
        return cls(**kwargs)

    @classmethod
    def from_json_file(cls, path) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InvalidConfigurationError(f"{path}: {exc}") from exc
        return cls.from_dict(obj)
