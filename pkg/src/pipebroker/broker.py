"""Staging runtime: producer rings, writer workers, scheduling, prefetch.

Producers call ``write(block_id, payload)`` and return as soon as the block
is queued; writer workers move queued blocks to their destination over the
configured transport, oldest first. On message transports the final send
runs on a per-producer sender thread so each stream arrives in sequence
order and a full transport never ties up the worker pool. Each consumer
owns a fixed set of producers; prefetch workers keep its ring stocked ahead
of ``read`` calls. All buffers are bounded, so a stalled stage backpressures
its upstream instead of growing memory.
"""

from __future__ import annotations

import heapq
import json
import queue
import threading
import time
from dataclasses import dataclass

from . import transport as _tp
from .core import (
    BlockId,
    BlockPayload,
    Clock,
    PipelineConfig,
    TransportKind,
    consumption_order,
    owned_range,
    owner_of,
    sleep_for,
)
from .errors import (
    DeliveryExhaustedError,
    DrainTimeoutError,
    DuplicateWriteError,
    InvalidInputError,
    MissingBlockError,
    OwnershipError,
    PipebrokerError,
    TransportClosedError,
)

DEFAULT_DRAIN_TIMEOUT = 60.0

EVENT_ENQUEUE = "enqueue"
EVENT_TRANSFER_START = "transfer_start"
EVENT_TRANSFER_DONE = "transfer_done"
EVENT_PREFETCH = "prefetch"
EVENT_DELIVER = "deliver"


class InstrumentationLog:
    """Append-only event stream; one JSON-serializable record per event."""

    def __init__(self, clock: Clock = None):
        self.clock = clock if clock is not None else Clock()
        self._records = []
        self._lock = threading.Lock()

    def emit(self, event: str, block_id: BlockId, **extra) -> None:
        record = {"event": event,
                  "block": [block_id.producer_index, block_id.sequence],
                  "t": self.clock.now()}
        record.update(extra)
        with self._lock:
            self._records.append(record)

    def records(self, event: str = None) -> list:
        with self._lock:
            snapshot = list(self._records)
        if event is None:
            return snapshot
        return [r for r in snapshot if r["event"] == event]

    def durations(self, event: str) -> list:
        return [r["dur"] for r in self.records(event) if "dur" in r]

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.records():
                fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass(frozen=True)
class IoTask:
    """One pending transfer: a written block plus its destination consumer."""

    payload: BlockPayload
    destination: int
    enqueued_at: float

    @property
    def priority_key(self):
        block = self.payload.id
        return (self.enqueued_at, (block.producer_index, block.sequence))


class TaskScheduler:
    """Oldest-first task pick across per-destination queues.

    Within a destination, ties on enqueue time fall back to BlockId order.
    When several destinations tie on the oldest timestamp, the pick rotates
    round-robin starting after the last scheduled destination, so equal-age
    traffic streams to all consumers instead of draining one queue first.
    """

    def __init__(self, destinations: int, clock=None):
        if destinations < 1:
            raise InvalidInputError("destinations must be >= 1")
        self._queues = [[] for _ in range(destinations)]
        self._clock = clock if clock is not None else time.perf_counter
        self._cond = threading.Condition()
        self._last_dest = destinations - 1
        self._closed = False

    def now(self) -> float:
        return self._clock()

    def submit(self, task: IoTask) -> None:
        block = task.payload.id
        entry = (task.enqueued_at, (block.producer_index, block.sequence), task)
        with self._cond:
            if self._closed:
                raise TransportClosedError("scheduler is closed")
            heapq.heappush(self._queues[task.destination], entry)
            self._cond.notify_all()

    def pending(self) -> int:
        with self._cond:
            return sum(len(q) for q in self._queues)

    def _pick(self) -> IoTask:
        heads = [(q[0][0], d) for d, q in enumerate(self._queues) if q]
        oldest = min(ts for ts, _ in heads)
        tied = {d for ts, d in heads if ts == oldest}
        if len(tied) == 1:
            dest = tied.pop()
        else:
            n = len(self._queues)
            dest = next((self._last_dest + i) % n for i in range(1, n + 1)
                        if (self._last_dest + i) % n in tied)
        self._last_dest = dest
        return heapq.heappop(self._queues[dest])[2]

    def schedule_next(self) -> IoTask:
        """Immediately pick the highest-priority pending task."""
        with self._cond:
            if not any(self._queues):
                raise InvalidInputError("no pending tasks")
            return self._pick()

    def next(self):
        """Blocking pick; None once closed and empty."""
        with self._cond:
            while True:
                if any(self._queues):
                    return self._pick()
                if self._closed:
                    return None
                self._cond.wait()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


def schedule_next(scheduler: TaskScheduler) -> IoTask:
    return scheduler.schedule_next()


class _ProducerState:
    def __init__(self, index: int, capacity: int):
        self.index = index
        self.capacity = capacity
        self.cond = threading.Condition()
        self.in_flight = 0
        self.peak = 0


class _ConsumerState:
    def __init__(self, index: int, owned, capacity: int, depth: int):
        self.index = index
        self.owned = list(owned)
        self.capacity = capacity
        self.depth = depth
        self.cond = threading.Condition()
        self.ring = {}
        self.delivered = set()
        self.delivered_count = 0
        self.caller_storage_reads = 0
        self.peak = 0
        self.wanted = None
        self.fault = None
        self.stopped = False
        self.receivers = {}


class DrainReport:
    """Live view of the conservation counters; reads after drain still count."""

    def __init__(self, broker: "DataBroker"):
        self._broker = broker

    @property
    def written(self) -> int:
        return self._broker.stats()["written"]

    @property
    def transferred(self) -> int:
        return self._broker.stats()["transferred"]

    @property
    def delivered(self) -> int:
        return self._broker.stats()["delivered"]

    def as_tuple(self) -> tuple:
        stats = self._broker.stats()
        return (stats["written"], stats["transferred"], stats["delivered"])

    def __repr__(self) -> str:
        return "DrainReport(written=%d, transferred=%d, delivered=%d)" % self.as_tuple()


class DataBroker:
    """The staging runtime for one pipeline run.

    ``output_delay`` and ``input_delay`` add a fixed per-block cost to the
    transfer and fetch paths; timing-controlled runs use them to realize
    configured stage times on top of the (cheap) real transport.
    """

    def __init__(self, config: PipelineConfig, clock: Clock = None,
                 log: InstrumentationLog = None,
                 output_delay: float = 0.0, input_delay: float = 0.0):
        self.config = config
        self.clock = clock if clock is not None else Clock()
        self.log = log if log is not None else InstrumentationLog(self.clock)
        self.output_delay = output_delay
        self.input_delay = input_delay

        P, Q = config.producers, config.consumers
        self._counts = config.block_counts()
        self._lock = threading.Lock()
        self._drain_cond = threading.Condition(self._lock)
        self._written_ids = set()
        self._pending_ids = set()
        self._written = 0
        self._transferred = 0
        self._closed = False
        self._drained = threading.Event()
        self._drain_report = None
        self._worker_errors = []

        self._producers = [_ProducerState(p, config.producer_ring_capacity)
                           for p in range(P)]
        self._consumers = [_ConsumerState(q, owned_range(P, Q, q),
                                          config.consumer_ring_capacity,
                                          config.prefetch_depth)
                           for q in range(Q)]

        self._senders = {}
        self._outboxes = {}
        self._sender_threads = []
        if config.transport == TransportKind.FILE:
            self._dir = config.data_dir
        else:
            self._dir = None
            for p in range(P):
                sender, receiver = _tp.message_pair(config.transport)
                self._senders[p] = sender
                self._consumers[owner_of(P, Q, p)].receivers[p] = receiver
                self._outboxes[p] = queue.SimpleQueue()
            for p in range(P):
                t = threading.Thread(target=self._sender_loop, args=(p,),
                                     name=f"sender-{p}", daemon=True)
                t.start()
                self._sender_threads.append(t)

        self._scheduler = TaskScheduler(Q, self.clock.now)
        self._writers = [threading.Thread(target=self._writer_loop,
                                          name=f"writer-{i}", daemon=True)
                         for i in range(P)]
        for t in self._writers:
            t.start()
        self._prefetchers = []
        if config.prefetch_depth > 0:
            for cs in self._consumers:
                t = threading.Thread(target=self._prefetch_loop, args=(cs,),
                                     name=f"prefetch-{cs.index}", daemon=True)
                t.start()
                self._prefetchers.append(t)

    # ------------------------------------------------------------- producer

    def write(self, block_id: BlockId, payload: BlockPayload) -> None:
        """Queue one block for transfer; returns once it is on the ring.

        Blocks the caller only when this producer's ring is full.
        """
        if payload.id != block_id:
            raise InvalidInputError(f"payload id {payload.id} != {block_id}")
        if not 0 <= block_id.producer_index < self.config.producers:
            raise InvalidInputError(f"no producer {block_id.producer_index}")
        ps = self._producers[block_id.producer_index]
        with self._lock:
            if self._closed:
                raise TransportClosedError("broker is closed to writes")
            if block_id in self._written_ids:
                raise DuplicateWriteError(f"block {block_id} was already written")
            self._written_ids.add(block_id)
            self._pending_ids.add(block_id)
            self._written += 1
        with ps.cond:
            while ps.in_flight >= ps.capacity:
                if self._closed:
                    raise TransportClosedError("broker is closed to writes")
                ps.cond.wait()
            ps.in_flight += 1
            ps.peak = max(ps.peak, ps.in_flight)
        destination = owner_of(self.config.producers, self.config.consumers,
                               block_id.producer_index)
        task = IoTask(payload, destination, self.clock.now())
        self.log.emit(EVENT_ENQUEUE, block_id)
        self._scheduler.submit(task)

    def _writer_loop(self) -> None:
        while True:
            task = self._scheduler.next()
            if task is None:
                return
            block_id = task.payload.id
            self.log.emit(EVENT_TRANSFER_START, block_id)
            t0 = time.perf_counter()
            if self.output_delay > 0:
                sleep_for(self.output_delay)
            if self._dir is None:
                # A send can wait on a full transport until its consumer
                # catches up; if pool workers did that they could all wedge
                # on one lagging stream while another producer's queued
                # blocks starve. Hand the payload to that producer's
                # dedicated sender instead and move on.
                self._outboxes[block_id.producer_index].put((task, t0))
                continue
            try:
                _tp.write_block_file(self._dir, task.payload, sync=False)
            except PipebrokerError as exc:
                self._release_producer(block_id)
                if self._drained.is_set() or self._closed:
                    return
                self._worker_errors.append(exc)
                continue
            self._finish_transfer(block_id, time.perf_counter() - t0)

    def _sender_loop(self, producer_index: int) -> None:
        # Workers hand blocks over in scheduler pick order, which preemption
        # can invert between neighbours; receivers walk each producer's
        # stream strictly in sequence, so hold early arrivals back until the
        # gap block shows up.
        outbox = self._outboxes[producer_index]
        sender = self._senders[producer_index]
        held = {}
        next_seq = 0
        while True:
            if next_seq in held:
                task, t0 = held.pop(next_seq)
            else:
                item = outbox.get()
                if item is None:
                    return
                task, t0 = item
                seq = task.payload.id.sequence
                if seq != next_seq:
                    held[seq] = (task, t0)
                    continue
            next_seq += 1
            try:
                _tp.send_block(sender, task.payload)
            except PipebrokerError as exc:
                self._release_producer(task.payload.id)
                if self._drained.is_set() or self._closed:
                    return
                self._worker_errors.append(exc)
                continue
            self._finish_transfer(task.payload.id, time.perf_counter() - t0)

    def _finish_transfer(self, block_id: BlockId, dur: float) -> None:
        self.log.emit(EVENT_TRANSFER_DONE, block_id, dur=dur)
        with self._lock:
            self._transferred += 1
            self._pending_ids.discard(block_id)
            self._drain_cond.notify_all()
        self._release_producer(block_id)

    def _release_producer(self, block_id: BlockId) -> None:
        ps = self._producers[block_id.producer_index]
        with ps.cond:
            ps.in_flight -= 1
            ps.cond.notify_all()

    # ------------------------------------------------------------- consumer

    def read(self, consumer_index: int, block_id: BlockId) -> BlockPayload:
        """Deliver one owned block, waiting for it if not yet available."""
        if not 0 <= consumer_index < self.config.consumers:
            raise InvalidInputError(f"no consumer {consumer_index}")
        cs = self._consumers[consumer_index]
        if block_id.producer_index not in cs.owned:
            raise OwnershipError(
                f"consumer {consumer_index} does not own producer "
                f"{block_id.producer_index}")
        with cs.cond:
            if block_id in cs.delivered:
                raise DeliveryExhaustedError(f"block {block_id} was already delivered")
        if self._prefetchers:
            payload = self._read_from_ring(cs, block_id)
        else:
            payload = self._read_direct(cs, block_id)
        with cs.cond:
            cs.delivered.add(block_id)
            cs.delivered_count += 1
            cs.cond.notify_all()
        self.log.emit(EVENT_DELIVER, block_id)
        return payload

    def _read_from_ring(self, cs: _ConsumerState, block_id: BlockId) -> BlockPayload:
        with cs.cond:
            cs.wanted = block_id
            cs.cond.notify_all()
            try:
                while True:
                    if cs.fault is not None:
                        raise cs.fault
                    if block_id in cs.ring:
                        return cs.ring.pop(block_id)
                    if self._drained.is_set() and not self._was_written(block_id):
                        raise MissingBlockError(
                            f"block {block_id} was never written (end of stream)")
                    if cs.stopped:
                        raise TransportClosedError("broker was shut down")
                    cs.cond.wait()
            finally:
                cs.wanted = None
                cs.cond.notify_all()

    def _read_direct(self, cs: _ConsumerState, block_id: BlockId) -> BlockPayload:
        """No prefetch workers: the caller itself fetches from the transport."""
        with cs.cond:
            if block_id in cs.ring:
                return cs.ring.pop(block_id)
        if self._dir is not None:
            payload = self._poll_file(cs, block_id)
            with cs.cond:
                cs.caller_storage_reads += 1
        else:
            payload = self._recv_until(cs, block_id)
        if self.input_delay > 0:
            sleep_for(self.input_delay)
        return payload

    def _poll_file(self, cs: _ConsumerState, block_id: BlockId) -> BlockPayload:
        delay = 0.0001
        while True:
            payload = _tp.read_block_file(self._dir, block_id, self.config.block_size)
            if payload is not None:
                return payload
            if self._drained.is_set() and not self._was_written(block_id):
                raise MissingBlockError(
                    f"block {block_id} was never written (end of stream)")
            if cs.stopped:
                raise TransportClosedError("broker was shut down")
            time.sleep(delay)
            delay = min(delay * 2, 0.01)

    def _recv_until(self, cs: _ConsumerState, block_id: BlockId) -> BlockPayload:
        receiver = cs.receivers[block_id.producer_index]
        while True:
            got = _tp.recv_block(receiver)
            if got is None:
                if self._drained.is_set() and not self._was_written(block_id):
                    raise MissingBlockError(
                        f"block {block_id} was never written (end of stream)")
                raise TransportClosedError(f"stream from producer "
                                           f"{block_id.producer_index} ended early")
            if got.id == block_id:
                return got
            with cs.cond:
                if len(cs.ring) >= cs.capacity:
                    raise InvalidInputError(
                        f"out-of-order read of {block_id} exceeds ring capacity "
                        f"{cs.capacity}")
                cs.ring[got.id] = got
                cs.peak = max(cs.peak, len(cs.ring))

    def _was_written(self, block_id: BlockId) -> bool:
        with self._lock:
            return block_id in self._written_ids

    def _prefetch_loop(self, cs: _ConsumerState) -> None:
        counts = {p: self._counts[p] for p in cs.owned}
        exhausted = set()
        for block_id in consumption_order(cs.owned, counts):
            if block_id.producer_index in exhausted:
                continue
            with cs.cond:
                while (len(cs.ring) >= cs.depth and not cs.stopped
                       and not (cs.wanted is not None and cs.wanted not in cs.ring)):
                    cs.cond.wait()
                if cs.stopped:
                    return
                if (len(cs.ring) >= cs.capacity and cs.wanted is not None
                        and cs.wanted not in cs.ring):
                    cs.fault = InvalidInputError(
                        f"read of {cs.wanted} needs more than ring capacity "
                        f"{cs.capacity} of read-ahead")
                    cs.cond.notify_all()
                    return
            try:
                fetched = self._fetch(cs, block_id)
            except TransportClosedError:
                return
            if fetched is None:
                exhausted.add(block_id.producer_index)
                continue
            payload, dur = fetched
            with cs.cond:
                while len(cs.ring) >= cs.capacity and not cs.stopped:
                    cs.cond.wait()
                if cs.stopped:
                    return
                cs.ring[payload.id] = payload
                cs.peak = max(cs.peak, len(cs.ring))
                cs.cond.notify_all()
            self.log.emit(EVENT_PREFETCH, payload.id, dur=dur)

    def _fetch(self, cs: _ConsumerState, block_id: BlockId):
        """One block off the transport; returns (payload, seconds) or None at EOS."""
        if self._dir is not None:
            delay = 0.0001
            while True:
                t0 = time.perf_counter()
                payload = _tp.read_block_file(self._dir, block_id,
                                              self.config.block_size)
                if payload is not None:
                    dur = time.perf_counter() - t0
                    break
                if cs.stopped:
                    raise TransportClosedError("broker was shut down")
                if self._drained.is_set() and not self._was_written(block_id):
                    return None
                time.sleep(delay)
                delay = min(delay * 2, 0.01)
        else:
            receiver = cs.receivers[block_id.producer_index]
            t0 = time.perf_counter()
            payload = _tp.recv_block(receiver)
            dur = time.perf_counter() - t0
            if payload is None:
                return None
        if self.input_delay > 0:
            sleep_for(self.input_delay)
            dur += self.input_delay
        return payload, dur

    # ------------------------------------------------------------- lifecycle

    def close_and_drain(self, timeout: float = DEFAULT_DRAIN_TIMEOUT) -> DrainReport:
        """Flush every queued block, then stop accepting writes.

        Blocks written before the call stay readable afterwards; reads of
        never-written ids then fail instead of waiting forever.
        """
        with self._lock:
            self._closed = True
            if self._drain_report is not None:
                return self._drain_report
        for ps in self._producers:
            with ps.cond:
                ps.cond.notify_all()
        deadline = time.perf_counter() + timeout
        with self._lock:
            while self._transferred < self._written:
                remaining = deadline - time.perf_counter()
                if remaining <= 0:
                    stuck = sorted(self._pending_ids)
                    raise DrainTimeoutError(
                        f"{len(stuck)} block(s) still queued after {timeout}s",
                        undelivered=stuck)
                self._drain_cond.wait(remaining)
        self._scheduler.close()
        for t in self._writers:
            t.join()
        for outbox in self._outboxes.values():
            outbox.put(None)
        for t in self._sender_threads:
            t.join()
        for sender in self._senders.values():
            sender.close()
        self._drained.set()
        for cs in self._consumers:
            with cs.cond:
                cs.cond.notify_all()
        if self._worker_errors:
            raise self._worker_errors[0]
        report = DrainReport(self)
        with self._lock:
            self._drain_report = report
        return report

    def shutdown(self) -> None:
        """Stop all workers and release transports; idempotent."""
        with self._lock:
            self._closed = True
        self._scheduler.close()
        for ps in self._producers:
            with ps.cond:
                ps.cond.notify_all()
        for cs in self._consumers:
            for receiver in cs.receivers.values():
                receiver.close()
        for t in self._writers:
            t.join()
        for outbox in self._outboxes.values():
            outbox.put(None)
        for t in self._sender_threads:
            t.join()
        for sender in self._senders.values():
            sender.close()
        self._drained.set()
        for cs in self._consumers:
            with cs.cond:
                cs.stopped = True
                cs.cond.notify_all()
        for t in self._prefetchers:
            t.join()

    def __enter__(self) -> "DataBroker":
        return self

    def __exit__(self, *exc_info) -> None:
        self.shutdown()

    # ------------------------------------------------------------- reporting

    def stats(self) -> dict:
        with self._lock:
            written, transferred = self._written, self._transferred
        delivered = sum(cs.delivered_count for cs in self._consumers)
        return {
            "written": written,
            "transferred": transferred,
            "delivered": delivered,
            "caller_storage_reads": {cs.index: cs.caller_storage_reads
                                     for cs in self._consumers},
            "producer_ring_peak": {ps.index: ps.peak for ps in self._producers},
            "consumer_ring_peak": {cs.index: cs.peak for cs in self._consumers},
        }


def producer_write(broker: DataBroker, block_id: BlockId, payload: BlockPayload) -> None:
    broker.write(block_id, payload)


def consumer_read(broker: DataBroker, consumer_index: int, block_id: BlockId) -> BlockPayload:
    return broker.read(consumer_index, block_id)


def close_and_drain(broker: DataBroker, timeout: float = DEFAULT_DRAIN_TIMEOUT) -> DrainReport:
    return broker.close_and_drain(timeout)
