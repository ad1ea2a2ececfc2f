import json
import random
import threading
import time

import pytest

from pipebroker.broker import (
    EVENT_DELIVER,
    EVENT_ENQUEUE,
    EVENT_PREFETCH,
    EVENT_TRANSFER_DONE,
    DataBroker,
    InstrumentationLog,
    IoTask,
    TaskScheduler,
    schedule_next,
)
from pipebroker.core import (
    BlockId,
    BlockPayload,
    TransportKind,
    consumption_order,
    gen_block,
    owned_range,
)
from pipebroker.errors import (
    DeliveryExhaustedError,
    DuplicateWriteError,
    InvalidInputError,
    MissingBlockError,
    OwnershipError,
    TransportClosedError,
)

from conftest import make_config


def _payload(p, s, size=64, seed=1):
    return gen_block(seed, BlockId(p, s), size)


def _task(p, s, dest, ts):
    return IoTask(payload=_payload(p, s), destination=dest, enqueued_at=ts)


class TestInstrumentationLog:
    def test_record_schema(self):
        log = InstrumentationLog()
        log.emit(EVENT_ENQUEUE, BlockId(1, 2))
        log.emit(EVENT_TRANSFER_DONE, BlockId(1, 2), dur=0.25)
        records = log.records()
        assert records[0]["event"] == EVENT_ENQUEUE
        assert records[0]["block"] == [1, 2]
        assert records[0]["t"] >= 0.0
        assert records[1]["dur"] == 0.25

    def test_filter_and_durations(self):
        log = InstrumentationLog()
        log.emit(EVENT_PREFETCH, BlockId(0, 0), dur=0.1)
        log.emit(EVENT_DELIVER, BlockId(0, 0))
        log.emit(EVENT_PREFETCH, BlockId(0, 1), dur=0.2)
        assert len(log.records(EVENT_PREFETCH)) == 2
        assert log.durations(EVENT_PREFETCH) == [0.1, 0.2]

    def test_write_jsonl(self, tmp_path):
        log = InstrumentationLog()
        log.emit(EVENT_ENQUEUE, BlockId(3, 4))
        path = tmp_path / "events.jsonl"
        log.write_jsonl(path)
        lines = path.read_text().splitlines()
        assert len(lines) == 1
        record = json.loads(lines[0])
        assert record["event"] == EVENT_ENQUEUE
        assert record["block"] == [3, 4]


class OracleScheduler:
    """Brute-force restatement of the documented scheduling rule."""

    def __init__(self, destinations):
        self.queues = [[] for _ in range(destinations)]
        self.last = destinations - 1

    def submit(self, task):
        block = task.payload.id
        self.queues[task.destination].append(
            (task.enqueued_at, (block.producer_index, block.sequence), task))

    def pending(self):
        return sum(len(q) for q in self.queues)

    def pick(self):
        heads = {d: min(q)[0] for d, q in enumerate(self.queues) if q}
        oldest = min(heads.values())
        tied = {d for d, ts in heads.items() if ts == oldest}
        n = len(self.queues)
        if len(tied) == 1:
            dest = tied.pop()
        else:
            dest = next((self.last + i) % n for i in range(1, n + 1)
                        if (self.last + i) % n in tied)
        self.last = dest
        entry = min(self.queues[dest])
        self.queues[dest].remove(entry)
        return entry[2]


class TestTaskScheduler:
    def test_fifo_by_enqueue_time(self):
        sched = TaskScheduler(2)
        a = _task(0, 0, dest=0, ts=1.0)
        b = _task(1, 0, dest=1, ts=2.0)
        sched.submit(b)
        sched.submit(a)
        assert sched.schedule_next() is a
        assert schedule_next(sched) is b

    def test_block_id_breaks_timestamp_ties(self):
        sched = TaskScheduler(1)
        later = _task(0, 1, dest=0, ts=5.0)
        earlier = _task(0, 0, dest=0, ts=5.0)
        sched.submit(later)
        sched.submit(earlier)
        assert sched.schedule_next().payload.id == BlockId(0, 0)
        assert sched.schedule_next().payload.id == BlockId(0, 1)

    def test_equal_age_tasks_alternate_destinations(self):
        sched = TaskScheduler(2)
        for s in range(4):
            sched.submit(_task(0, s, dest=0, ts=1.0))
            sched.submit(_task(1, s, dest=1, ts=1.0))
        picked = [sched.schedule_next().destination for _ in range(8)]
        assert picked == [0, 1, 0, 1, 0, 1, 0, 1]

    def test_empty_scheduler_rejects_pick(self):
        sched = TaskScheduler(1)
        with pytest.raises(InvalidInputError):
            sched.schedule_next()

    def test_next_returns_none_when_closed_and_empty(self):
        sched = TaskScheduler(1)
        sched.close()
        assert sched.next() is None

    def test_submit_after_close_raises(self):
        sched = TaskScheduler(1)
        sched.close()
        with pytest.raises(TransportClosedError):
            sched.submit(_task(0, 0, dest=0, ts=0.0))

    def test_matches_oracle_on_randomized_states(self):
        rng = random.Random(2024)
        for trial in range(100):
            destinations = rng.randint(1, 4)
            sched = TaskScheduler(destinations)
            oracle = OracleScheduler(destinations)
            seq = 0
            for _ in range(rng.randint(1, 40)):
                if oracle.pending() and rng.random() < 0.45:
                    assert (sched.schedule_next().payload.id
                            == oracle.pick().payload.id), f"trial {trial}"
                else:
                    task = _task(rng.randint(0, 3), seq,
                                 dest=rng.randint(0, destinations - 1),
                                 ts=float(rng.randint(0, 3)))
                    seq += 1
                    sched.submit(task)
                    oracle.submit(task)
            while oracle.pending():
                assert (sched.schedule_next().payload.id
                        == oracle.pick().payload.id), f"trial {trial} drain"


def pump(config, read=True, **broker_kw):
    """Full write/read cycle with one thread per producer and consumer."""
    broker = DataBroker(config, **broker_kw)
    counts = config.block_counts()
    P, Q = config.producers, config.consumers
    written = {}
    delivered = {}
    errors = []

    def producer(p):
        try:
            for s in range(counts[p]):
                payload = gen_block(config.seed, BlockId(p, s), config.block_size)
                written[payload.id] = payload.checksum
                broker.write(payload.id, payload)
        except Exception as exc:
            errors.append(exc)

    def consumer(q):
        try:
            owned = owned_range(P, Q, q)
            for bid in consumption_order(owned, {p: counts[p] for p in owned}):
                payload = broker.read(q, bid)
                delivered[bid] = payload.checksum
        except Exception as exc:
            errors.append(exc)

    threads = [threading.Thread(target=producer, args=(p,)) for p in range(P)]
    if read:
        threads += [threading.Thread(target=consumer, args=(q,)) for q in range(Q)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    try:
        if errors:
            raise errors[0]
        report = broker.close_and_drain()
    finally:
        broker.shutdown()
    return broker, report, written, delivered


TRANSPORT_CASES = [TransportKind.CHANNEL, TransportKind.TCP, TransportKind.FILE]


class TestDataBrokerPipeline:
    @pytest.mark.parametrize("kind", TRANSPORT_CASES)
    @pytest.mark.parametrize("depth", [0, 4])
    def test_round_trip_all_transports(self, kind, depth, tmp_path):
        config = make_config(tmp_path=tmp_path, transport=kind,
                             producers=3, consumers=2,
                             total_data=24 * 256, block_size=256,
                             prefetch_depth=depth)
        broker, report, written, delivered = pump(config)
        assert report.as_tuple() == (24, 24, 24)
        assert delivered == written

    def test_conservation_across_random_configs(self, tmp_path):
        rng = random.Random(11)
        for trial in range(6):
            kind = rng.choice(TRANSPORT_CASES)
            P, Q = rng.randint(1, 4), rng.randint(1, 4)
            n_b = rng.randint(0, 40)
            config = make_config(
                tmp_path=tmp_path / str(trial), transport=kind,
                producers=P, consumers=Q,
                total_data=n_b * 128, block_size=128,
                prefetch_depth=rng.choice([0, 2, 8]),
                seed=trial + 1)
            if kind == TransportKind.FILE:
                (tmp_path / str(trial)).mkdir(exist_ok=True)
            broker, report, written, delivered = pump(config)
            assert report.as_tuple() == (n_b, n_b, n_b), f"trial {trial}"
            assert delivered == written, f"trial {trial}"

    def test_drain_with_zero_writes(self):
        config = make_config(total_data=0)
        broker, report, written, delivered = pump(config)
        assert report.as_tuple() == (0, 0, 0)

    def test_drain_without_reads_transfers_everything(self, tmp_path):
        config = make_config(tmp_path=tmp_path, transport=TransportKind.FILE,
                             producers=2, consumers=2,
                             total_data=8 * 128, block_size=128,
                             prefetch_depth=0)
        broker, report, written, delivered = pump(config, read=False)
        assert report.written == 8
        assert report.transferred == 8
        assert report.delivered == 0

    def test_ring_peaks_bounded_by_capacities(self, tmp_path):
        config = make_config(tmp_path=tmp_path, transport=TransportKind.FILE,
                             producers=2, consumers=1,
                             total_data=32 * 128, block_size=128,
                             producer_ring_capacity=3,
                             consumer_ring_capacity=5,
                             prefetch_depth=5)
        broker, report, written, delivered = pump(config)
        stats = broker.stats()
        assert all(peak <= 3 for peak in stats["producer_ring_peak"].values())
        assert all(peak <= 5 for peak in stats["consumer_ring_peak"].values())


class TestDataBrokerWrite:
    def test_duplicate_write_rejected(self):
        config = make_config(producers=1, consumers=1,
                             total_data=4 * 64, block_size=64)
        with DataBroker(config) as broker:
            payload = _payload(0, 0)
            broker.write(payload.id, payload)
            with pytest.raises(DuplicateWriteError):
                broker.write(payload.id, payload)

    def test_write_after_close_rejected(self):
        config = make_config(producers=1, consumers=1,
                             total_data=4 * 64, block_size=64)
        broker = DataBroker(config)
        try:
            broker.close_and_drain()
            with pytest.raises(TransportClosedError):
                broker.write(BlockId(0, 0), _payload(0, 0))
        finally:
            broker.shutdown()

    def test_mismatched_payload_id_rejected(self):
        config = make_config(producers=1, consumers=1,
                             total_data=4 * 64, block_size=64)
        with DataBroker(config) as broker:
            with pytest.raises(InvalidInputError):
                broker.write(BlockId(0, 1), _payload(0, 0))

    def test_out_of_range_producer_rejected(self):
        config = make_config(producers=1, consumers=1,
                             total_data=4 * 64, block_size=64)
        with DataBroker(config) as broker:
            with pytest.raises(InvalidInputError):
                broker.write(BlockId(5, 0), _payload(5, 0))

    def test_write_returns_before_transfer_completes(self):
        config = make_config(producers=1, consumers=1,
                             total_data=4 * 64, block_size=64)
        with DataBroker(config, output_delay=0.2) as broker:
            payload = _payload(0, 0)
            t0 = time.perf_counter()
            broker.write(payload.id, payload)
            elapsed = time.perf_counter() - t0
            assert elapsed < 0.1, "write must return once enqueued"
            assert broker.stats()["transferred"] == 0

    def test_full_ring_applies_backpressure(self):
        config = make_config(producers=1, consumers=1,
                             total_data=4 * 64, block_size=64,
                             producer_ring_capacity=1)
        with DataBroker(config, output_delay=0.15) as broker:
            broker.write(BlockId(0, 0), _payload(0, 0))
            t0 = time.perf_counter()
            broker.write(BlockId(0, 1), _payload(0, 1))
            elapsed = time.perf_counter() - t0
            assert elapsed > 0.05, "second write should wait for ring space"


class TestDataBrokerRead:
    def test_unowned_block_rejected(self):
        config = make_config(producers=2, consumers=2,
                             total_data=4 * 64, block_size=64)
        with DataBroker(config) as broker:
            # consumer 1 owns producer 1 only
            with pytest.raises(OwnershipError):
                broker.read(1, BlockId(0, 0))

    def test_bad_consumer_index_rejected(self):
        config = make_config(producers=1, consumers=1,
                             total_data=4 * 64, block_size=64)
        with DataBroker(config) as broker:
            with pytest.raises(InvalidInputError):
                broker.read(7, BlockId(0, 0))

    def test_second_read_is_exhausted(self, tmp_path):
        config = make_config(tmp_path=tmp_path, transport=TransportKind.FILE,
                             producers=1, consumers=1,
                             total_data=2 * 64, block_size=64,
                             prefetch_depth=0)
        broker = DataBroker(config)
        try:
            for s in range(2):
                broker.write(BlockId(0, s), gen_block(7, BlockId(0, s), 64))
            broker.close_and_drain()
            broker.read(0, BlockId(0, 0))
            with pytest.raises(DeliveryExhaustedError):
                broker.read(0, BlockId(0, 0))
        finally:
            broker.shutdown()

    def test_read_blocks_until_write_arrives(self):
        config = make_config(producers=1, consumers=1,
                             total_data=2 * 64, block_size=64,
                             prefetch_depth=2)
        payload = gen_block(7, BlockId(0, 0), 64)
        got = {}
        with DataBroker(config) as broker:
            def _read():
                got["payload"] = broker.read(0, BlockId(0, 0))

            reader = threading.Thread(target=_read)
            reader.start()
            time.sleep(0.05)
            assert "payload" not in got
            broker.write(payload.id, payload)
            reader.join(timeout=5.0)
            assert got["payload"].checksum == payload.checksum

    @pytest.mark.parametrize("kind", TRANSPORT_CASES)
    def test_missing_block_after_drain(self, kind, tmp_path):
        config = make_config(tmp_path=tmp_path, transport=kind,
                             producers=1, consumers=1,
                             total_data=4 * 64, block_size=64,
                             prefetch_depth=0)
        broker = DataBroker(config)
        try:
            broker.write(BlockId(0, 0), gen_block(7, BlockId(0, 0), 64))
            broker.close_and_drain()
            got = broker.read(0, BlockId(0, 0))
            assert got.id == BlockId(0, 0)
            with pytest.raises(MissingBlockError):
                broker.read(0, BlockId(0, 3))
        finally:
            broker.shutdown()

    def test_out_of_order_read_within_capacity(self):
        config = make_config(producers=1, consumers=1,
                             total_data=4 * 64, block_size=64,
                             consumer_ring_capacity=8, prefetch_depth=0)
        broker = DataBroker(config)
        try:
            payloads = [gen_block(7, BlockId(0, s), 64) for s in range(4)]
            for p in payloads:
                broker.write(p.id, p)
            broker.close_and_drain()
            assert broker.read(0, BlockId(0, 2)).checksum == payloads[2].checksum
            assert broker.read(0, BlockId(0, 0)).checksum == payloads[0].checksum
            assert broker.read(0, BlockId(0, 1)).checksum == payloads[1].checksum
            assert broker.read(0, BlockId(0, 3)).checksum == payloads[3].checksum
        finally:
            broker.shutdown()

    def test_out_of_order_read_beyond_capacity_faults(self):
        config = make_config(producers=1, consumers=1,
                             total_data=8 * 64, block_size=64,
                             consumer_ring_capacity=2, prefetch_depth=0)
        broker = DataBroker(config)
        try:
            for s in range(8):
                broker.write(BlockId(0, s), gen_block(7, BlockId(0, s), 64))
            broker.close_and_drain()
            with pytest.raises(InvalidInputError):
                broker.read(0, BlockId(0, 7))
        finally:
            broker.shutdown()

    def test_out_of_order_read_with_prefetch(self):
        config = make_config(producers=1, consumers=1,
                             total_data=4 * 64, block_size=64,
                             consumer_ring_capacity=8, prefetch_depth=2)
        broker = DataBroker(config)
        try:
            payloads = [gen_block(7, BlockId(0, s), 64) for s in range(4)]
            for p in payloads:
                broker.write(p.id, p)
            broker.close_and_drain()
            assert broker.read(0, BlockId(0, 3)).checksum == payloads[3].checksum
            for s in range(3):
                assert broker.read(0, BlockId(0, s)).checksum == payloads[s].checksum
        finally:
            broker.shutdown()


class TestPrefetch:
    def test_prefetched_reads_skip_storage(self, tmp_path):
        config = make_config(tmp_path=tmp_path, transport=TransportKind.FILE,
                             producers=2, consumers=2,
                             total_data=16 * 128, block_size=128,
                             prefetch_depth=4)
        broker, report, written, delivered = pump(config)
        reads = broker.stats()["caller_storage_reads"]
        assert all(count == 0 for count in reads.values()), reads

    def test_depth_zero_reads_go_to_storage(self, tmp_path):
        config = make_config(tmp_path=tmp_path, transport=TransportKind.FILE,
                             producers=2, consumers=2,
                             total_data=16 * 128, block_size=128,
                             prefetch_depth=0)
        broker, report, written, delivered = pump(config)
        reads = broker.stats()["caller_storage_reads"]
        assert sum(reads.values()) == 16

    def test_prefetch_events_logged(self, tmp_path):
        log = InstrumentationLog()
        config = make_config(tmp_path=tmp_path, transport=TransportKind.FILE,
                             producers=1, consumers=1,
                             total_data=8 * 128, block_size=128,
                             prefetch_depth=4)
        broker, report, written, delivered = pump(config, log=log)
        prefetches = log.records(EVENT_PREFETCH)
        assert len(prefetches) == 8
        assert all(r["dur"] >= 0 for r in prefetches)

    def test_steady_state_ring_occupancy(self):
        # slow reader: ring should reach the prefetch depth
        config = make_config(producers=1, consumers=1,
                             total_data=16 * 64, block_size=64,
                             prefetch_depth=4, consumer_ring_capacity=8)
        broker = DataBroker(config)
        try:
            for s in range(16):
                broker.write(BlockId(0, s), gen_block(7, BlockId(0, s), 64))
            broker.close_and_drain()
            deadline = time.perf_counter() + 2.0
            while time.perf_counter() < deadline:
                if broker.stats()["consumer_ring_peak"][0] >= 4:
                    break
                time.sleep(0.005)
            assert broker.stats()["consumer_ring_peak"][0] >= 4
            for s in range(16):
                broker.read(0, BlockId(0, s))
        finally:
            broker.shutdown()
