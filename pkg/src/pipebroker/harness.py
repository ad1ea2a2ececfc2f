"""End-to-end runners for the three execution methods.

Each runner measures wall time from the start of computation to the end of
analysis and pairs it with the model's prediction for the same split. The
traditional runner executes four global phases; the improved runner overlaps
output with compute but keeps each consumer's read-then-analyze sequence;
the fully asynchronous runner is the staging runtime with prefetch enabled.
"""

from __future__ import annotations

import math
import statistics
import tempfile
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path

from . import _kernels
from .broker import (
    EVENT_DELIVER,
    EVENT_PREFETCH,
    EVENT_TRANSFER_DONE,
    DataBroker,
    InstrumentationLog,
)
from .core import (
    BlockId,
    BlockPayload,
    Clock,
    PipelineConfig,
    StageTimes,
    SleepWorkloadSpec,
    SyntheticWorkloadSpec,
    TransportKind,
    consumption_order,
    gen_block,
    owned_range,
    sleep_for,
)
from .errors import CorruptBlockError, HarnessError, InvalidInputError, PipebrokerError
from .microbench import barrier_microbench
from .model import (
    METHOD_ASYNC,
    METHOD_IMPROVED,
    METHOD_TRADITIONAL,
    Prediction,
    predict,
    relative_error,
    stage_totals,
)

CALIBRATION_SAMPLES = 32


def analysis_kernel(payload: BlockPayload, iters: int = 1) -> float:
    """Sum of square roots of the block's bytes, repeated ``iters`` times."""
    if iters < 1:
        raise InvalidInputError(f"iters must be >= 1, got {iters}")
    return _kernels.sum_sqrt_bytes(payload.data, iters)


class SyntheticWorkload:
    """Real work: generate pseudo-random blocks, run the analysis kernel."""

    output_delay = 0.0
    input_delay = 0.0

    def __init__(self, config: PipelineConfig):
        self._config = config
        self.iters = config.workload.iters

    def warmup(self) -> None:
        _kernels.warmup()

    def compute(self, block_id: BlockId) -> BlockPayload:
        return gen_block(self._config.seed, block_id, self._config.block_size)

    def analyze(self, payload: BlockPayload) -> float:
        return analysis_kernel(payload, self.iters)


class SleepWorkload:
    """Timing-controlled work: every stage costs a configured duration."""

    def __init__(self, config: PipelineConfig):
        self._config = config
        self.times = config.workload.times
        self.output_delay = self.times.t_o
        self.input_delay = self.times.t_i

    def warmup(self) -> None:
        # Block generation digests every block, so the digest kernel must be
        # hot before any timed section even when no analysis kernel runs.
        _kernels.warmup()

    def compute(self, block_id: BlockId) -> BlockPayload:
        sleep_for(self.times.t_comp)
        return gen_block(self._config.seed, block_id, self._config.block_size)

    def analyze(self, payload: BlockPayload) -> float:
        sleep_for(self.times.t_analy)
        return 0.0


def make_workload(config: PipelineConfig):
    if isinstance(config.workload, SyntheticWorkloadSpec):
        return SyntheticWorkload(config)
    return SleepWorkload(config)


class MemoryBlockStore:
    """Message-transport stand-in for phased runs; staging via a plain dict.

    Writes copy the bytes so storing costs what a channel send costs.
    """

    def __init__(self):
        self._blocks = {}
        self._lock = threading.Lock()

    def write(self, payload: BlockPayload) -> None:
        copy = BlockPayload(payload.id, bytes(memoryview(payload.data)),
                            payload.checksum)
        with self._lock:
            self._blocks[payload.id] = copy

    def read(self, block_id: BlockId, block_size: int) -> BlockPayload:
        with self._lock:
            return self._blocks[block_id]


class FileBlockStore:
    """Directory staging for phased runs, same file format as the runtime."""

    def __init__(self, directory, sync: bool = False):
        self.directory = Path(directory)
        self.sync = sync

    def write(self, payload: BlockPayload) -> None:
        from .transport import write_block_file
        write_block_file(self.directory, payload, sync=self.sync)

    def read(self, block_id: BlockId, block_size: int) -> BlockPayload:
        from .transport import read_block_file
        payload = read_block_file(self.directory, block_id, block_size)
        if payload is None:
            raise CorruptBlockError(f"block {block_id} missing from {self.directory}")
        return payload


def _make_store(config: PipelineConfig):
    if config.transport == TransportKind.FILE:
        directory = Path(config.data_dir)
        directory.mkdir(parents=True, exist_ok=True)
        return FileBlockStore(directory)
    return MemoryBlockStore()


@dataclass
class RunReport:
    """Measured outcome of one method run, paired with its model prediction."""

    method: str
    config: dict
    blocks: int
    measured_t2s: float
    stage_seconds: dict
    predicted_t2s: float
    model_relative_error: float
    bottleneck: str
    analysis_total: float
    delivered: int
    log: InstrumentationLog = None
    log_path: str = None

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "blocks": self.blocks,
            "measured_t2s": self.measured_t2s,
            "predicted_t2s": self.predicted_t2s,
            "model_relative_error": self.model_relative_error,
            "bottleneck": self.bottleneck,
            "stage_seconds": dict(self.stage_seconds),
            "analysis_total": self.analysis_total,
            "delivered": self.delivered,
            "log_path": self.log_path,
            "config": dict(self.config),
        }


@dataclass
class ComparisonReport:
    """All three methods on one config, plus their measured speedups."""

    traditional: RunReport
    improved: RunReport
    asynchronous: RunReport
    speedup_improved_vs_traditional: float
    speedup_async_vs_improved: float
    speedup_async_vs_traditional: float

    def runs(self) -> dict:
        return {METHOD_TRADITIONAL: self.traditional,
                METHOD_IMPROVED: self.improved,
                METHOD_ASYNC: self.asynchronous}

    def as_dict(self) -> dict:
        return {
            "speedup_improved_vs_traditional": self.speedup_improved_vs_traditional,
            "speedup_async_vs_improved": self.speedup_async_vs_improved,
            "speedup_async_vs_traditional": self.speedup_async_vs_traditional,
            "runs": {name: report.as_dict() for name, report in self.runs().items()},
        }


def _join_workers(funcs, name: str) -> list:
    """Run callables on threads, return their results, re-raise first failure."""
    results = [None] * len(funcs)
    errors = [None] * len(funcs)

    def _wrap(i, fn):
        def run():
            try:
                results[i] = fn()
            except BaseException as exc:
                errors[i] = exc
        return run

    threads = [threading.Thread(target=_wrap(i, fn), name=f"{name}-{i}")
               for i, fn in enumerate(funcs)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for exc in errors:
        if exc is not None:
            raise exc
    return results


def _resolve_times(config: PipelineConfig, stage_times: StageTimes) -> StageTimes:
    if stage_times is not None:
        return stage_times
    if isinstance(config.workload, SleepWorkloadSpec):
        return config.workload.times
    return calibrate(config)


def _grouped_max(records, owner_by_producer=None) -> float:
    """Max over groups of summed durations; groups by producer by default."""
    sums = {}
    for record in records:
        key = record["block"][0]
        if owner_by_producer is not None:
            key = owner_by_producer[key]
        sums[key] = sums.get(key, 0.0) + record.get("dur", 0.0)
    return max(sums.values(), default=0.0)


def _verify_checksums(written: dict, delivered: dict) -> None:
    if set(written) != set(delivered):
        missing = sorted(set(written) ^ set(delivered))[:5]
        raise CorruptBlockError(f"delivered block set differs, e.g. {missing}")
    bad = [bid for bid, checksum in written.items() if delivered[bid] != checksum]
    if bad:
        raise CorruptBlockError(f"checksum mismatch on {sorted(bad)[:5]}")


def _report(method: str, config: PipelineConfig, times: StageTimes,
            measured: float, stages: dict, analysis_total: float,
            delivered: int, log: InstrumentationLog) -> RunReport:
    n_b = config.n_blocks
    prediction: Prediction = predict(
        method, stage_totals(times, n_b, config.producers, config.consumers))
    err = (relative_error(measured, prediction.t2s) if measured > 0
           else abs(prediction.t2s))
    return RunReport(
        method=method,
        config=config.to_dict(),
        blocks=n_b,
        measured_t2s=measured,
        stage_seconds=stages,
        predicted_t2s=prediction.t2s,
        model_relative_error=err,
        bottleneck=prediction.bottleneck,
        analysis_total=analysis_total,
        delivered=delivered,
        log=log,
    )


def run_traditional(config: PipelineConfig, stage_times: StageTimes = None) -> RunReport:
    """Four strictly global phases: compute, output, input, analyze."""
    times = _resolve_times(config, stage_times)
    workload = make_workload(config)
    workload.warmup()
    store = _make_store(config)
    counts = config.block_counts()
    P, Q = config.producers, config.consumers
    computed = [[] for _ in range(P)]
    written = {}
    delivered = {}
    outputs = []
    clock = Clock()
    log = InstrumentationLog(clock)

    def compute_worker(p):
        def run():
            t0 = time.perf_counter()
            for s in range(counts[p]):
                payload = workload.compute(BlockId(p, s))
                computed[p].append(payload)
                written[payload.id] = payload.checksum
            return time.perf_counter() - t0
        return run

    def output_worker(p):
        def run():
            t0 = time.perf_counter()
            for payload in computed[p]:
                sleep_for(workload.output_delay)
                w0 = time.perf_counter()
                store.write(payload)
                log.emit(EVENT_TRANSFER_DONE, payload.id,
                         dur=time.perf_counter() - w0 + workload.output_delay)
            return time.perf_counter() - t0
        return run

    fetched = [dict() for _ in range(Q)]

    def input_worker(q):
        def run():
            owned = owned_range(P, Q, q)
            t0 = time.perf_counter()
            for block_id in consumption_order(owned, {p: counts[p] for p in owned}):
                sleep_for(workload.input_delay)
                fetched[q][block_id] = store.read(block_id, config.block_size)
            return time.perf_counter() - t0
        return run

    def analysis_worker(q):
        def run():
            t0 = time.perf_counter()
            values = []
            for block_id in sorted(fetched[q]):
                payload = fetched[q][block_id]
                values.append(workload.analyze(payload))
                delivered[block_id] = payload.checksum
                log.emit(EVENT_DELIVER, block_id)
            outputs.extend(values)
            return time.perf_counter() - t0
        return run

    start = clock.now()
    t_comp = _join_workers([compute_worker(p) for p in range(P)], "compute")
    t_out = _join_workers([output_worker(p) for p in range(P)], "output")
    t_in = _join_workers([input_worker(q) for q in range(Q)], "input")
    t_an = _join_workers([analysis_worker(q) for q in range(Q)], "analyze")
    measured = clock.now() - start

    _verify_checksums(written, delivered)
    stages = {"compute": max(t_comp, default=0.0), "output": max(t_out, default=0.0),
              "input": max(t_in, default=0.0), "analysis": max(t_an, default=0.0)}
    return _report(METHOD_TRADITIONAL, config, times, measured, stages,
                   math.fsum(outputs), len(delivered), log)


def _run_overlapped(method: str, config: PipelineConfig,
                    stage_times: StageTimes) -> RunReport:
    """Shared body of the improved and fully asynchronous runners.

    The improved method is the runtime with prefetch disabled: output is
    asynchronous behind the producer ring, but every read goes to storage
    from the analysis caller itself.
    """
    times = _resolve_times(config, stage_times)
    workload = make_workload(config)
    workload.warmup()
    if config.transport == TransportKind.FILE:
        Path(config.data_dir).mkdir(parents=True, exist_ok=True)
    run_config = config
    if method == METHOD_IMPROVED:
        run_config = replace(config, prefetch_depth=0)
    counts = run_config.block_counts()
    P, Q = run_config.producers, run_config.consumers
    written = {}
    delivered = {}
    outputs = []
    clock = Clock()
    log = InstrumentationLog(clock)
    broker = DataBroker(run_config, clock=clock, log=log,
                        output_delay=workload.output_delay,
                        input_delay=workload.input_delay)

    def producer_worker(p):
        def run():
            busy = 0.0
            for s in range(counts[p]):
                t0 = time.perf_counter()
                payload = workload.compute(BlockId(p, s))
                busy += time.perf_counter() - t0
                written[payload.id] = payload.checksum
                broker.write(payload.id, payload)
            return busy
        return run

    def consumer_worker(q):
        def run():
            owned = owned_range(P, Q, q)
            read_busy = 0.0
            analyze_busy = 0.0
            values = []
            for block_id in consumption_order(owned, {p: counts[p] for p in owned}):
                t0 = time.perf_counter()
                payload = broker.read(q, block_id)
                read_busy += time.perf_counter() - t0
                t1 = time.perf_counter()
                values.append(workload.analyze(payload))
                analyze_busy += time.perf_counter() - t1
                delivered[block_id] = payload.checksum
            outputs.extend(values)
            return read_busy, analyze_busy
        return run

    try:
        start = clock.now()
        worker_funcs = ([producer_worker(p) for p in range(P)]
                        + [consumer_worker(q) for q in range(Q)])
        results = _join_workers(worker_funcs, method)
        measured = clock.now() - start
        broker.close_and_drain()
    finally:
        broker.shutdown()

    _verify_checksums(written, delivered)
    compute_busy = results[:P]
    consumer_busy = results[P:]
    owner = {p: q for q in range(Q) for p in owned_range(P, Q, q)}
    prefetch_records = log.records(EVENT_PREFETCH)
    if prefetch_records:
        input_total = _grouped_max(prefetch_records, owner_by_producer=owner)
    else:
        input_total = max((r for r, _ in consumer_busy), default=0.0)
    stages = {
        "compute": max(compute_busy, default=0.0),
        "output": _grouped_max(log.records(EVENT_TRANSFER_DONE)),
        "input": input_total,
        "analysis": max((a for _, a in consumer_busy), default=0.0),
    }
    return _report(method, config, times, measured, stages,
                   math.fsum(outputs), len(delivered), log)


def run_improved(config: PipelineConfig, stage_times: StageTimes = None) -> RunReport:
    """Output overlapped with compute; consumers read then analyze per block."""
    return _run_overlapped(METHOD_IMPROVED, config, stage_times)


def run_async(config: PipelineConfig, stage_times: StageTimes = None) -> RunReport:
    """Fully overlapped pipeline with prefetch-backed reads."""
    return _run_overlapped(METHOD_ASYNC, config, stage_times)


_RUNNERS = {
    METHOD_TRADITIONAL: run_traditional,
    METHOD_IMPROVED: run_improved,
    METHOD_ASYNC: run_async,
}


def run_method(method: str, config: PipelineConfig,
               stage_times: StageTimes = None) -> RunReport:
    if method not in _RUNNERS:
        raise InvalidInputError(f"unknown method {method!r}")
    return _RUNNERS[method](config, stage_times)


def compare_methods(config: PipelineConfig,
                    stage_times: StageTimes = None) -> ComparisonReport:
    """Run all three methods on one config; calibration is shared."""
    times = _resolve_times(config, stage_times)
    reports = {}
    for method in (METHOD_TRADITIONAL, METHOD_IMPROVED, METHOD_ASYNC):
        method_config = config
        if config.transport == TransportKind.FILE:
            method_config = replace(config,
                                    data_dir=str(Path(config.data_dir) / method))
        try:
            reports[method] = run_method(method, method_config, times)
        except PipebrokerError as exc:
            raise HarnessError(f"{method} run failed: {exc}", partial=reports) from exc
    t_trad = reports[METHOD_TRADITIONAL].measured_t2s
    t_impr = reports[METHOD_IMPROVED].measured_t2s
    t_async = reports[METHOD_ASYNC].measured_t2s

    def _ratio(baseline, candidate):
        return baseline / candidate if candidate > 0 else float("inf")

    return ComparisonReport(
        traditional=reports[METHOD_TRADITIONAL],
        improved=reports[METHOD_IMPROVED],
        asynchronous=reports[METHOD_ASYNC],
        speedup_improved_vs_traditional=_ratio(t_trad, t_impr),
        speedup_async_vs_improved=_ratio(t_impr, t_async),
        speedup_async_vs_traditional=_ratio(t_trad, t_async),
    )


def _median_timing(fn, samples: int = CALIBRATION_SAMPLES) -> float:
    timings = []
    for _ in range(samples):
        t0 = time.perf_counter()
        fn()
        timings.append(time.perf_counter() - t0)
    return statistics.median(timings)


def calibrate(config: PipelineConfig, n: int = 16, m: int = 4,
              directory=None) -> StageTimes:
    """Measure per-block stage times for a config.

    Kernel stages are timed directly (median of 32 samples, warmed up);
    write/read costs come from the step-interleaved calibration run on the
    configured directory, with any configured stage delays added on top.
    """
    workload = make_workload(config)
    workload.warmup()
    sample = gen_block(config.seed, BlockId(0, 0), config.block_size)
    t_comp = _median_timing(lambda: workload.compute(BlockId(0, 0)))
    t_analy = _median_timing(lambda: workload.analyze(sample))

    if directory is not None:
        mb_dir, cleanup = Path(directory), None
    elif config.data_dir:
        mb_dir, cleanup = Path(config.data_dir), None
    else:
        cleanup = tempfile.TemporaryDirectory(prefix="pipebroker-cal-")
        mb_dir = Path(cleanup.name)
    try:
        mb_dir.mkdir(parents=True, exist_ok=True)
        result = barrier_microbench(config.producers, config.consumers, n, m,
                                    config.block_size, mb_dir, seed=config.seed)
    finally:
        if cleanup is not None:
            cleanup.cleanup()
    t_o = result.t_o + workload.output_delay
    t_i = result.t_i + workload.input_delay
    return StageTimes(t_comp, t_o, t_i, t_analy)
