"""Offline calibration of per-block write and read cost on a directory.

Two procedures estimate t_o and t_i. The naive one writes everything, then
reads everything, so reads never compete with writes. The barrier one walks
P writers and Q readers through lock-step windows in which step i is written
while step i-1 is read, reproducing the contention a streaming pipeline
actually sees; barrier wait time is excluded from the timed sections.
"""

from __future__ import annotations

import csv
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .core import BlockId, StageTimes, gen_block, owned_range
from .errors import CorruptBlockError, InvalidConfigurationError, InvalidInputError
from .model import relative_error
from .transport import block_file_name, read_block_file, write_block_file

MODE_NAIVE = "naive"
MODE_BARRIER = "barrier"

CSV_FIELDS = ("mode", "P", "Q", "n", "m", "block_size", "t_o_seconds", "t_i_seconds")


@dataclass(frozen=True)
class MicrobenchResult:
    """Estimated per-block write/read cost from one calibration run."""

    mode: str
    P: int
    Q: int
    n: int
    m: int  # step count; 0 in naive mode
    block_size: int
    t_o: float
    t_i: float
    retries: int = 0  # reader polls that found a block not yet visible

    def as_dict(self) -> dict:
        return {"mode": self.mode, "P": self.P, "Q": self.Q, "n": self.n,
                "m": self.m, "block_size": self.block_size,
                "t_o_seconds": self.t_o, "t_i_seconds": self.t_i}


def adjust_blocks(n: int, m: int) -> int:
    """Largest multiple of m not above n (the per-writer count must split into steps)."""
    adjusted = (n // m) * m
    if adjusted < m:
        raise InvalidConfigurationError(f"n={n} leaves no full step of m={m}")
    return adjusted


def _validate(P: int, Q: int, n: int) -> None:
    if P < 1 or Q < 1 or n < 1:
        raise InvalidConfigurationError(f"P, Q, n must be >= 1, got {P}, {Q}, {n}")


def _run_workers(workers, barriers=()) -> None:
    """Run callables on their own threads; re-raise the first failure.

    A failing worker aborts the rendezvous so its peers cannot wait forever.
    """
    errors = [None] * len(workers)

    def _wrap(i, fn):
        def run():
            try:
                fn()
            except BaseException as exc:
                errors[i] = exc
                for b in barriers:
                    b.abort()
        return run

    threads = [threading.Thread(target=_wrap(i, fn), name=f"microbench-{i}")
               for i, fn in enumerate(workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    real = [e for e in errors if e is not None
            and not isinstance(e, threading.BrokenBarrierError)]
    if real:
        raise real[0]
    broken = [e for e in errors if e is not None]
    if broken:
        raise broken[0]


def _verify_files(directory, P: int, n: int, payloads) -> None:
    """Untimed post-run pass: every file present with the written checksum."""
    for p in range(P):
        for s in range(n):
            got = read_block_file(directory, BlockId(p, s), payloads[p][s].size)
            if got is None:
                raise CorruptBlockError(
                    f"{block_file_name(BlockId(p, s))} missing from {directory}")
            if got.checksum != payloads[p][s].checksum:
                raise CorruptBlockError(f"block ({p},{s}) checksum mismatch after run")


def _result(mode: str, P: int, Q: int, n: int, m: int, block_size: int,
            write_totals, read_totals, retries: int = 0) -> MicrobenchResult:
    T_o = sum(write_totals) / len(write_totals)
    T_i = sum(read_totals) / len(read_totals)
    return MicrobenchResult(mode, P, Q, n, m, block_size,
                            t_o=T_o / n, t_i=T_i * Q / (P * n), retries=retries)


def naive_microbench(P: int, Q: int, n: int, block_size: int, directory,
                     sync: bool = False, seed: int = 1) -> MicrobenchResult:
    """Write phase fully before read phase; no write/read contention."""
    _validate(P, Q, n)
    directory = Path(directory)
    payloads = [[gen_block(seed, BlockId(p, s), block_size) for s in range(n)]
                for p in range(P)]
    write_totals = [0.0] * P
    read_totals = [0.0] * Q
    start = threading.Barrier(P)

    def writer(p):
        def run():
            start.wait()
            t0 = time.perf_counter()
            for s in range(n):
                write_block_file(directory, payloads[p][s], sync=sync)
            write_totals[p] = time.perf_counter() - t0
        return run

    _run_workers([writer(p) for p in range(P)], barriers=[start])

    start_read = threading.Barrier(Q)

    def reader(q):
        def run():
            owned = owned_range(P, Q, q)
            start_read.wait()
            t0 = time.perf_counter()
            for p in owned:
                for s in range(n):
                    read_block_file(directory, BlockId(p, s), block_size)
            read_totals[q] = time.perf_counter() - t0
        return run

    _run_workers([reader(q) for q in range(Q)], barriers=[start_read])
    _verify_files(directory, P, n, payloads)
    return _result(MODE_NAIVE, P, Q, n, 0, block_size, write_totals, read_totals)


def barrier_microbench(P: int, Q: int, n: int, m: int, block_size: int, directory,
                       sync: bool = False, seed: int = 1) -> MicrobenchResult:
    """Step-interleaved write/read benchmark.

    Writers emit m steps of k = n/m blocks with a global rendezvous after
    each step; readers rendezvous first, then read step i-1 while step i is
    being written. Every worker passes the rendezvous exactly m times.
    """
    _validate(P, Q, n)
    if m < 2:
        raise InvalidConfigurationError(f"m must be >= 2, got {m}")
    if n % m != 0:
        raise InvalidConfigurationError(f"m={m} must divide n={n}")
    k = n // m
    directory = Path(directory)
    payloads = [[gen_block(seed, BlockId(p, s), block_size) for s in range(n)]
                for p in range(P)]
    write_totals = [0.0] * P
    read_totals = [0.0] * Q
    retry_counts = [0] * Q
    rendezvous = threading.Barrier(P + Q)

    def writer(p):
        def run():
            total = 0.0
            for step in range(m):
                t0 = time.perf_counter()
                for s in range(step * k, (step + 1) * k):
                    write_block_file(directory, payloads[p][s], sync=sync)
                total += time.perf_counter() - t0
                rendezvous.wait()
            write_totals[p] = total
        return run

    def reader(q):
        def run():
            owned = owned_range(P, Q, q)
            total = 0.0
            retries = 0
            rendezvous.wait()
            for step in range(m):
                t0 = time.perf_counter()
                for p in owned:
                    for s in range(step * k, (step + 1) * k):
                        while True:
                            got = read_block_file(directory, BlockId(p, s), block_size)
                            if got is not None:
                                break
                            retries += 1
                            time.sleep(0.0001)
                total += time.perf_counter() - t0
                if step < m - 1:
                    rendezvous.wait()
            read_totals[q] = total
            retry_counts[q] = retries
        return run

    _run_workers([writer(p) for p in range(P)] + [reader(q) for q in range(Q)],
                 barriers=[rendezvous])
    _verify_files(directory, P, n, payloads)
    return _result(MODE_BARRIER, P, Q, n, m, block_size,
                   write_totals, read_totals, retries=sum(retry_counts))


def accuracy_report(in_run: StageTimes, naive: MicrobenchResult,
                    barrier: MicrobenchResult) -> dict:
    """Relative error of each estimate against in-run values, per metric."""
    if in_run.t_o <= 0 or in_run.t_i <= 0:
        raise InvalidInputError("in-run t_o and t_i must be > 0")
    table = {}
    for metric, reference, naive_est, barrier_est in (
            ("t_o", in_run.t_o, naive.t_o, barrier.t_o),
            ("t_i", in_run.t_i, naive.t_i, barrier.t_i)):
        naive_err = relative_error(reference, naive_est)
        barrier_err = relative_error(reference, barrier_est)
        if barrier_err < naive_err:
            winner = MODE_BARRIER
        elif naive_err < barrier_err:
            winner = MODE_NAIVE
        else:
            winner = "tie"
        table[metric] = {
            "in_run": reference,
            "naive": naive_est,
            "barrier": barrier_est,
            "naive_error": naive_err,
            "barrier_error": barrier_err,
            "winner": winner,
        }
    return table


def write_csv(results, path) -> None:
    """One row per result, fixed column order, 6 significant digits."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for result in results:
            row = result.as_dict()
            row["t_o_seconds"] = f"{row['t_o_seconds']:.6g}"
            row["t_i_seconds"] = f"{row['t_i_seconds']:.6g}"
            writer.writerow(row)
