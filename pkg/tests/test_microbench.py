import csv
import statistics
import threading

import pytest

from pipebroker.core import BlockId, StageTimes, gen_block
from pipebroker.errors import CorruptBlockError, InvalidConfigurationError
from pipebroker.microbench import (
    CSV_FIELDS,
    MODE_BARRIER,
    MODE_NAIVE,
    MicrobenchResult,
    _result,
    accuracy_report,
    adjust_blocks,
    barrier_microbench,
    naive_microbench,
    write_csv,
)
from pipebroker.transport import block_file_name, write_block_file


class TestAdjustBlocks:
    def test_rounds_down_to_multiple(self):
        assert adjust_blocks(100, 8) == 96

    def test_exact_multiple_unchanged(self):
        assert adjust_blocks(64, 4) == 64

    def test_too_few_blocks_rejected(self):
        with pytest.raises(InvalidConfigurationError):
            adjust_blocks(7, 8)


class TestFormulas:
    def test_t_i_scales_by_consumer_producer_ratio(self):
        # one reader covering four writers: per-block read cost is the
        # reader's total divided by the 4*n blocks it actually read
        result = _result(MODE_NAIVE, 4, 1, 100, 0, 4096,
                         write_totals=[0.1] * 4, read_totals=[0.8])
        assert result.t_i == pytest.approx(0.8 * 1 / (4 * 100))
        assert result.t_i == pytest.approx(0.002)

    def test_t_o_is_mean_total_over_n(self):
        result = _result(MODE_NAIVE, 1, 1, 10, 0, 4096,
                         write_totals=[0.050], read_totals=[0.020])
        assert result.t_o == pytest.approx(0.005)

    def test_worker_totals_averaged(self):
        result = _result(MODE_BARRIER, 2, 2, 10, 2, 1024,
                         write_totals=[0.040, 0.060], read_totals=[0.010, 0.030])
        assert result.t_o == pytest.approx(0.005)
        assert result.t_i == pytest.approx(0.002)


class TestNaiveMicrobench:
    def test_small_run_produces_positive_times(self, tmp_path):
        result = naive_microbench(2, 2, 8, 1024, tmp_path)
        assert result.mode == MODE_NAIVE
        assert result.P == 2 and result.Q == 2 and result.n == 8
        assert result.m == 0
        assert result.t_o > 0 and result.t_i > 0

    def test_all_files_present_after_run(self, tmp_path):
        naive_microbench(2, 1, 4, 512, tmp_path)
        names = {p.name for p in tmp_path.iterdir()}
        expected = {block_file_name(BlockId(p, s))
                    for p in range(2) for s in range(4)}
        assert expected <= names

    def test_invalid_worker_counts(self, tmp_path):
        with pytest.raises(InvalidConfigurationError):
            naive_microbench(0, 1, 4, 512, tmp_path)
        with pytest.raises(InvalidConfigurationError):
            naive_microbench(1, 1, 0, 512, tmp_path)

    def test_post_run_verification_detects_corruption(self, tmp_path, monkeypatch):
        import pipebroker.microbench as mb

        real_read = mb.read_block_file
        wrong = gen_block(99, BlockId(0, 0), 512)

        def lying_read(directory, block_id, block_size):
            if block_id == BlockId(0, 1):
                return wrong
            return real_read(directory, block_id, block_size)

        monkeypatch.setattr(mb, "read_block_file", lying_read)
        with pytest.raises(CorruptBlockError):
            naive_microbench(1, 1, 2, 512, tmp_path, seed=1)

    def test_estimates_stable_across_n(self, tmp_path):
        # medians across n should agree within a factor of two
        medians = []
        for n in (32, 64):
            runs = [naive_microbench(1, 1, n, 8192, tmp_path / f"{n}-{i}")
                    for i, _ in enumerate(range(3))
                    if (tmp_path / f"{n}-{i}").mkdir() or True]
            medians.append(statistics.median(r.t_o for r in runs))
        lo, hi = min(medians), max(medians)
        assert hi <= 2.0 * lo, medians


class TestBarrierMicrobench:
    def test_small_run(self, tmp_path):
        result = barrier_microbench(2, 2, 8, 4, 1024, tmp_path)
        assert result.mode == MODE_BARRIER
        assert result.m == 4
        assert result.t_o > 0 and result.t_i > 0

    def test_no_retries_in_steady_operation(self, tmp_path):
        result = barrier_microbench(2, 1, 16, 4, 2048, tmp_path)
        assert result.retries == 0

    def test_m_must_divide_n(self, tmp_path):
        with pytest.raises(InvalidConfigurationError):
            barrier_microbench(1, 1, 10, 3, 512, tmp_path)

    def test_m_must_be_at_least_two(self, tmp_path):
        with pytest.raises(InvalidConfigurationError):
            barrier_microbench(1, 1, 8, 1, 512, tmp_path)

    def test_barrier_count_per_worker(self, tmp_path, monkeypatch):
        # every writer and every reader must pass the rendezvous exactly m times
        waits = {}
        real_barrier = threading.Barrier

        class CountingBarrier(real_barrier):
            def wait(self, timeout=None):
                ident = threading.get_ident()
                waits[ident] = waits.get(ident, 0) + 1
                return super().wait(timeout)

        monkeypatch.setattr("pipebroker.microbench.threading.Barrier",
                            CountingBarrier)
        P, Q, m = 2, 2, 4
        barrier_microbench(P, Q, 8, m, 512, tmp_path)
        counts = sorted(waits.values())
        assert counts == [m] * (P + Q), counts

    def test_all_files_checksum_after_run(self, tmp_path):
        from pipebroker.transport import read_block_file

        barrier_microbench(2, 2, 8, 2, 1024, tmp_path)
        for p in range(2):
            for s in range(8):
                got = read_block_file(tmp_path, BlockId(p, s), 1024)
                assert got is not None
                expected = gen_block(1, BlockId(p, s), 1024)
                assert got.checksum == expected.checksum

    def test_reads_lag_writes_by_one_step(self, tmp_path, monkeypatch):
        # Timestamp every file op. The rendezvous forces: writes of step j
        # all land before any read of step j starts, and reads of step j all
        # finish before any write of step j+2 starts (the one-step lag).
        import time as time_mod

        import pipebroker.microbench as mb

        writes, reads = [], []
        real_write, real_read = mb.write_block_file, mb.read_block_file

        def timed_write(directory, payload, sync=False):
            t0 = time_mod.perf_counter()
            out = real_write(directory, payload, sync=sync)
            writes.append((payload.id.sequence, t0, time_mod.perf_counter()))
            return out

        def timed_read(directory, block_id, block_size):
            t0 = time_mod.perf_counter()
            out = real_read(directory, block_id, block_size)
            # skip the post-run verification pass, which runs on the caller
            on_worker = threading.current_thread().name.startswith("microbench-")
            if out is not None and on_worker:
                reads.append((block_id.sequence, t0, time_mod.perf_counter()))
            return out

        monkeypatch.setattr(mb, "write_block_file", timed_write)
        monkeypatch.setattr(mb, "read_block_file", timed_read)
        n, m = 12, 3
        k = n // m
        barrier_microbench(1, 1, n, m, 512, tmp_path)

        def step_of(sequence):
            return sequence // k

        for j in range(m):
            write_ends = [end for s, _, end in writes if step_of(s) == j]
            read_starts = [start for s, start, _ in reads if step_of(s) == j]
            assert min(read_starts) >= max(write_ends), f"step {j}"
        for j in range(m - 2):
            read_ends = [end for s, _, end in reads if step_of(s) == j]
            write_starts = [start for s, start, _ in writes
                            if step_of(s) == j + 2]
            assert max(read_ends) <= min(write_starts), f"step {j} lag"


class TestAccuracyReport:
    def _mb(self, mode, t_o, t_i):
        return MicrobenchResult(mode, 1, 1, 8, 2 if mode == MODE_BARRIER else 0,
                                1024, t_o=t_o, t_i=t_i)

    def test_barrier_wins_when_closer(self):
        report = accuracy_report(
            StageTimes(0.001, 10.0, 10.0, 0.001),
            naive=self._mb(MODE_NAIVE, 10.0, 6.0),
            barrier=self._mb(MODE_BARRIER, 10.0, 8.0))
        assert report["t_i"]["naive_error"] == pytest.approx(0.4)
        assert report["t_i"]["barrier_error"] == pytest.approx(0.2)
        assert report["t_i"]["winner"] == MODE_BARRIER

    def test_identical_inputs_have_zero_error(self):
        report = accuracy_report(
            StageTimes(0, 2.0, 3.0, 0),
            naive=self._mb(MODE_NAIVE, 2.0, 3.0),
            barrier=self._mb(MODE_BARRIER, 2.0, 3.0))
        for metric in ("t_o", "t_i"):
            assert report[metric]["naive_error"] == 0.0
            assert report[metric]["barrier_error"] == 0.0
            assert report[metric]["winner"] == "tie"

    def test_tie_reported_when_equal_errors(self):
        report = accuracy_report(
            StageTimes(0, 4.0, 4.0, 0),
            naive=self._mb(MODE_NAIVE, 5.0, 3.0),
            barrier=self._mb(MODE_BARRIER, 3.0, 5.0))
        assert report["t_o"]["winner"] == "tie"
        assert report["t_i"]["winner"] == "tie"


class TestCsvOutput:
    def test_schema_and_rows(self, tmp_path):
        results = [
            MicrobenchResult(MODE_NAIVE, 2, 2, 8, 0, 1024, 0.001, 0.0005),
            MicrobenchResult(MODE_BARRIER, 2, 2, 8, 4, 1024, 0.0012, 0.0006),
        ]
        path = tmp_path / "mb.csv"
        write_csv(results, path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == list(CSV_FIELDS)
        assert len(rows) == 3
        assert rows[1][0] == MODE_NAIVE
        assert rows[2][0] == MODE_BARRIER
        assert float(rows[1][6]) == pytest.approx(0.001)
