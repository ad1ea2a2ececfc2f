"""Staged data pipeline: analytical model, staging runtime, calibration.

The package splits a dataset into fixed-size blocks, streams them from
compute producers to analysis consumers over a configurable transport, and
predicts end-to-end wall time for three execution methods (sequential,
output-overlapped, fully asynchronous) from per-block stage costs.
"""

from ._kernels import backend, digest64, sum_sqrt_bytes
from .broker import DataBroker, DrainReport, InstrumentationLog, IoTask, TaskScheduler
from .core import (
    BlockId,
    BlockPayload,
    Clock,
    PipelineConfig,
    SleepWorkloadSpec,
    StageTimes,
    SyntheticWorkloadSpec,
    TransportKind,
    blocks_count,
    gen_block,
    static_mapping,
)
from .errors import (
    CorruptBlockError,
    DeliveryExhaustedError,
    DrainTimeoutError,
    DuplicateWriteError,
    HarnessError,
    InvalidConfigurationError,
    InvalidInputError,
    MissingBlockError,
    OwnershipError,
    PipebrokerError,
    TransportClosedError,
)
from .harness import (
    ComparisonReport,
    RunReport,
    analysis_kernel,
    calibrate,
    compare_methods,
    run_async,
    run_improved,
    run_traditional,
)
from .microbench import MicrobenchResult, accuracy_report, barrier_microbench, naive_microbench
from .model import (
    Prediction,
    StageTotals,
    balance_allocation,
    predict_async,
    predict_improved,
    predict_traditional,
    relative_error,
    stage_totals,
)
from .transport import (
    TransferMeasurement,
    bench_file_transfer,
    bench_message_transfer,
    channel_pair,
    read_block_file,
    recv_block,
    send_block,
    transfer_ratio,
    write_block_file,
)

__version__ = "0.1.0"
