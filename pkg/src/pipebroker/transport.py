"""Block transports: in-process channel, staging files, and localhost TCP.

A message endpoint pair moves payloads FIFO from one sender worker to one
receiver worker with a bounded buffer in between. The file transport stages
each block as its own file, made visible atomically via rename. Benchmarks
at the bottom measure per-block transfer cost for either path.
"""

from __future__ import annotations

import os
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path

from ._kernels import digest64
from .core import BlockId, BlockPayload, TransportKind, gen_block
from .errors import (
    CorruptBlockError,
    InvalidConfigurationError,
    InvalidInputError,
    MissingBlockError,
    TransportClosedError,
)

DEFAULT_CHANNEL_CAPACITY = 16
BENCH_WARMUP_BLOCKS = 3

_MAGIC = 0x50424B31  # "PBK1" little-endian
_EOS_SEQUENCE = 0xFFFFFFFF
_HEADER = struct.Struct("<IIIQ")  # magic, producer, sequence, length
_TRAILER = struct.Struct("<Q")  # checksum
_MAX_FRAME_PAYLOAD = 1 << 30  # sanity bound against garbage length fields


@dataclass(frozen=True)
class TransferMeasurement:
    """Per-block transfer cost over one transport."""

    kind: TransportKind
    block_size: int
    blocks: int
    per_block_time: float
    total_time: float


def _measurement(kind: TransportKind, block_size: int, blocks: int,
                 total_time: float) -> TransferMeasurement:
    if blocks < 1:
        raise InvalidInputError(f"blocks must be >= 1, got {blocks}")
    return TransferMeasurement(kind, block_size, blocks, total_time / blocks, total_time)


class _Channel:
    """Bounded FIFO shared by one ChannelSender / ChannelReceiver pair."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise InvalidConfigurationError(f"channel capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.items = deque()
        self.cond = threading.Condition()
        self.sender_closed = False
        self.receiver_closed = False


class ChannelSender:
    def __init__(self, chan: _Channel):
        self._chan = chan

    def send(self, payload: BlockPayload) -> None:
        chan = self._chan
        # Copy the bytes so the transfer pays a marshaling cost proportional
        # to the block size, like any real message path.
        wire = BlockPayload(payload.id, bytes(memoryview(payload.data)), payload.checksum)
        with chan.cond:
            while True:
                if chan.sender_closed or chan.receiver_closed:
                    raise TransportClosedError("channel is closed")
                if len(chan.items) < chan.capacity:
                    chan.items.append(wire)
                    chan.cond.notify_all()
                    return
                chan.cond.wait()

    def close(self) -> None:
        with self._chan.cond:
            self._chan.sender_closed = True
            self._chan.cond.notify_all()


class ChannelReceiver:
    def __init__(self, chan: _Channel):
        self._chan = chan

    def recv(self):
        chan = self._chan
        with chan.cond:
            while True:
                if chan.items:
                    payload = chan.items.popleft()
                    chan.cond.notify_all()
                    return payload
                if chan.sender_closed or chan.receiver_closed:
                    return None
                chan.cond.wait()

    def close(self) -> None:
        with self._chan.cond:
            self._chan.receiver_closed = True
            self._chan.cond.notify_all()


def channel_pair(capacity: int = DEFAULT_CHANNEL_CAPACITY):
    """One in-process sender/receiver endpoint pair over a bounded buffer."""
    chan = _Channel(capacity)
    return ChannelSender(chan), ChannelReceiver(chan)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        r = sock.recv_into(view[got:], n - got)
        if r == 0:
            raise TransportClosedError("connection closed mid-stream")
        got += r
    return bytes(buf)


class TcpSender:
    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._closed = False
        # sendall releases the GIL mid-buffer, so whole frames must be
        # serialized or two sending workers would interleave their bytes.
        self._lock = threading.Lock()

    def send(self, payload: BlockPayload) -> None:
        header = _HEADER.pack(_MAGIC, payload.id.producer_index,
                              payload.id.sequence, len(payload.data))
        frame = b"".join((header, payload.data, _TRAILER.pack(payload.checksum)))
        with self._lock:
            if self._closed:
                raise TransportClosedError("tcp sender is closed")
            try:
                self._sock.sendall(frame)
            except OSError as exc:
                raise TransportClosedError(f"tcp send failed: {exc}") from exc

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            try:
                self._sock.sendall(_HEADER.pack(_MAGIC, 0, _EOS_SEQUENCE, 0)
                                   + _TRAILER.pack(0))
            except OSError:
                pass
            self._sock.close()


class TcpReceiver:
    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._closed = False
        self._eos = False

    def recv(self):
        if self._closed or self._eos:
            return None
        try:
            frame = self._recv_frame()
        except OSError as exc:
            if self._closed:
                return None
            raise TransportClosedError(f"tcp recv failed: {exc}") from exc
        if frame is None:
            self._eos = True
        return frame

    def _recv_frame(self):
        magic, producer, sequence, length = _HEADER.unpack(_recv_exact(self._sock, _HEADER.size))
        if magic != _MAGIC:
            raise CorruptBlockError(f"bad frame magic {magic:#010x}")
        if length > _MAX_FRAME_PAYLOAD:
            raise CorruptBlockError(f"frame length {length} exceeds sanity bound")
        if length == 0 and sequence == _EOS_SEQUENCE:
            _recv_exact(self._sock, _TRAILER.size)
            return None
        data = _recv_exact(self._sock, length)
        (checksum,) = _TRAILER.unpack(_recv_exact(self._sock, _TRAILER.size))
        actual = digest64(data)
        if actual != checksum:
            raise CorruptBlockError(
                f"block ({producer},{sequence}): checksum {actual:#018x} != frame {checksum:#018x}")
        return BlockPayload(BlockId(producer, sequence), data, checksum)

    def close(self) -> None:
        self._closed = True
        self._sock.close()


class TcpListener:
    """Loopback listener; accept() yields one receiver endpoint per connection."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._sock = socket.create_server((host, port))
        self.address = self._sock.getsockname()

    def accept(self) -> TcpReceiver:
        conn, _ = self._sock.accept()
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return TcpReceiver(conn)

    def close(self) -> None:
        self._sock.close()


def tcp_connect(address) -> TcpSender:
    sock = socket.create_connection(address)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return TcpSender(sock)


def message_pair(kind: TransportKind, capacity: int = DEFAULT_CHANNEL_CAPACITY):
    """Connected (sender, receiver) endpoints for a message transport kind."""
    if kind == TransportKind.CHANNEL:
        return channel_pair(capacity)
    if kind == TransportKind.TCP:
        listener = TcpListener()
        pending = {}

        def _accept():
            pending["receiver"] = listener.accept()

        t = threading.Thread(target=_accept, name="tcp-accept")
        t.start()
        sender = tcp_connect(listener.address)
        t.join()
        listener.close()
        return sender, pending["receiver"]
    raise InvalidConfigurationError(f"{kind.value} is not a message transport")


def send_block(endpoint, payload: BlockPayload) -> None:
    """Enqueue one payload for the peer, blocking on backpressure."""
    endpoint.send(payload)


def recv_block(endpoint):
    """Next payload in per-sender FIFO order, or None at end of stream."""
    return endpoint.recv()


def block_file_name(block_id: BlockId) -> str:
    return f"blk_{block_id.producer_index}_{block_id.sequence}.bin"


def write_block_file(directory, payload: BlockPayload, sync: bool = False) -> Path:
    """Stage one block as a file, visible only once complete.

    Bytes go to a temporary name first; the atomic rename guarantees a reader
    never sees a partial file under the final name.
    """
    directory = Path(directory)
    final = directory / block_file_name(payload.id)
    tmp = final.with_name(final.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload.data)
        if sync:
            fh.flush()
            os.fsync(fh.fileno())
    os.replace(tmp, final)
    return final


def read_block_file(directory, block_id: BlockId, block_size: int):
    """Read a staged block if present; None means not yet available."""
    path = Path(directory) / block_file_name(block_id)
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        return None
    if len(data) != block_size:
        raise CorruptBlockError(
            f"{path}: expected {block_size} bytes, found {len(data)}")
    return BlockPayload.wrap(block_id, data)


def await_block_file(directory, block_id: BlockId, block_size: int,
                     timeout: float = None) -> BlockPayload:
    """Poll for a staged block with exponential backoff (0.1 ms up to 10 ms)."""
    deadline = None if timeout is None else time.perf_counter() + timeout
    delay = 0.0001
    while True:
        payload = read_block_file(directory, block_id, block_size)
        if payload is not None:
            return payload
        if deadline is not None and time.perf_counter() >= deadline:
            raise MissingBlockError(
                f"block {block_id} did not appear in {directory} within {timeout}s")
        time.sleep(delay)
        delay = min(delay * 2, 0.01)


def bench_message_transfer(n: int, block_size: int,
                           kind: TransportKind = TransportKind.CHANNEL,
                           capacity: int = DEFAULT_CHANNEL_CAPACITY,
                           seed: int = 1) -> TransferMeasurement:
    """Send n generated blocks to a draining receiver; time the sender side only."""
    if n < 1:
        raise InvalidInputError(f"n must be >= 1, got {n}")
    payloads = [gen_block(seed, BlockId(0, s), block_size)
                for s in range(BENCH_WARMUP_BLOCKS + n)]
    sender, receiver = message_pair(kind, capacity)

    def _drain():
        while receiver.recv() is not None:
            pass

    drainer = threading.Thread(target=_drain, name="bench-drain")
    drainer.start()
    try:
        for p in payloads[:BENCH_WARMUP_BLOCKS]:
            sender.send(p)
        t0 = time.perf_counter()
        for p in payloads[BENCH_WARMUP_BLOCKS:]:
            sender.send(p)
        total = time.perf_counter() - t0
    finally:
        sender.close()
        drainer.join()
        receiver.close()
    return _measurement(kind, block_size, n, total)


def bench_file_transfer(n: int, block_size: int, directory,
                        sync: bool = True, seed: int = 1) -> TransferMeasurement:
    """Write all n blocks, then read them all back; cost is (write + read) / n."""
    if n < 1:
        raise InvalidInputError(f"n must be >= 1, got {n}")
    directory = Path(directory)
    payloads = [gen_block(seed, BlockId(0, s), block_size)
                for s in range(BENCH_WARMUP_BLOCKS + n)]
    for p in payloads[:BENCH_WARMUP_BLOCKS]:
        path = write_block_file(directory, p, sync=sync)
        read_block_file(directory, p.id, block_size)
        path.unlink()

    timed = payloads[BENCH_WARMUP_BLOCKS:]
    t0 = time.perf_counter()
    for p in timed:
        write_block_file(directory, p, sync=sync)
    t_write = time.perf_counter() - t0

    t0 = time.perf_counter()
    got = [read_block_file(directory, p.id, block_size) for p in timed]
    t_read = time.perf_counter() - t0

    for sent, received in zip(timed, got):
        if received is None or received.checksum != sent.checksum:
            raise CorruptBlockError(f"block {sent.id} read back wrong from {directory}")
        (directory / block_file_name(sent.id)).unlink()
    return _measurement(TransportKind.FILE, block_size, n, t_write + t_read)


def transfer_ratio(file_m: TransferMeasurement, msg_m: TransferMeasurement) -> float:
    """How much slower the file path is per block, at matched block size."""
    if file_m.block_size != msg_m.block_size:
        raise InvalidInputError(
            f"block sizes differ: {file_m.block_size} vs {msg_m.block_size}")
    if msg_m.per_block_time <= 0:
        raise InvalidInputError("message per_block_time must be > 0")
    return file_m.per_block_time / msg_m.per_block_time
