"""Hot per-byte kernels with two interchangeable backends.

Two routines dominate per-block CPU cost: the 64-bit block digest (computed
at block construction and re-checked after every transport hop) and the
sum-of-square-roots analysis kernel. Both ship as numba ``@njit`` functions
plus a pure-numpy twin that produces bit-identical results.

Backend selection is controlled by the ``PIPEBROKER_KERNELS`` environment
variable: ``auto`` (default; numba when importable, numpy otherwise),
``numba``, or ``numpy``. ``benchmarks/kernel_bench.py`` compares the two.

The digest is a multiplicative polynomial over Z/2^64 using the classic
64-bit FNV constants: ``h = h * PRIME + byte`` per byte, seeded with the
offset basis. The numpy twin evaluates the same polynomial chunk-wise with
precomputed multiplier powers, so the two backends agree exactly.
"""

from __future__ import annotations

import os

import numpy as np

DIGEST_PRIME = 0x100000001B3
DIGEST_INIT = 0xCBF29CE484222325
_MASK64 = 0xFFFFFFFFFFFFFFFF

_SQRT_TABLE = np.sqrt(np.arange(256, dtype=np.float64))

# Chunk length for the numpy digest path; one power table of this length is
# cached and reused for every chunk.
_CHUNK = 65536


def _as_u8(data) -> np.ndarray:
    if isinstance(data, np.ndarray):
        if data.dtype != np.uint8 or data.ndim != 1:
            raise TypeError("expected a 1-D uint8 array")
        return data
    return np.frombuffer(data, dtype=np.uint8)


# ---------------------------------------------------------------------------
# numpy backend


def _power_table():
    # pw[i] = PRIME**(_CHUNK-1-i) mod 2^64, built in python ints to stay
    # clear of numpy scalar-overflow warnings.
    global _PW, _P_CHUNK
    if _PW is None:
        acc = 1
        vals = [0] * _CHUNK
        for i in range(_CHUNK - 1, -1, -1):
            vals[i] = acc
            acc = (acc * DIGEST_PRIME) & _MASK64
        _PW = np.array(vals, dtype=np.uint64)
        _P_CHUNK = acc  # PRIME**_CHUNK mod 2^64
    return _PW, _P_CHUNK


_PW = None
_P_CHUNK = 0


def _digest_numpy(buf: np.ndarray) -> int:
    pw, p_chunk = _power_table()
    h = DIGEST_INIT
    n = buf.size
    full = n // _CHUNK
    for c in range(full):
        chunk = buf[c * _CHUNK:(c + 1) * _CHUNK].astype(np.uint64)
        dot = int(np.sum(chunk * pw, dtype=np.uint64))
        h = (h * p_chunk + dot) & _MASK64
    tail = n - full * _CHUNK
    if tail:
        chunk = buf[full * _CHUNK:].astype(np.uint64)
        dot = int(np.sum(chunk * pw[_CHUNK - tail:], dtype=np.uint64))
        h = (h * pow(DIGEST_PRIME, tail, 2 ** 64) + dot) & _MASK64
    return h


def _sum_sqrt_numpy(buf: np.ndarray, iters: int) -> float:
    total = 0.0
    for _ in range(iters):
        counts = np.bincount(buf, minlength=256).astype(np.float64)
        total += float(np.dot(counts, _SQRT_TABLE))
    return total


# ---------------------------------------------------------------------------
# numba backend (loaded lazily so PIPEBROKER_KERNELS=numpy skips the import)


def _load_numba():
    from numba import njit

    @njit(cache=True, nogil=True)
    def digest_nb(buf):
        h = np.uint64(0xCBF29CE484222325)
        p = np.uint64(0x100000001B3)
        for i in range(buf.size):
            h = h * p + np.uint64(buf[i])
        return h

    @njit(cache=True, nogil=True)
    def sum_sqrt_nb(buf, iters, table):
        total = 0.0
        for _ in range(iters):
            counts = np.zeros(256, dtype=np.float64)
            for i in range(buf.size):
                counts[buf[i]] += 1.0
            total += np.dot(counts, table)
        return total

    return digest_nb, sum_sqrt_nb


def _select_backend():
    requested = os.environ.get("PIPEBROKER_KERNELS", "auto").strip().lower()
    if requested not in ("auto", "numba", "numpy"):
        raise ValueError(
            f"PIPEBROKER_KERNELS must be auto, numba or numpy, got {requested!r}")
    if requested == "numpy":
        return "numpy", None
    try:
        impls = _load_numba()
    except ImportError:
        if requested == "numba":
            raise
        return "numpy", None
    return "numba", impls


_BACKEND_NAME, _NUMBA_IMPLS = _select_backend()


def backend() -> str:
    """Name of the active kernel backend ("numba" or "numpy")."""
    return _BACKEND_NAME


def digest64(data) -> int:
    """64-bit polynomial digest of a byte buffer."""
    buf = _as_u8(data)
    if _NUMBA_IMPLS is not None:
        return int(_NUMBA_IMPLS[0](buf))
    return _digest_numpy(buf)


def sum_sqrt_bytes(data, iters: int = 1) -> float:
    """Sum of sqrt over the buffer's unsigned byte values, repeated ``iters`` times.

    Each repetition rescans the buffer, so cost grows linearly with ``iters``
    while the value equals ``iters *`` the single-pass sum.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    buf = _as_u8(data)
    if _NUMBA_IMPLS is not None:
        return float(_NUMBA_IMPLS[1](buf, iters, _SQRT_TABLE))
    return _sum_sqrt_numpy(buf, iters)


def warmup() -> None:
    """Trigger JIT compilation outside any timed section."""
    probe = np.arange(16, dtype=np.uint8)
    digest64(probe)
    sum_sqrt_bytes(probe, 1)


def implementations():
    """Both backends as {name: (digest_fn, sum_sqrt_fn)} over uint8 arrays.

    Used by the cross-backend tests and the kernel benchmark; independent of
    the PIPEBROKER_KERNELS selection. The numba entry is absent when numba
    is not importable.
    """
    impls = {
        "numpy": (_digest_numpy, lambda buf, iters: _sum_sqrt_numpy(buf, iters)),
    }
    try:
        dig, ss = _NUMBA_IMPLS or _load_numba()
        impls["numba"] = (
            lambda buf: int(dig(buf)),
            lambda buf, iters: float(ss(buf, iters, _SQRT_TABLE)),
        )
    except ImportError:
        pass
    return impls
