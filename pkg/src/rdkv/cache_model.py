"""Cache tensors, the attention reference, the ``RDKVC001`` container and synthetic fixtures.

Tensors are held as float32 with layout ``[layer, head, token, channel]``.
Softmax and dot products accumulate in float64.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Optional, Union

import numpy as np

from .errors import FormatError, NumericError, ShapeError, TruncationError

MAGIC = b"RDKVC001"
FORMAT_VERSION = 1
LAYOUT = "layer-major, head-major, row-major"

PathOrFile = Union[str, os.PathLike, BinaryIO]


@dataclass(frozen=True)
class CacheShape:
    layers: int
    q_heads: int
    kv_heads: int
    head_dim: int
    seq_len: int

    def __post_init__(self):
        for name in ("layers", "q_heads", "kv_heads", "head_dim", "seq_len"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ShapeError(f"{name} must be a positive integer, got {value!r}")
        if self.q_heads % self.kv_heads:
            raise ShapeError(
                f"q_heads={self.q_heads} is not a multiple of kv_heads={self.kv_heads}"
            )

    @property
    def group(self) -> int:
        """Query heads per KV head."""
        return self.q_heads // self.kv_heads


@dataclass(frozen=True)
class ProbeConfig:
    window: int = 32
    pool_kernel: int = 5

    def __post_init__(self):
        if self.window < 1:
            raise ValueError(f"probe window must be >= 1, got {self.window}")
        if self.pool_kernel < 1 or self.pool_kernel % 2 == 0:
            raise ValueError(f"pool kernel must be odd and >= 1, got {self.pool_kernel}")


def _frozen_f32(x) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float32)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class KVCache:
    """Prefill keys/values for every layer plus the trailing probe-window queries.

    ``k`` and ``v`` are ``[L, H_kv, T, d]``; ``probe_q`` is ``[L, H_q, S_w, d]``
    holding the queries at absolute positions ``T - S_w .. T - 1``.
    """

    shape: CacheShape
    k: np.ndarray
    v: np.ndarray
    probe_q: np.ndarray

    def __post_init__(self):
        s = self.shape
        object.__setattr__(self, "k", _frozen_f32(self.k))
        object.__setattr__(self, "v", _frozen_f32(self.v))
        object.__setattr__(self, "probe_q", _frozen_f32(self.probe_q))
        kv_shape = (s.layers, s.kv_heads, s.seq_len, s.head_dim)
        if self.k.shape != kv_shape or self.v.shape != kv_shape:
            raise ShapeError(f"K/V must be {kv_shape}, got {self.k.shape} and {self.v.shape}")
        q = self.probe_q
        if q.ndim != 4 or q.shape[:2] != (s.layers, s.q_heads) or q.shape[3] != s.head_dim:
            raise ShapeError(
                f"probe_q must be ({s.layers}, {s.q_heads}, S_w, {s.head_dim}), got {q.shape}"
            )
        if not 1 <= q.shape[2] <= s.seq_len:
            raise ShapeError(f"probe window {q.shape[2]} not in [1, T={s.seq_len}]")
        for name in ("k", "v", "probe_q"):
            if not np.isfinite(getattr(self, name)).all():
                raise NumericError(f"{name} contains non-finite entries")

    @property
    def window(self) -> int:
        return self.probe_q.shape[2]

    def probe_positions(self) -> np.ndarray:
        """Absolute token position of each probe query (its last visible key)."""
        T = self.shape.seq_len
        return np.arange(T - self.window, T)

    def head(self, layer: int, kv_head: int) -> tuple[np.ndarray, np.ndarray]:
        return self.k[layer, kv_head], self.v[layer, kv_head]

    def query_group(self, layer: int, kv_head: int) -> np.ndarray:
        """Probe queries ``[g, S_w, d]`` of the query heads sharing ``kv_head``."""
        g = self.shape.group
        return self.probe_q[layer, kv_head * g:(kv_head + 1) * g]

    def __eq__(self, other):
        if not isinstance(other, KVCache):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.k.shape == other.k.shape
            and self.probe_q.shape == other.probe_q.shape
            and self.k.tobytes() == other.k.tobytes()
            and self.v.tobytes() == other.v.tobytes()
            and self.probe_q.tobytes() == other.probe_q.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class AttentionMatrix:
    """Row-stochastic attention weights ``[queries, T]`` (float64)."""

    a: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        if a.ndim != 2:
            raise ShapeError(f"attention matrix must be 2-D, got shape {a.shape}")
        a.setflags(write=False)
        object.__setattr__(self, "a", a)

    @property
    def shape(self):
        return self.a.shape


def _check_finite(name: str, x: np.ndarray):
    if not np.isfinite(x).all():
        raise NumericError(f"{name} contains non-finite entries")


def attention_probe(q_window, keys, causal_offsets=None) -> AttentionMatrix:
    """Causally masked softmax attention of ``q_window`` over ``keys``.

    Query ``i`` sees tokens ``0..causal_offsets[i]``. With no offsets every
    query sees all ``T`` keys.
    """
    q = np.atleast_2d(np.asarray(q_window, dtype=np.float64))
    k = np.asarray(keys, dtype=np.float64)
    if k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise ShapeError(f"query dim {q.shape} does not match keys {k.shape}")
    _check_finite("q_window", q)
    _check_finite("keys", k)
    n, d = q.shape
    T = k.shape[0]
    if causal_offsets is None:
        offsets = np.full(n, T - 1)
    else:
        offsets = np.asarray(causal_offsets, dtype=np.int64).reshape(-1)
        if offsets.shape[0] != n:
            raise ShapeError(f"{offsets.shape[0]} offsets for {n} queries")
        if (offsets < 0).any() or (offsets >= T).any():
            raise ShapeError(f"causal offsets must lie in [0, {T})")

    logits = q @ k.T / np.sqrt(d)
    visible = np.arange(T)[None, :] <= offsets[:, None]
    logits = np.where(visible, logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    a = e / e.sum(axis=1, keepdims=True)
    return AttentionMatrix(a)


def attention_output(a, values) -> np.ndarray:
    """``o[i] = sum_t a[i, t] * v[t]`` in float64."""
    probs = a.a if isinstance(a, AttentionMatrix) else np.atleast_2d(np.asarray(a, np.float64))
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2 or probs.shape[1] != v.shape[0]:
        raise ShapeError(f"attention {probs.shape} incompatible with values {v.shape}")
    return probs @ v


# --------------------------------------------------------------------------
# RDKVC001 container
# --------------------------------------------------------------------------

def cache_to_bytes(cache: KVCache) -> bytes:
    s = cache.shape
    header = {
        "version": FORMAT_VERSION,
        "L": s.layers,
        "H_q": s.q_heads,
        "H_kv": s.kv_heads,
        "d": s.head_dim,
        "T": s.seq_len,
        "S_w": cache.window,
        "dtype": "f32",
        "layout": LAYOUT,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(head)), head]
    for arr in (cache.k, cache.v, cache.probe_q):
        parts.append(arr.astype("<f4", copy=False).tobytes(order="C"))
    return b"".join(parts)


def cache_from_bytes(data: bytes) -> KVCache:
    if len(data) < len(MAGIC) + 4:
        raise TruncationError("container shorter than its fixed preamble")
    if data[:len(MAGIC)] != MAGIC:
        raise FormatError(f"bad magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    if len(data) < start + hlen:
        raise TruncationError("header truncated")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
        shape = CacheShape(header["L"], header["H_q"], header["H_kv"], header["d"], header["T"])
        window = int(header["S_w"])
    except (KeyError, TypeError, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION or header.get("dtype") != "f32":
        raise FormatError(f"unsupported version/dtype in header {header}")

    kv_shape = (shape.layers, shape.kv_heads, shape.seq_len, shape.head_dim)
    q_shape = (shape.layers, shape.q_heads, window, shape.head_dim)
    sizes = [int(np.prod(kv_shape)), int(np.prod(kv_shape)), int(np.prod(q_shape))]
    payload = memoryview(data)[start + hlen:]
    expected = 4 * sum(sizes)
    if len(payload) < expected:
        raise TruncationError(f"payload holds {len(payload)} bytes, header implies {expected}")
    if len(payload) > expected:
        raise FormatError(f"payload holds {len(payload)} bytes, header implies {expected}")

    flat = np.frombuffer(payload, dtype="<f4")
    k = flat[:sizes[0]].reshape(kv_shape)
    v = flat[sizes[0]:sizes[0] + sizes[1]].reshape(kv_shape)
    q = flat[sizes[0] + sizes[1]:].reshape(q_shape)
    return KVCache(shape, k, v, q)


def save_cache(cache: KVCache, destination: Optional[PathOrFile] = None) -> bytes:
    """Serialize ``cache``; also write it to ``destination`` when one is given."""
    blob = cache_to_bytes(cache)
    if destination is None:
        return blob
    if hasattr(destination, "write"):
        destination.write(blob)
    else:
        Path(destination).write_bytes(blob)
    return blob


def load_cache(source: Union[PathOrFile, bytes]) -> KVCache:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return cache_from_bytes(bytes(source))
    if hasattr(source, "read"):
        return cache_from_bytes(source.read())
    return cache_from_bytes(Path(source).read_bytes())


# --------------------------------------------------------------------------
# synthetic fixtures
# --------------------------------------------------------------------------

def _seed_streams(seed: int):
    return np.random.SeedSequence(seed).spawn(2)


def synthetic_outlier_channels(seed: int, shape: CacheShape, outlier_channels: int) -> np.ndarray:
    """Channels that ``gen_synthetic_cache`` scales, as ``[L, H_kv, outlier_channels]``."""
    if not 0 <= outlier_channels <= shape.head_dim:
        raise ShapeError(f"outlier_channels={outlier_channels} not in [0, d={shape.head_dim}]")
    rng = np.random.default_rng(_seed_streams(seed)[0])
    out = np.empty((shape.layers, shape.kv_heads, outlier_channels), dtype=np.int64)
    for layer in range(shape.layers):
        for h in range(shape.kv_heads):
            out[layer, h] = np.sort(rng.choice(shape.head_dim, outlier_channels, replace=False))
    return out


def gen_synthetic_cache(
    seed: int,
    shape: CacheShape,
    outlier_channels: int = 0,
    outlier_scale: float = 1.0,
    window: int = 32,
) -> KVCache:
    """Standard-normal Q/K/V with a few K channels per head scaled by ``outlier_scale``."""
    chans = synthetic_outlier_channels(seed, shape, outlier_channels)
    window = min(window, shape.seq_len)
    rng = np.random.default_rng(_seed_streams(seed)[1])
    kv_shape = (shape.layers, shape.kv_heads, shape.seq_len, shape.head_dim)
    q = rng.standard_normal((shape.layers, shape.q_heads, window, shape.head_dim), dtype=np.float32)
    k = rng.standard_normal(kv_shape, dtype=np.float32)
    v = rng.standard_normal(kv_shape, dtype=np.float32)
    for layer in range(shape.layers):
        for h in range(shape.kv_heads):
            k[layer, h][:, chans[layer, h]] *= np.float32(outlier_scale)
    return KVCache(shape, k, v, q)
