"""Packed mixed-bit storage for one ``(layer, kv_head)`` and attention decode over it.

Zone A holds bit-packed V rows (2/4/8-bit) and every kept K row, with K
channels grouped into 2/4/8-bit packed segments plus an unpacked 16-bit
segment. Zone B holds full-precision V rows of 16-bit tokens. Zone C holds
K/V appended during decoding.

Byte conventions: 2-bit codes sit four to a byte at bit offsets 0, 2, 4, 6;
4-bit codes two to a byte at offsets 0, 4; 8-bit codes one per byte.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import FormatError, ShapeError, TruncationError
from .quantizer import PACKABLE_BITS, quantize_array, quantize_unit, dequantize_unit

PACKED_MAGIC = b"RDKVP001"
PER_BYTE = {2: 4, 4: 2, 8: 1}
FULL_BITS = 16


# --------------------------------------------------------------------------
# byte packing
# --------------------------------------------------------------------------

def padded_length(n: int, bits: int) -> int:
    per = PER_BYTE[bits]
    return -(-n // per) * per


def pack_bits(codes, bits: int) -> np.ndarray:
    """Pack codes along the last axis, zero-padding it to a whole number of bytes."""
    if bits not in PER_BYTE:
        raise ValueError(f"can only pack 2, 4 or 8-bit codes, got {bits}")
    c = np.asarray(codes, dtype=np.int64)
    if (c < 0).any() or (c >= (1 << bits)).any():
        raise OverflowError(f"code does not fit in {bits} bits")
    per = PER_BYTE[bits]
    n = c.shape[-1]
    pad = padded_length(n, bits) - n
    if pad:
        c = np.concatenate([c, np.zeros(c.shape[:-1] + (pad,), np.int64)], axis=-1)
    c = c.astype(np.uint8).reshape(c.shape[:-1] + (c.shape[-1] // per, per))
    shifts = (np.arange(per, dtype=np.uint8) * bits)
    return np.bitwise_or.reduce(c << shifts, axis=-1).astype(np.uint8)


def unpack_bits(packed, bits: int, logical_len: int) -> np.ndarray:
    """Inverse of ``pack_bits``; positions at or beyond ``logical_len`` are dropped."""
    if bits not in PER_BYTE:
        raise ValueError(f"can only unpack 2, 4 or 8-bit codes, got {bits}")
    p = np.asarray(packed, dtype=np.uint8)
    per = PER_BYTE[bits]
    if logical_len > p.shape[-1] * per:
        raise ShapeError(f"{p.shape[-1]} bytes hold fewer than {logical_len} {bits}-bit codes")
    shifts = np.arange(per, dtype=np.uint8) * bits
    mask = np.uint8((1 << bits) - 1)
    codes = (p[..., None] >> shifts) & mask
    codes = codes.reshape(p.shape[:-1] + (p.shape[-1] * per,))
    return codes[..., :logical_len].astype(np.int64)


# --------------------------------------------------------------------------
# layout
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PackedSegment:
    """Uniform-width block: ``payload`` is ``[rows, bytes_per_row]``.

    For V segments each row is a token and ``scale``/``zero`` are per row;
    for K segments rows are kept tokens and ``scale``/``zero`` are per
    (padded) channel. ``index`` lists the original token or channel ids.
    """

    bits: int
    payload: np.ndarray
    logical_len: int
    scale: np.ndarray
    zero: np.ndarray
    pad_count: int
    index: np.ndarray

    @property
    def padded_len(self) -> int:
        return self.logical_len + self.pad_count

    @property
    def rows(self) -> int:
        return self.payload.shape[0]

    def codes(self) -> np.ndarray:
        return unpack_bits(self.payload, self.bits, self.padded_len)


@dataclass(frozen=True, eq=False)
class KZone:
    segments: tuple[PackedSegment, ...]
    full: np.ndarray            # [kept, n16] float32, channels full_index
    full_index: np.ndarray
    permutation: np.ndarray     # kept channels in segment order (2, 4, 8, 16)


@dataclass(frozen=True, eq=False)
class TriZoneCache:
    head_dim: int
    kept: np.ndarray                    # original ids of kept tokens; Zone A K row order
    v_segments: tuple[PackedSegment, ...]
    k_zone: KZone
    zone_b: np.ndarray                  # [n_v16, d] float32
    zone_b_index: np.ndarray
    zone_c_k: np.ndarray                # [n_new, d] float32
    zone_c_v: np.ndarray

    @property
    def n_new(self) -> int:
        return self.zone_c_k.shape[0]

    @property
    def permutation(self) -> np.ndarray:
        return self.k_zone.permutation


def _sorted_groups(bits: np.ndarray, widths: Sequence[int]):
    for b in widths:
        idx = np.flatnonzero(bits == b)
        if idx.size:
            yield b, idx


def _check_bits(name, bits, n):
    if bits.shape != (n,):
        raise ShapeError(f"{name} has shape {bits.shape}, expected ({n},)")
    bad = set(np.unique(bits).tolist()) - {0, *PACKABLE_BITS, FULL_BITS}
    if bad:
        raise ValueError(f"{name} holds unsupported bit-widths {sorted(bad)}")


def build_trizone(keys, values, alloc) -> TriZoneCache:
    """Quantize and pack one head according to ``alloc.v_bits`` / ``alloc.k_bits``."""
    k = np.asarray(keys, dtype=np.float32)
    v = np.asarray(values, dtype=np.float32)
    if k.shape != v.shape or k.ndim != 2:
        raise ShapeError(f"K {k.shape} and V {v.shape} must be equal 2-D shapes")
    T, d = k.shape
    v_bits = np.asarray(alloc.v_bits, dtype=np.int64)
    k_bits = np.asarray(alloc.k_bits, dtype=np.int64)
    _check_bits("v_bits", v_bits, T)
    _check_bits("k_bits", k_bits, d)

    kept = np.flatnonzero(v_bits > 0)

    v_segments = []
    for b, idx in _sorted_groups(v_bits, PACKABLE_BITS):
        codes, scale, zero = quantize_array(v[idx].astype(np.float64), b, axis=1)
        v_segments.append(PackedSegment(
            bits=b,
            payload=pack_bits(codes, b),
            logical_len=d,
            scale=scale[:, 0],
            zero=zero[:, 0],
            pad_count=padded_length(d, b) - d,
            index=idx,
        ))
    v16 = np.flatnonzero(v_bits == FULL_BITS)

    k_kept = k[kept].astype(np.float64)
    k_segments = []
    for b, ch in _sorted_groups(k_bits, PACKABLE_BITS):
        n_ch = ch.size
        pad = padded_length(n_ch, b) - n_ch
        if kept.size:
            codes, scale, zero = quantize_array(k_kept[:, ch], b, axis=0)
            scale, zero = scale[0], zero[0]
        else:
            codes = np.zeros((0, n_ch), np.int64)
            scale, zero = np.zeros(n_ch), np.zeros(n_ch, np.int64)
        k_segments.append(PackedSegment(
            bits=b,
            payload=pack_bits(codes, b),
            logical_len=n_ch,
            # padded channels: scale = zero = 0
            scale=np.concatenate([scale, np.zeros(pad)]),
            zero=np.concatenate([zero, np.zeros(pad, np.int64)]),
            pad_count=pad,
            index=ch,
        ))
    full_ch = np.flatnonzero(k_bits == FULL_BITS)
    perm = np.concatenate([s.index for s in k_segments] + [full_ch]).astype(np.int64)

    empty = np.zeros((0, d), np.float32)
    return TriZoneCache(
        head_dim=d,
        kept=kept,
        v_segments=tuple(v_segments),
        k_zone=KZone(tuple(k_segments), k[kept][:, full_ch].copy(), full_ch, perm),
        zone_b=v[v16].copy(),
        zone_b_index=v16,
        zone_c_k=empty,
        zone_c_v=empty.copy(),
    )


def fused_k_logits(q, k_zone: KZone, permutation: Optional[np.ndarray] = None) -> np.ndarray:
    """``q . k_hat_t`` for every kept token without materializing ``k_hat``.

    Per segment: ``sum_c (s_c q_c) code_tc - sum_c s_c z_c q_c``; the bias is
    formed once and subtracted after accumulation.
    """
    perm = k_zone.permutation if permutation is None else np.asarray(permutation)
    q = np.asarray(q, dtype=np.float64)
    qp = q[perm]
    n_rows = k_zone.full.shape[0]
    logits = np.zeros(n_rows)
    bias = 0.0
    offset = 0
    for seg in k_zone.segments:
        q_seg = np.zeros(seg.padded_len)
        q_seg[:seg.logical_len] = qp[offset:offset + seg.logical_len]
        offset += seg.logical_len
        scaled = seg.scale * q_seg
        logits += seg.codes() @ scaled
        bias += float(np.dot(scaled, seg.zero))
    if k_zone.full.shape[1]:
        logits += k_zone.full.astype(np.float64) @ qp[offset:]
    return logits - bias


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def packed_decode_step(q, cache: TriZoneCache) -> np.ndarray:
    """One decode-step attention output over Zones A, B and C with a single softmax."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    d = cache.head_dim
    if q.shape[0] != d:
        raise ShapeError(f"query has dim {q.shape[0]}, cache has {d}")
    n_kept = cache.kept.size
    if n_kept + cache.n_new == 0:
        raise ValueError("cannot attend over an empty cache")

    z_old = fused_k_logits(q, cache.k_zone) if n_kept else np.zeros(0)
    z_new = cache.zone_c_k.astype(np.float64) @ q
    a = _softmax(np.concatenate([z_old, z_new]) / np.sqrt(d))
    a_old, a_new = a[:n_kept], a[n_kept:]

    out = np.zeros(d)
    for seg in cache.v_segments:
        w = a_old[np.searchsorted(cache.kept, seg.index)] * seg.scale
        out += w @ seg.codes()[:, :d] - float(np.dot(w, seg.zero))
    if cache.zone_b_index.size:
        out += a_old[np.searchsorted(cache.kept, cache.zone_b_index)] @ cache.zone_b.astype(np.float64)
    if cache.n_new:
        out += a_new @ cache.zone_c_v.astype(np.float64)
    return out


def append_new_token(cache: TriZoneCache, k, v) -> TriZoneCache:
    """New cache with one more Zone C entry; Zones A and B are shared, not copied."""
    k = np.asarray(k, dtype=np.float32).reshape(-1)
    v = np.asarray(v, dtype=np.float32).reshape(-1)
    if k.shape[0] != cache.head_dim or v.shape[0] != cache.head_dim:
        raise ShapeError(f"new K/V must have dim {cache.head_dim}")
    return dataclasses.replace(
        cache,
        zone_c_k=np.vstack([cache.zone_c_k, k[None]]),
        zone_c_v=np.vstack([cache.zone_c_v, v[None]]),
    )


# --------------------------------------------------------------------------
# dense reference
# --------------------------------------------------------------------------

def dense_reconstruction(keys, values, alloc) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(kept, K_hat, V_hat)`` by quantizing each unit directly, unit by unit."""
    k = np.asarray(keys, dtype=np.float32).astype(np.float64)
    v = np.asarray(values, dtype=np.float32).astype(np.float64)
    v_bits = np.asarray(alloc.v_bits)
    k_bits = np.asarray(alloc.k_bits)
    kept = np.flatnonzero(v_bits > 0)
    v_hat = np.zeros((kept.size, v.shape[1]))
    for row, t in enumerate(kept):
        b = int(v_bits[t])
        if b == FULL_BITS:
            v_hat[row] = v[t]
        else:
            codes, params = quantize_unit(v[t], b)
            v_hat[row] = dequantize_unit(codes, params)
    k_hat = np.zeros((kept.size, k.shape[1]))
    if kept.size:
        for c in range(k.shape[1]):
            b = int(k_bits[c])
            if b == FULL_BITS:
                k_hat[:, c] = k[kept, c]
            elif b:
                codes, params = quantize_unit(k[kept, c], b)
                k_hat[:, c] = dequantize_unit(codes, params)
    return kept, k_hat, v_hat


def dense_decode(q, k_hat, v_hat, new_k=None, new_v=None) -> np.ndarray:
    """Plain softmax attention over ``[K_hat; new_k]`` and ``[V_hat; new_v]``."""
    q = np.asarray(q, dtype=np.float64)
    ks = [np.asarray(k_hat, np.float64)]
    vs = [np.asarray(v_hat, np.float64)]
    if new_k is not None and len(new_k):
        ks.append(np.asarray(new_k, np.float32).astype(np.float64))
        vs.append(np.asarray(new_v, np.float32).astype(np.float64))
    K = np.vstack(ks)
    V = np.vstack(vs)
    return _softmax(K @ q / np.sqrt(q.shape[0])) @ V


def unpack_cache(cache: TriZoneCache) -> tuple[np.ndarray, np.ndarray]:
    """Materialize ``(K_hat, V_hat)`` over kept tokens from the packed zones."""
    d = cache.head_dim
    n = cache.kept.size
    k_hat = np.zeros((n, d))
    for seg in cache.k_zone.segments:
        deq = seg.scale * (seg.codes() - seg.zero)
        k_hat[:, seg.index] = deq[:, :seg.logical_len]
    k_hat[:, cache.k_zone.full_index] = cache.k_zone.full
    v_hat = np.zeros((n, d))
    for seg in cache.v_segments:
        rows = np.searchsorted(cache.kept, seg.index)
        v_hat[rows] = (seg.scale[:, None] * (seg.codes() - seg.zero[:, None]))[:, :d]
    v_hat[np.searchsorted(cache.kept, cache.zone_b_index)] = cache.zone_b
    return k_hat, v_hat


# --------------------------------------------------------------------------
# storage accounting
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StorageReport:
    packed_bytes: float         # Zone A packed payload, padding included
    full_precision_bytes: float  # 16-bit K channels + Zone B, at 2 bytes per scalar
    padding_bytes: float
    metadata_bytes: float       # scales, zero points, permutation, index maps
    zone_c_bytes: float

    @property
    def cache_bytes(self) -> float:
        return self.packed_bytes + self.full_precision_bytes


def storage_report(cache: TriZoneCache) -> StorageReport:
    segments = list(cache.v_segments) + list(cache.k_zone.segments)
    packed = sum(s.payload.nbytes for s in segments)
    padding = 0.0
    meta = 0
    for s in cache.v_segments:
        padding += s.rows * s.pad_count * s.bits / 8
        meta += s.scale.size * 8 + s.index.size * 4
    for s in cache.k_zone.segments:
        padding += s.rows * s.pad_count * s.bits / 8
        meta += s.scale.size * 8
    meta += cache.k_zone.permutation.size * 4 + cache.kept.size * 4 + cache.zone_b_index.size * 4
    full = 2 * (cache.k_zone.full.size + cache.zone_b.size)
    return StorageReport(float(packed), float(full), padding, float(meta),
                         float(2 * (cache.zone_c_k.size + cache.zone_c_v.size)))


# --------------------------------------------------------------------------
# RDKVP001 container
# --------------------------------------------------------------------------

class _Blob:
    def __init__(self):
        self.parts: list[bytes] = []
        self.size = 0

    def add(self, arr: np.ndarray) -> list:
        arr = np.ascontiguousarray(arr)
        dtype = {"f": "<f", "i": "<i", "u": "<u"}[arr.dtype.kind] + str(arr.dtype.itemsize)
        raw = arr.astype(dtype, copy=False).tobytes()
        entry = [self.size, dtype, list(arr.shape)]
        self.parts.append(raw)
        self.size += len(raw)
        return entry


def _segment_manifest(seg: PackedSegment, blob: _Blob) -> dict:
    return {
        "bits": seg.bits,
        "logical_len": seg.logical_len,
        "pad_count": seg.pad_count,
        "payload": blob.add(seg.payload),
        "scale": blob.add(seg.scale.astype(np.float64)),
        "zero": blob.add(seg.zero.astype(np.int64)),
        "index": blob.add(seg.index.astype(np.int64)),
    }


def packed_to_bytes(caches: Mapping[tuple[int, int], TriZoneCache]) -> bytes:
    blob = _Blob()
    heads = []
    for (layer, h) in sorted(caches):
        c = caches[(layer, h)]
        heads.append({
            "layer": layer,
            "head": h,
            "d": c.head_dim,
            "kept": blob.add(c.kept.astype(np.int64)),
            "v_segments": [_segment_manifest(s, blob) for s in c.v_segments],
            "k_segments": [_segment_manifest(s, blob) for s in c.k_zone.segments],
            "k_full": blob.add(c.k_zone.full.astype(np.float32)),
            "k_full_index": blob.add(c.k_zone.full_index.astype(np.int64)),
            "permutation": blob.add(c.k_zone.permutation.astype(np.int64)),
            "zone_b": blob.add(c.zone_b.astype(np.float32)),
            "zone_b_index": blob.add(c.zone_b_index.astype(np.int64)),
            "zone_c_k": blob.add(c.zone_c_k.astype(np.float32)),
            "zone_c_v": blob.add(c.zone_c_v.astype(np.float32)),
        })
    manifest = json.dumps({"version": 1, "blob_bytes": blob.size, "heads": heads},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([PACKED_MAGIC, struct.pack("<I", len(manifest)), manifest] + blob.parts)


def _read_array(data: memoryview, entry) -> np.ndarray:
    offset, dtype, shape = entry
    n = int(np.prod(shape)) if shape else 1
    dt = np.dtype(dtype)
    end = offset + n * dt.itemsize
    if end > len(data):
        raise TruncationError("packed payload shorter than its manifest declares")
    return np.frombuffer(data[offset:end], dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def _read_segment(data, m) -> PackedSegment:
    return PackedSegment(
        bits=int(m["bits"]),
        payload=_read_array(data, m["payload"]),
        logical_len=int(m["logical_len"]),
        scale=_read_array(data, m["scale"]),
        zero=_read_array(data, m["zero"]),
        pad_count=int(m["pad_count"]),
        index=_read_array(data, m["index"]),
    )


def packed_from_bytes(data: bytes) -> dict[tuple[int, int], TriZoneCache]:
    if data[:len(PACKED_MAGIC)] != PACKED_MAGIC:
        raise FormatError(f"bad magic {data[:len(PACKED_MAGIC)]!r}, expected {PACKED_MAGIC!r}")
    start = len(PACKED_MAGIC) + 4
    if len(data) < start:
        raise TruncationError("packed container shorter than its preamble")
    (mlen,) = struct.unpack_from("<I", data, len(PACKED_MAGIC))
    try:
        manifest = json.loads(bytes(data[start:start + mlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}") from exc
    blob = memoryview(data)[start + mlen:]
    if len(blob) != manifest.get("blob_bytes"):
        raise TruncationError(f"blob holds {len(blob)} bytes, manifest declares {manifest.get('blob_bytes')}")
    out = {}
    try:
        for m in manifest["heads"]:
            k_segments = tuple(_read_segment(blob, s) for s in m["k_segments"])
            out[(m["layer"], m["head"])] = TriZoneCache(
                head_dim=int(m["d"]),
                kept=_read_array(blob, m["kept"]),
                v_segments=tuple(_read_segment(blob, s) for s in m["v_segments"]),
                k_zone=KZone(k_segments, _read_array(blob, m["k_full"]),
                             _read_array(blob, m["k_full_index"]), _read_array(blob, m["permutation"])),
                zone_b=_read_array(blob, m["zone_b"]),
                zone_b_index=_read_array(blob, m["zone_b_index"]),
                zone_c_k=_read_array(blob, m["zone_c_k"]),
                zone_c_v=_read_array(blob, m["zone_c_v"]),
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed manifest: {exc}") from exc
    return out


def save_packed(caches: Mapping[tuple[int, int], TriZoneCache], path) -> None:
    Path(path).write_bytes(packed_to_bytes(caches))


def load_packed(path) -> dict[tuple[int, int], TriZoneCache]:
    return packed_from_bytes(Path(path).read_bytes())
