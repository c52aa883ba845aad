"""Uniform asymmetric scalar quantization and calibrated distortion tables."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

from .errors import FormatError, NumericError, ShapeError

DEFAULT_BITS = (0, 2, 4, 8, 16)
PACKABLE_BITS = (2, 4, 8)
MIN_RANGE = 1e-12

Granularity = Literal["token", "channel"]


@dataclass(frozen=True)
class BitSet:
    widths: tuple[int, ...] = DEFAULT_BITS

    def __post_init__(self):
        w = tuple(int(b) for b in self.widths)
        if 0 not in w or 16 not in w:
            raise ValueError(f"bit set must contain 0 and 16, got {w}")
        if any(b2 <= b1 for b1, b2 in zip(w, w[1:])):
            raise ValueError(f"bit set must be strictly increasing, got {w}")
        if any(b % 2 or b < 0 or b > 16 for b in w):
            raise ValueError(f"bit-widths must be even and within [0, 16], got {w}")
        object.__setattr__(self, "widths", w)

    @classmethod
    def parse(cls, text: str) -> "BitSet":
        return cls(tuple(int(tok) for tok in text.split(",") if tok.strip()))

    def __iter__(self):
        return iter(self.widths)

    def __len__(self):
        return len(self.widths)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bits: int

    def __post_init__(self):
        if self.bits in (0, 16):
            return
        if not (math.isfinite(self.scale) and self.scale >= 0):
            raise NumericError(f"scale must be finite and >= 0, got {self.scale}")
        if not 0 <= self.zero_point <= (1 << self.bits) - 1:
            raise ValueError(f"zero point {self.zero_point} outside [0, {(1 << self.bits) - 1}]")


def fit_params(x: np.ndarray, bits: int, axis: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit ``(scale, zero_point)`` along ``axis`` for a min/max quantizer.

    The fitted range is widened to include 0 so that the zero point is an
    integer code in ``[0, 2^b - 1]`` for every input.
    """
    levels = (1 << bits) - 1
    lo = np.minimum(x.min(axis=axis, keepdims=True), 0.0)
    hi = np.maximum(x.max(axis=axis, keepdims=True), 0.0)
    scale = np.maximum(hi - lo, MIN_RANGE) / levels
    zero = np.clip(np.rint(-lo / scale), 0, levels).astype(np.int64)
    return scale, zero


def quantize_array(x, bits: int, axis: int = -1):
    """Quantize every unit of ``x`` along ``axis`` at ``bits`` (any width in 1..15).

    Returns ``(codes, scale, zero)`` with ``scale``/``zero`` keeping a size-1
    ``axis`` so they broadcast against ``codes``.
    """
    if not 1 <= bits <= 15:
        raise ValueError(f"uniform quantizer supports 1..15 bits, got {bits}")
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise NumericError("cannot quantize non-finite values")
    scale, zero = fit_params(x, bits, axis)
    codes = np.clip(np.rint(x / scale) + zero, 0, (1 << bits) - 1).astype(np.int64)
    return codes, scale, zero


def dequantize_array(codes, scale, zero) -> np.ndarray:
    return np.asarray(scale, np.float64) * (np.asarray(codes, np.int64) - np.asarray(zero, np.int64))


def quantize_unit(values, bits: int) -> tuple[np.ndarray, QuantParams]:
    """Quantize one token row or channel column at a storable width (2, 4 or 8)."""
    if bits not in PACKABLE_BITS:
        raise ValueError(f"quantize_unit supports bit-widths {PACKABLE_BITS}, got {bits}")
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ShapeError("cannot quantize an empty unit")
    codes, scale, zero = quantize_array(x, bits)
    return codes, QuantParams(float(scale[0]), int(zero[0]), bits)


def dequantize_unit(codes, params: QuantParams) -> np.ndarray:
    c = np.asarray(codes, dtype=np.int64)
    if (c < 0).any() or (c > (1 << params.bits) - 1).any():
        raise ValueError(f"codes out of range for {params.bits}-bit quantizer")
    return params.scale * (c - params.zero_point).astype(np.float64)


def bennett_sigma(value_range: float) -> float:
    """High-rate RMSE coefficient: per-coordinate error is ``sigma * 2**-b``."""
    if value_range < 0:
        raise ValueError(f"dynamic range must be non-negative, got {value_range}")
    return value_range / (2.0 * math.sqrt(3.0))


def unit_nmse(original, reconstructed) -> float:
    x = np.asarray(original, dtype=np.float64)
    xh = np.asarray(reconstructed, dtype=np.float64)
    if x.shape != xh.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {xh.shape}")
    denom = float(np.dot(x.ravel(), x.ravel()))
    if denom == 0.0:
        raise NumericError("NMSE undefined for a zero-norm unit")
    diff = (xh - x).ravel()
    return float(np.dot(diff, diff)) / denom


# --------------------------------------------------------------------------
# distortion tables
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DistortionTable(Mapping):
    """Normalized distortion per bit-width for one granularity.

    Behaves as a read-only mapping ``bits -> eps``; the allocator takes its
    action set from the keys.
    """

    eps: Mapping[int, float]
    granularity: Granularity = "token"
    provenance: str = ""
    _items: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        items = tuple(sorted((int(b), float(e)) for b, e in self.eps.items()))
        table = dict(items)
        if table.get(0) != 1.0 or table.get(16) != 0.0:
            raise ValueError("distortion tables require eps(0) = 1 and eps(16) = 0 exactly")
        vals = [e for _, e in items]
        if any(e2 >= e1 for e1, e2 in zip(vals, vals[1:])):
            raise ValueError(f"eps must be strictly decreasing in bit-width, got {table}")
        if self.granularity not in ("token", "channel"):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        object.__setattr__(self, "eps", table)
        object.__setattr__(self, "_items", items)

    def __getitem__(self, bits):
        return self.eps[int(bits)]

    def __iter__(self):
        return iter(b for b, _ in self._items)

    def __len__(self):
        return len(self._items)

    def restrict(self, bits: Iterable[int]) -> dict[int, float]:
        """Sub-table over an action subset (may drop 0 or 16, so returns a plain dict)."""
        return {int(b): self.eps[int(b)] for b in sorted(bits)}

    def to_json(self) -> dict:
        return {
            "granularity": self.granularity,
            "eps": {str(b): e for b, e in self._items},
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DistortionTable":
        try:
            return cls({int(b): float(e) for b, e in obj["eps"].items()},
                       obj.get("granularity", "token"), obj.get("provenance", ""))
        except (KeyError, TypeError, AttributeError) as exc:
            raise FormatError(f"malformed distortion table: {exc}") from exc


def dump_tables(tables: Mapping[str, DistortionTable], path) -> None:
    """Write ``{"v": table, "k": table}`` (or a single-table mapping) as JSON."""
    obj = {key: t.to_json() for key, t in tables.items()}
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_tables(path) -> dict[str, DistortionTable]:
    """Read a table file; a bare table is keyed by its granularity (``v``/``k``)."""
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read distortion tables from {path}: {exc}") from exc
    if "eps" in obj:
        t = DistortionTable.from_json(obj)
        return {"v" if t.granularity == "token" else "k": t}
    return {key: DistortionTable.from_json(val) for key, val in obj.items()}


def _units(cache, granularity: Granularity) -> np.ndarray:
    """All units of one cache as rows of a 2-D array."""
    if granularity == "token":
        v = cache.v
        return v.reshape(-1, v.shape[-1])
    k = cache.k
    # [L, H, T, d] -> [L, H, d, T]: channel columns become rows
    return np.swapaxes(k, 2, 3).reshape(-1, k.shape[2])


def calibrate_epsilon(
    caches: Sequence,
    granularity: Granularity,
    bits: BitSet | Iterable[int] = DEFAULT_BITS,
) -> DistortionTable:
    """Mean per-unit NMSE of the uniform quantizer at each storable width.

    Units are V token rows (``token``) or K channel columns (``channel``);
    zero-norm units are skipped. ``eps(0) = 1`` and ``eps(16) = 0`` by convention.
    """
    caches = list(caches)
    if not caches:
        raise ValueError("calibration needs at least one cache")
    if granularity not in ("token", "channel"):
        raise ValueError(f"unknown granularity {granularity!r}")
    widths = [b for b in (bits.widths if isinstance(bits, BitSet) else bits) if b not in (0, 16)]
    sums = {b: 0.0 for b in widths}
    count = 0
    for cache in caches:
        x = _units(cache, granularity).astype(np.float64)
        norms = np.einsum("ij,ij->i", x, x)
        x = x[norms > 0]
        norms = norms[norms > 0]
        count += x.shape[0]
        for b in widths:
            codes, scale, zero = quantize_array(x, b, axis=1)
            err = dequantize_array(codes, scale, zero) - x
            sums[b] += float((np.einsum("ij,ij->i", err, err) / norms).sum())
    if count == 0:
        raise NumericError("every calibration unit has zero norm")
    eps = {0: 1.0, 16: 0.0}
    eps.update({b: sums[b] / count for b in widths})
    ordered = [eps[b] for b in sorted(eps)]
    if any(e2 >= e1 for e1, e2 in zip(ordered, ordered[1:])):
        # e.g. units that are exactly representable, or nearly constant far from zero
        raise NumericError(f"degenerate calibration sample: eps is not strictly decreasing {eps}")
    provenance = f"uniform min/max quantizer, {len(caches)} cache(s), {count} {granularity} units"
    return DistortionTable(eps, granularity, provenance)
