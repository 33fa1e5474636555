"""Group-wise uniform integer quantization of weight matrices.

Every PTQ method in the pool reduces to this codec: per-group scales (and
zero points in asymmetric mode) along the input dimension of a weight matrix,
codes clamped to the B-bit grid. Quantization is simulated: matmuls run on
dequantized float64 values, integer kernels are a non-goal.

Grouping runs along axis 0 (the input dim of `x @ W`-oriented weights) with
the effective group size min(group_size, rows); the last group may be short.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numerics import as_matrix

# scales below this are treated as "group is constant"
_TINY = 1e-30


@dataclass(frozen=True)
class QuantConfig:
    """Codec parameters shared by all methods in a pool.

    bits: target weight bit-width, 2..8.
    group_size: rows per quantization group (clamped to the matrix height).
    symmetric: signed codes around zero vs. unsigned with a zero point.
    act_bits: per-tensor activation fake-quant width, or None to keep
        activations full precision (the default).
    """

    bits: int = 4
    group_size: int = 128
    symmetric: bool = False
    act_bits: Optional[int] = None

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ValueError(f"bits must be in [2, 8], got {self.bits}")
        if self.group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {self.group_size}")
        if self.act_bits is not None and not 4 <= self.act_bits <= 8:
            raise ValueError(f"act_bits must be in [4, 8], got {self.act_bits}")

    def code_range(self) -> tuple[int, int]:
        if self.symmetric:
            return -(2 ** (self.bits - 1)), 2 ** (self.bits - 1) - 1
        return 0, 2 ** self.bits - 1


@dataclass
class GroupQuantTensor:
    """Integer codes plus per-group scale/zero-point for one weight matrix.

    codes has the source matrix shape; scales/zero_points have shape
    (n_groups, cols). Dequantization is (codes + zero_points) * scales with
    group g covering rows [g*group_size, (g+1)*group_size). zero_points are
    all-zero in symmetric mode.
    """

    codes: np.ndarray
    scales: np.ndarray
    zero_points: np.ndarray
    bits: int
    group_size: int
    symmetric: bool
    orig_rows: int
    orig_cols: int
    group_axis: int = 0

    def __post_init__(self):
        lo, hi = (-(2 ** (self.bits - 1)), 2 ** (self.bits - 1) - 1) if self.symmetric \
            else (0, 2 ** self.bits - 1)
        if self.codes.min(initial=0) < lo or self.codes.max(initial=0) > hi:
            raise ValueError("codes out of range for bit-width")
        if (self.scales < 0).any():
            raise ValueError("scales must be non-negative")

    @property
    def n_groups(self) -> int:
        return self.scales.shape[0]


def _group_slices(rows: int, group_size: int):
    g = min(group_size, rows)
    return [(s, min(s + g, rows)) for s in range(0, rows, g)]


def quantize_rtn(w, cfg: QuantConfig) -> GroupQuantTensor:
    """Round-to-nearest group-wise quantization.

    Asymmetric: scale = (max-min)/(2^B-1), zero point = min/scale, codes in
    [0, 2^B-1]. Symmetric: scale = max|w|/(2^(B-1)-1), codes in
    [-2^(B-1), 2^(B-1)-1]. Constant nonzero groups get an exact encoding via
    a synthetic positive scale; all-zero groups get scale 0.
    """
    w = as_matrix(w, "w")
    rows, cols = w.shape
    slices = _group_slices(rows, cfg.group_size)
    lo, hi = cfg.code_range()

    codes = np.zeros((rows, cols), dtype=np.int16)
    scales = np.zeros((len(slices), cols), dtype=np.float64)
    zps = np.zeros((len(slices), cols), dtype=np.float64)

    for gi, (s, e) in enumerate(slices):
        block = w[s:e]
        sc, zp = group_params(block, cfg)
        scales[gi] = sc
        zps[gi] = zp
        codes[s:e] = encode(block, sc, zp, cfg)

    return GroupQuantTensor(
        codes=codes, scales=scales, zero_points=zps,
        bits=cfg.bits, group_size=min(cfg.group_size, rows), symmetric=cfg.symmetric,
        orig_rows=rows, orig_cols=cols,
    )


def _snap_f32(a: np.ndarray) -> np.ndarray:
    # scales/zero-points live on disk as float32; freezing them at
    # construction keeps save -> load -> forward bit-exact
    return a.astype(np.float32).astype(np.float64)


def group_params(block: np.ndarray, cfg: QuantConfig):
    """Per-column (scale, zero_point) for one group of rows.

    Values are snapped to float32 (their on-disk precision). The round-trip
    bound |w - deq| <= scale/2 holds for any (scale, zp) pair used
    consistently by encode and dequantize, so snapping costs nothing.
    """
    lo, hi = cfg.code_range()
    if cfg.symmetric:
        amax = np.abs(block).max(axis=0)
        return _snap_f32(amax / hi), np.zeros(block.shape[1], dtype=np.float64)
    wmin = block.min(axis=0)
    wmax = block.max(axis=0)
    rng = wmax - wmin
    sc = rng / hi
    # constant columns: zero range but possibly nonzero value
    const = rng <= _TINY
    const_nonzero = const & (np.abs(wmax) > _TINY)
    sc = np.where(const_nonzero, np.abs(wmax) / hi, sc)
    sc = np.where(const & ~const_nonzero, 0.0, sc)
    sc = _snap_f32(sc)
    with np.errstate(divide="ignore", invalid="ignore"):
        zp = np.where(sc > _TINY, wmin / sc, 0.0)
    zp = np.where(const_nonzero, wmax / np.where(sc > _TINY, sc, 1.0), zp)
    return sc, _snap_f32(zp)


def encode(block: np.ndarray, sc: np.ndarray, zp: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """Codes = clamp(round(w/scale - zp)) per column; zero-scale columns -> 0."""
    lo, hi = cfg.code_range()
    safe = np.where(sc > _TINY, sc, 1.0)
    q = np.rint(block / safe - zp)
    q = np.where(sc > _TINY, q, 0.0)
    return np.clip(q, lo, hi).astype(np.int16)


def dequantize(q: GroupQuantTensor) -> np.ndarray:
    """(codes + zero_points) * scales, expanded back to the source shape."""
    out = np.empty((q.orig_rows, q.orig_cols), dtype=np.float64)
    for gi, (s, e) in enumerate(_group_slices(q.orig_rows, q.group_size)):
        out[s:e] = (q.codes[s:e].astype(np.float64) + q.zero_points[gi]) * q.scales[gi]
    return out


def quantize_activations(x, act_bits: int) -> np.ndarray:
    """Per-tensor symmetric fake quantization (quantize-dequantize in one step)."""
    if not 4 <= act_bits <= 8:
        raise ValueError(f"act_bits must be in [4, 8], got {act_bits}")
    x = np.asarray(x, dtype=np.float64)
    amax = float(np.abs(x).max(initial=0.0))
    if amax <= _TINY:
        return x.copy()
    hi = 2 ** (act_bits - 1) - 1
    scale = amax / hi
    return np.clip(np.rint(x / scale), -hi - 1, hi) * scale


# --- code packing for the HQTM-Q container ------------------------------------

def pack_codes(q: GroupQuantTensor) -> bytes:
    """Bit-pack codes little-endian, B bits per element, row-major order.

    Symmetric codes are stored offset-binary (code + 2^(B-1)).
    """
    offset = 2 ** (q.bits - 1) if q.symmetric else 0
    flat = (q.codes.reshape(-1).astype(np.int32) + offset).astype(np.uint8)
    bits = np.unpackbits(flat[:, None], axis=1, bitorder="little", count=q.bits)
    return np.packbits(bits.reshape(-1), bitorder="little").tobytes()


def unpack_codes(raw: bytes, bits: int, symmetric: bool, rows: int, cols: int) -> np.ndarray:
    """Inverse of pack_codes."""
    n = rows * cols
    arr = np.frombuffer(raw, dtype=np.uint8)
    unpacked = np.unpackbits(arr, bitorder="little", count=n * bits)
    vals = unpacked.reshape(n, bits).astype(np.int32) @ (1 << np.arange(bits, dtype=np.int32))
    if symmetric:
        vals = vals - 2 ** (bits - 1)
    return vals.astype(np.int16).reshape(rows, cols)


def packed_size(rows: int, cols: int, bits: int) -> int:
    """Byte length pack_codes produces for a rows x cols code array."""
    return (rows * cols * bits + 7) // 8
