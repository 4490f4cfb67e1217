"""Quantize-dequantize codecs and the packed weight container.

Two codec families:

* ``int-sym``: symmetric uniform integer grids. Codes live on
  [-2^(b-1), 2^(b-1)-1]; the zero point is always zero. One scale per
  contiguous input-channel group per output channel. The scale follows
  (max(W)*alpha - min(W)*beta) / (2^b - 1); with alpha = beta = 1 and a
  zero rounding offset this is plain round-to-nearest.
* ``mxfp``: microscaling block floats. Blocks of 32 along the last axis
  share a power-of-two scale 2^(floor(log2(amax)) - emax); elements are
  rounded half-to-even onto a tiny float grid (E2M1 for 4-bit, E4M3 for
  8-bit) with saturating overflow.

Weights are laid out (in_features, out_features) everywhere in this
package; int-sym groups run down axis 0.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, PackError, ShapeError

SCALE_FLOOR = 1e-8

CODEC_RAW = 0
CODEC_INT_SYM = 1
CODEC_MXFP4 = 2
CODEC_MXFP8 = 3

SCALES_NONE = 0
SCALES_F64 = 1
SCALES_E8M0 = 2


# ---------------------------------------------------------------------------
# schemes


@dataclass(frozen=True)
class QuantScheme:
    """One layer's quantization recipe."""

    family: str  # "int-sym" | "mxfp" | "none"
    bits: int
    group_size: int = 32  # int-sym group rows; mx block length; 0 = whole axis

    def __post_init__(self):
        if self.family not in ("int-sym", "mxfp", "none"):
            raise ContractError(f"unknown codec family {self.family!r}")
        if self.family == "int-sym" and not 2 <= self.bits <= 8:
            raise ContractError(f"int-sym bits must be in [2, 8], got {self.bits}")
        if self.family == "mxfp" and self.bits not in (4, 8):
            raise ContractError(f"mxfp bits must be 4 or 8, got {self.bits}")
        if self.group_size < 0:
            raise ContractError("group_size must be >= 0")

    @property
    def label(self) -> str:
        if self.family == "none":
            return f"w{self.bits}"
        if self.family == "mxfp":
            return f"mxfp{self.bits}"
        return f"w{self.bits}g{self.group_size}"

    @property
    def quantizes_acts(self) -> bool:
        return self.family == "mxfp"

    @property
    def mx_format(self) -> "MxFormat":
        if self.family != "mxfp":
            raise ContractError(f"{self.label} is not an mx scheme")
        return MXFP4 if self.bits == 4 else MXFP8


def scheme_for_bits(family: str, bits: int, group_size: int) -> QuantScheme:
    """Map an allocator bit option onto a concrete scheme.

    16 bits (and anything wider than the family supports) means the
    layer is stored untouched.
    """
    if bits >= 16:
        return QuantScheme("none", bits, 0)
    if family == "mxfp":
        return QuantScheme("mxfp", bits, group_size or 32)
    return QuantScheme("int-sym", bits, group_size)


# ---------------------------------------------------------------------------
# uniform integer codec


def grid_bounds(bits: int) -> tuple[int, int]:
    if bits < 2:
        raise ContractError(f"need at least 2 bits, got {bits}")
    half = 1 << (bits - 1)
    return -half, half - 1


def group_segments(n_rows: int, group_size: int) -> list[tuple[int, int]]:
    """Contiguous [start, end) row ranges; a trailing partial group is kept."""
    if n_rows <= 0:
        raise ContractError("no rows to group")
    if group_size <= 0 or group_size >= n_rows:
        return [(0, n_rows)]
    starts = list(range(0, n_rows, group_size))
    return [(s, min(s + group_size, n_rows)) for s in starts]


def group_index(n_rows: int, group_size: int) -> np.ndarray:
    """Group id for each row, matching :func:`group_segments` order."""
    idx = np.zeros(n_rows, dtype=np.int64)
    for g, (s, e) in enumerate(group_segments(n_rows, group_size)):
        idx[s:e] = g
    return idx


def uniform_scale(wmax, wmin, bits: int, alpha=1.0, beta=1.0):
    """Per-group step size; floored so a constant group never divides by zero."""
    s = (wmax * alpha - wmin * beta) / float((1 << bits) - 1)
    return np.maximum(s, SCALE_FLOOR)


def quantize_weight(w: np.ndarray, bits: int, group_size: int,
                    v: np.ndarray | None = None, alpha=1.0, beta=1.0,
                    init_scales: np.ndarray | None = None):
    """Quantize-dequantize a 2-d weight on the symmetric integer grid.

    Returns (dequantized, codes, scales). ``v`` is an optional
    per-element rounding offset in [-0.5, 0.5]. ``alpha``/``beta``
    rescale the minmax range; when ``init_scales`` is given the scale is
    instead ``init_scales * alpha`` and ``beta`` is ignored.
    """
    w = np.asarray(w)
    if w.ndim != 2:
        raise ShapeError(f"expected a 2-d weight, got shape {w.shape}")
    lo, hi = grid_bounds(bits)
    segs = group_segments(w.shape[0], group_size)
    if init_scales is not None:
        scales = np.maximum(np.asarray(init_scales) * alpha, SCALE_FLOOR)
        if scales.shape != (len(segs), w.shape[1]):
            raise ShapeError(
                f"init_scales shape {scales.shape} != {(len(segs), w.shape[1])}")
    else:
        wmax = np.stack([w[s:e].max(axis=0) for s, e in segs])
        wmin = np.stack([w[s:e].min(axis=0) for s, e in segs])
        scales = uniform_scale(wmax, wmin, bits, alpha, beta)
    s_full = scales[group_index(w.shape[0], group_size)]
    x = w / s_full
    if v is not None:
        x = x + v
    codes = np.clip(np.rint(x), lo, hi).astype(np.int8)
    return codes * s_full, codes, scales


def uniform_qdq_graph(w: np.ndarray, bits: int, group_size: int,
                      v: T.Tensor, alpha: T.Tensor, beta: T.Tensor,
                      init_scales: np.ndarray | None = None) -> T.Tensor:
    """Differentiable twin of :func:`quantize_weight` for tuning.

    ``w`` is constant; gradients flow to the rounding offset ``v``
    (straight-through, zeroed where the code clips) and to
    ``alpha``/``beta`` through the scale expression.
    """
    w = np.asarray(w)
    lo, hi = grid_bounds(bits)
    segs = group_segments(w.shape[0], group_size)
    if init_scales is not None:
        s_g = T.mul(T.Tensor(init_scales), alpha)
    else:
        wmax = T.Tensor(np.stack([w[s:e].max(axis=0) for s, e in segs]))
        wmin = T.Tensor(np.stack([w[s:e].min(axis=0) for s, e in segs]))
        denom = float((1 << bits) - 1)
        s_g = T.div(T.sub(T.mul(wmax, alpha), T.mul(wmin, beta)), T.Tensor(denom))
    s_g = T.clip(s_g, lo=SCALE_FLOOR)
    s_full = T.take(s_g, group_index(w.shape[0], group_size))
    q = T.clip(T.round_ste(T.add(T.div(T.Tensor(w), s_full), v)), lo, hi)
    return T.mul(s_full, q)


# ---------------------------------------------------------------------------
# microscaling block floats


def _float_grid(ebits: int, mbits: int, bias: int):
    """All non-negative finite magnitudes of a tiny float format, sorted."""
    vals = [0.0]
    for e_field in range(0, 1 << ebits):
        for m_field in range(0, 1 << mbits):
            if e_field == 0:
                val = (m_field / (1 << mbits)) * 2.0 ** (1 - bias)
            else:
                val = (1.0 + m_field / (1 << mbits)) * 2.0 ** (e_field - bias)
            vals.append(val)
    # drop duplicates (the two zero encodings) and anything reserved
    return np.array(sorted(set(vals)))


@dataclass(frozen=True)
class MxFormat:
    name: str
    mbits: int
    emax: int        # exponent of the largest finite magnitude
    emin: int        # lowest normal exponent
    max_value: float
    magnitudes: tuple  # sorted non-negative representable magnitudes
    block: int = 32

    @property
    def sign_shift(self) -> int:
        # code layout: sign bit above the magnitude index
        return max(1, (len(self.magnitudes) - 1).bit_length())


# E2M1: 1 sign, 2 exponent (bias 1), 1 mantissa bit.
MXFP4 = MxFormat("mxfp4", mbits=1, emax=2, emin=0, max_value=6.0,
                 magnitudes=(0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0))

# E4M3: 1 sign, 4 exponent (bias 7), 3 mantissa bits; max finite 448,
# the all-ones encoding is NaN and never produced here.
_E4M3_MAGS = tuple(m for m in _float_grid(4, 3, 7) if m <= 448.0)
MXFP8 = MxFormat("mxfp8", mbits=3, emax=8, emin=-6, max_value=448.0,
                 magnitudes=_E4M3_MAGS)

MX_FORMATS = {"mxfp4": MXFP4, "mxfp8": MXFP8}


def _floor_log2(a: np.ndarray) -> np.ndarray:
    """Exact floor(log2(a)) for positive a via frexp (no log rounding)."""
    _, e = np.frexp(a)
    return e - 1


def _round_to_grid(y: np.ndarray, fmt: MxFormat) -> np.ndarray:
    """Round half-to-even onto the format's magnitude grid, saturating."""
    a = np.abs(y)
    sign = np.where(np.signbit(y), -1.0, 1.0)
    e = np.where(a > 0, _floor_log2(np.where(a > 0, a, 1.0)), fmt.emin)
    e = np.clip(e, fmt.emin, fmt.emax)
    step = np.ldexp(1.0, (e - fmt.mbits).astype(np.int64))
    q = np.rint(a / step) * step
    q = np.minimum(q, fmt.max_value)
    return sign * q


def mx_qdq(x: np.ndarray, fmt: MxFormat):
    """Block-quantize along the last axis.

    Returns (dequantized, codes, scale_exponents). Codes are unsigned
    (sign bit above the magnitude index); scale exponents are one int8
    per block. An all-zero block gets exponent 0 and zero codes.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        raise ShapeError("mx_qdq needs at least 1-d input")
    last = x.shape[-1]
    nb = -(-last // fmt.block) if last else 0
    pad = nb * fmt.block - last
    xb = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(0, pad)]) if pad else x
    xb = xb.reshape(x.shape[:-1] + (nb, fmt.block))
    amax = np.abs(xb).max(axis=-1)
    exps = np.where(amax > 0,
                    _floor_log2(np.where(amax > 0, amax, 1.0)) - fmt.emax,
                    0)
    exps = np.clip(exps, -127, 127).astype(np.int64)
    scale = np.ldexp(1.0, exps)[..., None]
    q = _round_to_grid(xb / scale, fmt)
    deq = (q * scale).reshape(x.shape[:-1] + (nb * fmt.block,))
    deq = deq[..., :last]
    codes = _encode_grid(q, fmt).reshape(x.shape[:-1] + (nb * fmt.block,))
    return deq, codes[..., :last], exps.astype(np.int8)


def _encode_grid(q: np.ndarray, fmt: MxFormat) -> np.ndarray:
    mags = np.asarray(fmt.magnitudes)
    idx = np.searchsorted(mags, np.abs(q))
    if not np.all(mags[np.minimum(idx, len(mags) - 1)] == np.abs(q)):
        raise PackError("value not on the format grid")
    sign = np.signbit(q) & (np.abs(q) > 0)
    return (idx | (sign.astype(np.int64) << fmt.sign_shift)).astype(np.uint8)


def _decode_grid(codes: np.ndarray, fmt: MxFormat) -> np.ndarray:
    mags = np.asarray(fmt.magnitudes)
    mask = (1 << fmt.sign_shift) - 1
    idx = codes & mask
    if np.any(idx >= len(mags)):
        raise PackError("magnitude index out of range")
    sign = np.where((codes >> fmt.sign_shift) & 1, -1.0, 1.0)
    return sign * mags[idx]


def mx_qdq_weight(w: np.ndarray, fmt: MxFormat):
    """qdq an (in, out) weight with blocks along the input axis.

    Matmul reduces over a weight's first axis, and block scales must be
    shared along the reduction, so the weight is blocked transposed.
    Returns (deq in original layout, codes, exps) with codes/exps in the
    (out, in) layout they were quantized in.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError(f"expected a 2-d weight, got shape {w.shape}")
    deq_t, codes, exps = mx_qdq(w.T, fmt)
    return np.ascontiguousarray(deq_t.T), codes, exps


def mx_dequantize(codes: np.ndarray, exps: np.ndarray, fmt: MxFormat,
                  shape: tuple) -> np.ndarray:
    last = shape[-1]
    nb = -(-last // fmt.block)
    vals = _decode_grid(codes, fmt).reshape(shape[:-1] + (last,))
    pad = nb * fmt.block - last
    if pad:
        vals = np.pad(vals, [(0, 0)] * (len(shape) - 1) + [(0, pad)])
    vals = vals.reshape(shape[:-1] + (nb, fmt.block))
    scale = np.ldexp(1.0, exps.astype(np.int64)).reshape(shape[:-1] + (nb,))
    out = (vals * scale[..., None]).reshape(shape[:-1] + (nb * fmt.block,))
    return out[..., :last]


def mx_qdq_tensor(a: T.Tensor, fmt: MxFormat) -> T.Tensor:
    """Graph node wrapper with a straight-through backward."""
    deq, _, _ = mx_qdq(a.data, fmt)
    return T._make(deq, "mx_qdq", (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# bit packing


def pack_bits(values: np.ndarray, bits: int) -> bytes:
    """Pack unsigned codes little-endian within each byte.

    2-bit codes go 4 per byte, 4-bit codes 2 per byte, 8-bit codes 1 per
    byte; the first code occupies the least significant bits.
    """
    if bits not in (2, 4, 8):
        raise PackError(f"unsupported pack width {bits}")
    v = np.asarray(values).reshape(-1)
    if v.size and (v.min() < 0 or v.max() >= (1 << bits)):
        raise PackError(f"code out of range for {bits}-bit packing")
    v = v.astype(np.uint8)
    if bits == 8:
        return v.tobytes()
    per = 8 // bits
    padded = np.zeros(-(-v.size // per) * per, dtype=np.uint8)
    padded[:v.size] = v
    padded = padded.reshape(-1, per)
    out = np.zeros(padded.shape[0], dtype=np.uint8)
    for k in range(per):
        out |= padded[:, k] << (bits * k)
    return out.tobytes()


def unpack_bits(buf: bytes, bits: int, count: int) -> np.ndarray:
    if bits not in (2, 4, 8):
        raise PackError(f"unsupported pack width {bits}")
    raw = np.frombuffer(buf, dtype=np.uint8)
    if bits == 8:
        vals = raw
    else:
        per = 8 // bits
        mask = (1 << bits) - 1
        vals = np.zeros(raw.size * per, dtype=np.uint8)
        for k in range(per):
            vals[k::per] = (raw >> (bits * k)) & mask
    if count > vals.size:
        raise PackError(f"payload holds {vals.size} codes, need {count}")
    return vals[:count].copy()


def signed_to_field(codes: np.ndarray, bits: int) -> np.ndarray:
    lo, hi = grid_bounds(bits)
    c = np.asarray(codes)
    if c.size and (c.min() < lo or c.max() > hi):
        raise PackError(f"code outside [{lo}, {hi}]")
    return (c.astype(np.int64) & ((1 << bits) - 1)).astype(np.uint8)


def field_to_signed(fields: np.ndarray, bits: int) -> np.ndarray:
    f = fields.astype(np.int64)
    half = 1 << (bits - 1)
    return np.where(f >= half, f - (1 << bits), f).astype(np.int8)


# ---------------------------------------------------------------------------
# packed container


@dataclass
class PackedWeights:
    """One layer's quantized payload plus enough metadata to decode it.

    Byte layout: codec id u8, bits u8, group size u32, shape rank u8 and
    one u64 per dim, scale format u8, then the scale array, then the
    packed code stream. Counts are derived from the header, not stored.
    """

    codec: int
    bits: int
    group_size: int
    shape: tuple
    scales: np.ndarray | None  # f64 groups (int-sym) or int8 exponents (mx)
    codes: np.ndarray          # int8 (int-sym), uint8 (mx), f64 (raw)

    def _scale_count(self) -> int:
        if self.codec == CODEC_RAW:
            return 0
        if self.codec == CODEC_INT_SYM:
            return len(group_segments(self.shape[0], self.group_size)) * self.shape[1]
        per_row = -(-self.shape[-1] // self.group_size)
        return int(np.prod(self.shape[:-1], dtype=np.int64)) * per_row

    def to_bytes(self) -> bytes:
        head = struct.pack("<BBIB", self.codec, self.bits, self.group_size,
                           len(self.shape))
        head += b"".join(struct.pack("<Q", d) for d in self.shape)
        if self.codec == CODEC_RAW:
            head += struct.pack("<B", SCALES_NONE)
            return head + np.asarray(self.codes, dtype=np.float64).tobytes()
        if self.codec == CODEC_INT_SYM:
            head += struct.pack("<B", SCALES_F64)
            body = np.asarray(self.scales, dtype=np.float64).tobytes()
            body += pack_bits(signed_to_field(self.codes, self.bits), self.bits)
            return head + body
        head += struct.pack("<B", SCALES_E8M0)
        body = np.asarray(self.scales, dtype=np.int8).tobytes()
        body += pack_bits(self.codes.reshape(-1), 4 if self.codec == CODEC_MXFP4 else 8)
        return head + body

    @classmethod
    def from_bytes(cls, buf: bytes) -> "PackedWeights":
        try:
            codec, bits, group_size, rank = struct.unpack_from("<BBIB", buf, 0)
            off = 7
            dims = []
            for _ in range(rank):
                dims.append(struct.unpack_from("<Q", buf, off)[0])
                off += 8
            (scale_fmt,) = struct.unpack_from("<B", buf, off)
            off += 1
        except struct.error as e:
            raise PackError(f"truncated header: {e}") from e
        shape = tuple(int(d) for d in dims)
        size = int(np.prod(shape, dtype=np.int64)) if shape else 0
        pw = cls(codec, bits, group_size, shape, None, np.empty(0))
        if codec == CODEC_RAW:
            if scale_fmt != SCALES_NONE:
                raise PackError("raw payload must not carry scales")
            need = size * 8
            if len(buf) - off < need:
                raise PackError("raw payload shorter than header promises")
            pw.codes = np.frombuffer(buf, dtype=np.float64, count=size,
                                     offset=off).reshape(shape).copy()
            return pw
        n_scales = pw._scale_count()
        if codec == CODEC_INT_SYM:
            if scale_fmt != SCALES_F64:
                raise PackError("int-sym scales must be f64")
            pw.scales = np.frombuffer(buf, dtype=np.float64, count=n_scales,
                                      offset=off)
            n_groups = len(group_segments(shape[0], group_size))
            pw.scales = pw.scales.reshape(n_groups, shape[1]).copy()
            off += n_scales * 8
            fields = unpack_bits(buf[off:], bits, size)
            pw.codes = field_to_signed(fields, bits).reshape(shape)
        elif codec in (CODEC_MXFP4, CODEC_MXFP8):
            if scale_fmt != SCALES_E8M0:
                raise PackError("mx scales must be e8m0")
            pw.scales = np.frombuffer(buf, dtype=np.int8, count=n_scales,
                                      offset=off).copy()
            per_row = -(-shape[-1] // group_size)
            pw.scales = pw.scales.reshape(shape[:-1] + (per_row,))
            off += n_scales
            width = 4 if codec == CODEC_MXFP4 else 8
            pw.codes = unpack_bits(buf[off:], width, size).reshape(shape)
        else:
            raise PackError(f"unknown codec id {codec}")
        return pw

    def dequantize(self) -> np.ndarray:
        if self.codec == CODEC_RAW:
            return np.asarray(self.codes, dtype=np.float64)
        if self.codec == CODEC_INT_SYM:
            s_full = self.scales[group_index(self.shape[0], self.group_size)]
            return self.codes.astype(np.float64) * s_full
        fmt = MXFP4 if self.codec == CODEC_MXFP4 else MXFP8
        return mx_dequantize(self.codes.reshape(-1), self.scales, fmt, self.shape)


def pack_layer(w_deq: np.ndarray, scheme: QuantScheme, codes=None,
               scales=None) -> PackedWeights:
    """Wrap an already-quantized layer (or a raw one) for serialization."""
    if scheme.family == "none":
        return PackedWeights(CODEC_RAW, scheme.bits, 0, tuple(w_deq.shape), None,
                             np.asarray(w_deq, dtype=np.float64))
    if scheme.family == "int-sym":
        gs = scheme.group_size
        return PackedWeights(CODEC_INT_SYM, scheme.bits, gs, tuple(w_deq.shape),
                             scales, codes)
    codec = CODEC_MXFP4 if scheme.bits == 4 else CODEC_MXFP8
    return PackedWeights(codec, scheme.bits, scheme.mx_format.block,
                         tuple(w_deq.shape), scales, codes)
