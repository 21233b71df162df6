"""Unified affine address abstraction for coarse-grained operators.

Each coarse operator is described by a 3x4 rational matrix A and a 3-vector B
mapping input indices (x_i, y_i, c_i) to output indices.  The y component is
pre-multiplied by the output row pitch, so the linear element offset is simply
``(y_o + x_o) * out_channels + c_o``.

Two modes are kept side by side:

* ``paper``  -- the matrices exactly as published, useful for golden-file
  inspection.  Some rows are one-based or use the input width as row pitch;
  they are not guaranteed to reproduce the oracle on non-square shapes.
* ``oracle`` -- corrected matrices (plus a documented digit pre-transform for
  the channel-reshuffling operators) that reproduce the golden oracle
  bit-exactly and are what the engine executes.

Rational arithmetic is exact; a mapping that lands between integers raises
instead of truncating.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from math import lcm
from typing import Optional, Sequence

import numpy as np

from .errors import NonIntegralIndexError, ParamError, TmuError
from .tensor_model import (
    BUS_BYTES, Op, OperatorParams, TensorDesc, output_desc, validate_params,
)

# exact rational scalar, stored in lowest terms with a positive denominator
Rational = Fraction

MAPPED_OPS = {
    Op.TRANSPOSE, Op.ROT90, Op.IMG2COL, Op.PIXELSHUFFLE, Op.PIXELUNSHUFFLE,
    Op.UPSAMPLE, Op.ROUTE, Op.SPLIT, Op.ADD,
}

Matrix = tuple[tuple[Fraction, ...], ...]
Vector = tuple[Fraction, ...]


def _mat(rows) -> Matrix:
    return tuple(tuple(Fraction(v) for v in row) + (Fraction(0),) * (4 - len(row))
                 for row in rows)


def _vec(vals) -> Vector:
    return tuple(Fraction(v) for v in vals)


@dataclass(frozen=True)
class AffineMap:
    """One operator's instantiated index transformation."""

    op: Op
    a: Matrix                       # 3x4, 4th column used only by Route
    b: Vector                       # length 3
    out_channels: int               # channel block size used for linearization
    out_width_scaled: bool = True   # y_o already carries the output row pitch
    mode: str = "oracle"
    pre: Optional[str] = None       # digit pre-transform, see _pre_transform
    pre_s: int = 0
    pre_block: int = 0
    replicate: tuple[int, int] = (1, 1)   # (sy, sx) copies per input element
    src_shape: tuple[int, int, int] = (1, 1, 1)   # (h, w, c)
    dst_elems: int = 0
    gather: bool = False            # Img2col: matrix validates the grid only


def _pre_transform(m: AffineMap, x, y, c):
    """Digit decomposition applied before the matrix (oracle mode only).

    Works on both scalars and numpy arrays; all operations are integer-exact.
    """
    if m.pre is None:
        return x, y, c
    s = m.pre_s
    if m.pre == "pixelshuffle":
        co = m.pre_block
        q = c // co
        return x * s + q % s, y * s + q // s, c % co
    if m.pre == "pixelunshuffle":
        cin = m.pre_block
        i, j = y % s, x % s
        return x // s, y // s, (i * s + j) * cin + c
    if m.pre == "split":
        half = m.pre_block
        h = m.src_shape[0]
        return x, y + (c // half) * h, c % half
    raise TmuError(f"unknown pre-transform {m.pre!r}")


def build_affine_map(op: Op, src: TensorDesc, params: OperatorParams,
                     mode: str = "oracle") -> AffineMap:
    """Instantiate A/B for one coarse-grained operator.

    For Route this is the first copy pass; see build_pass_maps for the full
    two-pass plan.
    """
    if op not in MAPPED_OPS:
        raise ParamError(f"{op.name} has no affine address map")
    if mode not in ("paper", "oracle"):
        raise ParamError(f"unknown map mode {mode!r}")
    validate_params(op, src, params)
    h, w, c = src.height, src.width, src.channels
    s = params.scale
    out = output_desc(op, src, params)
    common = dict(op=op, mode=mode, src_shape=(h, w, c), dst_elems=out.num_elements)

    if mode == "paper":
        a, b = _paper_matrices(op, src, params)
        return AffineMap(a=a, b=b, out_channels=out.channels, **common)

    if op is Op.TRANSPOSE:
        # out width is the input height; the published row uses w_i instead
        return AffineMap(a=_mat([[0, 1, 0], [h, 0, 0], [0, 0, 1]]),
                         b=_vec([0, 0, 0]), out_channels=c, **common)
    if op is Op.ROT90:
        # zero-based counter-clockwise: x_o = y_i, y_o = (w-1) - x_i
        return AffineMap(a=_mat([[0, 1, 0], [-h, 0, 0], [0, 0, 1]]),
                         b=_vec([0, h * (w - 1), 0]), out_channels=c, **common)
    if op is Op.PIXELSHUFFLE:
        co = c // (s * s)
        return AffineMap(a=_mat([[1, 0, 0], [0, w * s, 0], [0, 0, 1]]),
                         b=_vec([0, 0, 0]), out_channels=co,
                         pre="pixelshuffle", pre_s=s, pre_block=co, **common)
    if op is Op.PIXELUNSHUFFLE:
        return AffineMap(a=_mat([[1, 0, 0], [0, w // s, 0], [0, 0, 1]]),
                         b=_vec([0, 0, 0]), out_channels=c * s * s,
                         pre="pixelunshuffle", pre_s=s, pre_block=c, **common)
    if op is Op.UPSAMPLE:
        # base replica; the (s, s) replication fans out from the buffer
        return AffineMap(a=_mat([[s, 0, 0], [0, s * s * w, 0], [0, 0, 1]]),
                         b=_vec([0, 0, 0]), out_channels=c,
                         replicate=(s, s), **common)
    if op is Op.ROUTE:
        c2 = params.second_source.channels
        return AffineMap(a=_mat([[1, 0, 0], [0, w, 0], [0, 0, 1]]),
                         b=_vec([0, 0, 0]), out_channels=c + c2, **common)
    if op is Op.SPLIT:
        half = c // 2
        return AffineMap(a=_mat([[1, 0, 0], [0, w, 0], [0, 0, 1]]),
                         b=_vec([0, 0, 0]), out_channels=half,
                         pre="split", pre_block=half, **common)
    if op is Op.ADD:
        return AffineMap(a=_mat([[1, 0, 0], [0, w, 0], [0, 0, 1]]),
                         b=_vec([0, 0, 0]), out_channels=c, **common)
    if op is Op.IMG2COL:
        a, b = _paper_matrices(op, src, params)
        return AffineMap(a=a, b=b, out_channels=out.channels, gather=True, **common)
    raise ParamError(f"{op.name} has no affine address map")


def _paper_matrices(op: Op, src: TensorDesc, params: OperatorParams):
    w = src.width
    s = params.scale
    if op is Op.TRANSPOSE:
        return _mat([[0, 1, 0], [w, 0, 0], [0, 0, 1]]), _vec([0, 0, 0])
    if op is Op.ROT90:
        return _mat([[0, -1, 0], [w, 0, 0], [0, 0, 1]]), _vec([w, 0, 0])
    if op is Op.IMG2COL:
        xk, yk = params.kernel
        xp, yp = params.padding
        xs, ys = params.stride
        a = _mat([[Fraction(1, xs), 0, 0], [0, Fraction(w, ys), 0], [0, 0, 1]])
        b = _vec([Fraction(2 * xp - xk, xs) + 1, Fraction(2 * yp - yk, ys) + 1, 0])
        return a, b
    if op is Op.PIXELSHUFFLE:
        return (_mat([[1, 0, 0], [0, s * w, 0], [0, 0, Fraction(1, s)]]),
                _vec([0, 0, 0]))
    if op is Op.PIXELUNSHUFFLE:
        return _mat([[s, 0, 0], [0, w, 0], [0, 0, 1]]), _vec([0, 0, 0])
    if op is Op.UPSAMPLE:
        return _mat([[s, 0, 0], [0, s * s * w, 0], [0, 0, 1]]), _vec([0, 0, 0])
    if op is Op.ROUTE:
        return (_mat([[1, 0, 0, 0], [0, w, 0, 0], [0, 0, 1, 1]]),
                _vec([0, 0, 0]))
    if op is Op.SPLIT:
        return (_mat([[1, 0, 0], [0, w, 0], [0, 0, Fraction(1, 2)]]),
                _vec([0, 0, 0]))
    if op is Op.ADD:
        return _mat([[1, 0, 0], [0, w, 0], [0, 0, 1]]), _vec([0, 0, 0])
    raise ParamError(f"{op.name} has no published matrix")


def build_pass_maps(op: Op, src: TensorDesc, params: OperatorParams,
                    mode: str = "oracle") -> list[tuple[AffineMap, TensorDesc]]:
    """Copy passes realizing the operator: (map, source) per pass.

    Route becomes two sequential passes; the published 4th matrix column is
    realized as a channel offset in B on the second pass.
    """
    first = build_affine_map(op, src, params, mode)
    if op is not Op.ROUTE:
        return [(first, src)]
    s2 = params.second_source
    second = AffineMap(op=op, a=_mat([[1, 0, 0], [0, s2.width, 0], [0, 0, 1]]),
                       b=_vec([0, 0, src.channels]),
                       out_channels=first.out_channels, mode=mode,
                       src_shape=(s2.height, s2.width, s2.channels),
                       dst_elems=first.dst_elems)
    return [(first, src), (second, s2)]


def map_index(m: AffineMap, idx: Sequence[int]) -> tuple[int, int, int]:
    """Exact evaluation of A*idx + B; raises on a non-integral component."""
    if len(idx) == 3:
        x, y, c = idx
        c2 = 0
    elif len(idx) == 4:
        x, y, c, c2 = idx
    else:
        raise ParamError("index must have 3 or 4 components")
    h, w, cin = m.src_shape
    if not (0 <= x < w and 0 <= y < h and 0 <= c < cin):
        raise ParamError(f"index {tuple(idx)} outside source extent {m.src_shape}")
    x, y, c = _pre_transform(m, x, y, c)
    vec = (x, y, c, c2)
    out = []
    for r in range(3):
        val = sum(m.a[r][k] * vec[k] for k in range(4)) + m.b[r]
        if val.denominator != 1:
            raise NonIntegralIndexError(
                f"{m.op.name} map gives non-integral component {val} at index {tuple(idx)}")
        out.append(int(val))
    return tuple(out)


def output_address(m: AffineMap, out_idx: Sequence[int], base: int,
                   elem_bytes: int = 1) -> int:
    """Linearize an output index triple into a byte address.

    y_o already carries the output row pitch, so the element offset is
    (y_o + x_o) * out_channels + c_o.
    """
    x_o, y_o, c_o = (int(v) for v in out_idx)
    elem = (y_o + x_o) * m.out_channels + c_o
    if m.mode == "oracle" and not 0 <= elem < m.dst_elems:
        raise ParamError(f"output element {elem} outside destination extent {m.dst_elems}")
    return base + elem * elem_bytes


def element_offsets(m: AffineMap, count: Optional[int] = None,
                    start: int = 0) -> np.ndarray:
    """Destination element offsets for source elements [start, start+count),
    walked c-innermost, then x, then y.  Vectorized and integer-exact."""
    h, w, cin = m.src_shape
    total = h * w * cin
    if count is None:
        count = total - start
    if start < 0 or start + count > total:
        raise ParamError("source element range out of bounds")
    e = np.arange(start, start + count, dtype=np.int64)
    c = e % cin
    x = (e // cin) % w
    y = e // (cin * w)
    x, y, c = _pre_transform(m, x, y, c)
    comps = []
    for r in range(3):
        entries = [m.a[r][0], m.a[r][1], m.a[r][2], m.b[r]]
        den = lcm(*(f.denominator for f in entries))
        num = (entries[0].numerator * (den // entries[0].denominator) * x
               + entries[1].numerator * (den // entries[1].denominator) * y
               + entries[2].numerator * (den // entries[2].denominator) * c
               + entries[3].numerator * (den // entries[3].denominator))
        if den != 1:
            if np.any(num % den):
                raise NonIntegralIndexError(
                    f"{m.op.name} map is non-integral over the source extent")
            num = num // den
        comps.append(num)
    x_o, y_o, c_o = comps
    off = (y_o + x_o) * m.out_channels + c_o
    if off.size and m.mode == "oracle" and (off.min() < 0 or off.max() >= m.dst_elems):
        raise ParamError("mapped offsets escape the destination extent")
    return off


@dataclass
class BurstPlan:
    """Planned (src, dst, len) transfers; each burst is at most burst_bytes."""

    bursts: list[tuple[int, int, int]] = field(default_factory=list)
    burst_bytes: int = BUS_BYTES

    @property
    def total_bytes(self) -> int:
        return sum(ln for _, _, ln in self.bursts)


def _merge_runs(src: np.ndarray, dst: np.ndarray, eb: int,
                burst_bytes: int) -> list[tuple[int, int, int]]:
    """Group per-element (src, dst) byte addresses into bounded bursts."""
    if src.size == 0:
        return []
    contig = (np.diff(src) == eb) & (np.diff(dst) == eb)
    starts = np.concatenate([[0], np.nonzero(~contig)[0] + 1])
    ends = np.concatenate([starts[1:], [src.size]])
    bursts = []
    for a, b in zip(starts, ends):
        run = (b - a) * eb
        pos = 0
        while pos < run:
            ln = min(burst_bytes, run - pos)
            bursts.append((int(src[a]) + pos, int(dst[a]) + pos, ln))
            pos += ln
    return bursts


def enumerate_bursts(op: Op, src: TensorDesc, params: OperatorParams,
                     dst_base: int, mode: str = "oracle",
                     burst_bytes: int = BUS_BYTES) -> BurstPlan:
    """Full transfer plan for a coarse-grained operator.

    Source indices are walked c-innermost, then x, then y (Route: one pass per
    source); contiguous destination stretches are packed into bursts of up to
    burst_bytes.  Img2col walks output positions instead, since one input
    element feeds many outputs; padding positions appear as zero-fill bursts
    with src address -1.
    """
    eb = src.elem_bytes
    plan = BurstPlan(burst_bytes=burst_bytes)
    if op is Op.IMG2COL:
        plan.bursts = _img2col_bursts(src, params, dst_base, burst_bytes)
        return plan
    for m, part in build_pass_maps(op, src, params, mode):
        n = part.num_elements
        dst_e = element_offsets(m)
        src_b = part.base_addr + np.arange(n, dtype=np.int64) * eb
        dst_b = dst_base + dst_e * eb
        if m.replicate != (1, 1):
            src_b, dst_b = _replicated_entries(m, part, dst_base)
        plan.bursts.extend(_merge_runs(src_b, dst_b, eb, burst_bytes))
    return plan


def _replicated_entries(m: AffineMap, src: TensorDesc, dst_base: int):
    """Upsample: one entry per (input element, replica), ordered so that the
    destination is walked row-major."""
    sy, sx = m.replicate
    h, w, cin = m.src_shape
    eb = src.elem_bytes
    base = element_offsets(m).reshape(h, w, cin)
    out_w = w * sx
    # order: y, dy, x, dx, c  ->  destination rows in sequence
    dy = np.arange(sy, dtype=np.int64)[None, :, None, None, None]
    dx = np.arange(sx, dtype=np.int64)[None, None, None, :, None]
    d = base[:, None, :, None, :] + dy * out_w * cin + dx * cin
    s = (np.arange(h * w * cin, dtype=np.int64).reshape(h, w, cin)[:, None, :, None, :]
         + np.zeros((1, sy, 1, sx, 1), dtype=np.int64))
    return (src.base_addr + s.ravel() * eb, dst_base + d.ravel() * eb)


def _img2col_bursts(src: TensorDesc, params: OperatorParams, dst_base: int,
                    burst_bytes: int) -> list[tuple[int, int, int]]:
    xk, yk = params.kernel
    xp, yp = params.padding
    xs, ys = params.stride
    h, w, cin = src.height, src.width, src.channels
    eb = src.elem_bytes
    wo = (w + 2 * xp - xk) // xs + 1
    ho = (h + 2 * yp - yk) // ys + 1
    j, i, v, u = np.meshgrid(np.arange(ho), np.arange(wo), np.arange(yk),
                             np.arange(xk), indexing="ij")
    xi = i * xs - xp + u
    yi = j * ys - yp + v
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    src_e = np.where(inside, (yi * w + xi) * cin, -1).ravel()
    dst_e = np.arange(src_e.size, dtype=np.int64) * cin
    src_b = np.where(src_e >= 0, src.base_addr + src_e * eb, -1)
    dst_b = dst_base + dst_e * eb
    bursts = []
    block = cin * eb
    for sb, db in zip(src_b, dst_b):
        pos = 0
        while pos < block:
            ln = min(burst_bytes, block - pos)
            s = int(sb) + pos if sb >= 0 else -1
            bursts.append((s, int(db) + pos, ln))
            pos += ln
    return bursts


@dataclass(frozen=True)
class SegmentCursor:
    """Branch-stage bookkeeping over a tensor split into segments."""

    index: int
    total: int
    base_addr: int
    segment_bytes: int

    @property
    def segment_base(self) -> int:
        return self.base_addr + self.index * self.segment_bytes


def advance_branch(cursor: SegmentCursor) -> Optional[SegmentCursor]:
    """Step to the next segment; None when all segments are processed."""
    if cursor.index >= cursor.total:
        raise TmuError("branch advanced past the final segment")
    nxt = cursor.index + 1
    if nxt >= cursor.total:
        return None
    return SegmentCursor(nxt, cursor.total, cursor.base_addr, cursor.segment_bytes)


def dump_map_json(m: AffineMap) -> dict:
    """Debug dump with exact fractions rendered as "num/den" strings."""
    frac = lambda f: f"{f.numerator}/{f.denominator}"
    return {
        "op": m.op.name,
        "mode": m.mode,
        "A": [[frac(v) for v in row] for row in m.a],
        "B": [frac(v) for v in m.b],
        "out_channels": m.out_channels,
        "out_width_scaled": m.out_width_scaled,
        "pre_transform": m.pre,
        "replicate": list(m.replicate),
    }


__all__ = [
    "Rational", "AffineMap", "BurstPlan", "SegmentCursor", "MAPPED_OPS",
    "build_affine_map", "build_pass_maps", "map_index", "output_address",
    "element_offsets", "enumerate_bursts", "advance_branch", "dump_map_json",
]
