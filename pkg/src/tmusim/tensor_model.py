"""Tensors in simulated byte-addressable memory plus the golden operator oracle.

Every operator is implemented here by direct per-element definition
(numpy reshapes, gathers, and arithmetic on explicit snapshots), completely
independent of the affine address machinery used by the engine.  The engine's
output is always diffed against this module.

Layout convention: row-major with channels innermost,
``offset(x, y, c) = ((y*width + x)*channels + c) * elem_bytes``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import MemoryRangeError, ParamError, ShapeError

BUS_BYTES = 16  # 128-bit AXI bus
BBOX_RECORD = 85  # 4 box + 1 objectness + 80 class scores
BBOX_OBJ_BYTE = 4  # objectness offset within a record


class Op(Enum):
    HALT = 0
    REARRANGE = 1
    RESIZE = 2
    BBOXCAL = 3
    IMG2COL = 4
    TRANSPOSE = 5
    ROT90 = 6
    PIXELSHUFFLE = 7
    PIXELUNSHUFFLE = 8
    UPSAMPLE = 9
    ROUTE = 10
    SPLIT = 11
    ADD = 12

    @classmethod
    def from_name(cls, name: str) -> "Op":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ParamError(f"unknown operator {name!r}") from None


# byte-level ops handled by the masking engine
FINE_OPS = {Op.REARRANGE, Op.RESIZE, Op.BBOXCAL}
# block-level ops handled by the affine address generator
COARSE_OPS = {
    Op.IMG2COL, Op.TRANSPOSE, Op.ROT90, Op.PIXELSHUFFLE, Op.PIXELUNSHUFFLE,
    Op.UPSAMPLE, Op.ROUTE, Op.SPLIT, Op.ADD,
}
ELEMENTWISE_OPS = {Op.ADD}
# ops whose datastream flows through at bus rate: processing overlaps transfer
STREAMING_OPS = {Op.REARRANGE, Op.ROUTE, Op.SPLIT, Op.ADD, Op.BBOXCAL}
ALL_OPS = sorted(FINE_OPS | COARSE_OPS, key=lambda o: o.value)
TWO_SOURCE_OPS = {Op.ROUTE, Op.ADD}


@dataclass(frozen=True)
class TensorDesc:
    """A feature map living in simulated memory."""

    height: int
    width: int
    channels: int
    elem_bytes: int = 1
    base_addr: int = 0

    def __post_init__(self):
        if min(self.height, self.width, self.channels) < 1:
            raise ShapeError(f"non-positive dimension in {self}")
        if self.elem_bytes < 1:
            raise ShapeError("elem_bytes must be >= 1")
        if self.base_addr < 0:
            raise MemoryRangeError("negative base address")

    @property
    def num_elements(self) -> int:
        return self.height * self.width * self.channels

    @property
    def byte_extent(self) -> int:
        return self.num_elements * self.elem_bytes

    @property
    def end_addr(self) -> int:
        return self.base_addr + self.byte_extent

    def offset(self, x: int, y: int, c: int) -> int:
        """Byte offset of element (x, y, c) relative to base_addr."""
        if not (0 <= x < self.width and 0 <= y < self.height and 0 <= c < self.channels):
            raise ShapeError(f"index ({x},{y},{c}) outside {self.height}x{self.width}x{self.channels}")
        return ((y * self.width + x) * self.channels + c) * self.elem_bytes

    def overlaps(self, other: "TensorDesc") -> bool:
        return self.base_addr < other.end_addr and other.base_addr < self.end_addr


class SimMemory:
    """Flat zero-initialized byte store standing in for off-chip DRAM."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise MemoryRangeError("capacity must be positive")
        self.capacity = capacity
        self.data = np.zeros(capacity, dtype=np.uint8)

    def _check(self, addr: int, nbytes: int):
        if addr < 0 or nbytes < 0 or addr + nbytes > self.capacity:
            raise MemoryRangeError(
                f"access [{addr}, {addr + nbytes}) outside [0, {self.capacity})")

    def read(self, addr: int, nbytes: int) -> np.ndarray:
        self._check(addr, nbytes)
        return self.data[addr:addr + nbytes].copy()

    def write(self, addr: int, payload) -> None:
        buf = np.asarray(payload, dtype=np.uint8).ravel()
        self._check(addr, buf.size)
        self.data[addr:addr + buf.size] = buf

    def check_tensor(self, desc: TensorDesc) -> None:
        self._check(desc.base_addr, desc.byte_extent)


@dataclass
class OperatorParams:
    """Per-operator knobs; only the fields an operator consumes need be set."""

    kernel: tuple[int, int] = (1, 1)      # (x_k, y_k)
    padding: tuple[int, int] = (0, 0)     # (x_p, y_p)
    stride: tuple[int, int] = (1, 1)      # (x_s, y_s)
    scale: int = 1                        # s; doubles as target channels for Rearrange
    threshold: int = 0                    # Bboxcal objectness cutoff (unsigned byte)
    second_source: Optional[TensorDesc] = None  # Route / Add


def validate_params(op: Op, src: TensorDesc, params: OperatorParams) -> None:
    """Reject shapes/params that the operator cannot consume."""
    s = params.scale
    if op is Op.PIXELSHUFFLE:
        if s < 2 or src.channels % (s * s):
            raise ParamError(f"PixelShuffle needs channels divisible by s^2, got C={src.channels}, s={s}")
    elif op is Op.PIXELUNSHUFFLE:
        if s < 2 or src.height % s or src.width % s:
            raise ParamError(f"PixelUnshuffle needs H,W divisible by s, got {src.height}x{src.width}, s={s}")
    elif op is Op.UPSAMPLE:
        if s < 2:
            raise ParamError("Upsample needs scale >= 2")
    elif op is Op.SPLIT:
        if src.channels % 2:
            raise ParamError(f"Split needs an even channel count, got {src.channels}")
    elif op is Op.REARRANGE:
        if s < src.channels:
            raise ParamError(f"Rearrange target channels {s} < source channels {src.channels}")
    elif op is Op.RESIZE:
        if s < 2 or src.height % s or src.width % s:
            raise ParamError(f"Resize needs H,W divisible by s, got {src.height}x{src.width}, s={s}")
        if src.elem_bytes != 1:
            raise ParamError("Resize operates on 1-byte elements")
    elif op is Op.BBOXCAL:
        if src.num_elements % BBOX_RECORD:
            raise ParamError(f"Bboxcal input must be a multiple of {BBOX_RECORD} elements")
        if src.elem_bytes != 1:
            raise ParamError("Bboxcal operates on 1-byte elements")
    elif op is Op.IMG2COL:
        xk, yk = params.kernel
        xp, yp = params.padding
        xs, ys = params.stride
        if xk < 1 or yk < 1 or xs < 1 or ys < 1 or xp < 0 or yp < 0:
            raise ParamError("Img2col kernel/stride must be >= 1 and padding >= 0")
        if (src.width + 2 * xp - xk) % xs or (src.height + 2 * yp - yk) % ys:
            raise ParamError("Img2col output grid is not integral for these parameters")
        if src.width + 2 * xp < xk or src.height + 2 * yp < yk:
            raise ParamError("Img2col kernel larger than padded input")
    if op in TWO_SOURCE_OPS:
        s2 = params.second_source
        if s2 is None:
            raise ParamError(f"{op.name} needs a second source")
        if op is Op.ADD:
            if (s2.height, s2.width, s2.channels, s2.elem_bytes) != (
                    src.height, src.width, src.channels, src.elem_bytes):
                raise ShapeError("Add sources must have identical shapes")
            if src.elem_bytes != 1:
                raise ParamError("Add operates on 1-byte elements")
        else:  # Route: same spatial extent, channels may differ
            if (s2.height, s2.width, s2.elem_bytes) != (src.height, src.width, src.elem_bytes):
                raise ShapeError("Route sources must share height, width and elem_bytes")


def output_desc(op: Op, src: TensorDesc, params: OperatorParams,
                base_addr: int = 0, bbox_records: Optional[int] = None) -> TensorDesc:
    """Output descriptor for op applied to src.

    For Bboxcal the payload is data-dependent; pass ``bbox_records`` for the
    actual survivor count, otherwise the worst-case capacity bound is used.
    """
    h, w, c, eb = src.height, src.width, src.channels, src.elem_bytes
    s = params.scale
    if op is Op.TRANSPOSE:
        shape = (w, h, c)
    elif op is Op.ROT90:
        shape = (w, h, c)
    elif op is Op.PIXELSHUFFLE:
        shape = (h * s, w * s, c // (s * s))
    elif op is Op.PIXELUNSHUFFLE:
        shape = (h // s, w // s, c * s * s)
    elif op is Op.UPSAMPLE:
        shape = (h * s, w * s, c)
    elif op is Op.ROUTE:
        shape = (h, w, c + params.second_source.channels)
    elif op is Op.SPLIT:
        # two halves laid out contiguously; modeled as stacked along height
        shape = (2 * h, w, c // 2)
    elif op is Op.ADD:
        shape = (h, w, c)
    elif op is Op.REARRANGE:
        shape = (h, w, s)
    elif op is Op.RESIZE:
        shape = (h // s, w // s, c)
    elif op is Op.IMG2COL:
        xk, yk = params.kernel
        xp, yp = params.padding
        xs, ys = params.stride
        wo = (w + 2 * xp - xk) // xs + 1
        ho = (h + 2 * yp - yk) // ys + 1
        shape = (ho, wo, xk * yk * c)
    elif op is Op.BBOXCAL:
        n = src.num_elements // BBOX_RECORD if bbox_records is None else bbox_records
        shape = (1, 1, 4 + BBOX_RECORD * n)
    else:
        raise ParamError(f"{op} has no output shape")
    return TensorDesc(shape[0], shape[1], shape[2], eb, base_addr)


def _tensor_array(desc: TensorDesc, mem: SimMemory) -> np.ndarray:
    """View of the tensor as (H, W, C, elem_bytes) uint8."""
    mem.check_tensor(desc)
    raw = mem.data[desc.base_addr:desc.end_addr]
    return raw.reshape(desc.height, desc.width, desc.channels, desc.elem_bytes)


def _require_1byte(op: Op, desc: TensorDesc):
    if desc.elem_bytes != 1:
        raise ParamError(f"{op.name} supports only 1-byte elements")


def saturating_add_i8(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    wide = a.astype(np.int16) + b.astype(np.int16)
    return np.clip(wide, -128, 127).astype(np.int8)


def bilinear_reference(img: np.ndarray, factor: int) -> np.ndarray:
    """Float bilinear downscale with half-pixel centers, round half up.

    img: (H, W, C) uint8.  Returns (H/f, W/f, C) uint8.  This is the float
    reference the fixed-point engine path is compared against (tolerance 1).
    """
    h, w, c = img.shape
    ho, wo = h // factor, w // factor
    ys = (np.arange(ho) + 0.5) * factor - 0.5
    xs = (np.arange(wo) + 0.5) * factor - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - np.floor(ys))[:, None, None]
    fx = (xs - np.floor(xs))[None, :, None]
    p = img.astype(np.float64)
    top = p[y0][:, x0] * (1 - fx) + p[y0][:, x1] * fx
    bot = p[y1][:, x0] * (1 - fx) + p[y1][:, x1] * fx
    val = top * (1 - fy) + bot * fy
    return np.floor(val + 0.5).clip(0, 255).astype(np.uint8)


def bboxcal_reference(records: np.ndarray, threshold: int) -> np.ndarray:
    """Direct definition of the record filter: records (N, 85) uint8 in, packed
    survivors with a 4-byte little-endian count header out."""
    keep = records[:, BBOX_OBJ_BYTE].astype(np.int64) > threshold
    survivors = records[keep]
    header = np.frombuffer(np.uint32(survivors.shape[0]).tobytes(), dtype=np.uint8)
    return np.concatenate([header, survivors.ravel()])


def _golden_array(op: Op, src: TensorDesc, params: OperatorParams, mem: SimMemory) -> np.ndarray:
    """Compute the output byte stream of op by direct definition."""
    arr = _tensor_array(src, mem)
    h, w, c, eb = arr.shape
    s = params.scale

    if op is Op.TRANSPOSE:
        return np.swapaxes(arr, 0, 1)
    if op is Op.ROT90:
        # counter-clockwise: out(x_o=y_i, y_o=w-1-x_i)
        return np.rot90(arr, k=1, axes=(0, 1))
    if op is Op.PIXELSHUFFLE:
        co = c // (s * s)
        # channel convention: c_i = (i*s + j)*co + c_o (contiguous blocks per offset)
        t = arr.reshape(h, w, s, s, co, eb)
        return t.transpose(0, 2, 1, 3, 4, 5).reshape(h * s, w * s, co, eb)
    if op is Op.PIXELUNSHUFFLE:
        ho, wo = h // s, w // s
        t = arr.reshape(ho, s, wo, s, c, eb)
        return t.transpose(0, 2, 1, 3, 4, 5).reshape(ho, wo, s * s * c, eb)
    if op is Op.UPSAMPLE:
        return np.repeat(np.repeat(arr, s, axis=0), s, axis=1)
    if op is Op.ROUTE:
        other = _tensor_array(params.second_source, mem)
        return np.concatenate([arr, other], axis=2)
    if op is Op.SPLIT:
        half = c // 2
        return np.concatenate([arr[:, :, :half], arr[:, :, half:]], axis=0)
    if op is Op.ADD:
        _require_1byte(op, src)
        other = _tensor_array(params.second_source, mem)
        out = saturating_add_i8(arr.view(np.int8), other.view(np.int8))
        return out.view(np.uint8)
    if op is Op.REARRANGE:
        out = np.zeros((h, w, s, eb), dtype=np.uint8)
        out[:, :, :c] = arr
        return out
    if op is Op.RESIZE:
        return bilinear_reference(arr.reshape(h, w, c), s)
    if op is Op.IMG2COL:
        xk, yk = params.kernel
        xp, yp = params.padding
        xs, ys = params.stride
        wo = (w + 2 * xp - xk) // xs + 1
        ho = (h + 2 * yp - yk) // ys + 1
        padded = np.zeros((h + 2 * yp, w + 2 * xp, c, eb), dtype=np.uint8)
        padded[yp:yp + h, xp:xp + w] = arr
        out = np.empty((ho, wo, yk * xk, c, eb), dtype=np.uint8)
        for v in range(yk):
            for u in range(xk):
                win = padded[v:v + ho * ys:ys, u:u + wo * xs:xs]
                out[:, :, v * xk + u] = win
        return out.reshape(ho, wo, yk * xk * c, eb)
    if op is Op.BBOXCAL:
        flat = arr.reshape(-1, BBOX_RECORD)
        return bboxcal_reference(flat, params.threshold)
    raise ParamError(f"{op} is not a tensor operator")


def golden_execute(op: Op, src: TensorDesc, params: OperatorParams,
                   mem: SimMemory, dst_base: Optional[int] = None) -> TensorDesc:
    """Run one operator by definition and place the result in memory.

    The destination defaults to the first bus-aligned address past the
    source region(s); it must not overlap any live source.
    """
    mem.check_tensor(src)
    validate_params(op, src, params)
    out = np.ascontiguousarray(_golden_array(op, src, params, mem)).ravel()
    if dst_base is None:
        end = src.end_addr
        if params.second_source is not None:
            end = max(end, params.second_source.end_addr)
        dst_base = -(-end // BUS_BYTES) * BUS_BYTES
    records = None
    if op is Op.BBOXCAL:
        records = (out.size - 4) // BBOX_RECORD
    dst = output_desc(op, src, params, dst_base, bbox_records=records)
    for live in filter(None, (src, params.second_source)):
        if dst.overlaps(live):
            raise MemoryRangeError("destination overlaps a live source tensor")
    mem.write(dst_base, out)
    return dst


@dataclass
class MatchReport:
    matches: bool
    first_mismatch: Optional[tuple[int, int, int]] = None
    a_value: Optional[int] = None
    b_value: Optional[int] = None
    max_abs_diff: int = 0

    def __bool__(self):
        return self.matches


def compare_tensors(a: TensorDesc, b: TensorDesc, mem: SimMemory, tol: int = 0) -> MatchReport:
    """Element-wise comparison; tol is the max allowed absolute difference."""
    if (a.height, a.width, a.channels, a.elem_bytes) != (b.height, b.width, b.channels, b.elem_bytes):
        raise ShapeError(f"shape mismatch: {a} vs {b}")
    va = mem.read(a.base_addr, a.byte_extent).astype(np.int16)
    vb = mem.read(b.base_addr, b.byte_extent).astype(np.int16)
    diff = np.abs(va - vb)
    worst = int(diff.max()) if diff.size else 0
    bad = np.nonzero(diff > tol)[0]
    if bad.size == 0:
        return MatchReport(True, max_abs_diff=worst)
    i = int(bad[0]) // a.elem_bytes
    c = i % a.channels
    x = (i // a.channels) % a.width
    y = i // (a.channels * a.width)
    return MatchReport(False, (x, y, c), int(va[bad[0]]), int(vb[bad[0]]), worst)


def save_tensor(desc: TensorDesc, mem: SimMemory, path: str | Path) -> None:
    """Raw bytes next to a JSON sidecar describing the shape."""
    path = Path(path)
    path.write_bytes(mem.read(desc.base_addr, desc.byte_extent).tobytes())
    sidecar = {"height": desc.height, "width": desc.width,
               "channels": desc.channels, "elem_bytes": desc.elem_bytes}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))


def load_tensor(path: str | Path, mem: SimMemory, base_addr: int) -> TensorDesc:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    desc = TensorDesc(meta["height"], meta["width"], meta["channels"],
                      meta["elem_bytes"], base_addr)
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    if raw.size != desc.byte_extent:
        raise ShapeError(f"fixture payload is {raw.size} bytes, sidecar implies {desc.byte_extent}")
    mem.write(base_addr, raw)
    return desc


__all__ = [
    "Op", "TensorDesc", "SimMemory", "OperatorParams", "MatchReport",
    "golden_execute", "compare_tensors", "output_desc", "validate_params",
    "save_tensor", "load_tensor", "saturating_add_i8", "bilinear_reference",
    "bboxcal_reference", "BUS_BYTES", "BBOX_RECORD", "BBOX_OBJ_BYTE",
    "FINE_OPS", "COARSE_OPS", "STREAMING_OPS", "ALL_OPS", "TWO_SOURCE_OPS",
]
