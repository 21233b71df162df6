"""Reconfigurable masking engine for fine-grained (byte-level) manipulation.

Two schemes share one three-stage template (masking/indexing, datastream
construction, FSM-controlled commit):

* ``assemble`` gathers selected bytes into a packed output stream
  (Rearrange, the neighbor gather feeding Resize).
* ``evaluate`` filters or reduces bytes by comparison (Bboxcal, max/min).

A new fine-grained operator plugs in a masking rule plus an output mapping;
the pipeline itself is fixed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import MaskError, ParamError
from .tensor_model import BBOX_OBJ_BYTE, BBOX_RECORD, BUS_BYTES, Op

MASKABLE_OPS = {Op.REARRANGE, Op.BBOXCAL, Op.RESIZE}

SCHEME_ASSEMBLE = "assemble"
SCHEME_EVALUATE = "evaluate"

EVAL_THRESHOLD = "threshold_greater"
EVAL_MAX = "max"
EVAL_MIN = "min"


@dataclass(frozen=True)
class MaskConfig:
    """RME register state derived from one instruction."""

    scheme: str
    segment_counter: tuple[int, int, int] = (0, 0, 0)  # (skip, take, repeat)
    byte_mask: int = 0          # bit-per-byte selection, up to 64 bytes
    dest_map: tuple[int, ...] = ()
    out_stride: int = BUS_BYTES  # assembled block size, zero-filled past dest_map
    eval_op: str = EVAL_THRESHOLD
    eval_operand: int = 0
    record_stride: int = 0
    eval_byte: int = 0

    def __post_init__(self):
        if self.scheme not in (SCHEME_ASSEMBLE, SCHEME_EVALUATE):
            raise MaskError(f"unknown scheme {self.scheme!r}")
        if not 0 <= self.byte_mask < (1 << 64):
            raise MaskError("byte mask selects at most 64 bytes")
        if len(set(self.dest_map)) != len(self.dest_map):
            raise MaskError("dest_map collision: slots must be unique")
        if self.scheme == SCHEME_ASSEMBLE:
            _, take, repeat = self.segment_counter
            if repeat and not take:
                raise MaskError("segment counter with zero take")
            if not repeat and self.byte_mask == 0:
                raise MaskError("assemble scheme needs at least one selected byte")

    def to_bytes(self) -> bytes:
        scheme = 0 if self.scheme == SCHEME_ASSEMBLE else 1
        ev = {EVAL_THRESHOLD: 0, EVAL_MAX: 1, EVAL_MIN: 2}[self.eval_op]
        head = struct.pack("<BB3I Q I I I B", scheme, ev, *self.segment_counter,
                           self.byte_mask, self.out_stride, self.eval_operand,
                           self.record_stride, self.eval_byte)
        return head + struct.pack(f"<H{len(self.dest_map)}H",
                                  len(self.dest_map), *self.dest_map)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "MaskConfig":
        scheme, ev, skip, take, repeat, mask, stride, operand, rstride, ebyte = \
            struct.unpack_from("<BB3I Q I I I B", buf)
        off = struct.calcsize("<BB3I Q I I I B")
        (n,) = struct.unpack_from("<H", buf, off)
        dest = struct.unpack_from(f"<{n}H", buf, off + 2)
        return cls(SCHEME_ASSEMBLE if scheme == 0 else SCHEME_EVALUATE,
                   (skip, take, repeat), mask, tuple(dest), stride,
                   [EVAL_THRESHOLD, EVAL_MAX, EVAL_MIN][ev], operand,
                   rstride, ebyte)


@dataclass
class AssembleState:
    """Partial output word plus commit bookkeeping."""

    word: bytearray = field(default_factory=lambda: bytearray(BUS_BYTES))
    fill: int = 0
    committed_words: int = 0


def configure_mask(ins) -> MaskConfig:
    """Deterministic RME configuration from opcode and shape."""
    op = ins.opcode
    src = ins.src0
    if op is Op.REARRANGE:
        take = src.channels
        out = ins.params.scale
        return MaskConfig(SCHEME_ASSEMBLE,
                          segment_counter=(0, take, src.height * src.width),
                          byte_mask=(1 << take) - 1,
                          dest_map=tuple(range(take)), out_stride=out)
    if op is Op.BBOXCAL:
        records = src.num_elements // BBOX_RECORD
        return MaskConfig(SCHEME_EVALUATE,
                          segment_counter=(0, BBOX_RECORD, records),
                          byte_mask=1 << BBOX_OBJ_BYTE,
                          eval_op=EVAL_THRESHOLD, eval_operand=ins.params.threshold,
                          record_stride=BBOX_RECORD, eval_byte=BBOX_OBJ_BYTE)
    if op is Op.RESIZE:
        # gather the 4 neighbor bytes per output pixel; arithmetic happens in
        # the element-wise unit, not here
        out_px = (src.height // ins.params.scale) * (src.width // ins.params.scale)
        return MaskConfig(SCHEME_ASSEMBLE,
                          segment_counter=(0, 4, out_px * src.channels),
                          byte_mask=0xF, dest_map=(0, 1, 2, 3), out_stride=4)
    raise ParamError(f"{op.name} has no fine-grained realization")


def identity_config() -> MaskConfig:
    """All-ones byte mask with identity destination map: passthrough."""
    return MaskConfig(SCHEME_ASSEMBLE, byte_mask=(1 << BUS_BYTES) - 1,
                      dest_map=tuple(range(BUS_BYTES)))


def assemble_stream(cfg: MaskConfig, data) -> np.ndarray:
    """Run the assemble scheme over a byte stream.

    Output length is exactly predictable: repeat * out_stride in pattern mode,
    selected-bytes rounded into bus words in word mode.
    """
    if cfg.scheme != SCHEME_ASSEMBLE:
        raise MaskError("assemble_stream needs an assemble-scheme config")
    data = np.asarray(data, dtype=np.uint8).ravel()
    skip, take, repeat = cfg.segment_counter
    if repeat:
        return _assemble_pattern(cfg, data, skip, take, repeat)
    return _assemble_words(cfg, data)


def _assemble_pattern(cfg: MaskConfig, data: np.ndarray, skip, take, repeat):
    unit = skip + take
    if data.size != unit * repeat:
        raise MaskError(f"input length {data.size} is not {repeat} x {unit}-byte patterns")
    if len(cfg.dest_map) != take:
        raise MaskError("dest_map length must equal the take count")
    if any(d >= cfg.out_stride for d in cfg.dest_map):
        raise MaskError("dest_map slot outside the output block")
    taken = data.reshape(repeat, unit)[:, skip:]
    out = np.zeros((repeat, cfg.out_stride), dtype=np.uint8)
    out[:, list(cfg.dest_map)] = taken
    return out.ravel()


def _assemble_words(cfg: MaskConfig, data: np.ndarray):
    if data.size % BUS_BYTES:
        raise MaskError("word-mode input must be whole bus words")
    sel = [i for i in range(BUS_BYTES) if cfg.byte_mask >> i & 1]
    if len(cfg.dest_map) != len(sel):
        raise MaskError("dest_map length must match the selected byte count")
    state = AssembleState()
    out = bytearray()
    for word in data.reshape(-1, BUS_BYTES):
        base = state.fill  # slots are relative to the current fill level
        for slot, byte in zip(cfg.dest_map, word[sel]):
            pos = base + slot
            if pos >= BUS_BYTES:
                raise MaskError("dest_map slot overflows the assemble register")
            state.word[pos] = int(byte)
        state.fill += len(sel)
        if state.fill >= BUS_BYTES:
            out += state.word
            state.word = bytearray(BUS_BYTES)
            state.fill = 0
            state.committed_words += 1
    if state.fill:
        out += state.word[:state.fill]
    return np.frombuffer(bytes(out), dtype=np.uint8)


def evaluate_stream(cfg: MaskConfig, data) -> np.ndarray:
    """Run the evaluate scheme: threshold filter or extremum retrieval."""
    if cfg.scheme != SCHEME_EVALUATE:
        raise MaskError("evaluate_stream needs an evaluate-scheme config")
    data = np.asarray(data, dtype=np.uint8).ravel()
    stride = cfg.record_stride or 1
    if data.size % stride:
        raise MaskError(f"record stride {stride} does not divide input length {data.size}")
    records = data.reshape(-1, stride)
    probe = records[:, cfg.eval_byte].astype(np.int64)
    if cfg.eval_op == EVAL_THRESHOLD:
        keep = probe > cfg.eval_operand
        survivors = records[keep]
        header = np.frombuffer(np.uint32(survivors.shape[0]).tobytes(), dtype=np.uint8)
        return np.concatenate([header, survivors.ravel()])
    if cfg.eval_op in (EVAL_MAX, EVAL_MIN):
        idx = int(probe.argmax() if cfg.eval_op == EVAL_MAX else probe.argmin())
        value = int(probe[idx])
        return np.frombuffer(struct.pack("<BI", value, idx), dtype=np.uint8)
    raise MaskError(f"unknown eval op {cfg.eval_op!r}")


__all__ = [
    "MaskConfig", "AssembleState", "configure_mask", "identity_config",
    "assemble_stream", "evaluate_stream", "MASKABLE_OPS",
    "SCHEME_ASSEMBLE", "SCHEME_EVALUATE", "EVAL_THRESHOLD", "EVAL_MAX", "EVAL_MIN",
]
