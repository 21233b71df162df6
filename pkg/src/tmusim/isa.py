"""TM instruction set: textual assembly, binary encoding, and the decoder.

The binary layout is an artifact of this simulator (the hardware ISA has no
published bit layout): fixed-width little-endian fields with length-prefixed
variable blocks, chosen so that decode is a trivial inverse of encode and
golden files stay stable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Optional

from .errors import AsmError, DecodeError, EncodingError, ParamError
from . import rme
from .affine import build_affine_map, MAPPED_OPS
from .tensor_model import (
    Op, OperatorParams, TensorDesc, TWO_SOURCE_OPS, output_desc, validate_params,
)

MAGIC = b"TMU1"
VERSION = 1

_FLAG_FWD = 0x01
_FLAG_SRC1 = 0x02

# assembly keys consumed per opcode, beyond the universal src/h/w/c/dst
_KEY_MANIFEST = {
    Op.REARRANGE: {"s"},
    Op.RESIZE: {"s"},
    Op.BBOXCAL: {"thr"},
    Op.IMG2COL: {"kx", "ky", "px", "py", "sx", "sy"},
    Op.TRANSPOSE: set(),
    Op.ROT90: set(),
    Op.PIXELSHUFFLE: {"s"},
    Op.PIXELUNSHUFFLE: {"s"},
    Op.UPSAMPLE: {"s"},
    Op.ROUTE: {"src1", "c1"},
    Op.SPLIT: set(),
    Op.ADD: {"src1"},
}

_ALL_KEYS = {"src", "src1", "dst", "h", "w", "c", "c1", "kx", "ky", "px", "py",
             "sx", "sy", "s", "thr", "fwd"}


@dataclass(frozen=True)
class TmInstruction:
    """One decoded TM operation."""

    opcode: Op
    src0: Optional[TensorDesc] = None
    src1: Optional[TensorDesc] = None
    dst: Optional[TensorDesc] = None
    params: OperatorParams = field(default_factory=OperatorParams)
    forward_flag: bool = False
    addr_fields: bytes = b""
    mask_fields: bytes = b""

    def run_params(self) -> OperatorParams:
        """Params with the second source attached, ready for execution."""
        return replace(self.params, second_source=self.src1)


@dataclass
class Program:
    """Instruction sequence terminated by a single trailing HALT."""

    instructions: list[TmInstruction]

    def __post_init__(self):
        halts = [i for i, ins in enumerate(self.instructions) if ins.opcode is Op.HALT]
        if not self.instructions:
            raise ParamError("empty program")
        if halts != [len(self.instructions) - 1]:
            raise ParamError("program must contain exactly one HALT, last")


def validate_instruction(ins: TmInstruction) -> None:
    """Total validation: every opcode has a checked field manifest."""
    if ins.opcode is Op.HALT:
        if ins.src0 or ins.src1 or ins.dst:
            raise ParamError("HALT carries no operands")
        return
    if ins.src0 is None or ins.dst is None:
        raise ParamError(f"{ins.opcode.name} needs src and dst descriptors")
    if (ins.src1 is not None) != (ins.opcode in TWO_SOURCE_OPS):
        raise ParamError(f"{ins.opcode.name}: second source mismatch")
    validate_params(ins.opcode, ins.src0, ins.run_params())
    for src in filter(None, (ins.src0, ins.src1)):
        if ins.dst.overlaps(src):
            raise ParamError("destination overlaps a live source tensor")
    if ins.src1 is not None and ins.src0.overlaps(ins.src1):
        raise ParamError("source tensors overlap")


def make_instruction(op: Op, src0: TensorDesc, dst_base: int,
                     params: Optional[OperatorParams] = None,
                     src1: Optional[TensorDesc] = None,
                     forward_flag: bool = False,
                     mode: str = "oracle") -> TmInstruction:
    """Build a validated instruction with derived dst and serialized blocks."""
    params = params or OperatorParams()
    run = replace(params, second_source=src1)
    validate_params(op, src0, run)   # before output_desc, for clear diagnostics
    dst = output_desc(op, src0, run, dst_base)
    addr = b""
    if op in MAPPED_OPS:
        addr = _serialize_map(build_affine_map(op, src0, run, mode))
    ins = TmInstruction(op, src0, src1, dst,
                        replace(params, second_source=None),
                        forward_flag, addr, b"")
    mask = b""
    if op in rme.MASKABLE_OPS:
        mask = rme.configure_mask(ins).to_bytes()
    ins = replace(ins, mask_fields=mask)
    validate_instruction(ins)
    return ins


def _serialize_map(m) -> bytes:
    pre_code = {None: 0, "pixelshuffle": 1, "pixelunshuffle": 2, "split": 3}[m.pre]
    head = struct.pack("<BBBBII Q", 0 if m.mode == "oracle" else 1, pre_code,
                       m.pre_s, m.replicate[0], m.out_channels, m.pre_block,
                       m.dst_elems)
    fracs = [f for row in m.a for f in row] + list(m.b)
    body = b"".join(struct.pack("<qQ", f.numerator, f.denominator) for f in fracs)
    return head + body


# ---------------------------------------------------------------------------
# assembler

def _parse_int(tok: str, line: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise AsmError(f"bad integer {tok!r}", line) from None


def assemble(text: str, mode: str = "oracle") -> Program:
    """Parse assembly source into a validated Program.

    Grammar: one instruction per line or semicolon-separated,
    ``opcode key=value ...``; integers decimal or 0x-hex; ``#`` comments.
    """
    instructions = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0]
        for stmt in body.split(";"):
            toks = stmt.split()
            if not toks:
                continue
            name, kvs = toks[0], toks[1:]
            if name.lower() == "halt":
                if kvs:
                    raise AsmError("halt takes no operands", lineno)
                instructions.append(TmInstruction(Op.HALT))
                continue
            try:
                op = Op.from_name(name)
            except ParamError:
                raise AsmError(f"unknown opcode {name!r}", lineno,
                               raw.index(name) + 1) from None
            fields = {}
            for kv in kvs:
                if "=" not in kv:
                    raise AsmError(f"expected key=value, got {kv!r}", lineno)
                k, v = kv.split("=", 1)
                if k not in _ALL_KEYS:
                    raise AsmError(f"unknown key {k!r}", lineno)
                if k in fields:
                    raise AsmError(f"duplicate key {k!r}", lineno)
                fields[k] = _parse_int(v, lineno)
            instructions.append(_build_from_fields(op, fields, lineno, mode))
    if not instructions or instructions[-1].opcode is not Op.HALT:
        raise AsmError("missing HALT at end of program",
                       len(text.splitlines()) or 1)
    try:
        return Program(instructions)
    except ParamError as exc:
        raise AsmError(str(exc)) from None


def _build_from_fields(op: Op, f: dict, lineno: int, mode: str) -> TmInstruction:
    for req in ("src", "dst", "h", "w", "c"):
        if req not in f:
            raise AsmError(f"{op.name.lower()} missing required key {req!r}", lineno)
    for key in _KEY_MANIFEST[op] - {"src1", "c1"}:
        if key not in f and key in ("s", "thr"):
            raise AsmError(f"{op.name.lower()} missing required key {key!r}", lineno)
    src0 = TensorDesc(f["h"], f["w"], f["c"], 1, f["src"])
    src1 = None
    if op in TWO_SOURCE_OPS:
        if "src1" not in f:
            raise AsmError(f"{op.name.lower()} missing required key 'src1'", lineno)
        c1 = f.get("c1", f["c"]) if op is Op.ROUTE else f["c"]
        src1 = TensorDesc(f["h"], f["w"], c1, 1, f["src1"])
    elif "src1" in f or "c1" in f:
        raise AsmError(f"{op.name.lower()} takes no second source", lineno)
    params = OperatorParams(
        kernel=(f.get("kx", 1), f.get("ky", 1)),
        padding=(f.get("px", 0), f.get("py", 0)),
        stride=(f.get("sx", 1), f.get("sy", 1)),
        scale=f.get("s", 1),
        threshold=f.get("thr", 0),
    )
    try:
        return make_instruction(op, src0, f["dst"], params, src1,
                                bool(f.get("fwd", 0)), mode)
    except AsmError:
        raise
    except Exception as exc:
        raise AsmError(str(exc), lineno) from exc


# ---------------------------------------------------------------------------
# binary codec

def _pack_desc(d: Optional[TensorDesc]) -> bytes:
    if d is None:
        return struct.pack("<5I", 0, 0, 0, 0, 0)
    for v in (d.base_addr, d.height, d.width, d.channels, d.elem_bytes):
        if v >= 2 ** 32:
            raise EncodingError(f"descriptor field {v} overflows 32 bits")
    return struct.pack("<5I", d.base_addr, d.height, d.width, d.channels, d.elem_bytes)


def _unpack_desc(buf: bytes) -> Optional[TensorDesc]:
    base, h, w, c, eb = struct.unpack("<5I", buf)
    if h == 0:
        return None
    return TensorDesc(h, w, c, eb, base)


def encode(ins: TmInstruction) -> bytes:
    """Fixed-layout little-endian encoding of one instruction."""
    if ins.opcode is Op.HALT:
        return struct.pack("<BB", 0, 0)
    flags = (_FLAG_FWD if ins.forward_flag else 0) | (_FLAG_SRC1 if ins.src1 else 0)
    p = ins.params
    for v in (*p.kernel, *p.padding, *p.stride, p.scale, p.threshold):
        if v >= 2 ** 32:
            raise EncodingError(f"parameter {v} overflows 32 bits")
    parts = [
        struct.pack("<BB", ins.opcode.value, flags),
        _pack_desc(ins.src0), _pack_desc(ins.src1), _pack_desc(ins.dst),
        struct.pack("<8I", p.kernel[0], p.kernel[1], p.padding[0], p.padding[1],
                    p.stride[0], p.stride[1], p.scale, p.threshold),
        struct.pack("<H", len(ins.addr_fields)), ins.addr_fields,
        struct.pack("<H", len(ins.mask_fields)), ins.mask_fields,
    ]
    return b"".join(parts)


def decode(buf: bytes, offset: int = 0) -> tuple[TmInstruction, int]:
    """Decode one instruction; returns (instruction, next offset)."""
    def take(n):
        nonlocal offset
        if offset + n > len(buf):
            raise DecodeError("truncated instruction stream")
        chunk = buf[offset:offset + n]
        offset += n
        return chunk

    opcode_byte, flags = struct.unpack("<BB", take(2))
    try:
        op = Op(opcode_byte)
    except ValueError:
        raise DecodeError(f"unknown opcode byte 0x{opcode_byte:02x}") from None
    if op is Op.HALT:
        return TmInstruction(Op.HALT), offset
    src0 = _unpack_desc(take(20))
    src1 = _unpack_desc(take(20))
    dst = _unpack_desc(take(20))
    kx, ky, px, py, sx, sy, s, thr = struct.unpack("<8I", take(32))
    params = OperatorParams(kernel=(kx, ky), padding=(px, py), stride=(sx, sy),
                            scale=s, threshold=thr)
    (alen,) = struct.unpack("<H", take(2))
    addr = take(alen)
    (mlen,) = struct.unpack("<H", take(2))
    mask = take(mlen)
    if bool(flags & _FLAG_SRC1) != (src1 is not None):
        raise DecodeError("src1 flag inconsistent with descriptor block")
    return TmInstruction(op, src0, src1, dst, params,
                         bool(flags & _FLAG_FWD), addr, mask), offset


def encode_program(prog: Program) -> bytes:
    body = b"".join(encode(i) for i in prog.instructions)
    return MAGIC + struct.pack("<BI", VERSION, len(prog.instructions)) + body


def decode_program(buf: bytes) -> Program:
    if buf[:4] != MAGIC:
        raise DecodeError("bad magic; not a TMU binary program")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise DecodeError(f"unsupported version {version}")
    offset = 9
    instructions = []
    for _ in range(count):
        ins, offset = decode(buf, offset)
        instructions.append(ins)
    if offset != len(buf):
        raise DecodeError("trailing bytes after last instruction")
    return Program(instructions)


__all__ = [
    "TmInstruction", "Program", "assemble", "encode", "decode",
    "encode_program", "decode_program", "make_instruction",
    "validate_instruction", "MAGIC", "VERSION",
]
