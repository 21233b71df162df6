"""Assembler, binary codec, and round-trip stability."""

from pathlib import Path

import numpy as np
import pytest

from tmusim.errors import AsmError, DecodeError, ParamError
from tmusim.isa import (
    MAGIC, Program, TmInstruction, assemble, decode, decode_program, encode,
    encode_program, make_instruction, validate_instruction,
)
from tmusim.tensor_model import (
    ALL_OPS, BBOX_RECORD, Op, OperatorParams, TensorDesc,
)

DATA = Path(__file__).parent / "data"

REFERENCE_ASM = """\
# reference program exercising every operator
rearrange     src=0x0000 h=8 w=8 c=3  s=4              dst=0x1000
resize        src=0x0000 h=8 w=8 c=3  s=2              dst=0x1100
bboxcal       src=0x2000 h=1 w=4 c=85 thr=128          dst=0x2200
img2col       src=0x0000 h=8 w=8 c=3  kx=3 ky=3 px=1 py=1 sx=1 sy=1 dst=0x3000
transpose     src=0x0000 h=8 w=8 c=3                   dst=0x4000
rot90         src=0x0000 h=8 w=8 c=3                   dst=0x4100
pixelshuffle  src=0x0000 h=8 w=8 c=4  s=2              dst=0x4200
pixelunshuffle src=0x0000 h=8 w=8 c=4 s=2              dst=0x4400
upsample      src=0x0000 h=8 w=8 c=4  s=2              dst=0x4600
route         src=0x0000 src1=0x0100 h=8 w=8 c=3 c1=3  dst=0x5000
split         src=0x0000 h=8 w=8 c=4                   dst=0x5200
add           src=0x0000 src1=0x0100 h=8 w=8 c=4 fwd=1 dst=0x5400
halt
"""


def sample_instruction(op=Op.TRANSPOSE):
    return make_instruction(op, TensorDesc(4, 4, 4), 256)


class TestAssembler:
    def test_reference_program_assembles(self):
        prog = assemble(REFERENCE_ASM)
        assert len(prog.instructions) == 13
        assert prog.instructions[-1].opcode is Op.HALT
        ops = [i.opcode for i in prog.instructions[:-1]]
        assert ops == ALL_OPS

    def test_semicolon_separation_and_comments(self):
        prog = assemble("transpose src=0 h=2 w=2 c=1 dst=16 # note\n"
                        "; split src=0 h=2 w=2 c=2 dst=32 ; halt")
        assert [i.opcode for i in prog.instructions] == \
            [Op.TRANSPOSE, Op.SPLIT, Op.HALT]

    def test_hex_and_decimal_integers(self):
        prog = assemble("transpose src=0x10 h=2 w=2 c=1 dst=32\nhalt")
        assert prog.instructions[0].src0.base_addr == 16

    def test_forward_flag(self):
        prog = assemble("add src=0 src1=16 h=2 w=2 c=4 fwd=1 dst=32\nhalt")
        assert prog.instructions[0].forward_flag

    def test_derives_output_descriptor(self):
        prog = assemble("pixelshuffle src=0 h=2 w=2 c=4 s=2 dst=64\nhalt")
        d = prog.instructions[0].dst
        assert (d.height, d.width, d.channels, d.base_addr) == (4, 4, 1, 64)

    @pytest.mark.parametrize("bad,msg", [
        ("frobnicate src=0 h=2 w=2 c=1 dst=16\nhalt", "unknown opcode"),
        ("transpose src=0 h=2 w=2 dst=16\nhalt", "missing required key 'c'"),
        ("transpose src=0 h=2 w=2 c=1 dst=16 bogus=1\nhalt", "unknown key"),
        ("transpose src=0 h=2 w=2 c=1 c=2 dst=16\nhalt", "duplicate key"),
        ("transpose src=0 h=2 w=2 c=zz dst=16\nhalt", "bad integer"),
        ("transpose src=0 h=2 w=2 c=1 dst=16", "missing HALT"),
        ("add src=0 h=2 w=2 c=4 dst=32\nhalt", "missing required key 'src1'"),
        ("transpose src=0 src1=64 h=2 w=2 c=1 dst=16\nhalt",
         "takes no second source"),
        ("halt extra\n", "halt takes no operands"),
        ("pixelshuffle src=0 h=2 w=2 c=3 s=2 dst=64\nhalt", "divisible"),
    ])
    def test_diagnostics(self, bad, msg):
        with pytest.raises(AsmError) as exc:
            assemble(bad)
        assert msg in str(exc.value)

    def test_error_carries_line_number(self):
        with pytest.raises(AsmError) as exc:
            assemble("transpose src=0 h=2 w=2 c=1 dst=16\nbadop x=1\nhalt")
        assert exc.value.line == 2

    def test_overlapping_dst_rejected(self):
        with pytest.raises(AsmError) as exc:
            assemble("transpose src=0 h=2 w=2 c=4 dst=8\nhalt")
        assert "overlap" in str(exc.value)


class TestProgramStructure:
    def test_requires_single_trailing_halt(self):
        ins = sample_instruction()
        halt = TmInstruction(Op.HALT)
        with pytest.raises(ParamError):
            Program([ins])
        with pytest.raises(ParamError):
            Program([halt, ins, halt])
        Program([ins, halt])   # fine

    def test_validate_rejects_halt_with_operands(self):
        with pytest.raises(ParamError):
            validate_instruction(TmInstruction(Op.HALT, TensorDesc(1, 1, 1)))


class TestCodec:
    def test_roundtrip_single(self):
        ins = sample_instruction()
        back, _ = decode(encode(ins))
        assert back == ins

    def test_roundtrip_program(self):
        prog = assemble(REFERENCE_ASM)
        assert decode_program(encode_program(prog)) == prog

    def test_halt_is_two_bytes(self):
        assert encode(TmInstruction(Op.HALT)) == b"\x00\x00"

    def test_magic_and_truncation_checks(self):
        with pytest.raises(DecodeError):
            decode_program(b"NOPE" + b"\x00" * 16)
        blob = encode_program(assemble("halt"))
        with pytest.raises(DecodeError):
            decode_program(blob + b"\xff")
        with pytest.raises(DecodeError):
            decode(encode(sample_instruction())[:10])

    def test_unknown_opcode_byte(self):
        with pytest.raises(DecodeError):
            decode(bytes([200, 0]))

    def test_golden_binary_snapshot(self):
        # canonical encoding is stable: byte-for-byte identical to the
        # committed snapshot
        blob = encode_program(assemble(REFERENCE_ASM))
        golden = (DATA / "reference_program.bin").read_bytes()
        assert blob == golden

    def test_randomized_roundtrip(self):
        rng = np.random.default_rng(99)
        count = 0
        for _ in range(400):
            op = ALL_OPS[int(rng.integers(len(ALL_OPS)))]
            h, w = int(rng.integers(2, 16)), int(rng.integers(2, 16))
            c = int(rng.integers(1, 8))
            p = OperatorParams()
            if op is Op.PIXELSHUFFLE:
                c *= 4
                p = OperatorParams(scale=2)
            elif op in (Op.PIXELUNSHUFFLE, Op.RESIZE, Op.UPSAMPLE):
                h, w = 2 * h, 2 * w
                p = OperatorParams(scale=2)
            elif op is Op.SPLIT:
                c *= 2
            elif op is Op.REARRANGE:
                p = OperatorParams(scale=c + 1)
            elif op is Op.BBOXCAL:
                h, w, c = 1, int(rng.integers(1, 5)), BBOX_RECORD
                p = OperatorParams(threshold=int(rng.integers(256)))
            elif op is Op.IMG2COL:
                p = OperatorParams(kernel=(3, 3), padding=(1, 1))
                h = max(h, 3)
                w = max(w, 3)
            src = TensorDesc(h, w, c)
            src1 = TensorDesc(h, w, c, 1, src.byte_extent) \
                if op in (Op.ROUTE, Op.ADD) else None
            ins = make_instruction(op, src, 1 << 20, p, src1=src1,
                                   forward_flag=bool(rng.integers(2)))
            back, _ = decode(encode(ins))
            assert back == ins
            count += 1
        assert count == 400
