"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Run with ``pytest -s tests/test_acceptance.py`` to see the summary lines.
"""

import time
from itertools import product

import numpy as np
import pytest

from tmusim.affine import build_affine_map, element_offsets
from tmusim.cli import check_op
from tmusim.engine import DramModel, Engine
from tmusim.isa import assemble, decode, encode, encode_program, make_instruction
from tmusim.system import (
    STRATEGIES, SystemConfig, builtin_traces, forwarding_gates,
    run_model_trace, schedule,
)
from tmusim.tensor_model import (
    ALL_OPS, Op, OperatorParams, SimMemory, TensorDesc,
)

SEED = 20260823


def report(num, ok, text):
    status = "PASS" if ok else "FAIL"
    print(f"{status}: criterion {num} — {text}")
    assert ok, f"criterion {num}: {text}"


def test_criterion_1_oracle_equivalence():
    """100 randomized shapes per operator, bit-exact vs the golden oracle
    (Resize within 1); must finish inside 60 s."""
    start = time.monotonic()
    failures = []
    for op in ALL_OPS:
        ok, total = check_op(op, 100, SEED, 64 * 1024, DramModel())
        if ok != total:
            failures.append(f"{op.name}: {ok}/{total}")
    elapsed = time.monotonic() - start
    report(1, not failures and elapsed < 60.0,
           f"oracle equivalence, 12 ops x 100 random shapes "
           f"({elapsed:.1f}s) {failures or ''}")


def test_criterion_2_address_map_bijectivity():
    """Exhaustive enumeration on {2,3,4,8}^3: destination offsets are exactly
    the destination extent."""
    start = time.monotonic()
    checked = 0
    ops = (Op.TRANSPOSE, Op.ROT90, Op.PIXELSHUFFLE, Op.PIXELUNSHUFFLE, Op.SPLIT)
    for op, (h, w, c) in product(ops, product((2, 3, 4, 8), repeat=3)):
        if op is Op.PIXELSHUFFLE and c % 4:
            continue
        if op is Op.PIXELUNSHUFFLE and (h % 2 or w % 2):
            continue
        if op is Op.SPLIT and c % 2:
            continue
        params = OperatorParams(scale=2) if op in (
            Op.PIXELSHUFFLE, Op.PIXELUNSHUFFLE) else OperatorParams()
        m = build_affine_map(op, TensorDesc(h, w, c), params)
        offs = np.sort(element_offsets(m))
        assert np.array_equal(offs, np.arange(h * w * c)), (op, h, w, c)
        checked += 1
    elapsed = time.monotonic() - start
    report(2, elapsed < 10.0,
           f"address-map bijectivity over {checked} exhaustive shapes "
           f"({elapsed:.1f}s)")


def test_criterion_3_streaming_bandwidth_bound():
    """Streaming operators stay within 1.15x of the pure-transfer bound at
    Table-III shapes scaled by 7, and never exceed 16 effective bytes/cycle."""
    start = time.monotonic()
    # per-segment fixed overhead: two load bursts + one store drain issue
    # latencies plus the pipeline fill cycle
    dram = DramModel()
    per_seg = 3 * dram.fixed_latency + 1
    cases = [
        (Op.REARRANGE, TensorDesc(64, 64, 3), OperatorParams(scale=4), None),
        (Op.ROUTE, TensorDesc(64, 64, 64), OperatorParams(), 64),
        (Op.SPLIT, TensorDesc(64, 64, 64), OperatorParams(), None),
        (Op.ADD, TensorDesc(64, 64, 64), OperatorParams(), 64),
    ]
    ok = True
    detail = []
    for op, src, params, c1 in cases:
        src1 = TensorDesc(src.height, src.width, c1, 1, src.byte_extent) \
            if c1 else None
        base = src.byte_extent * (2 if src1 else 1)
        mem = SimMemory(base + 4 * src.byte_extent)
        ins = make_instruction(op, src, base, params, src1=src1)
        rep = Engine(mem).run_instruction(ins)
        moved = rep.bytes_loaded + rep.bytes_stored
        bound = 1.15 * (-(-moved // 16)) + rep.segments * per_seg
        eff = moved / rep.total_cycles
        ok &= rep.total_cycles <= bound and eff <= 16.0
        detail.append(f"{op.name.lower()}={rep.total_cycles}/{bound:.0f}")
    elapsed = time.monotonic() - start
    report(3, ok and elapsed < 30.0,
           f"streaming ops within 1.15x transfer bound, <=16 B/cycle "
           f"({'; '.join(detail)}; {elapsed:.1f}s)")


def test_criterion_4_double_buffering_law():
    """Equal-cost 10-segment op: prefetch/serial ratio = (10+2)/(3*10)."""
    s, c = 10, 1000
    costs = [(c, c, c)] * s
    serial = schedule(costs, "serial").total_cycles
    prefetch = schedule(costs, "prefetch").total_cycles
    expect = serial * (s + 2) / (3 * s)
    ok = abs(prefetch - expect) <= 0.05 * expect
    report(4, ok,
           f"double-buffering law: prefetch {prefetch} vs expected "
           f"{expect:.0f} from serial {serial}")


def test_criterion_5_output_forwarding():
    """10-tile stub producer feeding PixelShuffle: forwarding reduction equals
    the analytic overlap window; model traces with a stub producer always
    improve under forwarding."""
    start = time.monotonic()
    # segment-level law on a PixelShuffle split into 10 tile-aligned segments
    src = TensorDesc(40, 64, 16)
    mem = SimMemory(1 << 20)
    ins = make_instruction(Op.PIXELSHUFFLE, src, src.byte_extent,
                           OperatorParams(scale=2))
    rep = Engine(mem, buffer_bytes=src.byte_extent // 10).run_instruction(ins)
    assert rep.segments == 10
    costs = rep.segment_costs
    seg_bytes = [rep.bytes_loaded // 10] * 10
    cpt = 4 * max(sum(c) for c in costs)        # slow producer: full overlap
    producer_done = 10 * cpt
    blocking = producer_done + schedule(costs, "prefetch").total_cycles
    gates = forwarding_gates(costs, 0, cpt / seg_bytes[0], seg_bytes,
                             tile_bytes=seg_bytes[0])
    overlapped = schedule(costs, "prefetch", gates).total_cycles
    reduction = blocking - overlapped
    # [DERIVED] producer-bound: every segment but the last hides entirely,
    # leaving the last tile's load+process+store exposed
    window = schedule(costs, "prefetch").total_cycles - sum(costs[-1])
    law_ok = reduction > 0 and abs(reduction - window) <= 0.05 * blocking

    trace_ok = True
    for name, spec in builtin_traces(7).items():
        if not any(s.kind == "tpu" for s in spec.steps):
            continue
        pre = run_model_trace(spec, SystemConfig(strategy="prefetch"), 7)
        fwd = run_model_trace(spec, SystemConfig(strategy="forwarding"), 7)
        trace_ok &= fwd.total_cycles < pre.total_cycles
    elapsed = time.monotonic() - start
    report(5, law_ok and trace_ok and elapsed < 10.0,
           f"output forwarding: reduction {reduction} vs window {window}; "
           f"all stub traces improve ({elapsed:.1f}s)")


def test_criterion_6_isa_roundtrip():
    """decode(encode(i)) == i over 1000 randomized instructions; canonical
    encoding is run-to-run stable."""
    start = time.monotonic()
    rng = np.random.default_rng(SEED)
    from tmusim.cli import _random_shape
    count = 0
    for _ in range(1000):
        op = ALL_OPS[int(rng.integers(len(ALL_OPS)))]
        src = _random_shape(rng, op)
        p = OperatorParams(scale=2, threshold=int(rng.integers(256)),
                           kernel=(3, 3), padding=(1, 1))
        if op is Op.REARRANGE:
            p = OperatorParams(scale=src.channels + int(rng.integers(0, 4)))
        src1 = TensorDesc(src.height, src.width, src.channels, 1,
                          src.byte_extent) if op in (Op.ROUTE, Op.ADD) else None
        ins = make_instruction(op, src, 1 << 22, p, src1=src1,
                               forward_flag=bool(rng.integers(2)))
        back, _ = decode(encode(ins))
        assert back == ins
        count += 1
    source = "transpose src=0 h=8 w=8 c=4 dst=0x200\nhalt"
    stable = encode_program(assemble(source)) == encode_program(assemble(source))
    elapsed = time.monotonic() - start
    report(6, count == 1000 and stable and elapsed < 5.0,
           f"ISA round-trip over {count} instructions, stable encoding "
           f"({elapsed:.1f}s)")


def test_criterion_7_strategy_functional_invariance():
    """Final memory image is bit-identical across all three strategies for
    every built-in model trace at scale 7."""
    start = time.monotonic()
    ok = True
    for name, spec in builtin_traces(7).items():
        images = [run_model_trace(spec, SystemConfig(strategy=s, seed=SEED), 7)
                  .memory.data for s in STRATEGIES]
        ok &= all(np.array_equal(images[0], img) for img in images[1:])
    elapsed = time.monotonic() - start
    report(7, ok and elapsed < 60.0,
           f"strategy-functional invariance across all traces ({elapsed:.1f}s)")


def test_criterion_8_segmentation_transparency():
    """Transpose and PixelShuffle outputs identical for 1 KiB / 4 KiB /
    64 KiB tensor buffers."""
    start = time.monotonic()
    ok = True
    for op, params in ((Op.TRANSPOSE, OperatorParams()),
                       (Op.PIXELSHUFFLE, OperatorParams(scale=2))):
        outputs = []
        for buf in (1024, 4096, 64 * 1024):
            src = TensorDesc(24, 24, 16)
            mem = SimMemory(64 * 1024)
            rng = np.random.default_rng(SEED)
            mem.data[:src.byte_extent] = rng.integers(
                0, 256, src.byte_extent, dtype=np.uint8)
            ins = make_instruction(op, src, 16 * 1024, params)
            rep = Engine(mem, buffer_bytes=buf).run_instruction(ins)
            outputs.append(mem.data[rep.dst.base_addr:rep.dst.end_addr].copy())
        ok &= all(np.array_equal(outputs[0], o) for o in outputs[1:])
    elapsed = time.monotonic() - start
    report(8, ok and elapsed < 10.0,
           f"segmentation transparency at 1/4/64 KiB buffers ({elapsed:.1f}s)")
