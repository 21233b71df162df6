"""Command-line harness: assemble, run, check, bench, trace.

Exit codes: 0 success, 1 verification/equivalence failure, 2 usage or
input-format errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .engine import DEFAULT_BUFFER_BYTES, DramModel, Engine
from .errors import TmuError
from .isa import MAGIC, assemble, decode_program, encode_program
from .system import (
    STRATEGIES, SystemConfig, TraceSpec, builtin_traces, run_model_trace,
)
from .tensor_model import (
    BBOX_RECORD, ALL_OPS, Op, OperatorParams, SimMemory, TensorDesc,
    compare_tensors, golden_execute, output_desc,
)

BENCH_CSV_HEADER = [
    "op", "height", "width", "channels", "param", "total_cycles",
    "load_cycles", "process_cycles", "store_cycles", "bytes_loaded",
    "bytes_stored", "segments", "cycles_per_kb",
]

# reference operator configurations (448-class feature maps); Bboxcal uses a
# 255-channel map so the record size divides the tensor
BENCH_CONFIGS: list[tuple[Op, TensorDesc, OperatorParams]] = [
    (Op.REARRANGE, TensorDesc(448, 448, 3), OperatorParams(scale=4)),
    (Op.RESIZE, TensorDesc(448, 448, 16), OperatorParams(scale=2)),
    (Op.BBOXCAL, TensorDesc(448, 448, 255), OperatorParams(threshold=128)),
    (Op.IMG2COL, TensorDesc(448, 448, 3),
     OperatorParams(kernel=(3, 3), padding=(1, 1), stride=(1, 1))),
    (Op.TRANSPOSE, TensorDesc(448, 448, 64), OperatorParams()),
    (Op.ROT90, TensorDesc(448, 448, 64), OperatorParams()),
    (Op.PIXELSHUFFLE, TensorDesc(448, 448, 64), OperatorParams(scale=2)),
    (Op.PIXELUNSHUFFLE, TensorDesc(448, 448, 64), OperatorParams(scale=2)),
    (Op.UPSAMPLE, TensorDesc(448, 448, 64), OperatorParams(scale=2)),
    (Op.ROUTE, TensorDesc(448, 448, 64), OperatorParams()),
    (Op.SPLIT, TensorDesc(448, 448, 64), OperatorParams()),
    (Op.ADD, TensorDesc(448, 448, 64), OperatorParams()),
]


def _seed_from(args) -> int:
    if args.seed is not None:
        return args.seed
    return int(os.environ.get("TMU_SIM_SEED", "0"))


def _dram_from(args) -> DramModel:
    return DramModel(bytes_per_cycle=args.dram_bpc)


def _bench_param(op: Op, p: OperatorParams) -> int:
    if op is Op.BBOXCAL:
        return p.threshold
    if op is Op.IMG2COL:
        return p.kernel[0]
    return p.scale


def _layout_case(op: Op, src: TensorDesc, params: OperatorParams, seed: int):
    """Place src (and src1 if needed) in a fresh memory with random contents;
    returns (mem, src, params-with-src1, dst_base)."""
    rng = np.random.default_rng(seed)
    src1 = None
    cursor = src.byte_extent
    if op in (Op.ROUTE, Op.ADD):
        src1 = TensorDesc(src.height, src.width, src.channels,
                          src.elem_bytes, cursor)
        cursor += src1.byte_extent
    dst_base = -(-cursor // 64) * 64
    run = OperatorParams(params.kernel, params.padding, params.stride,
                         params.scale, params.threshold, src1)
    worst = output_desc(op, src, run, dst_base)
    mem = SimMemory(dst_base + 2 * worst.byte_extent + 64)
    mem.data[0:src.byte_extent] = rng.integers(0, 256, src.byte_extent,
                                               dtype=np.uint8)
    if src1 is not None:
        mem.data[src1.base_addr:src1.end_addr] = rng.integers(
            0, 256, src1.byte_extent, dtype=np.uint8)
    return mem, run, dst_base, worst


# ---------------------------------------------------------------------------
# subcommands


def cmd_asm(args) -> int:
    text = Path(args.input).read_text()
    mode = "paper" if args.paper_literal else "oracle"
    prog = assemble(text, mode)
    blob = encode_program(prog)
    Path(args.output).write_bytes(blob)
    print(f"assembled {len(prog.instructions)} instructions "
          f"({len(blob)} bytes) -> {args.output}")
    return 0


def _load_program(path: str, mode: str):
    data = Path(path).read_bytes()
    if data[:4] == MAGIC:
        return decode_program(data)
    return assemble(data.decode(), mode)


def cmd_run(args) -> int:
    mode = "paper" if args.paper_literal else "oracle"
    prog = _load_program(args.program, mode)
    need = 64
    for ins in prog.instructions:
        for d in (ins.src0, ins.src1, ins.dst):
            if d is not None:
                need = max(need, d.end_addr)
    mem = SimMemory(max(args.mem_bytes or 0, -(-need // 4096) * 4096))
    rng = np.random.default_rng(_seed_from(args))
    if not args.zero_fill:
        for ins in prog.instructions:
            for d in filter(None, (ins.src0, ins.src1)):
                mem.data[d.base_addr:d.end_addr] = rng.integers(
                    0, 256, d.byte_extent, dtype=np.uint8)
    events = []
    hook = (lambda *ev: events.append(ev)) if args.trace_events else None
    eng = Engine(mem, _dram_from(args), args.buffer_bytes, mode, hook)
    reports = eng.run_program(prog)
    print(f"{'#':>3} {'op':<14} {'segs':>5} {'load':>9} {'proc':>9} "
          f"{'store':>9} {'total':>10} {'bytes_in':>10} {'bytes_out':>10}")
    for i, r in enumerate(reports):
        op = prog.instructions[i].opcode.name.lower()
        print(f"{i:>3} {op:<14} {r.segments:>5} {r.load_cycles:>9} "
              f"{r.process_cycles:>9} {r.store_cycles:>9} {r.total_cycles:>10} "
              f"{r.bytes_loaded:>10} {r.bytes_stored:>10}")
    print(f"total: {sum(r.total_cycles for r in reports)} cycles over "
          f"{len(reports)} instructions")
    if args.trace_events:
        with open(args.trace_events, "w") as fh:
            fh.write("cycle,stage,op,addr,len\n")
            for cyc, stage, op, addr, ln in events:
                fh.write(f"{cyc},{stage},{op},{addr},{ln}\n")
        print(f"wrote {len(events)} events -> {args.trace_events}")
    return 0


def _random_shape(rng, op: Op):
    """Random valid source shape with dims <= 64 and channels <= 32."""
    if op is Op.BBOXCAL:
        # h*w*c must be a multiple of the 85-byte record (17*5 = 85)
        h = int(rng.choice([17, 34, 51]))
        return TensorDesc(h, int(rng.integers(1, 13)) * 5, 17)
    s = 2
    if op is Op.PIXELSHUFFLE:
        return TensorDesc(int(rng.integers(2, 65)), int(rng.integers(2, 65)),
                          s * s * int(rng.integers(1, 9)))
    if op in (Op.PIXELUNSHUFFLE, Op.RESIZE):
        return TensorDesc(s * int(rng.integers(2, 33)),
                          s * int(rng.integers(2, 33)),
                          int(rng.integers(1, 9)))
    if op is Op.SPLIT:
        return TensorDesc(int(rng.integers(2, 65)), int(rng.integers(2, 65)),
                          2 * int(rng.integers(1, 17)))
    return TensorDesc(int(rng.integers(2, 65)), int(rng.integers(2, 65)),
                      int(rng.integers(1, 33)))


def check_op(op: Op, shapes: int, seed: int, buffer_bytes: int,
             dram: DramModel) -> tuple[int, int]:
    """Engine-vs-oracle equivalence over random shapes; returns (ok, total)."""
    from .isa import make_instruction

    rng = np.random.default_rng((seed, op.value))
    ok = 0
    for trial in range(shapes):
        src = _random_shape(rng, op)
        params = OperatorParams(scale=2, threshold=100,
                                kernel=(3, 3), padding=(1, 1))
        if op is Op.REARRANGE:
            params = OperatorParams(scale=src.channels + int(rng.integers(0, 4)))
        mem, run, dst_base, worst = _layout_case(op, src, params,
                                                 int(rng.integers(1 << 30)))
        golden_mem = SimMemory(mem.capacity)
        golden_mem.data[:] = mem.data
        gold = golden_execute(op, src, run, golden_mem, dst_base)
        ins = make_instruction(op, src, dst_base,
                               OperatorParams(run.kernel, run.padding,
                                              run.stride, run.scale,
                                              run.threshold),
                               src1=run.second_source)
        eng = Engine(mem, dram, buffer_bytes)
        rep = eng.run_instruction(ins)
        tol = 1 if op is Op.RESIZE else 0
        got = rep.dst
        if (got.height, got.width, got.channels) != (
                gold.height, gold.width, gold.channels):
            continue
        if diff_outputs(gold, golden_mem, got, mem, tol).matches:
            ok += 1
    return ok, shapes


def diff_outputs(gold: TensorDesc, golden_mem: SimMemory,
                 got: TensorDesc, eng_mem: SimMemory, tol: int = 0):
    """Diff two same-shaped tensors living in different memories by copying
    the engine's result alongside the oracle's."""
    merged = SimMemory(golden_mem.capacity + got.byte_extent)
    merged.data[:golden_mem.capacity] = golden_mem.data
    copy = TensorDesc(got.height, got.width, got.channels, got.elem_bytes,
                      golden_mem.capacity)
    merged.data[copy.base_addr:copy.end_addr] = \
        eng_mem.data[got.base_addr:got.end_addr]
    return compare_tensors(gold, copy, merged, tol)


def cmd_check(args) -> int:
    ops = ALL_OPS if args.ops == "all" else \
        [Op.from_name(n) for n in args.ops.split(",")]
    seed = _seed_from(args)
    failures = 0
    for op in ops:
        ok, total = check_op(op, args.shapes, seed, args.buffer_bytes,
                             _dram_from(args))
        status = "PASS" if ok == total else "FAIL"
        print(f"{status} {op.name.lower():<14} {ok}/{total} shapes match oracle")
        failures += total - ok
    return 0 if failures == 0 else 1


def cmd_bench(args) -> int:
    seed = _seed_from(args)
    dram = _dram_from(args)
    rows = []
    for op, src, params in BENCH_CONFIGS:
        from .isa import make_instruction
        mem, run, dst_base, _ = _layout_case(op, src, params, seed)
        ins = make_instruction(op, src, dst_base, params,
                               src1=run.second_source)
        eng = Engine(mem, dram, args.buffer_bytes)
        rep = eng.run_instruction(ins)
        moved = rep.bytes_loaded + rep.bytes_stored
        rows.append({
            "op": op.name.lower(), "height": src.height, "width": src.width,
            "channels": src.channels, "param": _bench_param(op, params),
            "total_cycles": rep.total_cycles, "load_cycles": rep.load_cycles,
            "process_cycles": rep.process_cycles,
            "store_cycles": rep.store_cycles,
            "bytes_loaded": rep.bytes_loaded, "bytes_stored": rep.bytes_stored,
            "segments": rep.segments,
            "cycles_per_kb": round(rep.total_cycles * 1024 / max(moved, 1), 2),
        })
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BENCH_CSV_HEADER)
    writer.writeheader()
    writer.writerows(rows)
    csv_text = buf.getvalue()
    config = {"seed": seed, "dram_bpc": dram.bytes_per_cycle,
              "fixed_latency": dram.fixed_latency,
              "buffer_bytes": args.buffer_bytes}
    digest = hashlib.sha256(
        json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]
    if args.output:
        Path(args.output).write_text(csv_text)
        print(f"wrote {len(rows)} rows -> {args.output} (config {digest})")
    else:
        sys.stdout.write(csv_text)
    if args.json:
        Path(args.json).write_text(json.dumps(
            {"config": config, "config_hash": digest, "rows": rows}, indent=2))
        print(f"wrote JSON report -> {args.json}")
    return 0


def cmd_trace(args) -> int:
    if args.list:
        for name in sorted(builtin_traces()):
            print(name)
        return 0
    if args.model is None:
        print("error: model name or trace JSON path required", file=sys.stderr)
        return 2
    traces = builtin_traces(args.scale)
    if args.model in traces:
        spec = traces[args.model]
    elif Path(args.model).exists():
        spec = TraceSpec.from_json(Path(args.model).read_text())
    else:
        print(f"error: unknown model {args.model!r} "
              f"(choose from {', '.join(sorted(traces))})", file=sys.stderr)
        return 2
    config = SystemConfig(dram=_dram_from(args), buffer_bytes=args.buffer_bytes,
                          strategy=args.strategy, seed=_seed_from(args))
    report = run_model_trace(spec, config, scale=args.scale)
    print(f"model={report.name} strategy={report.strategy} scale={report.scale}")
    print(f"{'step':>4} {'kind':<5} {'label':<14} {'shape':<18} "
          f"{'cycles':>10} {'segs':>5}")
    for i, st in enumerate(report.steps):
        shape = "x".join(str(d) for d in st.shape)
        print(f"{i:>4} {st.kind:<5} {st.label:<14} {shape:<18} "
              f"{st.cycles:>10} {st.segments:>5}")
    print(f"tm_cycles={report.tm_cycles} tpu_cycles={report.tpu_cycles} "
          f"total_cycles={report.total_cycles}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="tmusim",
        description="Functionally-exact, cycle-approximate TMU simulator")
    ap.set_defaults(func=None)
    sub = ap.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="RNG seed (default: $TMU_SIM_SEED or 0)")
        p.add_argument("--dram-bpc", type=int, default=16,
                       help="DRAM bytes per cycle")
        p.add_argument("--buffer-bytes", type=int, default=DEFAULT_BUFFER_BYTES,
                       help="on-chip tensor buffer capacity")

    p = sub.add_parser("asm", help="assemble text into a binary program")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--paper-literal", action="store_true",
                   help="use the published matrices verbatim")
    p.set_defaults(func=cmd_asm)

    p = sub.add_parser("run", help="execute a program (binary or assembly)")
    p.add_argument("program")
    common(p)
    p.add_argument("--mem-bytes", type=int, default=None)
    p.add_argument("--zero-fill", action="store_true",
                   help="leave sources zeroed instead of seeding random data")
    p.add_argument("--trace-events", metavar="FILE",
                   help="write cycle,stage,op,addr,len events as CSV")
    p.add_argument("--paper-literal", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("check", help="engine vs golden oracle equivalence")
    common(p)
    p.add_argument("--ops", default="all",
                   help="comma-separated operator names, or 'all'")
    p.add_argument("--shapes", type=int, default=20,
                   help="random shapes per operator")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("bench", help="cycle reports for reference configs")
    common(p)
    p.add_argument("-o", "--output", metavar="CSV")
    p.add_argument("--json", metavar="FILE")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("trace", help="run a whole-model trace")
    p.add_argument("model", nargs="?",
                   help="built-in model name or trace JSON path")
    common(p)
    p.add_argument("--scale", type=int, default=7,
                   help="spatial shrink factor for simulation")
    p.add_argument("--strategy", choices=STRATEGIES, default="prefetch")
    p.add_argument("--list", action="store_true", help="list built-in models")
    p.set_defaults(func=cmd_trace)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.func is None:
        ap.print_help()
        return 2
    try:
        return args.func(args)
    except TmuError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
