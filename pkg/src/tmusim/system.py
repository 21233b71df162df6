"""System-level composition: a TMU in front of a TPU-like accelerator.

Provides three scheduling strategies over per-segment cost triples:

* ``serial``      — each segment runs load, process, store back to back, and
                    segment i may not start before its input gate.
* ``prefetch``    — double-buffered tensor/commit buffers: the load of
                    segment i overlaps the store of segment i-1, with the
                    classic two-deep structural hazard on the tensor buffer.
* ``forwarding``  — prefetch plus producer-side gating at tile granularity:
                    segment i becomes loadable once the producer has emitted
                    its last byte, so TM work hides under producer compute.

Also hosts the model traces (ESPCN, EDSR, YOLOv3, YOLOv3-tiny, YOLOv8,
multi-head attention) with non-TM layers reduced to a deterministic
latency/data stub.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ParamError, SchedulerError
from .engine import DEFAULT_BUFFER_BYTES, CycleReport, DramModel, Engine
from .isa import make_instruction
from .tensor_model import Op, OperatorParams, SimMemory, TensorDesc

STRATEGIES = ("serial", "prefetch", "forwarding")


@dataclass
class SystemConfig:
    dram: DramModel = field(default_factory=DramModel)
    buffer_bytes: int = DEFAULT_BUFFER_BYTES
    strategy: str = "prefetch"
    mode: str = "oracle"
    tpu_cycles_per_word: int = 8   # TPU stub: cycles per produced bus word
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise SchedulerError(f"unknown strategy {self.strategy!r}")


@dataclass
class TpuStub:
    """Placeholder for conv/matmul layers: deterministic output bytes plus a
    bandwidth-proportional latency."""

    cycles_per_word: int = 8
    seed: int = 0

    def run(self, out: TensorDesc, mem: SimMemory, step_index: int) -> int:
        rng = np.random.default_rng((self.seed, step_index))
        mem.data[out.base_addr:out.end_addr] = rng.integers(
            0, 256, out.byte_extent, dtype=np.uint8)
        return self.latency(out.byte_extent)

    def latency(self, nbytes: int) -> int:
        return -(-nbytes // 16) * self.cycles_per_word


@dataclass
class ScheduleResult:
    total_cycles: int
    load_done: list[int]
    process_done: list[int]
    store_done: list[int]

    @property
    def segments(self) -> int:
        return len(self.store_done)


def pipeline_latency(costs: list[tuple[int, int, int]]) -> int:
    """Closed form for the balanced prefetch pipeline: with S equal segments
    of per-stage cost c this is (S + 2) * c."""
    return schedule(costs, "prefetch").total_cycles


def schedule(costs: list[tuple[int, int, int]], strategy: str,
             gates: Optional[list[int]] = None) -> ScheduleResult:
    """Timeline for a sequence of (load, process, store) segment costs.

    ``gates[i]`` is the earliest cycle segment i's input exists in memory
    (producer forwarding); omitted means available at cycle 0.
    """
    if strategy not in STRATEGIES:
        raise SchedulerError(f"unknown strategy {strategy!r}")
    n = len(costs)
    if gates is None:
        gates = [0] * n
    if len(gates) != n:
        raise SchedulerError("one gate per segment required")
    if any(g is None or g < 0 or not math.isfinite(g) for g in gates):
        raise SchedulerError("producer never supplies a gated segment (deadlock)")
    eL, eP, eSt = [0] * n, [0] * n, [0] * n
    for i, (l, p, st) in enumerate(costs):
        if strategy == "serial":
            prev = eSt[i - 1] if i else 0
            eL[i] = max(gates[i], prev) + l
            eP[i] = eL[i] + p
            eSt[i] = eP[i] + st
        else:
            # load i needs the buffer freed by process i-2 (double buffering)
            eL[i] = max(gates[i],
                        eL[i - 1] if i else 0,
                        eP[i - 2] if i >= 2 else 0) + l
            eP[i] = max(eL[i], eP[i - 1] if i else 0) + p
            eSt[i] = max(eP[i], eSt[i - 1] if i else 0) + st
    return ScheduleResult(eSt[-1] if n else 0, eL, eP, eSt)


def forwarding_gates(costs: list[tuple[int, int, int]],
                     producer_start: int, producer_cycles_per_byte: float,
                     seg_bytes: list[int], tile_bytes: int,
                     producer_total_bytes: Optional[int] = None) -> list[int]:
    """Producer-side availability times under tile-granular forwarding.

    Segment i is loadable once the producer has committed the tiles covering
    its first prefix of sum(seg_bytes[:i+1]) bytes.
    """
    if tile_bytes <= 0:
        raise SchedulerError("tile size must be positive")
    total = producer_total_bytes if producer_total_bytes is not None \
        else sum(seg_bytes)
    gates = []
    consumed = 0
    for nbytes in seg_bytes:
        consumed += nbytes
        tiles = -(-consumed // tile_bytes)
        if tiles * tile_bytes > -(-total // tile_bytes) * tile_bytes:
            raise SchedulerError(
                "consumer needs more bytes than the producer emits (deadlock)")
        gates.append(producer_start +
                     math.ceil(tiles * tile_bytes * producer_cycles_per_byte))
    return gates


# ---------------------------------------------------------------------------
# model traces


@dataclass
class TraceStep:
    kind: str                  # "tpu" or "tm"
    op: Optional[Op] = None
    params: OperatorParams = field(default_factory=OperatorParams)
    out_shape: Optional[tuple[int, int, int]] = None  # tpu steps
    src: int = -1              # index of the producing step (-1 = trace input)
    src1: int = -2             # second source step for Route/Add


@dataclass
class TraceSpec:
    name: str
    input_shape: tuple[int, int, int]
    steps: list[TraceStep]

    @classmethod
    def from_json(cls, text: str) -> "TraceSpec":
        raw = json.loads(text)
        steps = []
        for s in raw["steps"]:
            kind = s["kind"]
            if kind == "tpu":
                steps.append(TraceStep("tpu", out_shape=tuple(s["out_shape"]),
                                       src=s.get("src", -1)))
            elif kind == "tm":
                p = s.get("params", {})
                params = OperatorParams(
                    kernel=tuple(p.get("kernel", (1, 1))),
                    padding=tuple(p.get("padding", (0, 0))),
                    stride=tuple(p.get("stride", (1, 1))),
                    scale=p.get("scale", 1),
                    threshold=p.get("threshold", 0))
                steps.append(TraceStep("tm", Op[s["op"].upper()], params,
                                       src=s.get("src", -1),
                                       src1=s.get("src1", -2)))
            else:
                raise ParamError(f"unknown trace step kind {kind!r}")
        return cls(raw["name"], tuple(raw["input_shape"]), steps)


@dataclass
class StepResult:
    kind: str
    label: str
    shape: tuple[int, int, int]
    cycles: int
    bytes_loaded: int = 0
    bytes_stored: int = 0
    segments: int = 0
    report: Optional[CycleReport] = None


@dataclass
class ModelRunReport:
    name: str
    strategy: str
    scale: int
    steps: list[StepResult]
    tm_cycles: int
    tpu_cycles: int
    total_cycles: int
    memory: Optional[SimMemory] = None  # final memory image (strategy-invariant)


def scaled_dim(dim: int, scale: int) -> int:
    """Shrink a trace dimension by `scale`, rounded up to a multiple of 16."""
    if scale <= 1:
        return dim
    return max(16, -(-(-(-dim // scale)) // 16) * 16)


def _scaled(shape, scale, keep_channels=False):
    h, w, c = shape
    cs = c if keep_channels or c <= 16 else scaled_dim(c, scale)
    return (scaled_dim(h, scale), scaled_dim(w, scale), cs)


def builtin_traces(scale: int = 1) -> dict[str, TraceSpec]:
    """The six model traces, spatially scaled for simulation."""
    s = scale
    T = TraceStep
    P = OperatorParams

    def dims(h, w, c, keep=False):
        return _scaled((h, w, c), s, keep)

    hd, wd, _ = dims(448, 448, 3)
    hy, wy, _ = dims(640, 640, 3)
    c64 = max(16, scaled_dim(64, s)) if s > 1 else 64
    traces = {}

    traces["espcn"] = TraceSpec("espcn", (hd, wd, 3), [
        T("tm", Op.REARRANGE, P(scale=4)),
        T("tpu", out_shape=(hd, wd, 16), src=0),
        T("tm", Op.PIXELSHUFFLE, P(scale=2), src=1),
    ])

    traces["edsr"] = TraceSpec("edsr", (hd, wd, 3), [
        T("tm", Op.REARRANGE, P(scale=4)),
        T("tpu", out_shape=(hd, wd, 16), src=0),
        T("tpu", out_shape=(hd, wd, 16), src=1),
        T("tm", Op.ADD, src=2, src1=1),           # residual connection
        T("tpu", out_shape=(hd, wd, 16), src=3),
        T("tm", Op.PIXELSHUFFLE, P(scale=2), src=4),
    ])

    traces["yolov3"] = TraceSpec("yolov3", (hy, wy, 3), [
        T("tm", Op.REARRANGE, P(scale=4)),
        T("tpu", out_shape=(hy // 2, wy // 2, c64), src=0),
        T("tpu", out_shape=(hy // 2, wy // 2, c64), src=1),
        T("tm", Op.ADD, src=2, src1=1),           # residual
        T("tpu", out_shape=(hy // 4, wy // 4, c64), src=3),
        T("tm", Op.UPSAMPLE, P(scale=2), src=4),
        T("tm", Op.ROUTE, src=5, src1=3),         # concat with earlier scale
        T("tpu", out_shape=(hy // 2, wy // 2, 255), src=6),
        T("tm", Op.BBOXCAL, P(threshold=128), src=7),
    ])

    traces["yolov3_tiny"] = TraceSpec("yolov3_tiny", (hy, wy, 3), [
        T("tm", Op.REARRANGE, P(scale=4)),
        T("tpu", out_shape=(hy // 4, wy // 4, c64), src=0),
        T("tpu", out_shape=(hy // 8, wy // 8, c64), src=1),
        T("tm", Op.UPSAMPLE, P(scale=2), src=2),
        T("tm", Op.ROUTE, src=3, src1=1),
        T("tpu", out_shape=(hy // 4, wy // 4, 255), src=4),
        T("tm", Op.BBOXCAL, P(threshold=128), src=5),
    ])

    traces["yolov8"] = TraceSpec("yolov8", (hy, wy, 3), [
        T("tm", Op.REARRANGE, P(scale=4)),
        T("tpu", out_shape=(hy // 4, wy // 4, c64), src=0),
        T("tm", Op.SPLIT, src=1),                 # C2f split
        T("tpu", out_shape=(hy // 2, wy // 4, c64 // 2), src=2),
        T("tm", Op.ROUTE, src=3, src1=2),
        T("tpu", out_shape=(hy // 8, wy // 8, c64), src=4),
        T("tm", Op.UPSAMPLE, P(scale=2), src=5),
        T("tm", Op.ADD, src=6, src1=1),           # skip connection
        T("tpu", out_shape=(hy // 4, wy // 4, 255), src=7),
        T("tm", Op.BBOXCAL, P(threshold=128), src=8),
    ])

    la, da = scaled_dim(64, s), scaled_dim(768, s)
    traces["attention"] = TraceSpec("attention", (la, da, 1), [
        T("tpu", out_shape=(la, da, 1), src=-1),     # K projection
        T("tm", Op.TRANSPOSE, src=0),                # K transpose
        T("tpu", out_shape=(la, la, 1), src=1),      # scores, head 0
        T("tpu", out_shape=(la, la, 1), src=2),      # scores, head 1
        T("tm", Op.ROUTE, src=2, src1=3),            # head concat
    ])
    return traces


def run_model_trace(spec: TraceSpec, config: Optional[SystemConfig] = None,
                    scale: int = 1, mem_bytes: Optional[int] = None,
                    trace_hook=None) -> ModelRunReport:
    """Execute a trace end to end: TPU stubs fill real bytes, TM steps run on
    the engine, and the chosen strategy composes the timeline."""
    config = config or SystemConfig()
    tensors: list[TensorDesc] = []
    step_done: list[int] = []   # completion cycle of each step (serial order)

    extents = [_extent_of(spec, i) for i in range(len(spec.steps))]
    need = spec.input_shape[0] * spec.input_shape[1] * spec.input_shape[2]
    total = need + sum(extents) + 64 * len(spec.steps)
    mem = SimMemory(mem_bytes or _round_up(total, 4096))
    eng = Engine(mem, config.dram, config.buffer_bytes, config.mode, trace_hook)
    stub = TpuStub(config.tpu_cycles_per_word, config.seed)

    rng = np.random.default_rng(config.seed)
    inp = TensorDesc(*spec.input_shape, 1, 0)
    mem.data[0:inp.byte_extent] = rng.integers(0, 256, inp.byte_extent,
                                               dtype=np.uint8)
    cursor = _round_up(inp.byte_extent, 64)

    def producer(idx: int) -> TensorDesc:
        return inp if idx < 0 else tensors[idx]

    def done_at(idx: int) -> int:
        return 0 if idx < 0 else step_done[idx]

    results: list[StepResult] = []
    tm_cycles = tpu_cycles = 0
    tmu_free = tpu_free = 0   # when each execution resource becomes idle

    for i, st in enumerate(spec.steps):
        if st.kind == "tpu":
            out = TensorDesc(*st.out_shape, 1, cursor)
            cursor = _round_up(out.end_addr, 64)
            mem.check_tensor(out)
            lat = stub.run(out, mem, i)
            if config.strategy == "serial":
                start = max(tpu_free, tmu_free, done_at(st.src))
                tmu_free = start + lat
            else:
                start = max(tpu_free, done_at(st.src))
            tpu_free = start + lat
            tpu_cycles += lat
            tensors.append(out)
            step_done.append(start + lat)
            results.append(StepResult("tpu", "conv_stub", st.out_shape, lat))
            continue

        src = producer(st.src)
        src1 = producer(st.src1) if st.op in (Op.ROUTE, Op.ADD) else None
        params = OperatorParams(
            kernel=st.params.kernel, padding=st.params.padding,
            stride=st.params.stride, scale=st.params.scale,
            threshold=st.params.threshold)
        ins = make_instruction(st.op, src, cursor, params,
                               src1=src1, mode=config.mode)
        cursor = _round_up(ins.dst.end_addr, 64)
        rep = eng.run_instruction(ins)
        dep = max(done_at(st.src),
                  done_at(st.src1) if src1 is not None else 0)
        if config.strategy == "serial":
            cost = rep.total_cycles   # segments strictly back to back
            fin = max(tmu_free, tpu_free, dep) + cost
            tpu_free = fin
        else:
            # double buffering pipelines the instruction's own segments
            cost = schedule(rep.segment_costs, "prefetch").total_cycles
            if config.strategy == "prefetch":
                fin = max(tmu_free, dep) + cost
            else:  # forwarding: loads trickle in as the producer emits tiles,
                # so past the producer's finish only the last segment's
                # process and store remain exposed
                _, tail_p, tail_s = rep.segment_costs[-1] if rep.segment_costs \
                    else (0, cost, 0)
                fin = max(tmu_free + cost, dep + tail_p + tail_s)
        tmu_free = fin
        tm_cycles += cost
        tensors.append(rep.dst)
        step_done.append(fin)
        results.append(StepResult("tm", st.op.name.lower(),
                                  (rep.dst.height, rep.dst.width, rep.dst.channels),
                                  cost, rep.bytes_loaded,
                                  rep.bytes_stored, rep.segments, rep))

    total_cycles = max(step_done) if step_done else 0
    return ModelRunReport(spec.name, config.strategy, scale, results,
                          tm_cycles, tpu_cycles, total_cycles, memory=mem)


def _extent_of(spec: TraceSpec, i: int) -> int:
    st = spec.steps[i]
    if st.kind == "tpu":
        h, w, c = st.out_shape
        return h * w * c
    # TM outputs never exceed scale^2 x the largest upstream tensor; budget
    # generously from the trace input and stub shapes
    h, w, c = spec.input_shape
    biggest = h * w * c
    for s in spec.steps:
        if s.kind == "tpu":
            biggest = max(biggest, s.out_shape[0] * s.out_shape[1] * s.out_shape[2])
    factor = max(4, st.params.scale * st.params.scale * 2)
    return biggest * factor


def _round_up(n: int, align: int) -> int:
    return -(-n // align) * align


__all__ = [
    "SystemConfig", "TpuStub", "ScheduleResult", "schedule", "pipeline_latency",
    "forwarding_gates", "TraceStep", "TraceSpec", "StepResult",
    "ModelRunReport", "builtin_traces", "run_model_trace", "scaled_dim",
    "STRATEGIES",
]
