"""Scheduler strategies, forwarding gates, TPU stub, and model traces."""

import json

import numpy as np
import pytest

from tmusim.errors import SchedulerError
from tmusim.system import (
    STRATEGIES, ModelRunReport, SystemConfig, TpuStub, TraceSpec,
    builtin_traces, forwarding_gates, pipeline_latency, run_model_trace,
    scaled_dim, schedule,
)
from tmusim.tensor_model import Op


class TestSchedule:
    def test_serial_is_gated_sum(self):
        res = schedule([(2, 3, 4), (5, 6, 7)], "serial")
        assert res.total_cycles == 9 + 18
        res = schedule([(2, 3, 4), (5, 6, 7)], "serial", gates=[0, 100])
        assert res.total_cycles == 100 + 18

    def test_prefetch_balanced_closed_form(self):
        # [DERIVED] S equal segments of cost c per stage: (S + 2) * c
        for s, c in ((10, 100), (4, 7), (1, 13)):
            assert pipeline_latency([(c, c, c)] * s) == (s + 2) * c

    def test_prefetch_never_worse_than_serial(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            costs = [tuple(int(v) for v in rng.integers(1, 50, 3))
                     for _ in range(int(rng.integers(1, 12)))]
            gates = [int(g) for g in
                     np.sort(rng.integers(0, 200, len(costs)))]
            pre = schedule(costs, "prefetch", gates).total_cycles
            ser = schedule(costs, "serial", gates).total_cycles
            assert pre <= ser

    def test_prefetch_bounded_below_by_stage_sums(self):
        costs = [(3, 1, 2), (4, 1, 1), (2, 2, 2)]
        res = schedule(costs, "prefetch")
        assert res.total_cycles >= max(sum(c[i] for c in costs) for i in range(3))

    def test_double_buffer_hazard(self):
        # load i waits for process i-2 to free the ping-pong buffer:
        # with huge process cost, loads cannot run arbitrarily far ahead
        costs = [(1, 100, 1)] * 4
        res = schedule(costs, "prefetch")
        assert res.load_done[3] > res.process_done[1]

    def test_monotone_stage_completions(self):
        costs = [(5, 3, 2), (1, 9, 4), (2, 2, 2), (8, 1, 1)]
        for strategy in STRATEGIES[:2]:
            res = schedule(costs, strategy)
            for series in (res.load_done, res.process_done, res.store_done):
                assert series == sorted(series)

    def test_empty_and_errors(self):
        assert schedule([], "serial").total_cycles == 0
        with pytest.raises(SchedulerError):
            schedule([(1, 1, 1)], "warp")
        with pytest.raises(SchedulerError):
            schedule([(1, 1, 1)], "serial", gates=[1, 2])
        with pytest.raises(SchedulerError):
            schedule([(1, 1, 1)], "serial", gates=[-5])


class TestForwardingGates:
    def test_tile_granular_availability(self):
        costs = [(10, 10, 10)] * 4
        gates = forwarding_gates(costs, producer_start=0,
                                 producer_cycles_per_byte=1.0,
                                 seg_bytes=[100] * 4, tile_bytes=100)
        assert gates == [100, 200, 300, 400]

    def test_coarse_tiles_round_up(self):
        gates = forwarding_gates([(1, 1, 1)] * 2, 0, 1.0,
                                 seg_bytes=[60, 60], tile_bytes=100)
        # 60 bytes needs tile 1; 120 bytes needs tile 2
        assert gates == [100, 200]

    def test_deadlock_detected(self):
        with pytest.raises(SchedulerError):
            forwarding_gates([(1, 1, 1)], 0, 1.0, seg_bytes=[300],
                             tile_bytes=100, producer_total_bytes=100)
        with pytest.raises(SchedulerError):
            forwarding_gates([(1, 1, 1)], 0, 1.0, seg_bytes=[10], tile_bytes=0)

    def test_forwarding_overlap_window(self):
        # producer emits 10 tiles; consumer has 10 matching segments.
        # waiting for the whole tensor costs producer_total + pipeline;
        # forwarding leaves only the last tile's worth exposed.
        s, c, cpt = 10, 30, 100
        costs = [(c, c, c)] * s
        done = s * cpt
        blocking = done + schedule(costs, "prefetch").total_cycles
        gates = forwarding_gates(costs, 0, cpt / 100.0, [100] * s, 100)
        overlapped = schedule(costs, "prefetch", gates).total_cycles
        assert overlapped < blocking
        # [DERIVED] with cpt >= stage cost, reduction = (S+2)c - 3c = (S-1)c
        assert abs((blocking - overlapped) - (s - 1) * c) <= 0.05 * blocking


class TestTpuStub:
    def test_deterministic_fill(self):
        from tmusim.tensor_model import SimMemory, TensorDesc
        out = TensorDesc(2, 2, 4, 1, 0)
        stubs = [TpuStub(seed=5), TpuStub(seed=5), TpuStub(seed=6)]
        images = []
        for stub in stubs:
            mem = SimMemory(64)
            stub.run(out, mem, step_index=3)
            images.append(mem.data.copy())
        assert np.array_equal(images[0], images[1])
        assert not np.array_equal(images[0], images[2])

    def test_latency_proportional_to_bytes(self):
        stub = TpuStub(cycles_per_word=8)
        assert stub.latency(16) == 8
        assert stub.latency(17) == 16


class TestScaling:
    def test_scaled_dim_rounds_to_16(self):
        assert scaled_dim(448, 7) == 64
        assert scaled_dim(640, 7) == 96
        assert scaled_dim(768, 7) == 112
        assert scaled_dim(64, 7) == 16
        assert scaled_dim(448, 1) == 448


class TestTraces:
    def test_builtin_traces_present(self):
        names = set(builtin_traces())
        assert names == {"espcn", "edsr", "yolov3", "yolov3_tiny", "yolov8",
                         "attention"}

    def test_trace_json_roundtrip(self):
        raw = {
            "name": "custom", "input_shape": [8, 8, 3],
            "steps": [
                {"kind": "tm", "op": "rearrange", "params": {"scale": 4}},
                {"kind": "tpu", "out_shape": [8, 8, 16], "src": 0},
                {"kind": "tm", "op": "pixelshuffle",
                 "params": {"scale": 2}, "src": 1},
            ],
        }
        spec = TraceSpec.from_json(json.dumps(raw))
        assert spec.steps[2].op is Op.PIXELSHUFFLE
        rep = run_model_trace(spec, SystemConfig(strategy="prefetch"))
        assert rep.total_cycles > 0
        assert rep.steps[2].shape == (16, 16, 4)

    @pytest.mark.parametrize("name", sorted(builtin_traces()))
    def test_strategy_ordering(self, name):
        spec = builtin_traces(7)[name]
        totals = {s: run_model_trace(spec, SystemConfig(strategy=s), 7).total_cycles
                  for s in STRATEGIES}
        assert totals["forwarding"] <= totals["prefetch"] <= totals["serial"]

    def test_trace_reports_tm_and_tpu_split(self):
        spec = builtin_traces(7)["espcn"]
        rep = run_model_trace(spec, SystemConfig(), 7)
        kinds = [s.kind for s in rep.steps]
        assert kinds == ["tm", "tpu", "tm"]
        assert rep.tm_cycles == sum(s.cycles for s in rep.steps if s.kind == "tm")
        assert rep.tpu_cycles == sum(s.cycles for s in rep.steps if s.kind == "tpu")

    def test_same_seed_same_memory(self):
        spec = builtin_traces(7)["edsr"]
        a = run_model_trace(spec, SystemConfig(seed=9), 7)
        b = run_model_trace(spec, SystemConfig(seed=9), 7)
        c = run_model_trace(spec, SystemConfig(seed=10), 7)
        assert np.array_equal(a.memory.data, b.memory.data)
        assert not np.array_equal(a.memory.data, c.memory.data)

    def test_unknown_strategy_rejected(self):
        with pytest.raises(SchedulerError):
            SystemConfig(strategy="psychic")
