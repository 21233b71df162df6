"""tmusim: functionally-exact, cycle-approximate simulator of a tensor
manipulation unit sitting between DRAM and a conv/matmul accelerator.

Layers (each importable on its own):

* ``tensor_model``  — tensors in simulated memory plus the golden operator oracle
* ``affine``        — the unified affine address abstraction (A, B matrices)
* ``isa``           — assembly syntax, binary encoding, decoder
* ``rme``           — reconfigurable masking engine (byte-level schemes)
* ``engine``        — the eight-stage execution FSM with cycle accounting
* ``system``        — scheduler strategies and whole-model traces
* ``cli``           — the ``tmusim`` command-line harness
"""

from .tensor_model import (
    Op, TensorDesc, SimMemory, OperatorParams, golden_execute,
    compare_tensors, output_desc,
)
from .affine import AffineMap, build_affine_map, map_index, output_address
from .isa import Program, TmInstruction, assemble, decode_program, encode_program
from .rme import MaskConfig, assemble_stream, evaluate_stream
from .engine import CycleReport, DramModel, Engine, Stage
from .system import SystemConfig, builtin_traces, run_model_trace, schedule

__version__ = "1.0.0"

__all__ = [
    "Op", "TensorDesc", "SimMemory", "OperatorParams", "golden_execute",
    "compare_tensors", "output_desc", "AffineMap", "build_affine_map",
    "map_index", "output_address", "Program", "TmInstruction", "assemble",
    "decode_program", "encode_program", "MaskConfig", "assemble_stream",
    "evaluate_stream", "CycleReport", "DramModel", "Engine", "Stage",
    "SystemConfig", "builtin_traces", "run_model_trace", "schedule",
    "__version__",
]
