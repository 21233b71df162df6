import numpy as np
import pytest

from tmusim.tensor_model import (
    Op, OperatorParams, SimMemory, TensorDesc, golden_execute, output_desc,
)


def fill_random(mem: SimMemory, desc: TensorDesc, rng) -> None:
    mem.data[desc.base_addr:desc.end_addr] = rng.integers(
        0, 256, desc.byte_extent, dtype=np.uint8)


def place_case(op: Op, src_shape, params: OperatorParams, seed: int):
    """Source tensor(s) with random contents plus a clear destination base.

    Returns (mem, src, run_params, dst_base).
    """
    rng = np.random.default_rng(seed)
    src = TensorDesc(*src_shape)
    cursor = src.byte_extent
    src1 = None
    if op in (Op.ROUTE, Op.ADD):
        c1 = src.channels if op is Op.ADD else max(1, src.channels // 2)
        src1 = TensorDesc(src.height, src.width, c1, src.elem_bytes, cursor)
        cursor += src1.byte_extent
    dst_base = -(-cursor // 64) * 64
    run = OperatorParams(params.kernel, params.padding, params.stride,
                         params.scale, params.threshold, src1)
    worst = output_desc(op, src, run, dst_base)
    mem = SimMemory(dst_base + 2 * worst.byte_extent + 256)
    fill_random(mem, src, rng)
    if src1 is not None:
        fill_random(mem, src1, rng)
    return mem, src, run, dst_base


def clone_memory(mem: SimMemory) -> SimMemory:
    other = SimMemory(mem.capacity)
    other.data[:] = mem.data
    return other


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
