import numpy as np
import pytest

from cbflow.checkpoint import (Checkpoint, CheckpointError, decode, encode, from_state, metric_of,
                               read, sidecar, write)
from cbflow.diagnostics import Monitor
from cbflow.flow import initial_state
from cbflow.mesh import Grid
from cbflow.oracle import off_diagonal


@pytest.fixture
def ck(rng):
    grid = Grid((4, 3, 2, 1), (1.0, 2.0, 0.5, 1.0))
    m = off_diagonal(4, 0.3, grid.periods).sample_to_grid(grid)
    return Checkpoint(grid, -0.25, "modified_cbf", 0.123456789, 17, m.g, rng.standard_normal(grid.shape))


def test_encode_decode_is_bit_exact(ck):
    back = decode(encode(ck))
    assert back.grid.sizes == ck.grid.sizes and back.grid.periods == ck.grid.periods
    assert (back.s0, back.variant, back.t, back.step) == (ck.s0, ck.variant, ck.t, ck.step)
    assert np.array_equal(back.g, ck.g) and np.array_equal(back.p, ck.p)
    assert encode(back) == encode(ck)


@pytest.mark.parametrize("pos", [0, 20, -3, -40])
def test_any_flipped_byte_is_detected(ck, pos):
    data = bytearray(encode(ck))
    data[pos] ^= 0x10
    with pytest.raises(CheckpointError):
        decode(bytes(data))


def test_truncation_is_detected(ck):
    with pytest.raises(CheckpointError):
        decode(encode(ck)[:-100])
    with pytest.raises(CheckpointError):
        decode(b"short")


def test_long_variant_tag_rejected(ck):
    ck.variant = "x" * 17
    with pytest.raises(CheckpointError):
        encode(ck)


def test_file_round_trip_with_sidecar(tmp_path):
    grid = Grid((6, 6, 1, 1))
    m = off_diagonal(4, 0.2).sample_to_grid(grid)
    st, ev = initial_state(m, 0.0)
    mon = Monitor(m_max=1)
    mon.record(st, ev, 0.0)
    path = tmp_path / "state.chk"
    write(path, from_state(st), sidecar(st, mon))
    back, extra = read(path)
    assert np.array_equal(metric_of(back).g, st.metric.g)
    assert np.array_equal(back.p, st.p)
    again = Monitor.from_state_dict(extra["monitor"])
    assert again.K == mon.K and again.started
    assert extra["solve"]["iterations"] == st.solve.iterations
    assert not (tmp_path / "state.chk.tmp").exists()


def test_missing_sidecar_reads_none(tmp_path, ck):
    path = tmp_path / "bare.chk"
    write(path, ck)
    assert read(path)[1] is None
