import numpy as np
import pytest

from conftest import small_params
from curelab import checkpoint
from curelab.checkpoint import Checkpoint, CheckpointError, expected_shapes


def make(seed=0):
    p = small_params(seed)
    return Checkpoint(p, p.scale(0.1), p.map(np.abs), 7, 12, 2, 340, "cure-s1", seed, {"seed": seed})


def test_round_trip(tmp_path):
    ck = make()
    digest = checkpoint.save(tmp_path / "a.npz", ck)
    back = checkpoint.load(tmp_path / "a.npz", expected_shapes(12, 8, 6, 16))
    assert back.params.equals(ck.params) and back.adam_m.equals(ck.adam_m) and back.adam_v.equals(ck.adam_v)
    assert (back.step, back.stage_step, back.task_index, back.adam_t, back.mode) == (12, 2, 340, 7, "cure-s1")
    assert back.state_digest() == digest


def test_bytes_are_deterministic(tmp_path):
    checkpoint.save(tmp_path / "a.npz", make())
    checkpoint.save(tmp_path / "b.npz", make())
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()


def test_plain_numpy_can_read_it(tmp_path):
    checkpoint.save(tmp_path / "a.npz", make())
    with np.load(tmp_path / "a.npz") as z:
        assert {"E", "W1", "b1", "W2", "b2", "meta"} <= set(z.files)


def test_shape_mismatch_is_loud(tmp_path):
    checkpoint.save(tmp_path / "a.npz", make())
    with pytest.raises(CheckpointError, match="W1"):
        checkpoint.load(tmp_path / "a.npz", expected_shapes(12, 8, 7, 16))


def test_garbage_file_is_loud(tmp_path):
    (tmp_path / "x.npz").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "x.npz")
