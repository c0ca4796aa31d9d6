"""Binary tensor container and model checkpoint round trips."""

import numpy as np
import pytest

from sgnn.baselines import make_baseline
from sgnn.checkpoint import read_tensors, write_tensors
from sgnn.errors import CheckpointFormatError
from sgnn.graph import ParticleSystem
from sgnn.model import make_sgnn_model
from sgnn.modelio import load_model, save_model


def test_tensor_container_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    named = [
        ("a/w0", rng.normal(size=(3, 4))),
        ("a/b0", rng.normal(size=(1, 4))),
        ("deep/nested/name", rng.normal(size=(7, 2))),
    ]
    path = tmp_path / "params.sgnn"
    write_tensors(path, named)
    back = read_tensors(path)
    assert list(back.keys()) == [n for n, _ in named]
    for name, tensor in named:
        assert np.array_equal(back[name], np.atleast_2d(tensor))


def test_container_magic_and_truncation(tmp_path):
    path = tmp_path / "bad.sgnn"
    path.write_bytes(b"XXXX\x01\x00\x00\x00")
    with pytest.raises(CheckpointFormatError):
        read_tensors(path)
    good = tmp_path / "good.sgnn"
    write_tensors(good, [("t", np.ones((2, 2)))])
    data = good.read_bytes()
    good.write_bytes(data[:-5])
    with pytest.raises(CheckpointFormatError, match="truncated"):
        read_tensors(good)


def _system(rng, n=10):
    return ParticleSystem(
        positions=rng.uniform(-0.05, 0.05, size=(n, 3)),
        velocities=0.01 * rng.normal(size=(n, 3)),
        attrs=rng.normal(size=(n, 2)),
        object_of=np.arange(n) % 2,
    )


def test_sgnn_model_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    model = make_sgnn_model(rng, 2, hidden=8, iterations=1, cutoff=0.1,
                            zero_init_update=False, msg_extra=4)
    model.stage1.aggregate = "mean"
    sys_ = _system(rng)
    want = model.predict(sys_)
    path = tmp_path / "model.sgnn"
    save_model(path, model)
    back = load_model(path)
    np.testing.assert_array_equal(back.predict(sys_), want)
    assert back.variant == "sgnn"
    assert back.stage1.aggregate == "mean"


@pytest.mark.parametrize("variant", ["gns", "egnn", "egnn_s", "gmn", "gmn_s"])
def test_baseline_round_trip(tmp_path, variant):
    rng = np.random.default_rng(2)
    model = make_baseline(variant, rng, 2, hidden=8, iterations=2, cutoff=0.1,
                          zero_init_update=False)
    sys_ = _system(rng)
    want = model.predict(sys_)
    path = tmp_path / f"{variant}.sgnn"
    save_model(path, model)
    back = load_model(path)
    np.testing.assert_array_equal(back.predict(sys_), want)
    assert back.variant == variant
