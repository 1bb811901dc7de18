import struct

import numpy as np
import pytest

from awe.checkpoint import Checkpoint, CheckpointError
from awe.corpus import FeatureTable
from awe.encoders import ModelConfig, MultiViewModel
from awe.tensor import AdamState

TABLE = FeatureTable.from_rows([("a", [("x", "1"), ("y", "1")]), ("b", [("x", "2"), ("y", "1")]),
                                ("c", [("x", "1"), ("y", "2")])])


def ckpt(front_end="phone", optimizer=True):
    cfg = ModelConfig(input_dim=2, hidden_size=3, acoustic_layers=2, symbol_dim=4, front_end=front_end)
    symbols = list("abc")
    model = MultiViewModel(cfg, symbols, np.random.default_rng(0), TABLE)
    states = None
    if optimizer:
        rng = np.random.default_rng(1)
        states = [AdamState(rng.normal(size=p.shape).astype(np.float32),
                            rng.random(size=p.shape).astype(np.float32), 7) for p in model.parameters()]
    return Checkpoint.from_model(model, states, {"epoch": 3, "lr": 5e-5, "best_dev_ap": 0.25})


@pytest.mark.parametrize("front_end", ["char", "phone", "feature"])
def test_round_trip_bit_exact(front_end, tmp_path):
    c = ckpt(front_end)
    c.save(tmp_path / "a.ckpt")
    back = Checkpoint.load(tmp_path / "a.ckpt")
    for k, v in c.tensors.items():
        assert back.tensors[k].tobytes() == v.tobytes() and back.tensors[k].dtype == v.dtype
    back.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    model = back.build_model()
    assert Checkpoint.from_model(model, back.optimizer_states(model), back.state).to_bytes() == c.to_bytes()


def test_header_layout():
    data = ckpt().to_bytes()
    assert data[:4] == b"AWEF"
    version, hlen = struct.unpack("<IQ", data[4:16])
    assert version == 1 and data[16:16 + hlen].decode("utf-8").startswith("{")


def test_bad_magic():
    data = bytearray(ckpt().to_bytes())
    data[:4] = b"NOPE"
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(bytes(data))


def test_bad_version():
    data = bytearray(ckpt().to_bytes())
    data[4:8] = struct.pack("<I", 99)
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_bytes(bytes(data))


def test_truncated_file():
    data = ckpt().to_bytes()
    with pytest.raises(CheckpointError, match="bounds"):
        Checkpoint.from_bytes(data[:-5])
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(data[:10])


def test_shape_mismatch():
    data = ckpt().to_bytes()
    hlen = struct.unpack("<Q", data[8:16])[0]
    header = data[16:16 + hlen].replace(b'"shape":[3,2]', b'"shape":[3,5]', 1)
    assert len(header) == hlen
    with pytest.raises(CheckpointError, match="shape"):
        Checkpoint.from_bytes(data[:16] + header + data[16 + hlen:])


def test_architecture_mismatch():
    c = ckpt()
    c.tensors.pop(next(iter(c.tensors)))
    with pytest.raises(CheckpointError):
        c.build_model()


def test_feature_maps_survive():
    c = Checkpoint.from_bytes(ckpt("feature").to_bytes())
    model = c.build_model()
    assert model.front_end.feature_values == ["x=1", "y=1", "x=2", "y=2"]
    np.testing.assert_array_equal(model.front_end.feature_map, [[1, 1, 0, 0], [0, 1, 1, 0], [1, 0, 0, 1]])
