import json
import struct

import numpy as np
import pytest

from checkpoint import (
    MAGIC, VERSION, Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint, model_checkpoint,
    model_from_checkpoint, prototype_checkpoint, prototypes_from_checkpoint, save_checkpoint,
)
from ckd import PrototypeSet
from model import forward
from utils import CheckpointFormatError, DatasetError


def _golden_bytes():
    meta = b'{"kind":"raw","round":3}'
    values = [1.5, -2.0, 0.25, 8.0, 0.0, -0.125]
    return b"".join([
        b"DDBCKPT\x00",
        struct.pack("<I", 1),
        struct.pack("<I", len(meta)), meta,
        struct.pack("<I", 2),
        struct.pack("<I", 1), b"w",
        struct.pack("<I", 2), struct.pack("<QQ", 2, 3),
        struct.pack("<6d", *values),
        struct.pack("<I", 1), b"s",
        struct.pack("<I", 0),
        struct.pack("<d", 4.0),
    ])


class TestContainer:
    def test_golden_fixture(self):
        ckpt = decode_checkpoint(_golden_bytes())
        assert ckpt.metadata == {"kind": "raw", "round": 3}
        assert ckpt.round_index == 3
        assert list(ckpt.tensors) == ["w", "s"]
        assert ckpt.tensors["w"].tolist() == [[1.5, -2.0, 0.25], [8.0, 0.0, -0.125]]
        assert ckpt.tensors["s"].shape == ()
        assert float(ckpt.tensors["s"]) == 4.0
        assert encode_checkpoint(ckpt) == _golden_bytes()

    def test_header(self):
        payload = encode_checkpoint(Checkpoint({}, {}))
        assert payload[:8] == MAGIC
        assert struct.unpack("<I", payload[8:12])[0] == VERSION

    def test_every_truncation_is_rejected(self):
        payload = _golden_bytes()
        for cut in range(len(payload)):
            with pytest.raises(CheckpointFormatError):
                decode_checkpoint(payload[:cut])

    def test_bad_magic(self):
        with pytest.raises(CheckpointFormatError, match="magic"):
            decode_checkpoint(b"NOTACKPT" + _golden_bytes()[8:])

    def test_wrong_version(self):
        payload = bytearray(_golden_bytes())
        payload[8:12] = struct.pack("<I", 2)
        with pytest.raises(CheckpointFormatError, match="version"):
            decode_checkpoint(bytes(payload))

    def test_trailing_bytes(self):
        with pytest.raises(CheckpointFormatError):
            decode_checkpoint(_golden_bytes() + b"\x00")

    def test_bad_metadata(self):
        meta = b"{not json"
        payload = MAGIC + struct.pack("<I", VERSION) + struct.pack("<I", len(meta)) + meta + struct.pack("<I", 0)
        with pytest.raises(CheckpointFormatError):
            decode_checkpoint(payload)

    def test_scalar_keeps_zero_dims(self):
        payload = encode_checkpoint(Checkpoint({"s": np.float64(4.0), "t": np.array(-1.5)}, {}))
        ckpt = decode_checkpoint(payload)
        assert ckpt.tensors["s"].shape == ()
        assert ckpt.tensors["t"].shape == ()
        assert float(ckpt.tensors["t"]) == -1.5
        assert encode_checkpoint(ckpt) == payload

    def test_non_contiguous_input(self):
        base = np.arange(12, dtype=np.float64).reshape(3, 4)
        ckpt = decode_checkpoint(encode_checkpoint(Checkpoint({"v": base.T}, {})))
        np.testing.assert_array_equal(ckpt.tensors["v"], base.T)

    @pytest.mark.parametrize("dims", [(2 ** 32, 2 ** 32), (2 ** 63, 4), (1000, 1000)])
    def test_oversized_dims(self, dims):
        payload = b"".join([
            MAGIC, struct.pack("<I", VERSION), struct.pack("<I", 2), b"{}",
            struct.pack("<I", 1), struct.pack("<I", 1), b"w",
            struct.pack("<I", len(dims)), struct.pack(f"<{len(dims)}Q", *dims),
            struct.pack("<2d", 1.0, 2.0),
        ])
        with pytest.raises(CheckpointFormatError, match="declares shape"):
            decode_checkpoint(payload)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetError):
            load_checkpoint(str(tmp_path / "missing.ckpt"))


class TestModelCheckpoint:
    def test_round_trip_is_bitwise(self, tiny_model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(str(path), model_checkpoint(tiny_model, seed=7, round_index=2, stage="ckd", stage_index=3))
        first = path.read_bytes()
        loaded = load_checkpoint(str(path))
        assert loaded.round_index == 2 and loaded.stage == "ckd" and loaded.stage_index == 3
        assert loaded.metadata["rng"]["seed"] == 7
        assert loaded.arch == tiny_model.arch
        model = model_from_checkpoint(loaded)
        for name, p in tiny_model.params.items():
            assert np.array_equal(model.params[name].data, p.data)
        save_checkpoint(str(path), model_checkpoint(model, seed=7, round_index=2, stage="ckd", stage_index=3))
        assert path.read_bytes() == first

    def test_restored_model_predicts_identically(self, tiny_model):
        restored = model_from_checkpoint(decode_checkpoint(encode_checkpoint(model_checkpoint(tiny_model, 0))))
        x = np.random.default_rng(0).uniform(size=(2, 8, 8, 3))
        assert np.array_equal(forward(restored, x)[1].data, forward(tiny_model, x)[1].data)
        assert all(p.requires_grad for p in restored.params.values())

    def test_metadata_is_sorted_json(self, tiny_model):
        payload = encode_checkpoint(model_checkpoint(tiny_model, 0))
        length = struct.unpack("<I", payload[12:16])[0]
        text = payload[16:16 + length].decode("utf-8")
        assert text == json.dumps(json.loads(text), sort_keys=True, separators=(",", ":"))

    def test_prototype_dump_is_not_a_model(self):
        ckpt = prototype_checkpoint({"region": PrototypeSet(np.zeros((3, 4)), np.zeros(3, dtype=int))}, 1, 2)
        with pytest.raises(CheckpointFormatError):
            model_from_checkpoint(ckpt)

    def test_mismatched_tensors(self, tiny_model):
        ckpt = model_checkpoint(tiny_model, 0)
        ckpt.tensors.pop("classifier.bias")
        with pytest.raises(CheckpointFormatError):
            model_from_checkpoint(ckpt)


def test_prototype_round_trip(tmp_path):
    gen = np.random.default_rng(0)
    protos = {
        "region": PrototypeSet(gen.normal(size=(3, 4)), np.array([5, 0, 2])),
        "class": PrototypeSet(gen.normal(size=(3, 4)), np.array([1, 1, 9])),
    }
    path = tmp_path / "prototypes.ckpt"
    save_checkpoint(str(path), prototype_checkpoint(protos, round_index=1, stage_index=2))
    loaded = load_checkpoint(str(path))
    assert loaded.stage == "prototypes" and loaded.stage_index == 2
    unpacked = prototypes_from_checkpoint(loaded)
    assert set(unpacked) == {"region", "class"}
    for name, p in protos.items():
        centroids, counts = unpacked[name]
        assert np.array_equal(centroids, p.centroids)
        assert counts.tolist() == p.counts.tolist()
    with pytest.raises(CheckpointFormatError):
        prototypes_from_checkpoint(Checkpoint({}, {"kind": "model"}))
