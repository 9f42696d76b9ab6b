import json
import struct

import numpy as np
import pytest
import torch

from endosr import checkpoint
from endosr.errors import ConfigurationError, FormatError, StorageError


def sample():
    return {"w": np.arange(6, dtype=np.float32).reshape(2, 3), "d": np.array([1.5, -2.0]),
            "step": np.array(7), "raw": np.array([1, 2, 255], dtype=np.uint8),
            "t": torch.ones(2, 2, dtype=torch.float16)}


def test_round_trip(tmp_path):
    checkpoint.save(tmp_path / "a.enl2h", sample(), {"kind": "x", "n": 3})
    tensors, meta = checkpoint.load(tmp_path / "a.enl2h")
    assert meta == {"kind": "x", "n": 3}
    assert list(tensors) == ["w", "d", "step", "raw", "t"]
    np.testing.assert_array_equal(tensors["w"], sample()["w"])
    assert tensors["d"].dtype == np.float64
    assert tensors["step"].dtype == np.int64 and tensors["step"].shape == ()
    assert tensors["t"].dtype == np.float32


def test_layout_by_hand():
    blob = checkpoint.encode({"ab": np.array([1.0], dtype=np.float32)})
    want = (b"ENL2H" + struct.pack("<II", 1, 1) + struct.pack("<I", 2) + b"ab" + struct.pack("<BI", 1, 1)
            + struct.pack("<Q", 1) + struct.pack("<f", 1.0))
    assert blob == want


def test_meta_is_json_record():
    blob = checkpoint.encode({}, {"b": 1, "a": 2})
    tensors, meta = checkpoint.decode(blob)
    assert not tensors and meta == {"a": 2, "b": 1}
    assert json.dumps({"a": 2, "b": 1}).encode() in blob


def test_truncation_detected():
    blob = checkpoint.encode(sample())
    for cut in (3, 12, 20, len(blob) - 1):
        with pytest.raises(FormatError):
            checkpoint.decode(blob[:cut])


def test_bad_magic_version_trailing():
    blob = checkpoint.encode(sample())
    with pytest.raises(FormatError, match="magic"):
        checkpoint.decode(b"XXXXX" + blob[5:])
    with pytest.raises(FormatError, match="version"):
        checkpoint.decode(blob[:5] + struct.pack("<I", 2) + blob[9:])
    with pytest.raises(FormatError, match="trailing"):
        checkpoint.decode(blob + b"\0")


def test_unknown_dtype_tag():
    blob = bytearray(checkpoint.encode({"a": np.zeros(1, dtype=np.float32)}))
    blob[13 + 4 + 1] = 9  # header, name length, name "a", then the dtype tag
    with pytest.raises(FormatError, match="dtype tag"):
        checkpoint.decode(bytes(blob))


def test_unsupported_dtype_rejected():
    with pytest.raises(ConfigurationError):
        checkpoint.encode({"c": np.array([1j])})


def test_io_errors(tmp_path):
    with pytest.raises(StorageError):
        checkpoint.load(tmp_path / "missing.enl2h")


def test_module_round_trip(tmp_path):
    torch.manual_seed(0)
    a, b = torch.nn.Linear(3, 2), torch.nn.Linear(3, 2)
    checkpoint.save(tmp_path / "m.enl2h", checkpoint.module_tensors(a, "net"))
    tensors, _ = checkpoint.load(tmp_path / "m.enl2h")
    checkpoint.load_module(b, tensors, "net")
    assert torch.equal(a.weight, b.weight) and torch.equal(a.bias, b.bias)
    with pytest.raises(ConfigurationError, match="shape mismatch"):
        checkpoint.load_module(torch.nn.Linear(4, 2), tensors, "net")
