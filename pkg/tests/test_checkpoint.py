import numpy as np
import pytest

from fewshot_biattn.checkpoint import (CheckpointError, load_checkpoint,
                                       save_checkpoint)
from fewshot_biattn.rng import PortableRng


def _sample_tensors():
    rng = PortableRng(1)
    return {
        "biattn/W1": rng.fill_normal((4, 1)),
        "biattn/b1": np.zeros(()),
        "backbone/block0/conv0/kernel": rng.fill_normal((2, 1, 3, 3)),
        "unicode/näme": rng.fill_normal((3,)),
    }


def test_round_trip_bit_exact(tmp_path):
    path = str(tmp_path / "w.fswt")
    tensors = _sample_tensors()
    save_checkpoint(path, tensors)
    loaded = load_checkpoint(path)
    assert set(loaded) == set(tensors)
    for name, arr in tensors.items():
        assert loaded[name].shape == arr.shape
        assert loaded[name].tobytes() == arr.tobytes()


def test_save_load_save_identical_bytes(tmp_path):
    p1, p2 = str(tmp_path / "a.fswt"), str(tmp_path / "b.fswt")
    save_checkpoint(p1, _sample_tensors())
    save_checkpoint(p2, load_checkpoint(p1))
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_bad_magic(tmp_path):
    path = str(tmp_path / "bad.fswt")
    with open(path, "wb") as fh:
        fh.write(b"NOPE" + b"\x00" * 20)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_truncated(tmp_path):
    path = str(tmp_path / "t.fswt")
    save_checkpoint(path, _sample_tensors())
    raw = open(path, "rb").read()
    with open(path, "wb") as fh:
        fh.write(raw[:len(raw) - 9])
    with pytest.raises(CheckpointError, match="truncat|corrupt|bounds"):
        load_checkpoint(path)


def test_trailing_bytes(tmp_path):
    path = str(tmp_path / "x.fswt")
    save_checkpoint(path, _sample_tensors())
    with open(path, "ab") as fh:
        fh.write(b"\x00\x01")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_unsupported_version(tmp_path):
    path = str(tmp_path / "v.fswt")
    save_checkpoint(path, {"a": np.zeros(2)})
    raw = bytearray(open(path, "rb").read())
    raw[4] = 99
    with open(path, "wb") as fh:
        fh.write(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
