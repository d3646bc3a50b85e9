import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from codec_tts.exceptions import CheckpointError, DataError
from codec_tts.serialization import (load_module_state, load_tensors, read_config, read_tokens, save_tensors,
                                     write_config, write_tokens)
from codec_tts.validation import as_matrix, check_token_ids, check_waveform, freeze, parameter_checksum


def test_container_layout(tmp_path):
    save_tensors(tmp_path / "t.bin", {"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    buf = (tmp_path / "t.bin").read_bytes()
    assert buf[:4] == b"CTTS"
    assert struct.unpack_from("<III", buf, 4) == (1, 1, 1)
    assert buf[16:17] == b"w"
    assert struct.unpack_from("<IQQ", buf, 17) == (2, 2, 3)
    np.testing.assert_array_equal(np.frombuffer(buf[37:], "<f4"), np.arange(6))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, array_shapes(min_dims=0, max_dims=3, max_side=4),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_roundtrip_property(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("rt") / "x.bin"
    save_tensors(path, {"a.b": arr, "scalar": np.float32(3.5)})
    back = load_tensors(path)
    np.testing.assert_array_equal(back["a.b"], arr)
    assert back["a.b"].shape == arr.shape and back["scalar"] == 3.5


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + struct.pack("<I", 9) + b[8:],
    lambda b: b[:-3],
    lambda b: b + b"\0",
])
def test_corrupt_containers(tmp_path, mutate):
    save_tensors(tmp_path / "t.bin", {"w": np.ones((3, 3), np.float32)})
    (tmp_path / "t.bin").write_bytes(mutate((tmp_path / "t.bin").read_bytes()))
    with pytest.raises(CheckpointError):
        load_tensors(tmp_path / "t.bin")


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_tensors(tmp_path / "none.bin")


def test_load_module_state_mismatch():
    with pytest.raises(CheckpointError):
        load_module_state(torch.nn.Linear(2, 2), {"weight": np.zeros((3, 3))})


def test_config_roundtrip(tmp_path):
    write_config(tmp_path / "c.cfg", {"a": 1, "b": 2.5, "c": True, "d": "text", "e": 1e-4})
    (tmp_path / "c.cfg").write_text((tmp_path / "c.cfg").read_text() + "# note\n\n f = 3 # trailing\n")
    assert read_config(tmp_path / "c.cfg") == {"a": 1, "b": 2.5, "c": True, "d": "text", "e": 1e-4, "f": 3}
    (tmp_path / "bad.cfg").write_text("novalue\n")
    with pytest.raises(CheckpointError):
        read_config(tmp_path / "bad.cfg")


def test_token_files(tmp_path):
    write_tokens(tmp_path / "t.txt", np.array([3, 1023, 0]))
    assert read_tokens(tmp_path / "t.txt") == [3, 1023, 0]
    (tmp_path / "bad.txt").write_text("1\nfoo\n")
    with pytest.raises(DataError):
        read_tokens(tmp_path / "bad.txt")
    with pytest.raises(DataError):
        read_tokens(tmp_path / "missing.txt")


def test_validation_helpers():
    assert len(check_waveform(np.zeros(5))) == 5
    with pytest.raises(DataError):
        check_waveform(np.zeros(2), min_samples=3)
    np.testing.assert_array_equal(check_token_ids([1, 2], 3), [1, 2])
    with pytest.raises(DataError):
        check_token_ids([3], 3)
    assert as_matrix(np.zeros((2, 4)), width=4).shape == (2, 4)
    with pytest.raises(DataError):
        as_matrix(np.zeros((2, 4)), width=5)


def test_checksum_tracks_weights():
    lin = freeze(torch.nn.Linear(3, 3))
    assert not lin.training and not any(p.requires_grad for p in lin.parameters())
    before = parameter_checksum(lin)
    assert parameter_checksum(lin) == before
    with torch.no_grad():
        lin.weight[0, 0] += 1e-6
    assert parameter_checksum(lin) != before
