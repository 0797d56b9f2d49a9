"""Checkpoint and dataset files: layout, corruption reports and byte-stable round trips."""

import struct

import numpy as np
import pytest

from sadag_lab.errors import FormatError
from sadag_lab.harness.formats import (
    CHECKPOINT_MAGIC,
    DATASET_MAGIC,
    decode_checkpoint,
    decode_dataset,
    encode_checkpoint,
    encode_dataset,
    load_checkpoint,
    read_dataset,
    save_checkpoint,
    write_dataset,
)
from sadag_lab.nets import TeacherNet
from sadag_lab.quant import QuantNet

pytestmark = pytest.mark.unit


def test_checkpoint_layout_and_round_trip():
    tensors = {"w": np.arange(6.0).reshape(2, 3), "b": np.array([0.5, -1.5]), "s": np.array(2.0)}
    data = encode_checkpoint(tensors, {"seed": 3})
    assert data[:4] == CHECKPOINT_MAGIC
    assert int.from_bytes(data[4:8], "little") == 1
    decoded, meta = decode_checkpoint(data)
    assert list(decoded) == ["w", "b", "s"]
    for name, value in tensors.items():
        np.testing.assert_array_equal(decoded[name], value)
    assert decoded["s"].shape == ()
    assert meta == {"seed": 3}


def test_bad_magic_reports_offset_zero():
    data = encode_checkpoint({"w": np.ones(2)})
    with pytest.raises(FormatError) as info:
        decode_checkpoint(b"XXXX" + data[4:])
    assert info.value.offset == 0


def test_truncation_reports_offset():
    data = encode_checkpoint({"w": np.ones(2)})
    with pytest.raises(FormatError, match="truncated") as info:
        decode_checkpoint(data[:10])
    assert info.value.offset == 8


def test_unsupported_version_and_trailing_bytes():
    data = encode_checkpoint({"w": np.ones(2)})
    with pytest.raises(FormatError, match="version"):
        decode_checkpoint(data[:4] + (7).to_bytes(4, "little") + data[8:])
    with pytest.raises(FormatError, match="trailing"):
        decode_checkpoint(data + b"\0")


def test_oversized_checkpoint_dims_are_rejected_at_payload_offset():
    header = CHECKPOINT_MAGIC + struct.pack("<II", 1, 1) + struct.pack("<I", 1) + b"w"
    data = header + struct.pack("<5I", 4, *(65536,) * 4) + struct.pack("<I", 0)
    with pytest.raises(FormatError, match="dims") as info:
        decode_checkpoint(data)
    assert info.value.offset == len(header) + 20


def test_oversized_dataset_extents_are_rejected_at_payload_offset():
    data = DATASET_MAGIC + struct.pack("<5I", 1, *(65536,) * 4) + struct.pack("<I", 0)
    with pytest.raises(FormatError, match="dims") as info:
        decode_dataset(data)
    assert info.value.offset == 24


def test_dataset_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.uniform(-1, 1, size=(5, 3, 4, 4))
    labels = np.array([0, 3, 1, 1, 2])
    path = write_dataset(tmp_path / "d.sadd", images, labels, {"split": "val"})
    got_images, got_labels, meta = read_dataset(path)
    np.testing.assert_array_equal(got_images, images.astype(np.float32))
    np.testing.assert_array_equal(got_labels, labels)
    assert meta == {"split": "val"}
    assert not list(tmp_path.glob(".d.sadd.*"))


def test_dataset_rejects_bad_input(tmp_path):
    with pytest.raises(ValueError):
        encode_dataset(np.zeros((2, 3, 4)), np.zeros(2))
    with pytest.raises(ValueError):
        encode_dataset(np.zeros((2, 3, 4, 4)), np.zeros(3))
    with pytest.raises(ValueError):
        write_dataset("", np.zeros((1, 3, 4, 4)), np.zeros(1))
    with pytest.raises(FormatError):
        decode_dataset(encode_dataset(np.zeros((2, 3, 4, 4)), np.zeros(2))[:20])


def test_teacher_checkpoint_is_byte_stable(teacher, tmp_path):
    first = save_checkpoint(teacher, tmp_path / "a.sadg", {"seed": 7})
    loaded, meta = load_checkpoint(first)
    assert isinstance(loaded, TeacherNet)
    assert meta["kind"] == "teacher" and meta["seed"] == 7
    second = save_checkpoint(loaded, tmp_path / "b.sadg", {"seed": 7})
    assert first.read_bytes() == second.read_bytes()


def test_quantnet_checkpoint_is_byte_stable(quantnet_acts, teacher, tmp_path):
    quantnet_acts.freeze()
    first = save_checkpoint(quantnet_acts, tmp_path / "q.sadg")
    loaded, meta = load_checkpoint(first, teacher=teacher)
    assert isinstance(loaded, QuantNet)
    assert meta["bits_w"] == quantnet_acts.bits_w
    second = save_checkpoint(loaded, tmp_path / "q2.sadg")
    assert first.read_bytes() == second.read_bytes()


def test_quantnet_checkpoint_needs_its_teacher(quantnet, tmp_path):
    path = save_checkpoint(quantnet, tmp_path / "q.sadg")
    with pytest.raises(ValueError, match="teacher"):
        load_checkpoint(path)
