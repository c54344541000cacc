"""Module implementing unit tests for the DINN tensor file format and checkpoints"""

import json
import os
import re
import struct
import tempfile
from os.path import join
from typing import Tuple

import numpy as np
import pytest

from pydinn.errors import CheckpointError, DataError, ShapeError
from pydinn.nn import ConvBnRelu, Linear, Module
from pydinn.tensor import Tensor
from pydinn.tensorfile import (
    CHECKPOINT_CONFIG,
    MAGIC,
    DinnReader,
    create_dinn,
    load_checkpoint,
    open_dinn,
    read_checkpoint_config,
    read_tensor,
    save_checkpoint,
    write_tensor,
)


class _Small(Module):
    prefix = "small"

    def __init__(self, seed: int) -> None:
        super().__init__()
        rng = np.random.default_rng(seed)
        self.block = ConvBnRelu(1, 2, rng)
        self.head = Linear(2, 1, rng)


@pytest.mark.parametrize(
    "dims, dtype",
    [
        pytest.param((), np.float32, id="scalar"),
        pytest.param((5,), np.float64, id="vector"),
        pytest.param((2, 3, 4, 5), np.float32, id="rank4"),
    ],
)
def test_write_read_tensor(dims: Tuple[int, ...], dtype: np.dtype) -> None:
    """Unit tests for write_tensor and read_tensor"""
    data = np.asarray(np.random.default_rng(0).standard_normal(dims), dtype=dtype)
    with tempfile.TemporaryDirectory() as tmpdir:
        filepath = join(tmpdir, "nested", "tensor.dinn")
        write_tensor(filepath, data)
        restored = read_tensor(filepath)
        with open_dinn(filepath) as reader:
            assert reader.header.dims == list(dims)
            assert reader.header.dtype == np.dtype(dtype)
    assert restored.dtype == dtype
    np.testing.assert_array_equal(restored, data)


def test_header_layout() -> None:
    """The header is magic, version, dtype code, rank and u64 dims"""
    with tempfile.TemporaryDirectory() as tmpdir:
        filepath = join(tmpdir, "tensor.dinn")
        write_tensor(filepath, Tensor(np.ones((2, 3))))
        with open(filepath, "rb") as raw:
            content = raw.read()
    assert content[:4] == MAGIC
    assert struct.unpack("<BBB", content[4:7]) == (1, 0, 2)
    assert struct.unpack("<2Q", content[7:23]) == (2, 3)
    assert len(content) == 23 + 6 * 4


@pytest.mark.parametrize(
    "content, message",
    [
        pytest.param(b"NOPE\x01\x00\x00", "is not a DINN tensor file", id="magic"),
        pytest.param(MAGIC + b"\x02\x00\x00", "unsupported format version 2", id="version"),
        pytest.param(MAGIC + b"\x01\x07\x00", "unknown dtype code 7, possible values are: 0, 1", id="dtype"),
        pytest.param(MAGIC + b"\x01\x00\x01" + struct.pack("<Q", 4) + b"\x00" * 8, "is truncated", id="truncated"),
        pytest.param(MAGIC + b"\x01", "is truncated", id="short_header"),
    ],
)
def test_reader_rejects_invalid_files(content: bytes, message: str) -> None:
    """Unit tests for DinnReader validation"""
    with tempfile.TemporaryDirectory() as tmpdir:
        filepath = join(tmpdir, "bad.dinn")
        with open(filepath, "wb") as raw:
            raw.write(content)
        with pytest.raises(DataError, match=re.escape(message)):
            read_tensor(filepath)


def test_writer_validation() -> None:
    """Unsupported dtypes, ranks and second writes are rejected"""
    with tempfile.TemporaryDirectory() as tmpdir:
        filepath = join(tmpdir, "tensor.dinn")
        with pytest.raises(ValueError, match="possible values are: float32, float64"):
            write_tensor(filepath, np.zeros(3, dtype=np.int32))
        with pytest.raises(ShapeError):
            write_tensor(filepath, np.zeros((1, 1, 1, 1, 1)), exist_ok=True)
        with create_dinn(filepath, exist_ok=True) as writer:
            writer.write(np.zeros(2))
            with pytest.raises(ValueError, match="single tensor"):
                writer.write(np.zeros(2))
        with pytest.raises(FileExistsError, match="already exists and exist_ok is False"):
            write_tensor(filepath, np.zeros(2))


def test_big_endian_input_is_stored_little_endian() -> None:
    """Unit test for writing a big-endian array"""
    data = np.arange(4, dtype=">f8")
    with tempfile.TemporaryDirectory() as tmpdir:
        filepath = join(tmpdir, "tensor.dinn")
        write_tensor(filepath, data)
        with open_dinn(filepath) as reader:
            assert isinstance(reader, DinnReader)
            np.testing.assert_array_equal(reader.read(), [0.0, 1.0, 2.0, 3.0])


def test_checkpoint_round_trip() -> None:
    """A saved model loads into a freshly initialized one"""
    model = _Small(seed=0)
    with tempfile.TemporaryDirectory() as tmpdir:
        document = save_checkpoint(tmpdir, model, {"channels": 2})
        assert document["model"] == "_Small"
        assert "small.block.bn.running.var" in document["tensors"]
        other = _Small(seed=1)
        load_checkpoint(tmpdir, other, expected_config={"channels": 2})
        with pytest.raises(FileExistsError):
            save_checkpoint(tmpdir, model, {"channels": 2})
    for name, value in model.state_dict().items():
        np.testing.assert_array_equal(other.state_dict()[name], value)


def test_checkpoint_config_mismatch() -> None:
    """A differing stored config is reported by key"""
    with tempfile.TemporaryDirectory() as tmpdir:
        save_checkpoint(tmpdir, _Small(seed=0), {"channels": 2, "depth": 1})
        with pytest.raises(CheckpointError, match="different config: depth"):
            load_checkpoint(tmpdir, _Small(seed=0), expected_config={"channels": 2, "depth": 3})


def test_checkpoint_format_version() -> None:
    """Checkpoints of another major format version are rejected"""
    with tempfile.TemporaryDirectory() as tmpdir:
        with pytest.raises(CheckpointError, match="is not a checkpoint directory"):
            read_checkpoint_config(tmpdir)
        save_checkpoint(tmpdir, _Small(seed=0), {})
        config_path = join(tmpdir, CHECKPOINT_CONFIG)
        with open(config_path, encoding="utf-8") as config_file:
            document = json.load(config_file)
        document["format_version"] = "1.3"
        with open(config_path, "w", encoding="utf-8") as config_file:
            json.dump(document, config_file)
        assert read_checkpoint_config(tmpdir)["format_version"] == "1.3"
        document["format_version"] = "2.0"
        with open(config_path, "w", encoding="utf-8") as config_file:
            json.dump(document, config_file)
        with pytest.raises(CheckpointError, match="has checkpoint format 2.0"):
            read_checkpoint_config(tmpdir)


def test_checkpoint_reads_listed_tensors() -> None:
    """Stray tensor files are ignored and a missing listed tensor is reported"""
    model = _Small(seed=0)
    with tempfile.TemporaryDirectory() as tmpdir:
        document = save_checkpoint(tmpdir, model, {})
        write_tensor(join(tmpdir, "small.old.w.dinn"), np.zeros(3))
        load_checkpoint(tmpdir, _Small(seed=1))
        os.remove(join(tmpdir, document["tensors"][0] + ".dinn"))
        with pytest.raises(CheckpointError, match=re.escape(f"is missing tensor files: {document['tensors'][0]}")):
            load_checkpoint(tmpdir, _Small(seed=1))
