"""Module implementing the DINN tensor file format and model checkpoints.

A DINN file holds one array: the magic bytes "DINN", a u8 format version, a u8 dtype code,
a u8 rank, rank little-endian u64 dims and the row-major little-endian payload.
A checkpoint is a directory with one DINN file per named tensor plus ``config.json``.
"""

import contextlib
import json
import logging
import struct
from dataclasses import dataclass
from os import makedirs
from os.path import abspath, dirname, isdir, isfile, join
from typing import IO, Any, Dict, Generator, List, Optional, Union

import numpy as np
from packaging.version import Version

from pydinn.errors import CheckpointError, DataError, ShapeError
from pydinn.nn import Module
from pydinn.tensor import MAX_RANK, Tensor

logger = logging.getLogger(__name__)

MAGIC = b"DINN"
FORMAT_VERSION = 1
SUFFIX = ".dinn"
CHECKPOINT_CONFIG = "config.json"
CHECKPOINT_FORMAT_VERSION = "1.0"


@dataclass(frozen=True)
class TensorHeader:
    """Header of a DINN tensor file."""

    version: int
    dtype: np.dtype
    dims: List[int]

    @property
    def payload_size(self) -> int:
        """Number of payload bytes that follow the header."""
        return int(np.prod(self.dims, dtype=np.int64)) * self.dtype.itemsize


class DinnReader:
    """DinnReader class.

    Reads the header on construction; should only be created through ``open_dinn()``.

    DTYPES : Dict[int, np.dtype]
        Dictionary matching a dtype code with the little-endian payload dtype.
    """

    DTYPES: Dict[int, np.dtype] = {
        0: np.dtype("<f4"),  # 32-bit little-endian real.
        1: np.dtype("<f8"),  # 64-bit little-endian real.
    }

    def __init__(self, filepath: str) -> None:
        self._filepath = filepath
        self._file: IO[bytes] = open(filepath, "rb")  # pylint: disable=consider-using-with
        try:
            self.header = self._read_header()
        except Exception:
            self._file.close()
            raise

    def close(self) -> None:
        """Close the file"""
        self._file.close()

    def _read_exact(self, count: int) -> bytes:
        data = self._file.read(count)
        if len(data) != count:
            raise DataError(f"{self._filepath} is truncated: expected {count} more bytes, found {len(data)}.")
        return data

    def _read_header(self) -> TensorHeader:
        """Parses and validates the header.

        :raises DataError: on a wrong magic, unknown version or dtype code, or truncation.
        """
        magic = self._read_exact(len(MAGIC))
        if magic != MAGIC:
            raise DataError(f"{self._filepath} is not a DINN tensor file (magic {magic!r}).")
        version, dtype_code, rank = struct.unpack("<BBB", self._read_exact(3))
        if version != FORMAT_VERSION:
            raise DataError(f"{self._filepath} has unsupported format version {version}.")
        try:
            dtype = self.DTYPES[dtype_code]
        except KeyError:
            raise DataError(
                f"{self._filepath} has unknown dtype code {dtype_code}, possible values are: "
                f"{', '.join(str(code) for code in self.DTYPES)}"
            ) from KeyError
        if rank > MAX_RANK:
            raise DataError(f"{self._filepath} has rank {rank}, at most {MAX_RANK} is supported.")
        dims = list(struct.unpack(f"<{rank}Q", self._read_exact(8 * rank)))
        return TensorHeader(version=version, dtype=dtype, dims=dims)

    def read(self) -> np.ndarray:
        """Reads the payload.

        Returns
        ----------
        : np.ndarray
            Array with the header dims in native byte order.
        """
        payload = self._read_exact(self.header.payload_size)
        array = np.frombuffer(payload, dtype=self.header.dtype).reshape(self.header.dims)
        return array.astype(self.header.dtype.newbyteorder("="))


class DinnWriter:
    """DinnWriter class.

    Should only be created through ``create_dinn()``.

    DTYPE_CODES : Dict[np.dtype, int]
        Dictionary matching a supported array dtype with its header code.
    """

    DTYPE_CODES: Dict[np.dtype, int] = {
        np.dtype("float32"): 0,
        np.dtype("float64"): 1,
    }

    def __init__(self, filepath: str) -> None:
        self._file: IO[bytes] = open(filepath, "wb")  # pylint: disable=consider-using-with
        self._written = False

    def close(self) -> None:
        """Close the file"""
        self._file.close()

    @classmethod
    def _format_data(cls, data: Union[np.ndarray, Tensor]) -> np.ndarray:
        """Validates the array and returns it in little-endian byte order.

        :raises ValueError: if the dtype is not supported.
        :raises ShapeError: if the rank exceeds four.
        """
        array = data.data if isinstance(data, Tensor) else np.asarray(data)
        try:
            cls.DTYPE_CODES[array.dtype.newbyteorder("=")]
        except KeyError:
            raise ValueError(
                f"The dtype {array.dtype} is not supported, possible values are: "
                f"{', '.join(str(dtype) for dtype in cls.DTYPE_CODES)}"
            ) from KeyError
        if array.ndim > MAX_RANK:
            raise ShapeError(f"DINN files hold at most {MAX_RANK} dimensions, got dims {list(array.shape)}.")
        return np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<"))

    def write(self, data: Union[np.ndarray, Tensor]) -> None:
        """Writes header and payload; a file holds a single array.

        Parameters
        ----------
        data : Union[np.ndarray, Tensor]
            32- or 64-bit real array of rank at most four.
        """
        if self._written:
            raise ValueError("A DINN file holds a single tensor, write was already called.")
        array = self._format_data(data)
        code = self.DTYPE_CODES[array.dtype.newbyteorder("=")]
        self._file.write(MAGIC)
        self._file.write(struct.pack("<BBB", FORMAT_VERSION, code, array.ndim))
        self._file.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        self._file.write(array.tobytes(order="C"))
        self._written = True


@contextlib.contextmanager
def open_dinn(filepath: str) -> Generator:
    """Opens a DINN tensor file for reading.

    Parameters
    ----------
    filepath : str
        File path.
    Returns
    ----------
     : DinnReader
        Reader with the parsed header.
    """
    reader = DinnReader(filepath)
    try:
        yield reader
    finally:
        reader.close()


@contextlib.contextmanager
def create_dinn(filepath: str, exist_ok: bool = False) -> Generator:
    """Creates a DINN tensor file for writing; missing intermediate directories are created.

    Parameters
    ----------
    filepath : str
        File path.
    exist_ok: bool
        Whether to throw if the file already exists (i.e. if exist_ok = False)
    Returns
    ----------
     : DinnWriter
        Writer for a single tensor.

    :raises FileExistsError: If exist_ok is False, i.e. no overwrite is allowed, and the file exists
    """
    filepath_abs = abspath(filepath)
    if not exist_ok and isfile(filepath_abs):
        raise FileExistsError(f"{filepath_abs} already exists and exist_ok is False.")
    makedirs(dirname(filepath_abs), exist_ok=True)
    writer = DinnWriter(filepath_abs)
    try:
        yield writer
    finally:
        writer.close()


def read_tensor(filepath: str) -> np.ndarray:
    """Reads the array stored in a DINN file."""
    with open_dinn(filepath) as reader:
        return reader.read()


def write_tensor(filepath: str, data: Union[np.ndarray, Tensor], exist_ok: bool = False) -> None:
    """Writes one array to a DINN file."""
    with create_dinn(filepath, exist_ok=exist_ok) as writer:
        writer.write(data)


def save_checkpoint(
    directory: str, model: Module, config: Dict[str, Any], exist_ok: bool = False
) -> Dict[str, Any]:
    """Writes every parameter and running statistic of model plus a config echo.

    Parameters
    ----------
    directory : str
        Checkpoint directory, created if missing.
    model : Module
        Model to save.
    config : Dict[str, Any]
        JSON-serializable model configuration.
    exist_ok : bool
        Whether existing files may be overwritten.
    Returns
    ----------
    : Dict[str, Any]
        The content written to config.json.
    """
    state = model.state_dict()
    for name, array in state.items():
        write_tensor(join(directory, name + SUFFIX), array, exist_ok=exist_ok)
    document = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model": type(model).__name__,
        "tensors": sorted(state),
        "config": config,
    }
    config_path = join(directory, CHECKPOINT_CONFIG)
    if not exist_ok and isfile(config_path):
        raise FileExistsError(f"{abspath(config_path)} already exists and exist_ok is False.")
    with open(config_path, "w", encoding="utf-8") as config_file:
        json.dump(document, config_file, indent=2, sort_keys=True)
    logger.info("saved %d tensors of %s to %s", len(state), type(model).__name__, abspath(directory))
    return document


def read_checkpoint_config(directory: str) -> Dict[str, Any]:
    """Reads and version-checks the config.json of a checkpoint.

    :raises CheckpointError: if the directory is not a checkpoint or its major format version differs.
    """
    config_path = join(directory, CHECKPOINT_CONFIG)
    if not isdir(directory) or not isfile(config_path):
        raise CheckpointError(f"{abspath(directory)} is not a checkpoint directory (no {CHECKPOINT_CONFIG}).")
    with open(config_path, encoding="utf-8") as config_file:
        document: Dict[str, Any] = json.load(config_file)
    found = Version(str(document.get("format_version", "0")))
    if found.major != Version(CHECKPOINT_FORMAT_VERSION).major:
        raise CheckpointError(
            f"{abspath(directory)} has checkpoint format {found}, this version reads {CHECKPOINT_FORMAT_VERSION}."
        )
    return document


def load_checkpoint(directory: str, model: Module, expected_config: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Loads a checkpoint into model.

    Parameters
    ----------
    directory : str
        Checkpoint directory written by ``save_checkpoint``.
    model : Module
        Model whose parameters are overwritten.
    expected_config : Optional[Dict[str, Any]]
        If given, must equal the stored model configuration.
    Returns
    ----------
    : Dict[str, Any]
        The config.json content.
    :raises CheckpointError: naming each mismatching tensor or config entry.
    """
    document = read_checkpoint_config(directory)
    if expected_config is not None and document["config"] != expected_config:
        differing = sorted(
            key
            for key in set(expected_config) | set(document["config"])
            if expected_config.get(key) != document["config"].get(key)
        )
        raise CheckpointError(f"{abspath(directory)} was saved with a different config: {', '.join(differing)}")
    # Tensors listed in config.json; stale files of an earlier model are skipped.
    names = list(document.get("tensors", []))
    missing = [name for name in names if not isfile(join(directory, name + SUFFIX))]
    if missing:
        raise CheckpointError(f"{abspath(directory)} is missing tensor files: {', '.join(missing)}")
    state = {name: read_tensor(join(directory, name + SUFFIX)) for name in names}
    model.load_state_dict(state)
    logger.info("loaded %s from %s", type(model).__name__, abspath(directory))
    return document
