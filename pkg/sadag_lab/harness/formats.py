"""Binary checkpoint and dataset files.

Checkpoint: magic ``SADG``, u32 version, u32 tensor count, then per tensor a u32 name length,
the UTF-8 name, u32 rank, u32 dims and a little-endian float32 payload. Dataset: magic ``SADD``,
u32 version, u32 N, C, H, W, float32 images, then N u16 labels. Both end with a metadata block:
u32 length followed by UTF-8 YAML. All integers are little-endian.
"""

import logging
import math
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np
import yaml

from ..errors import FormatError
from ..nets.teacher import TeacherNet
from ..quant.quantnet import QuantNet, init_quantnet

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SADG"
DATASET_MAGIC = b"SADD"
FORMAT_VERSION = 1
MAX_RANK = 8

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    if not str(path):
        raise ValueError("output path is empty")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _metadata_block(metadata: Optional[Mapping[str, Any]]) -> bytes:
    text = yaml.safe_dump(dict(metadata or {}), sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(text)) + text


class _Reader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, data: bytes, path: Optional[str]):
        self.data = data
        self.offset = 0
        self.path = path

    def fail(self, message: str) -> FormatError:
        return FormatError(message, offset=self.offset, path=self.path)

    def take(self, count: int, what: str) -> bytes:
        if count < 0 or self.offset + count > len(self.data):
            raise self.fail(f"truncated while reading {what} ({count} bytes needed)")
        chunk = self.data[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def magic(self, expected: bytes) -> None:
        got = self.take(len(expected), "magic")
        if got != expected:
            self.offset -= len(expected)
            raise self.fail(f"bad magic {got!r}, expected {expected!r}")

    def version(self) -> None:
        version = self.u32("format version")
        if version != FORMAT_VERSION:
            self.offset -= 4
            raise self.fail(f"unsupported format version {version}")

    def element_count(self, dims: Sequence[int], what: str) -> int:
        """Product of ``dims``, rejected when the payload cannot fit in what is left."""
        count = math.prod(dims)
        if count > (len(self.data) - self.offset) // 4:
            raise self.fail(f"{what} declares dims {list(dims)}, more values than the file holds")
        return count

    def float32(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, what), dtype="<f4").astype(np.float64)

    def metadata(self) -> dict[str, Any]:
        length = self.u32("metadata length")
        text = self.take(length, "metadata").decode("utf-8")
        if self.offset != len(self.data):
            raise self.fail(f"{len(self.data) - self.offset} trailing bytes")
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise self.fail(f"metadata is not valid YAML: {exc}") from None
        return loaded or {}


def _read(path: PathLike) -> _Reader:
    path = Path(path)
    try:
        return _Reader(path.read_bytes(), str(path))
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc


# -- checkpoints ---------------------------------------------------------------------------------


def encode_checkpoint(
    tensors: Mapping[str, np.ndarray], metadata: Optional[Mapping[str, Any]] = None
) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ValueError(f"tensor {name} has rank {arr.ndim} > {MAX_RANK}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    parts.append(_metadata_block(metadata))
    return b"".join(parts)


def decode_checkpoint(
    data: bytes, path: Optional[str] = None
) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    reader = _Reader(data, path)
    reader.magic(CHECKPOINT_MAGIC)
    reader.version()
    count = reader.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = reader.u32("name length")
        try:
            name = reader.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise reader.fail("tensor name is not UTF-8") from None
        rank = reader.u32(f"rank of {name}")
        if rank > MAX_RANK:
            raise reader.fail(f"tensor {name} declares rank {rank}")
        dims = [reader.u32(f"dims of {name}") for _ in range(rank)]
        size = reader.element_count(dims, f"tensor {name}")
        tensors[name] = reader.float32(size, f"tensor {name}").reshape(dims)
    return tensors, reader.metadata()


def write_checkpoint(
    path: PathLike, tensors: Mapping[str, np.ndarray], metadata: Optional[Mapping[str, Any]] = None
) -> Path:
    """Write named tensors atomically.

    Args:
        path: Destination file
        tensors: Ordered mapping of name to array; values are stored as float32
        metadata: YAML-serializable provenance (seed, stage hash, ...)

    Returns:
        The written path
    """
    out = atomic_write_bytes(path, encode_checkpoint(tensors, metadata))
    logger.debug(f"Wrote checkpoint {out} ({len(tensors)} tensors)")
    return out


def read_checkpoint(path: PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    reader = _read(path)
    return decode_checkpoint(reader.data, reader.path)


# -- datasets ------------------------------------------------------------------------------------


def encode_dataset(
    images: np.ndarray, labels: np.ndarray, metadata: Optional[Mapping[str, Any]] = None
) -> bytes:
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if images.ndim != 4:
        raise ValueError(f"images must be (N, C, H, W), got {images.shape}")
    if labels.shape != (images.shape[0],):
        raise ValueError(f"{labels.shape} labels for {images.shape[0]} images")
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
        raise ValueError("labels must fit in 16 unsigned bits")
    header = DATASET_MAGIC + struct.pack("<5I", FORMAT_VERSION, *images.shape)
    body = images.astype("<f4").tobytes() + labels.astype("<u2").tobytes()
    return header + body + _metadata_block(metadata)


def decode_dataset(
    data: bytes, path: Optional[str] = None
) -> tuple[np.ndarray, np.ndarray, dict[str, Any]]:
    reader = _Reader(data, path)
    reader.magic(DATASET_MAGIC)
    reader.version()
    shape = [reader.u32(f"extent {axis}") for axis in "NCHW"]
    size = reader.element_count(shape, "image payload")
    images = reader.float32(size, "image payload").reshape(shape)
    labels = np.frombuffer(reader.take(2 * shape[0], "labels"), dtype="<u2").astype(np.int64)
    return images, labels, reader.metadata()


def write_dataset(
    path: PathLike,
    images: np.ndarray,
    labels: np.ndarray,
    metadata: Optional[Mapping[str, Any]] = None,
) -> Path:
    out = atomic_write_bytes(path, encode_dataset(images, labels, metadata))
    logger.debug(f"Wrote dataset {out} ({images.shape[0]} images)")
    return out


def read_dataset(path: PathLike) -> tuple[np.ndarray, np.ndarray, dict[str, Any]]:
    reader = _read(path)
    return decode_dataset(reader.data, reader.path)


# -- networks ------------------------------------------------------------------------------------


def save_checkpoint(
    net: Union[TeacherNet, QuantNet], path: PathLike, metadata: Optional[Mapping[str, Any]] = None
) -> Path:
    """
    Write a teacher or quantized net with enough metadata to rebuild it.

    Args:
        net: Teacher or quantized net; a quantized net stores its bit map, not its teacher
        path: Destination file, written atomically
        metadata: Extra provenance merged under the rebuild keys

    Returns:
        The written path
    """
    teacher = net.teacher if isinstance(net, QuantNet) else net
    meta: dict[str, Any] = dict(metadata or {})
    meta["kind"] = "quantnet" if isinstance(net, QuantNet) else "teacher"
    meta["input_shape"] = [int(v) for v in teacher.input_shape]
    meta["num_classes"] = int(teacher.num_classes)
    if isinstance(net, QuantNet):
        meta["bits_w"] = {k: int(v) for k, v in net.bits_w.items()}
        meta["bits_a"] = {k: int(v) for k, v in net.bits_a.items()}
    return write_checkpoint(path, net.state_dict(), meta)


def load_checkpoint(
    path: PathLike, teacher: Optional[TeacherNet] = None
) -> tuple[Union[TeacherNet, QuantNet], dict[str, Any]]:
    """
    Rebuild the net stored at ``path``.

    Args:
        path: Checkpoint written by :func:`save_checkpoint`
        teacher: Full-precision net the quantized checkpoint was derived from

    Returns:
        Tuple of (net, metadata)

    Raises:
        FormatError: Corrupt file, unknown kind or missing tensors
        ValueError: A quantized checkpoint was loaded without its teacher
    """
    state, meta = read_checkpoint(path)
    kind = meta.get("kind")
    try:
        input_shape = tuple(int(v) for v in meta["input_shape"])
        num_classes = int(meta["num_classes"])
    except (KeyError, TypeError, ValueError):
        raise FormatError("metadata lacks input_shape/num_classes", path=str(path)) from None
    if kind == "teacher":
        net = TeacherNet.from_state_dict(state, input_shape, num_classes)
        return net, meta
    if kind == "quantnet":
        if teacher is None:
            raise ValueError(f"{path} holds a quantized net; pass its teacher to load it")
        q = init_quantnet(teacher, meta.get("bits_w", {}), meta.get("bits_a", {}))
        try:
            q.load_state_dict(state)
        except KeyError as exc:
            missing = exc.args[0]
            raise FormatError(f"checkpoint is missing tensor {missing}", path=str(path)) from None
        return q, meta
    raise FormatError(f"unknown checkpoint kind {kind!r}", path=str(path))
