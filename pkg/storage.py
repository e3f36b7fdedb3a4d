"""FCNW1 container: the on-disk format for imported weights and checkpoints.

Layout, all integers little-endian::

    b"FCNW1\\0"
    u32 entry count
    per entry: u32 name length, UTF-8 name, u8 rank, rank x u32 dims,
               prod(dims) x f32 values

Text blocks (``__config__``, ``__optimizer__``) are rank-1 entries whose single
dim is the UTF-8 byte length and whose payload is the raw text.
"""

import io
import logging
import os
import struct

import numpy as np
from dotenv import dotenv_values

from errors import FormatError
from models import ModelConfig, ParamStore

logger = logging.getLogger(__name__)

MAGIC = b"FCNW1\0"
FORMAT_VERSION = 1
CONFIG_ENTRY = "__config__"
OPTIMIZER_ENTRY = "__optimizer__"
TEXT_ENTRIES = (CONFIG_ENTRY, OPTIMIZER_ENTRY)
MOMENT_PREFIXES = ("__adam__.m.", "__adam__.v.")


def write_container(path, entries):
    """Write ``name -> ndarray | str`` entries in insertion order."""
    buffer = io.BytesIO()
    buffer.write(MAGIC)
    buffer.write(struct.pack("<I", len(entries)))
    for name, value in entries.items():
        encoded = name.encode("utf-8")
        buffer.write(struct.pack("<I", len(encoded)))
        buffer.write(encoded)
        if isinstance(value, str):
            payload = value.encode("utf-8")
            buffer.write(struct.pack("<BI", 1, len(payload)))
            buffer.write(payload)
            continue
        array = np.asarray(value, dtype="<f4")
        if array.ndim == 0:
            array = array.reshape(1)
        buffer.write(struct.pack("<B", array.ndim))
        buffer.write(struct.pack(f"<{array.ndim}I", *array.shape))
        buffer.write(np.ascontiguousarray(array).tobytes())
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(buffer.getvalue())
    os.replace(tmp_path, path)


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, count, what):
        if self.offset + count > len(self.data):
            raise FormatError(f"truncated {what}", offset=self.offset, path=self.path)
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_container(path):
    """Read every entry; text blocks come back as ``str``."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise FormatError(f"cannot read container: {e}", path=path) from e

    reader = _Reader(data, path)
    magic = reader.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic bytes {magic!r}", offset=0, path=path)
    (count,) = reader.unpack("<I", "entry count")
    entries = {}
    for _ in range(count):
        start = reader.offset
        (name_len,) = reader.unpack("<I", "name length")
        try:
            name = reader.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError("entry name is not UTF-8", offset=start + 4, path=path) from e
        (rank,) = reader.unpack("<B", "rank")
        dims = reader.unpack(f"<{rank}I", "dims") if rank else ()
        if name in TEXT_ENTRIES:
            if rank != 1:
                raise FormatError(f"text entry {name} must have rank 1", offset=start, path=path)
            entries[name] = reader.take(dims[0], "text block").decode("utf-8")
            continue
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        raw = reader.take(4 * size, f"values of {name}")
        entries[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    if reader.offset != len(data):
        raise FormatError("trailing bytes after last entry", offset=reader.offset, path=path)
    return entries


def _parse_text(text):
    return dict(dotenv_values(stream=io.StringIO(text)))


def save_checkpoint(path, params, config, optimizer_state=None):
    """Parameters, model config and (optionally) optimizer state in one file.

    ``optimizer_state`` is a mapping with ``hparams`` (dict of floats), ``t``, ``position``,
    ``m`` and ``v`` (name -> ndarray), or an object with ``to_dict()``.
    """
    frozen = ",".join(params.frozen_names())
    buffers = ",".join(name for name, p in params.items() if not p.trainable)
    text = "\n".join([f"format_version={FORMAT_VERSION}", config.to_text(),
                      f"frozen={frozen}", f"buffers={buffers}"])
    entries = {CONFIG_ENTRY: text}
    for name, p in params.items():
        entries[name] = p.value
    if optimizer_state is not None:
        state = optimizer_state.to_dict() if hasattr(optimizer_state, "to_dict") else optimizer_state
        lines = [f"{key}={value!r}" for key, value in state["hparams"].items()]
        lines.append(f"t={int(state['t'])}")
        if state.get("position") is not None:
            lines.append(f"position={int(state['position'])}")
        entries[OPTIMIZER_ENTRY] = "\n".join(lines)
        for name, moment in state["m"].items():
            entries[f"__adam__.m.{name}"] = moment
        for name, moment in state["v"].items():
            entries[f"__adam__.v.{name}"] = moment
    write_container(path, entries)
    logger.info("Saved checkpoint to %s (%d tensors)", path, len(params))


def load_checkpoint(path):
    """Inverse of ``save_checkpoint``: ``(config, params, optimizer_state or None)``."""
    entries = read_container(path)
    if CONFIG_ENTRY not in entries:
        raise FormatError("checkpoint has no __config__ entry", path=path)
    values = _parse_text(entries.pop(CONFIG_ENTRY))
    version = values.get("format_version")
    if version != str(FORMAT_VERSION):
        raise FormatError(f"unsupported checkpoint version {version!r}", path=path)
    config = ModelConfig.from_mapping(values)
    frozen = set(filter(None, (values.get("frozen") or "").split(",")))
    buffers = set(filter(None, (values.get("buffers") or "").split(",")))

    optimizer_text = entries.pop(OPTIMIZER_ENTRY, None)
    params = ParamStore()
    m, v = {}, {}
    for name, value in entries.items():
        if name.startswith(MOMENT_PREFIXES[0]):
            m[name[len(MOMENT_PREFIXES[0]):]] = value
        elif name.startswith(MOMENT_PREFIXES[1]):
            v[name[len(MOMENT_PREFIXES[1]):]] = value
        else:
            params.add(name, value, frozen=name in frozen, trainable=name not in buffers)

    optimizer_state = None
    if optimizer_text is not None:
        fields = _parse_text(optimizer_text)
        try:
            t = int(fields.pop("t"))
            position = fields.pop("position", None)
            position = None if position is None else int(position)
            hparams = {key: float(val) for key, val in fields.items()}
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"malformed optimizer block: {e}", path=path) from e
        optimizer_state = {"hparams": hparams, "t": t, "position": position, "m": m, "v": v}
    logger.info("Loaded checkpoint %s (%d tensors)", path, len(params))
    return config, params, optimizer_state
