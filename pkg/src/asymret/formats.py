"""Binary checkpoints, metrics CSV files and atomic file writes.

Checkpoint layout (all integers little-endian)::

    b"HLMC" | u32 version | u32 n | n bytes UTF-8 JSON metadata
    then per tensor: u32 name_len | name | u8 dtype code | u8 rank
                     | rank x u32 extents | row-major float32 payload

The metadata holds the encoder config and the tensor count; anything after
the last tensor is an error.
"""

from __future__ import annotations

import contextlib
import csv
import io
import json
import os
import struct
import tempfile
from typing import Iterable, Mapping, Sequence

import numpy as np

from .encoder import ConfigError, Encoder, EncoderConfig

MAGIC = b"HLMC"
VERSION = 1
DTYPE_F32 = 1

TRAIN_COLUMNS = ("step", "lr", "loss")
PHASE_COLUMNS = ("phase", "steps", "final_loss", "p_at_k")


class FormatError(ValueError):
    """A file does not follow the expected binary or text format."""


@contextlib.contextmanager
def atomic_write(path: str | os.PathLike, mode: str = "wb"):
    """Write to a temporary sibling and rename over ``path`` on success."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
    try:
        kwargs = {"newline": ""} if "b" not in mode else {}
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


# ------------------------------------------------------------------ checkpoints


def encode_checkpoint(encoder: Encoder, extra: Mapping | None = None) -> bytes:
    encoder.check_shapes()
    names = list(encoder.config.param_shapes())
    meta = {"config": encoder.config.to_dict(), "n_tensors": len(names)}
    if extra:
        meta["extra"] = dict(extra)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    for name in names:
        arr = np.ascontiguousarray(encoder.params[name], dtype="<f4")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode_checkpoint(data: bytes) -> tuple[Encoder, dict]:
    """Inverse of :func:`encode_checkpoint`; returns the encoder and its extra metadata."""
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic: not an encoder checkpoint")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(r.u32("metadata length"), "metadata").decode("utf-8"))
        config = EncoderConfig.from_dict(meta["config"])
        n = int(meta["n_tensors"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError, ConfigError) as e:
        raise FormatError(f"unreadable checkpoint metadata: {e}") from e
    shapes = config.param_shapes()
    if n != len(shapes):
        raise FormatError(f"checkpoint lists {n} tensors, config implies {len(shapes)}")
    params = {}
    for _ in range(n):
        name = r.take(r.u32("name length"), "name").decode("utf-8", errors="replace")
        code, rank = struct.unpack("<BB", r.take(2, "dtype/rank"))
        if code != DTYPE_F32:
            raise FormatError(f"tensor {name!r}: unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, "extents"))
        if shapes.get(name) != tuple(shape) or name in params:
            raise FormatError(f"tensor {name!r} with shape {shape} does not fit the stored config")
        count = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(4 * count, f"payload of {name}"), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after the last tensor")
    return Encoder(config, params), meta.get("extra", {})


def save_checkpoint(path, encoder: Encoder, extra: Mapping | None = None) -> None:
    blob = encode_checkpoint(encoder, extra)
    with atomic_write(path) as fh:
        fh.write(blob)


def load_checkpoint(path) -> Encoder:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())[0]


# ------------------------------------------------------------------ metrics


def fmt_number(x) -> str:
    """Locale-independent text for a metric value (empty for missing)."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with atomic_write(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt_number(v) for v in row])


def train_rows(losses: Sequence[float], lrs: Sequence[float]) -> list[tuple]:
    return [(i + 1, lr, loss) for i, (lr, loss) in enumerate(zip(lrs, losses))]


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    return rows[0], rows[1:]
