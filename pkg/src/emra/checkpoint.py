"""Binary checkpoints.

Layout (all integers little-endian)::

    "EMRA"                     magic
    u32                        version (1)
    u64 + bytes                config text, UTF-8 ``key = value`` lines
    records, each:
        u16 + bytes            name
        u8                     rank
        u64 * rank             extents
        f32 * prod(extents)    values
    u64                        CRC-64/XZ of everything before it

Records hold the model parameters in declaration order, followed by
optimizer velocity buffers named ``velocity.<param>`` when momentum is on.
The config text carries the model and training configuration and the
training state (``state.epoch``, ``state.step``, ``state.seed``).
"""
import dataclasses
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .encoder import EncoderConfig
from .errors import (CheckpointChecksumError, CheckpointError, CheckpointMagicError,
                     CheckpointShapeError, CheckpointTruncatedError, CheckpointVersionError,
                     ConfigError)
from .model import ModelConfig, param_shapes
from .train import TrainConfig, TrainState

MAGIC = b"EMRA"
VERSION = 1
VELOCITY = "velocity."


@dataclass
class Checkpoint:
    model: ModelConfig
    params: dict                # name -> float32 array
    train: TrainConfig
    state: TrainState


# -- config text -------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def config_text(model, train, state):
    lines = [f"model.variant = {model.variant}",
             f"model.refine_steps = {model.refine_steps}",
             f"model.logit_scale = {model.logit_scale}"]
    for f in dataclasses.fields(EncoderConfig):
        lines.append(f"encoder.{f.name} = {_fmt(getattr(model.encoder, f.name))}")
    for f in dataclasses.fields(TrainConfig):
        lines.append(f"train.{f.name} = {_fmt(getattr(train, f.name))}")
    lines += [f"state.epoch = {state.epoch}", f"state.step = {state.step}", f"state.seed = {state.seed}"]
    return "\n".join(lines) + "\n"


def _typed(fields, values, prefix):
    out = {}
    for f in fields:
        key = f"{prefix}.{f.name}"
        if key not in values:
            raise CheckpointError(f"config is missing {key}")
        raw = values.pop(key)
        kind = f.type if isinstance(f.type, type) else type(f.default)
        try:
            if kind is tuple:
                out[f.name] = tuple(int(x) for x in raw.split(","))
            elif kind is float:
                out[f.name] = float(raw)
            elif kind is int:
                out[f.name] = int(raw)
            else:
                out[f.name] = raw
        except ValueError:
            raise CheckpointError(f"bad value {raw!r} for {key}") from None
    return out


def parse_config_text(text):
    values = {}
    for line in text.splitlines():
        if line.strip():
            key, sep, value = line.partition(" = ")
            if not sep:
                raise CheckpointError(f"malformed config line {line!r}")
            values[key] = value
    try:
        enc = EncoderConfig(**_typed(dataclasses.fields(EncoderConfig), values, "encoder"))
        model = ModelConfig(enc, **_typed(
            [f for f in dataclasses.fields(ModelConfig) if f.name != "encoder"], values, "model"))
        train = TrainConfig(**_typed(dataclasses.fields(TrainConfig), values, "train"))
        st = _typed([f for f in dataclasses.fields(TrainState) if f.name != "velocity"], values, "state")
    except ConfigError as exc:
        raise CheckpointError(f"invalid configuration: {exc}") from None
    if values:
        raise CheckpointError(f"unknown config keys {sorted(values)[:3]}")
    return model, train, TrainState(**st)


# -- bytes -------------------------------------------------------------

def _record(name, arr):
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def dumps(model, params, train, state):
    text = config_text(model, train, state).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(text)), text]
    for name in param_shapes(model):
        parts.append(_record(name, params[name]))
    for name in param_shapes(model):
        if name in state.velocity:
            parts.append(_record(VELOCITY + name, state.velocity[name]))
    body = b"".join(parts)
    return body + struct.pack("<Q", kernels.crc64(body))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"file ends inside {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(data):
    """Parse checkpoint bytes; integrity and shape problems raise distinct errors."""
    data = bytes(data)
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointMagicError(f"not a checkpoint: magic {data[:4]!r}", 0)
    r.pos = 4
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}", 4)
    if len(data) < 8 + 8 + 8:
        raise CheckpointTruncatedError("file too short for a checkpoint", len(data))
    (stored,) = struct.unpack("<Q", data[-8:])
    if kernels.crc64(data[:-8]) != stored:
        # a bad CRC on a short file most likely means truncation
        _scan_records(_Reader(data[:-8]), strict=False)
        raise CheckpointChecksumError("checksum mismatch", len(data) - 8)
    r = _Reader(data[:-8])
    r.pos = 8
    model, train, state, records = _scan_records(r, strict=True)
    shapes = param_shapes(model)
    params = {}
    for name, shape in shapes.items():
        if name not in records:
            raise CheckpointShapeError(f"parameter {name} missing from checkpoint")
        arr = records.pop(name)
        if arr.shape != tuple(shape):
            raise CheckpointShapeError(f"parameter {name} has shape {arr.shape}, config needs {tuple(shape)}")
        params[name] = arr
    for name in list(records):
        base = name[len(VELOCITY):] if name.startswith(VELOCITY) else None
        if base not in shapes:
            raise CheckpointShapeError(f"unexpected record {name}")
        arr = records.pop(name)
        if arr.shape != tuple(shapes[base]):
            raise CheckpointShapeError(f"record {name} has shape {arr.shape}, expected {tuple(shapes[base])}")
        state.velocity[base] = arr
    return Checkpoint(model, params, train, state)


def _scan_records(r, strict):
    r.pos = 8
    (n,) = r.unpack("<Q", "config length")
    raw = r.take(n, "config text")
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("config text is not UTF-8", 16) from None
    model, train, state = parse_config_text(text) if strict else (None, None, None)
    records = {}
    while r.pos < len(r.data):
        start = r.pos
        (ln,) = r.unpack("<H", "record name length")
        name = r.take(ln, "record name").decode("utf-8", errors="replace")
        (rank,) = r.unpack("<B", "record rank")
        shape = r.unpack(f"<{rank}Q", "record extents")
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = r.take(4 * count, f"values of {name}")
        if strict:
            if name in records:
                raise CheckpointError(f"duplicate record {name}", start)
            records[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return model, train, state, records


def save_checkpoint(path, model, params, train, state):
    data = dumps(model, params, train, state)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return data


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
