"""Binary checkpoints for ensemble training state.

Layout (little-endian)::

    b"UBPL" | u32 version | u32 meta_len | meta (UTF-8 JSON) | u32 record_count
    record := u32 name_len | name | u8 dtype (0 = f64, 1 = i64) | u32 ndim | u32 dims... | raw values

The JSON header carries model specs, optimizer settings, step counters and
loss weights. Tensor records carry parameters, optimizer slots and EMA
buffers. Loading rebuilds the models from the header and checks every record
against the rebuilt shapes.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .ensemble import EnsembleState
from .models import ModelSpec, build_model
from .ssl import BranchState, make_optimizer

__all__ = ["MAGIC", "VERSION", "CheckpointError", "CheckpointVersionError", "CheckpointShapeError",
           "save_checkpoint", "load_checkpoint", "read_records"]

MAGIC = b"UBPL"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    def __init__(self, name: str, expected, found):
        super().__init__(f"tensor {name!r}: expected shape {tuple(expected)}, found {tuple(found)}")
        self.name = name
        self.expected = tuple(expected)
        self.found = tuple(found)


def _spec_dict(spec: ModelSpec) -> dict:
    return {"task": spec.task, "input_shape": list(spec.input_shape), "num_outputs": spec.num_outputs,
            "widths": list(spec.widths), "kernel": spec.kernel, "pool": spec.pool, "seed": spec.seed}


def _collect(state: EnsembleState) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    meta = {
        "ensemble": {k: getattr(state, k) for k in ("lambda_ssl", "lambda_pse", "lambda_fd", "beta_fd", "tau",
                                                    "ema_decay", "require_tau", "allow_shared_seed")},
        "branches": [],
    }
    records: list[tuple[str, np.ndarray]] = []
    for b, br in enumerate(state.branches):
        opt = br.optimizer
        meta["branches"].append({"spec": _spec_dict(br.model.spec), "method": br.method, "step": br.step,
                                 "optimizer": opt.config(), "optimizer_t": opt.t})
        for name, arr in br.model.state_arrays().items():
            records.append((f"b{b}/param/{name}", arr))
        if br.teacher is not None:
            for name in br.model.params:
                records.append((f"b{b}/teacher/{name}", br.teacher[name]))
        for slot, values in opt.slots().items():
            for name in br.model.params:
                if name in values:
                    records.append((f"b{b}/optim/{slot}/{name}", values[name]))
    return meta, records


def save_checkpoint(state: EnsembleState, path) -> None:
    meta, records = _collect(state)
    buf = io.BytesIO()
    buf.write(MAGIC)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<II", VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        arr = np.asarray(arr)
        tag = 1 if np.issubdtype(arr.dtype, np.integer) else 0
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag])
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BI", tag, raw.ndim))
        buf.write(struct.pack(f"<{raw.ndim}I", *raw.shape))
        buf.write(raw.tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_records(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse the header and every tensor record without rebuilding models."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointVersionError("not a UBPL checkpoint (bad magic)")
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    records = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        tag, ndim = r.unpack("<BI")
        if tag not in _DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}I")
        dtype = _DTYPES[tag]
        size = int(np.prod(shape)) if ndim else 1
        records[name] = np.frombuffer(r.take(size * dtype.itemsize), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if r.pos != len(r.raw):
        raise CheckpointError("trailing bytes after last record")
    return meta, records


def _take(records: dict, name: str, expected_shape) -> np.ndarray:
    if name not in records:
        raise CheckpointError(f"missing tensor {name!r}")
    arr = records.pop(name)
    if arr.shape != tuple(expected_shape):
        raise CheckpointShapeError(name, expected_shape, arr.shape)
    return arr.copy()


def load_checkpoint(path) -> EnsembleState:
    meta, records = read_records(path)
    branches = []
    for b, info in enumerate(meta["branches"]):
        spec = ModelSpec(**info["spec"])
        model = build_model(spec)
        for name, p in model.params.items():
            p.data = _take(records, f"b{b}/param/{name}", p.shape)
        optimizer = make_optimizer(info["optimizer"])
        optimizer.t = info["optimizer_t"]
        for slot, values in optimizer.slots().items():
            for name, p in model.params.items():
                key = f"b{b}/optim/{slot}/{name}"
                if key in records:
                    values[name] = _take(records, key, p.shape)
        teacher = None
        if info["method"] == "mean_teacher":
            teacher = {name: _take(records, f"b{b}/teacher/{name}", p.shape) for name, p in model.params.items()}
        branches.append(BranchState(model, optimizer, info["method"], teacher, info["step"]))
    if records:
        raise CheckpointError(f"unexpected tensors in checkpoint: {sorted(records)}")
    return EnsembleState(branches, **meta["ensemble"])
