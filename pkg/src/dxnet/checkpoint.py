"""Versioned little-endian binary checkpoints (``.dxnt``).

Layout::

    b"DXNT" | u32 version | u32 n_params | n_params entries
            | u32 n_state | n_state entries

    entry := u16 name_len | utf-8 name | u8 dtype | u8 rank | rank x u32 dim | payload

The parameter section holds exactly the learnable tensors. The state section
holds BN running statistics, the network config text, and any training state
(epoch, optimizer moments, scheduler fields).
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"DXNT"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
CODES = {np.dtype(v).newbyteorder("="): k for k, v in DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _encode_entry(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise CheckpointError(f"entry {name!r}: unsupported dtype {arr.dtype}")
    raw_name = name.encode("utf-8")
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def encode_section(entries: Dict[str, np.ndarray]) -> bytes:
    return struct.pack("<I", len(entries)) + b"".join(_encode_entry(n, a) for n, a in entries.items())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def section(self, label: str) -> Dict[str, np.ndarray]:
        (count,) = struct.unpack("<I", self.take(4, f"{label} entry count"))
        out = {}
        for idx in range(count):
            where = f"{label} entry #{idx}"
            (nlen,) = struct.unpack("<H", self.take(2, where))
            name = self.take(nlen, where).decode("utf-8")
            where = f"entry {name!r}"
            code, rank = struct.unpack("<BB", self.take(2, where))
            if code not in DTYPES:
                raise CheckpointError(f"{where}: unknown dtype code {code}")
            dims = struct.unpack(f"<{rank}I", self.take(4 * rank, where))
            dt = DTYPES[code]
            n = int(np.prod(dims, dtype=np.int64))
            payload = self.take(n * dt.itemsize, where)
            out[name] = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        return out


def write_checkpoint(path, params: Dict[str, np.ndarray], state: Dict[str, np.ndarray]) -> None:
    blob = MAGIC + struct.pack("<I", VERSION) + encode_section(params) + encode_section(state)
    Path(path).write_bytes(blob)


def read_checkpoint(path) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    r = _Reader(raw)
    r.take(4, "magic")
    (version,) = struct.unpack("<I", r.take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    params = r.section("parameter")
    state = r.section("state")
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return params, state


def scalar_counts(path) -> Tuple[int, int]:
    """(parameter scalars, state scalars) stored in a checkpoint file."""
    params, state = read_checkpoint(path)
    return sum(a.size for a in params.values()), sum(a.size for a in state.values())


# -- model-level helpers -------------------------------------------------------


def model_state(model) -> Dict[str, np.ndarray]:
    state = {"meta.config": np.frombuffer(model.config.to_text().encode(), dtype=np.uint8)}
    for name, bn in model.params.bn.items():
        state[f"{name}.running_mean"] = bn.running_mean
        state[f"{name}.running_var"] = bn.running_var
    return state


def save_checkpoint(model, path, training_state: Dict[str, np.ndarray] = None) -> None:
    params = {n: v.data for n, v in model.params.tensors.items()}
    state = model_state(model)
    for k, v in (training_state or {}).items():
        state[f"train.{k}"] = np.asarray(v)
    write_checkpoint(path, params, state)


def load_checkpoint(path, with_state: bool = False):
    """Rebuild the model stored at ``path`` (in eval mode).

    With ``with_state`` returns ``(model, training_state)``.
    """
    from dxnet.model import NetConfig, build_model

    params, state = read_checkpoint(path)
    if "meta.config" not in state:
        raise CheckpointError(f"{path}: missing network config")
    cfg = NetConfig.from_text(state["meta.config"].tobytes().decode())
    dtype = next(iter(params.values())).dtype if params else np.float32
    model = build_model(cfg, np.random.default_rng(0), dtype=dtype)
    expected = set(model.params.tensors)
    if set(params) != expected:
        missing = sorted(expected - set(params))
        extra = sorted(set(params) - expected)
        raise CheckpointError(f"{path}: parameter names do not match config (missing {missing[:3]}, extra {extra[:3]})")
    for name, arr in params.items():
        var = model.params.tensors[name]
        if var.shape != arr.shape:
            raise CheckpointError(f"{path}: entry {name!r} has shape {arr.shape}, expected {var.shape}")
        var.data = arr.copy()
    for name, bn in model.params.bn.items():
        bn.running_mean = state[f"{name}.running_mean"].copy()
        bn.running_var = state[f"{name}.running_var"].copy()
    model.eval()
    if with_state:
        train = {k[len("train.") :]: v for k, v in state.items() if k.startswith("train.")}
        return model, train
    return model
