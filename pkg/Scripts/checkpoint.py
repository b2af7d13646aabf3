"""
Model checkpoints: a self-describing, versioned binary container.

Layout (all integers little-endian):

    b"NLGPCKPT"                     magic
    u32  version                    (= 1)
    u32  header length, then UTF-8 JSON {"spec": ..., "meta": ...}
    u32  array count
    per array:  u16 name length, name bytes, u8 ndim, u64 × ndim dims
    fp64 little-endian payloads, concatenated in name-table order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, BinaryIO

import numpy as np
import torch

from Scripts.core.logging_config import get_logger
from Scripts.core.models import ModelSpec
from Scripts.diffmath import to_numpy
from Scripts.gp_models import Model, build

logger = get_logger(__name__)

MAGIC = b"NLGPCKPT"
VERSION = 1


# ============================================================================
# WRITE
# ============================================================================

def save_checkpoint(path: str | Path, model: Model, extras: dict[str, Any] | None = None) -> Path:
    """Write ``model`` and JSON-serialisable ``extras`` to ``path``.

    Returns:
        The path written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: to_numpy(t) for name, t in model.state_dict().items()}
    meta = {
        "n_data": model.n_data,
        "n_inducing": int(model.layer1.units[0].Z.shape[0]),
        "extras": extras or {},
    }
    header = json.dumps(
        {"spec": model.spec.model_dump(mode="json"), "meta": meta},
        sort_keys=True,
    ).encode("utf-8")

    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    logger.info("Checkpoint written: %s (%d arrays)", path, len(arrays))
    return path


# ============================================================================
# READ
# ============================================================================

def _read_bytes(fh: BinaryIO, size: int) -> bytes:
    buf = fh.read(size)
    if len(buf) != size:
        raise ValueError("Checkpoint file is truncated.")
    return buf


def _read(fh: BinaryIO, fmt: str) -> tuple:
    return struct.unpack(fmt, _read_bytes(fh, struct.calcsize(fmt)))


def read_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Parse a checkpoint into its JSON header and named arrays.

    Raises:
        ValueError: On a bad magic number, unsupported version or truncation.
    """
    path = Path(path)
    with path.open("rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"'{path}' is not a model checkpoint.")
        version, header_len = _read(fh, "<II")
        if version != VERSION:
            raise ValueError(f"Unsupported checkpoint version {version} (expected {VERSION}).")
        header = json.loads(_read_bytes(fh, header_len).decode("utf-8"))
        (count,) = _read(fh, "<I")
        table: list[tuple[str, tuple[int, ...]]] = []
        for _ in range(count):
            (name_len,) = _read(fh, "<H")
            name = _read_bytes(fh, name_len).decode("utf-8")
            (ndim,) = _read(fh, "<B")
            shape = _read(fh, f"<{ndim}Q") if ndim else ()
            table.append((name, tuple(int(s) for s in shape)))
        arrays: dict[str, np.ndarray] = {}
        for name, shape in table:
            n = int(np.prod(shape)) if shape else 1
            buf = _read_bytes(fh, 8 * n)
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
    return header, arrays


def load_checkpoint(path: str | Path) -> tuple[Model, dict[str, Any]]:
    """Rebuild a model from a checkpoint.

    Returns:
        ``(model, extras)`` where extras is the dict passed to
        :func:`save_checkpoint`.
    """
    header, arrays = read_checkpoint(path)
    spec = ModelSpec.model_validate(header["spec"])
    meta = header["meta"]
    n_data, n_ind = int(meta["n_data"]), int(meta["n_inducing"])

    # Any data of the right shape works: every tensor is overwritten below.
    skeleton_spec = spec.model_copy(update={"n_inducing": n_ind})
    rng = np.random.default_rng(0)
    n_rows = max(n_data, n_ind)
    X = None if spec.latent_inputs else rng.standard_normal((n_rows, int(spec.d_x)))
    Y = rng.standard_normal((n_data, int(spec.d_y))) if spec.latent_inputs else None
    model = build(skeleton_spec, X, Y, seed=0)
    model.spec = spec
    model.n_data = n_data

    state = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
    model.load_state_dict(state, strict=True)
    logger.info("Checkpoint loaded: %s (%s)", path, spec.variant.value)
    return model, meta.get("extras", {})
