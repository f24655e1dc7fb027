"""Checkpoint files.

A checkpoint is a zip of ``.npy`` members (loadable with ``np.load``): the
five parameter blocks, the Adam moments, and a JSON ``meta`` member holding
shapes, counters, the config echo and the code version. Zip entries carry a
fixed timestamp so identical state gives identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .policy import BLOCKS, PolicyParams

_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: PolicyParams
    adam_m: PolicyParams | None
    adam_v: PolicyParams | None
    adam_t: int
    step: int  # batch counter g of the next step
    stage_step: int
    task_index: int  # next unused task coordinate (the run's RNG position)
    mode: str
    seed: int
    config: dict[str, Any]

    def state_digest(self) -> str:
        """sha256 over arrays and counters; independent of the config echo."""
        h = hashlib.sha256()
        for prefix, p in (("p", self.params), ("m", self.adam_m), ("v", self.adam_v)):
            if p is None:
                continue
            for name, arr in p.blocks():
                h.update(f"{prefix}.{name}{arr.shape}".encode())
                h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        h.update(json.dumps([self.adam_t, self.step, self.stage_step, self.task_index, self.mode, self.seed]).encode())
        return h.hexdigest()


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save(path: str | Path, ck: Checkpoint) -> str:
    """Write ``ck`` to ``path``; returns its state digest."""
    meta = {
        "version": __version__,
        "shapes": {k: list(v) for k, v in ck.params.shapes().items()},
        "context": ck.params.context,
        "adam_t": ck.adam_t,
        "step": ck.step,
        "stage_step": ck.stage_step,
        "task_index": ck.task_index,
        "mode": ck.mode,
        "seed": ck.seed,
        "config": ck.config,
        "digest": ck.state_digest(),
    }
    members = {"meta": _npy_bytes(np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8))}
    for name, arr in ck.params.blocks():
        members[name] = _npy_bytes(arr)
    if ck.adam_m is not None and ck.adam_v is not None:
        for name, arr in ck.adam_m.blocks():
            members["m_" + name] = _npy_bytes(arr)
        for name, arr in ck.adam_v.blocks():
            members["v_" + name] = _npy_bytes(arr)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        for name, data in members.items():
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=_EPOCH), data)
    tmp.replace(path)
    return meta["digest"]


def _params_from(arrays: dict[str, np.ndarray], prefix: str, context: int) -> PolicyParams:
    return PolicyParams(*(arrays[prefix + b] for b in BLOCKS), context=context)


def load(path: str | Path, expect_shapes: dict[str, tuple[int, ...]] | None = None) -> Checkpoint:
    """Read a checkpoint; raises CheckpointError on a missing member or a shape mismatch."""
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if "meta" not in arrays:
        raise CheckpointError(f"{path}: missing meta record")
    meta = json.loads(arrays["meta"].tobytes().decode())
    for b in BLOCKS:
        if b not in arrays:
            raise CheckpointError(f"{path}: missing parameter block {b}")
        declared = tuple(meta["shapes"][b])
        if arrays[b].shape != declared:
            raise CheckpointError(f"{path}: block {b} has shape {arrays[b].shape}, header says {declared}")
        if expect_shapes is not None and declared != tuple(expect_shapes[b]):
            raise CheckpointError(
                f"{path}: block {b} has shape {declared} but the config expects {tuple(expect_shapes[b])}"
            )
    ctx = int(meta["context"])
    has_adam = all("m_" + b in arrays and "v_" + b in arrays for b in BLOCKS)
    try:
        params = _params_from(arrays, "", ctx)
        adam_m = _params_from(arrays, "m_", ctx) if has_adam else None
        adam_v = _params_from(arrays, "v_", ctx) if has_adam else None
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    ck = Checkpoint(
        params=params,
        adam_m=adam_m,
        adam_v=adam_v,
        adam_t=int(meta["adam_t"]),
        step=int(meta["step"]),
        stage_step=int(meta["stage_step"]),
        task_index=int(meta["task_index"]),
        mode=str(meta["mode"]),
        seed=int(meta["seed"]),
        config=dict(meta["config"]),
    )
    if ck.state_digest() != meta.get("digest"):
        raise CheckpointError(f"{path}: contents do not match the stored digest")
    return ck


def expected_shapes(vocab_size: int, embed_dim: int, context: int, hidden_dim: int) -> dict[str, tuple[int, ...]]:
    return {
        "E": (vocab_size, embed_dim),
        "W1": (context * embed_dim, hidden_dim),
        "b1": (hidden_dim,),
        "W2": (hidden_dim, vocab_size),
        "b2": (vocab_size,),
    }
