"""Named parameter store and its serialization formats.

Single tensor file: magic "TABV1", then u8 rank, then rank u32 dims, then
the little-endian float32 payload in C order. A checkpoint is a zip archive
holding one such entry per parameter (entry name = parameter name + ".tab"),
so individual tensors stay independently parseable and partial loading is
just name/shape matching.
"""
from __future__ import annotations

import struct
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..errors import FormatError, ShapeError

__all__ = [
    "MAGIC",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "save_tensor",
    "load_tensor",
    "ParamStore",
    "LoadReport",
    "load_partial_checkpoint",
]

MAGIC = b"TABV1"
_MAX_RANK = 8


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    # np.ascontiguousarray would promote 0-d to 1-d, so take the shape first
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim > _MAX_RANK:
        raise FormatError(f"rank {arr.ndim} exceeds format limit {_MAX_RANK}")
    head = MAGIC + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + np.ascontiguousarray(arr).astype("<f4").tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < len(MAGIC) + 1:
        raise FormatError("tensor buffer shorter than header")
    if buf[: len(MAGIC)] != MAGIC:
        raise FormatError(f"bad magic {buf[:len(MAGIC)]!r}, expected {MAGIC!r}")
    rank = buf[len(MAGIC)]
    if rank > _MAX_RANK:
        raise FormatError(f"rank {rank} exceeds format limit {_MAX_RANK}")
    off = len(MAGIC) + 1
    need = off + 4 * rank
    if len(buf) < need:
        raise FormatError("tensor buffer truncated in dims")
    dims = struct.unpack(f"<{rank}I", buf[off:need]) if rank else ()
    count = int(np.prod(dims)) if rank else 1
    payload = buf[need:]
    if len(payload) != 4 * count:
        raise FormatError(
            f"payload holds {len(payload) // 4} floats, dims {dims} need {count}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


class ParamStore:
    """Ordered name -> float32 array map with matching gradient slots."""

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def set(self, name: str, value: np.ndarray) -> None:
        arr = np.asarray(value, dtype=np.float32)
        if name in self._params and self._params[name].shape != arr.shape:
            raise ShapeError(
                f"{name}: shape {arr.shape} != existing {self._params[name].shape}"
            )
        self._params[name] = arr.copy()
        self._grads.setdefault(name, np.zeros_like(arr))
        if self._grads[name].shape != arr.shape:
            self._grads[name] = np.zeros_like(arr)

    def get(self, name: str) -> np.ndarray:
        if name not in self._params:
            raise KeyError(name)
        return self._params[name]

    def grad(self, name: str) -> np.ndarray:
        if name not in self._grads:
            raise KeyError(name)
        return self._grads[name]

    def set_grad(self, name: str, value: np.ndarray) -> None:
        arr = np.asarray(value, dtype=np.float32)
        if self._params[name].shape != arr.shape:
            raise ShapeError(
                f"{name}: gradient shape {arr.shape} != parameter {self._params[name].shape}"
            )
        self._grads[name] = arr.copy()

    @classmethod
    def from_named_tensors(cls, named) -> "ParamStore":
        """Build from an iterable of (name, tensor-or-array)."""
        store = cls()
        for name, t in named:
            if torch.is_tensor(t):
                t = t.detach().cpu().numpy()
            store.set(name, t)
        return store

    @classmethod
    def from_module(cls, module: torch.nn.Module, rename=None) -> "ParamStore":
        rename = rename or (lambda n: n)
        return cls.from_named_tensors(
            (rename(n), p) for n, p in module.named_parameters())

    def assign_to_module(self, module: torch.nn.Module, rename=None) -> list[str]:
        """Copy matching-name, matching-shape entries into a module's
        parameters; returns the names actually assigned."""
        rename = rename or (lambda n: n)
        assigned = []
        with torch.no_grad():
            for n, p in module.named_parameters():
                key = rename(n)
                if key in self._params and self._params[key].shape == tuple(p.shape):
                    p.copy_(torch.from_numpy(self._params[key]).to(p.dtype))
                    assigned.append(key)
        return assigned

    def save(self, path) -> None:
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            for name, arr in self._params.items():
                zf.writestr(name + ".tab", tensor_to_bytes(arr))

    @classmethod
    def load(cls, path) -> "ParamStore":
        store = cls()
        try:
            with zipfile.ZipFile(path) as zf:
                for info in zf.infolist():
                    if not info.filename.endswith(".tab"):
                        raise FormatError(f"unexpected checkpoint entry {info.filename!r}")
                    store.set(info.filename[:-4], tensor_from_bytes(zf.read(info)))
        except zipfile.BadZipFile as exc:
            raise FormatError(f"{path}: not a checkpoint archive ({exc})") from exc
        return store


@dataclass
class LoadReport:
    loaded: list = field(default_factory=list)
    skipped: list = field(default_factory=list)  # (name, reason)

    def summary(self) -> str:
        lines = [f"loaded {len(self.loaded)} tensors, skipped {len(self.skipped)}"]
        lines.extend(f"  skipped {n}: {r}" for n, r in self.skipped)
        return "\n".join(lines)


def load_partial_checkpoint(store: ParamStore, checkpoint_path) -> LoadReport:
    """Overwrite store entries whose name AND shape match the checkpoint;
    report everything else as skipped with the reason."""
    try:
        ckpt = ParamStore.load(checkpoint_path)
    except FileNotFoundError:
        raise
    report = LoadReport()
    for name in store.names():
        if name not in ckpt:
            report.skipped.append((name, "missing from checkpoint"))
            continue
        src = ckpt.get(name)
        dst = store.get(name)
        if src.shape != dst.shape:
            report.skipped.append(
                (name, f"shape mismatch: checkpoint {src.shape} vs store {dst.shape}"))
            continue
        store.set(name, src)
        report.loaded.append(name)
    return report
