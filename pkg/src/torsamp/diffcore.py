"""Parameter store, reverse-mode gradients, Adam, and checkpoint files.

Gradients come from torch autograd over float64 CPU tensors; every composite
the trainers build (add, mul, matmul, reductions, trig, exp/log, square,
sqrt, softmax, GELU, cross/dot products, norms, gather/scatter) is covered
by reverse accumulation and is checked against finite differences in the
test suite. GELU is pinned to the tanh approximation so goldens are stable.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

CHECKPOINT_MAGIC = b"TSCKPT01"


class GradientError(RuntimeError):
    pass


def set_threads(n: int) -> None:
    """Cap intra-op parallelism; n=1 guarantees bit-reproducible runs."""
    torch.set_num_threads(max(1, int(n)))


def gelu(x: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.gelu(x, approximate="tanh")


class ParamStore:
    """Named float64 parameter tensors with gradients and Adam moments."""

    def __init__(self):
        self.params: dict[str, torch.Tensor] = {}
        self._m: dict[str, torch.Tensor] = {}
        self._v: dict[str, torch.Tensor] = {}
        self.step_count = 0

    def register(self, name: str, value: np.ndarray) -> torch.Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        t = torch.as_tensor(np.asarray(value, dtype=np.float64)).clone()
        t.requires_grad_(True)
        self.params[name] = t
        self._m[name] = torch.zeros_like(t)
        self._v[name] = torch.zeros_like(t)
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def names(self) -> list:
        return sorted(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def load_values(self, arrays: dict, strict: bool = True) -> None:
        """Overwrite parameter values in place from numpy arrays."""
        for name, arr in arrays.items():
            if name not in self.params:
                if strict:
                    raise KeyError(f"unknown parameter {name!r}")
                continue
            t = self.params[name]
            if tuple(t.shape) != tuple(np.shape(arr)):
                raise ValueError(f"shape mismatch for {name!r}")
            with torch.no_grad():
                t.copy_(torch.as_tensor(np.asarray(arr, dtype=np.float64)))

    def to_arrays(self) -> dict:
        return {k: v.detach().numpy().copy() for k, v in self.params.items()}

    def gradient_arrays(self) -> dict:
        return {
            k: (np.zeros(v.shape) if v.grad is None else v.grad.numpy().copy())
            for k, v in self.params.items()
        }


def backward(loss: torch.Tensor, stores) -> None:
    """Reverse-accumulate d(loss)/d(param) into .grad for every store.

    Raises on non-scalar losses, a non-finite loss value, or any non-finite
    adjoint, naming the first offending parameter.
    """
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise GradientError("loss must be a scalar node")
    if not torch.isfinite(loss):
        raise GradientError(f"non-finite loss value {float(loss)!r}")
    loss.backward()
    if isinstance(stores, ParamStore):
        stores = [stores]
    for store in stores:
        for name, t in store.params.items():
            if t.grad is not None and not torch.all(torch.isfinite(t.grad)):
                raise GradientError(f"non-finite gradient in parameter {name!r}")


def adam_step(
    store: ParamStore,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected adaptive-moment update over all registered parameters."""
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    with torch.no_grad():
        for name, p in store.params.items():
            g = p.grad
            if g is None:
                g = torch.zeros_like(p)
            m = store._m[name]
            v = store._v[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(eps), value=-lr)


def save_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    """Versioned binary dump: magic, JSON header with shapes, raw LE float64."""
    names = sorted(arrays)
    tensors = []
    blobs = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f8"))
        blob = arr.tobytes()
        tensors.append(
            {"name": name, "shape": list(arr.shape), "dtype": "float64",
             "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"version": 1, "tensors": tensors, "meta": meta or {}}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (arrays, meta), exact at 64-bit."""
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    if header.get("version") != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    base = pos + hlen
    arrays = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        buf = raw[start : start + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(entry["shape"]).copy()
    return arrays, header["meta"]
