"""Parameter containers and the on-disk checkpoint format.

A checkpoint is a directory holding ``manifest.json`` (parameter names,
shapes, byte offsets and free-form metadata) and ``params.bin`` (little-endian
float32 values concatenated in manifest order).
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

MANIFEST = "manifest.json"
BLOB = "params.bin"


class Module:
    """Attribute-discovered parameter tree with dotted names."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        seen = set()
        for key, value in vars(self).items():
            for name, p in _walk(value, prefix + key):
                if id(p) not in seen:
                    seen.add(id(p))
                    yield name, p

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype).copy()


def _walk(value, name: str):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


class Linear(Module):
    """y = x Wᵀ + b with W of shape [out, in]."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, zero: bool = False, gain: float = 1.0):
        dtype = T.get_default_dtype()
        if zero:
            w = np.zeros((out_features, in_features), dtype=dtype)
        else:
            bound = gain * math.sqrt(6.0 / in_features)
            w = rng.uniform(-bound, bound, size=(out_features, in_features)).astype(dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class MLP(Module):
    """Stack of Linear layers with ReLU between them (none after the last unless ``final_relu``)."""

    def __init__(self, widths, rng: np.random.Generator, zero_last: bool = False, final_relu: bool = False, last_gain: float = 1.0):
        n = len(widths) - 1
        self.layers = [
            Linear(widths[i], widths[i + 1], rng, zero=zero_last and i == n - 1, gain=last_gain if i == n - 1 else 1.0)
            for i in range(n)
        ]
        self.final_relu = final_relu

    def named_parameters(self, prefix: str = ""):
        # layers are addressed by position directly: "<mlp>.1.weight"
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}{i}.")

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_relu:
                x = T.relu(x)
        return x


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 1, kernel: int = 3):
        dtype = T.get_default_dtype()
        bound = math.sqrt(6.0 / (kernel * kernel * c_in))
        self.weight = Tensor(rng.uniform(-bound, bound, size=(kernel, kernel, c_in, c_out)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = kernel // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


# ------------------------------------------------------------------ checkpoint
def save_checkpoint(path, params: Dict[str, np.ndarray], meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, value in params.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format": "tsdhead-checkpoint-v1", "dtype": "float32-le", "meta": meta or {}, "params": entries}
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    blob = (path / BLOB).read_bytes()
    params = {}
    for entry in manifest["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        params[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return params, manifest.get("meta", {})
