"""Network layers, the Adam optimizer, and binary checkpoint serialization.

Layers hold their parameters as :class:`~trisim.autodiff.Tensor` objects and
expose them through ``params()`` as a flat ``name -> Tensor`` mapping, which
is what :class:`ParamStore` and the checkpoint writer operate on.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .autodiff import (
    ContractError,
    Tensor,
    conv2d,
    conv_transpose2d,
)

__all__ = [
    "Module",
    "Linear",
    "Conv2d",
    "ConvTranspose2d",
    "InstanceNorm2d",
    "LeakyReLU",
    "Tanh",
    "Sequential",
    "ParamStore",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
    "instance_norm",
]


def instance_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) plane of x (N,C,H,W) to zero mean, unit
    variance, then apply the per-channel affine transform."""
    mu = x.mean(axis=(2, 3), keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    xn = xc / (var + eps).sqrt()
    c = gain.shape[0]
    return xn * gain.reshape(1, c, 1, 1) + bias.reshape(1, c, 1, 1)


class Module:
    """Minimal layer base: children discovered by attribute scan."""

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.params(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.params(f"{key}.{i}."))
        return out

    def load_state(self, state: dict[str, np.ndarray], prefix: str = ""):
        own = self.params(prefix)
        for name, tensor in own.items():
            if name not in state:
                raise ContractError(f"checkpoint is missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != tensor.shape:
                raise ContractError(
                    f"checkpoint parameter {name!r} has shape {arr.shape}, "
                    f"expected {tensor.shape}"
                )
            tensor.data = arr
        return self


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        scale = np.sqrt(2.0 / n_in)
        self.w = Tensor(rng.normal(0.0, scale, (n_in, n_out)), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
    ):
        scale = np.sqrt(2.0 / (c_in * kernel * kernel))
        self.w = Tensor(
            rng.normal(0.0, scale, (c_out, c_in, kernel, kernel)), requires_grad=True
        )
        self.b = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
    ):
        scale = np.sqrt(2.0 / (c_in * kernel * kernel))
        self.w = Tensor(
            rng.normal(0.0, scale, (c_in, c_out, kernel, kernel)), requires_grad=True
        )
        self.b = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.w, self.b, self.stride, self.padding)


class InstanceNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return instance_norm(x, self.gain, self.bias, self.eps)


class LeakyReLU(Module):
    def __init__(self, slope: float = 0.2):
        self.slope = slope

    def __call__(self, x: Tensor) -> Tensor:
        return x.leaky_relu(self.slope)


class Tanh(Module):
    def __call__(self, x: Tensor) -> Tensor:
        return x.tanh()


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class ParamStore:
    """Named parameter tensors plus per-parameter Adam moment buffers."""

    def __init__(self, params: dict[str, Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0
        if params:
            for name, tensor in params.items():
                self.register(name, tensor)

    def register(self, name: str, tensor: Tensor):
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        self._params[name] = tensor
        self._m[name] = np.zeros_like(tensor.data)
        self._v[name] = np.zeros_like(tensor.data)

    def names(self):
        return list(self._params)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}


def adam_step(
    params: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One bias-corrected Adam update over every parameter in the store."""
    for name, t in params.items():
        if t.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    params.step_count += 1
    t_step = params.step_count
    c1 = 1.0 - beta1**t_step
    c2 = 1.0 - beta2**t_step
    for name, p in params.items():
        g = p.grad
        m = params._m[name]
        v = params._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---- checkpoint format -------------------------------------------------------
#
# magic "CUTB", u32 version (=1), u32 tensor count, then per tensor:
#   u32 name length, name bytes (utf-8), u32 rank, u32 x rank dims,
#   payload float32 little-endian.

_MAGIC = b"CUTB"
_VERSION = 1


def save_checkpoint(path: str, tensors: dict[str, Tensor | np.ndarray]):
    """Write tensors to `path` atomically (temp file + rename)."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(tensors)))
        for name, value in tensors.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    """Read a checkpoint back as float64 arrays."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ContractError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            n_items = int(np.prod(dims)) if rank else 1
            payload = np.frombuffer(fh.read(4 * n_items), dtype="<f4")
            out[name] = payload.astype(np.float64).reshape(dims)
    return out
