"""Parameter containers: linear projections and depthwise kernels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import DimensionError, Tensor, resolve_dtype


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(resolve_dtype(dtype)), requires_grad=True)


@dataclass
class LinearProjection:
    weight: Tensor
    bias: Tensor | None = None

    def __post_init__(self) -> None:
        if self.weight.data.ndim != 2:
            raise DimensionError(f"projection weight must be [D_in, D_out], got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[1],):
            raise DimensionError(f"bias {self.bias.shape} inconsistent with weight {self.weight.shape}")

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, dtype=None) -> LinearProjection:
        w = uniform_init(rng, (d_in, d_out), d_in, dtype)
        b = uniform_init(rng, (d_out,), d_in, dtype) if bias else None
        return cls(w, b)

    @classmethod
    def from_arrays(cls, weight, bias=None) -> LinearProjection:
        return cls(
            Tensor(weight, requires_grad=True),
            None if bias is None else Tensor(bias, requires_grad=True),
        )

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)

    def parameters(self) -> dict[str, Tensor]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


@dataclass
class DepthwiseKernel:
    weights: Tensor

    def __post_init__(self) -> None:
        shape = self.weights.shape
        if len(shape) != 3 or shape[0] != shape[1] or shape[0] % 2 == 0:
            raise DimensionError(f"depthwise kernel must be (k, k, D) with odd k, got {shape}")

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, k: int = 3, dtype=None) -> DepthwiseKernel:
        return cls(uniform_init(rng, (k, k, channels), k * k, dtype))

    @classmethod
    def delta(cls, channels: int, k: int = 3, dtype=None) -> DepthwiseKernel:
        w = np.zeros((k, k, channels), dtype=resolve_dtype(dtype))
        w[k // 2, k // 2, :] = 1.0
        return cls(Tensor(w, requires_grad=True))

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @property
    def channels(self) -> int:
        return self.weights.shape[2]

    def __call__(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv(x, self.weights)

    def parameters(self) -> dict[str, Tensor]:
        return {"weights": self.weights}


def flatten_parameters(tree, prefix: str = "") -> dict[str, Tensor]:
    """Dotted-name view of every Tensor reachable through ``parameters()``."""
    out: dict[str, Tensor] = {}
    for name, value in tree.parameters().items():
        key = f"{prefix}{name}"
        if isinstance(value, Tensor):
            out[key] = value
        else:
            out.update(flatten_parameters(value, key + "."))
    return out
