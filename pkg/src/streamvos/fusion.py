"""Fusion operators between a target token map and a memory context.

* cross-attention: interact first (query/key), aggregate the projected values.
* focal modulation: aggregate the context first through stacked depthwise convs
  and learned gates, then interact elementwise with the queries.
* modulated cross-attention: the attention matrix of cross-attention applied
  to the focally aggregated, projected context instead of plain values.

A context may hold several same-sized grids stacked along the token axis
(e.g. every slot of a memory bank); convolutions never mix grids.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops, serialize
from .layers import DepthwiseKernel, LinearProjection, flatten_parameters
from .tensor import DimensionError, Tensor

DEFAULT_FOCAL_LEVELS = 2


@dataclass
class TokenMap:
    """Tokens [T x D] over one or more stacked (H, W) grids, row-major per grid."""

    tokens: Tensor
    grid: tuple[int, int] | None

    def __post_init__(self) -> None:
        if self.tokens.data.ndim != 2:
            raise DimensionError(f"tokens must be [T, D], got {self.tokens.shape}")
        if self.grid is not None:
            h, w = self.grid
            if h <= 0 or w <= 0 or self.tokens.shape[0] % (h * w):
                raise DimensionError(f"{self.tokens.shape[0]} tokens do not tile grid {self.grid}")

    @classmethod
    def from_grid(cls, x: Tensor) -> TokenMap:
        """Build from an (H, W, D) or (S, H, W, D) feature map."""
        if x.data.ndim == 3:
            h, w, d = x.shape
        elif x.data.ndim == 4:
            _, h, w, d = x.shape
        else:
            raise DimensionError(f"expected (H, W, D) or (S, H, W, D), got {x.shape}")
        return cls(ops.reshape(x, (-1, d)), (h, w))

    @property
    def T(self) -> int:
        return self.tokens.shape[0]

    @property
    def D(self) -> int:
        return self.tokens.shape[1]

    @property
    def frames(self) -> int:
        h, w = self._need_grid()
        return self.T // (h * w)

    def _need_grid(self) -> tuple[int, int]:
        if self.grid is None:
            raise ValueError("token map carries no grid dims")
        return self.grid

    def as_grid(self) -> Tensor:
        h, w = self._need_grid()
        n = self.frames
        shape = (h, w, self.D) if n == 1 else (n, h, w, self.D)
        return ops.reshape(self.tokens, shape)

    def with_tokens(self, tokens: Tensor) -> TokenMap:
        return TokenMap(tokens, self.grid)


def concat_maps(maps: list[TokenMap]) -> TokenMap:
    grids = {m.grid for m in maps}
    if len(grids) != 1:
        raise DimensionError(f"cannot stack token maps over different grids {grids}")
    if len(maps) == 1:
        return maps[0]
    return TokenMap(ops.concat([m.tokens for m in maps], axis=0), maps[0].grid)


@dataclass
class FusionWeights:
    f_q: LinearProjection
    f_k: LinearProjection
    f_v: LinearProjection
    f_z: LinearProjection
    f_fm: LinearProjection
    f_g: LinearProjection
    dwconv_kernels: list[DepthwiseKernel] = field(default_factory=list)

    def __post_init__(self) -> None:
        L = len(self.dwconv_kernels)
        if L < 1:
            raise ValueError("at least one focal level is required")
        if self.f_g.d_out != L + 1:
            raise DimensionError(f"gating projection must emit L+1={L + 1} channels, got {self.f_g.d_out}")
        d = self.f_q.d_in
        for p in (self.f_q, self.f_k, self.f_v, self.f_z, self.f_fm):
            if p.d_in != d or p.d_out != d:
                raise DimensionError(f"projection {p.weight.shape} is not [{d}, {d}]")
        for k in self.dwconv_kernels:
            if k.channels != d:
                raise DimensionError(f"kernel channels {k.channels} != D={d}")

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, focal_levels: int = DEFAULT_FOCAL_LEVELS, dtype=None) -> FusionWeights:
        proj = [LinearProjection.init(rng, d, d, dtype=dtype) for _ in range(5)]
        f_g = LinearProjection.init(rng, d, focal_levels + 1, dtype=dtype)
        kernels = [DepthwiseKernel.init(rng, d, 3, dtype=dtype) for _ in range(focal_levels)]
        return cls(*proj, f_g=f_g, dwconv_kernels=kernels)

    @property
    def D(self) -> int:
        return self.f_q.d_in

    @property
    def focal_levels(self) -> int:
        return len(self.dwconv_kernels)

    @property
    def d_k(self) -> int:
        return self.D

    def parameters(self) -> dict:
        out = {n: getattr(self, n) for n in ("f_q", "f_k", "f_v", "f_z", "f_fm", "f_g")}
        for i, k in enumerate(self.dwconv_kernels):
            out[f"dwconv{i}"] = k
        return out


def dumps_weights(w: FusionWeights) -> bytes:
    arrays = {k: v.data for k, v in flatten_parameters(w).items()}
    meta = {"kind": "fusion-weights", "D": w.D, "focal_levels": w.focal_levels}
    return serialize.dumps(arrays, meta, w.f_q.weight.dtype.name)


def loads_weights(blob: bytes, precision: str | None = None) -> FusionWeights:
    arrays, meta = serialize.loads(blob, precision)
    if meta.get("kind") != "fusion-weights":
        raise serialize.FormatError("not a fusion-weights file")

    def proj(name: str) -> LinearProjection:
        return LinearProjection.from_arrays(arrays[f"{name}.weight"], arrays.get(f"{name}.bias"))

    kernels = [DepthwiseKernel(Tensor(arrays[f"dwconv{i}.weights"], requires_grad=True))
               for i in range(meta["focal_levels"])]
    return FusionWeights(*(proj(n) for n in ("f_q", "f_k", "f_v", "f_z", "f_fm", "f_g")), dwconv_kernels=kernels)


def _check_pair(target: TokenMap, context: TokenMap, w: FusionWeights) -> None:
    if target.D != context.D or target.D != w.D:
        raise DimensionError(f"channel mismatch: target D={target.D}, context D={context.D}, weights D={w.D}")


def attention_map(target: TokenMap, context: TokenMap, w: FusionWeights) -> Tensor:
    """Row-stochastic [T_target x T_context] matrix Softmax(q k^T / sqrt(d_k))."""
    _check_pair(target, context, w)
    q = w.f_q(target.tokens)
    k = w.f_k(context.tokens)
    logits = ops.scale(ops.matmul(q, ops.transpose(k)), 1.0 / np.sqrt(w.d_k))
    return ops.softmax_rows(logits)


def cross_attention(target: TokenMap, context: TokenMap, w: FusionWeights, return_attention: bool = False):
    attn = attention_map(target, context, w)
    out = target.with_tokens(ops.matmul(attn, w.f_v(context.tokens)))
    return (out, attn) if return_attention else out


def hierarchical_contextualization(context: TokenMap, w: FusionWeights) -> list[Tensor]:
    """Focal levels [Z^0, Z^1, ..., Z^L, Z^(L+1)] of the context.

    Z^0 is the projected context on its grid, Z^l = GeLU(DWConv_l(Z^(l-1))), and
    Z^(L+1) is the spatial mean of Z^L with singleton H, W dims.
    """
    if context.grid is None:
        raise ValueError("hierarchical contextualization needs grid dims on the context")
    if context.D != w.D:
        raise DimensionError(f"context D={context.D} vs weights D={w.D}")
    z = context.with_tokens(w.f_z(context.tokens)).as_grid()
    levels = [z]
    for kernel in w.dwconv_kernels:
        z = ops.gelu(kernel(z))
        levels.append(z)
    levels.append(ops.global_avg_pool(z))
    return levels


def gates(context: TokenMap, w: FusionWeights) -> Tensor:
    """Gate map on the context grid, channel l-1 gating focal level l."""
    return context.with_tokens(w.f_g(context.tokens)).as_grid()


def gated_aggregation(levels: list[Tensor], context: TokenMap, w: FusionWeights) -> Tensor:
    """Z^out = sum_{l=1}^{L+1} G^l * Z^l; the pooled level broadcasts over positions."""
    g = gates(context, w)
    n_gates = g.shape[-1]
    if len(levels) - 1 != n_gates:
        raise DimensionError(f"{len(levels) - 1} gated levels but {n_gates} gate channels")
    out = None
    for c, z in enumerate(levels[1:]):
        term = ops.mul(ops.index(g, (..., slice(c, c + 1))), z)
        out = term if out is None else ops.add(out, term)
    return out


def modulator(context: TokenMap, w: FusionWeights) -> Tensor:
    """f_fm(GA(HC(context))) as tokens [T_context x D]."""
    z_out = gated_aggregation(hierarchical_contextualization(context, w), context, w)
    return w.f_fm(ops.reshape(z_out, (-1, w.D)))


def focal_modulation(target: TokenMap, context: TokenMap, w: FusionWeights) -> TokenMap:
    _check_pair(target, context, w)
    if target.T != context.T:
        raise DimensionError(f"focal modulation pairs tokens one-to-one: {target.T} vs {context.T}")
    return target.with_tokens(ops.mul(w.f_q(target.tokens), modulator(context, w)))


def modulated_cross_attention(target: TokenMap, context: TokenMap, w: FusionWeights, return_attention: bool = False):
    attn = attention_map(target, context, w)
    out = target.with_tokens(ops.matmul(attn, modulator(context, w)))
    return (out, attn) if return_attention else out
