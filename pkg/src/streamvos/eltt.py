"""Efficient long short-term propagation blocks.

Each block runs three stages on the visual branch (short-term over the previous
frame, long-term over the memory bank by modulated cross-attention, self over
the current frame), each followed by a residual add, then a GeLU feed-forward.
The identity branch computes no attention of its own: every stage reuses the
visual branch's attention matrix on identity values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import memory, ops
from .fusion import FusionWeights, TokenMap, cross_attention, modulated_cross_attention
from .layers import LinearProjection
from .memory import MemoryBank
from .tensor import Tensor

STAGES = ("short", "long", "self")
DEFAULT_BLOCKS = 3


class PropagationError(RuntimeError):
    """Missing or stale propagation state."""


@dataclass
class FrameFeatures:
    visual: TokenMap
    id_embedding: TokenMap

    def __post_init__(self) -> None:
        if self.visual.tokens.shape != self.id_embedding.tokens.shape:
            raise ValueError(f"visual {self.visual.tokens.shape} and identity {self.id_embedding.tokens.shape} must align")

    @property
    def grid(self) -> tuple[int, int]:
        return self.visual.grid


@dataclass
class ELSTTBlock:
    short_term_weights: FusionWeights
    long_term_weights: FusionWeights
    self_weights: FusionWeights
    id_values: dict[str, LinearProjection]
    ff_in: LinearProjection
    ff_out: LinearProjection
    # layer-normalize each stage's attention inputs; residuals stay on the raw stream
    pre_norm: bool = False

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, focal_levels: int = 2, ff_mult: int = 2, dtype=None,
             pre_norm: bool = False) -> ELSTTBlock:
        return cls(
            FusionWeights.init(rng, d, focal_levels, dtype),
            FusionWeights.init(rng, d, focal_levels, dtype),
            FusionWeights.init(rng, d, focal_levels, dtype),
            {s: LinearProjection.init(rng, d, d, dtype=dtype) for s in STAGES},
            LinearProjection.init(rng, d, ff_mult * d, dtype=dtype),
            LinearProjection.init(rng, ff_mult * d, d, dtype=dtype),
            pre_norm,
        )

    @property
    def D(self) -> int:
        return self.ff_in.d_in

    def parameters(self) -> dict:
        out = {"short": self.short_term_weights, "long": self.long_term_weights, "self": self.self_weights,
               "ff_in": self.ff_in, "ff_out": self.ff_out}
        for s, p in self.id_values.items():
            out[f"id_{s}"] = p
        return out


@dataclass
class PropagationState:
    """Streaming state shared by the block stack.

    ``previous[b]`` is block ``b``'s visual input at the previous frame and
    ``previous_ids`` that frame's identity embedding. ``attention[b]`` holds the
    visual attention matrices of block ``b`` for the frame being processed.
    """

    bank: MemoryBank
    previous: list[TokenMap] | None = None
    previous_ids: TokenMap | None = None
    attention: dict[int, dict[str, Tensor]] = field(default_factory=dict)
    frame_index: int = 0


def _normed(m: TokenMap, on: bool) -> TokenMap:
    return m.with_tokens(ops.layer_norm(m.tokens)) if on else m


def short_term_propagate(current: TokenMap, previous: TokenMap | None, w: FusionWeights, return_attention: bool = False,
                         norm: bool = False):
    if previous is None:
        return (current, None) if return_attention else current
    out, attn = cross_attention(_normed(current, norm), _normed(previous, norm), w, return_attention=True)
    res = current.with_tokens(ops.add(current.tokens, out.tokens))
    return (res, attn) if return_attention else res


def long_term_propagate(current: TokenMap, bank: MemoryBank, w: FusionWeights, norm: bool = False) -> tuple[TokenMap, Tensor]:
    # bank slots are stored already normalized when normalization is on
    ctx = memory.context_tokens(bank)
    out, attn = modulated_cross_attention(_normed(current, norm), ctx, w, return_attention=True)
    return current.with_tokens(ops.add(current.tokens, out.tokens)), attn


def self_propagate(current: TokenMap, w: FusionWeights, return_attention: bool = False, norm: bool = False):
    n = _normed(current, norm)
    out, attn = cross_attention(n, n, w, return_attention=True)
    res = current.with_tokens(ops.add(current.tokens, out.tokens))
    return (res, attn) if return_attention else res


def feed_forward(x: TokenMap, block: ELSTTBlock) -> TokenMap:
    h = block.ff_out(ops.gelu(block.ff_in(_normed(x, block.pre_norm).tokens)))
    return x.with_tokens(ops.add(x.tokens, h))


def visual_branch(visual: TokenMap, state: PropagationState, block: ELSTTBlock, depth: int) -> TokenMap:
    prev = state.previous[depth] if state.previous is not None else None
    cache: dict[str, Tensor] = {}
    norm = block.pre_norm
    x, a = short_term_propagate(visual, prev, block.short_term_weights, return_attention=True, norm=norm)
    if a is not None:
        cache["short"] = a
    x, cache["long"] = long_term_propagate(x, state.bank, block.long_term_weights, norm=norm)
    x, cache["self"] = self_propagate(x, block.self_weights, return_attention=True, norm=norm)
    state.attention[depth] = cache
    return feed_forward(x, block)


def id_branch(ids: TokenMap, state: PropagationState, block: ELSTTBlock, depth: int) -> TokenMap:
    cache = state.attention.get(depth)
    if cache is None or "long" not in cache or "self" not in cache:
        raise PropagationError(f"no cached visual attention for block {depth}")
    y = ids.tokens
    if "short" in cache:
        if state.previous_ids is None:
            raise PropagationError("short-term attention cached but no previous identity map")
        y = _reuse(y, cache["short"], block.id_values["short"](state.previous_ids.tokens))
    ctx_ids = memory.context_ids(state.bank)
    if ctx_ids is None:
        raise PropagationError("memory bank holds no identity tokens")
    y = _reuse(y, cache["long"], block.id_values["long"](ctx_ids.tokens))
    y = _reuse(y, cache["self"], block.id_values["self"](y))
    return ids.with_tokens(y)


def _reuse(y: Tensor, attn: Tensor, values: Tensor) -> Tensor:
    if attn.shape != (y.shape[0], values.shape[0]):
        raise PropagationError(f"cached attention {attn.shape} does not match [{y.shape[0]} x {values.shape[0]}]")
    return ops.add(y, ops.matmul(attn, values))


def block_forward(visual: TokenMap, ids: TokenMap, state: PropagationState, block: ELSTTBlock, depth: int = 0) -> tuple[TokenMap, TokenMap]:
    if state.previous is not None and len(state.previous) <= depth:
        raise PropagationError(f"state has no previous input for block {depth}")
    out_visual = visual_branch(visual, state, block, depth)
    out_ids = id_branch(ids, state, block, depth)
    return out_visual, out_ids


def stack_forward(visual: TokenMap, ids: TokenMap, state: PropagationState, blocks: list[ELSTTBlock]) -> tuple[TokenMap, TokenMap, list[TokenMap]]:
    """Run every block; returns final visual, final identity, and each block's visual input."""
    inputs = []
    state.attention.clear()
    for depth, block in enumerate(blocks):
        inputs.append(visual)
        visual, ids = block_forward(visual, ids, state, block, depth)
    return visual, ids, inputs
