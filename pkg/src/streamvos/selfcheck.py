"""Finite-difference sweep over every fusion operator, the block stack, and the loss."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import eltt, fusion, memory, ops
from .eltt import ELSTTBlock, PropagationState
from .fusion import FusionWeights, TokenMap
from .gradcheck import DEFAULT_TOLERANCE, check, projected
from .layers import flatten_parameters
from .segmenter.loss import segmentation_loss
from .tensor import Tensor

COMPONENTS = (
    "cross_attention",
    "hierarchical_contextualization",
    "gated_aggregation",
    "focal_modulation",
    "modulated_cross_attention",
    "stack",
    "loss",
)

D = 4
GRID = (2, 3)


def _tokens(rng, grid=GRID, d=D) -> TokenMap:
    return TokenMap(Tensor(rng.standard_normal((grid[0] * grid[1], d))), grid)


def _fusion_case(name: str, rng: np.random.Generator):
    w = FusionWeights.init(rng, D, 2)
    target, context = _tokens(rng), _tokens(rng)
    ops_by_name: dict[str, Callable[[], Tensor]] = {
        "cross_attention": lambda: fusion.cross_attention(target, context, w).tokens,
        "hierarchical_contextualization": lambda: ops.concat(
            [ops.reshape(z, (-1, D)) for z in fusion.hierarchical_contextualization(context, w)], axis=0),
        "gated_aggregation": lambda: fusion.modulator(context, w),
        "focal_modulation": lambda: fusion.focal_modulation(target, context, w).tokens,
        "modulated_cross_attention": lambda: fusion.modulated_cross_attention(target, context, w).tokens,
    }
    out = ops_by_name[name]
    proj = projected(out(), rng)
    params = flatten_parameters(w)
    params["context"] = context.tokens
    if name in ("cross_attention", "focal_modulation", "modulated_cross_attention"):
        params["target"] = target.tokens
    return (lambda: proj(out())), params


def _stack_case(rng: np.random.Generator, depth: int, with_loss: bool):
    blocks = [ELSTTBlock.init(rng, D, 2) for _ in range(depth)]
    h, w = GRID
    bank = memory.init(_tokens(rng), "mca", 1, _tokens(rng), blocks[0].long_term_weights)
    for t in (1, 2):
        memory.observe(bank, t, _tokens(rng), _tokens(rng))
    state = PropagationState(bank, [_tokens(rng) for _ in blocks], _tokens(rng))
    x, ids = _tokens(rng), _tokens(rng)
    head = Tensor(rng.standard_normal((2 * D, 3)))
    labels = rng.integers(-1, 2, size=GRID)

    def features():
        vis, y, _ = eltt.stack_forward(x, ids, state, blocks)
        return ops.concat([vis.tokens, y.tokens], axis=1)

    if with_loss:
        def f():
            return segmentation_loss(ops.reshape(ops.matmul(features(), head), (h, w, 3)), labels, 2)
        params = {"head": head, "visual": x.tokens, "ids": ids.tokens}
    else:
        proj = projected(features(), rng)

        def f():
            return proj(features())
        params = {}
    for i, b in enumerate(blocks):
        for k, v in flatten_parameters(b).items():
            params[f"block{i}.{k}"] = v
    return f, params


def run(seed: int = 0, depth: int = 3, corrupt: str | None = None,
        components: tuple[str, ...] = COMPONENTS) -> dict[str, tuple[float, str]]:
    """Worst relative error and the parameter attaining it, per component.

    ``corrupt`` names a component whose first parameter gets a perturbed
    analytic gradient (negative control).
    """
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    unknown = set(components) - set(COMPONENTS) | ({corrupt} - set(COMPONENTS) - {None})
    if unknown:
        raise ValueError(f"unknown components {sorted(unknown)}; choose from {COMPONENTS}")
    out = {}
    for i, name in enumerate(components):
        rng = np.random.default_rng([seed, i])
        if name == "stack":
            f, params = _stack_case(rng, depth, with_loss=False)
        elif name == "loss":
            f, params = _stack_case(rng, depth, with_loss=True)
        else:
            f, params = _fusion_case(name, rng)
        target = next(iter(params)) if corrupt == name else None
        report = check(f, params, corrupt=target)
        worst = max(report, key=report.get)
        out[name] = (report[worst], worst)
    return out


def passed(report: dict[str, tuple[float, str]], tolerance: float = DEFAULT_TOLERANCE) -> bool:
    return all(err < tolerance for err, _ in report.values())
