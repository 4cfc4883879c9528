"""End-to-end streaming segmenter: encoder, identity bank, propagation trunk, decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .. import memory, ops, serialize
from ..eltt import DEFAULT_BLOCKS, ELSTTBlock, PropagationState, stack_forward
from ..fusion import DEFAULT_FOCAL_LEVELS, TokenMap
from ..layers import LinearProjection, flatten_parameters, uniform_init
from ..memory import EVAL_DELTA, MemoryBank
from ..tensor import DimensionError, Tensor, no_grad, resolve_dtype


class ConfigError(ValueError):
    """Checkpoint, dataset, or config disagree."""


class StateError(RuntimeError):
    """Segmentation requested without an initialized stream."""


ID_ASSIGN_MODES = ("majority", "coverage")


@dataclass
class ModelConfig:
    grid: int = 64
    stride: int = 16
    dim: int = 32
    n_max: int = 4
    focal_levels: int = DEFAULT_FOCAL_LEVELS
    blocks: int = DEFAULT_BLOCKS
    decoder_width: int = 16
    precision: str = "float64"
    seed: int = 0
    id_assign: str = "majority"
    # layer-normalize encoder tokens, fused memory slots, and block stage inputs (off: no normalization)
    layer_norm: bool = False

    def __post_init__(self) -> None:
        if self.id_assign not in ID_ASSIGN_MODES:
            raise ConfigError(f"id_assign must be one of {ID_ASSIGN_MODES}, got {self.id_assign!r}")
        n = int(round(np.log2(self.stride)))
        if 2 ** n != self.stride or n < 1:
            raise ConfigError(f"stride must be a power of two >= 2, got {self.stride}")
        if self.grid % self.stride:
            raise ConfigError(f"grid {self.grid} not divisible by stride {self.stride}")
        resolve_dtype(self.precision)

    @property
    def token_grid(self) -> tuple[int, int]:
        g = self.grid // self.stride
        return g, g

    @property
    def stages(self) -> int:
        return int(round(np.log2(self.stride)))

    def encoder_widths(self) -> list[int]:
        n = self.stages
        return [max(8, self.dim * (i + 1) // n) for i in range(n - 1)] + [self.dim]

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class ToyEncoder:
    """Stack of stride-2 patch convolutions (2x2 space-to-depth then linear)."""

    layers: list[LinearProjection]

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: ModelConfig) -> ToyEncoder:
        dt = cfg.precision
        layers = []
        c_in = 3
        for c_out in cfg.encoder_widths():
            layers.append(LinearProjection.init(rng, 4 * c_in, c_out, dtype=dt))
            c_in = c_out
        return cls(layers)

    def __call__(self, frame: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Return final (h, w, D) features and the intermediate maps, finest first."""
        x = frame
        skips = []
        for i, layer in enumerate(self.layers):
            x = layer(ops.space_to_depth(x, 2))
            if i < len(self.layers) - 1:
                x = ops.gelu(x)
                skips.append(x)
        return x, skips

    def parameters(self) -> dict:
        return {f"conv{i}": l for i, l in enumerate(self.layers)}


@dataclass
class IDBank:
    vectors: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, n_max: int, dim: int, dtype=None) -> IDBank:
        return cls(uniform_init(rng, (n_max, dim), 1, dtype))

    @property
    def n_max(self) -> int:
        return self.vectors.shape[0]

    def parameters(self) -> dict:
        return {"vectors": self.vectors}


@dataclass
class ToyDecoder:
    """Bilinear x2 upsampling stages, each fusing an encoder map by a pointwise conv."""

    stem: LinearProjection
    stages: list[LinearProjection]
    head: LinearProjection

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: ModelConfig) -> ToyDecoder:
        dt = cfg.precision
        w = cfg.decoder_width
        skip_widths = [3] + cfg.encoder_widths()[:-1]
        stem = LinearProjection.init(rng, 2 * cfg.dim, w, dtype=dt)
        stages = [LinearProjection.init(rng, w + c, w, dtype=dt) for c in reversed(skip_widths)]
        head = LinearProjection.init(rng, w, cfg.n_max + 1, dtype=dt)
        return cls(stem, stages, head)

    def __call__(self, visual: Tensor, ids: Tensor, skips: list[Tensor]) -> Tensor:
        x = ops.gelu(self.stem(ops.concat([visual, ids], axis=-1)))
        for stage, skip in zip(self.stages, reversed(skips)):
            h, w, _ = skip.shape
            x = ops.upsample_bilinear(x, h, w)
            x = ops.gelu(stage(ops.concat([x, skip], axis=-1)))
        return self.head(x)

    def parameters(self) -> dict:
        out = {"stem": self.stem, "head": self.head}
        for i, s in enumerate(self.stages):
            out[f"up{i}"] = s
        return out


@dataclass
class Segmenter:
    config: ModelConfig
    encoder: ToyEncoder
    ids: IDBank
    blocks: list[ELSTTBlock]
    decoder: ToyDecoder

    @classmethod
    def init(cls, config: ModelConfig | None = None) -> Segmenter:
        cfg = config or ModelConfig()
        rng = np.random.default_rng(cfg.seed)
        return cls(
            cfg,
            ToyEncoder.init(rng, cfg),
            IDBank.init(rng, cfg.n_max, cfg.dim, cfg.precision),
            [ELSTTBlock.init(rng, cfg.dim, cfg.focal_levels, dtype=cfg.precision, pre_norm=cfg.layer_norm)
             for _ in range(cfg.blocks)],
            ToyDecoder.init(rng, cfg),
        )

    @property
    def update_weights(self):
        # the memory refresh shares the first block's long-term weights
        return self.blocks[0].long_term_weights

    def parameters(self) -> dict:
        out = {"encoder": self.encoder, "ids": self.ids, "decoder": self.decoder}
        for i, b in enumerate(self.blocks):
            out[f"block{i}"] = b
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        return flatten_parameters(self)

    # ------------------------------------------------------------ checkpoints

    def save(self, path: str | Path) -> None:
        arrays = {k: v.data for k, v in self.named_parameters().items()}
        serialize.save(path, arrays, {"kind": "segmenter", "config": self.config.to_json()}, self.config.precision)

    @classmethod
    def load(cls, path: str | Path) -> Segmenter:
        arrays, meta = serialize.load(path)
        if meta.get("kind") != "segmenter":
            raise ConfigError(f"{path} is not a segmenter checkpoint")
        model = cls.init(ModelConfig(**meta["config"]))
        params = model.named_parameters()
        if set(params) != set(arrays):
            raise ConfigError(f"checkpoint parameters do not match the configured model: {sorted(set(params) ^ set(arrays))[:5]}")
        for k, p in params.items():
            if p.shape != arrays[k].shape:
                raise ConfigError(f"{k}: checkpoint shape {arrays[k].shape} != model shape {p.shape}")
            p.data = arrays[k].astype(p.dtype)
        return model


# ---------------------------------------------------------------- operations

def encode(model: Segmenter, frame: Tensor) -> tuple[TokenMap, list[Tensor]]:
    g = model.config.grid
    if frame.shape != (g, g, 3):
        raise DimensionError(f"frame must be ({g}, {g}, 3), got {frame.shape}")
    if frame.dtype != resolve_dtype(model.config.precision):
        frame = Tensor(frame.data.astype(resolve_dtype(model.config.precision)))
    feats, skips = model.encoder(frame)
    tokens = TokenMap.from_grid(feats)
    if model.config.layer_norm:
        tokens = TokenMap(ops.layer_norm(tokens.tokens), tokens.grid)
    return tokens, [frame] + skips


def _cell_counts(masks: np.ndarray, grid: tuple[int, int]) -> tuple[np.ndarray, int]:
    """Per-object pixel counts in each cell, [N, h*w], and the cell area."""
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim != 3:
        raise DimensionError(f"masks must be [N, G, G], got {masks.shape}")
    if masks.sum(axis=0).max(initial=0) > 1:
        raise ValueError("object masks overlap")
    n, G, W = masks.shape
    h, w = grid
    if G % h or W % w:
        raise DimensionError(f"mask size {G}x{W} not divisible into grid {grid}")
    cell = masks.reshape(n, h, G // h, w, W // w).sum(axis=(2, 4))
    return cell.reshape(n, -1), (G // h) * (W // w)


def majority_labels(masks: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Per-cell winning label over [background, object 0, ...]; -1 = background."""
    cell, area = _cell_counts(masks, grid)
    counts = np.concatenate([area - cell.sum(axis=0, keepdims=True), cell], axis=0)
    return counts.argmax(axis=0) - 1


def assign_id(masks: np.ndarray, grid: tuple[int, int], bank: IDBank, mode: str = "majority") -> TokenMap:
    """Identity map over the token grid.

    ``majority``: each token gets the vector of its cell's majority object
    (background wins -> zero vector). ``coverage``: each token gets the
    coverage-weighted sum of the vectors of every object in its cell.
    """
    n = np.asarray(masks).shape[0]
    if n > bank.n_max:
        raise ValueError(f"{n} objects exceed identity bank size {bank.n_max}")
    h, w = grid
    weights = np.zeros((h * w, bank.n_max), dtype=bank.vectors.dtype)
    if mode == "majority":
        labels = majority_labels(masks, grid)
        fg = labels >= 0
        weights[np.flatnonzero(fg), labels[fg]] = 1.0
    elif mode == "coverage":
        cell, area = _cell_counts(masks, grid)
        weights[:, :n] = cell.T / area
    else:
        raise ValueError(f"unknown id assignment mode {mode!r}")
    return TokenMap(ops.matmul(Tensor(weights), bank.vectors), grid)


@dataclass
class StreamState:
    propagation: PropagationState
    n_objects: int
    frame_index: int = 0

    @property
    def bank(self) -> MemoryBank:
        return self.propagation.bank


def _detach(m: TokenMap) -> TokenMap:
    return TokenMap(m.tokens.detach(), m.grid)


def init_state(model: Segmenter, frame: Tensor, masks: np.ndarray, policy="mca", delta: int = EVAL_DELTA) -> StreamState:
    """Start a stream from the reference frame and its given object masks."""
    masks = np.asarray(masks, dtype=bool)
    if masks.shape[0] > model.config.n_max:
        raise ValueError(f"{masks.shape[0]} objects exceed n_max={model.config.n_max}")
    visual, _ = encode(model, frame)
    grid = visual.grid
    ref_ids = assign_id(masks, grid, model.ids, model.config.id_assign)
    bank = memory.init(_detach(visual), policy, delta, _detach(ref_ids), model.update_weights,
                       normalize_updates=model.config.layer_norm)
    pstate = PropagationState(bank)
    zero = TokenMap(Tensor(np.zeros(visual.tokens.shape, dtype=visual.tokens.dtype)), grid)
    with no_grad():
        _, _, inputs = stack_forward(visual, zero, pstate, model.blocks)
    pstate.previous = [_detach(x) for x in inputs]
    pstate.previous_ids = ref_ids
    pstate.attention.clear()
    return StreamState(pstate, int(masks.shape[0]))


def predict_labels(logits: Tensor, n_objects: int) -> np.ndarray:
    """Argmax label map over background and the stream's objects; -1 = background."""
    return logits.data[..., : n_objects + 1].argmax(axis=-1) - 1


def labels_to_masks(labels: np.ndarray, n_objects: int) -> np.ndarray:
    return labels[None] == np.arange(n_objects)[:, None, None]


def segment_frame(model: Segmenter, frame: Tensor, state: StreamState | None) -> tuple[Tensor, StreamState]:
    """Segment the next frame of the stream and advance its state and memory."""
    if state is None or state.propagation.previous is None:
        raise StateError("stream not initialized; call init_state with the reference frame first")
    pstate = state.propagation
    visual, skips = encode(model, frame)
    zero = TokenMap(Tensor(np.zeros(visual.tokens.shape, dtype=visual.tokens.dtype)), visual.grid)
    out_visual, out_ids, inputs = stack_forward(visual, zero, pstate, model.blocks)
    h, w = visual.grid
    logits = model.decoder(
        ops.reshape(out_visual.tokens, (h, w, -1)),
        ops.reshape(out_ids.tokens, (h, w, -1)),
        skips,
    )
    labels = predict_labels(logits, state.n_objects)
    ids = assign_id(labels_to_masks(labels, state.n_objects), visual.grid, model.ids, model.config.id_assign)
    t = state.frame_index + 1
    pstate.previous = [_detach(x) for x in inputs]
    pstate.previous_ids = ids
    memory.observe(pstate.bank, t, _detach(visual), _detach(ids))
    state.frame_index = t
    pstate.frame_index = t
    return logits, state
