"""Long-term memory banks with interchangeable growth policies.

Policies:

``full``       append a slot every ``delta`` frames (ever-growing)
``window:n``   append, then keep only the ``n`` newest non-reference slots
``refprev``    reference plus the most recently stored frame
``mca``        reference plus one dynamic slot; each refresh fuses the new
               frame (queries) with the previous dynamic slot (context) by
               modulated cross-attention
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from . import ops, serialize
from .fusion import FusionWeights, TokenMap, concat_maps, modulated_cross_attention
from .tensor import Tensor, no_grad

TRAIN_DELTA = 2
EVAL_DELTA = 10

REFERENCE = "reference"
DYNAMIC = "dynamic"
ARCHIVED = "archived"


class MemoryUsageError(RuntimeError):
    """Bank used out of order or in an unsupported way."""


@dataclass(frozen=True)
class Policy:
    kind: str
    window: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("full", "window", "refprev", "mca"):
            raise ValueError(f"unknown memory policy {self.kind!r}")
        if self.kind == "window" and self.window < 1:
            raise ValueError("window policy needs n >= 1")

    @classmethod
    def parse(cls, spec: str | Policy) -> Policy:
        if isinstance(spec, Policy):
            return spec
        name, _, arg = spec.strip().lower().partition(":")
        if name == "window":
            if not arg.isdigit():
                raise ValueError(f"window policy needs a size, e.g. 'window:4', got {spec!r}")
            return cls("window", int(arg))
        if arg:
            raise ValueError(f"policy {name!r} takes no argument")
        return cls(name)

    def __str__(self) -> str:
        return f"window:{self.window}" if self.kind == "window" else self.kind


@dataclass
class MemorySlot:
    tokens: TokenMap
    frame_index: int
    kind: str
    id_tokens: TokenMap | None = None

    def __post_init__(self) -> None:
        if self.kind == REFERENCE and self.frame_index != 0:
            raise ValueError("the reference slot must hold frame 0")
        if self.frame_index < 0:
            raise ValueError("frame_index must be nonnegative")


@dataclass(frozen=True)
class MemoryStats:
    slot_count: int
    token_count: int
    logical_bytes: int
    update_count: int


def _frozen(m: TokenMap | None) -> TokenMap | None:
    if m is None:
        return None
    return TokenMap(m.tokens.detach(), m.grid)


@dataclass
class MemoryBank:
    policy: Policy
    delta: int
    slots: list[MemorySlot] = field(default_factory=list)
    weights: FusionWeights | None = None
    last_index: int = 0
    update_count: int = 0
    normalize_updates: bool = False
    _context: tuple[TokenMap, TokenMap | None] | None = field(default=None, repr=False)

    @property
    def grid(self) -> tuple[int, int]:
        return self.slots[0].tokens.grid

    @property
    def D(self) -> int:
        return self.slots[0].tokens.D

    @property
    def dynamic(self) -> MemorySlot | None:
        return self.slots[1] if len(self.slots) > 1 else None

    def _invalidate(self) -> None:
        self._context = None

    def stats(self) -> MemoryStats:
        tokens = sum(s.tokens.T for s in self.slots)
        itemsize = self.slots[0].tokens.tokens.dtype.itemsize
        return MemoryStats(len(self.slots), tokens, tokens * self.D * itemsize, self.update_count)


def init(reference: TokenMap, policy: str | Policy = "mca", delta: int = EVAL_DELTA,
         reference_ids: TokenMap | None = None, weights: FusionWeights | None = None,
         normalize_updates: bool = False) -> MemoryBank:
    """Bank holding only the reference frame (frame 0).

    ``normalize_updates`` layer-normalizes each fused mca slot so repeated
    refreshes cannot compound the feature scale over long streams.
    """
    if delta < 1:
        raise ValueError(f"delta must be >= 1, got {delta}")
    if reference.T == 0 or reference.grid is None:
        raise ValueError("reference features must be a non-empty token map with grid dims")
    policy = Policy.parse(policy)
    if policy.kind == "mca" and weights is None:
        raise ValueError("the mca policy needs fusion weights for its update")
    slot = MemorySlot(_frozen(reference), 0, REFERENCE, _frozen(reference_ids))
    return MemoryBank(policy, delta, [slot], weights, normalize_updates=normalize_updates)


def observe(bank: MemoryBank, frame_index: int, features: TokenMap, ids: TokenMap | None = None) -> MemoryBank:
    """Offer frame ``frame_index`` to the bank; only multiples of delta are stored."""
    if frame_index <= bank.last_index:
        raise MemoryUsageError(f"frame_index must increase: got {frame_index} after {bank.last_index}")
    if features.grid != bank.grid or features.D != bank.D or features.frames != 1:
        raise ValueError(f"frame features {features.T}x{features.D} on grid {features.grid} do not fit bank grid {bank.grid}")
    bank.last_index = frame_index
    if frame_index % bank.delta:
        return bank

    kind = bank.policy.kind
    if kind == "mca" and bank.dynamic is not None:
        with no_grad():
            fused = modulated_cross_attention(features, bank.dynamic.tokens, bank.weights)
            if bank.normalize_updates:
                fused = TokenMap(ops.layer_norm(fused.tokens), fused.grid)
        slot = MemorySlot(_frozen(fused), frame_index, DYNAMIC, _frozen(ids))
    else:
        slot = MemorySlot(_frozen(features), frame_index, DYNAMIC, _frozen(ids))

    if kind in ("mca", "refprev"):
        bank.slots[1:] = [slot]
    else:
        for s in bank.slots[1:]:
            s.kind = ARCHIVED
        bank.slots.append(slot)
        if kind == "window" and len(bank.slots) - 1 > bank.policy.window:
            del bank.slots[1]
    bank.update_count += 1
    bank._invalidate()
    return bank


def context_tokens(bank: MemoryBank) -> TokenMap:
    """All stored visual tokens, reference first."""
    return _context(bank)[0]


def context_ids(bank: MemoryBank) -> TokenMap | None:
    """Identity tokens aligned with :func:`context_tokens`; None if any slot lacks them."""
    return _context(bank)[1]


def _context(bank: MemoryBank) -> tuple[TokenMap, TokenMap | None]:
    if not bank.slots:
        raise MemoryUsageError("empty memory bank")
    if bank._context is None:
        vis = concat_maps([s.tokens for s in bank.slots])
        if all(s.id_tokens is not None for s in bank.slots):
            ids = concat_maps([s.id_tokens for s in bank.slots])
        else:
            ids = None
        bank._context = (vis, ids)
    return bank._context


def stats(bank: MemoryBank) -> MemoryStats:
    return bank.stats()


# ---------------------------------------------------------------- snapshots

def snapshot_bytes(bank: MemoryBank) -> bytes:
    arrays = {}
    slots_meta = []
    for i, s in enumerate(bank.slots):
        arrays[f"slot{i}.tokens"] = s.tokens.tokens.data
        if s.id_tokens is not None:
            arrays[f"slot{i}.ids"] = s.id_tokens.tokens.data
        slots_meta.append({"frame_index": s.frame_index, "kind": s.kind, "has_ids": s.id_tokens is not None})
    meta = {
        "kind": "memory-bank",
        "policy": str(bank.policy),
        "delta": bank.delta,
        "grid": list(bank.grid),
        "last_index": bank.last_index,
        "update_count": bank.update_count,
        "normalize_updates": bank.normalize_updates,
        "slots": slots_meta,
    }
    return serialize.dumps(arrays, meta, bank.slots[0].tokens.tokens.dtype.name)


def restore_bytes(blob: bytes, weights: FusionWeights | None = None) -> MemoryBank:
    arrays, meta = serialize.loads(blob)
    if meta.get("kind") != "memory-bank":
        raise serialize.FormatError("not a memory-bank snapshot")
    grid = tuple(meta["grid"])
    slots = []
    for i, sm in enumerate(meta["slots"]):
        tok = TokenMap(Tensor(arrays[f"slot{i}.tokens"]), grid)
        ids = TokenMap(Tensor(arrays[f"slot{i}.ids"]), grid) if sm["has_ids"] else None
        slots.append(MemorySlot(tok, sm["frame_index"], sm["kind"], ids))
    policy = Policy.parse(meta["policy"])
    if policy.kind == "mca" and weights is None:
        raise ValueError("restoring an mca bank needs its fusion weights")
    return MemoryBank(policy, meta["delta"], slots, weights, meta["last_index"], meta["update_count"],
                      bool(meta.get("normalize_updates", False)))


def save_snapshot(bank: MemoryBank, path: str | Path) -> None:
    Path(path).write_bytes(snapshot_bytes(bank))


def load_snapshot(path: str | Path, weights: FusionWeights | None = None) -> MemoryBank:
    return restore_bytes(Path(path).read_bytes(), weights)
