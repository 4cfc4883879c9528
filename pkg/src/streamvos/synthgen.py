"""Deterministic moving-shape videos with exact multi-object ground truth.

Objects move on a torus (positions wrap at the frame edges), are painted back
to front, and can vanish and return on explicit visibility schedules. Frames
are kept as 8-bit rasters; ``VideoSequence.frame`` converts to unit scalars.

Dataset file layout (little-endian)::

    magic    b"MAVS"
    version  u16
    hlen     u32
    header   hlen bytes of UTF-8 JSON: script echo, dims, counts, precision
    frames   frame_count * 3 planes (R, G, B) of G*G u8, row-major
    masks    per frame, per object: u32 run count, then u32 run lengths
             alternating 0/1 starting with 0 over the row-major bitplane
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .serialize import FormatError
from .tensor import Tensor, resolve_dtype

MAGIC = b"MAVS"
VERSION = 1
BACKGROUND = (128, 128, 128)
_PREFIX = struct.Struct("<4sHI")
_U32 = struct.Struct("<I")

SUITE = ("short", "long", "verylong", "occlusion", "disappearance")


@dataclass
class ObjectScript:
    shape: str
    size: tuple[float, float]
    position: tuple[float, float]
    velocity: tuple[float, float]
    color: tuple[int, int, int]
    visible: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.shape not in ("circle", "rectangle"):
            raise ValueError(f"unknown shape {self.shape!r}")
        self.size = tuple(float(v) for v in self.size)
        self.position = tuple(float(v) for v in self.position)
        self.velocity = tuple(float(v) for v in self.velocity)
        self.color = tuple(int(c) for c in self.color)
        self.visible = [(int(a), int(b)) for a, b in self.visible]

    def is_visible(self, t: int) -> bool:
        return any(a <= t < b for a, b in self.visible)


@dataclass
class SceneScript:
    """Objects are listed back to front (z-order = list order)."""

    objects: list[ObjectScript]
    frame_count: int
    grid: int = 64
    seed: int = 0
    name: str = ""

    def __post_init__(self) -> None:
        self.objects = [o if isinstance(o, ObjectScript) else ObjectScript(**o) for o in self.objects]
        self.validate()

    def validate(self) -> None:
        if self.frame_count < 1 or self.grid < 1:
            raise ValueError("frame_count and grid must be positive")
        for i, o in enumerate(self.objects):
            for a, b in o.visible:
                if not (0 <= a < b <= self.frame_count):
                    raise ValueError(f"object {i}: visibility [{a}, {b}) outside [0, {self.frame_count})")
            if tuple(o.color) == BACKGROUND:
                raise ValueError(f"object {i} uses the background color")
        colors = [o.color for o in self.objects]
        if len(set(colors)) != len(colors):
            raise ValueError("object colors must be distinct")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> SceneScript:
        d = dict(data)
        d["objects"] = [ObjectScript(**{**o, "visible": [tuple(v) for v in o["visible"]]}) for o in d["objects"]]
        return cls(**d)


@dataclass
class VideoSequence:
    """Frames as uint8 [T, G, G, 3]; labels as int8 [T, G, G] with -1 = background."""

    rgb: np.ndarray
    labels: np.ndarray
    script: SceneScript

    def __len__(self) -> int:
        return self.rgb.shape[0]

    @property
    def n_objects(self) -> int:
        return len(self.script.objects)

    def frame(self, t: int, dtype=None) -> Tensor:
        return Tensor(self.rgb[t].astype(resolve_dtype(dtype)) / 255.0)

    def masks(self, t: int) -> np.ndarray:
        """Boolean [N, G, G] object masks of frame ``t``."""
        return self.labels[t][None] == np.arange(self.n_objects)[:, None, None]

    def __eq__(self, other) -> bool:
        if not isinstance(other, VideoSequence):
            return NotImplemented
        return (
            self.rgb.dtype == other.rgb.dtype
            and np.array_equal(self.rgb, other.rgb)
            and np.array_equal(self.labels, other.labels)
            and self.script.to_json() == other.script.to_json()
        )


def _coverage(o: ObjectScript, t: int, g: int) -> np.ndarray:
    cx = o.position[0] + o.velocity[0] * t
    cy = o.position[1] + o.velocity[1] * t
    centers = np.arange(g) + 0.5
    # signed toroidal offsets in [-g/2, g/2)
    dx = np.mod(centers - cx + g / 2, g) - g / 2
    dy = np.mod(centers - cy + g / 2, g) - g / 2
    DY, DX = np.meshgrid(dy, dx, indexing="ij")
    if o.shape == "circle":
        return DX * DX + DY * DY <= o.size[0] * o.size[0]
    return (np.abs(DX) <= o.size[0]) & (np.abs(DY) <= o.size[1])


def generate(script: SceneScript) -> VideoSequence:
    script.validate()
    T, g = script.frame_count, script.grid
    labels = np.full((T, g, g), -1, dtype=np.int8)
    for t in range(T):
        lab = labels[t]
        for i, o in enumerate(script.objects):
            if o.is_visible(t):
                lab[_coverage(o, t, g)] = i
    palette = np.array([BACKGROUND] + [o.color for o in script.objects], dtype=np.uint8)
    rgb = palette[labels.astype(np.int16) + 1]
    return VideoSequence(rgb, labels, script)


# ---------------------------------------------------------------- scripting

def _palette(rng: np.random.Generator, n: int) -> list[tuple[int, int, int]]:
    # saturated hues spaced around the wheel, random rotation
    base = rng.uniform(0, 1)
    out = []
    for i in range(n):
        h = (base + i / n + rng.uniform(-0.08, 0.08) / n) % 1.0
        v = rng.uniform(0.75, 1.0)
        s = rng.uniform(0.75, 1.0)
        out.append(tuple(int(round(255 * c)) for c in _hsv_to_rgb(h, s, v)))
    return out


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple[float, float, float]:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, u = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, u, p), (q, v, p), (p, v, u), (p, q, v), (u, p, v), (v, p, q)][i]


def _absences(rng: np.random.Generator, frame_count: int, n_gaps: int, min_len: int, max_len: int) -> list[tuple[int, int]]:
    """Visibility intervals with ``n_gaps`` absences; always visible at frame 0."""
    if n_gaps == 0 or frame_count < 4:
        return [(0, frame_count)]
    cuts = []
    for _ in range(n_gaps):
        length = int(rng.integers(min_len, max_len + 1))
        start = int(rng.integers(1, max(2, frame_count - length)))
        cuts.append((start, min(frame_count, start + length)))
    mask = np.ones(frame_count, dtype=bool)
    for a, b in cuts:
        mask[a:b] = False
    mask[0] = True
    out = []
    t = 0
    while t < frame_count:
        if mask[t]:
            s = t
            while t < frame_count and mask[t]:
                t += 1
            out.append((s, t))
        else:
            t += 1
    return out


def random_script(
    rng: np.random.Generator,
    frame_count: int,
    n_objects: int | None = None,
    grid: int = 64,
    speed: tuple[float, float] = (0.2, 1.2),
    size: tuple[float, float] = (7.0, 13.0),
    gaps: tuple[int, int] = (0, 0),
    gap_len: tuple[int, int] = (10, 60),
    cluster: bool = False,
    seed: int = 0,
    name: str = "",
) -> SceneScript:
    if n_objects is None:
        n_objects = int(rng.integers(1, 5))
    colors = _palette(rng, n_objects)
    anchor = rng.uniform(0, grid, size=2)
    objects = []
    for i in range(n_objects):
        shape = "circle" if rng.random() < 0.5 else "rectangle"
        if shape == "circle":
            sz = (float(rng.uniform(*size)),) * 2
        else:
            sz = (float(rng.uniform(*size)) * 0.8, float(rng.uniform(*size)) * 0.8)
        if cluster:
            pos = anchor + rng.normal(0, grid / 10, size=2)
        else:
            pos = rng.uniform(0, grid, size=2)
        ang = rng.uniform(0, 2 * np.pi)
        spd = rng.uniform(*speed)
        vel = (spd * np.cos(ang), spd * np.sin(ang))
        n_gaps = int(rng.integers(gaps[0], gaps[1] + 1))
        vis = _absences(rng, frame_count, n_gaps, *gap_len)
        objects.append(ObjectScript(shape, sz, tuple(np.round(pos, 3)), tuple(np.round(vel, 4)), colors[i], vis))
    return SceneScript(objects, frame_count, grid, seed, name)


def standard_suite(seed: int, grid: int = 64) -> list[SceneScript]:
    """Fixed catalog: short, long, verylong, occlusion-heavy, disappearance-heavy."""
    rng = np.random.default_rng(seed)
    return [
        random_script(rng, 64, 2, grid, seed=seed, name="short"),
        random_script(rng, 1024, 3, grid, gaps=(0, 1), gap_len=(20, 80), seed=seed, name="long"),
        random_script(rng, 4096, 3, grid, gaps=(1, 2), gap_len=(50, 300), seed=seed, name="verylong"),
        random_script(rng, 256, 4, grid, speed=(0.5, 1.5), cluster=True, seed=seed, name="occlusion"),
        random_script(rng, 1024, 3, grid, gaps=(2, 4), gap_len=(20, 150), seed=seed, name="disappearance"),
    ]


# ---------------------------------------------------------------- file format

def _rle(bits: np.ndarray) -> list[int]:
    flat = bits.reshape(-1).astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        runs = [0] + runs
    return runs


def _unrle(runs: list[int], n: int) -> np.ndarray:
    vals = np.arange(len(runs)) % 2
    out = np.repeat(vals, runs).astype(bool)
    if out.size != n:
        raise ValueError(f"run lengths cover {out.size} cells, expected {n}")
    return out


def dumps(seq: VideoSequence, precision: str = "float64") -> bytes:
    T, g = seq.labels.shape[:2]
    header = json.dumps(
        {
            "script": seq.script.to_json(),
            "frame_count": T,
            "grid": g,
            "objects": seq.n_objects,
            "precision": resolve_dtype(precision).name,
        },
        sort_keys=True,
    ).encode("utf-8")
    parts = [_PREFIX.pack(MAGIC, VERSION, len(header)), header]
    parts.append(np.ascontiguousarray(np.transpose(seq.rgb, (0, 3, 1, 2)), dtype=np.uint8).tobytes())
    masks = bytearray()
    for t in range(T):
        for m in range(seq.n_objects):
            runs = _rle(seq.labels[t] == m)
            masks += _U32.pack(len(runs))
            masks += np.asarray(runs, dtype="<u4").tobytes()
    parts.append(bytes(masks))
    return b"".join(parts)


def loads(blob: bytes, precision: str | None = None) -> VideoSequence:
    if len(blob) < _PREFIX.size:
        raise FormatError(f"truncated dataset prefix at byte offset {len(blob)}")
    magic, version, hlen = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte offset 0")
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version} at byte offset 4")
    pos = _PREFIX.size
    if len(blob) < pos + hlen:
        raise FormatError(f"truncated header at byte offset {len(blob)}")
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
        script = SceneScript.from_json(header["script"])
        T, g, n = int(header["frame_count"]), int(header["grid"]), int(header["objects"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"corrupt header at byte offset {pos}: {exc}") from None
    stored = header.get("precision", "float64")
    if precision is not None and resolve_dtype(precision).name != stored:
        raise FormatError(f"dataset was written for {stored} scalars; refusing to load as {resolve_dtype(precision).name}")
    pos += hlen
    nbytes = T * 3 * g * g
    if len(blob) < pos + nbytes:
        raise FormatError(f"truncated frame payload at byte offset {len(blob)} (need {pos + nbytes})")
    planes = np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=pos).reshape(T, 3, g, g)
    rgb = np.ascontiguousarray(np.transpose(planes, (0, 2, 3, 1)))
    pos += nbytes
    labels = np.full((T, g, g), -1, dtype=np.int8)
    for t in range(T):
        for m in range(n):
            if len(blob) < pos + 4:
                raise FormatError(f"truncated mask run count at byte offset {pos}")
            (count,) = _U32.unpack_from(blob, pos)
            pos += 4
            if len(blob) < pos + 4 * count:
                raise FormatError(f"truncated mask runs at byte offset {pos}")
            runs = np.frombuffer(blob, dtype="<u4", count=count, offset=pos)
            try:
                bits = _unrle(runs.astype(np.int64), g * g).reshape(g, g)
            except ValueError as exc:
                raise FormatError(f"bad mask bitplane at byte offset {pos}: {exc}") from None
            if np.any(labels[t][bits] != -1):
                raise FormatError(f"overlapping masks in frame {t} at byte offset {pos}")
            labels[t][bits] = m
            pos += 4 * count
    if pos != len(blob):
        raise FormatError(f"trailing bytes at byte offset {pos}")
    return VideoSequence(rgb, labels, script)


def export(seq: VideoSequence, path: str | Path, precision: str = "float64") -> None:
    Path(path).write_bytes(dumps(seq, precision))


def import_(path: str | Path, precision: str | None = None) -> VideoSequence:
    return loads(Path(path).read_bytes(), precision)
