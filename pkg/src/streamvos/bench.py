"""Policy sweeps: per-frame latency and memory accounting over long streams.

Every timed stream uses the same untrained, seed-fixed segmenter, since the
growth in cost is a property of the memory policy and not of the weights.
"""

from __future__ import annotations

import csv
import io
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import memory, synthgen
from .memory import EVAL_DELTA, Policy
from .segmenter.model import ModelConfig, Segmenter, init_state, segment_frame
from .tensor import no_grad

COLUMNS = ("policy", "video_length", "frame_index", "tokens_stored", "logical_bytes", "ms_per_frame")
THREADS_ENV = "MAVOS_THREADS"


@dataclass
class BenchConfig:
    policies: list[str] = field(default_factory=lambda: ["mca", "full"])
    lengths: list[int] = field(default_factory=lambda: [2000])
    delta: int = EVAL_DELTA
    grid: int = 64
    stride: int = 16
    dim: int = 32
    precision: str = "float64"
    warmup: int = 5
    repetitions: int = 5
    seed: int = 0
    output: str = "bench.csv"

    def __post_init__(self) -> None:
        if not self.lengths:
            raise ValueError("lengths must be nonempty")
        if any(n < 2 for n in self.lengths):
            raise ValueError(f"every length must be >= 2, got {self.lengths}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if not self.policies:
            raise ValueError("policies must be nonempty")
        self.policies = [str(Policy.parse(p)) for p in self.policies]

    def model_config(self) -> ModelConfig:
        return ModelConfig(grid=self.grid, stride=self.stride, dim=self.dim, precision=self.precision, seed=self.seed)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BenchRow:
    policy: str
    video_length: int
    frame_index: int
    tokens_stored: int
    logical_bytes: int
    ms_per_frame: float


def bench_video(cfg: BenchConfig, length: int) -> synthgen.VideoSequence:
    rng = np.random.default_rng(cfg.seed)
    return synthgen.generate(synthgen.random_script(rng, length, 3, cfg.grid, seed=cfg.seed, name=f"bench{length}"))


def _stream(model: Segmenter, video: synthgen.VideoSequence, policy: str, delta: int, frames: int):
    """Yield (frame_index, stats, seconds) for frames 1..frames-1 of one stream."""
    with no_grad():
        state = init_state(model, video.frame(0), video.masks(0), policy, delta)
        for t in range(1, frames):
            x = video.frame(t)
            t0 = time.perf_counter()
            _, state = segment_frame(model, x, state)
            dt = time.perf_counter() - t0
            yield t, memory.stats(state.bank), dt


def run_cell(cfg: BenchConfig, policy: str, length: int) -> list[BenchRow]:
    """Time one (policy, length) cell: median seconds per frame over repetitions."""
    model = Segmenter.init(cfg.model_config())
    video = bench_video(cfg, length)
    times = np.zeros((cfg.repetitions, length - 1))
    stats = []
    for rep in range(cfg.repetitions):
        # untimed warmup stream so allocator and caches settle before measuring
        for _ in _stream(model, video, policy, cfg.delta, min(cfg.warmup + 1, length)):
            pass
        for t, s, dt in _stream(model, video, policy, cfg.delta, length):
            times[rep, t - 1] = dt
            if rep == 0:
                stats.append(s)
    med = np.median(times, axis=0) * 1e3
    return [
        BenchRow(policy, length, t, s.token_count, s.logical_bytes, float(med[t - 1]))
        for t, s in zip(range(1, length), stats)
    ]


def worker_count(requested: int | None = None) -> int:
    """Requested workers, capped by MAVOS_THREADS when that is set."""
    n = requested or 1
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    return max(1, n)


def run(cfg: BenchConfig, workers: int = 1) -> list[BenchRow]:
    """All cells in (policy, length) order; cells may run in parallel, streams never do."""
    cells = [(p, n) for p in cfg.policies for n in cfg.lengths]
    workers = worker_count(workers)
    if workers == 1:
        parts = [run_cell(cfg, p, n) for p, n in cells]
    else:
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(run_cell, [cfg] * len(cells), *zip(*cells)))
    return [row for part in parts for row in part]


# ---------------------------------------------------------------- csv

def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def dumps_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
    return buf.getvalue()


def write_csv(rows: list[BenchRow], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        f.write(dumps_csv(rows))


def loads_csv(text: str) -> list[BenchRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if tuple(header or ()) != COLUMNS:
        raise ValueError(f"unexpected bench header {header}")
    return [BenchRow(p, int(n), int(t), int(k), int(b), float(ms)) for p, n, t, k, b, ms in reader]


def read_csv(path: str | Path) -> list[BenchRow]:
    return loads_csv(Path(path).read_text())


# ---------------------------------------------------------------- analysis

def latency_series(rows: list[BenchRow], policy: str, length: int) -> tuple[np.ndarray, np.ndarray]:
    sel = [r for r in rows if r.policy == policy and r.video_length == length]
    return np.array([r.frame_index for r in sel]), np.array([r.ms_per_frame for r in sel])


def smoothed_at(t: np.ndarray, ms: np.ndarray, frame: int, half_width: int = 25) -> float:
    """Median latency over a window of frames centred on ``frame``."""
    near = np.abs(t - frame) <= half_width
    if not near.any():
        raise ValueError(f"no rows near frame {frame}")
    return float(np.median(ms[near]))


def flatness(t: np.ndarray, ms: np.ndarray, start: int = 100) -> tuple[float, float]:
    """(slope * span, median) of ms/frame over frames >= start.

    Latency counts as flat when the first value is below 0.2 times the second.
    """
    keep = t >= start
    tt, mm = t[keep].astype(float), ms[keep]
    slope = np.polyfit(tt, mm, 1)[0]
    return float(slope * tt.max()), float(np.median(mm))
