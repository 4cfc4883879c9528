"""Unrolled training on synthetic clips with momentum SGD or Adam."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import memory, synthgen
from ..memory import EVAL_DELTA, TRAIN_DELTA
from ..tensor import backward, no_grad
from .loss import segmentation_loss
from .metrics import jf_score
from .model import ModelConfig, Segmenter, init_state, predict_labels, segment_frame

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    """Loss became non-finite."""


@dataclass
class TrainConfig:
    steps: int = 4500
    unroll: int = 8
    delta: int = TRAIN_DELTA
    lr: float = 2e-3
    momentum: float = 0.9
    clip: float = 1.0
    batch: int = 2
    policy: str = "mca"
    optimizer: str = "adam"
    # "cosine" decays lr to zero over the run; "constant" keeps it fixed
    schedule: str = "cosine"
    # "random": each clip puts its objects in a random subset of identity slots,
    # so every slot is trained; "ordered": object i always uses slot i
    id_slots: str = "random"
    seed: int = 0
    videos: int = 96
    video_frames: int = 64
    # stride 8 with coverage IDs and layer norm; ModelConfig's own defaults stay at stride 16
    model: ModelConfig = field(default_factory=lambda: ModelConfig(stride=8, id_assign="coverage", layer_norm=True))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> TrainConfig:
        d = dict(data)
        if isinstance(d.get("model"), dict):
            d["model"] = ModelConfig(**d["model"])
        return cls(**d)


class MomentumSGD:
    def __init__(self, params: dict, lr: float, momentum: float, clip: float | None = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        factor = 1.0
        if self.clip and norm > self.clip:
            factor = self.clip / norm
        for k, p in self.params.items():
            v = self.velocity[k]
            v *= self.momentum
            v += factor * grads[k]
            if self.lr:
                p.data -= self.lr * v
        return norm


class Adam:
    """Adam with bias correction; gradients share the global-norm clip."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, clip: float | None = None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    zero_grad = MomentumSGD.zero_grad

    def step(self) -> float:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        factor = self.clip / norm if self.clip and norm > self.clip else 1.0
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = factor * grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.lr:
                p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


OPTIMIZERS = {"momentum": MomentumSGD, "adam": Adam}


def make_optimizer(cfg: TrainConfig, params: dict):
    if cfg.optimizer == "momentum":
        return MomentumSGD(params, cfg.lr, cfg.momentum, cfg.clip)
    if cfg.optimizer == "adam":
        return Adam(params, cfg.lr, clip=cfg.clip)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}; expected one of {sorted(OPTIMIZERS)}")


SCHEDULES = ("constant", "cosine")


def learning_rate(cfg: TrainConfig, step: int) -> float:
    if cfg.schedule == "constant":
        return cfg.lr
    if cfg.schedule == "cosine":
        return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / cfg.steps))
    raise ValueError(f"schedule must be one of {SCHEDULES}, got {cfg.schedule!r}")


ID_SLOT_MODES = ("ordered", "random")


@dataclass
class SlotView:
    """A clip whose object ``i`` is presented in identity slot ``slots[i]``."""

    video: synthgen.VideoSequence
    slots: np.ndarray
    n_slots: int

    def __len__(self) -> int:
        return len(self.video)

    @property
    def n_objects(self) -> int:
        return self.n_slots

    @property
    def channels(self) -> list[int]:
        """Scored logit channels: background, then each occupied slot."""
        return [0] + sorted(int(k) + 1 for k in self.slots)

    def frame(self, t: int):
        return self.video.frame(t)

    def masks(self, t: int) -> np.ndarray:
        src = self.video.masks(t)
        out = np.zeros((self.n_slots,) + src.shape[1:], dtype=bool)
        out[self.slots] = src
        return out

    def labels(self, t: int) -> np.ndarray:
        lab = self.video.labels[t]
        return np.where(lab >= 0, self.slots[np.maximum(lab, 0)], -1)


def slot_view(video: synthgen.VideoSequence, cfg: TrainConfig, rng: np.random.Generator) -> SlotView:
    n, n_max = video.n_objects, cfg.model.n_max
    if n > n_max:
        raise ValueError(f"video has {n} objects, identity bank holds {n_max}")
    if cfg.id_slots == "random":
        return SlotView(video, rng.permutation(n_max)[:n], n_max)
    if cfg.id_slots == "ordered":
        return SlotView(video, np.arange(n), n)
    raise ValueError(f"id_slots must be one of {ID_SLOT_MODES}, got {cfg.id_slots!r}")


def training_videos(cfg: TrainConfig) -> list[synthgen.VideoSequence]:
    rng = np.random.default_rng(cfg.seed + 7919)
    vids = []
    g = cfg.model.grid
    for i in range(cfg.videos):
        kind = i % 3
        if kind == 0:
            script = synthgen.random_script(rng, cfg.video_frames, None, g, seed=cfg.seed)
        elif kind == 1:
            script = synthgen.random_script(rng, cfg.video_frames, int(rng.integers(2, 5)), g,
                                            speed=(0.5, 1.5), cluster=True, seed=cfg.seed)
        else:
            script = synthgen.random_script(rng, cfg.video_frames, int(rng.integers(1, 4)), g,
                                            gaps=(1, 3), gap_len=(2, 6), seed=cfg.seed)
        vids.append(synthgen.generate(script))
    return vids


def clip_loss(model: Segmenter, video: SlotView, start: int, cfg: TrainConfig) -> float:
    """Run one unrolled clip, backpropagating each frame's share of the mean loss."""
    frames = range(start, start + cfg.unroll)
    state = init_state(model, video.frame(start), video.masks(start), cfg.policy, cfg.delta)
    n, channels = video.n_objects, video.channels
    total = 0.0
    for t in list(frames)[1:]:
        logits, state = segment_frame(model, video.frame(t), state)
        loss = segmentation_loss(logits, video.labels(t), n, channels)
        if not np.isfinite(loss.item()):
            raise TrainingDivergence(f"non-finite loss at clip frame {t - start} of video {video.video.script.name!r}")
        backward(loss, np.full(loss.shape, 1.0 / ((cfg.unroll - 1) * cfg.batch)))
        total += loss.item()
    return total / (cfg.unroll - 1)


def train(cfg: TrainConfig, videos: list[synthgen.VideoSequence] | None = None,
          model: Segmenter | None = None, progress=None) -> tuple[Segmenter, list[float]]:
    """Returns the trained model and the per-step loss curve."""
    videos = videos if videos is not None else training_videos(cfg)
    model = model or Segmenter.init(cfg.model)
    params = model.named_parameters()
    opt = make_optimizer(cfg, params)
    rng = np.random.default_rng(cfg.seed)
    curve: list[float] = []
    for step in range(cfg.steps):
        opt.lr = learning_rate(cfg, step)
        opt.zero_grad()
        losses = []
        for _ in range(cfg.batch):
            v = videos[int(rng.integers(len(videos)))]
            start = int(rng.integers(0, len(v) - cfg.unroll + 1))
            losses.append(clip_loss(model, slot_view(v, cfg, rng), start, cfg))
        loss = float(np.mean(losses))
        if not np.isfinite(loss):
            raise TrainingDivergence(f"step {step}: loss {loss}; last finite losses {curve[-5:]}")
        norm = opt.step()
        curve.append(loss)
        if progress is not None:
            progress(step, loss, norm)
        elif step % 100 == 0:
            log.info("step %d loss %.5f grad-norm %.3f", step, loss, norm)
    return model, curve


def evaluate(model: Segmenter, video: synthgen.VideoSequence, policy: str = "mca", delta: int = EVAL_DELTA,
             on_frame=None) -> dict:
    """Stream a whole video from its first-frame masks; score frames 1..T-1."""
    preds = []
    with no_grad():
        state = init_state(model, video.frame(0), video.masks(0), policy, delta)
        for t in range(1, len(video)):
            logits, state = segment_frame(model, video.frame(t), state)
            preds.append(predict_labels(logits, video.n_objects))
            if on_frame is not None:
                on_frame(t, state, preds[-1])
    scores = jf_score(np.array(preds), video.labels[1:], video.n_objects)
    scores["frames"] = len(video)
    scores["slots"] = memory.stats(state.bank).slot_count
    return scores
