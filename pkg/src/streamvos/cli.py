"""Command-line entry point: gen, train, eval, bench, gradcheck.

Every subcommand accepts ``--config file.json`` whose keys are the long option
names (dashes or underscores); explicit flags override the file.

Exit codes: 0 success, 1 validation failure, 2 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import bench, selfcheck, synthgen
from .serialize import FormatError
from .segmenter.metrics import jf_score
from .segmenter.model import ConfigError, ModelConfig, Segmenter
from .segmenter.train import TrainConfig, evaluate, train

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
log = logging.getLogger("streamvos")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x]


def _strs(s: str) -> list[str]:
    return [x for x in s.split(",") if x]


# ---------------------------------------------------------------- gen

def cmd_gen(a) -> int:
    scripts = synthgen.standard_suite(a.seed, a.grid)
    if a.suite != "standard":
        scripts = [s for s in scripts if s.name == a.suite]
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in scripts:
        synthgen.export(synthgen.generate(s), out / f"{s.name}.mavs", a.precision)
        print(f"{s.name}: {s.frame_count} frames, {len(s.objects)} objects")
    return EXIT_OK


# ---------------------------------------------------------------- train

def load_dataset(path: str, precision: str | None = None) -> list[synthgen.VideoSequence]:
    p = Path(path)
    files = sorted(p.glob("*.mavs")) if p.is_dir() else [p]
    if not files:
        raise FileNotFoundError(f"no .mavs files in {p}")
    return [synthgen.import_(f, precision) for f in files]


def _train_config(a) -> TrainConfig:
    model = ModelConfig(grid=a.grid, stride=a.stride, dim=a.dim, focal_levels=a.focal_levels,
                        precision=a.precision, seed=a.seed, id_assign=a.id_assign, layer_norm=a.layer_norm,
                        decoder_width=a.decoder_width)
    return TrainConfig(steps=a.steps, unroll=a.unroll, delta=a.delta, lr=a.lr, batch=a.batch, policy=a.policy,
                       optimizer=a.optimizer, schedule=a.schedule, id_slots=a.id_slots, seed=a.seed, videos=a.videos,
                       video_frames=a.video_frames, model=model)


def cmd_train(a) -> int:
    cfg = _train_config(a)
    videos = load_dataset(a.data, cfg.model.precision) if a.data else None
    if videos is not None:
        _check_videos(videos, cfg.model)
    rows = []

    def progress(step, loss, norm):
        rows.append((step, loss, norm))
        if step % 100 == 0:
            log.info("step %d loss %.5f grad-norm %.3f", step, loss, norm)

    model, _ = train(cfg, videos, progress=progress)
    model.save(a.out)
    loss_csv = Path(a.loss_csv) if a.loss_csv else Path(a.out).with_suffix(".loss.csv")
    with open(loss_csv, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("step", "loss", "grad_norm"))
        w.writerows((s, f"{l:.10f}", f"{n:.10f}") for s, l, n in rows)
    print(f"wrote {a.out} and {loss_csv}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def _check_videos(videos, cfg: ModelConfig) -> None:
    for v in videos:
        if v.labels.shape[1:] != (cfg.grid, cfg.grid):
            raise ConfigError(f"video {v.script.name!r} is {v.labels.shape[1]}x{v.labels.shape[2]}, model expects grid {cfg.grid}")
        if v.n_objects > cfg.n_max:
            raise ConfigError(f"video {v.script.name!r} has {v.n_objects} objects, model supports {cfg.n_max}")


def write_pgm(path: Path, mask: np.ndarray) -> None:
    """Binary (P5) PGM of one object mask: 255 inside, 0 outside."""
    img = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise FormatError(f"{path}: not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w) > 127


def _eval_one(model: Segmenter | None, video, policy: str, delta: int, masks_dir: Path | None) -> dict:
    if model is None:
        # ground truth as prediction: exercises scoring and dumping end to end
        preds = video.labels[1:]
        scores = jf_score(preds, video.labels[1:], video.n_objects)
        scores["frames"] = len(video)
    else:
        preds = []
        scores = evaluate(model, video, policy, delta, on_frame=lambda t, s, p: preds.append(p))
    if masks_dir is not None:
        # one image per frame per object: <masks>/<video>/obj<k>/<frame>.pgm
        dirs = [masks_dir / video.script.name / f"obj{k}" for k in range(video.n_objects)]
        for d in dirs:
            d.mkdir(parents=True, exist_ok=True)
        for t, p in enumerate(preds, start=1):
            for k, d in enumerate(dirs):
                write_pgm(d / f"{t:05d}.pgm", p == k)
    return scores


def _model_for(a, levels: int) -> Segmenter | None:
    if a.ground_truth:
        return None
    if a.checkpoint:
        return Segmenter.load(a.checkpoint.replace("{L}", str(levels)))
    log.warning("no checkpoint given: evaluating untrained weights (seed %d, L=%d)", a.seed, levels)
    return Segmenter.init(ModelConfig(grid=a.grid, stride=a.stride, dim=a.dim, focal_levels=levels,
                                      precision=a.precision, seed=a.seed))


def _summary(per_video: dict) -> dict:
    keys = ("J", "F", "JF")
    return {k: float(np.mean([v[k] for v in per_video.values()])) for k in keys}


def cmd_eval(a) -> int:
    videos = load_dataset(a.data)
    masks_dir = Path(a.masks) if a.masks else None
    levels = a.focal_levels_sweep or [None]
    report: dict = {"policy": a.policy, "delta": a.delta}
    runs = {}
    for L in levels:
        model = _model_for(a, L if L is not None else a.focal_levels)
        if model is not None:
            if L is not None and model.config.focal_levels != L:
                raise ConfigError(f"checkpoint has L={model.config.focal_levels}, sweep asked for L={L}")
            _check_videos(videos, model.config)
        sub = masks_dir / f"L{L}" if (masks_dir and L is not None) else masks_dir
        workers = bench.worker_count(a.workers)
        if workers > 1 and len(videos) > 1:
            with ProcessPoolExecutor(workers) as pool:
                scores = list(pool.map(_eval_one, [model] * len(videos), videos, [a.policy] * len(videos),
                                       [a.delta] * len(videos), [sub] * len(videos)))
        else:
            scores = [_eval_one(model, v, a.policy, a.delta, sub) for v in videos]
        per_video = {v.script.name: s for v, s in zip(videos, scores)}
        runs[L] = {"videos": per_video, "mean": _summary(per_video)}
        tag = f"L={L} " if L is not None else ""
        for name, s in per_video.items():
            print(f"{tag}{name}: J={s['J']:.4f} F={s['F']:.4f} J&F={s['JF']:.4f}")
        print(f"{tag}mean: J&F={runs[L]['mean']['JF']:.4f}")
    if levels == [None]:
        report.update(runs[None])
    else:
        report["focal_levels"] = {str(L): r for L, r in runs.items()}
    Path(a.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- bench

def cmd_bench(a) -> int:
    cfg = bench.BenchConfig(policies=a.policies, lengths=a.lengths, delta=a.delta, grid=a.grid, stride=a.stride,
                            dim=a.dim, precision=a.precision, warmup=a.warmup, repetitions=a.repetitions,
                            seed=a.seed, output=a.out)
    # fail on an unwritable destination before spending minutes timing
    Path(cfg.output).open("a").close()
    rows = bench.run(cfg, a.workers)
    bench.write_csv(rows, cfg.output)
    for p in cfg.policies:
        for n in cfg.lengths:
            t, ms = bench.latency_series(rows, p, n)
            print(f"{p} L={n}: tokens {rows_tokens(rows, p, n)} median {np.median(ms):.3f} ms/frame")
    return EXIT_OK


def rows_tokens(rows, policy, length) -> int:
    return [r.tokens_stored for r in rows if r.policy == policy and r.video_length == length][-1]


# ---------------------------------------------------------------- gradcheck

def cmd_gradcheck(a) -> int:
    report = selfcheck.run(a.seed, a.depth, a.corrupt)
    for name, (err, where) in report.items():
        status = "ok" if err < a.tolerance else "FAIL"
        print(f"{name:32s} {err:.3e}  ({where}) {status}")
    return EXIT_OK if selfcheck.passed(report, a.tolerance) else EXIT_INVALID


# ---------------------------------------------------------------- parser

def _model_flags(p, stride=16):
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--stride", type=int, default=stride)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--precision", choices=("float32", "float64"), default="float64")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="streamvos", description=__doc__.splitlines()[0])
    root.add_argument("-v", "--verbose", action="store_true")
    sub = root.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file of option defaults")
        p.set_defaults(func=fn)
        return p

    g = command("gen", cmd_gen, "write the standard synthetic suite")
    g.add_argument("--suite", default="standard", choices=("standard",) + synthgen.SUITE)
    g.add_argument("--out", default="data")
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--grid", type=int, default=64)
    g.add_argument("--precision", choices=("float32", "float64"), default="float64")

    defaults = TrainConfig()
    t = command("train", cmd_train, "train a segmenter checkpoint")
    _model_flags(t, defaults.model.stride)
    t.add_argument("--data", help="directory of .mavs clips (default: generated training set)")
    t.add_argument("--out", default="model.svss")
    t.add_argument("--loss-csv")
    t.add_argument("--steps", type=int, default=defaults.steps)
    t.add_argument("--unroll", type=int, default=defaults.unroll)
    t.add_argument("--delta", type=int, default=defaults.delta)
    t.add_argument("--lr", type=float, default=defaults.lr)
    t.add_argument("--batch", type=int, default=defaults.batch)
    t.add_argument("--policy", default=defaults.policy)
    t.add_argument("--optimizer", choices=("momentum", "adam"), default=defaults.optimizer)
    t.add_argument("--schedule", choices=("constant", "cosine"), default=defaults.schedule)
    t.add_argument("--videos", type=int, default=defaults.videos)
    t.add_argument("--video-frames", type=int, default=defaults.video_frames)
    t.add_argument("--focal-levels", type=int, default=defaults.model.focal_levels)
    t.add_argument("--id-assign", choices=("majority", "coverage"), default=defaults.model.id_assign)
    t.add_argument("--layer-norm", action=argparse.BooleanOptionalAction, default=defaults.model.layer_norm)
    t.add_argument("--decoder-width", type=int, default=defaults.model.decoder_width)
    t.add_argument("--id-slots", choices=("ordered", "random"), default=defaults.id_slots)

    e = command("eval", cmd_eval, "score a checkpoint on a dataset")
    _model_flags(e)
    e.add_argument("--data", required=False, default="data")
    e.add_argument("--checkpoint", help="checkpoint path; '{L}' is replaced by the focal level in sweeps")
    e.add_argument("--policy", default="mca")
    e.add_argument("--delta", type=int, default=10)
    e.add_argument("--out", default="metrics.json")
    e.add_argument("--masks", help="directory for PGM mask dumps")
    e.add_argument("--focal-levels", type=int, default=2, help="L for an untrained model")
    e.add_argument("--focal-levels-sweep", type=_ints, help="comma list, e.g. 1,2,3")
    e.add_argument("--ground-truth", action="store_true", help="score ground truth against itself")
    e.add_argument("--workers", type=int, default=1)

    b = command("bench", cmd_bench, "per-frame latency and memory sweep")
    _model_flags(b)
    b.add_argument("--policies", type=_strs, default=["mca", "full"])
    b.add_argument("--lengths", type=_ints, default=[2000])
    b.add_argument("--delta", type=int, default=10)
    b.add_argument("--warmup", type=int, default=5)
    b.add_argument("--repetitions", type=int, default=5)
    b.add_argument("--out", default="bench.csv")
    b.add_argument("--workers", type=int, default=1)

    c = command("gradcheck", cmd_gradcheck, "finite-difference check of all components")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--depth", type=int, default=3)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--corrupt", choices=selfcheck.COMPONENTS, help="perturb one component's gradient (negative control)")
    return root


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    try:
        data = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{args.config}: invalid JSON ({e})") from None
    if not isinstance(data, dict):
        raise UsageError(f"{args.config}: expected a JSON object")
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in subparser._actions}
    values = {k.replace("-", "_"): v for k, v in data.items()}
    unknown = set(values) - known - {"config"}
    if unknown:
        raise UsageError(f"{args.config}: unknown keys for {args.command}: {sorted(unknown)}")
    for action in subparser._actions:
        if action.dest in values and action.type in (_ints, _strs) and isinstance(values[action.dest], (int, str)):
            values[action.dest] = action.type(str(values[action.dest]))
    subparser.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ConfigError, FormatError) as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
