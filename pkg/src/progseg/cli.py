"""``progseg <command> [--config PATH] [--key value ...]``.

Commands: train, eval, infer, gradcheck, gendata, compare. Every file a
command writes lands under ``out_dir``. Failures print a single line
``error: <CODE>: <message>`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .checks import run_suite
from .compare import compare_models
from .config import PARSERS, Config, parse_config, parse_text
from .data import (Dataset, load_manifest, read_ppm, split, synthetic_dataset, write_dataset,
                   write_pgm)
from .errors import ProgsegError, ShapeError
from .metrics import REPORT_FIELDS, evaluate_model, per_image_metrics, predict_masks
from .progan import infer_mask
from .tensor import Rng
from .train import (BatchProvider, TrainRecord, architecture_for_mode, init_state, run_schedule,
                    schedule_for_mode)

METRICS_VERSION = "# progseg-metrics v1"
CHECKPOINT_NAME = "checkpoint.pseg"
COMMANDS = ("train", "eval", "infer", "gradcheck", "gendata", "compare")


class UsageError(ProgsegError):
    code = "USAGE"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- argument handling ----------------------------------------------------------

def _split_overrides(rest: list) -> dict:
    """``--key value`` / ``--key=value`` pairs into {key: raw string}."""
    out = {}
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(rest):
                raise UsageError(f"--{key} needs a value")
            value = rest[i + 1]
            i += 2
        key = key.replace("-", "_")
        if key not in PARSERS:
            raise UsageError(f"unknown option --{key}")
        if key in out:
            raise UsageError(f"--{key} given twice")
        out[key] = value
    return out


def _build_parser() -> _Parser:
    p = _Parser(prog="progseg", description="progressive GAN segmentation engine")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        c = sub.add_parser(name)
        c.add_argument("--config", default=None)
        if name == "train":
            c.add_argument("--resume", default=None, help="checkpoint to continue from")
        if name in ("eval", "infer"):
            c.add_argument("--checkpoint", default=None,
                           help=f"defaults to <out_dir>/{CHECKPOINT_NAME}")
        if name == "eval":
            c.add_argument("--split", choices=("train", "test", "all"), default="test")
        if name == "infer":
            c.add_argument("--input", required=True)
            c.add_argument("--output", default=None, help="file name inside out_dir")
        if name == "gradcheck":
            c.add_argument("--instances", type=int, default=20)
    return p


def _inside(out_dir: Path, path) -> Path:
    """Resolve ``path`` against ``out_dir`` and refuse anything that escapes it."""
    out_dir = out_dir.resolve()
    target = (out_dir / path).resolve()
    if target != out_dir and out_dir not in target.parents:
        raise UsageError(f"{path} is outside out_dir {out_dir}")
    return target


def _out_dir(cfg: Config) -> Path:
    d = Path(cfg.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


# -- shared helpers -------------------------------------------------------------

def load_dataset(cfg: Config) -> Dataset:
    if cfg.manifest:
        ds = load_manifest(cfg.manifest, cfg.stages[0])
        if ds.images.shape[-1] != cfg.full_res:
            raise ShapeError(f"manifest images are {ds.images.shape[-1]}px, config expects "
                             f"{cfg.full_res}px")
        return ds
    return synthetic_dataset(cfg.n_scenes, cfg.scene_spec(), cfg.scene_seed, cfg.stages[0])


def split_dataset(cfg: Config, ds: Dataset):
    tr, te = split(len(ds), cfg.split_fraction, cfg.split_seed)
    return ds.subset(tr), ds.subset(te)


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


class MetricsWriter:
    """Versioned CSV of TrainRecords; one row per logged record."""

    def __init__(self, path: Path, cfg: Config, mode: str, seed: int, append: bool = False):
        fresh = not (append and path.exists())
        self.f = open(path, "a" if not fresh else "w", encoding="utf-8", newline="")
        self.w = csv.writer(self.f, lineterminator="\n")
        if fresh:
            self.f.write(f"{METRICS_VERSION} mode={mode} seed={seed} "
                         f"config_digest={cfg.digest()}\n")
            self.w.writerow(TrainRecord.FIELDS)

    def __call__(self, rec: TrainRecord) -> None:
        self.w.writerow([_fmt(getattr(rec, k)) for k in TrainRecord.FIELDS])

    def close(self) -> None:
        self.f.close()


def _truncate_metrics(path: Path, iteration: int) -> None:
    """Drop rows logged at or after ``iteration`` so a resumed run does not repeat them."""
    if not path.exists():
        return
    with open(path, encoding="utf-8", newline="") as f:
        lines = f.readlines()
    keep = [ln for i, ln in enumerate(lines)
            if ln.startswith("#") or i < 2 or int(ln.split(",", 1)[0]) < iteration]
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.writelines(keep)


def write_records(path: Path, records, cfg: Config, mode: str, seed: int) -> None:
    w = MetricsWriter(path, cfg, mode, seed)
    try:
        for r in records:
            w(r)
    finally:
        w.close()


def read_metrics(path) -> list:
    """Parse a metrics CSV back into dicts (floats, ints, None for blanks)."""
    with open(path, encoding="utf-8") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    rows = []
    for row in csv.DictReader(lines):
        rows.append({k: (None if v == "" else float(v) if k not in ("iteration", "stage",
                                                                    "resolution") else int(v))
                     for k, v in row.items()})
    return rows


# -- commands -------------------------------------------------------------------

def cmd_train(cfg: Config, args, out=print) -> int:
    out_dir = _out_dir(cfg)
    train_ds, _ = split_dataset(cfg, load_dataset(cfg))
    mode = cfg.mode
    schedule = cfg.schedule()
    tc = cfg.train_config()
    sched = schedule_for_mode(schedule, mode)
    provider = BatchProvider(train_ds, sched.batch_size, Rng(tc.seed, "batches"))
    if args.resume:
        _, state, batches = ckpt_io.load_checkpoint(args.resume, cfg.digest())
        ckpt_io.restore_provider(provider, batches)
    else:
        state = init_state(architecture_for_mode(cfg.architecture(), mode, schedule), tc)
    (out_dir / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    ckpt_dir = out_dir / "checkpoints"

    def on_checkpoint(st, prov):
        ckpt_dir.mkdir(exist_ok=True)
        ckpt_io.save_checkpoint(st, cfg, mode, ckpt_dir / f"iter_{st.iteration:07d}.pseg", prov)

    if args.resume:
        _truncate_metrics(out_dir / "metrics.csv", state.iteration)
    writer = MetricsWriter(out_dir / "metrics.csv", cfg, mode, cfg.seed, append=bool(args.resume))
    try:
        run_schedule(state, train_ds, sched, tc, sink=writer, provider=provider,
                     on_checkpoint=on_checkpoint, checkpoint_interval=cfg.checkpoint_interval)
    finally:
        writer.close()
    final = out_dir / CHECKPOINT_NAME
    ckpt_io.save_checkpoint(state, cfg, mode, final, provider)
    out(f"trained {mode} (seed {cfg.seed}) for {state.iteration} iterations; "
        f"stage {state.gs.stage} at {state.gs.resolution}px -> {final}")
    return 0


def _eval_config(args, overrides: dict, ckpt_meta: dict) -> Config:
    """Checkpoint config as the base; ``--config`` replaces it; ``--key`` overrides win."""
    if args.config:
        return parse_config(args.config, overrides)
    base = Config.from_dict(ckpt_meta["config"])
    return parse_text(base.to_text(), overrides)


def _load_for_inference(args, overrides):
    path = args.checkpoint
    if path is None:
        path = Path(parse_config(args.config, overrides).out_dir) / CHECKPOINT_NAME
    raw = ckpt_io.load(path)
    cfg = _eval_config(args, overrides, raw.meta)
    _, state, _ = ckpt_io.to_state(raw)
    return cfg, state, raw.meta.get("mode", cfg.mode)


def cmd_eval(args, overrides, out=print) -> int:
    cfg, state, mode = _load_for_inference(args, overrides)
    out_dir = _out_dir(cfg)
    ds = load_dataset(cfg)
    train_ds, test_ds = split_dataset(cfg, ds)
    parts = {"train": train_ds, "test": test_ds, "all": ds}
    target = parts[args.split]
    g, gs = state.models.generator, state.gs
    m = evaluate_model(g, gs, target, cfg.threshold)
    row = {"mode": mode, "split": args.split, **m.as_row(), "seed": cfg.seed}
    with open(_inside(out_dir, f"eval_{args.split}.csv"), "w", encoding="utf-8",
              newline="") as f:
        f.write(f"# progseg-eval v1 config_digest={cfg.digest()}\n")
        w = csv.DictWriter(f, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerow({k: _fmt(v) for k, v in row.items()})
    pred = predict_masks(g, target.images, gs, cfg.threshold)
    with open(_inside(out_dir, f"eval_{args.split}_images.csv"), "w", encoding="utf-8",
              newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("index", "accuracy", "fpr", "precision", "recall", "iou"))
        for i, pm in enumerate(per_image_metrics(pred, target.masks_at(gs.resolution))):
            w.writerow((i, _fmt(pm.accuracy), _fmt(pm.false_positive_rate),
                        _fmt(pm.precision), _fmt(pm.recall), _fmt(pm.iou)))
    out(f"{mode} on {args.split} ({len(target)} samples): accuracy {m.accuracy:.4f}  "
        f"precision {m.precision:.4f}  recall {m.recall:.4f}  iou {m.iou:.4f}  "
        f"fpr {m.false_positive_rate:.4f}")
    return 0


def cmd_infer(args, overrides, out=print) -> int:
    cfg, state, _ = _load_for_inference(args, overrides)
    out_dir = _out_dir(cfg)
    image = read_ppm(args.input)
    if image.shape[1:] != (cfg.full_res, cfg.full_res):
        raise ShapeError(f"{args.input} is {image.shape[2]}x{image.shape[1]}, model expects "
                         f"{cfg.full_res}x{cfg.full_res}")
    mode = "deterministic" if cfg.deterministic_inference else "stochastic"
    mask = infer_mask(state.models.generator, image[None], state.gs, cfg.threshold, mode)[0]
    name = args.output or f"{Path(args.input).stem}_mask.pgm"
    dest = _inside(out_dir, name)
    dest.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(dest, mask.astype(np.uint8) * 255)
    out(f"wrote {dest} ({int(mask.sum())} positive pixels)")
    return 0


def cmd_gradcheck(cfg: Config, args, out=print) -> int:
    results = run_suite(args.instances, cfg.seed, log=out)
    failed = [r.name for r in results if not r.passed]
    out(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    if failed:
        raise ProgsegError(f"gradient check failed: {', '.join(failed)}")
    return 0


def cmd_gendata(cfg: Config, args, out=print) -> int:
    out_dir = _out_dir(cfg)
    ds = synthetic_dataset(cfg.n_scenes, cfg.scene_spec(), cfg.scene_seed, cfg.stages[0])
    manifest = write_dataset(out_dir, ds)
    out(f"wrote {len(ds)} scenes ({cfg.full_res}px) -> {manifest}")
    return 0


def cmd_compare(cfg: Config, args, out=print) -> int:
    out_dir = _out_dir(cfg)
    ds = load_dataset(cfg)
    rec_dir = out_dir / "records"
    rec_dir.mkdir(exist_ok=True)

    def on_result(r):
        write_records(rec_dir / f"{r.mode}_seed{r.seed}.csv", r.records, cfg, r.mode, r.seed)
        out(f"{r.mode} seed {r.seed}: train {r.train.accuracy:.4f}  test {r.test.accuracy:.4f}")

    report = compare_models(ds, cfg, on_result=on_result)
    (out_dir / "comparison.csv").write_text(report.to_csv(), encoding="utf-8")
    summary = report.summary()
    (out_dir / "summary.txt").write_text(summary, encoding="utf-8")
    out(summary.rstrip("\n"))
    return 0


def run(argv=None, out=print) -> int:
    """Parse ``argv`` and dispatch; raises ProgsegError on failure."""
    args, rest = _build_parser().parse_known_args(argv)
    overrides = _split_overrides(rest)
    if args.command == "eval":
        return cmd_eval(args, overrides, out)
    if args.command == "infer":
        return cmd_infer(args, overrides, out)
    cfg = parse_config(args.config, overrides)
    return {"train": cmd_train, "gradcheck": cmd_gradcheck, "gendata": cmd_gendata,
            "compare": cmd_compare}[args.command](cfg, args, out)


def main(argv=None) -> int:
    try:
        return run(argv)
    except ProgsegError as e:
        msg = " ".join(str(e).split())
        print(f"error: {e.code}: {msg}", file=sys.stderr)
        return 2 if isinstance(e, UsageError) else 1
    except OSError as e:
        print(f"error: IO: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
