"""Per-pixel segmentation metrics and the unet / gan / progressive comparison."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .progan import GrowthState, predict_proba

REPORT_FIELDS = ("mode", "split", "accuracy", "precision", "recall", "iou", "fpr",
                 "tp", "fp", "tn", "fn", "seed")


def _ratio(num, den, empty):
    return float(num / den) if den else float(empty)


@dataclass(frozen=True)
class Metrics:
    """Pixel counts and the ratios derived from them.

    Zero-denominator conventions: precision, recall and false-positive rate are
    0; IoU is 1 (both masks empty means perfect overlap).
    """

    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def per_pixel_accuracy(self) -> float:
        return _ratio(self.tp + self.tn, self.total, 0.0)

    accuracy = per_pixel_accuracy

    @property
    def per_pixel_error(self) -> float:
        return 1.0 - self.per_pixel_accuracy

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp, 0.0)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn, 0.0)

    @property
    def iou(self) -> float:
        return _ratio(self.tp, self.tp + self.fp + self.fn, 1.0)

    @property
    def false_positive_rate(self) -> float:
        return _ratio(self.fp, self.fp + self.tn, 0.0)

    def __add__(self, other: "Metrics") -> "Metrics":
        return Metrics(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn,
                       self.fn + other.fn)

    def as_row(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
                "iou": self.iou, "fpr": self.false_positive_rate,
                "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def _check_binary(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype == bool:
        return a
    if not np.isin(a, (0, 1)).all():
        raise ContractError(f"{name} is not binary")
    return a.astype(bool)


def per_pixel_metrics(pred, truth) -> Metrics:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} vs truth {truth.shape}")
    p = _check_binary(pred, "prediction")
    t = _check_binary(truth, "truth")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(p.size - tp - fp - fn)
    return Metrics(tp, fp, tn, fn)


def predict_masks(g, images: np.ndarray, gs: GrowthState, threshold: float = 0.5,
                  mode: str = "deterministic") -> np.ndarray:
    return (predict_proba(g, images, gs, mode) >= threshold).astype(np.uint8)


def evaluate_model(g, gs: GrowthState, dataset, threshold: float = 0.5) -> Metrics:
    """Micro-averaged metrics: pixel counts pooled over every sample of the split."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty split")
    pred = predict_masks(g, dataset.images, gs, threshold)
    return per_pixel_metrics(pred, dataset.masks_at(gs.resolution))


def per_image_metrics(pred: np.ndarray, truth: np.ndarray) -> list:
    return [per_pixel_metrics(p, t) for p, t in zip(pred, truth)]


def macro_accuracy(metrics: list) -> float:
    return float(np.mean([m.accuracy for m in metrics]))


# -- comparison report ------------------------------------------------------------

@dataclass
class RunResult:
    mode: str
    seed: int
    train: Metrics
    test: Metrics
    records: list = field(default_factory=list, repr=False)
    test_image_fpr: list = field(default_factory=list, repr=False)


@dataclass
class ComparisonReport:
    runs: list
    seeds: list
    config_digest: str = ""

    @property
    def modes(self) -> list:
        out = []
        for r in self.runs:
            if r.mode not in out:
                out.append(r.mode)
        return out

    def cell(self, mode: str, split: str, seed=None) -> Metrics:
        for r in self.runs:
            if r.mode == mode and (seed is None or r.seed == seed):
                return getattr(r, split)
        raise KeyError((mode, split, seed))

    def median(self, mode: str, split: str, metric: str) -> float:
        vals = [getattr(getattr(r, split), metric) for r in self.runs if r.mode == mode]
        return float(np.median(vals))

    def gap(self, mode: str) -> float:
        """Median train accuracy minus median test accuracy."""
        return self.median(mode, "train", "accuracy") - self.median(mode, "test", "accuracy")

    def rows(self) -> list:
        rows = []
        for r in self.runs:
            for split in ("train", "test"):
                rows.append({"mode": r.mode, "split": split, **getattr(r, split).as_row(),
                             "seed": r.seed})
        for mode in self.modes:
            for split in ("train", "test"):
                row = {"mode": mode, "split": split}
                for key in REPORT_FIELDS[2:-1]:
                    attr = "false_positive_rate" if key == "fpr" else key
                    row[key] = self.median(mode, split, attr)
                row["seed"] = "median"
                rows.append(row)
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# progseg-comparison v1 config_digest={self.config_digest}\n")
        w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.rows():
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"{'':12}" + "".join(f"{m:>14}" for m in self.modes)]
        for split, label in (("train", "Training"), ("test", "Testing")):
            lines.append(f"{label + ' acc':12}" + "".join(
                f"{self.median(m, split, 'accuracy'):14.4f}" for m in self.modes))
        lines.append(f"{'Test FPR':12}" + "".join(
            f"{self.median(m, 'test', 'false_positive_rate'):14.4f}" for m in self.modes))
        lines.append(f"{'Train-test':12}" + "".join(f"{self.gap(m):14.4f}" for m in self.modes))
        lines.append(f"seeds: {', '.join(str(s) for s in self.seeds)}; medians across seeds")
        return "\n".join(lines) + "\n"
