"""IoU / Dice metrics and the three-model comparison report."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset
from .graph import NetworkSpec, predict
from .sim import SimConfig, average_firing_rate, run_snn_batched
from .tensor import ShapeError

MASK_THRESHOLD = 0.5


def iou(box_a, box_b) -> float:
    """Intersection over union of two ``(x_min, y_min, x_max, y_max)`` boxes.

    A box with ``min >= max`` on either axis has zero area.
    """
    ax0, ay0, ax1, ay1 = (float(v) for v in box_a)
    bx0, by0, bx1, by1 = (float(v) for v in box_b)
    area_a = max(ax1 - ax0, 0.0) * max(ay1 - ay0, 0.0)
    area_b = max(bx1 - bx0, 0.0) * max(by1 - by0, 0.0)
    iw = max(min(ax1, bx1) - max(ax0, bx0), 0.0)
    ih = max(min(ay1, by1) - max(ay0, by0), 0.0)
    inter = iw * ih
    union = area_a + area_b - inter
    if area_a == 0.0 or area_b == 0.0 or union <= 0.0:
        return 0.0
    return inter / union


def dice(pred, gt) -> float:
    """``2|P & G| / (|P| + |G|)`` on binary masks; 1.0 when both are empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"dice: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def masks_from_logits(logits) -> np.ndarray:
    # sigmoid(x) > 0.5  <=>  x > 0
    return np.asarray(logits) > np.log(MASK_THRESHOLD / (1 - MASK_THRESHOLD))


def mean_metric(task: str, outputs, targets) -> float:
    if task == "locnet":
        return float(np.mean([iou(o, t) for o, t in zip(outputs, targets)]))
    if task == "cae":
        preds = masks_from_logits(outputs)
        return float(np.mean([dice(p, t) for p, t in zip(preds, targets)]))
    raise ValueError(f"unknown task {task!r}")


@dataclass(frozen=True)
class EvalReport:
    tag: str
    metric: str
    value: float
    firing_rate: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"metric value {self.value} outside [0, 1]")

    def text_line(self) -> str:
        rate = "N/A" if self.firing_rate is None else f"{self.firing_rate:.4f} Hz"
        return f"{self.tag:<10} {self.metric:<5} {self.value:.4f}  avg firing rate {rate}"

    def kv_lines(self) -> list[str]:
        lines = [f"{self.tag} {self.metric} {self.value!r}"]
        if self.firing_rate is not None:
            lines.append(f"{self.tag} firing_rate_hz {self.firing_rate!r}")
        return lines


METRIC_FOR_TASK = {"locnet": "iou", "cae": "dice"}


def evaluate(net: NetworkSpec, data: Dataset, sim: SimConfig | None = None,
             tag: str | None = None, batch_size: int = 32) -> EvalReport:
    """Mean IoU or Dice over ``data``; spiking networks are run with ``sim``
    and also report their average firing rate."""
    if data.task != net.task:
        raise ValueError(f"{net.task} network cannot be evaluated on {data.task} data")
    tag = tag or net.stage
    metric = METRIC_FOR_TASK[net.task]
    if net.mode == "ann":
        outputs = predict(net, data.images, batch_size)
        return EvalReport(tag, metric, mean_metric(net.task, outputs, data.targets))
    outputs, rec = run_snn_batched(net, data.images, sim or SimConfig(), batch_size)
    return EvalReport(tag, metric, mean_metric(net.task, outputs, data.targets),
                      average_firing_rate(rec))


def format_report(reports: Sequence[EvalReport]) -> str:
    header = f"{'model':<10} {'metric':<5} {'value':>6}  firing rate"
    return "\n".join([header] + [r.text_line() for r in reports]) + "\n"


def format_kv(reports: Sequence[EvalReport]) -> str:
    return "\n".join(line for r in reports for line in r.kv_lines()) + "\n"


def parse_kv(text: str) -> dict[tuple[str, str], float]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            tag, name, value = line.split()
            out[(tag, name)] = float(value)
    return out
