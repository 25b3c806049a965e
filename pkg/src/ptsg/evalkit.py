"""Interval IoU, R@1 at IoU thresholds and mIoU, plus table / record emission."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EVAL_FORMAT = "cu-eval/1"
DEFAULT_THRESHOLDS = (0.3, 0.5, 0.7)


def _bounds(x):
    if hasattr(x, "start"):
        return float(x.start), float(x.end)
    return float(x[0]), float(x[1])


def iou(a, b) -> float:
    """Temporal IoU of two intervals; 0 when the union has zero length."""
    a0, a1 = _bounds(a)
    b0, b1 = _bounds(b)
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = max(a1, b1) - min(a0, b0) if inter > 0 else (a1 - a0) + (b1 - b0)
    return inter / union if union > 0 else 0.0


@dataclass
class EvalReport:
    thresholds: list[float]
    recall: list[float]  # percent, one per threshold
    miou: float  # percent
    n: int
    tag: str = "run"
    ious: list[float] = field(default_factory=list, repr=False)

    def recall_at(self, m: float) -> float:
        for t, r in zip(self.thresholds, self.recall):
            if math.isclose(t, m):
                return r
        raise KeyError(m)


def evaluate(preds: dict, gts: dict, thresholds=DEFAULT_THRESHOLDS, tag: str = "run") -> EvalReport:
    """R@1 at each threshold (IoU strictly greater than it) and mIoU, in percent."""
    if not preds:
        raise ValueError("no predictions to evaluate")
    thresholds = [float(t) for t in thresholds]
    for t in thresholds:
        if not 0 < t < 1:
            raise ValueError(f"threshold {t} outside (0, 1)")
    for sid in preds:
        if sid not in gts:
            raise KeyError(f"no ground truth for {sid}")
    ious = np.array([iou(preds[sid], gts[sid]) for sid in preds])
    recall = [100.0 * float(np.mean(ious > t)) for t in thresholds]
    return EvalReport(thresholds, recall, 100.0 * float(ious.mean()), len(ious), tag, ious.tolist())


def format_table(reports: list[EvalReport]) -> str:
    if not reports:
        raise ValueError("no reports to emit")
    ths = reports[0].thresholds
    width = max(8, max(len(r.tag) for r in reports))
    head = f"{'':<{width}} " + " ".join(f"{'R@' + format(t, 'g'):>7}" for t in ths) + f" {'mIoU':>7}"
    rows = [head]
    for r in reports:
        rows.append(f"{r.tag:<{width}} " + " ".join(f"{v:7.2f}" for v in r.recall) + f" {r.miou:7.2f}")
    return "\n".join(rows) + "\n"


def format_records(reports: list[EvalReport]) -> str:
    if not reports:
        raise ValueError("no reports to emit")
    lines = [EVAL_FORMAT]
    for r in reports:
        if not r.tag or any(c.isspace() for c in r.tag):
            raise ValueError(f"report tag {r.tag!r} must be a single token")
        lines.append(f"{r.tag} n {r.n}")
        lines.extend(f"{r.tag} {t!r} {v!r}" for t, v in zip(r.thresholds, r.recall))
        lines.append(f"{r.tag} miou {r.miou!r}")
    return "\n".join(lines) + "\n"


def emit_report(reports: list[EvalReport], fmt: str = "table", path=None) -> str:
    """Render ``reports`` as a fixed-width table or ``cu-eval/1`` records; write if ``path``."""
    if fmt == "table":
        text = format_table(reports)
    elif fmt == "records":
        text = format_records(reports)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if path is not None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text)
        os.replace(tmp, path)
    return text


def parse_records(text: str) -> list[EvalReport]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != EVAL_FORMAT:
        raise ValueError(f"missing {EVAL_FORMAT} header")
    reports: dict[str, EvalReport] = {}
    for ln in lines[1:]:
        tag, key, val = ln.split()
        rep = reports.setdefault(tag, EvalReport([], [], float("nan"), 0, tag))
        if key == "n":
            rep.n = int(val)
        elif key == "miou":
            rep.miou = float(val)
        else:
            rep.thresholds.append(float(key))
            rep.recall.append(float(val))
    return list(reports.values())


def load_records(path) -> list[EvalReport]:
    return parse_records(Path(path).read_text())
