"""Challenge-style detection scoring.

Per image, predictions are greedily matched to ground-truth boxes in
confidence order at a set of IoU thresholds; the image's score is the mean
over thresholds of TP / (TP + FP + FN). The dataset score averages the
defined per-image values. A no-false-negative variant (TP / (TP + FP))
supports the second evaluation setting.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

from .errors import FormatError
from .image import BBox, iou

PREDICTION_HEADER = ["patientId", "PredictionString"]


@dataclass(frozen=True)
class Detection:
    box: BBox
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")


@dataclass(frozen=True)
class MatchResult:
    threshold: float
    tp: int
    fp: int
    fn: int
    assignments: tuple[tuple[int, int, float], ...]  # (pred index, gt index, iou)


@dataclass(frozen=True)
class ThresholdSet:
    start: float
    step: float
    stop: float

    def __post_init__(self):
        if not (0.0 < self.start <= self.stop <= 1.0):
            raise ValueError("need 0 < start <= stop <= 1")
        if self.step <= 0:
            raise ValueError("step must be positive")

    def values(self) -> tuple[float, ...]:
        """start, start+step, ... snapped to a decimal grid; includes stop when
        (stop - start) is an integer multiple of step within 1e-9."""
        count = int((self.stop - self.start) / self.step + 1e-9) + 1
        return tuple(round(self.start + i * self.step, 10) for i in range(count))

    @classmethod
    def parse(cls, text: str) -> "ThresholdSet":
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"expected start:step:stop, got {text!r}")
        try:
            start, step, stop = (float(p) for p in parts)
        except ValueError as exc:
            raise ValueError(f"non-numeric threshold spec {text!r}") from exc
        return cls(start, step, stop)


FIRST_SETTING = ThresholdSet(0.4, 0.05, 0.75)
SECOND_SETTING = ThresholdSet(0.4, 0.1, 0.6)


def match_detections(preds: list[Detection], gts: list[BBox], t: float,
                     inclusive: bool = True) -> MatchResult:
    """Greedy matching: confidence-descending predictions each take the
    unmatched ground-truth box of highest IoU, provided IoU passes ``t``."""
    if not 0.0 < t <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))
    taken = [False] * len(gts)
    assignments = []
    for pi in order:
        best_j = -1
        best_iou = 0.0
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            v = iou(preds[pi].box, g)
            if v > best_iou:
                best_iou = v
                best_j = j
        passes = best_iou >= t if inclusive else best_iou > t
        if best_j >= 0 and passes:
            taken[best_j] = True
            assignments.append((pi, best_j, best_iou))
    tp = len(assignments)
    return MatchResult(
        threshold=t, tp=tp, fp=len(preds) - tp, fn=len(gts) - tp,
        assignments=tuple(sorted(assignments)),
    )


def image_ap(preds: list[Detection], gts: list[BBox], thresholds: ThresholdSet,
             count_fn: bool = True, inclusive: bool = True) -> float | None:
    """Mean over thresholds of TP/(TP+FP+FN) (or TP/(TP+FP) when not counting
    false negatives). Returns None for images with no boxes on either side;
    an empty-denominator threshold with ground truth present contributes 0."""
    if not preds and not gts:
        return None
    total = 0.0
    values = thresholds.values()
    for t in values:
        m = match_detections(preds, gts, t, inclusive=inclusive)
        denom = m.tp + m.fp + m.fn if count_fn else m.tp + m.fp
        total += m.tp / denom if denom > 0 else 0.0
    return total / len(values)


@dataclass(frozen=True)
class ThresholdCounts:
    threshold: float
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class EvalReport:
    mean_ap: float
    count_fn: bool
    per_threshold: tuple[ThresholdCounts, ...]
    images_scored: int
    images_excluded: int


def dataset_map(per_image: list[tuple[list[Detection], list[BBox]]],
                thresholds: ThresholdSet, count_fn: bool = True,
                inclusive: bool = True) -> EvalReport:
    """Average the defined per-image scores and aggregate per-threshold counts."""
    values = thresholds.values()
    agg = {t: [0, 0, 0] for t in values}
    scores = []
    excluded = 0
    for preds, gts in per_image:
        score = image_ap(preds, gts, thresholds, count_fn=count_fn, inclusive=inclusive)
        if score is None:
            excluded += 1
            continue
        scores.append(score)
        for t in values:
            m = match_detections(preds, gts, t, inclusive=inclusive)
            agg[t][0] += m.tp
            agg[t][1] += m.fp
            agg[t][2] += m.fn
    if not scores:
        raise ValueError("no image had predictions or ground truth to score")
    return EvalReport(
        mean_ap=sum(scores) / len(scores),
        count_fn=count_fn,
        per_threshold=tuple(ThresholdCounts(t, *agg[t]) for t in values),
        images_scored=len(scores),
        images_excluded=excluded,
    )


# ---------------------------------------------------------------------------
# challenge submission files


def parse_prediction_string(text: str) -> list[Detection]:
    """Space-separated repeating groups ``confidence x y width height``."""
    tokens = text.split()
    if not tokens:
        return []
    if len(tokens) % 5 != 0:
        raise ValueError(f"prediction string has {len(tokens)} tokens, not a multiple of 5")
    out = []
    for i in range(0, len(tokens), 5):
        try:
            conf, x, y, w, h = (float(v) for v in tokens[i:i + 5])
        except ValueError as exc:
            raise ValueError(f"non-numeric value in prediction group {i // 5 + 1}") from exc
        out.append(Detection(box=BBox(x, y, w, h), confidence=conf))
    return out


def load_predictions(path) -> dict[str, list[Detection]]:
    """Read a ``patientId,PredictionString`` submission CSV."""
    out: dict[str, list[Detection]] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != PREDICTION_HEADER:
            raise FormatError(f"{path}: expected header {','.join(PREDICTION_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise FormatError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            pid, pstring = row
            if pid in out:
                raise FormatError(f"{path}:{lineno}: duplicate patient {pid!r}")
            try:
                out[pid] = parse_prediction_string(pstring)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return out


def format_prediction_string(dets: list[Detection]) -> str:
    return " ".join(
        f"{d.confidence:g} {d.box.x:g} {d.box.y:g} {d.box.w:g} {d.box.h:g}" for d in dets
    )


def render_report_csv(report: EvalReport) -> str:
    lines = ["metric,value"]
    lines.append(f"map,{report.mean_ap:.12g}")
    lines.append(f"count_fn,{int(report.count_fn)}")
    lines.append(f"images_scored,{report.images_scored}")
    lines.append(f"images_excluded,{report.images_excluded}")
    for tc in report.per_threshold:
        tag = f"{tc.threshold:.4f}"
        lines.append(f"tp@{tag},{tc.tp}")
        lines.append(f"fp@{tag},{tc.fp}")
        lines.append(f"fn@{tag},{tc.fn}")
    return "\n".join(lines) + "\n"


def render_report_text(report: EvalReport) -> str:
    mode = "TP/(TP+FP+FN)" if report.count_fn else "TP/(TP+FP), FN ignored"
    lines = [
        f"mAP over {len(report.per_threshold)} IoU thresholds ({mode}): "
        f"{report.mean_ap:.6f}",
        f"images scored: {report.images_scored} "
        f"(excluded with no boxes or predictions: {report.images_excluded})",
        "threshold   TP   FP   FN",
    ]
    for tc in report.per_threshold:
        lines.append(f"   {tc.threshold:.2f}   {tc.tp:4d} {tc.fp:4d} {tc.fn:4d}")
    return "\n".join(lines) + "\n"
