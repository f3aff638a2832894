"""Detection metrics: IoU, NMS, AP at a fixed IoU and per-class summaries.

Boxes are ``(left, top, width, height)`` in pixels. Score ties are broken
by input order everywhere, so every function here is deterministic.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import AnnotationError, EvaluationError

__all__ = ["VISDRONE_CLASSES", "GroundTruth", "Det", "ClassRow", "EvalSummary", "iou", "nms",
           "match_detections", "average_precision", "evaluate", "parse_visdrone",
           "parse_detections", "format_detection_lines"]

VISDRONE_CLASSES = {
    1: "pedestrian", 2: "people", 3: "bicycle", 4: "car", 5: "van",
    6: "truck", 7: "tricycle", 8: "awning-tricycle", 9: "bus", 10: "motor",
}
IGNORED_REGION = 0
OTHERS = 11

TP, FP, IGNORED = "tp", "fp", "ignored"


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    box: Tuple[float, float, float, float]
    class_id: int
    ignore: bool = False


@dataclass(frozen=True)
class Det:
    image_id: str
    class_id: int
    score: float
    box: Tuple[float, float, float, float]


def iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (aw * ah + bw * bh - inter))


def _by_score(dets: Sequence[Det]) -> List[Det]:
    # sorted() is stable, so equal scores keep their input order
    return sorted(dets, key=lambda d: -d.score)


def nms(dets: Sequence[Det], iou_threshold: float = 0.5) -> List[Det]:
    """Greedy suppression within each (image, class); survivors in score order."""
    kept: List[Det] = []
    for d in _by_score(dets):
        if all(k.image_id != d.image_id or k.class_id != d.class_id
               or iou(k.box, d.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def match_detections(dets: Sequence[Det], gts: Sequence[GroundTruth],
                     iou_threshold: float = 0.5) -> Tuple[List[Det], List[str], List[Optional[int]]]:
    """Greedy score-order matching for one class.

    Each detection, best score first, takes the unmatched non-ignored GT
    of its image with the highest IoU (lowest index on ties) provided the
    IoU reaches ``iou_threshold``. Unmatched detections overlapping an
    ignore region by the same criterion are labelled ``ignored``.
    Returns the sorted detections, their labels and matched GT indices.
    """
    order = _by_score(dets)
    per_image: Dict[str, List[int]] = {}
    for j, g in enumerate(gts):
        per_image.setdefault(g.image_id, []).append(j)
    used = [False] * len(gts)
    labels, matched = [], []
    for d in order:
        best, best_iou = None, iou_threshold
        hits_ignore = False
        for j in per_image.get(d.image_id, ()):
            g = gts[j]
            v = iou(d.box, g.box)
            if g.ignore:
                hits_ignore = hits_ignore or v >= iou_threshold
            elif not used[j] and v >= best_iou and (best is None or v > best_iou):
                best, best_iou = j, v
        if best is not None:
            used[best] = True
            labels.append(TP)
        else:
            labels.append(IGNORED if hits_ignore else FP)
        matched.append(best)
    return order, labels, matched


def _ap_from_labels(labels: Sequence[str], n_pos: int) -> float:
    flags = [l == TP for l in labels if l != IGNORED]
    if not flags:
        return 0.0
    tp = np.cumsum(flags, dtype=np.float64)
    fp = np.cumsum([not f for f in flags], dtype=np.float64)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(dets: Sequence[Det], gts: Sequence[GroundTruth],
                      iou_threshold: float = 0.5) -> Optional[float]:
    """All-point interpolated AP for one class; None when the class has no
    non-ignored ground truth."""
    n_pos = sum(1 for g in gts if not g.ignore)
    if n_pos == 0:
        return None
    _, labels, _ = match_detections(dets, gts, iou_threshold)
    return _ap_from_labels(labels, n_pos)


# ---------------------------------------------------------------- summary


def _f1(p, r):
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class ClassRow:
    name: str
    class_id: Optional[int]
    ap: Optional[float]
    precision: float
    recall: float
    f1: float
    n_gt: int = 0
    n_det: int = 0
    tp: int = 0
    fp: int = 0


@dataclass
class EvalSummary:
    rows: List[ClassRow]
    overall: ClassRow
    conf_threshold: float
    nms_threshold: float
    iou_threshold: float

    @property
    def map(self) -> Optional[float]:
        return self.overall.ap

    def all_rows(self) -> List[ClassRow]:
        return self.rows + [self.overall]

    def to_text(self) -> str:
        pct = lambda v: "n/a" if v is None else f"{100 * v:.1f}"
        lines = [f"precision/recall/F1 at confidence > {self.conf_threshold:g}, "
                 f"NMS {self.nms_threshold:g}, AP@{self.iou_threshold:g}",
                 f"{'class':<16} {'P':>6} {'R':>6} {'F1':>6} {'AP':>6} {'GT':>6} {'det':>6}"]
        for r in self.all_rows():
            lines.append(f"{r.name:<16} {pct(r.precision):>6} {pct(r.recall):>6} {pct(r.f1):>6} "
                         f"{pct(r.ap):>6} {r.n_gt:>6} {r.n_det:>6}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "f1", "ap", "n_gt", "n_det", "tp", "fp"])
        pct = lambda v: "" if v is None else f"{100 * v:.1f}"
        for r in self.all_rows():
            w.writerow([r.name, pct(r.precision), pct(r.recall), pct(r.f1), pct(r.ap),
                        r.n_gt, r.n_det, r.tp, r.fp])
        return buf.getvalue()


def evaluate(dets: Iterable[Det], gts: Iterable[GroundTruth], conf_threshold: float = 0.1,
             nms_threshold: float = 0.5, iou_threshold: float = 0.5,
             class_names: Optional[Dict[int, str]] = None) -> EvalSummary:
    """Confidence filter (score > conf), per-image NMS, then per-class AP and P/R/F1.

    The overall row averages AP (mAP), precision and recall over classes
    with ground truth; its F1 is computed from those averages.
    """
    gts = list(gts)
    if not gts:
        raise EvaluationError("no ground truth to evaluate against")
    names = VISDRONE_CLASSES if class_names is None else class_names
    kept = nms([d for d in dets if d.score > conf_threshold], nms_threshold)
    ignores = [g for g in gts if g.ignore]
    classes = sorted({g.class_id for g in gts if not g.ignore} | {d.class_id for d in kept})
    rows = []
    for c in classes:
        cd = [d for d in kept if d.class_id == c]
        cg = [g for g in gts if not g.ignore and g.class_id == c] + ignores
        n_pos = len(cg) - len(ignores)
        _, labels, _ = match_detections(cd, cg, iou_threshold)
        tp, fp = labels.count(TP), labels.count(FP)
        ap = _ap_from_labels(labels, n_pos) if n_pos else None
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / n_pos if n_pos else 0.0
        rows.append(ClassRow(names.get(c, str(c)), c, ap, p, r, _f1(p, r), n_pos, len(cd), tp, fp))
    defined = [r for r in rows if r.ap is not None]
    if not defined:
        raise EvaluationError("every ground truth is an ignore region")
    mp = float(np.mean([r.precision for r in defined]))
    mr = float(np.mean([r.recall for r in defined]))
    overall = ClassRow("overall", None, float(np.mean([r.ap for r in defined])), mp, mr, _f1(mp, mr),
                       sum(r.n_gt for r in rows), sum(r.n_det for r in rows),
                       sum(r.tp for r in rows), sum(r.fp for r in rows))
    return EvalSummary(rows, overall, conf_threshold, nms_threshold, iou_threshold)


# ---------------------------------------------------------------- file formats


def parse_visdrone(text: str, image_id: str = "") -> List[GroundTruth]:
    """One annotation file: ``left,top,width,height,score,category,truncation,occlusion``.

    Category 0 becomes an ignore region, 11 ("others") is dropped.
    """
    out = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip().rstrip(",")
        if not line:
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) != 8:
            raise AnnotationError(f"expected 8 comma-separated fields, got {len(fields)}", n)
        try:
            left, top, w, h, _, cat, _, _ = (int(f) for f in fields)
        except ValueError:
            raise AnnotationError(f"non-integer field in {raw.strip()!r}", n) from None
        if cat == OTHERS:
            continue
        if cat != IGNORED_REGION and cat not in VISDRONE_CLASSES:
            raise AnnotationError(f"unknown category {cat}", n)
        if w <= 0 or h <= 0:
            raise AnnotationError(f"non-positive box size {w}x{h}", n)
        out.append(GroundTruth(image_id, (left, top, w, h), cat, cat == IGNORED_REGION))
    return out


def parse_detections(text: str) -> List[Det]:
    """``image_id class_id score x y w h`` per line, where (x, y) is the box centre."""
    out = []
    for n, raw in enumerate(text.splitlines(), 1):
        fields = raw.split()
        if not fields or fields[0].startswith("#"):
            continue
        if len(fields) != 7:
            raise AnnotationError(f"expected 7 fields, got {len(fields)}", n)
        try:
            cls = int(fields[1])
            score, x, y, w, h = (float(f) for f in fields[2:])
        except ValueError:
            raise AnnotationError(f"bad number in {raw.strip()!r}", n) from None
        if not all(np.isfinite([score, x, y, w, h])) or w <= 0 or h <= 0:
            raise AnnotationError("box must be finite with positive size", n)
        out.append(Det(fields[0], cls, score, (x - w / 2, y - h / 2, w, h)))
    return out


def format_detection_lines(dets: Iterable[Det]) -> str:
    lines = []
    for d in dets:
        l, t, w, h = d.box
        lines.append(f"{d.image_id} {d.class_id} {d.score:.6f} {l + w / 2:.3f} {t + h / 2:.3f} "
                     f"{w:.3f} {h:.3f}\n")
    return "".join(lines)
