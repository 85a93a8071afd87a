"""Heatmap-to-bounding-box extraction and localization scoring.

Boxes are produced by min-max normalizing each class heatmap, binarizing
at a per-class threshold (0.8 for Cardiomegaly, 0.9 for everything else
by default), labeling 8-connected components, and taking each component's
tight rectangle scaled up from the heatmap grid to image coordinates.

Scoring matches every ground-truth box against the best-overlapping
prediction of the same image and class, and tabulates detection rates at
IoU thresholds 0.1 through 0.7 plus a per-class mean IoU.
"""

from __future__ import annotations

import io
from collections import deque
from dataclasses import dataclass

import numpy as np

__all__ = [
    "BBox",
    "LocalizationReport",
    "normalize_heatmap",
    "default_thresholds",
    "heatmap_to_boxes",
    "iou",
    "score_localization",
    "boxes_to_csv",
    "DEFAULT_IOU_THRESHOLDS",
]

DEFAULT_IOU_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
CARDIOMEGALY_THRESHOLD = 0.8
DEFAULT_BOX_THRESHOLD = 0.9


@dataclass
class BBox:
    """Axis-aligned rectangle, top-left corner plus extent, in pixels."""

    x: float
    y: float
    w: float
    h: float
    class_id: int = 0
    score: float = 0.0

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box extent must be positive, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def _heatmap_array(h) -> np.ndarray:
    # accepts Heatmap, Tensor, or ndarray
    values = getattr(h, "values", h)
    data = getattr(values, "data", values)
    return np.asarray(data, dtype=np.float64)


def normalize_heatmap(h):
    """Min-max normalize each (image, class) map to [0, 1].

    Constant maps normalize to all zeros.  Idempotent for non-constant
    maps.  Returns a plain array of the input's shape; accepts arrays of
    any rank >= 2 where the last two axes are spatial.
    """
    arr = _heatmap_array(h)
    if not np.all(np.isfinite(arr)):
        raise ValueError("normalize_heatmap: non-finite heatmap values")
    lo = arr.min(axis=(-2, -1), keepdims=True)
    hi = arr.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    out = np.zeros_like(arr)
    np.divide(arr - lo, span, out=out, where=span > 0)
    return out


def default_thresholds(class_names) -> np.ndarray:
    """0.9 for every class, 0.8 for Cardiomegaly when present."""
    t = np.full(len(class_names), DEFAULT_BOX_THRESHOLD)
    for i, name in enumerate(class_names):
        if name == "Cardiomegaly":
            t[i] = CARDIOMEGALY_THRESHOLD
    return t


_NEIGHBORS_8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def label_components(mask: np.ndarray) -> tuple:
    """8-connected component labeling by scan-order flood fill.

    Returns (labels, count) where labels holds 0 for background and
    1..count for components, numbered in first-encounter scan order.
    """
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    count = 0
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or labels[r, c]:
                continue
            count += 1
            queue = deque([(r, c)])
            labels[r, c] = count
            while queue:
                rr, cc = queue.popleft()
                for dr, dc in _NEIGHBORS_8:
                    nr, nc = rr + dr, cc + dc
                    if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not labels[nr, nc]:
                        labels[nr, nc] = count
                        queue.append((nr, nc))
    return labels, count


def heatmap_to_boxes(normalized, image_size, thresholds=None, min_area: float = 0.0):
    """Extract one box per connected above-threshold component, per class.

    ``normalized`` is a (C, Hh, Ww) array of per-class maps already scaled
    to [0, 1]; ``image_size`` is (H, W) in pixels.  Cell rectangles are
    scaled up by the grid-to-image stride and clipped to the image.
    ``min_area`` (in image pixels) discards speckle components.
    """
    maps = _heatmap_array(normalized)
    if maps.ndim != 3:
        raise ValueError(f"heatmap_to_boxes: expected (C, H, W) maps, got {maps.shape}")
    n_classes, grid_h, grid_w = maps.shape
    img_h, img_w = image_size
    if thresholds is None:
        thresholds = np.full(n_classes, DEFAULT_BOX_THRESHOLD)
    thresholds = np.broadcast_to(np.asarray(thresholds, dtype=np.float64), (n_classes,))
    if np.any(thresholds <= 0) or np.any(thresholds >= 1):
        raise ValueError("heatmap_to_boxes: thresholds must lie in (0, 1)")
    sy = img_h / grid_h
    sx = img_w / grid_w

    boxes = []
    for ci in range(n_classes):
        mask = maps[ci] >= thresholds[ci]
        if not mask.any():
            continue
        labels, count = label_components(mask)
        for comp in range(1, count + 1):
            rows, cols = np.nonzero(labels == comp)
            r0, r1 = rows.min(), rows.max()
            c0, c1 = cols.min(), cols.max()
            x = c0 * sx
            y = r0 * sy
            w = (c1 - c0 + 1) * sx
            h = (r1 - r0 + 1) * sy
            # clip to image bounds
            x2 = min(x + w, img_w)
            y2 = min(y + h, img_h)
            x, y = max(x, 0.0), max(y, 0.0)
            if x2 - x <= 0 or y2 - y <= 0 or (x2 - x) * (y2 - y) < min_area:
                continue
            score = float(maps[ci, r0 : r1 + 1, c0 : c1 + 1].mean())
            boxes.append(BBox(x, y, x2 - x, y2 - y, class_id=ci, score=score))
    return boxes


@dataclass
class LocalizationReport:
    """Detection accuracy per class and IoU threshold, plus mean IoU.

    ``detection_rate[c][t]`` is the fraction of ground-truth boxes of
    class c whose best-matching prediction reaches IoU >= thresholds[t];
    NaN marks classes with no ground truth.
    """

    class_names: tuple
    thresholds: tuple
    detection_rate: np.ndarray  # (C, T)
    mean_iou: np.ndarray  # (C,)
    gt_counts: np.ndarray  # (C,)

    def __post_init__(self):
        # rates can only shrink as the threshold rises
        rates = self.detection_rate[self.gt_counts > 0]
        if rates.size and np.any(np.diff(rates, axis=1) > 1e-12):
            raise AssertionError("detection rates must be non-increasing in the threshold")

    @property
    def macro_mean_iou(self) -> float:
        defined = self.gt_counts > 0
        return float(self.mean_iou[defined].mean()) if defined.any() else float("nan")

    def to_text(self) -> str:
        width = max(12, max(len(n) for n in self.class_names) + 2)
        out = io.StringIO()
        header = "T(IoU)".ljust(8) + "".join(n.ljust(width) for n in self.class_names)
        out.write(header + "\n")
        for ti, t in enumerate(self.thresholds):
            row = f"{t:<8.1f}"
            for ci in range(len(self.class_names)):
                if self.gt_counts[ci] == 0:
                    row += "n/a".ljust(width)
                else:
                    row += f"{self.detection_rate[ci, ti]:.4f}".ljust(width)
            out.write(row + "\n")
        row = "IoU".ljust(8)
        for ci in range(len(self.class_names)):
            cell = "n/a" if self.gt_counts[ci] == 0 else f"{self.mean_iou[ci]:.4f}"
            row += cell.ljust(width)
        out.write(row + "\n")
        return out.getvalue()

    def to_csv(self, stream) -> None:
        stream.write("class,threshold,detection_rate,mean_iou,gt_boxes\n")
        for ci, name in enumerate(self.class_names):
            for ti, t in enumerate(self.thresholds):
                rate = "" if self.gt_counts[ci] == 0 else f"{self.detection_rate[ci, ti]!r}"
                miou = "" if self.gt_counts[ci] == 0 else f"{self.mean_iou[ci]!r}"
                stream.write(f"{name},{t},{rate},{miou},{self.gt_counts[ci]}\n")


def score_localization(predictions, ground_truth, class_names,
                       thresholds=DEFAULT_IOU_THRESHOLDS) -> LocalizationReport:
    """Score predicted boxes against ground truth.

    Both arguments map image id -> list of :class:`BBox`.  Each ground
    truth box is matched to the highest-IoU prediction of the same image
    and class (0 when there is none); detection accuracy at threshold T is
    the per-class fraction of ground-truth boxes with match IoU >= T.
    """
    n_classes = len(class_names)
    thresholds = tuple(thresholds)

    def check_class(box: BBox, source: str):
        if not 0 <= box.class_id < n_classes:
            raise ValueError(
                f"{source}: unknown class id {box.class_id} (have {n_classes} classes)"
            )

    matched: list[list[float]] = [[] for _ in range(n_classes)]
    for image_id, gt_boxes in ground_truth.items():
        preds = predictions.get(image_id, [])
        for p in preds:
            check_class(p, "predictions")
        for gt in gt_boxes:
            check_class(gt, "ground_truth")
            candidates = [iou(p, gt) for p in preds if p.class_id == gt.class_id]
            matched[gt.class_id].append(max(candidates) if candidates else 0.0)
    for image_id, preds in predictions.items():
        for p in preds:
            check_class(p, "predictions")

    rate = np.zeros((n_classes, len(thresholds)))
    mean_iou = np.full(n_classes, np.nan)
    counts = np.zeros(n_classes, dtype=np.int64)
    for ci in range(n_classes):
        ious = np.asarray(matched[ci])
        counts[ci] = ious.size
        if ious.size:
            mean_iou[ci] = ious.mean()
            for ti, t in enumerate(thresholds):
                rate[ci, ti] = float((ious >= t).mean())
    return LocalizationReport(tuple(class_names), thresholds, rate, mean_iou, counts)


def boxes_to_csv(per_image_boxes, class_names, stream) -> None:
    """Write ``image_id,class_name,x,y,w,h,score`` rows."""
    stream.write("image_id,class_name,x,y,w,h,score\n")
    for image_id in per_image_boxes:
        for b in per_image_boxes[image_id]:
            name = class_names[b.class_id]
            stream.write(
                f"{image_id},{name},{b.x:g},{b.y:g},{b.w:g},{b.h:g},{b.score:g}\n"
            )
