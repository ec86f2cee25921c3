"""Classification, segmentation and detection quality measures.

Zero-denominator metrics are reported as 0 and named in the report's
``flags`` list instead of raising, so batch evaluation never aborts.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from mtlab import boxes as bx
from mtlab.datakit.types import CLASS_NAMES, DET_CLASS_NAMES, DetClass
from mtlab.errors import ArgumentError


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


@dataclass
class ClassificationReport:
    accuracy: float
    macro_f1: float
    f1_per_class: list
    confusion: list
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def table_row(self) -> dict:
        row = {"Accuracy": self.accuracy, "Macro F1": self.macro_f1}
        for name, f1 in zip(TABLE2_CLASS_COLUMNS, self.f1_per_class):
            row[name] = f1
        return row


TABLE2_CLASS_COLUMNS = ("F1 non-covid", "F1 covid-19", "F1 cancer")
TABLE2_COLUMNS = ("Accuracy", "Macro F1") + TABLE2_CLASS_COLUMNS
TABLE3_COLUMNS = ("Accuracy", "F1", "Sensitivity", "Specificity", "Precision", "ROC AUC", "IoU")


def confusion_matrix(pred_labels, targets, n_classes: int = 3) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(targets), np.asarray(pred_labels)), 1)
    return cm


def classification_report(preds, targets) -> ClassificationReport:
    """Accuracy, per-class and macro F1 under the argmax decision rule."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if preds.ndim != 2 or len(preds) != len(targets) or len(targets) == 0:
        raise ArgumentError(f"need equal nonzero lengths, got {preds.shape} preds and "
                            f"{targets.shape} targets")
    n_classes = preds.shape[1]
    cm = confusion_matrix(preds.argmax(axis=1), targets, n_classes)
    flags: list = []
    f1s = []
    for c in range(n_classes):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        name = CLASS_NAMES[c] if n_classes == len(CLASS_NAMES) else str(c)
        f1s.append(_ratio(2 * tp, 2 * tp + fp + fn, f"f1[{name}]", flags))
    return ClassificationReport(float(np.trace(cm) / cm.sum()), float(np.mean(f1s)),
                                [float(f) for f in f1s], cm.tolist(), flags)


@dataclass
class SegmentationReport:
    pixel_accuracy: float
    f1: float
    sensitivity: float
    specificity: float
    precision: float
    iou: float
    roc_auc: float | None
    counts: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def table_row(self) -> dict:
        return dict(zip(TABLE3_COLUMNS, (self.pixel_accuracy, self.f1, self.sensitivity,
                                         self.specificity, self.precision, self.roc_auc,
                                         self.iou)))


def roc_auc(scores, labels) -> float | None:
    """Mann-Whitney AUC with mid-ranks for ties; None when only one label occurs."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def segmentation_counts(pred, target, threshold: float = 0.5) -> dict:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ArgumentError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    hard = pred >= threshold
    truth = target.astype(bool)
    return {"tp": int(np.sum(hard & truth)), "fp": int(np.sum(hard & ~truth)),
            "tn": int(np.sum(~hard & ~truth)), "fn": int(np.sum(~hard & truth))}


def report_from_counts(tp: int, fp: int, tn: int, fn: int, auc=None) -> SegmentationReport:
    flags: list = []
    precision = _ratio(tp, tp + fp, "precision", flags)
    sensitivity = _ratio(tp, tp + fn, "sensitivity", flags)
    specificity = _ratio(tn, tn + fp, "specificity", flags)
    if precision + sensitivity > 0:
        f1 = 2 * precision * sensitivity / (precision + sensitivity)
    else:
        f1 = 0.0
        flags.append("f1")
    iou = _ratio(tp, tp + fp + fn, "iou", flags)
    total = tp + fp + tn + fn
    accuracy = _ratio(tp + tn, total, "pixel_accuracy", flags)
    return SegmentationReport(accuracy, f1, sensitivity, specificity, precision, iou, auc,
                              {"tp": tp, "fp": fp, "tn": tn, "fn": fn}, flags)


def segmentation_report(pred, target, threshold: float = 0.5) -> SegmentationReport:
    """Pixel-pooled binary segmentation metrics.

    ``pred`` and ``target`` may be single maps or stacks; all pixels are
    pooled.  ROC AUC uses the raw probabilities and is None when the labels
    are all one class.
    """
    counts = segmentation_counts(pred, target, threshold)
    auc = roc_auc(pred, target)
    report = report_from_counts(auc=auc, **counts)
    if auc is None:
        report.flags.append("roc_auc")
    return report


def box_iou(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for box in (a, b):
        if box.shape != (4,) or not (box[2] > box[0] and box[3] > box[1]):
            raise ArgumentError(f"degenerate or malformed box {box.tolist()}")
    return float(bx.iou_matrix(a, b)[0, 0])


@dataclass
class DetectionReport:
    mean_ap: float
    per_class_ap: list
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _class_index(obj) -> int:
    return DetClass(obj.det_class).index


def eleven_point_ap(precision, recall) -> float:
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    total = 0.0
    for k in range(11):
        r = k / 10
        above = precision[recall >= r]
        total += above.max() if above.size else 0.0
    return total / 11


def detection_report(detections, ground_truth, iou_threshold: float = 0.5) -> DetectionReport:
    """11-point interpolated AP per class and their mean over classes with ground truth.

    ``detections`` and ``ground_truth`` are per-image lists; items need
    ``box`` and ``det_class`` (detections also ``score``).  Matching is
    greedy by descending score, each ground-truth box used at most once.
    """
    if not 0 < iou_threshold <= 1:
        raise ArgumentError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    if len(detections) != len(ground_truth):
        raise ArgumentError("detections and ground truth must cover the same images")
    n_classes = len(DET_CLASS_NAMES)
    per_class: list = [None] * n_classes
    flags: list = []
    for c in range(n_classes):
        gts = [[g for g in (img or []) if _class_index(g) == c] for img in ground_truth]
        n_gt = sum(len(g) for g in gts)
        if n_gt == 0:
            flags.append(f"no ground truth for {DET_CLASS_NAMES[c]}")
            continue
        dets = [(float(d.score), i, k, d) for i, img in enumerate(detections)
                for k, d in enumerate(img or []) if _class_index(d) == c]
        dets.sort(key=lambda t: (-t[0], t[1], t[2]))
        used = [np.zeros(len(g), dtype=bool) for g in gts]
        tp = np.zeros(len(dets))
        for j, (_, i, _, d) in enumerate(dets):
            if not gts[i]:
                continue
            ious = bx.iou_matrix(np.asarray(d.box)[None], np.array([g.box for g in gts[i]]))[0]
            ious[used[i]] = -1.0
            best = int(ious.argmax())
            if ious[best] >= iou_threshold:
                used[i][best] = True
                tp[j] = 1
        cum_tp = np.cumsum(tp)
        ranks = np.arange(1, len(dets) + 1)
        per_class[c] = eleven_point_ap(cum_tp / np.maximum(ranks, 1), cum_tp / n_gt)
    present = [ap for ap in per_class if ap is not None]
    mean_ap = float(np.mean(present)) if present else 0.0
    return DetectionReport(mean_ap, per_class, flags)


def format_table(rows: dict, columns) -> str:
    """Plain-text table: one row per entry in ``rows`` (label -> {column: value})."""
    label_w = max([len("Task")] + [len(k) for k in rows])
    widths = [max(len(c), 6) for c in columns]
    lines = ["Task".ljust(label_w) + " | " + " | ".join(c.rjust(w) for c, w in zip(columns, widths))]
    lines.append("-" * len(lines[0]))
    for label, row in rows.items():
        cells = []
        for c, w in zip(columns, widths):
            v = row.get(c)
            cells.append(("NA" if v is None else f"{v:.2f}").rjust(w))
        lines.append(label.ljust(label_w) + " | " + " | ".join(cells))
    return "\n".join(lines)
