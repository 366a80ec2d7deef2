"""Segmentation metrics: confusion matrices, IoU, class ratios, collapse detection."""
import csv
import math

import numpy as np

from .errors import ContractError


def confusion_matrix(gt, pred, num_classes):
    """C x C int64 counts; rows index ground truth, columns prediction."""
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    if gt.shape != pred.shape:
        raise ContractError(f"confusion_matrix: {gt.shape} vs {pred.shape}")
    idx = gt * num_classes + pred
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_per_class(cm):
    """Per-class IoU with NaN marking classes absent from both GT and prediction."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = tp / union
    iou[union == 0] = np.nan
    return iou


def defined_classes(cm):
    return ~np.isnan(iou_per_class(cm))


def miou(cm):
    cm = np.asarray(cm)
    if cm.sum() == 0:
        raise ContractError("miou: no scored pixels")
    iou = iou_per_class(cm)
    return float(np.nanmean(iou))


def accumulated_miou(cms):
    """mIoU of the pooled confusion matrix over every prefix of ``cms``."""
    cms = list(cms)
    if not cms:
        raise ContractError("accumulated_miou: empty stream")
    pooled = np.zeros_like(np.asarray(cms[0]))
    curve = []
    for cm in cms:
        pooled = pooled + cm
        curve.append(miou(pooled))
    return curve


def class_ratio(pred_maps, num_classes):
    """Fraction of pixels whose argmax is each class.

    Accepts label maps (int arrays) or probability maps (last axis = classes).
    """
    if isinstance(pred_maps, np.ndarray):
        pred_maps = [pred_maps]
    if len(pred_maps) == 0:
        raise ContractError("class_ratio: no maps")
    counts = np.zeros(num_classes, dtype=np.int64)
    for m in pred_maps:
        m = np.asarray(m)
        labels = m.argmax(-1) if np.issubdtype(m.dtype, np.floating) else m
        counts += np.bincount(labels.reshape(-1), minlength=num_classes)[:num_classes]
    return counts / counts.sum()


def histogram_entropy(ratio):
    """Shannon entropy in nats with ``0 log 0 = 0``."""
    r = np.asarray(ratio, dtype=np.float64)
    nz = r[r > 0]
    return float(-(nz * np.log(nz)).sum())


def collapse_detector(entropies, source_entropy, fraction=0.25, patience=10):
    """Return ``(flag, step)`` where ``step`` is the first index at which the
    entropy has stayed below ``fraction * source_entropy`` for ``patience``
    consecutive records, or ``(False, None)``.

    ``entropies`` may be a sequence of floats or an :class:`EpisodeLog`.
    """
    if hasattr(entropies, "records"):
        entropies = [r.class_entropy for r in entropies.records]
    threshold = fraction * source_entropy
    run = 0
    for step, h in enumerate(entropies):
        run = run + 1 if h < threshold else 0
        if run >= patience:
            return True, step
    return False, None


SUMMARY_FIELDS = ["step", "condition", "round", "loss_pos", "loss_neg", "loss_total",
                  "miou_image", "miou_accumulated"]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_summary_csv(path, records, num_classes):
    cols = SUMMARY_FIELDS + [f"class_ratio[{c}]" for c in range(num_classes)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in records:
            row = [r.step, r.condition, r.round, r.loss_pos, r.loss_neg, r.loss_total,
                   r.miou_image, r.miou_accumulated]
            w.writerow([_fmt(v) for v in row] + [repr(float(x)) for x in r.class_ratio])


def write_table_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
