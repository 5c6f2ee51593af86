"""Evaluation metrics: confusion matrices, per-class P/R/F, accuracy.

Identities are kept exact: accuracy = trace(confusion) / sum(confusion)
and F = 2PR / (P + R) with F defined as 0 when P + R = 0.
"""

from dataclasses import dataclass, field

import numpy as np

from .vocab import COMPONENT_F_GROUPS, FINE_EVAL_GROUPS, IGNORE_LABEL


@dataclass
class EvalReport:
    class_names: tuple
    confusion: np.ndarray          # rows = ground truth, cols = prediction
    precision: np.ndarray
    recall: np.ndarray
    f_measure: np.ndarray
    accuracy: float
    timing: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)   # merged-group F (fine vocab)

    def format(self):
        lines = [f"{'class':>12s} {'precision':>9s} {'recall':>9s} {'F':>9s}"]
        for i, name in enumerate(self.class_names):
            lines.append(f"{name:>12s} {self.precision[i]:9.4f} "
                         f"{self.recall[i]:9.4f} {self.f_measure[i]:9.4f}")
        lines.append(f"per-pixel accuracy: {self.accuracy:.4f}")
        for g, f in self.groups.items():
            lines.append(f"group F [{g}]: {f:.4f}")
        for k, v in self.timing.items():
            lines.append(f"timing {k}: {v * 1e3:.2f} ms")
        return "\n".join(lines)


def confusion_matrix(pred, target, num_classes):
    """Accumulate a confusion matrix, skipping ignore-marked target pixels."""
    pred = np.asarray(pred).ravel()
    target = np.asarray(target).ravel()
    keep = target != IGNORE_LABEL
    pred, target = pred[keep], target[keep]
    if pred.size and (pred.max() >= num_classes or target.max() >= num_classes):
        raise ValueError("confusion_matrix: label id outside vocabulary")
    idx = target.astype(np.int64) * num_classes + pred.astype(np.int64)
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes,
                                                                num_classes)


def report_from_confusion(conf, class_names, timing=None):
    """Closed-form P/R/F/accuracy from an accumulated confusion matrix."""
    conf = np.asarray(conf, dtype=np.int64)
    tp = np.diag(conf).astype(np.float64)
    pred_tot = conf.sum(axis=0).astype(np.float64)
    gt_tot = conf.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, pred_tot, out=np.zeros_like(tp), where=pred_tot > 0)
    recall = np.divide(tp, gt_tot, out=np.zeros_like(tp), where=gt_tot > 0)
    pr = precision + recall
    f = np.divide(2 * precision * recall, pr, out=np.zeros_like(tp), where=pr > 0)
    total = conf.sum()
    accuracy = float(tp.sum() / total) if total else 0.0
    return EvalReport(tuple(class_names), conf, precision, recall, f, accuracy,
                      timing or {})


def binary_f_measure(pred_in, gt_in):
    """F of a binary membership problem from raw pixel counts."""
    tp = float(np.logical_and(pred_in, gt_in).sum())
    p_tot = float(np.asarray(pred_in).sum())
    g_tot = float(np.asarray(gt_in).sum())
    precision = tp / p_tot if p_tot else 0.0
    recall = tp / g_tot if g_tot else 0.0
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


class GroupedF:
    """Accumulates merged-group F stats (paper-style rows) over many images."""

    def __init__(self, groups=FINE_EVAL_GROUPS):
        self.groups = groups
        self.tp = {g: 0.0 for g in groups}
        self.pred = {g: 0.0 for g in groups}
        self.gt = {g: 0.0 for g in groups}

    def add(self, pred, target):
        keep = np.asarray(target) != IGNORE_LABEL
        pred = np.asarray(pred)[keep]
        target = np.asarray(target)[keep]
        for g, ids in self.groups.items():
            p = np.isin(pred, ids)
            t = np.isin(target, ids)
            self.tp[g] += float((p & t).sum())
            self.pred[g] += float(p.sum())
            self.gt[g] += float(t.sum())

    def results(self):
        out = {}
        for g in self.groups:
            prec = self.tp[g] / self.pred[g] if self.pred[g] else 0.0
            rec = self.tp[g] / self.gt[g] if self.gt[g] else 0.0
            out[g] = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        return out

    def mean_component_f(self):
        res = self.results()
        return float(np.mean([res[g] for g in COMPONENT_F_GROUPS]))
