"""Label-space operations around the parsing networks.

Covers gate ground truth (semantic boundary maps), the three-headed
training loss, component crop extraction for the second stage, and the
composition of coarse and component predictions into one fine label map.
"""

from dataclasses import dataclass

import numpy as np

from .layers import sigmoid_bce, softmax_ce
from .vocab import (COARSE_CLASSES, COARSE_TO_FINE, COMPONENT_FINE_IDS,
                    COMPONENT_KINDS, COMPONENT_NET_TO_FINE, FINE_CLASSES,
                    IGNORE_LABEL, PATCH_EXTENTS)


def boundary_ground_truth(labels):
    """Gate supervision: 0 on pixels whose 4-neighborhood crosses a class
    change, 1 elsewhere, 255 where the labels themselves are ignored.

    Comparisons involving an ignored pixel never create a boundary.
    """
    lab = np.asarray(labels)
    valid = lab != IGNORE_LABEL
    boundary = np.zeros(lab.shape, dtype=bool)
    diff_v = (lab[..., 1:, :] != lab[..., :-1, :]) & valid[..., 1:, :] & valid[..., :-1, :]
    boundary[..., 1:, :] |= diff_v
    boundary[..., :-1, :] |= diff_v
    diff_h = (lab[..., :, 1:] != lab[..., :, :-1]) & valid[..., :, 1:] & valid[..., :, :-1]
    boundary[..., :, 1:] |= diff_h
    boundary[..., :, :-1] |= diff_h
    out = np.ones(lab.shape, dtype=np.uint8)
    out[boundary] = 0
    out[~valid] = IGNORE_LABEL
    return out


def downsample_labels(labels, factor):
    """Nearest-neighbor label downsample matching the heads' half/quarter grids."""
    if factor == 1:
        return labels
    off = factor // 2
    return labels[..., off::factor, off::factor]


def total_loss(outputs, labels, gate_gt=None, masks=None, weights=(1.0, 1.0, 1.0)):
    """Weighted sum of the coarse, gate, and final losses with gradients.

    outputs: head name -> logits for whichever heads the variant has;
    labels: head name -> integer target maps for the two label heads;
    gate_gt: binary boundary map for the gate head (when present);
    masks: optional head name -> inclusion mask.  Zero-weighted terms are
    omitted entirely.  A gate mask with no included pixels skips the gate
    term for that batch (boundary-free samples); an empty label-head mask
    is an error.

    Returns (total, per-head loss dict, per-head gradient dict).
    """
    masks = masks or {}
    w_coarse, w_gate, w_final = weights
    parts, grads = {}, {}
    total = 0.0

    for head, weight in (("coarse_label", w_coarse), ("final_label", w_final)):
        if head not in outputs:
            if head in labels and weight:
                raise ValueError(f"total_loss: supervision given for missing head "
                                 f"{head!r}")
            continue
        if weight == 0.0:
            continue
        if head not in labels:
            raise ValueError(f"total_loss: no labels for head {head!r}")
        loss, grad = softmax_ce(outputs[head], labels[head], masks.get(head))
        parts[head] = loss
        grads[head] = weight * grad
        total += weight * loss

    if "gate" in outputs and w_gate:
        if gate_gt is None:
            raise ValueError("total_loss: gate head present but gate_gt missing")
        mask = masks.get("gate")
        included = mask is None or bool(np.any(mask))
        if included and np.any(np.asarray(gate_gt) != IGNORE_LABEL):
            loss, grad = sigmoid_bce(outputs["gate"], gate_gt, mask)
            parts["gate"] = loss
            grads["gate"] = w_gate * grad
            total += w_gate * loss
        else:
            parts["gate"] = 0.0

    return total, parts, grads


@dataclass(frozen=True)
class ComponentCrop:
    """Where a component patch came from: kind, source rect, patch extents."""

    kind: str
    rect: tuple          # (y0, x0, y1, x1), exclusive ends, original coords
    patch_hw: tuple

    def __post_init__(self):
        if self.kind not in COMPONENT_KINDS:
            raise ValueError(f"unknown component kind {self.kind!r}")
        y0, x0, y1, x1 = self.rect
        if y1 <= y0 or x1 <= x0:
            raise ValueError(f"degenerate crop rect {self.rect}")


def resize_bilinear(img, out_h, out_w):
    """Bilinear resample of a (C, H, W) image to arbitrary extents."""
    c, h, w = img.shape
    i0h, i1h, fh = _taps(h, out_h)
    i0w, i1w, fw = _taps(w, out_w)
    rows = img[:, i0h, :] * (1 - fh)[:, None] + img[:, i1h, :] * fh[:, None]
    return rows[:, :, i0w] * (1 - fw) + rows[:, :, i1w] * fw


def resize_nearest(labels, out_h, out_w):
    """Nearest-neighbor resample of an (H, W) label map."""
    h, w = labels.shape
    iy = np.minimum((np.arange(out_h) + 0.5) * h / out_h, h - 1).astype(np.int64)
    ix = np.minimum((np.arange(out_w) + 0.5) * w / out_w, w - 1).astype(np.int64)
    return labels[np.ix_(iy, ix)]


def _taps(in_len, out_len):
    src = (np.arange(out_len) + 0.5) * in_len / out_len - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    return np.clip(i0, 0, in_len - 1), np.clip(i0 + 1, 0, in_len - 1), frac


def crop_component(image, labels, kind, centers=None):
    """Extract one component patch for the second stage.

    The crop rectangle is the component's foreground bounding box expanded
    by 20% of its extent per side, grown to the patch aspect ratio, and
    clamped to the image.  The image is resampled bilinearly, the labels
    by nearest neighbor and remapped into the component net's vocabulary
    (everything outside the component becomes "other").

    Returns (patch_image, patch_labels, ComponentCrop).
    """
    if kind not in COMPONENT_KINDS:
        raise ValueError(f"crop_component: unknown kind {kind!r}")
    labels = np.asarray(labels)
    h, w = labels.shape
    fg = np.isin(labels, COMPONENT_FINE_IDS[kind])
    if not fg.any():
        raise ValueError(f"crop_component: empty {kind} region")
    ys, xs = np.nonzero(fg)
    y0, y1 = float(ys.min()), float(ys.max() + 1)
    x0, x1 = float(xs.min()), float(xs.max() + 1)
    if centers is not None:
        for cx, cy in _centers_for(kind, np.asarray(centers)):
            y0, y1 = min(y0, cy), max(y1, cy + 1)
            x0, x1 = min(x0, cx), max(x1, cx + 1)

    bh, bw = y1 - y0, x1 - x0
    y0, y1 = y0 - 0.2 * bh, y1 + 0.2 * bh
    x0, x1 = x0 - 0.2 * bw, x1 + 0.2 * bw

    ph, pw = PATCH_EXTENTS[kind]
    y0, y1 = _grow_to_aspect(y0, y1, (x1 - x0) * ph / pw)
    x0, x1 = _grow_to_aspect(x0, x1, (y1 - y0) * pw / ph)
    y0, y1 = _clamp_span(y0, y1, h)
    x0, x1 = _clamp_span(x0, x1, w)
    rect = (int(round(y0)), int(round(x0)), int(round(y1)), int(round(x1)))

    sub_img = np.asarray(image)[:, rect[0]:rect[2], rect[1]:rect[3]]
    sub_lab = labels[rect[0]:rect[2], rect[1]:rect[3]]
    patch_img = resize_bilinear(sub_img, ph, pw).astype(np.asarray(image).dtype)
    fine_lab = resize_nearest(sub_lab, ph, pw)
    patch_lab = np.zeros((ph, pw), dtype=np.uint8)
    for net_id, fine_id in COMPONENT_NET_TO_FINE[kind].items():
        patch_lab[fine_lab == fine_id] = net_id
    patch_lab[fine_lab == IGNORE_LABEL] = IGNORE_LABEL
    return patch_img, patch_lab, ComponentCrop(kind, rect, (ph, pw))


def _centers_for(kind, centers):
    idx = {"eye_left": (0,), "eye_right": (1,), "nose": (2,), "mouth": (3, 4)}[kind]
    return [centers[i] for i in idx if i < len(centers)]


def _grow_to_aspect(lo, hi, target):
    """Symmetrically widen [lo, hi) to at least `target` length."""
    cur = hi - lo
    if cur >= target:
        return lo, hi
    pad = (target - cur) / 2
    return lo - pad, hi + pad


def _clamp_span(lo, hi, limit):
    """Shift [lo, hi) inside [0, limit), shrinking only if longer than limit."""
    if hi - lo > limit:
        return 0.0, float(limit)
    if lo < 0:
        hi -= lo
        lo = 0.0
    if hi > limit:
        lo -= hi - limit
        hi = float(limit)
    return lo, hi


def compose_two_stage(coarse, component_preds):
    """Combine a coarse map and component patch predictions into a fine map.

    The coarse 3-class map is relabeled into the fine vocabulary, then each
    component prediction is painted back through the inverse of its crop
    transform; non-"other" classes overwrite, and crops are applied in the
    fixed kind order so later components win ties.  A map that already
    carries fine ids is painted onto directly, which makes repeated
    composition with the same predictions a no-op.
    """
    coarse = np.asarray(coarse)
    ids = np.unique(coarse)
    ids = ids[ids != IGNORE_LABEL]
    if ids.size and ids.max() >= len(FINE_CLASSES):
        raise ValueError(f"compose_two_stage: label id {ids.max()} outside vocabulary")
    if ids.size == 0 or ids.max() < len(COARSE_CLASSES):
        out = np.full(coarse.shape, IGNORE_LABEL, dtype=np.uint8)
        for cid, fid in COARSE_TO_FINE.items():
            out[coarse == cid] = fid
    else:
        out = coarse.astype(np.uint8).copy()

    order = {k: i for i, k in enumerate(COMPONENT_KINDS)}
    for pred, crop in sorted(component_preds, key=lambda pc: order[pc[1].kind]):
        y0, x0, y1, x1 = crop.rect
        ph, pw = crop.patch_hw
        rh, rw = y1 - y0, x1 - x0
        py = np.minimum(((np.arange(rh) + 0.5) * ph / rh).astype(np.int64), ph - 1)
        px = np.minimum(((np.arange(rw) + 0.5) * pw / rw).astype(np.int64), pw - 1)
        sub = np.asarray(pred)[np.ix_(py, px)]
        region = out[y0:y1, x0:x1]
        for net_id, fine_id in COMPONENT_NET_TO_FINE[crop.kind].items():
            region[sub == net_id] = fine_id
    return out


def coarsen_fine_labels(fine):
    """Project fine-vocabulary labels onto {background, skin, hair}."""
    from .vocab import FINE_TO_COARSE
    fine = np.asarray(fine)
    out = np.full(fine.shape, IGNORE_LABEL, dtype=np.uint8)
    for fid, cid in FINE_TO_COARSE.items():
        out[fine == fid] = cid
    return out
