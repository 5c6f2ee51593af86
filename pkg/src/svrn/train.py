"""Training loop: batch assembly, supervision prep, and the epoch cycle.

Runs are deterministic for a given config: one RNG seeded from the config
drives initialization, shuffling, augmentation, and loss sampling in a
fixed draw order (single worker).
"""

from dataclasses import dataclass

import numpy as np

from .config import ConfigError
from .data import (AugmentConfig, SampleRecord, augment,
                   background_sampling_mask, boundary_sampling_mask,
                   generate_synthetic, load_dataset)
from .layers import OptimState, sgd_step
from .network import Network, build_stage1, build_stage2
from .parsing import (boundary_ground_truth, coarsen_fine_labels, crop_component,
                      downsample_labels, total_loss)
from .tensor_ops import default_dtype
from .vocab import COMPONENT_KINDS, COMPONENT_NET


@dataclass
class EpochStats:
    epoch: int
    losses: dict
    holdout_accuracy: float | None

    def format(self):
        parts = " ".join(f"{k}={v:.4f}" for k, v in sorted(self.losses.items()))
        line = f"epoch {self.epoch:3d}  {parts}"
        if self.holdout_accuracy is not None:
            line += f"  holdout_acc={self.holdout_accuracy:.4f}"
        return line


def build_network(cfg, rng):
    if cfg.stage == "1":
        spec = build_stage1(cfg.num_classes, cfg.input_size, cfg.variant,
                            vocabulary=cfg.vocabulary)
    else:
        spec = build_stage2(cfg.stage.split("-", 1)[1])
    return Network(spec, rng=rng)


def load_records(cfg):
    """Training records per the config: a dataset directory or the generator."""
    if cfg.data_dir:
        records = load_dataset(cfg.data_dir, num_classes=cfg.num_classes
                               if cfg.stage == "1" else None)
    else:
        records = generate_synthetic(cfg.synth_config())
    if cfg.holdout_count >= len(records):
        raise ConfigError("holdout_count must leave at least one training sample")
    if cfg.holdout_count:
        return records[:-cfg.holdout_count], records[-cfg.holdout_count:]
    return records, []


def component_records(records, net_kind, rng=None):
    """Crop patches for one component net from fine-vocabulary records.

    The eye net trains on both left and right eye crops.  Records whose
    component region is empty (fully occluded) are skipped.
    """
    kinds = [k for k in COMPONENT_KINDS if COMPONENT_NET[k] == net_kind]
    patches = []
    for rec in records:
        for kind in kinds:
            try:
                img, lab, _ = crop_component(rec.image, rec.labels, kind,
                                             rec.centers)
            except ValueError:
                continue
            patches.append(SampleRecord(img.astype(np.float32), lab))
    if not patches:
        raise ValueError(f"component_records: no usable {net_kind} crops")
    return patches


def _stage2_augment_config(cfg):
    base = cfg.augment_config()
    return AugmentConfig(rotate_deg=min(base.rotate_deg, 10.0),
                         scale_lo=max(base.scale_lo, 0.95),
                         scale_hi=min(base.scale_hi, 1.05),
                         translate_frac=min(base.translate_frac, 0.04),
                         mirror_prob=base.mirror_prob, swap_pairs=())


def make_batch(records, spec, cfg, rng, do_augment):
    """Assemble (x, labels, gate_gt, masks) for one batch of records."""
    if do_augment:
        aug_cfg = (_stage2_augment_config(cfg) if spec.stage == "2"
                   else cfg.augment_config())
        records = [augment(r, rng, aug_cfg) for r in records]
    dtype = default_dtype()
    x = np.stack([r.image for r in records]).astype(dtype)
    full = np.stack([r.labels for r in records])
    if spec.stage == "1" and spec.vocabulary == "coarse" and full.max() > 2:
        full = np.stack([coarsen_fine_labels(l) for l in full])

    extents = spec.head_extents(x.shape[2:])
    labels, masks = {}, {}
    gate_gt = None
    labels["final_label"] = full
    if cfg.bg_sampling_factor:
        masks["final_label"] = np.stack(
            [background_sampling_mask(l, cfg.bg_sampling_factor, rng) for l in full])
    if "coarse_label" in spec.heads:
        factor = x.shape[2] // extents["coarse_label"][0]
        coarse = downsample_labels(full, factor)
        labels["coarse_label"] = coarse
        if cfg.bg_sampling_factor:
            masks["coarse_label"] = np.stack(
                [background_sampling_mask(l, cfg.bg_sampling_factor, rng)
                 for l in coarse])
    if "gate" in spec.heads:
        factor = x.shape[2] // extents["gate"][0]
        gate_src = downsample_labels(full, factor)
        gate_gt = boundary_ground_truth(gate_src)
        masks["gate"] = np.stack(
            [boundary_sampling_mask(g, cfg.boundary_neg_ratio, rng)
             for g in gate_gt])
    return x, labels, gate_gt, masks


def clip_gradients(grads, max_norm):
    """Scale the whole gradient dict so its global L2 norm is <= max_norm."""
    total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                        for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale
    return grads


def train(cfg, progress=None):
    """Full training run; returns (Network, [EpochStats])."""
    rng = np.random.default_rng(cfg.seed)
    train_recs, holdout = load_records(cfg)
    if cfg.stage != "1":
        net_kind = cfg.stage.split("-", 1)[1]
        train_recs = component_records(train_recs, net_kind)
        holdout = component_records(holdout, net_kind) if holdout else []
    net = build_network(cfg, rng)
    state = OptimState(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    transition = net.spec.transition_names()
    weights = (cfg.loss_w_coarse, cfg.loss_w_gate, cfg.loss_w_final)
    stats = []

    for epoch in range(1, cfg.epochs + 1):
        if cfg.lr_decay_every:
            state.learning_rate = cfg.learning_rate * (
                cfg.lr_decay ** ((epoch - 1) // cfg.lr_decay_every))
        order = rng.permutation(len(train_recs))
        sums, seen = {}, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_recs[i] for i in order[start:start + cfg.batch_size]]
            x, labels, gate_gt, masks = make_batch(batch, net.spec, cfg, rng,
                                                   cfg.augment)
            heads, caches = net.forward(x, threads=cfg.threads)
            _, parts, hgrads = total_loss(heads, labels, gate_gt, masks, weights)
            grads = net.backward(hgrads, caches, threads=cfg.threads)
            if cfg.grad_clip_norm:
                clip_gradients(grads, cfg.grad_clip_norm)
            sgd_step(net.params, grads, state, transition)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            seen += 1
        losses = {k: v / seen for k, v in sums.items()}
        hacc = holdout_accuracy(net, holdout, cfg) if holdout else None
        st = EpochStats(epoch, losses, hacc)
        stats.append(st)
        if progress:
            progress(st.format())
    return net, stats


def predict_labels(net, images, threads=None, batch_size=8):
    """Argmax of the final head over a stack of images; returns (N, H, W)."""
    dtype = default_dtype()
    outs = []
    for start in range(0, len(images), batch_size):
        x = np.stack(images[start:start + batch_size]).astype(dtype)
        heads, _ = net.forward(x, threads=threads)
        outs.append(heads["final_label"].argmax(axis=1).astype(np.uint8))
    return np.concatenate(outs)


def holdout_accuracy(net, records, cfg):
    preds = predict_labels(net, [r.image for r in records], threads=cfg.threads,
                           batch_size=cfg.batch_size)
    correct = total = 0
    for pred, rec in zip(preds, records):
        gt = rec.labels
        if net.spec.vocabulary == "coarse" and gt.max() > 2:
            gt = coarsen_fine_labels(gt)
        keep = gt != 255
        correct += int((pred[keep] == gt[keep]).sum())
        total += int(keep.sum())
    return correct / total if total else 0.0
