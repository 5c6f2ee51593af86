"""Synthetic toy-face datasets, augmentation, loss sampling, and disk I/O.

The generator is a stand-in for real parsing corpora: procedural faces
(skin ellipse, hair crescent, optional facial components) over textured,
cluttered backgrounds, with exact labels by construction and recorded
component center points.  Everything is deterministic per (seed, index),
so identical configs produce bit-identical datasets.

On disk a dataset is  images/NNNN.png  (8-bit RGB),  labels/NNNN.png
(8-bit palette, pixel value = class id, 255 = ignore) and optional
points/NNNN.txt  (five "x y" lines).
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image
from scipy import ndimage

from .parsing import resize_bilinear
from .vocab import IGNORE_LABEL, MIRROR_SWAP_FINE, PALETTES

log = logging.getLogger(__name__)


@dataclass
class SampleRecord:
    """One dataset row: image in [0,1], label map, optional 5 center points."""

    image: np.ndarray          # (3, H, W) float32
    labels: np.ndarray         # (H, W) uint8
    centers: np.ndarray | None = None   # (5, 2) float32 (x, y) rows

    def __post_init__(self):
        if self.image.shape[1:] != self.labels.shape:
            raise ValueError(f"image {self.image.shape} / labels "
                             f"{self.labels.shape} extent mismatch")


@dataclass(frozen=True)
class SynthConfig:
    """Deterministic generator settings; same config => identical dataset."""

    seed: int = 0
    count: int = 100
    height: int = 64
    width: int = 64
    vocabulary: str = "coarse"      # "coarse" (3 classes) or "fine" (11)
    clutter: float = 0.5
    multi_face: bool = False
    faces_min: int = 2
    faces_max: int = 6

    def __post_init__(self):
        if self.vocabulary not in ("coarse", "fine"):
            raise ValueError(f"SynthConfig: vocabulary {self.vocabulary!r}")
        if not 0.0 <= self.clutter <= 1.0:
            raise ValueError("SynthConfig: clutter must be in [0, 1]")
        if self.multi_face and self.vocabulary != "coarse":
            raise ValueError("SynthConfig: multi-face generation is coarse-only")


def generate_synthetic(cfg):
    """Generate `cfg.count` samples; deterministic per (seed, index)."""
    return [_make_sample(cfg, i) for i in range(cfg.count)]


def _make_sample(cfg, index):
    rng = np.random.default_rng([cfg.seed, index])
    if cfg.multi_face:
        return _make_multi_face(cfg, rng)
    h, w = cfg.height, cfg.width
    img = np.zeros((3, h, w), dtype=np.float32)
    lab = np.zeros((h, w), dtype=np.uint8)
    _paint_background(img, lab, rng, cfg.clutter)
    size = min(h, w)
    cy = h * rng.uniform(0.49, 0.55)
    cx = w * rng.uniform(0.46, 0.54)
    ry = size * 0.34 * rng.uniform(0.95, 1.05)
    centers = _paint_face(img, lab, rng, cy, cx, ry,
                          fine=cfg.vocabulary == "fine", clutter=cfg.clutter)
    _paint_occluder(img, lab, rng, cy, cx, ry, cfg.clutter)
    _finish_image(img, rng, cfg.clutter)
    return SampleRecord(img, lab, centers)


def _make_multi_face(cfg, rng):
    h, w = cfg.height, cfg.width
    img = np.zeros((3, h, w), dtype=np.float32)
    lab = np.zeros((h, w), dtype=np.uint8)
    # mimic long-side rescale + zero padding: content fills one dimension
    cw = int(w * rng.uniform(0.72, 1.0))
    x_off = (w - cw) // 2
    _paint_background(img[:, :, x_off:x_off + cw], lab[:, x_off:x_off + cw],
                      rng, cfg.clutter)
    count = int(rng.integers(cfg.faces_min, cfg.faces_max + 1))
    placed = []
    for _ in range(count):
        ry = rng.uniform(34, 72)
        for attempt in range(200):
            cy = rng.uniform(1.45 * ry, h - 1.15 * ry)
            cx = rng.uniform(x_off + 1.05 * ry, x_off + cw - 1.05 * ry)
            if all(np.hypot(cy - py, cx - px) > 1.25 * (ry + pr)
                   for py, px, pr in placed):
                placed.append((cy, cx, ry))
                _paint_face(img, lab, rng, cy, cx, ry, fine=False,
                            clutter=cfg.clutter)
                break
        else:
            raise RuntimeError("multi-face placement infeasible after 200 retries")
    _finish_image(img, rng, cfg.clutter)
    return SampleRecord(img, lab, None)


def _grid(h, w):
    return np.mgrid[0:h, 0:w].astype(np.float32)


def _ellipse(h, w, cy, cx, ry, rx, theta=0.0):
    yy, xx = _grid(h, w)
    y = yy - cy
    x = xx - cx
    if theta:
        c, s = np.cos(theta), np.sin(theta)
        y, x = c * y - s * x, s * y + c * x
    return (y / ry) ** 2 + (x / rx) ** 2 <= 1.0


def _paint(img, lab, mask, color, class_id):
    img[:, mask] = np.asarray(color, dtype=img.dtype)[:, None]
    lab[mask] = class_id


def _paint_background(img, lab, rng, clutter):
    h, w = lab.shape
    base = rng.uniform(0.25, 0.75, size=3).astype(np.float32)
    field = rng.uniform(-1, 1, size=(3, 6, 6)).astype(np.float32)
    tex = resize_bilinear(field, h, w) * (0.08 + 0.15 * clutter)
    img[:] = np.clip(base[:, None, None] + tex, 0.0, 1.0)
    lab[:] = 0
    # distractor blobs with face-like colors, still labeled background
    for _ in range(int(round(6 * clutter))):
        if rng.random() < 0.7:
            color = [rng.uniform(0.6, 0.85), rng.uniform(0.42, 0.62),
                     rng.uniform(0.3, 0.5)]       # skin-like
        else:
            v = rng.uniform(0.12, 0.4)            # hair-like
            color = [v, v * rng.uniform(0.55, 0.8), v * rng.uniform(0.25, 0.5)]
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        m = _ellipse(h, w, cy, cx, rng.uniform(0.03, 0.12) * h,
                     rng.uniform(0.03, 0.12) * w, rng.uniform(0, np.pi))
        img[:, m] = np.asarray(color, dtype=img.dtype)[:, None]


def _paint_face(img, lab, rng, cy, cx, ry, fine, clutter):
    """Draw one face (hair, skin, optional components); returns center points."""
    h, w = lab.shape
    hair_id = 10 if fine else 2
    rx = ry * rng.uniform(0.74, 0.84)
    theta = rng.uniform(-0.12, 0.12)
    skin = [rng.uniform(0.62, 0.85), rng.uniform(0.45, 0.62), rng.uniform(0.33, 0.5)]
    hair_v = rng.uniform(0.12, 0.4)
    hair = [hair_v, hair_v * rng.uniform(0.55, 0.8), hair_v * rng.uniform(0.25, 0.5)]

    # face-colored blobs hugging the outside of the boundary: local evidence
    # says face, only the semantic edge separates them from it
    for _ in range(int(round(3 * clutter))):
        phi = rng.uniform(0, 2 * np.pi)
        br = rng.uniform(0.10, 0.2) * ry
        dist = 1.0 + rng.uniform(0.2, 0.8) * br / ry
        by = cy + dist * ry * np.sin(phi)
        bx = cx + dist * rx * np.cos(phi)
        color = skin if rng.random() < 0.7 else hair
        jitter = rng.uniform(-0.04, 0.04, 3)
        m = _ellipse(h, w, by, bx, br, br * rng.uniform(0.7, 1.3),
                     rng.uniform(0, np.pi))
        _paint(img, lab, m, np.clip(np.asarray(color) + jitter, 0, 1), 0)

    face = _ellipse(h, w, cy, cx, ry, rx, theta)
    crown = _ellipse(h, w, cy - 0.3 * ry, cx, ry * 1.12, rx * 1.35, theta)
    _paint(img, lab, crown & ~face, hair, hair_id)
    _paint(img, lab, face, skin, 1)

    # background-colored camouflage inside the face: needs propagation from
    # surrounding skin to label correctly
    for _ in range(int(round(2 * clutter))):
        phi = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0.3, 0.6)
        by = cy + dist * ry * np.sin(phi)
        bx = cx + dist * rx * np.cos(phi)
        camo = rng.uniform(0.25, 0.75, 3)
        m = _ellipse(h, w, by, bx, rng.uniform(0.08, 0.15) * ry,
                     rng.uniform(0.08, 0.15) * rx)
        _paint(img, lab, m & face, camo, 1)

    def jit(v, f=0.06):
        return v * (1.0 + rng.uniform(-f, f))

    eye_y = cy - jit(0.18) * ry
    eye_dx = jit(0.40) * rx
    nose_y = cy + jit(0.10) * ry
    mouth_y = cy + jit(0.46) * ry
    mouth_rx = jit(0.20) * rx

    if fine:
        dark = rng.uniform(0.04, 0.18)
        brow_c = [dark, dark * 0.8, dark * 0.6]
        eye_c = [rng.uniform(0.05, 0.25), rng.uniform(0.1, 0.35), rng.uniform(0.3, 0.6)]
        lip_c = [rng.uniform(0.55, 0.8), rng.uniform(0.12, 0.28), rng.uniform(0.18, 0.34)]
        inm_c = [rng.uniform(0.15, 0.3), rng.uniform(0.02, 0.1), rng.uniform(0.04, 0.12)]
        for side, sign in (("left", -1), ("right", 1)):
            ex = cx + sign * eye_dx
            brow = _ellipse(h, w, eye_y - 0.16 * ry, ex, 0.045 * ry, 0.17 * rx)
            _paint(img, lab, brow & face, brow_c, 2 if side == "left" else 3)
            eye = _ellipse(h, w, eye_y, ex, 0.10 * ry, 0.15 * rx)
            _paint(img, lab, eye & face, eye_c, 4 if side == "left" else 5)
        nose_c = [skin[0] * 0.82, skin[1] * 0.7, skin[2] * 0.68]
        nose = _ellipse(h, w, nose_y, cx, 0.16 * ry, 0.09 * rx)
        _paint(img, lab, nose & face, nose_c, 6)
        mouth = _ellipse(h, w, mouth_y, cx, 0.10 * ry, mouth_rx)
        yy = _grid(h, w)[0]
        band = 0.03 * ry
        _paint(img, lab, mouth & face & (yy < mouth_y - band), lip_c, 7)
        _paint(img, lab, mouth & face & (np.abs(yy - mouth_y) <= band), inm_c, 8)
        _paint(img, lab, mouth & face & (yy > mouth_y + band),
               [lip_c[0] * 0.9, lip_c[1], lip_c[2]], 9)

    # soft vertical shading over the whole face region
    yy = _grid(h, w)[0]
    shade = 1.0 - 0.18 * clutter * np.clip((yy - cy) / max(ry, 1.0), -1, 1)
    img[:, face] *= shade[face]

    return np.array([[cx - eye_dx, eye_y], [cx + eye_dx, eye_y],
                     [cx, nose_y + 0.16 * ry],
                     [cx - mouth_rx, mouth_y], [cx + mouth_rx, mouth_y]],
                    dtype=np.float32)


def _paint_occluder(img, lab, rng, cy, cx, ry, clutter):
    if rng.random() >= min(0.6, 0.6 * clutter):
        return
    h, w = lab.shape
    oy = cy + rng.uniform(-0.8, 0.8) * ry
    ox = cx + rng.uniform(-0.8, 0.8) * ry
    theta = rng.uniform(0, np.pi)
    yy, xx = _grid(h, w)
    c, s = np.cos(theta), np.sin(theta)
    u = c * (yy - oy) - s * (xx - ox)
    v = s * (yy - oy) + c * (xx - ox)
    bar = (np.abs(u) < rng.uniform(0.04, 0.08) * ry) & (np.abs(v) < 1.2 * ry)
    _paint(img, lab, bar, rng.uniform(0.1, 0.9, size=3), 0)


def _finish_image(img, rng, clutter):
    h, w = img.shape[1:]
    yy, xx = _grid(h, w)
    phi = rng.uniform(0, 2 * np.pi)
    ramp = (xx / w - 0.5) * np.cos(phi) + (yy / h - 0.5) * np.sin(phi)
    img *= 1.0 + 0.5 * clutter * ramp
    img += rng.normal(0.0, 0.02 + 0.10 * clutter, size=img.shape).astype(np.float32)
    np.clip(img, 0.0, 1.0, out=img)


@dataclass(frozen=True)
class AugmentConfig:
    """Random affine/mirror augmentation ranges."""

    rotate_deg: float = 15.0
    scale_lo: float = 0.9
    scale_hi: float = 1.1
    translate_frac: float = 0.05
    mirror_prob: float = 0.5
    swap_pairs: tuple = ()       # label id pairs exchanged on mirror


def augment(rec, rng, cfg=AugmentConfig()):
    """Randomly mirrored / rotated / scaled / shifted copy of a record.

    The image is resampled bilinearly, labels by nearest neighbor with
    out-of-view pixels marked ignore; center points follow the same
    transform.  The mirror path is a pure array flip, so mirroring twice
    reproduces the labels bit-identically.
    """
    mirror = rng.random() < cfg.mirror_prob
    angle = np.deg2rad(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg))
    scale = rng.uniform(cfg.scale_lo, cfg.scale_hi)
    h, w = rec.labels.shape
    ty = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * h
    tx = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * w

    image, labels, centers = rec.image, rec.labels, rec.centers
    if mirror:
        image = image[:, :, ::-1].copy()
        labels = labels[:, ::-1].copy()
        for a, b in cfg.swap_pairs:
            ma, mb = labels == a, labels == b
            labels[ma] = b
            labels[mb] = a
        if centers is not None:
            centers = centers.copy()
            centers[:, 0] = w - 1 - centers[:, 0]
            centers = centers[[1, 0, 2, 4, 3]]   # swap eye and mouth-corner pairs

    if angle == 0.0 and scale == 1.0 and ty == 0.0 and tx == 0.0:
        return SampleRecord(image, labels, centers)

    c, s = np.cos(angle), np.sin(angle)
    fwd = scale * np.array([[c, -s], [s, c]])
    inv = np.linalg.inv(fwd)
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    shift = np.array([ty, tx])
    offset = center - inv @ (center + shift)

    out_img = np.stack([ndimage.affine_transform(ch, inv, offset=offset, order=1,
                                                 mode="constant", cval=0.0)
                        for ch in image]).astype(np.float32)
    out_lab = ndimage.affine_transform(labels, inv, offset=offset, order=0,
                                       mode="constant", cval=IGNORE_LABEL,
                                       output=np.uint8)
    if centers is not None:
        yx = centers[:, ::-1].T                      # to (y, x) columns
        moved = (fwd @ (yx - center[:, None])) + center[:, None] + shift[:, None]
        centers = moved[::-1].T.astype(np.float32)
        centers[:, 0] = np.clip(centers[:, 0], 0, w - 1)
        centers[:, 1] = np.clip(centers[:, 1], 0, h - 1)
    return SampleRecord(out_img, out_lab, centers)


def fine_mirror_config(cfg):
    """Augment config with the fine-vocabulary left/right id swaps attached."""
    return replace(cfg, swap_pairs=MIRROR_SWAP_FINE)


def boundary_sampling_mask(gate_gt, ratio_neg_per_pos=5, rng=None):
    """Loss mask keeping every boundary pixel plus ratio x as many non-boundary.

    gate_gt uses the boundary convention (0 = boundary, 1 = plain, 255 =
    ignore).  A map without boundary pixels yields an all-zero mask; the
    caller skips the gate loss for that sample.
    """
    rng = rng or np.random.default_rng(0)
    gt = np.asarray(gate_gt)
    mask = np.zeros(gt.shape, dtype=np.uint8)
    pos = gt == 0
    n_pos = int(pos.sum())
    if n_pos == 0:
        return mask
    mask[pos] = 1
    cand = np.flatnonzero(gt == 1)
    take = min(ratio_neg_per_pos * n_pos, cand.size)
    if take:
        chosen = rng.choice(cand, size=take, replace=False)
        mask.ravel()[chosen] = 1
    return mask


def background_sampling_mask(labels, factor=5, rng=None):
    """Loss mask keeping all foreground plus at most factor x as much background."""
    rng = rng or np.random.default_rng(0)
    lab = np.asarray(labels)
    mask = np.zeros(lab.shape, dtype=np.uint8)
    fg = (lab != 0) & (lab != IGNORE_LABEL)
    n_fg = int(fg.sum())
    if n_fg == 0:
        log.warning("background_sampling_mask: no foreground pixels; sample skipped")
        return mask
    mask[fg] = 1
    cand = np.flatnonzero(lab == 0)
    take = min(factor * n_fg, cand.size)
    if take:
        chosen = rng.choice(cand, size=take, replace=False)
        mask.ravel()[chosen] = 1
    return mask


def _flat_palette(name):
    table = PALETTES[name]
    flat = []
    for i in range(256):
        flat.extend(table.get(i, (0, 0, 0)))
    return flat


def labels_to_png(labels, path, palette="coarse"):
    im = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    im.putpalette(_flat_palette(palette))
    im.save(path)


def image_to_png(image, path):
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def png_to_image(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_dataset(directory, records, palette="coarse"):
    """Write records as images/NNNN.png, labels/NNNN.png, points/NNNN.txt."""
    from pathlib import Path
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    if any(r.centers is not None for r in records):
        (root / "points").mkdir(parents=True, exist_ok=True)
    for i, rec in enumerate(records):
        image_to_png(rec.image, root / "images" / f"{i:04d}.png")
        labels_to_png(rec.labels, root / "labels" / f"{i:04d}.png", palette)
        if rec.centers is not None:
            lines = [f"{x:.4f} {y:.4f}" for x, y in rec.centers]
            (root / "points" / f"{i:04d}.txt").write_text("\n".join(lines) + "\n")


def load_dataset(directory, num_classes=None):
    """Read a dataset directory back into SampleRecords.

    Raises on missing image/label pairs, extent mismatches, and (when
    `num_classes` is given) label ids outside the vocabulary.
    """
    from pathlib import Path
    root = Path(directory)
    img_dir, lab_dir, pts_dir = root / "images", root / "labels", root / "points"
    if not img_dir.is_dir() or not lab_dir.is_dir():
        raise FileNotFoundError(f"{directory}: expected images/ and labels/")
    records = []
    for img_path in sorted(img_dir.glob("*.png")):
        stem = img_path.stem
        lab_path = lab_dir / f"{stem}.png"
        if not lab_path.exists():
            raise FileNotFoundError(f"dataset sample {stem}: missing label file")
        image = png_to_image(img_path)
        labels = np.asarray(Image.open(lab_path), dtype=np.uint8)
        if labels.ndim != 2:
            raise ValueError(f"dataset sample {stem}: labels are not a palette PNG")
        if image.shape[1:] != labels.shape:
            raise ValueError(f"dataset sample {stem}: image {image.shape[1:]} vs "
                             f"labels {labels.shape} extent mismatch")
        if num_classes is not None:
            ids = np.unique(labels)
            bad = ids[(ids >= num_classes) & (ids != IGNORE_LABEL)]
            if bad.size:
                raise ValueError(f"dataset sample {stem}: label id {bad[0]} outside "
                                 f"vocabulary of {num_classes} classes")
        centers = None
        pts_path = pts_dir / f"{stem}.txt"
        if pts_path.exists():
            rows = [tuple(map(float, ln.split()))
                    for ln in pts_path.read_text().splitlines() if ln.strip()]
            centers = np.asarray(rows, dtype=np.float32)
        records.append(SampleRecord(image, labels, centers))
    if not records:
        raise FileNotFoundError(f"{directory}: no samples found")
    return records
