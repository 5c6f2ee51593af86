"""Command implementations behind the CLI: eval, infer, and bench.

Training and data generation live in train.py / data.py; this module adds
the evaluation drivers (single network and two-stage composition), image
inference with PNG outputs, and the timing harness.
"""

import time

import numpy as np
from PIL import Image

from .data import image_to_png, labels_to_png, png_to_image
from .metrics import GroupedF, confusion_matrix, report_from_confusion
from .network import Network
from .parsing import compose_two_stage, crop_component, resize_bilinear, resize_nearest
from .scan import DIRECTIONS, ScanParams, srnn_layer
from .tensor_ops import default_dtype
from .train import predict_labels
from .vocab import CLASS_NAMES, COMPONENT_KINDS, COMPONENT_NET, vocabulary_size


def _class_names(spec):
    names = CLASS_NAMES.get(spec.vocabulary)
    if names is None:
        from .vocab import COMPONENT_NET_CLASSES
        names = COMPONENT_NET_CLASSES[spec.vocabulary]
    return names


def evaluate(net, records, threads=None, eval_at_256=False, batch_size=8):
    """Score one network over records; returns an EvalReport.

    Coarse-vocabulary networks evaluated on fine-labeled records score
    against the coarsened ground truth.  With eval_at_256, predictions and
    labels are downscaled to 256x256 before scoring (large-canvas
    convention).
    """
    from .parsing import coarsen_fine_labels
    spec = net.spec
    ncls = spec.num_classes
    conf = np.zeros((ncls, ncls), dtype=np.int64)
    grouped = GroupedF() if spec.vocabulary == "fine" else None
    t0 = time.perf_counter()
    preds = predict_labels(net, [r.image for r in records], threads=threads,
                           batch_size=batch_size)
    elapsed = time.perf_counter() - t0
    for pred, rec in zip(preds, records):
        gt = rec.labels
        if spec.vocabulary == "coarse" and gt.max() > 2:
            gt = coarsen_fine_labels(gt)
        if eval_at_256:
            pred = resize_nearest(pred, 256, 256)
            gt = resize_nearest(gt, 256, 256)
        conf += confusion_matrix(pred, gt, ncls)
        if grouped is not None:
            grouped.add(pred, gt)
    report = report_from_confusion(conf, _class_names(spec),
                                   {"per_image": elapsed / max(len(records), 1)})
    if grouped is not None:
        report.groups = grouped.results()
        report.groups["mean_component_f"] = grouped.mean_component_f()
    return report


def evaluate_two_stage(stage1_net, component_nets, records, threads=None,
                       batch_size=8):
    """Two-stage pipeline scoring against fine-vocabulary ground truth.

    Stage 1 predicts the coarse map; component crops (taken from the
    dataset-provided labels and centers) run through their sub-networks and
    are composed back over the coarse prediction.
    """
    ncls = vocabulary_size("fine")
    conf = np.zeros((ncls, ncls), dtype=np.int64)
    grouped = GroupedF()
    t0 = time.perf_counter()
    coarse_preds = predict_labels(stage1_net, [r.image for r in records],
                                  threads=threads, batch_size=batch_size)
    for coarse_pred, rec in zip(coarse_preds, records):
        comp_preds = []
        for kind in COMPONENT_KINDS:
            net = component_nets.get(COMPONENT_NET[kind])
            if net is None:
                continue
            try:
                patch, _, crop = crop_component(rec.image, rec.labels, kind,
                                                rec.centers)
            except ValueError:
                continue
            pred = predict_labels(net, [patch], threads=threads)[0]
            comp_preds.append((pred, crop))
        composed = compose_two_stage(coarse_pred, comp_preds)
        conf += confusion_matrix(composed, rec.labels, ncls)
        grouped.add(composed, rec.labels)
    elapsed = time.perf_counter() - t0
    report = report_from_confusion(conf, CLASS_NAMES["fine"],
                                   {"per_image": elapsed / max(len(records), 1)})
    report.groups = grouped.results()
    report.groups["mean_component_f"] = grouped.mean_component_f()
    return report


def fit_image(image, spec):
    """Make an arbitrary image feedable: native when the extents chain
    through the spec, otherwise aspect-preserving resize plus zero padding
    to the spec's reference input size."""
    h, w = image.shape[1:]
    try:
        spec.trace_shapes((h, w))
        return image
    except ValueError:
        pass
    th, tw = spec.input_hw
    scale = min(th / h, tw / w)
    nh, nw = max(int(round(h * scale)), 1), max(int(round(w * scale)), 1)
    resized = resize_bilinear(image, nh, nw)
    out = np.zeros((image.shape[0], th, tw), dtype=image.dtype)
    y0, x0 = (th - nh) // 2, (tw - nw) // 2
    out[:, y0:y0 + nh, x0:x0 + nw] = resized
    return out


def infer_image(net, image_path, out_path, gate_path=None, threads=None):
    """Run one image through the network; write label (and gate) PNGs."""
    image = png_to_image(image_path)
    x = fit_image(image, net.spec)[None].astype(default_dtype())
    heads, _ = net.forward(x, threads=threads)
    labels = heads["final_label"].argmax(axis=1)[0].astype(np.uint8)
    palette = net.spec.vocabulary if net.spec.vocabulary in ("coarse", "fine") \
        else "fine"
    labels_to_png(labels, out_path, palette)
    if gate_path is not None:
        if "gate" not in heads:
            raise ValueError("model has no gate head to visualize")
        gate = 1.0 / (1.0 + np.exp(-heads["gate"][0, 0]))
        Image.fromarray((gate * 255.0 + 0.5).astype(np.uint8), "L").save(gate_path)
    return labels


def bench_network(net, size=None, iterations=20, threads=None, warmup=3):
    """Forward latency stats plus a per-layer time breakdown."""
    if iterations < 10:
        raise ValueError("bench: iterations must be >= 10")
    h, w = (size, size) if size else net.spec.input_hw
    rng = np.random.default_rng(0)
    x = rng.random((1, net.spec.in_channels, h, w)).astype(default_dtype())
    for _ in range(warmup):
        net.forward(x, threads=threads)
    layer_times = {}
    samples = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        net.forward(x, threads=threads, timings=layer_times)
        samples.append(time.perf_counter() - t0)
    samples = np.array(samples)
    return {
        "input_hw": (h, w),
        "iterations": iterations,
        "threads": threads or 1,
        "mean_s": float(samples.mean()),
        "median_s": float(np.median(samples)),
        "p95_s": float(np.percentile(samples, 95)),
        "per_layer_s": {k: v / iterations for k, v in layer_times.items()},
    }


def bench_scan(size=512, d=8, iterations=10, warmup=2):
    """Directional-scan throughput, sequential vs 4-thread execution."""
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, d, size, size)).astype(np.float32)
    gfeat = rng.standard_normal((1, d, size, size)).astype(np.float32)
    params = [ScanParams(rng.standard_normal((d, d)).astype(np.float32) * 0.2,
                         rng.standard_normal(d).astype(np.float32) * 0.1, dd)
              for dd in DIRECTIONS]

    def run(threads):
        for _ in range(warmup):
            srnn_layer(x, gfeat, params, threads=threads)
        times = []
        for _ in range(iterations):
            t0 = time.perf_counter()
            srnn_layer(x, gfeat, params, threads=threads)
            times.append(time.perf_counter() - t0)
        return float(np.median(times))

    seq = run(None)
    par = run(4)
    return {"size": size, "sequential_s": seq, "threaded_s": par,
            "speedup": seq / par if par > 0 else float("inf")}


def format_bench(report):
    lines = [f"input {report['input_hw'][0]}x{report['input_hw'][1]}  "
             f"threads={report['threads']}  iters={report['iterations']}",
             f"latency mean={report['mean_s']*1e3:.2f} ms  "
             f"median={report['median_s']*1e3:.2f} ms  "
             f"p95={report['p95_s']*1e3:.2f} ms"]
    for name, t in report["per_layer_s"].items():
        lines.append(f"  {name:>12s}  {t*1e3:8.3f} ms")
    return "\n".join(lines)
