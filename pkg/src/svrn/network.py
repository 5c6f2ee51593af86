"""Declarative layer specs and the network executor built on them.

A NetworkSpec is an ordered list of layer descriptors forming a small DAG:
each layer names the outputs it consumes, a channel-split layer exposes
its halves as ``<name>.label`` and ``<name>.gate``, and named heads map
result keys to the supervision surfaces.  The Network class allocates
parameters for a spec, runs the forward pass while recording per-layer
caches, and replays them in reverse for exact gradients.

Specs serialize to a line-oriented text form (one layer per line) that is
embedded in saved model files and parsed back on load.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers as L
from . import scan
from .tensor_ops import channel_split, default_dtype
from .vocab import vocabulary_size

LAYER_KINDS = ("conv", "pool", "deconv", "srnn", "split", "bilinear")

_DIR_TAGS = tuple(d.value for d in scan.DIRECTIONS)


@dataclass(frozen=True)
class LayerSpec:
    """One layer descriptor; unused fields stay at their defaults."""

    name: str
    kind: str
    inputs: tuple
    in_channels: int = 0
    out_channels: int = 0
    kernel_h: int = 0
    kernel_w: int = 0
    stride: int = 1
    padding: int = 0
    factor: int = 2          # pool window / bilinear upsample factor
    gated: bool = True       # srnn only
    bias_init: float = 0.0
    bias_init_hi: float = 0.0  # second-half channel bias (gate features)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if "." in self.name or " " in self.name:
            raise ValueError(f"layer name {self.name!r} may not contain '.' or spaces")

    def conv_spec(self):
        if self.kind == "conv":
            return L.ConvSpec(self.in_channels, self.out_channels,
                              self.kernel_h, self.kernel_w, self.stride,
                              self.padding)
        if self.kind == "deconv":
            # underlying forward conv: deconv output channels are its input
            return L.ConvSpec(self.out_channels, self.in_channels,
                              self.kernel_h, self.kernel_w, self.stride,
                              self.padding)
        raise ValueError(f"{self.name}: no conv geometry for kind {self.kind}")

    def to_line(self):
        parts = [f"layer {self.name} {self.kind} from={','.join(self.inputs)}"]
        if self.kind in ("conv", "deconv"):
            parts.append(f"in={self.in_channels} out={self.out_channels} "
                         f"k={self.kernel_h}x{self.kernel_w} stride={self.stride} "
                         f"pad={self.padding} bias={self.bias_init:g} "
                         f"bias_hi={self.bias_init_hi:g}")
        elif self.kind in ("pool", "bilinear"):
            parts.append(f"factor={self.factor}")
        elif self.kind == "srnn":
            parts.append(f"ch={self.in_channels} gated={int(self.gated)}")
        return " ".join(parts)

    @staticmethod
    def from_line(line):
        toks = line.split()
        if len(toks) < 4 or toks[0] != "layer":
            raise ValueError(f"bad layer line: {line!r}")
        name, kind = toks[1], toks[2]
        kv = dict(t.split("=", 1) for t in toks[3:])
        inputs = tuple(kv.pop("from").split(","))
        args = {}
        if kind in ("conv", "deconv"):
            kh, kw = kv["k"].split("x")
            args = dict(in_channels=int(kv["in"]), out_channels=int(kv["out"]),
                        kernel_h=int(kh), kernel_w=int(kw),
                        stride=int(kv["stride"]), padding=int(kv["pad"]),
                        bias_init=float(kv.get("bias", 0)),
                        bias_init_hi=float(kv.get("bias_hi", 0)))
        elif kind in ("pool", "bilinear"):
            args = dict(factor=int(kv["factor"]))
        elif kind == "srnn":
            args = dict(in_channels=int(kv["ch"]), gated=bool(int(kv["gated"])))
        return LayerSpec(name, kind, inputs, **args)


@dataclass
class NetworkSpec:
    """Ordered layer list plus the head map and run metadata."""

    name: str
    stage: str                 # "1" or "2"
    vocabulary: str            # coarse / fine / eye / nose / mouth
    num_classes: int
    in_channels: int
    input_hw: tuple            # reference input extents
    layers: list
    heads: dict                # head name -> layer name

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def param_shapes(self):
        """Every learnable parameter name with its array shape."""
        shapes = {}
        for l in self.layers:
            if l.kind in ("conv", "deconv"):
                cs = l.conv_spec()
                shapes[f"{l.name}.w"] = cs.weight_shape()
                shapes[f"{l.name}.b"] = (l.out_channels,)
            elif l.kind == "srnn":
                d = l.in_channels
                for tag in _DIR_TAGS:
                    shapes[f"{l.name}.{tag}.omega"] = (d, d)
                    shapes[f"{l.name}.{tag}.bias"] = (d,)
        return shapes

    def transition_names(self):
        return {n for n in self.param_shapes() if n.endswith(".omega")}

    def trace_shapes(self, input_hw=None, batch=1):
        """Statically chain every layer's output shape; raises on mismatch."""
        h, w = input_hw or self.input_hw
        shapes = {"input": (batch, self.in_channels, h, w)}
        for l in self.layers:
            ins = [_resolve(shapes, nm) for nm in l.inputs]
            n, c, ih, iw = ins[0]
            if l.kind == "conv":
                if c != l.in_channels:
                    raise ValueError(f"{l.name}: expects {l.in_channels} channels, "
                                     f"got {c}")
                oh, ow = l.conv_spec().out_hw(ih, iw)
                out = (n, l.out_channels, oh, ow)
            elif l.kind == "deconv":
                if c != l.in_channels:
                    raise ValueError(f"{l.name}: expects {l.in_channels} channels, "
                                     f"got {c}")
                oh, ow = l.conv_spec().deconv_out_hw(ih, iw)
                out = (n, l.out_channels, oh, ow)
            elif l.kind == "pool":
                if ih % l.factor or iw % l.factor:
                    raise ValueError(f"{l.name}: extents {ih}x{iw} not divisible")
                out = (n, c, ih // l.factor, iw // l.factor)
            elif l.kind == "split":
                if c % 2:
                    raise ValueError(f"{l.name}: odd channel count {c}")
                out = ((n, c // 2, ih, iw), (n, c // 2, ih, iw))
            elif l.kind == "srnn":
                for s in ins:
                    if s != ins[0]:
                        raise ValueError(f"{l.name}: mismatched srnn inputs {ins}")
                if c != l.in_channels:
                    raise ValueError(f"{l.name}: expects {l.in_channels} channels")
                out = ins[0]
            elif l.kind == "bilinear":
                out = (n, c, ih * l.factor, iw * l.factor)
            shapes[l.name] = out
        for head, lname in self.heads.items():
            if lname not in shapes:
                raise ValueError(f"head {head} references unknown layer {lname}")
        return shapes

    def head_extents(self, input_hw=None):
        shapes = self.trace_shapes(input_hw)
        return {h: shapes[ln][2:] for h, ln in self.heads.items()}

    def srnn_layers(self):
        return [l for l in self.layers if l.kind == "srnn"]

    def to_text(self):
        lines = [f"network {self.name}",
                 f"stage {self.stage}",
                 f"vocabulary {self.vocabulary}",
                 f"classes {self.num_classes}",
                 f"in_channels {self.in_channels}",
                 f"input {self.input_hw[0]}x{self.input_hw[1]}"]
        lines += [l.to_line() for l in self.layers]
        lines += [f"head {h} {ln}" for h, ln in self.heads.items()]
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text):
        name = stage = vocabulary = None
        num_classes = in_channels = 0
        input_hw = (0, 0)
        layer_list, heads = [], {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tag, rest = line.split(None, 1)
            if tag == "network":
                name = rest.strip()
            elif tag == "stage":
                stage = rest.strip()
            elif tag == "vocabulary":
                vocabulary = rest.strip()
            elif tag == "classes":
                num_classes = int(rest)
            elif tag == "in_channels":
                in_channels = int(rest)
            elif tag == "input":
                h, w = rest.split("x")
                input_hw = (int(h), int(w))
            elif tag == "layer":
                layer_list.append(LayerSpec.from_line(line))
            elif tag == "head":
                hname, lname = rest.split()
                heads[hname] = lname
            else:
                raise ValueError(f"unknown spec line: {line!r}")
        if name is None or stage is None or vocabulary is None:
            raise ValueError("incomplete network spec text")
        spec = NetworkSpec(name, stage, vocabulary, num_classes, in_channels,
                           input_hw, layer_list, heads)
        spec.trace_shapes()
        return spec


def _resolve(values, name):
    if "." in name:
        base, half = name.rsplit(".", 1)
        pair = values[base]
        return pair[{"label": 0, "gate": 1}[half]]
    return values[name]


class Network:
    """Executable instance of a NetworkSpec: parameters + forward/backward."""

    def __init__(self, spec, params=None, rng=None):
        self.spec = spec
        spec.trace_shapes()
        if params is None:
            self.params = self.init_params(rng or np.random.default_rng(0))
        else:
            want = spec.param_shapes()
            got = {k: v.shape for k, v in params.items()}
            if want != got:
                raise ValueError(f"parameter set does not match spec: "
                                 f"{sorted(set(want) ^ set(got)) or 'shape mismatch'}")
            self.params = params

    def init_params(self, rng):
        dtype = default_dtype()
        params = {}
        for l in self.spec.layers:
            if l.kind in ("conv", "deconv"):
                fan_in = l.in_channels * l.kernel_h * l.kernel_w
                fan_out = l.out_channels * l.kernel_h * l.kernel_w
                params[f"{l.name}.w"] = L.glorot_uniform(
                    l.conv_spec().weight_shape(), fan_in, fan_out, rng, dtype)
                b = np.full(l.out_channels, l.bias_init, dtype=dtype)
                if l.bias_init_hi:
                    b[l.out_channels // 2:] = l.bias_init_hi
                params[f"{l.name}.b"] = b
            elif l.kind == "srnn":
                for tag, direction in zip(_DIR_TAGS, scan.DIRECTIONS):
                    sp = scan.init_scan_params(l.in_channels, rng, dtype, direction)
                    params[f"{l.name}.{tag}.omega"] = sp.omega
                    params[f"{l.name}.{tag}.bias"] = sp.bias
        return params

    def scan_params(self, layer_name):
        return [scan.ScanParams(self.params[f"{layer_name}.{tag}.omega"],
                                self.params[f"{layer_name}.{tag}.bias"], d)
                for tag, d in zip(_DIR_TAGS, scan.DIRECTIONS)]

    def forward(self, x, threads=None, timings=None):
        """Run all layers; returns ({head: array}, caches for backward)."""
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"forward: input shape {x.shape} incompatible with "
                             f"{self.spec.in_channels}-channel spec")
        values = {"input": x}
        caches = {}
        for l in self.spec.layers:
            ins = [_resolve(values, nm) for nm in l.inputs]
            t0 = time.perf_counter() if timings is not None else 0.0
            out, cache = self._layer_forward(l, ins, threads)
            if timings is not None:
                timings[l.name] = timings.get(l.name, 0.0) + time.perf_counter() - t0
            values[l.name] = out
            caches[l.name] = cache
        heads = {h: values[ln] for h, ln in self.spec.heads.items()}
        return heads, caches

    def _layer_forward(self, l, ins, threads):
        if l.kind == "conv":
            x = ins[0]
            out = L.conv2d_forward(x, self.params[f"{l.name}.w"],
                                   self.params[f"{l.name}.b"], l.conv_spec())
            return out, (x,)
        if l.kind == "deconv":
            x = ins[0]
            out = L.deconv2d(x, self.params[f"{l.name}.w"], l.conv_spec(),
                             self.params[f"{l.name}.b"])
            return out, (x,)
        if l.kind == "pool":
            out, idx = L.maxpool2d(ins[0], l.factor, l.factor)
            return out, (idx,)
        if l.kind == "split":
            return channel_split(ins[0]), None
        if l.kind == "srnn":
            x = ins[0]
            gfeat = ins[1] if l.gated else None
            out, tape = scan.srnn_layer(x, gfeat, self.scan_params(l.name),
                                        threads=threads)
            return out, (tape,)
        if l.kind == "bilinear":
            x = ins[0]
            return L.bilinear_upsample(x, l.factor), (x.shape,)
        raise AssertionError(l.kind)

    def backward(self, head_grads, caches, threads=None):
        """Exact gradients for every parameter given head output gradients.

        head_grads: {head name: gradient array}.  Returns {param: grad}
        with zeros for parameters whose branch received no gradient.
        """
        out_grads = {}
        for head, g in head_grads.items():
            lname = self.spec.heads[head]
            _accum(out_grads, lname, g)
        grads = {n: np.zeros_like(p) for n, p in self.params.items()}
        for l in reversed(self.spec.layers):
            gout = self._gather_grad(l, out_grads)
            if gout is None:
                continue
            gins = self._layer_backward(l, gout, caches[l.name], grads, threads)
            for nm, gi in zip(l.inputs, gins):
                if nm != "input" and gi is not None:
                    _accum(out_grads, nm, gi)
        return grads

    def _gather_grad(self, l, out_grads):
        if l.kind == "split":
            lo = out_grads.pop(f"{l.name}.label", None)
            hi = out_grads.pop(f"{l.name}.gate", None)
            if lo is None and hi is None:
                return None
            return (lo, hi)
        return out_grads.pop(l.name, None)

    def _layer_backward(self, l, gout, cache, grads, threads):
        if l.kind == "conv":
            gx, gw, gb = L.conv2d_backward(gout, cache[0],
                                           self.params[f"{l.name}.w"], l.conv_spec())
            grads[f"{l.name}.w"] += gw
            grads[f"{l.name}.b"] += gb
            return (gx,)
        if l.kind == "deconv":
            gx, gw, gb = L.deconv2d_backward(gout, cache[0],
                                             self.params[f"{l.name}.w"], l.conv_spec())
            grads[f"{l.name}.w"] += gw
            grads[f"{l.name}.b"] += gb
            return (gx,)
        if l.kind == "pool":
            return (L.maxpool2d_backward(gout, cache[0], l.factor, l.factor),)
        if l.kind == "split":
            lo, hi = gout
            if lo is None or hi is None:
                half = lo if lo is not None else hi
                zero = np.zeros_like(half)
                lo = lo if lo is not None else zero
                hi = hi if hi is not None else zero
            return (np.concatenate([lo, hi], axis=1),)
        if l.kind == "srnn":
            tape = cache[0]
            gx, ggf, per_dir = scan.srnn_layer_backward(
                gout, tape, self.scan_params(l.name), threads=threads)
            for tag, (gw, gb) in zip(_DIR_TAGS, per_dir):
                grads[f"{l.name}.{tag}.omega"] += gw
                grads[f"{l.name}.{tag}.bias"] += gb
            return (gx, ggf) if l.gated else (gx,)
        if l.kind == "bilinear":
            in_shape = cache[0]
            return (L.bilinear_upsample_backward(gout, in_shape[2], in_shape[3],
                                                 l.factor),)
        raise AssertionError(l.kind)


def _accum(store, key, g):
    if key in store:
        store[key] = store[key] + g
    else:
        store[key] = g


def build_stage1(num_classes, input_size, variant="RNN-G", in_channels=3,
                 vocabulary=None):
    """Stage-1 whole-image network spec for one of the model variants.

    input_size 128 gives the single-face geometry; 512 appends the extra
    conv/pool units and deconv for large multi-face canvases.  Variants:
    RNN-G (gated spatial RNN), RNN (ungated baseline), CNN-S (shallow CNN
    only), CNN-Deep (RNN replaced by two 3x3x32 convolutions).
    """
    if input_size not in (128, 512):
        raise ValueError(f"build_stage1: unsupported input size {input_size}")
    if variant not in ("RNN-G", "RNN", "CNN-S", "CNN-Deep"):
        raise ValueError(f"build_stage1: unknown variant {variant!r}")
    if vocabulary is None:
        vocabulary = "coarse" if num_classes == 3 else "fine"

    layers = [
        LayerSpec("conv1", "conv", ("input",), in_channels, 16, 5, 5, 1, 2),
        LayerSpec("pool2", "pool", ("conv1",)),
    ]
    trunk_out = "pool2"
    if input_size == 512:
        layers += [
            LayerSpec("conv2a", "conv", ("pool2",), 16, 16, 3, 3, 1, 1),
            LayerSpec("pool2a", "pool", ("conv2a",)),
            LayerSpec("conv2b", "conv", ("pool2a",), 16, 16, 3, 3, 1, 1),
            LayerSpec("pool2b", "pool", ("conv2b",)),
        ]
        trunk_out = "pool2b"
    layers += [
        LayerSpec("conv3", "conv", (trunk_out,), 16, 32, 3, 3, 1, 1),
        LayerSpec("pool4", "pool", ("conv3",)),
        LayerSpec("conv5", "conv", ("pool4",), 32, 32, 3, 3, 1, 1),
    ]

    heads = {}
    deconv_out = 16 if variant in ("RNN-G", "CNN-Deep") else 8
    gate_bias = 1.0 if variant == "RNN-G" and input_size == 128 else 0.0
    layers.append(LayerSpec("deconv6", "deconv", ("conv5",), 32, deconv_out,
                            4, 4, 2, 1, bias_init_hi=gate_bias))
    feat = "deconv6"
    if input_size == 512:
        layers.append(LayerSpec("deconv6b", "deconv", ("deconv6",), deconv_out,
                                deconv_out, 4, 4, 2, 1,
                                bias_init_hi=1.0 if variant == "RNN-G" else 0.0))
        feat = "deconv6b"
    final_up = 2 if input_size == 128 else 4

    if variant == "RNN-G":
        layers += [
            LayerSpec("split7", "split", (feat,)),
            LayerSpec("gate_head", "conv", ("split7.gate",), 8, 1, 1, 1, 1, 0,
                      bias_init=1.0),
            LayerSpec("coarse_head", "conv", ("split7.label",), 8, num_classes,
                      3, 3, 1, 1),
            LayerSpec("srnn8", "srnn", ("split7.label", "split7.gate"),
                      in_channels=8, gated=True),
            LayerSpec("final_conv", "conv", ("srnn8",), 8, num_classes, 1, 1, 1, 0),
            LayerSpec("up_final", "bilinear", ("final_conv",), factor=final_up),
        ]
        heads = {"coarse_label": "coarse_head", "gate": "gate_head",
                 "final_label": "up_final"}
    elif variant == "RNN":
        layers += [
            LayerSpec("coarse_head", "conv", (feat,), 8, num_classes, 3, 3, 1, 1),
            LayerSpec("srnn8", "srnn", (feat,), in_channels=8, gated=False),
            LayerSpec("final_conv", "conv", ("srnn8",), 8, num_classes, 1, 1, 1, 0),
            LayerSpec("up_final", "bilinear", ("final_conv",), factor=final_up),
        ]
        heads = {"coarse_label": "coarse_head", "final_label": "up_final"}
    elif variant == "CNN-S":
        layers += [
            LayerSpec("coarse_head", "conv", (feat,), 8, num_classes, 3, 3, 1, 1),
            LayerSpec("up_final", "bilinear", ("coarse_head",), factor=final_up),
        ]
        heads = {"final_label": "up_final"}
    else:  # CNN-Deep
        layers += [
            LayerSpec("deep_a", "conv", (feat,), 16, 32, 3, 3, 1, 1),
            LayerSpec("deep_b", "conv", ("deep_a",), 32, 32, 3, 3, 1, 1),
            LayerSpec("final_conv", "conv", ("deep_b",), 32, num_classes, 1, 1, 1, 0),
            LayerSpec("up_final", "bilinear", ("final_conv",), factor=final_up),
        ]
        heads = {"final_label": "up_final"}

    spec = NetworkSpec(f"stage1-{variant.lower()}-{num_classes}c-{input_size}",
                       "1", vocabulary, num_classes, in_channels,
                       (input_size, input_size), layers, heads)
    spec.trace_shapes()
    return spec


def build_stage2(kind):
    """Component sub-network spec: 5 convolutions, 2 pools, 2 deconvolutions."""
    from .vocab import COMPONENT_NET_CLASSES, PATCH_EXTENTS
    net = {"eye_left": "eye", "eye_right": "eye", "nose": "nose",
           "mouth": "mouth"}.get(kind, kind)
    if net not in COMPONENT_NET_CLASSES:
        raise ValueError(f"build_stage2: unknown component kind {kind!r}")
    classes = len(COMPONENT_NET_CLASSES[net])
    hw = PATCH_EXTENTS["mouth" if net == "mouth" else "eye_left"]
    layers = [
        LayerSpec("conv1", "conv", ("input",), 3, 16, 5, 5, 1, 2),
        LayerSpec("pool1", "pool", ("conv1",)),
        LayerSpec("conv2", "conv", ("pool1",), 16, 32, 3, 3, 1, 1),
        LayerSpec("pool2", "pool", ("conv2",)),
        LayerSpec("conv3", "conv", ("pool2",), 32, 32, 3, 3, 1, 1),
        LayerSpec("deconv4", "deconv", ("conv3",), 32, 16, 4, 4, 2, 1),
        LayerSpec("conv5", "conv", ("deconv4",), 16, 16, 3, 3, 1, 1),
        LayerSpec("deconv6", "deconv", ("conv5",), 16, 16, 4, 4, 2, 1),
        LayerSpec("head", "conv", ("deconv6",), 16, classes, 1, 1, 1, 0),
    ]
    spec = NetworkSpec(f"stage2-{net}", "2", net, classes, 3, hw, layers,
                       {"final_label": "head"})
    spec.trace_shapes()
    return spec


def parameter_count(spec):
    return sum(int(np.prod(s)) for s in spec.param_shapes().values())
