"""CNN building blocks with explicit forward and backward passes.

Every op here is a pure function over numpy arrays in NCHW layout.  The
convolutions are cross-correlations lowered to one big matmul via im2col;
their backward passes recompute the column matrix from the saved input
instead of keeping it alive between calls.

Label maps use small integer class ids; the value 255 marks pixels that
are excluded from every loss (IGNORE_LABEL).
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor_ops import spectral_norm_project
from .vocab import IGNORE_LABEL


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution: channels, kernel, stride, symmetric zero pad."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1 or self.stride < 1:
            raise ValueError(f"ConvSpec: kernel and stride must be >= 1: {self}")
        if self.padding < 0:
            raise ValueError(f"ConvSpec: negative padding: {self}")

    def out_hw(self, h, w):
        """Output extents of the forward convolution; errors if non-integral."""
        num_h = h + 2 * self.padding - self.kernel_h
        num_w = w + 2 * self.padding - self.kernel_w
        if num_h < 0 or num_w < 0 or num_h % self.stride or num_w % self.stride:
            raise ValueError(
                f"ConvSpec: non-integral output extent for input {h}x{w} with {self}")
        return num_h // self.stride + 1, num_w // self.stride + 1

    def deconv_out_hw(self, h, w):
        """Output extents of the transposed convolution."""
        return ((h - 1) * self.stride + self.kernel_h - 2 * self.padding,
                (w - 1) * self.stride + self.kernel_w - 2 * self.padding)

    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)


def _im2col(x, spec):
    """Lower input patches to a (N*H'*W', Cin*kh*kw) matrix."""
    n, c, h, w = x.shape
    oh, ow = spec.out_hw(h, w)
    p = spec.padding
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (spec.kernel_h, spec.kernel_w), axis=(2, 3))
    win = win[:, :, ::spec.stride, ::spec.stride]          # N,C,oh,ow,kh,kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, -1)
    return np.ascontiguousarray(cols), (oh, ow)


def _col2im(cols, x_shape, spec):
    """Adjoint of _im2col: scatter-add column rows back into an input-shaped array."""
    n, c, h, w = x_shape
    oh, ow = spec.out_hw(h, w)
    p, s = spec.padding, spec.stride
    g = cols.reshape(n, oh, ow, c, spec.kernel_h, spec.kernel_w)
    g = g.transpose(0, 3, 4, 5, 1, 2)                      # N,C,kh,kw,oh,ow
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            out[:, :, i:i + s * oh:s, j:j + s * ow:s] += g[:, :, i, j]
    if p:
        out = out[:, :, p:-p, p:-p]
    return np.ascontiguousarray(out)


def _check_conv_args(x, w, spec):
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ValueError(f"conv: input shape {x.shape} incompatible with {spec}")
    if w.shape != spec.weight_shape():
        raise ValueError(f"conv: weight shape {w.shape} != {spec.weight_shape()}")


def conv2d_forward(x, w, b, spec):
    """Cross-correlation with zero padding and bias add.

    x: (N, Cin, H, W); w: (Cout, Cin, kh, kw); b: (Cout,).
    Returns (N, Cout, H', W') with H' = (H + 2*pad - kh) / stride + 1.
    """
    _check_conv_args(x, w, spec)
    n = x.shape[0]
    cols, (oh, ow) = _im2col(x, spec)
    out = cols @ w.reshape(spec.out_channels, -1).T
    if b is not None:
        out += b
    return out.reshape(n, oh, ow, spec.out_channels).transpose(0, 3, 1, 2)


def conv2d_backward(grad_out, x, w, spec):
    """Exact gradients of conv2d_forward; returns (grad_x, grad_w, grad_b)."""
    _check_conv_args(x, w, spec)
    n = x.shape[0]
    oh, ow = spec.out_hw(x.shape[2], x.shape[3])
    if grad_out.shape != (n, spec.out_channels, oh, ow):
        raise ValueError(f"conv2d_backward: grad shape {grad_out.shape} != "
                         f"{(n, spec.out_channels, oh, ow)}")
    gom = np.ascontiguousarray(
        grad_out.transpose(0, 2, 3, 1).reshape(-1, spec.out_channels))
    cols, _ = _im2col(x, spec)
    grad_w = (gom.T @ cols).reshape(spec.weight_shape())
    grad_b = gom.sum(axis=0)
    grad_x = _col2im(gom @ w.reshape(spec.out_channels, -1), x.shape, spec)
    return grad_x, grad_w, grad_b


def deconv2d(x, w, spec, b=None):
    """Transposed convolution: the adjoint of conv2d_forward with the same weights.

    `spec` describes the underlying forward convolution, so x carries
    spec.out_channels channels and the result spec.in_channels channels,
    with output extents (H-1)*stride + kh - 2*pad.  An optional bias over
    the output channels is added afterwards (not part of the adjoint pair).
    """
    if x.ndim != 4 or x.shape[1] != spec.out_channels:
        raise ValueError(f"deconv: input shape {x.shape} incompatible with {spec}")
    if w.shape != spec.weight_shape():
        raise ValueError(f"deconv: weight shape {w.shape} != {spec.weight_shape()}")
    n, _, hs, ws = x.shape
    oh, ow = spec.deconv_out_hw(hs, ws)
    xm = np.ascontiguousarray(x.transpose(0, 2, 3, 1).reshape(-1, spec.out_channels))
    out = _col2im(xm @ w.reshape(spec.out_channels, -1),
                  (n, spec.in_channels, oh, ow), spec)
    if b is not None:
        out += b.reshape(1, -1, 1, 1)
    return out


def deconv2d_backward(grad_out, x, w, spec):
    """Gradients of deconv2d; returns (grad_x, grad_w, grad_b)."""
    n = x.shape[0]
    oh, ow = spec.deconv_out_hw(x.shape[2], x.shape[3])
    if grad_out.shape != (n, spec.in_channels, oh, ow):
        raise ValueError(f"deconv2d_backward: grad shape {grad_out.shape} != "
                         f"{(n, spec.in_channels, oh, ow)}")
    gcols, _ = _im2col(grad_out, spec)
    wm = w.reshape(spec.out_channels, -1)
    grad_x = (gcols @ wm.T).reshape(n, x.shape[2], x.shape[3],
                                    spec.out_channels).transpose(0, 3, 1, 2)
    xm = x.transpose(0, 2, 3, 1).reshape(-1, spec.out_channels)
    grad_w = (xm.T @ gcols).reshape(spec.weight_shape())
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def maxpool2d(x, window=2, stride=2):
    """Non-overlapping max pooling; returns (pooled, argmax indices).

    Ties go to the first element of the window in row-major order, which
    makes the backward routing deterministic.
    """
    if window != stride:
        raise ValueError("maxpool2d: only window == stride is supported")
    n, c, h, w = x.shape
    if h % stride or w % stride:
        raise ValueError(f"maxpool2d: extents {h}x{w} not divisible by {stride}")
    oh, ow = h // stride, w // stride
    win = x.reshape(n, c, oh, stride, ow, stride).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(n, c, oh, ow, stride * stride)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2d_backward(grad_out, idx, window=2, stride=2):
    """Route each output gradient to its recorded argmax position."""
    n, c, oh, ow = grad_out.shape
    flat = np.zeros((n, c, oh, ow, stride * stride), dtype=grad_out.dtype)
    np.put_along_axis(flat, idx[..., None], grad_out[..., None], axis=-1)
    win = flat.reshape(n, c, oh, ow, stride, stride).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(win.reshape(n, c, oh * stride, ow * stride))


def _prep_mask(mask, target):
    """Combine an inclusion mask with the ignore marker into one boolean map."""
    valid = target != IGNORE_LABEL
    if mask is not None:
        m = np.asarray(mask)
        if m.ndim == 4:
            m = m[:, 0]
        if m.shape != target.shape:
            raise ValueError(f"loss mask shape {m.shape} != target {target.shape}")
        valid &= m.astype(bool)
    return valid


def softmax_ce(logits, target, mask=None):
    """Mean masked softmax cross entropy and its gradient w.r.t. the logits.

    logits: (N, C, H, W); target: (N, H, W) int class ids (255 = ignore);
    mask: optional (N, 1, H, W) or (N, H, W) binary inclusion weights.
    Uses max-subtracted log-sum-exp; the gradient is (softmax - onehot)
    divided by the included-pixel count, zero elsewhere.
    """
    n, c, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ValueError(f"softmax_ce: target shape {target.shape} != {(n, h, w)}")
    valid = _prep_mask(mask, target)
    count = int(valid.sum())
    if count == 0:
        raise ValueError("softmax_ce: no included pixels")
    tval = target[valid]
    if tval.min() < 0 or tval.max() >= c:
        raise ValueError(f"softmax_ce: class id outside [0, {c}) in target")

    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    ez = np.exp(z)
    se = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(se)

    tsafe = np.where(valid, target, 0)
    picked = np.take_along_axis(logp, tsafe[:, None], axis=1)[:, 0]
    loss = -float(picked[valid].sum()) / count

    grad = ez / se
    onehot = np.zeros_like(grad)
    np.put_along_axis(onehot, tsafe[:, None], 1.0, axis=1)
    grad = (grad - onehot) * (valid[:, None] / count)
    return loss, grad.astype(logits.dtype, copy=False)


def sigmoid_bce(logit, target, mask=None):
    """Mean masked binary cross entropy on a single logit channel.

    logit: (N, 1, H, W); target: (N, 1, H, W) or (N, H, W) in {0, 1}
    (255 = ignore).  Stable form: loss = softplus(z) - t*z, gradient
    (sigmoid(z) - t) / count on included pixels.
    """
    if logit.ndim != 4 or logit.shape[1] != 1:
        raise ValueError(f"sigmoid_bce: expected (N,1,H,W) logit, got {logit.shape}")
    t = np.asarray(target)
    if t.ndim == 4:
        t = t[:, 0]
    n, _, h, w = logit.shape
    if t.shape != (n, h, w):
        raise ValueError(f"sigmoid_bce: target shape {t.shape} != {(n, h, w)}")
    valid = _prep_mask(mask, t)
    count = int(valid.sum())
    if count == 0:
        raise ValueError("sigmoid_bce: no included pixels")
    z = logit[:, 0]
    tf = np.where(valid, t, 0).astype(z.dtype)
    per_pixel = np.maximum(z, 0) - tf * z + np.log1p(np.exp(-np.abs(z)))
    loss = float(per_pixel[valid].sum()) / count
    sig = 1.0 / (1.0 + np.exp(-z))
    grad = ((sig - tf) * valid / count)[:, None]
    return loss, grad.astype(logit.dtype, copy=False)


def bilinear_upsample(x, factor):
    """Fixed bilinear upsampling by an integer factor (no learned weights).

    Samples source coordinate (i + 0.5) / factor - 0.5 for output index i,
    clamping at the borders.
    """
    idx0h, idx1h, wh = _bilinear_taps(x.shape[2], factor)
    idx0w, idx1w, ww = _bilinear_taps(x.shape[3], factor)
    wh = wh.astype(x.dtype)
    ww = ww.astype(x.dtype)
    rows = x[:, :, idx0h] * (1 - wh)[:, None] + x[:, :, idx1h] * wh[:, None]
    out = rows[:, :, :, idx0w] * (1 - ww) + rows[:, :, :, idx1w] * ww
    return out


def bilinear_upsample_backward(grad_out, in_h, in_w, factor):
    """Adjoint of bilinear_upsample onto an (in_h, in_w) input."""
    idx0h, idx1h, wh = _bilinear_taps(in_h, factor)
    idx0w, idx1w, ww = _bilinear_taps(in_w, factor)
    wh = wh.astype(grad_out.dtype)
    ww = ww.astype(grad_out.dtype)
    n, c = grad_out.shape[:2]
    rows = np.zeros((n, c, len(idx0h), in_w), dtype=grad_out.dtype)
    gw = grad_out.transpose(3, 0, 1, 2)
    rows_t = rows.transpose(3, 0, 1, 2)
    np.add.at(rows_t, idx0w, gw * (1 - ww)[:, None, None, None])
    np.add.at(rows_t, idx1w, gw * ww[:, None, None, None])
    grad_in = np.zeros((n, c, in_h, in_w), dtype=grad_out.dtype)
    rh = rows.transpose(2, 0, 1, 3)
    gi = grad_in.transpose(2, 0, 1, 3)
    np.add.at(gi, idx0h, rh * (1 - wh)[:, None, None, None])
    np.add.at(gi, idx1h, rh * wh[:, None, None, None])
    return grad_in


def _bilinear_taps(in_len, factor):
    out_len = in_len * factor
    src = (np.arange(out_len) + 0.5) / factor - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i0c = np.clip(i0, 0, in_len - 1)
    i1c = np.clip(i0 + 1, 0, in_len - 1)
    return i0c, i1c, frac


def glorot_uniform(shape, fan_in, fan_out, rng, dtype):
    """Uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


@dataclass
class OptimState:
    """SGD-with-momentum hyperparameters and per-parameter velocity buffers."""

    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocities: dict = field(default_factory=dict)


def sgd_step(params, grads, state, transition_names=()):
    """One in-place momentum SGD update over a name -> array parameter dict.

    v <- mu*v - lr*(g + wd*p); p <- p + v.  Parameters named in
    `transition_names` are spatial-RNN transition matrices and are
    projected back to spectral norm <= 1 after the update.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"sgd_step: gradient shape {g.shape} != parameter "
                             f"{p.shape} for {name}")
        v = state.velocities.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = state.momentum * v - state.learning_rate * (g + state.weight_decay * p)
        state.velocities[name] = v
        p += v
        if name in transition_names:
            params[name] = spectral_norm_project(p, 1.0).astype(p.dtype, copy=False)
    return params
