"""Four-directional gated linear recurrence over a 2D grid, with exact BPTT.

A scan treats every row (horizontal directions) or column (vertical
directions) of an NCHW map as an independent 1D lane and runs the gated
recurrence h[i] = x[i] + g[i] * (omega @ h[i-1] + bias) along it, with the
hidden state before the first node fixed at zero.  The four directional
maps are merged by node-wise max pooling, and the backward pass routes
gradients only to the winning direction at each node.

Gates are per-channel coefficients in (0, 1); srnn_layer produces them by
logistic squashing of the gate feature map, which keeps |g| < 1 by
construction instead of by clipping.
"""

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _scan_kernels
from .tensor_ops import ensure_finite


class Direction(enum.Enum):
    LEFT_TO_RIGHT = "lr"
    RIGHT_TO_LEFT = "rl"
    TOP_TO_BOTTOM = "tb"
    BOTTOM_TO_TOP = "bt"


# Fixed order used for max-integration tie-breaking and argmax encoding.
DIRECTIONS = (Direction.LEFT_TO_RIGHT, Direction.RIGHT_TO_LEFT,
              Direction.TOP_TO_BOTTOM, Direction.BOTTOM_TO_TOP)


@dataclass
class ScanParams:
    """Per-direction recurrence parameters: d x d transition and d bias."""

    omega: np.ndarray
    bias: np.ndarray
    direction: Direction

    def __post_init__(self):
        self.omega = np.asarray(self.omega)
        self.bias = np.asarray(self.bias)
        if self.omega.ndim != 2 or self.omega.shape[0] != self.omega.shape[1]:
            raise ValueError(f"ScanParams: omega must be square, got {self.omega.shape}")
        if self.bias.shape != (self.omega.shape[0],):
            raise ValueError(f"ScanParams: bias shape {self.bias.shape} does not "
                             f"match omega {self.omega.shape}")


@dataclass
class ScanTape:
    """State recorded by one forward scan, consumed by exactly one backward."""

    direction: Direction
    hidden: np.ndarray        # canonical (lanes, steps, d) hidden states
    gate: np.ndarray          # canonical (lanes, steps, d) gate values
    in_shape: tuple
    consumed: bool = False


def _to_lanes(t, direction):
    """Permute/flip an NCHW map into the canonical (lanes, steps, d) layout."""
    if direction in (Direction.LEFT_TO_RIGHT, Direction.RIGHT_TO_LEFT):
        a = t.transpose(0, 2, 3, 1)            # N,H,W,d: lanes are rows
    else:
        a = t.transpose(0, 3, 2, 1)            # N,W,H,d: lanes are columns
    if direction in (Direction.RIGHT_TO_LEFT, Direction.BOTTOM_TO_TOP):
        a = a[:, :, ::-1]
    n, l, s, d = a.shape
    return np.ascontiguousarray(a.reshape(n * l, s, d))


def _from_lanes(a, direction, in_shape):
    """Inverse of _to_lanes back to NCHW."""
    n, d, h, w = in_shape
    if direction in (Direction.LEFT_TO_RIGHT, Direction.RIGHT_TO_LEFT):
        a = a.reshape(n, h, w, d)
    else:
        a = a.reshape(n, w, h, d)
    if direction in (Direction.RIGHT_TO_LEFT, Direction.BOTTOM_TO_TOP):
        a = a[:, :, ::-1]
    if direction in (Direction.LEFT_TO_RIGHT, Direction.RIGHT_TO_LEFT):
        a = a.transpose(0, 3, 1, 2)
    else:
        a = a.transpose(0, 3, 2, 1)
    return np.ascontiguousarray(a)


def scan_forward_gated(x, g, params):
    """Run one gated directional scan; returns (output, ScanTape).

    x, g: (N, d, H, W) with d equal to the transition dimension; g entries
    are expected in (0, 1).  Lanes perpendicular to the scan direction are
    independent.
    """
    x = np.asarray(x)
    g = np.asarray(g)
    if x.ndim != 4 or x.shape != g.shape:
        raise ValueError(f"scan: x {x.shape} and g {g.shape} must be equal NCHW shapes")
    d = params.omega.shape[0]
    if x.shape[1] != d:
        raise ValueError(f"scan: channel count {x.shape[1]} != transition dim {d}")
    ensure_finite(x, "scan input")
    ensure_finite(g, "scan gate")
    dtype = np.result_type(x.dtype, g.dtype, params.omega.dtype)
    xl = _to_lanes(x.astype(dtype, copy=False), params.direction)
    gl = _to_lanes(g.astype(dtype, copy=False), params.direction)
    h = np.empty_like(xl)
    _scan_kernels.scan_fwd(xl, gl,
                           np.ascontiguousarray(params.omega.astype(dtype, copy=False)),
                           np.ascontiguousarray(params.bias.astype(dtype, copy=False)),
                           h)
    tape = ScanTape(params.direction, h, gl, x.shape)
    return _from_lanes(h, params.direction, x.shape), tape


def scan_forward_plain(x, p):
    """Ungated baseline scan: the gated recurrence with g fixed to one."""
    return scan_forward_gated(x, np.ones_like(np.asarray(x)), p)


def scan_backward_gated(grad_out, tape, params):
    """Exact gradients of scan_forward_gated from its recorded tape.

    Returns (grad_x, grad_g, grad_omega, grad_bias).  The tape is consumed:
    a second backward through the same tape raises.
    """
    if tape is None or tape.consumed:
        raise ValueError("scan_backward_gated: tape missing or already consumed")
    if tape.direction is not params.direction:
        raise ValueError("scan_backward_gated: tape direction does not match params")
    grad_out = np.asarray(grad_out)
    if grad_out.shape != tape.in_shape:
        raise ValueError(f"scan_backward_gated: grad shape {grad_out.shape} != "
                         f"forward input {tape.in_shape}")
    tape.consumed = True
    dtype = tape.hidden.dtype
    ql = _to_lanes(grad_out.astype(dtype, copy=False), params.direction)
    grad_x = np.empty_like(ql)
    grad_g = np.empty_like(ql)
    grad_omega = np.zeros_like(params.omega, dtype=dtype)
    grad_bias = np.zeros_like(params.bias, dtype=dtype)
    _scan_kernels.scan_bwd(ql, tape.gate, tape.hidden,
                           np.ascontiguousarray(params.omega.astype(dtype, copy=False)),
                           np.ascontiguousarray(params.bias.astype(dtype, copy=False)),
                           grad_x, grad_g, grad_omega, grad_bias)
    return (_from_lanes(grad_x, params.direction, tape.in_shape),
            _from_lanes(grad_g, params.direction, tape.in_shape),
            grad_omega, grad_bias)


def integrate_max(h_lr, h_rl, h_tb, h_bt):
    """Node-wise max over the four directional maps.

    Returns (max map, argmax map); the argmax map records the winning
    direction index in DIRECTIONS order, ties broken toward the earlier
    direction.
    """
    maps = (h_lr, h_rl, h_tb, h_bt)
    shape = h_lr.shape
    for m in maps:
        if m.shape != shape:
            raise ValueError("integrate_max: directional maps must share one shape")
    stacked = np.stack(maps)
    amax = stacked.argmax(axis=0)
    out = np.take_along_axis(stacked, amax[None], axis=0)[0]
    return out, amax.astype(np.uint8)


def integrate_max_backward(grad_out, amax):
    """Route the integrated gradient solely to each node's argmax direction."""
    return [grad_out * (amax == k) for k in range(4)]


@dataclass
class SrnnTape:
    """Everything srnn_layer_backward needs: scan tapes, routing, gate values."""

    scan_tapes: list
    amax: np.ndarray
    gate: np.ndarray | None   # sigmoid of the gate features; None when plain
    plain: bool = False


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def srnn_layer(x, g_features, params, threads=None):
    """Full spatial-RNN layer: gate squashing, four scans, max integration.

    x, g_features: (N, d, H, W); params: one ScanParams per direction in
    DIRECTIONS order.  With g_features None the layer runs the ungated
    baseline recurrence instead.  `threads` > 1 runs the directional scans
    on a thread pool; results are bit-identical to the sequential path.
    Returns (output, SrnnTape).
    """
    _check_direction_params(params)
    if g_features is None:
        g = np.ones_like(np.asarray(x))
        plain = True
    else:
        if np.asarray(g_features).shape != np.asarray(x).shape:
            raise ValueError("srnn_layer: x and g_features shapes differ")
        g = _sigmoid(np.asarray(g_features))
        plain = False

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=min(threads, 4)) as pool:
            results = list(pool.map(lambda p: scan_forward_gated(x, g, p), params))
    else:
        results = [scan_forward_gated(x, g, p) for p in params]
    outs = [r[0] for r in results]
    tapes = [r[1] for r in results]
    merged, amax = integrate_max(*outs)
    return merged, SrnnTape(tapes, amax, None if plain else g, plain)


def srnn_layer_backward(grad_out, tape, params, threads=None):
    """Gradients of srnn_layer.

    Returns (grad_x, grad_g_features, per_direction) where per_direction is
    a list of (grad_omega, grad_bias) in DIRECTIONS order.  grad_g_features
    is None for the ungated baseline.
    """
    _check_direction_params(params)
    routed = integrate_max_backward(grad_out, tape.amax)

    def one(i):
        return scan_backward_gated(routed[i], tape.scan_tapes[i], params[i])

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=min(threads, 4)) as pool:
            results = list(pool.map(one, range(4)))
    else:
        results = [one(i) for i in range(4)]

    grad_x = results[0][0] + results[1][0] + results[2][0] + results[3][0]
    per_direction = [(r[2], r[3]) for r in results]
    if tape.plain:
        return grad_x, None, per_direction
    grad_g = results[0][1] + results[1][1] + results[2][1] + results[3][1]
    grad_gfeat = grad_g * tape.gate * (1.0 - tape.gate)
    return grad_x, grad_gfeat.astype(grad_x.dtype, copy=False), per_direction


def _check_direction_params(params):
    if len(params) != 4:
        raise ValueError("srnn layer needs one ScanParams per direction")
    for p, d in zip(params, DIRECTIONS):
        if p.direction is not d:
            raise ValueError(f"params must follow DIRECTIONS order; got {p.direction} "
                             f"where {d} expected")


def init_scan_params(d, rng, dtype, direction):
    """Fresh per-direction parameters: projected uniform transition, zero bias."""
    from .layers import glorot_uniform
    from .tensor_ops import spectral_norm_project
    omega = glorot_uniform((d, d), d, d, rng, dtype)
    omega = spectral_norm_project(omega, 1.0).astype(dtype, copy=False)
    return ScanParams(omega, np.zeros(d, dtype=dtype), direction)
