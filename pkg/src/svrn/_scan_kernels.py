"""Numba kernels for the gated linear scan over stacked 1D lanes.

Both kernels operate on a canonical layout (lanes, steps, channels): every
direction is reduced to this shape by the caller via axis permutation and
flips.  They are compiled nogil so the four directional scans can run on
real threads concurrently.

Forward recurrence per lane, with h[-1] = 0:

    h[t] = x[t] + g[t] * (omega @ h[t-1] + bias)

Backward, derived from that definition (delta = dL/dh):

    delta[t] = q[t] + omega^T (g[t+1] * delta[t+1])
    grad_x[t] = delta[t]
    grad_g[t] = delta[t] * (omega @ h[t-1] + bias)
    grad_omega += outer(g[t] * delta[t], h[t-1])
    grad_bias  += g[t] * delta[t]
"""

import numpy as np
from numba import njit


@njit(nogil=True, cache=True)
def scan_fwd(x, g, omega, bias, h):
    lanes, steps, d = x.shape
    for l in range(lanes):
        for t in range(steps):
            for c in range(d):
                acc = bias[c]
                if t > 0:
                    for k in range(d):
                        acc += omega[c, k] * h[l, t - 1, k]
                h[l, t, c] = x[l, t, c] + g[l, t, c] * acc


@njit(nogil=True, cache=True)
def scan_bwd(q, g, h, omega, bias, grad_x, grad_g, grad_omega, grad_bias):
    lanes, steps, d = q.shape
    carry = np.empty(d, q.dtype)
    gd = np.empty(d, q.dtype)
    for l in range(lanes):
        for c in range(d):
            carry[c] = 0.0
        for t in range(steps - 1, -1, -1):
            for c in range(d):
                delta = q[l, t, c] + carry[c]
                r = bias[c]
                if t > 0:
                    for k in range(d):
                        r += omega[c, k] * h[l, t - 1, k]
                grad_x[l, t, c] = delta
                grad_g[l, t, c] = delta * r
                gd[c] = g[l, t, c] * delta
                grad_bias[c] += gd[c]
                if t > 0:
                    for k in range(d):
                        grad_omega[c, k] += gd[c] * h[l, t - 1, k]
            for k in range(d):
                acc = 0.0
                for c in range(d):
                    acc += omega[c, k] * gd[c]
                carry[k] = acc
