"""Dense array conventions and the small algebraic core everything else uses.

Arrays follow the NCHW layout (batch, channels, height, width), row-major
with width fastest, so horizontal scans walk contiguous memory.  Feature
maps and hidden-state maps are plain ``numpy.ndarray``; there is no
broadcasting layer or autodiff graph on top.

Precision is a process-wide mode: production code runs in float32,
verification (gradient checking) in float64.  Switch with
:func:`set_verification_mode` rather than per-call dtype flags.
"""

import numpy as np

_VERIFICATION = False


def set_verification_mode(on):
    """Enable (True) or disable (False) 64-bit verification precision."""
    global _VERIFICATION
    _VERIFICATION = bool(on)


def verification_mode():
    return _VERIFICATION


def default_dtype():
    """dtype new parameters and buffers should be allocated with."""
    return np.float64 if _VERIFICATION else np.float32


def ensure_finite(arr, context="array"):
    """Raise if `arr` contains NaN or Inf; returns `arr` unchanged.

    Non-finite values anywhere in the numeric core are contract violations,
    not recoverable conditions.
    """
    if not np.all(np.isfinite(arr)):
        bad = np.size(arr) - np.count_nonzero(np.isfinite(arr))
        raise FloatingPointError(f"{context}: {bad} non-finite value(s)")
    return arr


def matvec(w, v):
    """Exact dense matrix-vector product w @ v with shape checking."""
    w = np.asarray(w)
    v = np.asarray(v)
    if w.ndim != 2:
        raise ValueError(f"matvec: expected 2-d matrix, got shape {w.shape}")
    if v.ndim != 1 or w.shape[1] != v.shape[0]:
        raise ValueError(f"matvec: dimension mismatch {w.shape} @ {v.shape}")
    return w @ v


def channel_split(t):
    """Split an N x 2k x H x W map into its first- and second-half channels.

    Concatenating the two outputs along the channel axis reproduces the
    input bit-exactly (see :func:`channel_concat`).
    """
    t = np.asarray(t)
    if t.ndim != 4:
        raise ValueError(f"channel_split: expected NCHW input, got shape {t.shape}")
    c = t.shape[1]
    if c % 2 != 0:
        raise ValueError(f"channel_split: odd channel count {c}")
    half = c // 2
    return t[:, :half], t[:, half:]


def channel_concat(a, b):
    """Inverse of channel_split: concatenate along the channel axis."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("channel_concat: expected NCHW inputs")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"channel_concat: shape mismatch {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def spectral_norm(w, iters=50, tol=1e-7):
    """Induced 2-norm of a matrix, estimated by power iteration.

    Runs at most `iters` iterations of v <- normalize(w.T w v) and stops
    early once the Rayleigh estimate changes by less than `tol`.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"spectral_norm: expected a matrix, got shape {w.shape}")
    if not np.any(w):
        return 0.0
    rng = np.random.default_rng(0)
    v = rng.standard_normal(w.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        u = w @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        v = w.T @ (u / nu)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0
        v /= nv
        if abs(nv - sigma) <= tol * max(1.0, sigma):
            sigma = nv
            break
        sigma = nv
    return float(sigma)


def spectral_norm_project(w, limit=1.0):
    """Rescale `w` so its induced 2-norm does not exceed `limit`.

    Returns `w` unchanged (same object) when already within the limit;
    otherwise returns w * (limit / sigma).  The zero matrix passes through.
    """
    if limit <= 0:
        raise ValueError(f"spectral_norm_project: limit must be positive, got {limit}")
    w = np.asarray(w)
    sigma = spectral_norm(w)
    if sigma <= limit:
        return w
    return (w * (limit / sigma)).astype(w.dtype, copy=False)
