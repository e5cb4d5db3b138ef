"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time. Set ``ALLOYFORGE_NO_NUMBA=1`` to
force the numpy path (useful for debugging and for the parity tests); the
numpy path is also used automatically when numba cannot be imported.

Both backends are always importable as ``kernels.numpy_backend`` and
``kernels.numba_backend`` (the latter is ``None`` without numba) so tests and
the benchmark can compare them directly.
"""

import math
import os
from types import SimpleNamespace

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _env_disabled():
    return os.environ.get("ALLOYFORGE_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _np_dot_norms(a, b):
    """Return (a.b, |a|^2, |b|^2) in float64."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(a @ b), float(a @ a), float(b @ b)


def _np_lincomb(a, b, ca, cb):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return ca * a + cb * b


def _np_stats(x):
    x = np.asarray(x, dtype=np.float64).ravel()
    return float(x.min()), float(x.max()), float(x.mean()), float(math.sqrt(x @ x))


def _np_rope_rotate(x, positions, cos, sin, sign):
    # x: (seq, heads, head_dim); cos/sin: (max_pos, head_dim // 2)
    c = cos[positions][:, None, :]
    s = sin[positions][:, None, :] * sign
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out


numpy_backend = SimpleNamespace(
    name="numpy",
    dot_norms=_np_dot_norms,
    lincomb=_np_lincomb,
    stats=_np_stats,
    rope_rotate=_np_rope_rotate,
)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

def _build_numba_backend():
    njit = numba.njit(cache=True, nogil=True)

    @njit
    def dot_norms_kernel(a, b):
        d = 0.0
        na = 0.0
        nb = 0.0
        for i in range(a.shape[0]):
            x = a[i]
            y = b[i]
            d += x * y
            na += x * x
            nb += y * y
        return d, na, nb

    @njit
    def lincomb_kernel(a, b, ca, cb):
        out = np.empty(a.shape[0], dtype=np.float64)
        for i in range(a.shape[0]):
            out[i] = ca * a[i] + cb * b[i]
        return out

    @njit
    def stats_kernel(x):
        lo = np.inf
        hi = -np.inf
        s = 0.0
        sq = 0.0
        for i in range(x.shape[0]):
            v = np.float64(x[i])
            if v < lo:
                lo = v
            if v > hi:
                hi = v
            s += v
            sq += v * v
        return lo, hi, s / x.shape[0], math.sqrt(sq)

    @njit
    def rope_kernel(x, positions, cos, sin, sign):
        seq, heads, hd = x.shape
        out = np.empty_like(x)
        for t in range(seq):
            p = positions[t]
            for h in range(heads):
                for i in range(hd // 2):
                    c = cos[p, i]
                    s = sin[p, i] * sign
                    x0 = x[t, h, 2 * i]
                    x1 = x[t, h, 2 * i + 1]
                    out[t, h, 2 * i] = x0 * c - x1 * s
                    out[t, h, 2 * i + 1] = x0 * s + x1 * c
        return out

    def dot_norms(a, b):
        a = np.ascontiguousarray(a, dtype=np.float64).ravel()
        b = np.ascontiguousarray(b, dtype=np.float64).ravel()
        return dot_norms_kernel(a, b)

    def lincomb(a, b, ca, cb):
        a = np.ascontiguousarray(a, dtype=np.float64).ravel()
        b = np.ascontiguousarray(b, dtype=np.float64).ravel()
        return lincomb_kernel(a, b, float(ca), float(cb))

    def stats(x):
        return stats_kernel(np.ascontiguousarray(x).ravel())

    def rope_rotate(x, positions, cos, sin, sign):
        x = np.ascontiguousarray(x, dtype=np.float64)
        positions = np.ascontiguousarray(positions, dtype=np.int64)
        return rope_kernel(x, positions, cos, sin, float(sign))

    return SimpleNamespace(
        name="numba",
        dot_norms=dot_norms,
        lincomb=lincomb,
        stats=stats,
        rope_rotate=rope_rotate,
    )


numba_backend = _build_numba_backend() if numba is not None else None

active = numpy_backend if (numba_backend is None or _env_disabled()) else numba_backend

dot_norms = active.dot_norms
lincomb = active.lincomb
stats = active.stats
rope_rotate = active.rope_rotate
