"""Pure numpy implementation of the per-cell kernels.

Used when the compiled ``_ckernels`` extension is unavailable. Both
backends must produce bit-identical results: everything here is integer
hashing plus IEEE comparisons, no transcendental functions.
"""
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


def _mix(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def uniforms(key, ncols):
    """Counter-based uniforms in (0, 1), one per column."""
    cols = np.arange(1, ncols + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = _mix(np.uint64(key) + cols * _GOLDEN)
    return ((z >> _S11).astype(np.float64) + 0.5) * _INV53


def class_min(key, ncols):
    u = uniforms(key, ncols)
    return float(u[0::2].min()) if ncols > 0 else 1.0, float(u[1::2].min()) if ncols > 1 else 1.0


def count_below(key, ncols, q_even, q_odd):
    """Per column-parity class, count cells with ``u < q[k]`` for each k.

    ``q_even`` and ``q_odd`` must be sorted ascending.
    """
    u = uniforms(key, ncols)
    q_even = np.ascontiguousarray(q_even, dtype=np.float64)
    q_odd = np.ascontiguousarray(q_odd, dtype=np.float64)
    out = []
    for q, cells in ((q_even, u[0::2]), (q_odd, u[1::2])):
        idx = np.searchsorted(q, cells, side="right")
        hist = np.bincount(idx, minlength=len(q) + 1)
        out.append(np.cumsum(hist)[: len(q)].astype(np.int64))
    return out[0], out[1]
