"""Kernel backend selection.

The compiled extension is used when importable; set
``READDISTURB_KERNELS=numpy`` to force the pure numpy fallback.
"""
import os

_MASK = (1 << 64) - 1
_ROW_MUL = 0xD1B54A32D192ED03
_SEED_MUL = 0x9E3779B97F4A7C15

if os.environ.get("READDISTURB_KERNELS", "").lower() == "numpy":
    from readdisturb import _pykernels as _impl

    BACKEND = "numpy"
else:
    try:
        from readdisturb import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        from readdisturb import _pykernels as _impl

        BACKEND = "numpy"


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def stream_key(seed: int, row: int, direction: int) -> int:
    """Key of the per-(seed, row, direction) cell stream."""
    return _mix((seed * _SEED_MUL + (row * 2 + direction + 1) * _ROW_MUL) & _MASK)


def uniforms(seed, row, direction, ncols):
    return _impl.uniforms(stream_key(seed, row, direction), ncols)


def class_min(seed, row, direction, ncols):
    return _impl.class_min(stream_key(seed, row, direction), ncols)


def count_below(seed, row, direction, ncols, q_even, q_odd):
    return _impl.count_below(stream_key(seed, row, direction), ncols, q_even, q_odd)
