"""Backend selection for the geometry kernels.

The compiled extension (``pointformer._geomcore``) is preferred when it
imported cleanly; otherwise the pure-numpy fallback in ``_geom`` is used.
Set ``PF_NO_EXT=1`` to force the fallback. Both backends implement the same
contracts and return identical arrays for identical inputs.
"""

from __future__ import annotations

import os

import numpy as np

from . import _geom

try:
    from . import _geomcore
except ImportError:
    _geomcore = None

_active = _geom if (_geomcore is None or os.environ.get("PF_NO_EXT") == "1") else _geomcore


def backend_name() -> str:
    return "compiled" if _active is _geomcore else "numpy"


def available_backends() -> dict:
    out = {"numpy": _geom}
    if _geomcore is not None:
        out["compiled"] = _geomcore
    return out


def _as_f64(coords) -> np.ndarray:
    return np.ascontiguousarray(coords, dtype=np.float64)


def fps(coords, n_out: int, start_idx: int, backend=None) -> np.ndarray:
    impl = backend or _active
    return impl.fps(_as_f64(coords), int(n_out), int(start_idx))


def ball_query(coords, centroid_ids, radius: float, k: int, backend=None):
    impl = backend or _active
    ids = np.ascontiguousarray(centroid_ids, dtype=np.int64)
    return impl.ball_query(_as_f64(coords), ids, float(radius), int(k))


def three_nn(query, ref, backend=None):
    impl = backend or _active
    return impl.three_nn(_as_f64(query), _as_f64(ref))


def lexicographic_start(coords) -> int:
    """Index of the lexicographically smallest coordinate (ties: smallest index)."""
    c = _as_f64(coords)
    order = np.lexsort((c[:, 2], c[:, 1], c[:, 0]))
    return int(order[0])
