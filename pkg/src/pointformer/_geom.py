"""Pure-numpy geometry kernels (fallback backend).

Semantics here are the reference for the compiled backend in
``_geomcore.pyx``: identical inputs must give identical outputs. All
distance arithmetic runs in float64 regardless of caller precision so the
two backends resolve ties the same way.

Tie rules, used everywhere a selection is made:
  1. smaller squared distance (or larger, for farthest-point selection),
  2. lexicographically smaller coordinate (x, then y, then z),
  3. smaller original index.
"""

from __future__ import annotations

import numpy as np

_CHUNK = 512  # centroids per pairwise-distance block


def _lex_pick(coords: np.ndarray, candidates: np.ndarray) -> int:
    """Among candidate indices, pick lexicographically smallest coordinate, then smallest index."""
    c = coords[candidates]
    order = np.lexsort((candidates, c[:, 2], c[:, 1], c[:, 0]))
    return int(candidates[order[0]])


def fps(coords: np.ndarray, n_out: int, start_idx: int) -> np.ndarray:
    """Farthest point sampling over a single cloud.

    Args:
        coords: [N, 3] float64.
        n_out: number of samples, 1 <= n_out <= N.
        start_idx: index of the first centroid.

    Returns:
        int64 [n_out] indices. Each pick maximizes the minimum squared
        distance to the already-picked set, with ties broken by coordinate
        then index; already-picked points are never re-picked.
    """
    n = coords.shape[0]
    out = np.empty(n_out, dtype=np.int64)
    picked = np.zeros(n, dtype=bool)
    min_d2 = np.full(n, np.inf)
    cur = int(start_idx)
    for t in range(n_out):
        out[t] = cur
        picked[cur] = True
        if t == n_out - 1:
            break
        d2 = ((coords - coords[cur]) ** 2).sum(axis=1)
        np.minimum(min_d2, d2, out=min_d2)
        avail = np.where(picked, -1.0, min_d2)
        best = avail.max()
        candidates = np.flatnonzero(avail == best)
        cur = candidates[0] if len(candidates) == 1 else _lex_pick(coords, candidates)
    return out


def ball_query(coords: np.ndarray, centroid_ids: np.ndarray, radius: float, k: int):
    """Fixed-size in-radius neighborhoods around each centroid.

    Slot 0 of each row is the centroid itself. The remaining slots hold the
    nearest in-radius points (closed ball, tie rules above), written in
    ascending original-index order; short rows are padded by repeating the
    centroid.

    Returns:
        (neighbor_ids int64 [N', k], valid_counts int64 [N']) where
        valid_counts is the number of distinct points in each row.
    """
    n = coords.shape[0]
    m = len(centroid_ids)
    r2 = float(radius) * float(radius)
    neighbor_ids = np.empty((m, k), dtype=np.int64)
    valid_counts = np.empty(m, dtype=np.int64)
    for lo in range(0, m, _CHUNK):
        hi = min(lo + _CHUNK, m)
        ids = centroid_ids[lo:hi]
        diff = coords[None, :, :] - coords[ids][:, None, :]
        d2 = (diff * diff).sum(axis=2)
        for row, cid in enumerate(ids):
            t = lo + row
            cid = int(cid)
            mask = d2[row] <= r2
            mask[cid] = False
            cand = np.flatnonzero(mask)
            if len(cand) > k - 1:
                cd2 = d2[row, cand]
                cc = coords[cand]
                order = np.lexsort((cand, cc[:, 2], cc[:, 1], cc[:, 0], cd2))
                sel = cand[order[: k - 1]]
            else:
                sel = cand
            sel = np.sort(sel)
            neighbor_ids[t, 0] = cid
            neighbor_ids[t, 1 : 1 + len(sel)] = sel
            neighbor_ids[t, 1 + len(sel) :] = cid
            valid_counts[t] = 1 + len(sel)
    return neighbor_ids, valid_counts


def three_nn(query: np.ndarray, ref: np.ndarray):
    """Up to three nearest reference points for each query point.

    Returns:
        (idx int64 [Nq, kk], d2 float64 [Nq, kk]) with kk = min(3, Nr),
        ordered by ascending squared distance; distance ties resolve to the
        smaller reference index.
    """
    nq = query.shape[0]
    kk = min(3, ref.shape[0])
    idx = np.empty((nq, kk), dtype=np.int64)
    d2_out = np.empty((nq, kk), dtype=np.float64)
    for lo in range(0, nq, _CHUNK):
        hi = min(lo + _CHUNK, nq)
        diff = ref[None, :, :] - query[lo:hi][:, None, :]
        d2 = (diff * diff).sum(axis=2)
        order = np.argsort(d2, axis=1, kind="stable")[:, :kk]
        idx[lo:hi] = order
        d2_out[lo:hi] = np.take_along_axis(d2, order, axis=1)
    return idx, d2_out
