"""Per-query ranking kernels for retrieval evaluation.

Both paths take a (Q, G) score matrix (higher = more similar) and return,
per query, the average precision, the 0-based rank of the first relevant
gallery item among kept items (-1 when there is none) and the number of
relevant items. Gallery items are ordered by descending score with ties
broken by ascending gallery index.

Filtering:
  * ``junk_filter`` drops gallery items with identity -1 from the ranking.
  * ``cross_camera`` drops gallery items sharing identity and camera with
    the query.
"""
from __future__ import annotations

import numpy as np

from ._accel import njit, numba_enabled


@njit(cache=True)
def _rank_queries_numba(scores, q_ids, q_cams, g_ids, g_cams, cross_camera, junk_filter):
    nq, ng = scores.shape
    ap = np.zeros(nq, dtype=np.float64)
    first_hit = np.full(nq, -1, dtype=np.int64)
    n_good = np.zeros(nq, dtype=np.int64)
    for qi in range(nq):
        order = np.argsort(-scores[qi], kind="mergesort")
        qid = q_ids[qi]
        qcam = q_cams[qi]
        kept = 0
        hits = 0
        acc = 0.0
        for pos in range(ng):
            j = order[pos]
            gid = g_ids[j]
            if junk_filter and gid == -1:
                continue
            if cross_camera and gid == qid and g_cams[j] == qcam:
                continue
            kept += 1
            if gid == qid and gid != -1:
                hits += 1
                acc += hits / kept
                if first_hit[qi] < 0:
                    first_hit[qi] = kept - 1
        n_good[qi] = hits
        if hits > 0:
            ap[qi] = acc / hits
    return ap, first_hit, n_good


def _rank_queries_numpy(scores, q_ids, q_cams, g_ids, g_cams, cross_camera, junk_filter):
    nq, ng = scores.shape
    order = np.argsort(-scores, axis=1, kind="stable")
    ids = g_ids[order]
    cams = g_cams[order]
    same_id = ids == q_ids[:, None]
    keep = np.ones((nq, ng), dtype=bool)
    if junk_filter:
        keep &= ids != -1
    if cross_camera:
        keep &= ~(same_id & (cams == q_cams[:, None]))
    good = same_id & keep & (ids != -1)
    kept_rank = np.cumsum(keep, axis=1)
    hits = np.cumsum(good, axis=1)
    n_good = hits[:, -1] if ng else np.zeros(nq, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(good, hits / np.maximum(kept_rank, 1), 0.0)
        ap = np.where(n_good > 0, precision.sum(axis=1) / np.maximum(n_good, 1), 0.0)
    first_hit = np.where(n_good > 0, np.argmax(good, axis=1), 0)
    first_rank = np.take_along_axis(kept_rank, first_hit[:, None], axis=1)[:, 0] - 1
    first_rank = np.where(n_good > 0, first_rank, -1)
    return ap.astype(np.float64), first_rank.astype(np.int64), n_good.astype(np.int64)


def rank_queries(scores, q_ids, q_cams, g_ids, g_cams, cross_camera=True, junk_filter=True, use_numba=None):
    """Average precision and first-hit rank for every query row of ``scores``."""
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    args = (
        scores,
        np.ascontiguousarray(q_ids, dtype=np.int64),
        np.ascontiguousarray(q_cams, dtype=np.int64),
        np.ascontiguousarray(g_ids, dtype=np.int64),
        np.ascontiguousarray(g_cams, dtype=np.int64),
        bool(cross_camera),
        bool(junk_filter),
    )
    if use_numba is None:
        use_numba = numba_enabled()
    if use_numba:
        return _rank_queries_numba(*args)
    return _rank_queries_numpy(*args)
