"""Cosine-distance retrieval evaluation: CMC curve and mAP.

Per query, gallery items sharing both identity and camera with the query are
removed, as are junk items (id -1). Every remaining same-id item is relevant.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np


@dataclass
class DistanceMatrix:
    values: np.ndarray  # [nq, ng]
    query_ids: np.ndarray | None = None
    query_cams: np.ndarray | None = None
    gallery_ids: np.ndarray | None = None
    gallery_cams: np.ndarray | None = None


@dataclass
class EvalReport:
    mAP: float
    cmc: list[float]
    queries_evaluated: int
    queries_skipped: int = 0
    ap: list[float] = field(default_factory=list, repr=False)

    @property
    def rank1(self) -> float:
        return self.cmc[0]

    def to_dict(self) -> dict:
        return {"mAP": self.mAP, "cmc": list(self.cmc),
                "queries_evaluated": self.queries_evaluated,
                "queries_skipped": self.queries_skipped}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _rows(x) -> np.ndarray:
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("expected a 2-d feature matrix")
    return arr


def cosine_distance_matrix(Q, G, query_meta=None, gallery_meta=None) -> DistanceMatrix:
    """1 - cos(q_i, g_j). ``*_meta`` are optional (ids, cams) pairs."""
    q, g = _rows(Q), _rows(G)
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"feature dims differ: {q.shape[1]} vs {g.shape[1]}")
    qn = np.linalg.norm(q, axis=1)
    gn = np.linalg.norm(g, axis=1)
    if np.any(qn == 0) or np.any(gn == 0):
        raise ValueError("zero-norm feature row")
    cos = (q / qn[:, None]) @ (g / gn[:, None]).T
    values = 1.0 - np.clip(cos, -1.0, 1.0)
    qi, qc = (np.asarray(m) for m in query_meta) if query_meta is not None else (None, None)
    gi, gc = (np.asarray(m) for m in gallery_meta) if gallery_meta is not None else (None, None)
    return DistanceMatrix(values, qi, qc, gi, gc)


def rank_gallery(row, exclude=None) -> np.ndarray:
    """Gallery indices by ascending distance, ties by index, excluded indices dropped."""
    row = np.asarray(row, dtype=np.float64)
    keep = np.ones(len(row), dtype=bool)
    if exclude is not None:
        ex = np.asarray(exclude)
        if ex.dtype == bool:
            keep &= ~ex
        else:
            keep[ex.astype(int)] = False
    idx = np.flatnonzero(keep)
    return idx[np.argsort(row[idx], kind="stable")]


def evaluate(distmat: DistanceMatrix, max_rank: int = 50) -> EvalReport:
    d = np.asarray(distmat.values, dtype=np.float64)
    if any(m is None for m in (distmat.query_ids, distmat.query_cams,
                               distmat.gallery_ids, distmat.gallery_cams)):
        raise ValueError("evaluation needs query and gallery ids and cameras")
    q_ids, q_cams = np.asarray(distmat.query_ids), np.asarray(distmat.query_cams)
    g_ids, g_cams = np.asarray(distmat.gallery_ids), np.asarray(distmat.gallery_cams)
    if max_rank < 1:
        raise ValueError("max_rank must be >= 1")
    cmc_hits = np.zeros(max_rank)
    aps, skipped = [], 0
    for i in range(d.shape[0]):
        if q_ids[i] == -1:
            skipped += 1
            continue
        excluded = (g_ids == -1) | ((g_ids == q_ids[i]) & (g_cams == q_cams[i]))
        if excluded.all():
            raise ValueError(f"query {i}: gallery is empty after exclusion")
        order = rank_gallery(d[i], excluded)
        matches = g_ids[order] == q_ids[i]
        if not matches.any():
            skipped += 1
            continue
        hit_ranks = np.flatnonzero(matches)  # 0-based
        first = hit_ranks[0]
        if first < max_rank:
            cmc_hits[first:] += 1
        precision_at_hits = np.arange(1, len(hit_ranks) + 1) / (hit_ranks + 1)
        aps.append(math.fsum(precision_at_hits) / len(hit_ranks))
    if not aps:
        raise ValueError("no query has a valid positive in the gallery")
    n = len(aps)
    return EvalReport(math.fsum(aps) / n, [float(c) for c in cmc_hits / n], n, skipped, aps)


def write_rank_lists(path: str | os.PathLike, distmat: DistanceMatrix, top_k: int = 10) -> None:
    """CSV with one row per query: query index, id, then the top-k gallery ids."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query", "query_id"] + [f"rank{k + 1}" for k in range(top_k)])
        for i, row in enumerate(distmat.values):
            excluded = (distmat.gallery_ids == -1) | (
                (distmat.gallery_ids == distmat.query_ids[i]) & (distmat.gallery_cams == distmat.query_cams[i]))
            order = rank_gallery(row, excluded)[:top_k]
            w.writerow([i, int(distmat.query_ids[i])] + [int(distmat.gallery_ids[j]) for j in order])
