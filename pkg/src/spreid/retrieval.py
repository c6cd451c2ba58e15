"""Gallery search, single-query CMC/mAP evaluation and k-reciprocal re-ranking."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import DimensionError, DomainError, ZeroNormWarning, check_finite

METRICS = ("euclidean", "cosine")


class ParameterError(ValueError):
    """Re-ranking parameters are out of range for the given problem size."""


@dataclass
class GalleryIndex:
    descriptors: np.ndarray
    identities: np.ndarray
    cameras: np.ndarray
    metric: str = "cosine"

    def __post_init__(self):
        self.descriptors = check_finite(np.asarray(self.descriptors, dtype=np.float64), "descriptors")
        self.identities = np.asarray(self.identities)
        self.cameras = np.asarray(self.cameras)
        if self.descriptors.ndim != 2:
            raise DimensionError("gallery descriptors must be a G x D matrix")
        g = self.descriptors.shape[0]
        if self.identities.shape != (g,) or self.cameras.shape != (g,):
            raise DimensionError("identities and cameras must have one entry per gallery row")
        if self.metric not in METRICS:
            raise DomainError(f"unknown metric {self.metric!r}")

    def search(self, queries: np.ndarray) -> np.ndarray:
        return pairwise_distance(queries, self.descriptors, self.metric)


@dataclass
class EvalReport:
    mAP: float
    cmc: list[float]
    ap: list[float]
    num_valid_queries: int
    num_skipped_queries: int
    settings: dict = field(default_factory=dict)

    def rank(self, k: int) -> float:
        return self.cmc[k - 1]

    def to_dict(self) -> dict:
        return asdict(self)


def pairwise_distance(q: np.ndarray, g: np.ndarray, metric: str = "cosine") -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise DimensionError(f"descriptor matrices {q.shape} and {g.shape} are incompatible")
    if metric == "euclidean":
        sq = (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * q @ g.T
        return np.sqrt(np.maximum(sq, 0.0))
    if metric == "cosine":
        qn = np.linalg.norm(q, axis=1)
        gn = np.linalg.norm(g, axis=1)
        if np.any(qn == 0) or np.any(gn == 0):
            warnings.warn("zero-norm descriptor under cosine distance; distance set to 1",
                          ZeroNormWarning, stacklevel=2)
        qs = np.where(qn > 0, qn, 1.0)
        gs = np.where(gn > 0, gn, 1.0)
        sim = (q / qs[:, None]) @ (g / gs[:, None]).T
        return 1.0 - sim
    raise DomainError(f"unknown metric {metric!r}")


def evaluate(dist, q_ids, g_ids, q_cams, g_cams, max_rank: int | None = None) -> EvalReport:
    """Single-query CMC and mAP.

    Gallery entries sharing both identity and camera with the query are
    dropped, as are distractors (identity -1). Queries without any remaining
    true match are skipped and counted.
    """
    dist = np.asarray(dist, dtype=np.float64)
    q_ids, g_ids = np.asarray(q_ids), np.asarray(g_ids)
    q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    nq, ng = dist.shape
    if q_ids.shape != (nq,) or q_cams.shape != (nq,) or g_ids.shape != (ng,) or g_cams.shape != (ng,):
        raise DimensionError("id/camera arrays do not match the distance matrix")
    max_rank = ng if max_rank is None else max_rank
    order = np.argsort(dist, axis=1, kind="stable")
    hits = np.zeros(max_rank)
    aps = []
    skipped = 0
    for i in range(nq):
        idx = order[i]
        keep = (g_ids[idx] != -1) & ~((g_ids[idx] == q_ids[i]) & (g_cams[idx] == q_cams[i]))
        good = (g_ids[idx] == q_ids[i])[keep]
        if not good.any():
            skipped += 1
            continue
        ranks = np.flatnonzero(good)
        if ranks[0] < max_rank:
            hits[ranks[0]:] += 1
        precision = np.arange(1, len(ranks) + 1) / (ranks + 1)
        aps.append(float(precision.mean()))
    valid = nq - skipped
    cmc = (hits / valid).tolist() if valid else [0.0] * max_rank
    return EvalReport(
        mAP=float(np.mean(aps)) if aps else 0.0,
        cmc=cmc,
        ap=aps,
        num_valid_queries=valid,
        num_skipped_queries=skipped,
    )


def _k_neighbors(row: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest entries of ``row``, extended to include distance ties."""
    kth = np.partition(row, k - 1)[k - 1]
    return np.flatnonzero(row <= kth)


def k_reciprocal_rerank_distances(q_g, q_q, g_g, k1=20, k2=6, lam=0.3) -> np.ndarray:
    """Revise query-gallery distances with k-reciprocal Jaccard distances.

    Distances over the union of queries and gallery are squared and scaled by
    each row's maximum; neighbour sets include every entry tied with the k-th
    nearest, so exact duplicates are always treated alike.
    """
    q_g = np.asarray(q_g, dtype=np.float64)
    nq, ng = q_g.shape
    n = nq + ng
    if not (k1 > k2 >= 1):
        raise ParameterError(f"need k1 > k2 >= 1, got k1={k1}, k2={k2}")
    if k1 >= n:
        raise ParameterError(f"k1={k1} must be smaller than the {n} queries plus gallery entries")
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"lambda must lie in [0, 1], got {lam}")
    full = np.block([[q_q, q_g], [q_g.T, g_g]]).astype(np.float64) ** 2
    row_max = full.max(axis=1, keepdims=True)
    full = full / np.where(row_max > 0, row_max, 1.0)

    def reciprocal(i, k):
        forward = _k_neighbors(full[i], k + 1)
        return np.array([j for j in forward if i in _k_neighbors(full[j], k + 1)], dtype=np.intp)

    half = int(np.around(k1 / 2))
    v = np.zeros((n, n))
    for i in range(n):
        base = reciprocal(i, k1)
        expanded = set(base.tolist())
        for cand in base:
            cand_set = reciprocal(cand, half)
            if len(np.intersect1d(cand_set, base)) > 2.0 / 3.0 * len(cand_set):
                expanded.update(cand_set.tolist())
        members = np.array(sorted(expanded), dtype=np.intp)
        weights = np.exp(-full[i, members])
        v[i, members] = weights / weights.sum()
    if k2 > 1:
        v = np.stack([v[_k_neighbors(full[i], k2)].mean(axis=0) for i in range(n)])
    mins = np.minimum(v[:nq, None, :], v[None, nq:, :]).sum(axis=2)
    maxs = np.maximum(v[:nq, None, :], v[None, nq:, :]).sum(axis=2)
    jaccard = 1.0 - mins / maxs
    return lam * full[:nq, nq:] + (1.0 - lam) * jaccard


def k_reciprocal_rerank(q, g, k1=20, k2=6, lam=0.3, metric="cosine") -> np.ndarray:
    return k_reciprocal_rerank_distances(
        pairwise_distance(q, g, metric),
        pairwise_distance(q, q, metric),
        pairwise_distance(g, g, metric),
        k1=k1, k2=k2, lam=lam,
    )


def combine_descriptors(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise l2-normalize each matrix and concatenate them."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"row counts differ: {a.shape[0]} vs {b.shape[0]}")

    def normalize(m):
        norms = np.linalg.norm(m, axis=1, keepdims=True)
        if np.any(norms == 0):
            warnings.warn("zero descriptor row left unnormalized", ZeroNormWarning, stacklevel=3)
        return m / np.where(norms > 0, norms, 1.0)

    return np.concatenate([normalize(a), normalize(b)], axis=1)
