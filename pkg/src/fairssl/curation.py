"""Build an augmented curated dataset out of a large unlabeled pool.

Three steps, all operating on row-normalized embeddings: greedy cosine
deduplication of the pool, nearest-neighbor retrieval of pool samples that
resemble the (small, balanced) curated set, and optional quality-score
filtering. Retrieval mirrors the curated set's distribution onto the pool,
which is what makes the result usable for training without labels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .store import DatasetManifest, EmbeddingMatrix, ManifestRecord

log = logging.getLogger(__name__)

KNN_BACKENDS = ("exact", "approximate")


@dataclass
class CurationConfig:
    dedup_threshold: float = 0.95
    retrieval_m: int = 4
    quality_threshold: float | None = None
    knn_backend: str = "exact"
    # inverted-list parameters, used only by the approximate backend
    ivf_lists: int = 16
    ivf_probes: int = 8

    def __post_init__(self) -> None:
        if not 0.0 < self.dedup_threshold <= 1.0:
            raise ConfigError(f"dedup_threshold must be in (0, 1], got {self.dedup_threshold}")
        if self.retrieval_m < 1:
            raise ConfigError(f"retrieval_m must be >= 1, got {self.retrieval_m}")
        if self.knn_backend not in KNN_BACKENDS:
            raise ConfigError(f"knn_backend must be one of {KNN_BACKENDS}, got {self.knn_backend!r}")
        if self.ivf_lists < 1 or self.ivf_probes < 1:
            raise ConfigError("ivf_lists and ivf_probes must be >= 1")


@dataclass
class CurationResult:
    kept_uncurated: np.ndarray
    retrieved: np.ndarray
    augmented_manifest: DatasetManifest
    counts: dict = field(default_factory=dict)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError(f"cosine_similarity needs equal-length vectors, got {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < 1e-30 or nb < 1e-30:
        raise DataError("cosine_similarity undefined for zero vectors")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _require_normalized(m: EmbeddingMatrix, what: str) -> None:
    if not m.normalized:
        raise DataError(f"{what} must be row-normalized before curation")


def deduplicate(pool: EmbeddingMatrix, threshold: float) -> np.ndarray:
    """Greedy first-wins duplicate removal over a normalized pool.

    Scans rows in ascending order and keeps row i iff its cosine similarity
    to every previously kept row stays below ``threshold``. Deterministic by
    construction; returns the kept indices sorted ascending.
    """
    _require_normalized(pool, "dedup pool")
    data = pool.data.astype(np.float64)
    kept: list[int] = []
    kept_rows = np.empty((pool.n, pool.d), dtype=np.float64)  # filled prefix only
    for i in range(pool.n):
        if kept:
            sims = kept_rows[: len(kept)] @ data[i]
            if float(sims.max()) >= threshold:
                continue
        kept_rows[len(kept)] = data[i]
        kept.append(i)
    return np.asarray(kept, dtype=np.int64)


def _exact_topm(queries: np.ndarray, candidates: np.ndarray, m: int) -> np.ndarray:
    """Indices (into ``candidates``) of the m highest-dot rows per query.

    Ties resolve to the lower candidate index via a stable sort on the
    negated similarities.
    """
    sims = queries @ candidates.T
    order = np.argsort(-sims, axis=1, kind="stable")
    return order[:, :m]


def _ivf_topm(
    queries: np.ndarray, candidates: np.ndarray, m: int, config: CurationConfig, seed: int = 0
) -> np.ndarray:
    """Inverted-list approximate search: cluster the candidates, probe the
    closest lists per query, then search those exactly."""
    n = candidates.shape[0]
    nlist = min(config.ivf_lists, n)
    rng = np.random.default_rng(seed)
    centroids = candidates[rng.choice(n, size=nlist, replace=False)].copy()
    for _ in range(5):  # a few Lloyd rounds are enough for routing
        assign = np.argmax(candidates @ centroids.T, axis=1)
        for c in range(nlist):
            members = candidates[assign == c]
            if members.shape[0]:
                mean = members.mean(axis=0)
                norm = np.linalg.norm(mean)
                if norm > 1e-12:
                    centroids[c] = mean / norm
    assign = np.argmax(candidates @ centroids.T, axis=1)
    lists = [np.flatnonzero(assign == c) for c in range(nlist)]

    nprobe = min(config.ivf_probes, nlist)
    out = np.empty((queries.shape[0], m), dtype=np.int64)
    for qi, q in enumerate(queries):
        probe_order = np.argsort(-(centroids @ q), kind="stable")[:nprobe]
        cand = np.concatenate([lists[c] for c in probe_order])
        if cand.size < m:
            cand = np.arange(n)
        cand = np.sort(cand)  # ascending index order makes ties deterministic
        sims = candidates[cand] @ q
        top = np.argsort(-sims, kind="stable")[:m]
        out[qi] = cand[top]
    return out


def knn_retrieve(
    curated: EmbeddingMatrix,
    pool: EmbeddingMatrix,
    kept: np.ndarray,
    m: int,
    config: CurationConfig | None = None,
) -> np.ndarray:
    """Retrieve, for every curated row, its m nearest kept pool rows by cosine.

    Returns the deduplicated union of all retrieved pool indices, sorted
    ascending. The exact backend is the reference; the approximate backend
    trades recall for fewer comparisons and is validated against exact.
    """
    _require_normalized(curated, "curated matrix")
    _require_normalized(pool, "pool matrix")
    if curated.d != pool.d:
        raise DataError(f"dimension mismatch: curated d={curated.d}, pool d={pool.d}")
    kept = np.sort(np.asarray(kept, dtype=np.int64))  # ties resolve to lower pool index
    if m < 1:
        raise ConfigError(f"m must be >= 1, got {m}")
    if m > kept.size:
        raise ConfigError(f"m={m} exceeds the {kept.size} kept pool rows")
    queries = curated.data.astype(np.float64)
    candidates = pool.data.astype(np.float64)[kept]
    backend = config.knn_backend if config is not None else "exact"
    if backend == "approximate":
        local = _ivf_topm(queries, candidates, m, config)
    else:
        local = _exact_topm(queries, candidates, m)
    return np.unique(kept[local])


def quality_filter(manifest: DatasetManifest, threshold: float) -> np.ndarray:
    """Positions (into ``manifest.records``) whose quality score >= threshold."""
    keep = []
    for pos, rec in enumerate(manifest.records):
        if rec.quality_score is None:
            raise DataError(f"sample {rec.sample_id!r} has no quality score")
        if rec.quality_score >= threshold:
            keep.append(pos)
    return np.asarray(keep, dtype=np.int64)


def build_augmented_curated(
    curated_manifest: DatasetManifest,
    pool_manifest: DatasetManifest,
    kept_uncurated: np.ndarray,
    retrieved: np.ndarray,
    config: CurationConfig,
) -> CurationResult:
    """Combine the curated set with the retrieved-and-quality-passing pool rows.

    Output ordering is deterministic: curated records first (original order),
    then retrieved records by ascending pool index. Row indices are reassigned
    to address the combined matrix the caller assembles in the same order.
    """
    retrieved = np.asarray(retrieved, dtype=np.int64)
    kept_set = set(np.asarray(kept_uncurated, dtype=np.int64).tolist())
    strays = [int(i) for i in retrieved if int(i) not in kept_set]
    if strays:
        raise DataError(f"retrieved rows not in the deduplicated pool: {strays[:5]}")
    if np.unique(retrieved).size != retrieved.size:
        raise DataError("retrieved index list contains duplicates")
    pool_by_row = {rec.row_index: rec for rec in pool_manifest.records}
    missing = [int(i) for i in retrieved if int(i) not in pool_by_row]
    if missing:
        raise DataError(f"retrieved pool rows missing from manifest: {missing[:5]}")

    filtered = retrieved
    n_quality_dropped = 0
    if config.quality_threshold is not None:
        passing = []
        for i in retrieved:
            rec = pool_by_row[int(i)]
            if rec.quality_score is None:
                raise DataError(f"sample {rec.sample_id!r} has no quality score")
            if rec.quality_score >= config.quality_threshold:
                passing.append(int(i))
        n_quality_dropped = retrieved.size - len(passing)
        filtered = np.asarray(passing, dtype=np.int64)

    curated_ids = {rec.sample_id for rec in curated_manifest.records}
    records: list[ManifestRecord] = []
    for new_row, rec in enumerate(curated_manifest.records):
        records.append(
            ManifestRecord(
                sample_id=rec.sample_id,
                row_index=new_row,
                source="curated",
                quality_score=rec.quality_score,
            )
        )
    for offset, pool_row in enumerate(np.sort(filtered)):
        rec = pool_by_row[int(pool_row)]
        if rec.sample_id in curated_ids:
            raise DataError(
                f"id collision between curated and retrieved sets: {rec.sample_id!r}"
            )
        records.append(
            ManifestRecord(
                sample_id=rec.sample_id,
                row_index=len(curated_manifest.records) + offset,
                source="retrieved",
                quality_score=rec.quality_score,
            )
        )
    counts = {
        "curated": len(curated_manifest.records),
        "pool": len(pool_manifest.records),
        "kept_after_dedup": int(np.asarray(kept_uncurated).size),
        "removed_by_dedup": len(pool_manifest.records) - int(np.asarray(kept_uncurated).size),
        "retrieved": int(retrieved.size),
        "removed_by_quality": int(n_quality_dropped),
        "augmented_total": len(records),
    }
    log.info("curation counts: %s", counts)
    return CurationResult(
        kept_uncurated=np.asarray(kept_uncurated, dtype=np.int64),
        retrieved=np.sort(filtered),
        augmented_manifest=DatasetManifest(records),
        counts=counts,
    )


def curate(
    curated: EmbeddingMatrix,
    curated_manifest: DatasetManifest,
    pool: EmbeddingMatrix,
    pool_manifest: DatasetManifest,
    config: CurationConfig,
) -> tuple[CurationResult, EmbeddingMatrix]:
    """Full curation pass: dedup, retrieve against the deduplicated pool,
    filter, and assemble the combined embedding matrix."""
    kept = deduplicate(pool, config.dedup_threshold)
    retrieved = knn_retrieve(curated, pool, kept, config.retrieval_m, config)
    result = build_augmented_curated(
        curated_manifest, pool_manifest, kept, retrieved, config
    )
    combined = np.vstack([curated.data, pool.data[result.retrieved]])
    return result, EmbeddingMatrix(combined, normalized=curated.normalized and pool.normalized)
