"""Exact brute-force cosine retrieval over large galleries, Recall@K and
mean Average Precision, dimension truncation, and score ensembling.

Scores are plain dot products on unit-norm rows.  Retrieval is exact: the
gallery is scanned in column blocks, each block's candidate top-k is
selected with precise tie handling, and candidates are merged so the final
result is independent of block size and worker count.  Ties are always
broken by ascending gallery id.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import binio
from .errors import (
    DataError,
    DimMismatch,
    DimTooLarge,
    IdMismatch,
    NormDegenerate,
    UnknownQuery,
)

DEFAULT_GALLERY_BLOCK = 8192
DEFAULT_QUERY_BLOCK = 256


@dataclass
class EmbeddingSet:
    """Unique ids paired with unit-norm float32 rows."""

    ids: list[str]
    matrix: np.ndarray

    def __post_init__(self):
        if len(self.ids) != self.matrix.shape[0]:
            raise DataError("id count does not match embedding rows")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("duplicate ids in embedding set")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def from_rows(cls, ids: list[str], matrix: np.ndarray) -> "EmbeddingSet":
        return cls(list(ids), _renormalize(np.asarray(matrix, dtype=np.float32)))

    @classmethod
    def load(cls, path) -> "EmbeddingSet":
        ids, matrix = binio.read_embeddings(path)
        return cls(ids, _renormalize(matrix))

    def save(self, path) -> None:
        binio.write_embeddings(path, self.ids, self.matrix)


def _renormalize(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix.astype(np.float64), axis=1, keepdims=True)
    if matrix.shape[0] and norms.min() < 1e-12:
        row = int(np.argmin(norms))
        raise NormDegenerate(f"embedding row {row} has norm {norms.min():.3e}")
    return (matrix / norms).astype(np.float32)


@dataclass
class RankedList:
    query_id: str
    gallery_ids: list[str]
    scores: np.ndarray  # non-increasing


def _block_candidates(scores: np.ndarray, offset: int, k: int):
    """Top-k of one score block with exact ties: keep strictly-greater
    entries plus the first (by column, i.e. by gallery id) equal entries."""
    nq, nb = scores.shape
    if nb <= k:
        idx = np.broadcast_to(np.arange(offset, offset + nb), (nq, nb))
        return scores, idx
    kth = np.partition(scores, nb - k, axis=1)[:, nb - k:nb - k + 1]
    gt = scores > kth
    eq = scores == kth
    need = k - gt.sum(axis=1, keepdims=True)
    keep = gt | (eq & (np.cumsum(eq, axis=1) <= need))
    cols = np.nonzero(keep)[1].reshape(nq, k)
    return np.take_along_axis(scores, cols, axis=1), cols + offset


def _merge(run_s, run_i, cand_s, cand_i, k: int):
    """Merge running and candidate top-k.  Stable sort on negated scores
    preserves position order among ties, and positions are arranged in
    ascending gallery index, so ties resolve to the smaller index."""
    all_s = np.hstack([run_s, cand_s])
    all_i = np.hstack([run_i, cand_i])
    order = np.argsort(-all_s, axis=1, kind="stable")[:, :min(k, all_s.shape[1])]
    return np.take_along_axis(all_s, order, axis=1), np.take_along_axis(all_i, order, axis=1)


def _topk_query_block(qmat, gmat, k: int, gallery_block: int):
    nq = qmat.shape[0]
    run_s = np.empty((nq, 0), dtype=qmat.dtype)
    run_i = np.empty((nq, 0), dtype=np.int64)
    for c0 in range(0, gmat.shape[0], gallery_block):
        block = gmat[c0:c0 + gallery_block]
        scores = qmat @ block.T
        cand_s, cand_i = _block_candidates(scores, c0, k)
        run_s, run_i = _merge(run_s, run_i, cand_s, cand_i, k)
    return run_s, run_i


def top_k(gallery: EmbeddingSet, queries: EmbeddingSet, k: int, *,
          gallery_block: int = DEFAULT_GALLERY_BLOCK,
          query_block: int = DEFAULT_QUERY_BLOCK,
          workers: int = 1) -> list[RankedList]:
    """Exact top-k by dot product, ties broken by ascending gallery id.

    The gallery is pre-sorted by id so that column order equals id order;
    the block selection and merge then need only preserve column order
    among equal scores.
    """
    if gallery.dim != queries.dim:
        raise DimMismatch(f"gallery dim {gallery.dim} != query dim {queries.dim}")
    if k < 1:
        raise ValueError("k must be >= 1")
    order = sorted(range(len(gallery.ids)), key=gallery.ids.__getitem__)
    gmat = np.ascontiguousarray(gallery.matrix[order])
    gids = [gallery.ids[i] for i in order]

    qmat = queries.matrix
    blocks = [(s, min(s + query_block, qmat.shape[0]))
              for s in range(0, qmat.shape[0], query_block)]

    def run(span):
        return _topk_query_block(qmat[span[0]:span[1]], gmat, k, gallery_block)

    if workers <= 1 or len(blocks) <= 1:
        parts = [run(b) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, blocks))

    results = []
    row = 0
    for part_s, part_i in parts:
        for r in range(part_s.shape[0]):
            results.append(RankedList(
                query_id=queries.ids[row],
                gallery_ids=[gids[j] for j in part_i[r]],
                scores=part_s[r].copy(),
            ))
            row += 1
    return results


def recall_at_k(ranked: RankedList, relevant: set[str], k: int) -> float:
    """1.0 iff any relevant id appears among the first k results."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1.0 if any(g in relevant for g in ranked.gallery_ids[:k]) else 0.0


def average_precision(ranked: RankedList, relevant: set[str]) -> float:
    """Mean of precision at each relevant item's rank; needs a full ranking."""
    if not relevant:
        raise DataError(f"query {ranked.query_id!r}: empty relevant set")
    missing = relevant.difference(ranked.gallery_ids)
    if missing:
        raise DataError(
            f"query {ranked.query_id!r}: relevant ids not in ranking: {sorted(missing)[:3]}"
        )
    hits = 0
    total = 0.0
    for pos, gid in enumerate(ranked.gallery_ids, start=1):
        if gid in relevant:
            hits += 1
            total += hits / pos
    return total / len(relevant)


def truncate_dim(embeddings: EmbeddingSet, d: int) -> EmbeddingSet:
    """Keep the first d coordinates and re-normalize rows."""
    if d < 1:
        raise ValueError("d must be >= 1")
    if d > embeddings.dim:
        raise DimTooLarge(f"requested dim {d} > embedding dim {embeddings.dim}")
    return EmbeddingSet(list(embeddings.ids), _renormalize(embeddings.matrix[:, :d].copy()))


@dataclass
class ScoreTable:
    """Dense query-by-gallery score matrix, the ensemble interchange unit."""

    query_ids: list[str]
    gallery_ids: list[str]
    scores: np.ndarray

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["query_id"] + self.gallery_ids)
            for i, qid in enumerate(self.query_ids):
                writer.writerow([qid] + [repr(float(v)) for v in self.scores[i]])

    @classmethod
    def load(cls, path) -> "ScoreTable":
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0] != "query_id":
                raise DataError(f"{path}: bad score table header")
            gallery_ids = header[1:]
            query_ids = []
            rows = []
            for lineno, rec in enumerate(reader, start=2):
                if len(rec) != len(header):
                    raise DataError(f"{path}:{lineno}: expected {len(header)} fields")
                query_ids.append(rec[0])
                rows.append([float(v) for v in rec[1:]])
        return cls(query_ids, gallery_ids, np.array(rows))


def score_table(gallery: EmbeddingSet, queries: EmbeddingSet) -> ScoreTable:
    """All pairwise scores, gallery columns in ascending id order."""
    if gallery.dim != queries.dim:
        raise DimMismatch(f"gallery dim {gallery.dim} != query dim {queries.dim}")
    order = sorted(range(len(gallery.ids)), key=gallery.ids.__getitem__)
    gmat = gallery.matrix[order]
    gids = [gallery.ids[i] for i in order]
    return ScoreTable(list(queries.ids), gids, queries.matrix @ gmat.T)


FUSION_SCORE_MEAN = "score-mean"
FUSION_RECIPROCAL_RANK = "reciprocal-rank"
_RRF_OFFSET = 60.0


def _rank_matrix(scores: np.ndarray) -> np.ndarray:
    """1-based ranks per row, descending score, ties to the lower column."""
    order = np.argsort(-scores, axis=1, kind="stable")
    ranks = np.empty_like(order)
    cols = np.arange(scores.shape[1])
    np.put_along_axis(ranks, order, np.broadcast_to(cols, order.shape), axis=1)
    return ranks + 1


def ensemble(tables: list[ScoreTable], weights: list[float] | None = None,
             fusion: str = FUSION_SCORE_MEAN) -> list[RankedList]:
    """Fuse per-model score tables into one ranking per query.

    score-mean averages the raw scores (weighted); reciprocal-rank sums
    w/(60+rank).  All tables must cover identical query and gallery id
    sets; columns and rows are aligned by id before fusing.
    """
    if len(tables) < 1:
        raise ValueError("need at least one score table")
    if weights is None:
        weights = [1.0] * len(tables)
    if len(weights) != len(tables):
        raise DataError(f"{len(weights)} weights for {len(tables)} tables")
    wsum = float(sum(weights))
    if wsum <= 0:
        raise DataError("weights must sum to a positive value")
    base = tables[0]
    gorder = sorted(range(len(base.gallery_ids)), key=base.gallery_ids.__getitem__)
    gids = [base.gallery_ids[i] for i in gorder]
    qids = base.query_ids
    fused = np.zeros((len(qids), len(gids)))
    for tab, w in zip(tables, weights):
        if sorted(tab.query_ids) != sorted(qids) or sorted(tab.gallery_ids) != sorted(gids):
            raise IdMismatch("score tables cover different query/gallery ids")
        qpos = {q: i for i, q in enumerate(tab.query_ids)}
        gpos = {g: j for j, g in enumerate(tab.gallery_ids)}
        aligned = tab.scores[np.ix_([qpos[q] for q in qids], [gpos[g] for g in gids])]
        if fusion == FUSION_SCORE_MEAN:
            fused += (w / wsum) * aligned
        elif fusion == FUSION_RECIPROCAL_RANK:
            fused += w / (_RRF_OFFSET + _rank_matrix(aligned))
        else:
            raise ValueError(f"unknown fusion {fusion!r}")
    order = np.argsort(-fused, axis=1, kind="stable")
    out = []
    for i, qid in enumerate(qids):
        out.append(RankedList(
            query_id=qid,
            gallery_ids=[gids[j] for j in order[i]],
            scores=fused[i, order[i]].copy(),
        ))
    return out


def read_relevance(path) -> dict[str, set[str]]:
    """CSV of query_id,gallery_id pairs -> query id to relevant-set map."""
    rel: dict[str, set[str]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["query_id", "gallery_id"]:
            raise DataError(f"{path}: bad relevance header {header!r}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 fields")
            rel.setdefault(rec[0], set()).add(rec[1])
    if not rel:
        raise DataError(f"{path}: no relevance pairs")
    return rel


def write_relevance(rel: dict[str, set[str]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", "gallery_id"])
        for qid in sorted(rel):
            for gid in sorted(rel[qid]):
                writer.writerow([qid, gid])


def metrics_from_rankings(rankings: list[RankedList], relevance: dict[str, set[str]],
                          ks: list[int]) -> list[tuple[str, str, float]]:
    """Mean R@k per requested k plus mean AP, as (metric, k, value) rows.

    Rankings must be full-length (AP needs every relevant item's rank).
    """
    for ranked in rankings:
        if ranked.query_id not in relevance:
            raise UnknownQuery(f"query {ranked.query_id!r} missing from relevance map")
    rows: list[tuple[str, str, float]] = []
    for k in ks:
        mean = float(np.mean([
            recall_at_k(r, relevance[r.query_id], k) for r in rankings
        ]))
        rows.append(("recall", str(k), mean))
    mean_ap = float(np.mean([
        average_precision(r, relevance[r.query_id]) for r in rankings
    ]))
    rows.append(("ap", "", mean_ap))
    return rows


def evaluate(queries: EmbeddingSet, gallery: EmbeddingSet,
             relevance: dict[str, set[str]], ks: list[int], *,
             workers: int = 1) -> list[tuple[str, str, float]]:
    """Rank the full gallery for every query and score R@k and mean AP."""
    rankings = top_k(gallery, queries, len(gallery.ids), workers=workers)
    return metrics_from_rankings(rankings, relevance, ks)


def write_metrics(rows: list[tuple[str, str, float]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "k", "value"])
        for metric, k, value in rows:
            writer.writerow([metric, k, repr(float(value))])
