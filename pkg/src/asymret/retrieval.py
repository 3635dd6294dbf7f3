"""Exact inner-product retrieval, precision@K against the oracle, and timing."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encoder import Encoder
from .synthgen import POSITIVE_THRESHOLD

BENCH_COLUMNS = ("label", "params", "p50_ms", "p95_ms", "qps", "p_at_k")


@dataclass
class DocIndex:
    matrix: np.ndarray  # [N, d], unit rows
    ids: np.ndarray  # [N]

    def __post_init__(self):
        if self.matrix.ndim != 2 or len(self.ids) != self.matrix.shape[0]:
            raise ValueError("index matrix and id list disagree")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class RetrievalResult:
    ids: np.ndarray  # [Q, k], best first
    scores: np.ndarray  # [Q, k], nonincreasing per row


def build_index(doc_encoder: Encoder, doc_tokens: Sequence[Sequence[int]], truncate_dim: int | None = None,
                ids: Sequence[int] | None = None, batch_size: int = 256) -> DocIndex:
    if len(doc_tokens) == 0:
        raise ValueError("cannot index an empty corpus")
    mat = doc_encoder.encode(doc_tokens, batch_size=batch_size, truncate_dim=truncate_dim)
    ids = np.arange(len(doc_tokens)) if ids is None else np.asarray(ids)
    return DocIndex(mat, ids)


def index_from_embeddings(emb: np.ndarray, truncate_dim: int | None = None) -> DocIndex:
    """Index over precomputed full-width embeddings, optionally truncated and re-normalized."""
    emb = np.asarray(emb)
    if truncate_dim is not None:
        emb = emb[:, :truncate_dim]
        emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    return DocIndex(np.ascontiguousarray(emb), np.arange(len(emb)))


def top_k(index: DocIndex, q_emb: np.ndarray, k: int) -> RetrievalResult:
    """Exact top-k by inner product; equal scores go to the lower document id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.atleast_2d(np.asarray(q_emb, dtype=index.matrix.dtype))
    scores = q @ index.matrix.T
    n = scores.shape[1]
    k = min(k, n)
    out_ids = np.empty((len(q), k), dtype=index.ids.dtype)
    out_scores = np.empty((len(q), k), dtype=scores.dtype)
    # the k-th largest value bounds the candidate set; keeping every tie with
    # it lets the id tie-break decide exactly
    kth = np.partition(scores, n - k, axis=1)[:, n - k]
    for r, row in enumerate(scores):
        cand = np.flatnonzero(row >= kth[r])
        order = np.lexsort((index.ids[cand], -row[cand]))[:k]
        out_ids[r] = index.ids[cand[order]]
        out_scores[r] = row[cand[order]]
    return RetrievalResult(out_ids, out_scores)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-300)


def precision_at_k(result: RetrievalResult, query_mixtures: np.ndarray, doc_mixtures: np.ndarray,
                   k: int = 10, threshold: float = POSITIVE_THRESHOLD) -> float:
    """Mean over queries of (#retrieved with oracle relevance > threshold) / k.

    ``doc_mixtures`` is indexed by document id.
    """
    ids = result.ids[:, :k]
    qn = _unit_rows(query_mixtures)
    dn = _unit_rows(doc_mixtures)[ids]  # [Q, k, n_latent]
    rel = np.clip(np.einsum("qkt,qt->qk", dn, qn), 0.0, 1.0)
    return float(((rel > threshold).sum(axis=1) / k).mean())


@dataclass
class BenchReport:
    label: str
    params: int
    p50_ms: float
    p95_ms: float
    qps: float
    p_at_k: float | None = None

    def row(self) -> list[str]:
        def fmt(x):
            return "" if x is None else f"{x:.6g}" if isinstance(x, float) else str(x)

        return [self.label, str(self.params), fmt(self.p50_ms), fmt(self.p95_ms), fmt(self.qps), fmt(self.p_at_k)]


def bench_encoder(encoder: Encoder, queries: Sequence[Sequence[int]], repetitions: int = 30,
                  warmup: int = 5, label: str = "encoder", p_at_k: float | None = None) -> BenchReport:
    """Per-query latency (one sequence per forward) and batched throughput."""
    if repetitions < 30:
        raise ValueError("use at least 30 timed repetitions")
    queries = list(queries)
    for _ in range(warmup):
        encoder.encode(queries[:1])
    lat = []
    for r in range(repetitions):
        q = queries[r % len(queries)]
        t0 = time.perf_counter()
        encoder.encode([q])
        lat.append(time.perf_counter() - t0)
    lat_ms = np.array(lat) * 1e3
    encoder.encode(queries)
    t0 = time.perf_counter()
    encoder.encode(queries)
    qps = len(queries) / (time.perf_counter() - t0)
    return BenchReport(label, encoder.n_params(), float(np.median(lat_ms)),
                       float(np.percentile(lat_ms, 95)), float(qps), p_at_k)
