"""Synthetic retrieval world with a latent-topic relevance oracle.

Every random draw comes from a Philox counter-based generator keyed by
``SeedSequence([seed, stream, index])``, so each item depends only on the
base seed, its stream and its index; generation order does not matter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence, TextIO

import numpy as np

RESERVED_TOKENS = 8  # 0 pad, 1 mask, 2..7 prompt tokens
POSITIVE_THRESHOLD = 0.5
HARD_NEGATIVE_FLOOR = 0.2

# stream ids for keyed generators
_S_TOPICS, _S_GENERAL, _S_DOCS, _S_QUERIES, _S_TRAIN = 0, 1, 2, 3, 4
_S_ALIGN_TASK, _S_ALIGN_GENERAL, _S_ORACLE, _S_MINE, _S_ALIGN_ORDER = 5, 6, 7, 8, 9


def keyed_rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream, index])))


@dataclass(frozen=True)
class TopicModel:
    n_topics: int = 24
    vocab_size: int = 512
    topic_mix_sparsity: int = 2
    seed: int = 0
    token_concentration: float = 0.05
    mix_concentration: float = 1.0
    n_general_topics: int = 12
    query_len: tuple[int, int] = (4, 8)
    doc_len: tuple[int, int] = (10, 16)

    def __post_init__(self):
        if self.n_topics < 1:
            raise ValueError("n_topics must be >= 1")
        if self.vocab_size <= RESERVED_TOKENS + 1:
            raise ValueError("vocab_size too small")
        if self.topic_mix_sparsity < 1:
            raise ValueError("topic_mix_sparsity must be >= 1")
        object.__setattr__(self, "query_len", tuple(self.query_len))
        object.__setattr__(self, "doc_len", tuple(self.doc_len))

    @property
    def n_latent(self) -> int:
        """Length of every mixture vector: task topics then general topics."""
        return self.n_topics + self.n_general_topics

    def _dists(self, n: int, stream: int) -> np.ndarray:
        content = self.vocab_size - RESERVED_TOKENS
        out = np.zeros((n, self.vocab_size))
        for t in range(n):
            rng = keyed_rng(self.seed, stream, t)
            out[t, RESERVED_TOKENS:] = rng.dirichlet(np.full(content, self.token_concentration))
        return out

    @cached_property
    def topic_token_dist(self) -> np.ndarray:
        return self._dists(self.n_topics, _S_TOPICS)

    @cached_property
    def general_token_dist(self) -> np.ndarray:
        return self._dists(self.n_general_topics, _S_GENERAL)

    @cached_property
    def _cdf(self) -> np.ndarray:
        d = np.concatenate([self.topic_token_dist, self.general_token_dist], axis=0)
        c = np.cumsum(d, axis=1)
        c[:, -1] = 1.0
        return c

    def sample_mixture(self, rng: np.random.Generator, general: bool = False) -> np.ndarray:
        n = self.n_general_topics if general else self.n_topics
        offset = self.n_topics if general else 0
        k = min(self.topic_mix_sparsity, n)
        active = rng.choice(n, size=k, replace=False)
        weights = rng.dirichlet(np.full(k, self.mix_concentration)) if k > 1 else np.ones(1)
        mix = np.zeros(self.n_latent)
        mix[offset + active] = weights
        return mix

    def sample_tokens(self, rng: np.random.Generator, mixture: np.ndarray, length: int) -> list[int]:
        if length <= 0:
            return []
        topics = rng.choice(self.n_latent, size=length, p=mixture)
        u = rng.random(length)
        return [int(np.searchsorted(self._cdf[t], x, side="right")) for t, x in zip(topics, u)]


@dataclass
class Item:
    id: int
    tokens: list[int]
    mixture: np.ndarray
    general: bool = False


@dataclass
class SyntheticCorpus:
    """Documents, held-out evaluation queries and a separate training query pool."""

    model: TopicModel
    documents: list[Item]
    queries: list[Item]
    train_queries: list[Item] = field(default_factory=list)

    @cached_property
    def doc_mixtures(self) -> np.ndarray:
        return np.stack([d.mixture for d in self.documents])

    def doc_tokens(self) -> list[list[int]]:
        return [d.tokens for d in self.documents]


@dataclass
class SupervisedPair:
    query_id: int
    positive_id: int
    hard_negative_ids: list[int]


@dataclass
class AlignmentCorpus:
    items: list[Item]

    @property
    def sequences(self) -> list[list[int]]:
        return [it.tokens for it in self.items]

    @property
    def tags(self) -> list[str]:
        return ["general" if it.general else "task" for it in self.items]

    def __len__(self) -> int:
        return len(self.items)


def _make_item(model: TopicModel, stream: int, index: int, length: tuple[int, int], general: bool = False) -> Item:
    rng = keyed_rng(model.seed, stream, index)
    mix = model.sample_mixture(rng, general)
    n = int(rng.integers(length[0], length[1] + 1))
    return Item(index, model.sample_tokens(rng, mix, n), mix, general)


def generate(model: TopicModel, n_docs: int, n_queries: int, n_train_queries: int = 0) -> SyntheticCorpus:
    """Deterministic corpus: a pure function of the model (incl. seed) and the counts."""
    docs = [_make_item(model, _S_DOCS, i, model.doc_len) for i in range(n_docs)]
    queries = [_make_item(model, _S_QUERIES, i, model.query_len) for i in range(n_queries)]
    train = [_make_item(model, _S_TRAIN, i, model.query_len) for i in range(n_train_queries)]
    return SyntheticCorpus(model, docs, queries, train)


def relevance(q_mix, d_mix) -> float:
    """Cosine similarity of latent mixtures, clamped to [0, 1]."""
    q = np.asarray(q_mix, dtype=np.float64)
    d = np.asarray(d_mix, dtype=np.float64)
    denom = np.linalg.norm(q) * np.linalg.norm(d)
    if denom == 0.0:
        return 0.0
    return float(np.clip(q @ d / denom, 0.0, 1.0))


def relevance_matrix(q_mixes: np.ndarray, d_mixes: np.ndarray) -> np.ndarray:
    q = np.asarray(q_mixes, dtype=np.float64)
    d = np.asarray(d_mixes, dtype=np.float64)
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-300)
    dn = d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
    return np.clip(qn @ dn.T, 0.0, 1.0)


def mine_pairs(corpus: SyntheticCorpus, per_query_hard_negs: int,
               queries: Sequence[Item] | None = None) -> list[SupervisedPair]:
    """Positive = best document scoring > 0.5 (lowest id on ties); hard negatives
    drawn uniformly from the (0.2, 0.5] band.  Queries with no positive are
    skipped; short bands yield fewer negatives than requested."""
    if not corpus.documents:
        raise ValueError("corpus has no documents")
    queries = corpus.train_queries if queries is None else queries
    if not queries:
        return []
    scores = relevance_matrix(np.stack([q.mixture for q in queries]), corpus.doc_mixtures)
    pairs = []
    for row, q in zip(scores, queries):
        best = int(np.argmax(row))  # first max -> lowest id
        if row[best] <= POSITIVE_THRESHOLD:
            continue
        band = np.flatnonzero((row > HARD_NEGATIVE_FLOOR) & (row <= POSITIVE_THRESHOLD))
        take = min(per_query_hard_negs, band.size)
        rng = keyed_rng(corpus.model.seed, _S_MINE, q.id)
        negs = sorted(int(x) for x in rng.choice(band, size=take, replace=False)) if take else []
        pairs.append(SupervisedPair(q.id, corpus.documents[best].id, negs))
    return pairs


def negative_shortfall(pairs: Iterable[SupervisedPair], requested: int) -> int:
    return sum(max(0, requested - len(p.hard_negative_ids)) for p in pairs)


def oracle_features(item: Item, model: TopicModel, factor: float = 2.0, n_extra: int | None = None) -> list[int]:
    """Query tokens followed by extra tokens drawn from the query's true topics.

    By default appends ``factor * len(query)`` tokens, i.e. more than the query.
    """
    n = int(round(factor * len(item.tokens))) if n_extra is None else n_extra
    rng = keyed_rng(model.seed, _S_ORACLE, item.id + (1 << 40 if item.general else 0))
    return list(item.tokens) + model.sample_tokens(rng, item.mixture, n)


def alignment_corpus(model: TopicModel, n: int, general_fraction: float, offset: int = 0) -> AlignmentCorpus:
    """Unlabeled query-like texts mixing task queries with disjoint-topic general text."""
    if not 0.0 <= general_fraction <= 1.0:
        raise ValueError("general_fraction must lie in [0, 1]")
    n_general = int(round(n * general_fraction))
    items = [_make_item(model, _S_ALIGN_TASK, offset + i, model.query_len) for i in range(n - n_general)]
    items += [_make_item(model, _S_ALIGN_GENERAL, offset + i, model.query_len, general=True) for i in range(n_general)]
    order = keyed_rng(model.seed, _S_ALIGN_ORDER, offset).permutation(len(items))
    return AlignmentCorpus([items[i] for i in order])


def score_histogram(corpus: SyntheticCorpus, bins: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Histogram of oracle scores over all (eval query, document) pairs."""
    scores = relevance_matrix(np.stack([q.mixture for q in corpus.queries]), corpus.doc_mixtures)
    return np.histogram(scores, bins=bins, range=(0.0, 1.0))


def relevant_base_rate(corpus: SyntheticCorpus, threshold: float = POSITIVE_THRESHOLD) -> float:
    """Expected P@K of a retriever that ranks documents at random."""
    scores = relevance_matrix(np.stack([q.mixture for q in corpus.queries]), corpus.doc_mixtures)
    return float((scores > threshold).mean())


def write_jsonl(items: Iterable[Item], kind: str, fh: TextIO) -> None:
    for it in items:
        rec = {"id": it.id, "kind": kind, "tokens": it.tokens,
               "mixture": [round(float(x), 12) for x in it.mixture]}
        fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
