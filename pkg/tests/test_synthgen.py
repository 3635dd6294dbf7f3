import io
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from asymret import synthgen as S

SMALL = S.TopicModel(n_topics=6, vocab_size=64, n_general_topics=3, seed=3)


@pytest.fixture(scope="module")
def corpus():
    return S.generate(S.TopicModel(seed=0), 2000, 500, 400)


def test_relevance_examples():
    assert S.relevance([0.2, 0.8], [0.2, 0.8]) == pytest.approx(1.0)
    assert S.relevance([1, 0, 0], [0, 1, 0]) == 0.0
    assert S.relevance([0.5, 0.5, 0], [0.5, 0, 0.5]) == pytest.approx(0.5)


@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_relevance_symmetric_and_bounded(a, b):
    r = S.relevance(a, b)
    assert r == S.relevance(b, a)
    assert 0.0 <= r <= 1.0


def test_distributions_sum_to_one():
    np.testing.assert_allclose(SMALL.topic_token_dist.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(SMALL.general_token_dist.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(SMALL.topic_token_dist[:, : S.RESERVED_TOKENS] == 0)


def test_generation_is_deterministic_and_order_free():
    a = S.generate(SMALL, 30, 10, 5)
    b = S.generate(SMALL, 30, 10, 5)
    assert [d.tokens for d in a.documents] == [d.tokens for d in b.documents]
    assert np.array_equal(a.doc_mixtures, b.doc_mixtures)
    # a bigger corpus starts with the same items
    c = S.generate(SMALL, 50, 3)
    assert [d.tokens for d in c.documents[:30]] == [d.tokens for d in a.documents]


def test_items_respect_sparsity_and_lengths():
    c = S.generate(SMALL, 50, 20)
    for it in c.documents:
        assert np.count_nonzero(it.mixture) <= SMALL.topic_mix_sparsity
        assert it.mixture.sum() == pytest.approx(1.0)
        assert SMALL.doc_len[0] <= len(it.tokens) <= SMALL.doc_len[1]
        assert min(it.tokens) >= S.RESERVED_TOKENS
    for it in c.queries:
        assert SMALL.query_len[0] <= len(it.tokens) <= SMALL.query_len[1]


def test_single_topic_world_is_all_relevant():
    m = S.TopicModel(n_topics=1, vocab_size=32, topic_mix_sparsity=1, seed=1)
    c = S.generate(m, 20, 5)
    assert np.all(S.relevance_matrix(np.stack([q.mixture for q in c.queries]), c.doc_mixtures) == 1.0)


def test_mined_pairs_revalidated_by_exhaustive_scan(corpus):
    pairs = S.mine_pairs(corpus, 3)
    mined = {p.query_id for p in pairs}
    for q in corpus.train_queries:
        scores = [S.relevance(q.mixture, d.mixture) for d in corpus.documents]
        best = max(range(len(scores)), key=lambda j: (scores[j], -j))
        if scores[best] <= 0.5:
            assert q.id not in mined
    for p in pairs:
        q = corpus.train_queries[p.query_id]
        scores = [S.relevance(q.mixture, d.mixture) for d in corpus.documents]
        assert scores[p.positive_id] > 0.5
        assert scores[p.positive_id] == max(scores)
        assert p.positive_id == min(j for j, s in enumerate(scores) if s == max(scores))
        assert len(set(p.hard_negative_ids)) == len(p.hard_negative_ids) <= 3
        for n in p.hard_negative_ids:
            assert 0.2 < scores[n] <= 0.5


def test_mining_zero_negatives_and_shortfall(corpus):
    pairs = S.mine_pairs(corpus, 0)
    assert pairs and all(p.hard_negative_ids == [] for p in pairs)
    assert S.negative_shortfall(pairs, 0) == 0
    assert S.negative_shortfall(pairs, 2) == 2 * len(pairs)


def test_query_without_positive_is_skipped():
    m = S.TopicModel(n_topics=4, vocab_size=32, topic_mix_sparsity=1, n_general_topics=1, seed=0)
    c = S.generate(m, 3, 0, 40)
    doc_topics = {int(np.argmax(d.mixture)) for d in c.documents}
    pairs = S.mine_pairs(c, 1)
    for p in pairs:
        assert int(np.argmax(c.train_queries[p.query_id].mixture)) in doc_topics
    orphans = [q for q in c.train_queries if int(np.argmax(q.mixture)) not in doc_topics]
    assert orphans and len(pairs) == len(c.train_queries) - len(orphans)


def test_oracle_features():
    c = S.generate(SMALL, 5, 5)
    q = c.queries[0]
    assert S.oracle_features(q, SMALL, n_extra=0) == q.tokens
    feats = S.oracle_features(q, SMALL)
    assert feats[: len(q.tokens)] == q.tokens and len(feats) > 2 * len(q.tokens) - 1


def test_oracle_features_of_single_topic_query_use_that_topic():
    m = S.TopicModel(n_topics=5, vocab_size=400, topic_mix_sparsity=1, seed=2, token_concentration=0.01)
    c = S.generate(m, 1, 20)
    for q in c.queries:
        t = int(np.argmax(q.mixture))
        support = set(np.flatnonzero(m.topic_token_dist[t] > 0))
        extra = S.oracle_features(q, m, n_extra=30)[len(q.tokens):]
        assert set(extra) <= support


def test_alignment_corpus_fractions():
    a0 = S.alignment_corpus(SMALL, 40, 0.0)
    assert a0.tags.count("general") == 0
    a5 = S.alignment_corpus(SMALL, 41, 0.5)
    assert abs(a5.tags.count("general") - a5.tags.count("task")) <= 1
    a1 = S.alignment_corpus(SMALL, 10, 1.0)
    assert set(a1.tags) == {"general"}
    g = [it for it in a1.items]
    # general items live entirely on the disjoint latent block
    assert all(np.all(it.mixture[: SMALL.n_topics] == 0) for it in g)
    with pytest.raises(ValueError):
        S.alignment_corpus(SMALL, 10, 1.5)


def test_random_retriever_base_rate(corpus):
    # expected P@K of random ranking equals the fraction of relevant pairs
    rate = S.relevant_base_rate(corpus)
    rel = S.relevance_matrix(np.stack([q.mixture for q in corpus.queries]), corpus.doc_mixtures) > 0.5
    assert rate == pytest.approx(rel.mean())
    rng = np.random.default_rng(0)
    hits = [rel[i, rng.choice(rel.shape[1], 10, replace=False)].mean() for i in range(rel.shape[0])]
    assert abs(np.mean(hits) - rate) < 0.05


def test_default_corpus_score_histogram_regression(corpus):
    counts, edges = S.score_histogram(corpus)
    assert counts.sum() == 2000 * 500
    assert edges[0] == 0.0 and edges[-1] == 1.0
    # recorded on the default world (seed 0); guards against generator drift
    assert counts.tolist() == [877653, 22752, 16081, 12979, 11362, 10726, 10884, 10670, 10462, 16431]
    assert S.relevant_base_rate(corpus) == pytest.approx(0.059173, abs=1e-9)


def test_jsonl_export_roundtrips():
    c = S.generate(SMALL, 3, 0)
    buf = io.StringIO()
    S.write_jsonl(c.documents, "document", buf)
    recs = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert [r["tokens"] for r in recs] == [d.tokens for d in c.documents]
    np.testing.assert_allclose([r["mixture"] for r in recs], c.doc_mixtures, atol=1e-12)
