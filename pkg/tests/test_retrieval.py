import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from asymret import retrieval as R
from asymret import synthgen as S
from asymret.encoder import Encoder, EncoderConfig

import oracles


def unit(rng, *shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.booleans())
def test_top_k_matches_full_sort(seed, k, quantize):
    rng = np.random.default_rng(seed)
    docs = unit(rng, 30, 4)
    if quantize:
        # coarse values create many exact ties for the id tie-break
        docs = np.round(docs * 2) / 2
    ids = rng.permutation(100)[:30]
    index = R.DocIndex(docs, ids)
    qs = np.round(unit(rng, 5, 4) * 2) / 2 if quantize else unit(rng, 5, 4)
    res = R.top_k(index, qs, k)
    for q, got in zip(qs, res.ids):
        assert got.tolist() == oracles.top_k_full_sort(docs, ids, q, k)
    assert np.all(np.diff(res.scores, axis=1) <= 0)


def test_top_k_edge_cases():
    index = R.index_from_embeddings(np.eye(3))
    assert R.top_k(index, np.ones(3), 10).ids.tolist() == [[0, 1, 2]]
    with pytest.raises(ValueError):
        R.top_k(index, np.ones(3), 0)
    with pytest.raises(ValueError):
        R.DocIndex(np.eye(3), np.arange(2))


def test_truncated_index_is_renormalized():
    rng = np.random.default_rng(0)
    idx = R.index_from_embeddings(unit(rng, 6, 8), truncate_dim=3)
    assert idx.matrix.shape == (6, 3)
    np.testing.assert_allclose(np.linalg.norm(idx.matrix, axis=1), 1.0, atol=1e-12)


def test_precision_at_k_hand_example():
    q_mix = np.array([[1.0, 0.0]])
    d_mix = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.4], [0.3, 0.7]])
    res = R.RetrievalResult(np.array([[0, 1, 2, 3]]), np.zeros((1, 4)))
    # cosines: 1, 0, 0.83, 0.39
    assert R.precision_at_k(res, q_mix, d_mix, k=4) == 0.5
    assert R.precision_at_k(res, q_mix, d_mix, k=1) == 1.0


def test_single_topic_world_scores_perfectly():
    m = S.TopicModel(n_topics=1, vocab_size=32, topic_mix_sparsity=1, seed=1)
    c = S.generate(m, 20, 5)
    rng = np.random.default_rng(1)
    res = R.top_k(R.index_from_embeddings(unit(rng, 20, 4)), unit(rng, 5, 4), 10)
    assert R.precision_at_k(res, np.stack([q.mixture for q in c.queries]), c.doc_mixtures) == 1.0


def test_random_embeddings_hit_the_base_rate():
    m = S.TopicModel(seed=0)
    c = S.generate(m, 2000, 500)
    rng = np.random.default_rng(2)
    res = R.top_k(R.index_from_embeddings(unit(rng, 2000, 16)), unit(rng, 500, 16), 10)
    p = R.precision_at_k(res, np.stack([q.mixture for q in c.queries]), c.doc_mixtures)
    assert abs(p - S.relevant_base_rate(c)) <= 0.05


def test_bench_report_fields():
    cfg = EncoderConfig(vocab_size=40, hidden_dim=16, ffn_dim=12, n_layers=1, n_query_heads=2, n_kv_heads=1,
                        head_dim=8, embed_dim=8, max_seq_len=12)
    enc = Encoder.init(cfg, 0)
    rep = R.bench_encoder(enc, [[9, 10, 11], [12, 13]], label="tiny", p_at_k=0.25)
    assert rep.params == enc.n_params() and rep.p50_ms > 0 and rep.p95_ms >= rep.p50_ms and rep.qps > 0
    row = rep.row()
    assert len(row) == len(R.BENCH_COLUMNS) and row[0] == "tiny" and row[-1] == "0.25"
    with pytest.raises(ValueError):
        R.bench_encoder(enc, [[9]], repetitions=5)
