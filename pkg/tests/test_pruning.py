import io

import numpy as np
import pytest

from asymret import pruning as P
from asymret.encoder import Encoder, EncoderConfig

CFG = EncoderConfig(vocab_size=40, hidden_dim=16, ffn_dim=12, n_layers=4, n_query_heads=4, n_kv_heads=2,
                    head_dim=4, embed_dim=8, max_seq_len=12)
RNG = np.random.default_rng(0)
CALIB = [list(RNG.integers(8, 40, size=int(RNG.integers(1, 12)))) for _ in range(40)]
PROBE = [list(RNG.integers(8, 40, size=n)) for n in (1, 3, 7, 12)]


def outputs(enc):
    out = enc.forward(PROBE)
    return out.pooled.data, enc.encode(PROBE)


def assert_bit_identical(a, b):
    for x, y in zip(outputs(a), outputs(b)):
        assert np.array_equal(x, y)


def test_noop_prune_is_bit_identical():
    enc = Encoder.init(CFG, 1)
    pruned, scores = P.structured_prune(enc, P.PruneTarget(CFG.n_layers, CFG.ffn_dim), CALIB)
    assert scores.retained_layers == [0, 1, 2, 3]
    assert_bit_identical(enc, pruned)


def test_removing_zero_branch_layer_is_bit_identical():
    enc = Encoder.init(CFG, 2)
    enc.params["layers.2.wo"][:] = 0
    enc.params["layers.2.w_down"][:] = 0
    ratios = P.layer_importance(enc, CALIB)
    assert ratios[2] == 1.0
    # force the zero-branch layer to be the one removed
    for i in (0, 1, 3):
        enc.params[f"layers.{i}.wo"] *= 3.0
    pruned, scores = P.structured_prune(enc, P.PruneTarget(3, CFG.ffn_dim), CALIB)
    assert scores.retained_layers == [0, 1, 3]
    assert_bit_identical(enc, pruned)


def test_removing_zero_importance_units_is_bit_identical():
    enc = Encoder.init(CFG, 3)
    dead = [1, 4, 7, 10]
    for i in range(CFG.n_layers):
        enc.params[f"layers.{i}.w_up"][dead] = 0
    imp = P.ffn_importance(enc, CALIB)
    assert np.all(imp[:, dead] == 0) and np.all(np.delete(imp, dead, axis=1) > 0)
    pruned, scores = P.structured_prune(enc, P.PruneTarget(CFG.n_layers, CFG.ffn_dim - len(dead)), CALIB)
    assert pruned.config.ffn_dim == 8
    assert_bit_identical(enc, pruned)


def test_layer_ratio_matches_direct_computation():
    enc = Encoder.init(CFG, 4)
    seqs = CALIB[:5]
    out = enc.forward(seqs, trace=True)
    num, n = np.zeros(CFG.n_layers), 0
    for b, s in enumerate(seqs):
        for t in range(len(s)):
            n += 1
            for i, rec in enumerate(out.trace):
                num[i] += np.linalg.norm(rec.h_out[b, t].astype(np.float64)) / np.linalg.norm(rec.h_in[b, t].astype(np.float64))
    np.testing.assert_allclose(P.layer_importance(enc, seqs), num / n, rtol=1e-12)


def test_ranking_ties_keep_lower_index():
    assert P.select_layers(np.array([1.0, 2.0, 2.0, 2.0]), 2) == [1, 2]
    assert P.select_units(np.zeros(5), 3) == [0, 1, 2]
    assert P.select_layers(np.array([1.5, 0.2, 1.0, 1.1]), 2, mode="far_from_one") == [0, 1]
    with pytest.raises(ValueError):
        P.select_layers(np.ones(3), 1, mode="bogus")


def test_shrink_keeps_matching_rows_and_columns():
    enc = Encoder.init(CFG, 5)
    keep = [[0, 5, 6]] * CFG.n_layers
    small = P.shrink_ffn(enc, keep)
    np.testing.assert_array_equal(small.params["layers.1.w_gate"], enc.params["layers.1.w_gate"][[0, 5, 6]])
    np.testing.assert_array_equal(small.params["layers.1.w_down"], enc.params["layers.1.w_down"][:, [0, 5, 6]])
    assert small.n_params() < enc.n_params()
    with pytest.raises(ValueError):
        P.shrink_ffn(enc, [[0], [0, 1], [0], [0]])


def test_schedule_validation():
    enc = Encoder.init(CFG, 0)
    P.validate_schedule([P.PruneTarget(3, 10), P.PruneTarget(2, 8)], enc)
    with pytest.raises(P.ScheduleError):
        P.validate_schedule([P.PruneTarget(2, 8), P.PruneTarget(3, 8)], enc)
    with pytest.raises(P.ScheduleError):
        P.validate_schedule([P.PruneTarget(5, 8)], enc)
    with pytest.raises(P.ScheduleError):
        P.compute_importance(enc, P.PruneTarget(0, 8), CALIB)
    with pytest.raises(ValueError):
        P.layer_importance(enc, [])


def test_progressive_schedule_calls_realign_per_stage_and_reports():
    enc = Encoder.init(CFG, 6)
    calls = []

    def realign(e, r):
        calls.append((r, e.config.n_layers, e.config.ffn_dim))
        return e, [1.0 / (r + 1)]

    final, reports = P.progressive_prune_align(enc, [P.PruneTarget(3, 10), P.PruneTarget(2, 6)], CALIB, realign,
                                               evaluate=lambda e: {"layers": e.config.n_layers})
    assert calls == [(0, 3, 10), (1, 2, 6)]
    assert (final.config.n_layers, final.config.ffn_dim) == (2, 6)
    assert [r.metrics["layers"] for r in reports] == [3, 2]
    buf = io.StringIO()
    P.write_prune_report(reports, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "stage,kind,index,value"
    assert sum(1 for line in lines if ",retained_layer," in line) == 5
