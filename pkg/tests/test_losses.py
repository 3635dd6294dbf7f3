import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from asymret import losses as L
from asymret import tensor as T
from asymret.tensor import Tensor

import oracles


def unit(rng, *shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def micro_batches(n=100, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        b, h, d = int(rng.integers(1, 4)), int(rng.integers(0, 3)), int(rng.integers(2, 6))
        yield rng, b, h, d


def qwen(q, d, hard, cfg, valid=None):
    with T.float64_mode():
        return float(L.qwen_cl_loss(Tensor(q), Tensor(d), None if hard is None else Tensor(hard), cfg, valid).data)


# ---------------------------------------------------------------- enumeration oracles


def test_qwen_loss_matches_enumeration_on_random_micro_batches():
    margins = [0.0, None, -0.1, 0.05, 0.3]
    for n, (rng, b, h, d) in enumerate(micro_batches()):
        q, pos = unit(rng, b, d), unit(rng, b, d)
        hard = unit(rng, b, h, d) if h else None
        valid = rng.random((b, h)) < 0.7 if h and n % 3 == 0 else None
        cfg = L.CLConfig(temperature=float(rng.uniform(0.05, 1.0)),
                         use_in_batch_negatives=bool(n % 4 != 1),
                         use_same_tower_negatives=bool(n % 5 != 2),
                         false_negative_margin=margins[n % len(margins)])
        want = oracles.qwen_cl_enumerate(q, pos, hard, cfg.temperature, cfg.use_in_batch_negatives,
                                         cfg.use_same_tower_negatives, cfg.false_negative_margin, valid)
        assert abs(qwen(q, pos, hard, cfg, valid) - want) <= 1e-10


def test_kl_loss_matches_enumeration_on_random_micro_batches():
    for rng, b, _, d in micro_batches(seed=1):
        s, t, docs = unit(rng, b, d), unit(rng, b, d), unit(rng, b, d)
        cfg = L.KLConfig(float(rng.uniform(0.05, 1.0)), float(rng.uniform(0.05, 1.0)))
        with T.float64_mode():
            got = float(L.kl_distill_loss(Tensor(s), t, docs, cfg).data)
        assert abs(got - oracles.kl_enumerate(s, t, docs, cfg.teacher_temperature, cfg.student_temperature)) <= 1e-10


def test_infonce_kuea_l2_match_enumeration():
    for rng, b, _, d in micro_batches(30, seed=2):
        q, pos = unit(rng, b, d), unit(rng, b, d)
        with T.float64_mode():
            assert abs(float(L.info_nce_loss(Tensor(q), Tensor(pos), 0.1).data)
                       - oracles.info_nce_enumerate(q, pos, 0.1)) <= 1e-10
            assert abs(float(L.l2_align_loss(Tensor(q), pos).data) - oracles.l2_align_enumerate(q, pos)) <= 1e-12
            if b >= 2:
                assert abs(float(L.kuea_loss(Tensor(q), pos).data) - oracles.kuea_enumerate(q, pos)) <= 1e-10


def test_vanilla_config_reduces_to_infonce():
    rng = np.random.default_rng(3)
    q, pos = unit(rng, 4, 6), unit(rng, 4, 6)
    with T.float64_mode():
        a = float(L.qwen_cl_loss(Tensor(q), Tensor(pos), cfg=L.VANILLA_INFONCE).data)
        b = float(L.info_nce_loss(Tensor(q), Tensor(pos)).data)
    assert a == pytest.approx(b, abs=1e-12)


# ---------------------------------------------------------------- gradients


def _grad_cases():
    rng = np.random.default_rng(4)
    b, h, d = 4, 2, 6
    base = {"q": rng.standard_normal((b, d)), "d": rng.standard_normal((b, d)), "h": rng.standard_normal((b, h, d))}
    t, docs = unit(rng, b, d), unit(rng, b, d)
    n = T.l2_normalize
    cl = L.CLConfig(temperature=0.5, false_negative_margin=None)
    return {
        "qwen": (lambda p: L.qwen_cl_loss(n(p["q"]), n(p["d"]), n(p["h"]), cl), base),
        "qwen_masked": (lambda p: L.qwen_cl_loss(n(p["q"]), n(p["d"]), n(p["h"]), L.CLConfig(0.5, false_negative_margin=0.2)), base),
        "infonce": (lambda p: L.info_nce_loss(n(p["q"]), n(p["d"]), 0.5), {k: base[k] for k in "qd"}),
        "l2_align": (lambda p: L.l2_align_loss(n(p["q"]), t), {"q": base["q"]}),
        "kl": (lambda p: L.kl_distill_loss(n(p["q"]), t, docs, L.KLConfig(0.3, 0.5)), {"q": base["q"]}),
        "kuea": (lambda p: L.kuea_loss(n(p["q"]), t), {"q": base["q"]}),
    }


@pytest.mark.parametrize("name", sorted(_grad_cases()))
def test_loss_gradients_match_central_differences(name):
    build, inputs = _grad_cases()[name]
    errs = T.check_gradients(build, inputs, h=1e-5)
    assert max(errs.values()) <= 1e-4, errs


# ---------------------------------------------------------------- properties


@given(st.integers(1, 4), st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_qwen_loss_is_nonnegative_and_finite(b, h, seed):
    rng = np.random.default_rng(seed)
    q, pos = unit(rng, b, 5), unit(rng, b, 5)
    hard = unit(rng, b, h, 5) if h else None
    v = qwen(q, pos, hard, L.CLConfig())
    assert math.isfinite(v) and v >= -1e-12


def test_single_item_without_negatives_has_zero_loss():
    q = np.array([[0.6, 0.8]])
    assert qwen(q, q, None, L.CLConfig()) == pytest.approx(0.0, abs=1e-12)


def test_masking_drops_negatives_above_the_positive():
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    d = np.array([[0.8, 0.6], [0.6, 0.8]])
    hard = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])  # identical to each query: score 1 > positive 0.8
    cfg = L.CLConfig(temperature=0.1, use_in_batch_negatives=False, use_same_tower_negatives=False)
    assert qwen(q, d, hard, cfg) == pytest.approx(0.0, abs=1e-12)
    unmasked = qwen(q, d, hard, L.CLConfig(0.1, False, False, None))
    assert unmasked == pytest.approx(math.log(1 + math.exp((1.0 - 0.8) / 0.1)), abs=1e-12)


def test_negative_margin_keeps_near_ties():
    # a negative within 0.1 above the positive survives margin -0.1 but not margin 0
    q = np.array([[1.0, 0.0]])
    d = np.array([[0.8, 0.6]])
    hard = np.array([[[0.85, math.sqrt(1 - 0.85**2)]]])
    zero = qwen(q, d, hard, L.CLConfig(0.1, False, False, 0.0))
    neg = qwen(q, d, hard, L.CLConfig(0.1, False, False, -0.1))
    assert zero == pytest.approx(0.0, abs=1e-12)
    assert neg == pytest.approx(math.log(1 + math.exp(0.05 / 0.1)), abs=1e-12)


def test_padded_hard_negative_slots_are_ignored():
    rng = np.random.default_rng(5)
    q, d = unit(rng, 2, 4), unit(rng, 2, 4)
    hard = unit(rng, 2, 2, 4)
    valid = np.array([[True, False], [True, True]])
    cfg = L.CLConfig(false_negative_margin=None)
    trimmed = hard.copy()
    trimmed[0, 1] = unit(rng, 4)  # content of an invalid slot must not matter
    assert qwen(q, d, hard, cfg, valid) == qwen(q, d, trimmed, cfg, valid)


def test_config_validation():
    with pytest.raises(ValueError):
        L.CLConfig(temperature=0)
    with pytest.raises(ValueError):
        L.CLConfig(false_negative_margin=float("nan"))
    with pytest.raises(ValueError):
        L.KLConfig(teacher_temperature=-1)
    with pytest.raises(ValueError):
        L.KernelConfig(degree=0)
    with pytest.raises(ValueError):
        L.l2_align_loss(Tensor(np.ones((2, 3))), np.ones((2, 4)))
    with pytest.raises(ValueError):
        L.kuea_loss(Tensor(np.ones((1, 3))), np.ones((1, 3)))


def test_kl_is_zero_when_student_equals_teacher():
    rng = np.random.default_rng(6)
    t, docs = unit(rng, 3, 5), unit(rng, 3, 5)
    with T.float64_mode():
        assert float(L.kl_distill_loss(Tensor(t), t, docs).data) == pytest.approx(0.0, abs=1e-12)


def random_orthogonal(d, seed):
    q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, d)))
    return q * np.sign(np.diag(r))


@given(st.integers(0, 10_000))
def test_kuea_is_blind_to_rotations(seed):
    rng = np.random.default_rng(seed)
    t = unit(rng, 5, 6)
    rot = random_orthogonal(6, seed + 1)
    with T.float64_mode():
        assert float(L.kuea_loss(Tensor(t @ rot.T), t).data) <= 1e-12


def test_procrustes_recovers_known_rotation():
    rng = np.random.default_rng(7)
    teacher = unit(rng, 256, 16)
    rot = random_orthogonal(16, 8)
    r = L.procrustes_rotation(teacher @ rot.T, teacher)
    assert np.abs(r.matrix @ rot - np.eye(16)).max() <= 1e-6
    np.testing.assert_allclose(r.apply(teacher @ rot.T), teacher, atol=1e-9)


def test_procrustes_warns_when_underdetermined_and_keeps_reflections():
    rng = np.random.default_rng(9)
    t = unit(rng, 3, 4)
    with pytest.warns(UserWarning):
        L.procrustes_rotation(t, t)
    flip = np.diag([-1.0, 1.0, 1.0])
    t = unit(rng, 50, 3)
    r = L.procrustes_rotation(t @ flip, t)
    np.testing.assert_allclose(r.matrix, flip, atol=1e-9)
    assert np.linalg.det(r.matrix) == pytest.approx(-1.0)
