import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mlip import autograd as ag
from mlip import numerics as nm
from mlip.category_cl import (
    PROB_FLOOR,
    PrototypeBank,
    category_loss,
    init_prototypes,
    knowledge_fuse,
    prototype_probs,
    sinkhorn_assign,
    topic_extract,
    tucker_fuse,
)
from mlip.gradcheck import _instance, micro_config
from mlip.kernels import sinkhorn_numba, sinkhorn_numpy
from mlip.verify import oracle_mode_product, oracle_sinkhorn


# topics ----------------------------------------------------------------------
def test_scalar_topic_reduces_to_layer_norm(f64):
    rng = np.random.default_rng(0)
    v, t = nm.l2_normalize(rng.standard_normal((2, 3, 8)))
    tp = topic_extract(v, t, "scalar")
    assert np.allclose(tp.t_dot.data, nm.layer_norm(t), atol=1e-12)
    assert np.allclose(tp.v_dot.data, nm.layer_norm(nm.layer_norm(t)), atol=1e-12)


def test_sequence_topic_matches_group_attention_oracle(f64):
    rng = np.random.default_rng(1)
    v, t = nm.l2_normalize(rng.standard_normal((2, 8)))
    groups, g = 4, 2
    V, T = v.reshape(groups, g), t.reshape(groups, g)
    a1 = nm.softmax(V @ T.T / math.sqrt(g), axis=-1)
    t_dot = nm.layer_norm((a1 @ T).reshape(-1))
    a2 = nm.softmax(V @ V.T / math.sqrt(g), axis=-1)
    v_dot = nm.layer_norm((a2 @ t_dot.reshape(groups, g)).reshape(-1))
    tp = topic_extract(v, t, "sequence", groups)
    assert np.allclose(tp.t_dot.data[0], t_dot, atol=1e-12)
    assert np.allclose(tp.v_dot.data[0], v_dot, atol=1e-12)


def test_topic_mode_validation():
    with pytest.raises(ValueError):
        topic_extract(np.ones(6), np.ones(6), "bogus")
    with pytest.raises(ValueError):
        topic_extract(np.ones(6), np.ones(6), "sequence", groups=4)


# tucker fusion -----------------------------------------------------------------
def test_tucker_matches_mode_product_oracle(f64):
    rng = np.random.default_rng(2)
    for da, db, dk in ((2, 2, 2), (3, 4, 5)):
        core = rng.standard_normal((da, db, dk))
        v, t = rng.standard_normal((3, da)), rng.standard_normal((3, db))
        W_o = rng.standard_normal((4, dk))
        expected = oracle_mode_product(core, v, t) @ W_o.T
        assert np.allclose(tucker_fuse(v, t, core, W_o).data, expected, atol=1e-10)


def test_tucker_multilinear_and_zero_core(f64):
    rng = np.random.default_rng(3)
    core = rng.standard_normal((3, 3, 2))
    v, t, W = rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal((2, 2))
    assert np.allclose(tucker_fuse(2 * v, t, core, W).data, 2 * tucker_fuse(v, t, core, W).data, atol=1e-14)
    assert np.all(tucker_fuse(v, t, np.zeros_like(core), W).data == 0)
    with pytest.raises(ValueError):
        tucker_fuse(v, t, np.zeros((2, 3, 2)), W)


# knowledge attention -----------------------------------------------------------
def test_knowledge_fuse_single_and_duplicate_entities(f64):
    rng = np.random.default_rng(4)
    q, e, W = rng.standard_normal((2, 3)), rng.standard_normal((1, 3)), rng.standard_normal((3, 3))
    one = knowledge_fuse(q, e, 0.1, W).data
    assert np.allclose(one, np.tile(e @ W, (2, 1)), atol=1e-14)
    assert np.allclose(knowledge_fuse(q, np.vstack([e, e, e]), 0.1, W).data, one, atol=1e-14)


def test_knowledge_fuse_three_entity_oracle(f64):
    rng = np.random.default_rng(5)
    q, e, W = rng.standard_normal(4), rng.standard_normal((3, 4)), rng.standard_normal((4, 4))
    s = [float(q @ e[k]) / 0.5 for k in range(3)]
    ex = [math.exp(x) for x in s]
    pooled = sum(ex[k] / sum(ex) * e[k] for k in range(3))
    assert np.allclose(knowledge_fuse(q, e, 0.5, W).data[0], pooled @ W, atol=1e-12)


# sinkhorn --------------------------------------------------------------------
def test_sinkhorn_equal_scores_give_uniform_codes():
    code = sinkhorn_assign(np.ones((6, 3)), np.eye(3), 0.05, 3)
    assert np.allclose(code.u, 1.0 / 3, atol=1e-15)


def test_sinkhorn_diagonal_two_by_two():
    code = sinkhorn_assign(np.eye(2) * 10, np.eye(2), 0.5, 50)
    ref = oracle_sinkhorn(np.eye(2) * 10, 0.5)
    assert np.allclose(code.u, np.eye(2), atol=1e-3)
    assert np.allclose(ref.assignment, np.eye(2), atol=1e-3)


def test_sinkhorn_marginals_on_random_scores():
    rng = np.random.default_rng(6)
    for _ in range(20):
        f = nm.l2_normalize(rng.standard_normal((8, 64)))
        J = nm.l2_normalize(rng.standard_normal((4, 64)))
        code = sinkhorn_assign(f, J, 0.05, 50)
        assert code.row_err < 1e-6 and code.col_err < 1e-4
        assert np.abs(code.u - oracle_sinkhorn(f @ J.T, 0.05).assignment).max() < 1e-4


def test_sinkhorn_validation():
    with pytest.raises(ValueError):
        sinkhorn_assign(np.ones((2, 2)), np.eye(2), 0.0, 3)
    with pytest.raises(ValueError):
        sinkhorn_assign(np.ones((2, 2)), np.eye(2), 0.05, 0)
    with pytest.raises(ValueError), np.errstate(invalid="ignore"):
        sinkhorn_assign(np.array([[np.inf, 0.0]]), np.eye(2), 0.05, 3)


@given(st.integers(1, 12), st.integers(1, 6), st.floats(-50, 50), st.integers(0, 2**31))
def test_sinkhorn_shift_invariant(B, C, shift, seed):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1, 1, (B, C))
    a = sinkhorn_numpy(s, 0.1, 5)
    assert np.allclose(a, sinkhorn_numpy(s + shift, 0.1, 5), atol=1e-8)
    assert np.allclose(a.sum(axis=1), 1.0, atol=1e-9)


@given(st.integers(1, 20), st.integers(1, 8), st.integers(1, 60), st.integers(0, 2**31))
def test_sinkhorn_kernels_agree(B, C, iters, seed):
    s = np.random.default_rng(seed).uniform(-1, 1, (B, C))
    assert np.allclose(sinkhorn_numpy(s, 0.05, iters), sinkhorn_numba(s, 0.05, iters), atol=1e-12)


# prototype probabilities and loss ----------------------------------------------
def test_prototype_probs_cases(f64):
    assert prototype_probs(np.array([0.3, -1.0]), np.array([[1.0, 0.0]])).data.tolist() == [[1.0]]
    J = np.eye(3)
    assert np.allclose(prototype_probs(np.ones(3), J).data, 1 / 3, atol=1e-15)
    J2 = nm.l2_normalize(np.array([[1.0, 1.0], [1.0, -0.5]]))
    x = np.array([2.0, 1.0])
    xh = x / np.linalg.norm(x)
    e = [math.exp(float(xh @ J2[c]) / 0.2) for c in range(2)]
    assert np.allclose(prototype_probs(x, J2, 0.2).data[0], [e[0] / sum(e), e[1] / sum(e)], atol=1e-14)
    with pytest.raises(ValueError):
        prototype_probs(np.zeros(2), J2)


@given(st.integers(-20, 20), st.integers(0, 2**31))
def test_prototype_probs_scale_invariant(power, seed):
    with nm.precision("f64"):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((3, 5))
        J = init_prototypes(4, 5, rng)
        # powers of two rescale without rounding
        assert np.array_equal(prototype_probs(x, J).data, prototype_probs(x * 2.0**power, J).data)
        assert np.allclose(prototype_probs(x, J).data, prototype_probs(x * 3.7, J).data, atol=1e-14)


def test_category_loss_cases(f64):
    u = np.eye(3)
    assert category_loss(u, u, u).item() == pytest.approx(-math.log(1.0), abs=1e-15)
    uni = np.full((4, 5), 0.2)
    rng = np.random.default_rng(7)
    codes = rng.dirichlet(np.ones(5), size=4)
    assert abs(category_loss(codes, uni, uni).item() - math.log(5)) < 1e-12
    Pv, Pt = rng.dirichlet(np.ones(5), size=(2, 4))
    manual = -sum(codes[i, c] * (math.log(Pv[i, c]) + math.log(Pt[i, c])) for i in range(4) for c in range(5)) / 8
    assert abs(category_loss(codes, Pv, Pt).item() - manual) < 1e-12


def test_category_loss_floor_guards_zero_probabilities(f64):
    u = np.array([[1.0, 0.0]])
    p = np.array([[0.0, 1.0]])
    assert category_loss(u, p, p).item() == pytest.approx(-math.log(PROB_FLOOR))


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_category_loss_non_negative(B, C, seed):
    rng = np.random.default_rng(seed)
    u, Pv, Pt = rng.dirichlet(np.ones(C), size=(3, B))
    assert category_loss(u, Pv, Pt).item() >= 0.0


def test_bank_renormalizes_rows():
    bank = PrototypeBank(np.array([[3.0, 4.0], [0.0, 2.0]]))
    bank.renormalize()
    assert np.allclose(np.linalg.norm(bank.J, axis=1), 1.0)


# gradient routing --------------------------------------------------------------
def _cl_grads(model, params, inp):
    pv = {k: ag.Var(v, requires_grad=True) for k, v in params.items()}
    model.forward(pv, inp).losses["L_cl"].backward()
    return {k: v.grad for k, v in pv.items()}


def test_codes_are_stop_gradient(f64):
    model, params, inp = _instance(micro_config(), 1)
    frozen = _cl_grads(model, params, inp)
    inp.codes = None
    recomputed = _cl_grads(model, params, inp)
    for k in frozen:
        a, b = frozen[k], recomputed[k]
        assert (a is None) == (b is None)
        if a is not None:
            assert np.array_equal(a, b)


def _nonzero(g):
    return g is not None and bool(np.any(g))


def test_prototypes_and_encoders_receive_gradient(f64):
    model, params, inp = _instance(micro_config(), 2)
    g = _cl_grads(model, params, inp)
    assert _nonzero(g["cl.J"]) and _nonzero(g["ft.tok"])
    # both scalar softmaxes equal 1, so the image side drops out of both topics
    assert not _nonzero(g["fv.embed.W"])
    model, params, inp = _instance(micro_config(topic_mode="sequence"), 2)
    g = _cl_grads(model, params, inp)
    assert _nonzero(g["fv.embed.W"]) and _nonzero(g["ft.tok"])


def test_fusion_path_only_reaches_the_loss_through_the_codes(f64):
    model, params, inp = _instance(micro_config(), 3)
    g = _cl_grads(model, params, inp)
    for k in ("cl.core", "cl.Wo", "cl.ek", "cl.Wsa"):
        assert not _nonzero(g[k])
