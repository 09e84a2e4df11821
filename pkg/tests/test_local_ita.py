import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mlip import numerics as nm
from mlip.local_ita import cross_modal_attend, local_loss, local_loss_side, patch_weights


def _attend_oracle(f, e, Q, K, V):
    d = f.shape[1]
    n = e.shape[0]
    Z = np.zeros((f.shape[0], d))
    A = np.zeros((f.shape[0], n))
    for j in range(f.shape[0]):
        q = f[j] @ Q
        s = [float(q @ (e[k] @ K)) / math.sqrt(d) for k in range(n)]
        ex = [math.exp(v) for v in s]
        for k in range(n):
            A[j, k] = ex[k] / sum(ex)
            Z[j] += A[j, k] * (e[k] @ V)
    return Z, A


def test_attend_single_row(f64):
    rng = np.random.default_rng(0)
    f, e = rng.standard_normal((1, 3)), rng.standard_normal((1, 3))
    Q, K, V = (rng.standard_normal((3, 3)) for _ in range(3))
    Z, attn = cross_modal_attend(f, e, Q, K, V)
    assert np.allclose(attn.data, 1.0)
    assert np.allclose(Z.data, e @ V, atol=1e-14)


def test_attend_identical_knowledge_rows(f64):
    rng = np.random.default_rng(1)
    f = rng.standard_normal((4, 3))
    e = np.tile(rng.standard_normal((1, 3)), (4, 1))
    Z, _ = cross_modal_attend(f, e, *(rng.standard_normal((3, 3)) for _ in range(3)))
    assert np.allclose(Z.data, Z.data[0], atol=1e-14)


def test_attend_matches_dense_oracle(f64):
    rng = np.random.default_rng(2)
    f, e = rng.standard_normal((2, 2)), rng.standard_normal((2, 2))
    mats = [rng.standard_normal((2, 2)) for _ in range(3)]
    Z, attn = cross_modal_attend(f, e, *mats)
    Zo, Ao = _attend_oracle(f, e, *mats)
    assert np.allclose(Z.data, Zo, atol=1e-12) and np.allclose(attn.data, Ao, atol=1e-12)


def test_attend_shape_mismatch():
    with pytest.raises(ValueError):
        cross_modal_attend(np.ones((2, 3)), np.ones((2, 4)), np.eye(3), np.eye(3), np.eye(3))


def test_patch_weights_uniform_and_averaging():
    n = 4
    uniform = np.full((1, n + 1, n + 1), 1.0 / (n + 1))
    assert np.allclose(patch_weights(uniform), 1.0 / n)
    rng = np.random.default_rng(3)
    heads = rng.dirichlet(np.ones(n + 1), size=(2, n + 1))
    w = patch_weights(heads)
    expected = (heads[0, 0, 1:] + heads[1, 0, 1:]) / 2
    assert np.allclose(w, expected / expected.sum(), atol=1e-15)
    assert abs(w.sum() - 1.0) < 1e-12


def test_side_single_position_is_zero(f64):
    x = np.array([[0.0, 1.0]])
    assert local_loss_side(x, x, tau2=0.1).item() == 0.0


@pytest.mark.parametrize("n,tau", [(2, 0.1), (4, 0.5), (6, 1.0)])
def test_side_uniform_orthonormal_closed_form(n, tau, f64):
    eye = np.eye(n)
    expected = -math.log(math.exp(1 / tau) / (math.exp(1 / tau) + n - 1))
    assert abs(local_loss_side(eye, eye, tau2=tau).item() - expected) < 1e-10


def test_side_one_hot_weight_masks_other_rows(f64):
    rng = np.random.default_rng(4)
    Z, f = nm.l2_normalize(rng.standard_normal((2, 5, 4)))
    w = np.eye(5)[2]
    base = local_loss_side(Z, f, w, 0.2).item()
    sim = f @ Z.T / 0.2
    to_z = sim[2, 2] - math.log(np.exp(sim[2]).sum())
    to_f = sim[2, 2] - math.log(np.exp(sim[:, 2]).sum())
    assert abs(base - (-0.5 * (to_z + to_f))) < 1e-12


def test_side_matches_summation_oracle(f64):
    rng = np.random.default_rng(5)
    B, n, d, tau = 3, 4, 5, 0.3
    Z = nm.l2_normalize(rng.standard_normal((B, n, d)))
    f = nm.l2_normalize(rng.standard_normal((B, n, d)))
    w = rng.dirichlet(np.ones(n), size=B)
    total = 0.0
    for b in range(B):
        for j in range(n):
            s_row = [math.exp(f[b, j] @ Z[b, k] / tau) for k in range(n)]
            s_col = [math.exp(f[b, k] @ Z[b, j] / tau) for k in range(n)]
            total += w[b, j] * (math.log(s_row[j] / sum(s_row)) + math.log(s_col[j] / sum(s_col)))
    assert abs(local_loss_side(Z, f, w, tau).item() - (-0.5 * total / B)) < 1e-12


def test_side_rejects_bad_temperature():
    with pytest.raises(ValueError):
        local_loss_side(np.eye(2), np.eye(2), tau2=0.0)


def test_local_loss_is_average(f64):
    eye = np.eye(3)
    total, parts = local_loss((eye, eye, None), (eye, eye, None), 0.5)
    assert total.item() == pytest.approx(parts["L_v2t_tl"])
    zero = np.eye(1)
    z, _ = local_loss((zero, zero, None), (zero, zero, None))
    assert z.item() == 0.0
    rng = np.random.default_rng(6)
    a, b = nm.l2_normalize(rng.standard_normal((2, 4, 3)))
    t, parts = local_loss((a, b, None), (b, a, None), 0.2)
    assert t.item() == pytest.approx(0.5 * (parts["L_v2t_tl"] + parts["L_t2v_tl"]), abs=1e-14)


@given(st.integers(2, 8), st.integers(0, 2**31))
def test_permutation_invariance(n, seed):
    with nm.precision("f64"):
        rng = np.random.default_rng(seed)
        Z, f = nm.l2_normalize(rng.standard_normal((2, n, 4)))
        w = rng.dirichlet(np.ones(n))
        p = rng.permutation(n)
        a = local_loss_side(Z, f, w, 0.1).item()
        b = local_loss_side(Z[p], f[p], w[p], 0.1).item()
        assert abs(a - b) < 1e-9
