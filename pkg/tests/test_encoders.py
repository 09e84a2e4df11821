import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mlip import autograd as ag
from mlip import numerics as nm
from mlip.encoders import (
    ImageSample,
    TextSample,
    encode_features,
    encode_image,
    encode_text,
    init_encoder_params,
    project_global,
    random_transform,
)
from mlip.gradcheck import micro_config

# first four entries of (v, t, v*, t*) for micro_config, params seed 0,
# patches from default_rng(1), tokens [0, 3, 5, 7]; recorded after gradcheck passed
GOLDEN = {
    "v": [-0.4899110235879955, 1.404735936336896, -0.8004052002969435, 1.1508167040842174],
    "t": [-1.1344689646474442, 0.9416432875170785, 0.1825196188050041, 1.470368244617392],
    "v_star": [0.6154275129164108, 0.3481008852019272, 0.09672587048090785, -0.03053239639601793],
    "t_star": [-0.38220835143633763, -0.16221405326905677, -0.4588267681156761, 0.5647524572516652],
}


@pytest.fixture
def setup(f64):
    cfg = micro_config()
    return cfg, init_encoder_params(cfg, np.random.default_rng(0))


def test_golden_snapshot(setup):
    cfg, p = setup
    fs = encode_features(np.random.default_rng(1).standard_normal((4, 4)), np.array([0, 3, 5, 7]), p, cfg)
    for key, ref in GOLDEN.items():
        assert np.allclose(getattr(fs, key)[0, :4], ref, atol=1e-12), key


def test_shapes(setup):
    cfg, p = setup
    x = np.random.default_rng(2).standard_normal((3, cfg.patches, cfg.patch_dim))
    v, P, attn = encode_image(x, p, cfg)
    assert v.shape == (3, cfg.dim) and P.shape == (3, cfg.patches, cfg.dim)
    assert attn.shape == (3, cfg.heads, cfg.patches + 1, cfg.patches + 1)
    t, S, tattn = encode_text(np.zeros((3, cfg.seq_len), dtype=int), p, cfg)
    assert t.shape == (3, cfg.dim) and S.shape == (3, cfg.seq_len, cfg.dim)
    assert np.allclose(attn.data.sum(-1), 1.0, atol=1e-9)
    assert np.allclose(tattn.data.sum(-1), 1.0, atol=1e-9)


def test_zero_patches_with_zero_embedder_give_input_independent_feature(setup):
    cfg, p = setup
    p = dict(p, **{"fv.embed.W": np.zeros_like(p["fv.embed.W"])})
    a = encode_image(np.zeros((cfg.patches, cfg.patch_dim)), p, cfg)[0].data
    b = encode_image(np.ones((cfg.patches, cfg.patch_dim)), p, cfg)[0].data
    assert np.array_equal(a, b)


def test_patch_permutation_without_positions(f64):
    cfg = micro_config(pos_encoding=False)
    p = init_encoder_params(cfg, np.random.default_rng(3))
    x = np.random.default_rng(4).standard_normal((cfg.patches, cfg.patch_dim))
    perm = np.array([2, 0, 3, 1])
    a = encode_image(x, p, cfg)[0].data
    b = encode_image(x[perm], p, cfg)[0].data
    assert np.allclose(a, b, atol=1e-12)


def test_repeated_token_rows_differ_only_by_position(f64):
    cfg = micro_config(pos_encoding=False)
    p = init_encoder_params(cfg, np.random.default_rng(5))
    _, S, _ = encode_text(np.array([0, 4, 4, 4]), p, cfg)
    assert np.allclose(S.data[0, 1:], S.data[0, 1], atol=1e-12)


def test_minimal_text_length(setup):
    cfg, p = setup
    t, S, _ = encode_text(np.array([0, 1]), p, cfg)
    assert np.all(np.isfinite(t.data)) and S.shape == (1, 2, cfg.dim)


def test_projection_is_unit_norm_and_deterministic(setup):
    cfg, p = setup
    rng = np.random.default_rng(6)
    v = rng.standard_normal((5, cfg.dim))
    v[1] = v[0]
    vs, ts = project_global(v, rng.standard_normal((5, cfg.dim)), p, cfg)
    assert np.allclose(np.linalg.norm(vs.data, axis=1), 1.0, atol=1e-9)
    assert np.allclose(np.linalg.norm(ts.data, axis=1), 1.0, atol=1e-9)
    assert np.array_equal(vs.data[0], vs.data[1])


def test_input_validation(setup):
    cfg, p = setup
    with pytest.raises(ValueError):
        ImageSample(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        TextSample(np.array([0]))
    with pytest.raises(ValueError):
        encode_image(np.zeros((4, 5)), p, cfg)
    with pytest.raises(ValueError):
        encode_text(np.array([0, cfg.vocab_size]), p, cfg)


def test_encoder_gradients_pass_gradcheck(setup):
    cfg, p = setup
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, cfg.patches, cfg.patch_dim))
    y = np.array([[0, 1, 2, 3], [0, 4, 5, 6]])
    target = rng.standard_normal((2, cfg.dim))

    def loss(q):
        v, _, _ = encode_image(x, q, cfg)
        t, _, _ = encode_text(y, q, cfg)
        vs, ts = project_global(v, t, q, cfg)
        return ((vs * target).sum() + (ts * target).sum() * 0.5)

    pv = {k: ag.Var(v, requires_grad=True) for k, v in p.items()}
    loss(pv).backward()
    grads = {k: v.grad if v.grad is not None else np.zeros_like(v.data) for k, v in pv.items()}
    rep = nm.finite_diff_gradcheck(lambda q: loss(q).item(), p, grads, max_entries=3, rng=np.random.default_rng(0))
    assert rep.passed, rep.summary()


# random transform --------------------------------------------------------------
def test_identity_configuration():
    x = np.random.default_rng(8).standard_normal((16, 8))
    out = random_transform(x, np.random.default_rng(0), noise=0.0, scale_range=(1.0, 1.0), flip=False)
    assert np.array_equal(out, x)


def test_flip_is_an_involution():
    x = np.random.default_rng(9).standard_normal((16, 8))
    kw = dict(noise=0.0, scale_range=(1.0, 1.0), flip=True)
    once = random_transform(x, np.random.default_rng(0), **kw)
    assert not np.array_equal(once, x)
    assert np.array_equal(random_transform(once, np.random.default_rng(0), **kw), x)


@given(st.integers(0, 2**31))
def test_transform_replays_under_seed(seed):
    x = np.random.default_rng(10).standard_normal((3, 16, 8))
    a = random_transform(x, np.random.default_rng(seed))
    b = random_transform(x, np.random.default_rng(seed))
    assert np.array_equal(a, b) and a.shape == x.shape
