import numpy as np
import pytest

from attrdet import tensor as T
from attrdet.encoder import (
    Encoder, EncoderUnit, MSDeformAttn, encode, init_text_embedding, reference_points, sine_pos_embed,
    update_text_embedding,
)
from attrdet.gradcheck import check_gradients
from attrdet.nn import zeros
from attrdet.ops import ms_deform_sample
from attrdet.pyramid import ConfigError, LinearProjection, ResProjection, build_pyramid, project_pyramid
from attrdet.tensor import Tensor, precision


@pytest.fixture
def rng():
    return np.random.default_rng(3)


def bilinear_ref(fmap, x, y):
    """Plain-loop bilinear sample of a (C, H, W) map at normalised (x, y)."""
    c, h, w = fmap.shape
    px, py = x * w - 0.5, y * h - 0.5
    x0, y0 = int(np.floor(px)), int(np.floor(py))
    out = np.zeros(c)
    for yy, wy in ((y0, 1 - (py - y0)), (y0 + 1, py - y0)):
        for xx, wx in ((x0, 1 - (px - x0)), (x0 + 1, px - x0)):
            if 0 <= yy < h and 0 <= xx < w:
                out += wy * wx * fmap[:, yy, xx]
    return out


def msda_brute_force(value, shapes, loc, aw):
    s, m, d = value.shape
    q, _, n_lvl, k, _ = loc.shape
    starts = np.concatenate([[0], np.cumsum([h * w for h, w in shapes])])
    out = np.zeros((q, m, d))
    for qi in range(q):
        for mi in range(m):
            for li, (h, w) in enumerate(shapes):
                fmap = value[starts[li]:starts[li + 1], mi].T.reshape(d, h, w)
                for ki in range(k):
                    x, y = loc[qi, mi, li, ki]
                    out[qi, mi] += aw[qi, mi, li, ki] * bilinear_ref(fmap, x, y)
    return out.reshape(q, m * d)


# -- position embedding ------------------------------------------------------------

def test_pos_embed_origin_pattern():
    e = sine_pos_embed(1, 1, 16)[0]
    np.testing.assert_array_equal(e, np.tile([0.0, 1.0], 8))


def test_pos_embed_separable():
    e = sine_pos_embed(6, 9, 32).reshape(6, 9, 32)
    diff = e[2, 7] - e[2, 3]
    assert np.all(diff[:16] == 0) and np.any(diff[16:] != 0)
    assert np.all(np.abs(e) <= 1.0)


def test_pos_embed_similarity_decays():
    e = sine_pos_embed(16, 16, 64).reshape(16, 16, 64)
    dots = [float(e[8, 8] @ e[8, 8 + d]) for d in (0, 1, 3, 7)]
    assert dots == sorted(dots, reverse=True)


def test_pos_embed_needs_multiple_of_four():
    with pytest.raises(ValueError):
        sine_pos_embed(2, 2, 6)


# -- deformable attention -------------------------------------------------------------

def test_ms_deform_sample_matches_brute_force(rng):
    shapes = [(3, 4), (5, 2), (2, 2)]
    s = sum(h * w for h, w in shapes)
    value = rng.normal(size=(s, 2, 3))
    loc = rng.uniform(-0.1, 1.1, size=(5, 2, 3, 4, 2))
    aw = rng.uniform(size=(5, 2, 3, 4))
    got = ms_deform_sample(Tensor(value), shapes, Tensor(loc), Tensor(aw)).data
    np.testing.assert_allclose(got, msda_brute_force(value, shapes, loc, aw), atol=1e-5)


def test_msda_zero_init_averages_reference_samples(rng):
    shapes = [(4, 4), (2, 2)]
    attn = MSDeformAttn(rng, 8, 2, 2, 3)
    attn.sampling_offsets.bias = zeros(attn.sampling_offsets.bias.shape)
    value = Tensor(rng.normal(size=(20, 8)))
    query = Tensor(rng.normal(size=(3, 8)))
    ref = rng.uniform(0.1, 0.9, size=(3, 2))
    got = attn(query, ref, value, shapes).data
    v = attn.value_proj(value).data.astype(np.float64)
    expected = np.zeros((3, 8))
    for qi in range(3):
        samples = [bilinear_ref(v[a:b].T.reshape(8, h, w), *ref[qi])
                   for (a, b), (h, w) in zip([(0, 16), (16, 20)], shapes)]
        expected[qi] = np.mean(samples, axis=0)
    expected = expected @ attn.output_proj.weight.data.T + attn.output_proj.bias.data
    np.testing.assert_allclose(got, expected, rtol=1e-4, atol=1e-5)


def test_msda_single_point_reads_reference_value(rng):
    attn = MSDeformAttn(rng, 4, 1, 1, 1)
    attn.sampling_offsets.bias = zeros(attn.sampling_offsets.bias.shape)
    for lin in (attn.value_proj, attn.output_proj):
        lin.weight.data[:] = np.eye(4)
        lin.bias.data[:] = 0
    value = Tensor(rng.normal(size=(12, 4)))
    ref = reference_points(3, 4)[[5]]
    out = attn(Tensor(rng.normal(size=(1, 4))), ref, value, [(3, 4)]).data
    np.testing.assert_allclose(out[0], value.data[5], rtol=1e-5)


def test_msda_weights_normalised(rng):
    attn = MSDeformAttn(rng, 8, 2, 3, 4)
    attn.attention_weights.weight.data[:] = rng.normal(size=attn.attention_weights.weight.shape)
    q = Tensor(rng.normal(size=(5, 8)))
    aw = T.softmax(attn.attention_weights(q).reshape(5, 2, 12), axis=-1).data
    assert np.all(aw >= 0)
    np.testing.assert_allclose(aw.sum(-1), 1.0, atol=1e-6)


def test_msda_query_permutation(rng):
    attn = MSDeformAttn(rng, 8, 2, 1, 2)
    attn.sampling_offsets.weight.data[:] = rng.normal(size=attn.sampling_offsets.weight.shape) * 0.1
    value = Tensor(rng.normal(size=(16, 8)))
    q = rng.normal(size=(6, 8))
    ref = rng.uniform(size=(6, 2))
    perm = rng.permutation(6)
    a = attn(Tensor(q), ref, value, [(4, 4)]).data
    b = attn(Tensor(q[perm]), ref[perm], value, [(4, 4)]).data
    np.testing.assert_allclose(b, a[perm], rtol=1e-5, atol=1e-6)


# -- encoder and text embedding ---------------------------------------------------------

def tiny_feats(rng, dim=8, size=32):
    proj = ResProjection(rng, dim, 3)
    return proj, project_pyramid(build_pyramid(rng.uniform(size=(3, size, size)), stride=16), proj)


def test_zero_units_identity(rng):
    _, feats = tiny_feats(rng)
    enc = encode(Encoder(rng, 8, 3, units=0, heads=2, points=2), feats)
    np.testing.assert_array_equal(enc.tokens.data, T.concat([lv.tokens for lv in feats.levels]).data)


def test_encode_preserves_shapes(rng):
    proj = ResProjection(rng, 16, 3)
    feats = project_pyramid(build_pyramid(rng.uniform(size=(3, 64, 64))), proj)
    enc = encode(Encoder(rng, 16, 3, units=2, heads=4, points=2), feats)
    assert enc.shapes == [(2, 2), (4, 4), (8, 8)]
    for i, lv in enumerate(feats.levels):
        assert enc.level(i).shape == lv.tokens.shape


def test_encoder_gradient(rng):
    with precision(np.float64):
        _, feats = tiny_feats(rng)
        encoder = Encoder(rng, 8, 3, units=2, heads=2, points=2)
        for unit in encoder.units:
            w = unit.attn.sampling_offsets.weight
            w.data[:] = rng.normal(size=w.shape) * 0.05
        x = [Tensor(lv.tokens.data, requires_grad=True) for lv in feats.levels]
        wts = Tensor(rng.normal(size=(sum(t.shape[0] for t in x), 8)))

        def fn():
            for lv, t in zip(feats.levels, x):
                lv.tokens = t
            return (encode(encoder, feats).tokens * wts).sum()

        errs = check_gradients(fn, x + encoder.parameters(), max_entries=8)
    assert max(errs.values()) <= 1e-4


def test_text_embedding_dims_and_zero_image(rng):
    proj = ResProjection(rng, 16, 3)
    encoder = Encoder(rng, 16, 3, units=1, heads=4, points=2, early_channels=4)
    pyr = build_pyramid(np.zeros((3, 64, 48)))
    emb = init_text_embedding(encoder, project_pyramid(pyr, proj))
    h3, w3 = pyr.levels[-1].size
    assert emb.grid == (h3 // 4, w3 // 4)
    e = emb.tokens.data
    np.testing.assert_allclose(e, np.broadcast_to(e[0], e.shape), atol=1e-6)


def test_text_embedding_needs_early_map(rng):
    encoder = Encoder(rng, 16, 3, units=1, heads=4, points=2)
    feats = project_pyramid(build_pyramid(rng.uniform(size=(3, 64, 64))), LinearProjection(rng, 16))
    with pytest.raises(ConfigError):
        init_text_embedding(encoder, feats)


def test_update_with_zero_output_is_identity(rng):
    proj = ResProjection(rng, 16, 3)
    encoder = Encoder(rng, 16, 3, units=1, heads=4, points=2, early_channels=4)
    feats = project_pyramid(build_pyramid(rng.uniform(size=(3, 64, 64))), proj)
    emb = init_text_embedding(encoder, feats)
    enc = encode(encoder, feats)
    encoder.text_attn.output_proj.weight.data[:] = 0
    encoder.text_attn.output_proj.bias.data[:] = 0
    out = update_text_embedding(encoder, emb, enc)
    assert out.grid == emb.grid
    np.testing.assert_array_equal(out.tokens.data, emb.tokens.data)


def test_encoder_unit_changes_tokens(rng):
    unit = EncoderUnit(rng, 8, 2, 1, 2)
    x = Tensor(rng.normal(size=(16, 8)))
    out = unit(x, sine_pos_embed(4, 4, 8), reference_points(4, 4), [(4, 4)])
    assert out.shape == x.shape and not np.allclose(out.data, x.data)
