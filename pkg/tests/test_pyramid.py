import numpy as np
import pytest

from attrdet.gradcheck import check_gradients
from attrdet.pyramid import (
    ConfigError, ConvProjection, LinearProjection, ResProjection, build_pyramid, make_projection, project_pyramid,
)
from attrdet.tensor import Tensor, precision


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def test_default_scales_sizes(rng):
    pyr = build_pyramid(rng.uniform(size=(3, 64, 64)))
    assert [lv.size for lv in pyr.levels] == [(32, 32), (64, 64), (128, 128)]


def test_single_scale_identical(rng):
    img = rng.uniform(size=(3, 48, 64)).astype(np.float32)
    (lv,) = build_pyramid(img, scales=(1.0,)).levels
    assert lv.image.tobytes() == img.tobytes()


def test_padding_to_stride(rng):
    pyr = build_pyramid(rng.uniform(size=(3, 50, 70)), stride=16)
    for lv in pyr.levels:
        h, w = lv.size
        assert h % 16 == 0 and w % 16 == 0
        ch, cw = lv.content
        assert np.all(lv.image[:, ch:, :] == 0) and np.all(lv.image[:, :, cw:] == 0)


def test_too_small_image():
    with pytest.raises(ValueError):
        build_pyramid(np.zeros((3, 8, 40)))


# -- linear patches ------------------------------------------------------------------

def test_linear_patch_counts(rng):
    proj = LinearProjection(rng, 64, 16)
    feats = proj(Tensor(rng.uniform(size=(3, 32, 32))))
    assert feats.tokens.shape == (4, 64)
    assert proj.proj.weight.shape == (64, 768)


def test_linear_constant_image_tokens_identical(rng):
    proj = LinearProjection(rng, 16, 16)
    tok = proj(Tensor(np.full((3, 48, 32), 0.3))).tokens.data
    np.testing.assert_allclose(tok, np.broadcast_to(tok[0], tok.shape), rtol=1e-6)


def test_linear_patch_matches_hand_loop(rng):
    proj = LinearProjection(rng, 8, 16)
    img = rng.uniform(size=(3, 32, 48))
    tok = proj(Tensor(img)).tokens.data
    w, b = proj.proj.weight.data.astype(np.float64), proj.proj.bias.data
    for r in range(2):
        for c in range(3):
            patch = np.array([img[ch, 16 * r + i, 16 * c + j] for ch in range(3) for i in range(16) for j in range(16)])
            np.testing.assert_allclose(tok[r * 3 + c], w @ patch + b, rtol=1e-4, atol=1e-5)


def test_linear_indivisible(rng):
    with pytest.raises(ValueError):
        LinearProjection(rng, 8, 16)(Tensor(np.zeros((3, 40, 32))))


# -- conv / residual -----------------------------------------------------------------

def test_conv_token_grid_matches_linear(rng):
    img = Tensor(rng.uniform(size=(3, 64, 64)))
    conv = ConvProjection(rng, 16)(img)
    lp = LinearProjection(rng, 16)(img)
    assert conv.grid == (4, 4) and conv.tokens.shape == lp.tokens.shape


def test_conv_stack_gradient(rng):
    with precision(np.float64):
        proj = ConvProjection(rng, 8)
        img = Tensor(rng.uniform(size=(3, 16, 16)), requires_grad=True)
        wts = Tensor(rng.normal(size=(1, 8)))
        params = [img] + proj.parameters()
        errs = check_gradients(lambda: (proj(img).tokens * wts).sum(), params, max_entries=12)
    assert max(errs.values()) <= 1e-5


def test_res_default_stride_and_early_map(rng):
    proj = ResProjection(rng, 16, 3)
    assert proj.stride == 16
    out = proj(Tensor(rng.uniform(size=(3, 64, 64))))
    assert out.grid == (4, 4)
    assert out.early_map.shape == (4, 32, 32)


def test_res_zero_scale_gives_skip_path(rng):
    proj = ResProjection(rng, 16, 3)
    last = proj.blocks[-1]
    last.scale.data[:] = 0
    x = Tensor(rng.normal(size=(16, 8, 8)))
    np.testing.assert_array_equal(last(x).data, last.skip(x).data)


def test_res_block_count_changes_stride(rng):
    img = Tensor(rng.uniform(size=(3, 64, 64)))
    n2 = ResProjection(rng, 16, 2)(img).tokens.shape[0]
    n3 = ResProjection(rng, 16, 3)(img).tokens.shape[0]
    assert n2 == 4 * n3


def test_res_block_range(rng):
    with pytest.raises(ConfigError):
        make_projection("res", rng, 16, res_blocks=5)
    with pytest.raises(ConfigError):
        make_projection("nope", rng, 16)


# -- shared weights across levels ------------------------------------------------------

def test_project_pyramid_shares_parameters(rng):
    proj = ResProjection(rng, 16, 3)
    ids = {id(p) for p in proj.parameters()}
    pyr = build_pyramid(rng.uniform(size=(3, 64, 64)))
    feats = project_pyramid(pyr, proj)
    assert len(feats.levels) == 3
    assert {id(p) for p in proj.parameters()} == ids
    assert feats.num_tokens == sum(h * w for h, w in feats.shapes) == 4 + 16 + 64


def test_constant_image_same_tokens_across_levels(rng):
    proj = LinearProjection(rng, 16, 16)
    feats = project_pyramid(build_pyramid(np.full((3, 64, 64), 0.6)), proj)
    ref = feats.levels[0].tokens.data[0]
    for lv in feats.levels:
        np.testing.assert_allclose(lv.tokens.data, np.broadcast_to(ref, lv.tokens.shape), rtol=1e-5)


def test_brightness_scales_first_conv(rng):
    proj = ResProjection(rng, 16, 3)
    img = rng.uniform(size=(3, 32, 32))
    a = proj.stem.conv(Tensor(img)).data
    b = proj.stem.conv(Tensor(2 * img)).data
    np.testing.assert_allclose(b, 2 * a, rtol=1e-5, atol=1e-6)
