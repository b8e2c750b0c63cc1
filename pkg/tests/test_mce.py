import numpy as np
import pytest

from mct import functional as F
from mct.data import HsiCube, extract_patch
from mct.mce import MCE, MceConfig, conv_len, spectral_partition, usable_bands
from mct.nn import Context
from mct.tensor import ShapeError, Tape, Tensor, tsum


def toy_mce(iie=True, **kw):
    args = dict(bands=12, patch=9, groups=2, ks=3, ss=1, c1=3, c2=4, d_model=16, iie_enabled=iie)
    args.update(kw)
    return MceConfig(**args)


def test_partition_204_into_4():
    x = np.arange(204.0)[None, None, :].repeat(3, 0).repeat(3, 1)
    slabs = spectral_partition(x, 4)
    assert [s.shape[-1] for s in slabs] == [51] * 4
    assert [s[0, 0, 0] for s in slabs] == [0.0, 51.0, 102.0, 153.0]
    assert np.concatenate(slabs, axis=-1).tobytes() == x.tobytes()


def test_partition_identity_and_patch_input():
    cube = HsiCube(np.random.default_rng(0).normal(size=(5, 5, 6)).astype(np.float32))
    p = extract_patch(cube, 2, 2, 3)
    (only,) = spectral_partition(p, 1)
    np.testing.assert_array_equal(only, p.values)
    with pytest.raises(ShapeError):
        spectral_partition(p, 4)


def test_usable_bands_crops_with_log(caplog):
    assert usable_bands(204, 4) == 204
    with caplog.at_level("WARNING"):
        assert usable_bands(206, 4) == 204
    assert "cropping 2" in caplog.text


def test_spectral_length_arithmetic():
    assert conv_len(51, 7, 2) == 23
    assert conv_len(23, 7, 2) == 9
    cfg = MceConfig(bands=204)
    assert (cfg.subband, cfg.spectral_mid, cfg.spectral_out) == (51, 23, 9)
    assert cfg.site_features == 4 * 16 * 9
    assert MceConfig(bands=180).spectral_out == conv_len(conv_len(45, 7, 2), 7, 2)


def test_config_validation():
    with pytest.raises(ValueError):
        MceConfig(bands=13, groups=2)
    with pytest.raises(ValueError):
        MceConfig(bands=12, patch=8)
    with pytest.raises(ValueError):
        MceConfig(bands=12, patch=3)
    with pytest.raises(ValueError):
        MceConfig(bands=16, groups=4, ks=7, ss=2)  # 4-band subbands cannot hold a 7-tap kernel


def test_default_shape_w9_d64():
    """Full default configuration on Salinas band count: 25 tokens of width 64, center 12."""
    cfg = MceConfig(bands=204)
    mce = MCE(cfg, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(2, 9, 9, 204))
    seq = mce(x, Context(training=True))
    assert seq.tokens.shape == (2, 25, 64)
    assert seq.grid == (5, 5)
    assert seq.center_index == 12
    assert mce.spce(x, Context(training=True)).shape == (2, 25, 64)


def test_iie_crop_grid_and_center(rng):
    cfg = toy_mce()
    mce = MCE(cfg, rng)
    x = rng.normal(size=(9, 9, 12))
    out = mce.iie_branch(x).data[0]
    assert out.shape == (25, 16)
    # token 12 of the IIE branch is the patch center pixel
    np.testing.assert_allclose(out[12], x[4, 4] @ mce.iie.weight.data + mce.iie.bias.data, atol=1e-12)
    # identical spectra give identical embeddings
    x[2, 2] = x[2, 3]
    out = mce.iie_branch(x).data[0]
    np.testing.assert_array_equal(out[0], out[1])


def test_ablation_and_zero_iie_equivalence(rng):
    x = rng.normal(size=(3, 9, 9, 12))
    with_iie = MCE(toy_mce(True), np.random.default_rng(7))
    without = MCE(toy_mce(False), np.random.default_rng(7))
    ctx = Context(training=True)
    np.testing.assert_array_equal(without(x, ctx).tokens.data, without.spce(x, ctx).data)
    with_iie.iie.weight.data[:] = 0.0
    with_iie.iie.bias.data[:] = 0.0
    np.testing.assert_array_equal(with_iie(x, ctx).tokens.data, without(x, ctx).tokens.data)


def test_fusion_is_branch_sum(rng):
    mce = MCE(toy_mce(), rng)
    x = rng.normal(size=(2, 9, 9, 12))
    ctx = Context(training=True)
    total = mce(x, ctx).tokens.data
    np.testing.assert_allclose(total, mce.spce(x, ctx).data + mce.iie_branch(x).data, atol=1e-12)


def test_all_parameters_get_nonzero_gradient(rng):
    mce = MCE(toy_mce(), rng)
    x = rng.normal(size=(2, 9, 9, 12))
    w = Tensor(rng.normal(size=(2, 25, 16)))
    with Tape() as tape:
        loss = tsum(mce(x, Context(training=True)).tokens * w)
    tape.backward(loss)
    for name, p in mce.named_parameters():
        assert np.abs(p.grad).max() > 0, name


def test_group_isolation(rng):
    """Group-0 first-stage outputs ignore bands owned by group 1."""
    cfg = toy_mce()
    mce = MCE(cfg, rng)
    x = rng.normal(size=(9, 9, 12))
    moved = x.copy()
    moved[..., 6:] += 1.0

    def stage1(inp):
        v = Tensor(inp).transpose(2, 0, 1).reshape(1, 2, 6, 9, 9)
        return F.conv3d_grouped(v, mce.conv1_weight, None, 2).data

    a, b = stage1(x), stage1(moved)
    np.testing.assert_array_equal(a[:, :cfg.c1], b[:, :cfg.c1])
    assert not np.array_equal(a[:, cfg.c1:], b[:, cfg.c1:])


def test_wrong_patch_shape(rng):
    mce = MCE(toy_mce(), rng)
    with pytest.raises(ShapeError):
        mce(np.zeros((1, 7, 7, 12)))
