import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hallo.attention import cross_attention
from hallo.hadvs import HadvsConfig, fuse, hadvs_forward, split_by_region
from hallo.maskgen import LandmarkSet, RegionMasks, derive_region_masks
from hallo.tensor import ShapeError, Tensor, add_n, check_gradients, hadamard, tensor_sum

H = W = 4
D = 6


def _masks(seed=0):
    rng = np.random.default_rng(seed)
    lip = tuple(map(tuple, rng.uniform(0, 32, size=(3, 2))))
    exp = tuple(map(tuple, rng.uniform(0, 32, size=(4, 2))))
    return derive_region_masks(LandmarkSet(lip, exp, (32, 32)), (H, W))


def _setup(seed, fusion="zero_convolution", branches=("pose", "exp", "lip"), weights=(1.0, 1.0, 1.0)):
    rng = np.random.default_rng(seed)
    cfg = HadvsConfig.init(D, 5, rng, fusion=fusion, branches=branches, region_weights=weights)
    z = Tensor(rng.normal(size=(H * W, D)))
    c = Tensor(rng.normal(size=(3, 5)))
    return cfg, z, c, rng


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_pose_plus_exp_is_attention_output(seed):
    cfg, z, c, _ = _setup(seed)
    out = hadvs_forward(z, c, _masks(seed), cfg)
    assert np.array_equal(out.b.data + out.f.data, out.o.data)
    assert np.array_equal(out.o.data, cross_attention(z, c, cfg.attn).data)


def test_lip_part_lies_inside_pose_part():
    cfg, z, c, _ = _setup(1)
    out = hadvs_forward(z, c, _masks(1), cfg)
    lip_sites = _masks(1).m_lip.reshape(-1) == 1
    assert np.array_equal(out.l.data[lip_sites], out.b.data[lip_sites])
    assert not out.l.data[~lip_sites].any()


def test_zero_convolution_starts_silent():
    cfg, z, c, _ = _setup(2)
    assert not hadvs_forward(z, c, _masks(2), cfg).fused.data.any()


def test_zero_weights_nullify_direct_addition():
    cfg, z, c, _ = _setup(3, fusion="direct_addition", weights=(0.0, 0.0, 0.0))
    assert not hadvs_forward(z, c, _masks(3), cfg).fused.data.any()


def test_direct_addition_unit_weights():
    cfg, z, c, _ = _setup(4, fusion="direct_addition")
    out = hadvs_forward(z, c, _masks(4), cfg)
    assert np.allclose(out.fused.data, out.b.data + out.f.data + out.l.data, atol=1e-15)


def test_weights_follow_lip_exp_pose_order():
    cfg, z, c, _ = _setup(5, fusion="direct_addition", weights=(2.0, 0.0, 0.0))
    out = hadvs_forward(z, c, _masks(5), cfg)
    assert np.allclose(out.fused.data, 2 * out.l.data, atol=1e-15)


def test_full_branch_only():
    cfg, z, c, _ = _setup(6, fusion="direct_addition", branches=("full",))
    out = hadvs_forward(z, c, _masks(6), cfg)
    assert np.array_equal(out.fused.data, out.o.data)


def test_full_only_masks_route_everything_to_pose():
    cfg, z, c, _ = _setup(7)
    out = hadvs_forward(z, c, RegionMasks.full_only((H, W)), cfg)
    assert np.array_equal(out.b.data, out.o.data) and not out.f.data.any() and not out.l.data.any()


def test_self_attention_fusion_shape_and_weighting():
    cfg, z, c, _ = _setup(8, fusion="self_attention")
    out = hadvs_forward(z, c, _masks(8), cfg)
    assert out.fused.shape == (H * W, D)
    silent = hadvs_forward(z, c, _masks(8), cfg.with_weights((0.0, 0.0, 0.0)))
    assert not silent.fused.data.any()


def test_fuse_shape_mismatch():
    cfg, *_ = _setup(0, fusion="direct_addition")
    a = Tensor(np.ones((4, D)))
    with pytest.raises(ShapeError):
        fuse(a, a, Tensor(np.ones((5, D))), cfg)
    with pytest.raises(ValueError, match="full"):
        fuse(a, a, a, HadvsConfig("direct_addition", branches=("full", "lip")))


@pytest.mark.parametrize("bad", [dict(fusion="sum"), dict(region_weights=(1.0, -1.0, 0.0)),
                                 dict(region_weights=(1.0, 1.0)), dict(branches=("mouth",)), dict(branches=())])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        HadvsConfig(**bad)


def test_mask_size_mismatch():
    cfg, z, c, _ = _setup(0)
    with pytest.raises(ShapeError):
        hadvs_forward(z, c, RegionMasks.full_only((2, 2)), cfg)


def test_batched_masks_align_with_batch():
    cfg, _, c, rng = _setup(9, fusion="direct_addition")
    z = Tensor(rng.normal(size=(2, H * W, D)))
    m = RegionMasks.stack([_masks(1), _masks(2)])
    cb = Tensor(np.stack([c.data, c.data]))
    out = hadvs_forward(z, cb, m, cfg)
    for i, mi in enumerate((_masks(1), _masks(2))):
        single = hadvs_forward(Tensor(z.data[i]), c, mi, cfg)
        assert np.allclose(out.fused.data[i], single.fused.data, atol=1e-14)


@pytest.mark.parametrize("fusion", ["direct_addition", "zero_convolution", "self_attention"])
def test_gradients(fusion):
    cfg, z, c, rng = _setup(10, fusion=fusion, weights=(1.5, 0.7, 0.3))
    for p in cfg.convs.values():
        p.weight.data[...] = rng.normal(size=p.weight.shape)
    w = Tensor(rng.normal(size=(H * W, D)))
    masks = _masks(10)

    def f(_):
        return tensor_sum(hadamard(hadvs_forward(z, c, masks, cfg).fused, w))

    for t in [z, c] + cfg.parameters():
        assert check_gradients(f, t, coords=12, rng=rng) < 1e-5
