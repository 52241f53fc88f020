import numpy as np
import pytest

from priordetr import gmm
from priordetr.autodiff import Tensor, finite_diff_check
from priordetr.autodiff import functional as F
from priordetr.gmm import PriorFactors
from oracles import brute_force_forward, randomize_heads, sig
from priordetr.prior_dcn import (
    SDFPR,
    PriorDCN,
    SdfprConfig,
    compute_base_offsets,
    kernel_grid,
    modulate_and_clamp,
    prior_dcn_forward,
    scalar_bilinear,
)


# -- base offsets -----------------------------------------------------------

def test_base_offsets_zero_pred():
    grid = kernel_grid(9)
    base = compute_base_offsets(Tensor(np.zeros((9, 2))), Tensor(np.zeros((1, 1))), grid, 4.0)
    np.testing.assert_array_equal(base.data, grid * 2)


def test_base_offsets_collapse():
    grid = kernel_grid(9)
    base = compute_base_offsets(Tensor(np.ones((9, 2))), Tensor(np.full((1, 1), -800.0)), grid, 4.0)
    assert np.abs(base.data).max() == 0.0


def test_base_offsets_match_scalar_loop():
    rng = np.random.default_rng(0)
    pred = rng.normal(size=(3, 9, 2))
    s = rng.normal(size=(3, 1, 1))
    grid = kernel_grid(9)
    got = compute_base_offsets(Tensor(pred), Tensor(s), grid, 3.0).data
    for i in range(3):
        for k in range(9):
            for d in range(2):
                want = (pred[i, k, d] + grid[k, d]) * sig(s[i, 0, 0]) * 3.0
                assert abs(got[i, k, d] - want) < 1e-12


def test_kernel_grid():
    assert kernel_grid(1).tolist() == [[0.0, 0.0]]
    g = kernel_grid(9)
    assert g[0].tolist() == [-1, -1] and g[1].tolist() == [0, -1] and g[4].tolist() == [0, 0]
    with pytest.raises(ValueError):
        kernel_grid(8)


# -- modulate / clamp -------------------------------------------------------

def test_neutral_prior_is_identity():
    rng = np.random.default_rng(1)
    base = Tensor(rng.uniform(-4, 4, (5, 9, 2)))
    out = modulate_and_clamp(base, PriorFactors(np.float64(1.0), np.float64(1.0)), 4.0)
    np.testing.assert_array_equal(out.data, base.data)


def test_modulation_substitution_cases():
    # x: 3.0 * 0.5 = 1.5 within 2.0; y: 10 * 0.5 * 0.8 = 4.0 clamped to 1.6
    base = Tensor(np.array([[3.0, 10.0]]))
    out = modulate_and_clamp(base, PriorFactors(np.float64(0.8), np.float64(0.5)), 4.0)
    assert out.data[0, 0] == 1.5
    assert abs(out.data[0, 1] - 1.6) < 1e-15


def test_clamp_gradient_zero_outside():
    base = Tensor(np.array([[3.0, 10.0]]), requires_grad=True)
    out = modulate_and_clamp(base, PriorFactors(np.float64(0.8), np.float64(0.5)), 4.0)
    out.sum().backward()
    assert base.grad.tolist() == [[0.5, 0.0]]
    base.grad = None
    out = modulate_and_clamp(base, PriorFactors(np.float64(0.8), np.float64(0.5)), 4.0,
                             straight_through=True)
    out.sum().backward()
    assert base.grad[0, 1] == 0.4


def test_clamp_invariant_property_sweep():
    rng = np.random.default_rng(2)
    violations = 0
    for _ in range(1000):
        prior = gmm.random_prior(rng)
        s = gmm.sample(prior, rng, 4)
        f = gmm.normalize_factors(s[:, 0], s[:, 1], w_ref=float(np.exp(rng.uniform(1, 3))))
        base = Tensor(rng.normal(scale=5, size=(3, 4, 9, 2)))
        out = modulate_and_clamp(base, f, 2.0).data
        violations += int((np.abs(out[..., 0]) > f.w_tilde[:, None] * 2.0).sum())
        violations += int((np.abs(out[..., 1]) > (f.w_tilde * f.r_tilde)[:, None] * 2.0).sum())
    assert violations == 0


def test_anisotropy_direction():
    rng = np.random.default_rng(3)
    field = rng.normal(scale=3, size=(20, 9, 1))
    sym = np.concatenate([field, field], axis=-1)  # x <-> y symmetric
    f = PriorFactors(np.float64(0.6), np.float64(1.2))
    out = modulate_and_clamp(Tensor(sym), f, 2.0).data
    assert np.abs(out[..., 1]).max() <= np.abs(out[..., 0]).max()


# -- bilinear sampling -------------------------------------------------------

def test_bilinear_integer_locations_gather():
    rng = np.random.default_rng(4)
    feat = rng.normal(size=(1, 2, 4, 5))
    loc = np.array([[[[0, 0], [4, 3], [2, 1]]]], dtype=float)
    out = F.bilinear_sample(Tensor(feat), Tensor(loc)).data
    np.testing.assert_array_equal(out[0, :, 1], feat[0, :, 3, 4])
    np.testing.assert_array_equal(out[0, :, 2], feat[0, :, 1, 2])


def test_bilinear_patch_center():
    feat = np.arange(4.0).reshape(1, 1, 2, 2)
    out = F.bilinear_sample(Tensor(feat), Tensor(np.array([[[[0.5, 0.5]]]])))
    assert out.data.item() == 1.5


def test_bilinear_random_vs_scalar_and_fd():
    rng = np.random.default_rng(5)
    feat = rng.normal(size=(1, 2, 5, 6))
    loc = rng.uniform(-1.5, 6.5, size=(1, 1, 12, 2))
    out = F.bilinear_sample(Tensor(feat), Tensor(loc)).data
    for c in range(2):
        for p in range(12):
            want = scalar_bilinear(feat[0, c], loc[0, 0, p, 0], loc[0, 0, p, 1])
            assert abs(out[0, c, p] - want) < 1e-12
    # stay off integer kinks for the location gradient
    loc = np.floor(loc) + rng.uniform(0.1, 0.9, size=loc.shape)
    err = finite_diff_check(lambda l: F.bilinear_sample(Tensor(feat), l).sum(), loc)
    assert err < 1e-5


# -- full forward -----------------------------------------------------------

def test_identity_configuration():
    cfg = SdfprConfig(K=1, groups=2)
    m = PriorDCN(4, cfg)
    m.out_proj.weight.data = np.eye(4)
    m.out_proj.bias.data[:] = 0
    x = Tensor(np.random.default_rng(6).normal(size=(2, 12, 4)))
    np.testing.assert_allclose(m(x, 3, 4).data, x.data, atol=1e-15)


def test_zero_heads_give_local_average():
    m = PriorDCN(4, SdfprConfig(groups=1, S_max=2.0))
    m.out_proj.weight.data = np.eye(4)
    m.out_proj.bias.data[:] = 0
    x = np.random.default_rng(7).normal(size=(1, 25, 4))
    out = m(Tensor(x), 5, 5, modulate=False).data
    img = x[0].reshape(5, 5, 4)
    # interior position (2, 2): mean of the 3x3 neighbourhood
    np.testing.assert_allclose(out[0, 12], img[1:4, 1:4].mean(axis=(0, 1)), atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_brute_force(seed):
    rng = np.random.default_rng(10 + seed)
    H, W = 5, 5
    m = PriorDCN(4, SdfprConfig(groups=2, S_max=2.0), rng=rng)
    randomize_heads(m, rng)
    x = rng.normal(size=(1, H * W, 4))
    w_t, r_t = rng.uniform(0.3, 1.5, 2), rng.uniform(0.4, 2.5, 2)
    got = m(Tensor(x), H, W, factors=PriorFactors(r_t, w_t)).data[0]
    want = brute_force_forward(m, x, H, W, w_t, r_t)
    assert np.abs(got - want).max() < 1e-10


def test_forward_rejects_bad_length():
    m = PriorDCN(4, SdfprConfig(groups=2))
    with pytest.raises(ValueError, match="H\\*W"):
        m(Tensor(np.zeros((1, 10, 4))), 3, 4)


def test_prior_neutrality_bitwise():
    rng = np.random.default_rng(8)
    m = PriorDCN(8, SdfprConfig(groups=4, S_max=2.0), rng=rng)
    randomize_heads(m, rng, scale=0.05)
    x = Tensor(rng.normal(size=(1, 16, 8)))
    one = np.ones(4)
    a = m(x, 4, 4, factors=PriorFactors(one, one)).data
    assert np.abs(m.last_offsets.base).max() <= 2.0
    b = m(x, 4, 4, modulate=False).data
    assert np.array_equal(a, b)


def test_forward_clamp_invariant_with_prior():
    rng = np.random.default_rng(9)
    m = PriorDCN(4, SdfprConfig(groups=2), rng=rng)
    for _ in range(200):
        randomize_heads(m, rng, scale=3.0)
        prior = gmm.random_prior(rng)
        prior_dcn_forward(m, Tensor(rng.normal(size=(1, 9, 4))), 3, 3, prior)
        off = m.last_offsets
        assert (np.abs(off.final[..., 0]) <= off.bound_x).all()
        assert (np.abs(off.final[..., 1]) <= off.bound_y).all()


def test_eval_uses_mixture_mean():
    prior = gmm.random_prior(np.random.default_rng(10))
    m = PriorDCN(4, SdfprConfig(groups=2), prior=prior).eval()
    f1, f2 = m.draw_factors(), m.draw_factors()
    np.testing.assert_array_equal(f1.w_tilde, f2.w_tilde)
    mean = prior.mixture_mean()
    assert f1.r_tilde[0] == np.clip(mean[0], 0.2, 5.0)


# -- SDFPR block ------------------------------------------------------------

def test_sdfpr_zeroed_is_identity():
    blk = SDFPR(8, SdfprConfig(groups=4, keep_prob=1.0), seed=1)
    for lin in (blk.dcn.out_proj, blk.ffn.fc2):
        lin.weight.data[:] = 0
        lin.bias.data[:] = 0
    x = Tensor(np.random.default_rng(11).normal(size=(2, 12, 8)))
    np.testing.assert_array_equal(blk(x, 3, 4).data, x.data)


def test_sdfpr_eval_deterministic():
    prior = gmm.random_prior(np.random.default_rng(12))
    blk = SDFPR(8, SdfprConfig(groups=4, keep_prob=0.8), prior=prior, seed=2).eval()
    x = Tensor(np.random.default_rng(13).normal(size=(2, 12, 8)))
    np.testing.assert_array_equal(blk(x, 3, 4).data, blk(x, 3, 4).data)


def test_sdfpr_gradient():
    rng = np.random.default_rng(14)
    prior = gmm.random_prior(rng)
    blk = SDFPR(4, SdfprConfig(groups=2, mlp_ratio=2), prior=prior, rng=rng).eval()
    randomize_heads(blk.dcn, rng, scale=0.2)
    x = rng.normal(size=(1, 9, 4))
    assert finite_diff_check(lambda t: (blk(t, 3, 3) ** 2).sum(), x) < 1e-5
    assert finite_diff_check(lambda t: (blk(Tensor(x), 3, 3) ** 2).sum(),
                             blk.dcn.offset_head.weight.data,
                             params=[blk.dcn.offset_head.weight]) < 1e-5
