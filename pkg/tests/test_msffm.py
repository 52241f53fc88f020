import numpy as np
import pytest

from priordetr.autodiff import Tensor, finite_diff_check
from priordetr.autodiff import spectral as S
from priordetr.msffm import (
    DBFFM,
    MSFFM,
    FrequencyBranch,
    PAConv,
    PaConvConfig,
    SpatialBranch,
    adaptive_fuse,
    aggregate,
)

CFG = PaConvConfig()


def rand(*shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).normal(scale=scale, size=shape)


# -- PAConv -----------------------------------------------------------------

def test_config_invariants():
    assert CFG.D == 36
    with pytest.raises(ValueError):
        PaConvConfig(K_p=3, K_a=3)


def test_perception_constant_input_constant_map():
    m = PAConv(8, CFG, rng=np.random.default_rng(0))
    # translation invariance only holds away from the zero-padded border
    w = m.perception(Tensor(np.full((1, 8, 16, 16), 0.7))).data
    assert w.shape == (1, 16, 16, 36)
    inner = w[0, 3:-3, 3:-3]
    assert np.abs(inner - inner[0, 0]).max() < 1e-12


def test_perception_gradient():
    m = PAConv(4, PaConvConfig(G=2), rng=np.random.default_rng(1))
    assert finite_diff_check(lambda t: (m.perception(t) ** 2).sum(), rand(1, 4, 5, 5)) < 1e-5


def delta_map(n, h, w, cfg):
    k = np.zeros((cfg.K_a, cfg.K_a))
    k[cfg.K_a // 2, cfg.K_a // 2] = 1
    return np.broadcast_to(np.tile(k.ravel(), cfg.G), (n, h, w, cfg.D)).copy()


def test_aggregate_delta_is_identity():
    x = rand(2, 8, 6, 5)
    out = aggregate(Tensor(x), Tensor(delta_map(2, 6, 5, CFG)), CFG).data
    np.testing.assert_array_equal(out, x)


def test_aggregate_uniform_is_local_mean():
    x = rand(1, 4, 6, 6, seed=1)
    wm = np.full((1, 6, 6, CFG.D), 1 / 9)
    out = aggregate(Tensor(x), Tensor(wm), CFG).data
    for i in range(1, 5):
        for j in range(1, 5):
            np.testing.assert_allclose(out[0, :, i, j], x[0, :, i - 1:i + 2, j - 1:j + 2].mean((1, 2)),
                                       atol=1e-14)


def test_aggregate_matches_scalar_loop():
    cfg = PaConvConfig(G=2)
    x = rand(1, 4, 4, 5, seed=2)
    wm = rand(1, 4, 5, cfg.D, seed=3)
    out = aggregate(Tensor(x), Tensor(wm), cfg).data
    r = cfg.K_a // 2
    for c in range(4):
        g = c // 2
        for i in range(4):
            for j in range(5):
                acc = 0.0
                for a in range(cfg.K_a):
                    for b in range(cfg.K_a):
                        ii, jj = i + a - r, j + b - r
                        if 0 <= ii < 4 and 0 <= jj < 5:
                            acc += wm[0, i, j, g * 9 + a * 3 + b] * x[0, c, ii, jj]
                assert abs(out[0, c, i, j] - acc) < 1e-12


def test_aggregate_rejects_bad_map():
    with pytest.raises(ValueError, match="weight map"):
        aggregate(Tensor(rand(1, 4, 3, 3)), Tensor(np.zeros((1, 3, 3, 10))), CFG)


# -- spatial branch ---------------------------------------------------------

def test_spatial_zeroed_is_identity():
    m = SpatialBranch(8, CFG, rng=np.random.default_rng(2))
    m.zero_residuals()
    x = rand(2, 8, 5, 5, seed=4)
    np.testing.assert_array_equal(m(Tensor(x)).data, x)


def test_se_gate_one_is_identity():
    m = SpatialBranch(8, CFG, rng=np.random.default_rng(3))
    x = Tensor(rand(2, 8, 4, 4, seed=5))
    np.testing.assert_array_equal(m.se(x, gate=Tensor(np.ones((2, 8)))).data, x.data)


def test_spatial_gradient():
    m = SpatialBranch(4, PaConvConfig(G=2), rng=np.random.default_rng(4))
    assert finite_diff_check(lambda t: (m(t) ** 2).sum(), rand(1, 4, 4, 4, seed=6)) < 1e-5


# -- FFT --------------------------------------------------------------------

def test_fft_roundtrip_and_parseval():
    x = rand(2, 3, 7, 6, seed=7)
    spec = S.fft2(Tensor(x))
    assert np.abs(S.ifft2(spec).data - x).max() < 1e-10
    energy = (spec.data ** 2).sum() / (7 * 6)
    assert abs((x ** 2).sum() - energy) < 1e-8 * max(1.0, energy)


def test_fft_constant_is_dc_only():
    spec = S.fft2(Tensor(np.full((1, 1, 4, 4), 2.5))).data
    assert abs(spec[0, 0, 0, 0, 0] - 40.0) < 1e-10
    spec[0, 0, 0, 0] = 0
    assert np.abs(spec).max() < 1e-10


def test_fft_cosine_two_bins():
    W = 8
    x = np.tile(np.cos(2 * np.pi * np.arange(W) / W), (4, 1))[None, None]
    amp = np.hypot(*np.moveaxis(S.fft2(Tensor(x)).data[0, 0], -1, 0))
    nz = np.argwhere(amp > 1e-10)
    assert nz.tolist() == [[0, 1], [0, W - 1]]


# -- frequency branch -------------------------------------------------------

def test_frequency_passthrough_identity():
    m = FrequencyBranch(6, rng=np.random.default_rng(5)).eval()
    x = rand(2, 6, 8, 8, seed=8)
    out = m(Tensor(x)).data
    assert np.abs(out - x).max() < 1e-5
    # Parseval under the identity filter
    assert abs((out ** 2).sum() - (x ** 2).sum()) < 1e-6


def test_frequency_dc_only_gives_channel_mean():
    m = FrequencyBranch(3, rng=np.random.default_rng(6)).eval()
    x = rand(1, 3, 6, 6, seed=9)
    spec = S.fft2(Tensor(x))
    amp = S.complex_abs(spec).data.copy()
    amp[..., 1:, :] = 0
    amp[..., 0, 1:] = 0
    out = S.ifft2(S.phase_unit(spec) * Tensor(amp[..., None])).data
    np.testing.assert_allclose(out, np.broadcast_to(x.mean(axis=(2, 3), keepdims=True), x.shape),
                               atol=1e-12)


def test_frequency_gradient():
    rng = np.random.default_rng(7)
    m = FrequencyBranch(2, rng=rng).eval()
    m.conv.weight.data += rng.normal(scale=0.1, size=m.conv.weight.shape)
    x = rand(1, 2, 4, 5, seed=10)
    assert finite_diff_check(lambda t: (m(t) ** 2).sum(), x) < 1e-4


def test_frequency_large_input_stays_real():
    m = FrequencyBranch(4, rng=np.random.default_rng(8)).eval()
    m.conv.weight.data = np.random.default_rng(9).normal(size=m.conv.weight.shape)
    x = rand(1, 4, 8, 8, seed=11, scale=1e6)
    out = m(Tensor(x)).data
    assert np.isfinite(out).all()


def test_float32_spectrum_passes_residue_check():
    x = rand(2, 4, 8, 8, seed=12, scale=50).astype(np.float32)
    m = FrequencyBranch(4, rng=np.random.default_rng(10)).to(np.float32).eval()
    assert m(Tensor(x)).dtype == np.float32


def test_ifft_rejects_non_hermitian():
    spec = np.zeros((1, 1, 4, 4, 2))
    spec[0, 0, 1, 0, 1] = 1.0
    with pytest.raises(FloatingPointError, match="residue"):
        S.ifft2(Tensor(spec))


# -- fusion -----------------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_fuse_endpoints(seed):
    s, f = Tensor(rand(2, 3, 4, seed=seed)), Tensor(rand(2, 3, 4, seed=seed + 10))
    assert np.array_equal(adaptive_fuse(s, f, Tensor(np.array(1.0))).data, s.data)
    assert np.array_equal(adaptive_fuse(s, f, Tensor(np.array(0.0))).data, f.data)
    assert np.array_equal(adaptive_fuse(s, s, Tensor(np.array(0.5))).data, s.data)


def test_fuse_shape_mismatch():
    with pytest.raises(ValueError, match="shapes differ"):
        adaptive_fuse(Tensor(np.zeros(3)), Tensor(np.zeros(4)), Tensor(np.array(0.5)))


def test_dbffm_alpha_init():
    assert DBFFM(4, PaConvConfig(G=2)).alpha.data == 0.5


def test_msffm_identity_pyramid():
    m = MSFFM(8, cfg=CFG, rng=np.random.default_rng(11)).eval()
    for blk in m.blocks:
        blk.spatial.zero_residuals()
    pyr = [Tensor(rand(1, 8, s, s, seed=s)) for s in (16, 8, 4)]
    out = m(pyr)
    for a, b in zip(pyr, out):
        assert a.shape == b.shape
        assert np.abs(a.data - b.data).max() < 1e-5


def test_msffm_gradient():
    cfg = PaConvConfig(G=2)
    m = MSFFM(8, levels=1, cfg=cfg, rng=np.random.default_rng(12)).eval()
    x = rand(1, 8, 16, 16, seed=13)
    w = rand(1, 8, 16, 16, seed=14)
    err = finite_diff_check(lambda t: (m([t])[0] * Tensor(w)).sum(), x, max_coords=60)
    assert err < 1e-4
