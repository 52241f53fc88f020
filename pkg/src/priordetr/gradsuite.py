"""Finite-difference checks for every differentiable op and block, at float64."""
from __future__ import annotations

import time
from typing import Callable, List, NamedTuple, Optional

import numpy as np

from .autodiff import Tensor, finite_diff_check
from .autodiff import functional as F
from .autodiff import spectral as S
from .detection import focal_loss, giou_tensor, total_loss
from .gmm import GmmPrior2D
from .msffm import DBFFM, FrequencyBranch, PaConvConfig, aggregate
from .nn import BatchNorm, Conv2d, LayerNorm, Linear
from .prior_dcn import SDFPR, SdfprConfig
from .transformer import DecoderLayer, DFIAggregator, EncoderLayer, MultiheadAttention

TOLERANCE = 1e-4


class GradResult(NamedTuple):
    name: str
    error: float
    seconds: float
    passed: bool


def _r(seed, *shape, scale=1.0):
    return np.random.default_rng(seed).normal(scale=scale, size=shape)


def _weighted(out: Tensor, seed: int) -> Tensor:
    # random projection so that no symmetry hides a wrong adjoint
    return (out * Tensor(_r(seed, *out.shape))).sum()


def _unit_prior():
    return GmmPrior2D(np.array([0.6, 0.4]), np.array([[1.0, np.log(3.0)], [0.7, np.log(5.0)]]),
                      np.array([np.eye(2) * 0.01] * 2), w_ref=4.0)


def case_conv():
    conv = Conv2d(3, 4, 3, stride=2, padding=1, rng=np.random.default_rng(0))
    return finite_diff_check(lambda x: _weighted(conv(x), 1), _r(2, 2, 3, 6, 5),
                             params=conv.parameters())


def case_depthwise_conv():
    conv = Conv2d(4, 4, 3, padding=1, groups=4, rng=np.random.default_rng(1))
    return finite_diff_check(lambda x: _weighted(conv(x), 2), _r(3, 1, 4, 5, 5),
                             params=conv.parameters())


def case_linear():
    lin = Linear(5, 3, rng=np.random.default_rng(2))
    return finite_diff_check(lambda x: _weighted(lin(x), 3), _r(4, 2, 4, 5), params=lin.parameters())


def case_layer_norm():
    ln = LayerNorm(6)
    ln.weight.data[...] = _r(5, 6)
    return finite_diff_check(lambda x: _weighted(ln(x), 4), _r(6, 3, 6), params=ln.parameters())


def case_batch_norm():
    bn = BatchNorm(3)
    return finite_diff_check(lambda x: _weighted(bn(x), 5), _r(7, 4, 3, 2, 2), params=bn.parameters())


def case_activations():
    def f(x):
        return _weighted(F.gelu(x) + F.sigmoid(x) * F.tanh(x) + F.softmax(x, axis=-1), 6)
    return finite_diff_check(f, _r(8, 3, 5))


def case_attention():
    attn = MultiheadAttention(8, 2, rng=np.random.default_rng(3))
    return finite_diff_check(lambda q, k: _weighted(attn(q, k, k), 7),
                             [_r(9, 1, 3, 8), _r(10, 1, 5, 8)], params=attn.parameters(),
                             max_coords=40)


def case_bilinear_sample():
    loc = np.random.default_rng(11).uniform(-1.2, 5.2, size=(2, 3, 7, 2))
    # keep sample points off integer grid lines where bilinear is not differentiable
    loc = np.where(np.abs(loc - np.round(loc)) < 0.05, loc + 0.1, loc)
    return finite_diff_check(lambda f, l: _weighted(F.bilinear_sample(f, l), 8),
                             [_r(12, 2, 6, 4, 5), loc])


def case_unfold_aggregate():
    cfg = PaConvConfig(G=2)
    return finite_diff_check(lambda x, w: _weighted(aggregate(x, w, cfg), 9),
                             [_r(13, 1, 4, 4, 4), _r(14, 1, 4, 4, cfg.D)])


def case_fft():
    def f(x):
        spec = S.fft2(x)
        amp = S.complex_abs(spec)
        return _weighted(S.ifft2(S.phase_unit(spec) * (amp * amp).reshape(*amp.shape, 1)), 10)
    return finite_diff_check(f, _r(15, 1, 2, 4, 5))


def case_frequency_branch():
    m = FrequencyBranch(3, rng=np.random.default_rng(4)).eval()
    m.conv.weight.data += _r(16, *m.conv.weight.shape, scale=0.2)
    return finite_diff_check(lambda x: _weighted(m(x), 11), _r(17, 1, 3, 4, 4),
                             params=m.parameters())


def case_focal():
    t = (np.random.default_rng(18).random((4, 3)) < 0.3).astype(float)
    return finite_diff_check(lambda x: focal_loss(x, t, reduction="sum"), _r(19, 4, 3, scale=2))


def case_giou():
    gt = np.array([[0.5, 0.5, 0.3, 0.2], [0.3, 0.6, 0.2, 0.4], [0.7, 0.3, 0.1, 0.1]])
    pred = gt + _r(20, 3, 4, scale=0.05)
    return finite_diff_check(lambda b: giou_tensor(b, gt).sum(), pred)


def case_detection_loss():
    targets = [{"boxes": np.array([[0.5, 0.5, 0.3, 0.2]]), "labels": np.array([1])},
               {"boxes": np.array([[0.3, 0.6, 0.2, 0.4], [0.7, 0.3, 0.15, 0.1]]),
                "labels": np.array([0, 1])}]
    logits = _r(21, 2, 4, 2)
    boxes = np.clip(0.5 + _r(22, 2, 4, 4, scale=0.1), 0.1, 0.9)
    _, _, matches = total_loss(Tensor(logits), Tensor(boxes), targets)
    return finite_diff_check(lambda l, b: total_loss(l, b, targets, matches=matches)[0],
                             [logits, boxes])


def case_sdfpr():
    cfg = SdfprConfig(groups=2, mlp_ratio=2)
    blk = SDFPR(4, cfg, _unit_prior(), rng=np.random.default_rng(5)).eval()
    rng = np.random.default_rng(23)
    for head in (blk.dcn.offset_head, blk.dcn.scale_head, blk.dcn.weight_head):
        head.weight.data[...] = rng.normal(scale=0.3, size=head.weight.shape)
    return finite_diff_check(lambda x: _weighted(blk(x, 4, 4), 12), _r(24, 1, 16, 4),
                             params=blk.parameters(), max_coords=30)


def case_dbffm():
    blk = DBFFM(4, PaConvConfig(G=2), rng=np.random.default_rng(6)).eval()
    return finite_diff_check(lambda x: _weighted(blk(x), 13), _r(25, 1, 4, 6, 6),
                             params=blk.parameters(), max_coords=30)


def case_encoder_decoder():
    enc = EncoderLayer(8, 2, 2, rng=np.random.default_rng(7))
    dec = DecoderLayer(8, 2, 2, rng=np.random.default_rng(8))

    def f(m, q):
        mem = enc(m)
        return _weighted(dec(q, mem, mem), 14)
    return finite_diff_check(f, [_r(26, 1, 5, 8), _r(27, 1, 3, 8)], max_coords=40)


def case_dfi():
    agg = DFIAggregator(3, 4)
    rng = np.random.default_rng(28)
    for g in agg.gammas:
        g.weight.data[...] = rng.normal(size=g.weight.shape)
    return finite_diff_check(lambda a, b, c: sum(_weighted(m, 15 + i) for i, m in
                                                 enumerate(agg([a, b, c]))),
                             [_r(29, 1, 2, 4), _r(30, 1, 2, 4), _r(31, 1, 2, 4)],
                             params=agg.parameters())


CASES: List[tuple] = [
    ("conv2d", case_conv),
    ("conv2d_depthwise", case_depthwise_conv),
    ("linear", case_linear),
    ("layer_norm", case_layer_norm),
    ("batch_norm", case_batch_norm),
    ("activations", case_activations),
    ("attention", case_attention),
    ("bilinear_sample", case_bilinear_sample),
    ("paconv_aggregate", case_unfold_aggregate),
    ("fft_roundtrip", case_fft),
    ("frequency_branch", case_frequency_branch),
    ("focal_loss", case_focal),
    ("giou_loss", case_giou),
    ("detection_loss", case_detection_loss),
    ("sdfpr_block", case_sdfpr),
    ("dbffm_block", case_dbffm),
    ("encoder_decoder", case_encoder_decoder),
    ("dfi_aggregate", case_dfi),
]


def run(tol: float = TOLERANCE, only: Optional[List[str]] = None,
        report: Optional[Callable[[GradResult], None]] = None) -> List[GradResult]:
    results = []
    for name, fn in CASES:
        if only and name not in only:
            continue
        t0 = time.time()
        err = float(fn())
        res = GradResult(name, err, time.time() - t0, err < tol)
        results.append(res)
        if report:
            report(res)
    return results
