"""Prior-guided deformable sampling (Prior DCN) and the SDFPR block.

Offsets are predicted per position, group and kernel point, rescaled by a
learned radius, then stretched by shape factors drawn from the geometry
prior and clamped to a prior-dependent box before bilinear sampling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import gmm
from .autodiff import functional as F
from .autodiff.tensor import Tensor
from .gmm import GmmPrior2D, PriorFactors
from .nn import Conv2d, DropPath, LayerNorm, Linear, Module, zero_


@dataclass
class SdfprConfig:
    K: int = 9
    S_max: float = 2.0
    groups: int = 4
    keep_prob: float = 1.0
    mlp_ratio: int = 4
    use_prior: bool = True
    straight_through: bool = False

    def __post_init__(self):
        if self.K < 1 or math.isqrt(self.K) ** 2 != self.K:
            raise ValueError(f"K must be a positive square (1, 9, 25, ...), got {self.K}")
        if not self.S_max > 0:
            raise ValueError(f"S_max must be positive, got {self.S_max}")
        if self.groups < 1:
            raise ValueError(f"groups must be >= 1, got {self.groups}")


@dataclass
class OffsetField:
    """Offsets at each stage, all (N, L, G, K, 2) in (x, y) pixels."""

    raw: np.ndarray
    base: np.ndarray
    modulated: np.ndarray
    final: np.ndarray
    scale_logits: np.ndarray
    bound_x: np.ndarray
    bound_y: np.ndarray


def kernel_grid(K: int) -> np.ndarray:
    """Canonical (K, 2) grid of (x, y) points centered at 0, row-major."""
    k = math.isqrt(K)
    if k * k != K:
        raise ValueError(f"K must be a perfect square, got {K}")
    r = np.arange(k) - (k - 1) / 2
    yy, xx = np.meshgrid(r, r, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=-1)


def compute_base_offsets(pred: Tensor, scale_logits: Tensor, grid: np.ndarray,
                         S_max: float) -> Tensor:
    """(pred + grid) * sigmoid(scale) * S_max.

    ``pred`` is (..., K, 2); ``scale_logits`` broadcasts against it, usually
    (..., 1, 1).
    """
    g = Tensor(np.asarray(grid, dtype=pred.dtype))
    return (pred + g) * F.sigmoid(scale_logits) * S_max


def _factor_arrays(factors: PriorFactors, dtype):
    # (G,) factors broadcast over (N, L, G, K)
    w = np.asarray(factors.w_tilde, dtype=dtype)
    r = np.asarray(factors.r_tilde, dtype=dtype)
    if not (np.isfinite(w).all() and np.isfinite(r).all() and (w > 0).all() and (r > 0).all()):
        raise ValueError("prior factors must be finite and positive")
    return w[..., None], r[..., None]


def modulate_and_clamp(base: Tensor, factors: PriorFactors, S_max: float,
                       straight_through: bool = False, return_stages: bool = False):
    """Stretch offsets by the prior factors and clamp to the prior box.

    x is scaled by w~ and y by w~ r~; the box is |x| <= w~ S_max and
    |y| <= w~ r~ S_max.  ``factors`` arrays broadcast against base[..., 0].
    """
    w, r = _factor_arrays(factors, base.dtype)
    scale = np.stack(np.broadcast_arrays(w, w * r), axis=-1)
    bound = scale * S_max
    mod = base * Tensor(scale)
    final = F.clamp(mod, -bound, bound, straight_through=straight_through)
    if return_stages:
        return final, mod, bound
    return final


def scalar_bilinear(img: np.ndarray, x: float, y: float) -> float:
    """Four-corner bilinear read of a 2-D map with zero padding."""
    h, w = img.shape
    x0, y0 = math.floor(x), math.floor(y)
    total = 0.0
    for yy, wy in ((y0, 1 - (y - y0)), (y0 + 1, y - y0)):
        for xx, wx in ((x0, 1 - (x - x0)), (x0 + 1, x - x0)):
            if 0 <= yy < h and 0 <= xx < w:
                total += wy * wx * img[yy, xx]
    return total


class PriorDCN(Module):
    """Deformable 'conv' over NLC tokens with prior-modulated offsets.

    Heads start at zero so the block initially samples the plain kernel grid
    (scaled by sigmoid(0) * S_max) with uniform point weights.
    """

    def __init__(self, channels: int, cfg: SdfprConfig = SdfprConfig(),
                 prior: Optional[GmmPrior2D] = None, rng: Optional[np.random.Generator] = None,
                 seed: int = 0):
        super().__init__()
        if channels % cfg.groups:
            raise ValueError(f"channels {channels} not divisible by groups {cfg.groups}")
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.cfg = cfg
        self.channels = channels
        G, K = cfg.groups, cfg.K
        self.offset_head = Linear(channels, G * K * 2, rng=rng)
        self.scale_head = Linear(channels, G, rng=rng)
        self.weight_head = Linear(channels, G * K, rng=rng)
        for lin in (self.offset_head, self.scale_head, self.weight_head):
            zero_(lin.weight)
            zero_(lin.bias)
        self.out_proj = Linear(channels, channels, rng=rng)
        self._grid = kernel_grid(K)
        self._prior = prior if cfg.use_prior else None
        self._rng = np.random.default_rng(seed)
        self.last_offsets: Optional[OffsetField] = None

    def draw_factors(self) -> Optional[PriorFactors]:
        """One factor pair per group: sampled in training, mixture mean in eval."""
        prior = self._prior
        if prior is None:
            return None
        G = self.cfg.groups
        if self.training:
            s = gmm.sample(prior, self._rng, G)
        else:
            s = np.repeat(prior.mixture_mean()[None], G, axis=0)
        return gmm.normalize_factors(s[:, 0], s[:, 1], prior.w_ref)

    def forward(self, x: Tensor, H: int, W: int,
                factors: Optional[PriorFactors] = None, modulate: bool = True) -> Tensor:
        n, L, C = x.shape
        if L != H * W:
            raise ValueError(f"sequence length {L} != H*W = {H}*{W}")
        cfg = self.cfg
        G, K = cfg.groups, cfg.K
        raw = self.offset_head(x).reshape(n, L, G, K, 2)
        s_logit = self.scale_head(x).reshape(n, L, G, 1, 1)
        base = compute_base_offsets(raw, s_logit, self._grid, cfg.S_max)
        if factors is None and modulate:
            factors = self.draw_factors()
        if factors is not None and modulate:
            final, mod, bound = modulate_and_clamp(base, factors, cfg.S_max,
                                                   cfg.straight_through, return_stages=True)
            self.last_offsets = OffsetField(raw.data, base.data, mod.data, final.data,
                                            s_logit.data, bound[..., 0], bound[..., 1])
        else:
            final = base
        attn = F.softmax(self.weight_head(x).reshape(n, L, G, K), axis=-1)

        ys, xs = np.divmod(np.arange(L), W)
        p0 = np.stack([xs, ys], axis=-1).astype(x.dtype)[None, :, None, None, :]
        loc = final + Tensor(p0)                               # N, L, G, K, 2
        loc = loc.permute(0, 2, 1, 3, 4).reshape(n, G, L * K, 2)
        feat = x.permute(0, 2, 1).reshape(n, C, H, W)
        sampled = F.bilinear_sample(feat, loc)                 # N, C, L*K
        sampled = sampled.reshape(n, G, C // G, L, K)
        a = attn.permute(0, 2, 1, 3).reshape(n, G, 1, L, K)
        agg = (sampled * a).sum(axis=-1)                       # N, G, Cg, L
        agg = agg.reshape(n, C, L).permute(0, 2, 1)
        return self.out_proj(agg)


def prior_dcn_forward(module: PriorDCN, x: Tensor, H: int, W: int,
                      prior: Optional[GmmPrior2D] = None) -> Tensor:
    """Run ``module`` with factors drawn from ``prior`` (or its own prior)."""
    factors = None
    if prior is not None:
        s = gmm.sample(prior, module._rng, module.cfg.groups) if module.training else \
            np.repeat(prior.mixture_mean()[None], module.cfg.groups, axis=0)
        factors = gmm.normalize_factors(s[:, 0], s[:, 1], prior.w_ref)
    return module(x, H, W, factors=factors)


class MixFFN(Module):
    """LN -> Linear -> 3x3 depth-wise conv -> GELU -> Linear, on NLC tokens."""

    def __init__(self, channels: int, ratio: int = 4, rng: Optional[np.random.Generator] = None):
        super().__init__()
        hidden = channels * ratio
        self.norm = LayerNorm(channels)
        self.fc1 = Linear(channels, hidden, rng=rng)
        self.dw = Conv2d(hidden, hidden, 3, padding=1, groups=hidden, rng=rng)
        self.fc2 = Linear(hidden, channels, rng=rng)

    def forward(self, x: Tensor, H: int, W: int) -> Tensor:
        n, L, _ = x.shape
        h = self.fc1(self.norm(x))
        c = h.shape[-1]
        h = self.dw(h.permute(0, 2, 1).reshape(n, c, H, W))
        h = F.gelu(h.reshape(n, c, L).permute(0, 2, 1))
        return self.fc2(h)


class SDFPR(Module):
    """Prior DCN and Mix FFN, each wrapped in a residual with DropPath."""

    def __init__(self, channels: int, cfg: SdfprConfig = SdfprConfig(),
                 prior: Optional[GmmPrior2D] = None, rng: Optional[np.random.Generator] = None,
                 seed: int = 0):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.norm = LayerNorm(channels)
        self.dcn = PriorDCN(channels, cfg, prior, rng=rng, seed=seed)
        self.ffn = MixFFN(channels, cfg.mlp_ratio, rng=rng)
        self.drop1 = DropPath(cfg.keep_prob, seed=seed + 1)
        self.drop2 = DropPath(cfg.keep_prob, seed=seed + 2)

    def forward(self, x: Tensor, H: int, W: int) -> Tensor:
        x = x + self.drop1(self.dcn(self.norm(x), H, W))
        return x + self.drop2(self.ffn(x, H, W))

    def forward_nchw(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        t = x.reshape(n, c, h * w).permute(0, 2, 1)
        t = self(t, h, w)
        return t.permute(0, 2, 1).reshape(n, c, h, w)


def sdfpr_forward(block: SDFPR, x: Tensor, H: int, W: int) -> Tensor:
    return block(x, H, W)
