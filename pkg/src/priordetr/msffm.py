"""Multi-scale spatial-frequency fusion over a 3-level feature pyramid.

Each level goes through a dual-branch block: a spatial branch built around a
perception-aggregation convolution (PAConv), and a frequency branch that
filters the amplitude spectrum while keeping the phase.  The two are mixed
by a learnable scalar.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .autodiff import functional as F
from .autodiff import spectral as S
from .autodiff.tensor import Tensor
from .nn import BatchNorm, Conv2d, Linear, Module, Parameter, zero_


@dataclass
class PaConvConfig:
    K_p: int = 7
    K_a: int = 3
    G: int = 4
    embed_ratio: float = 0.25

    def __post_init__(self):
        if self.K_p <= self.K_a:
            raise ValueError(f"K_p ({self.K_p}) must exceed K_a ({self.K_a})")
        if self.K_a % 2 == 0 or self.K_p % 2 == 0:
            raise ValueError("kernel sizes must be odd")
        if self.G < 1:
            raise ValueError(f"G must be >= 1, got {self.G}")

    @property
    def D(self) -> int:
        return self.G * self.K_a * self.K_a


class PAConv(Module):
    """Perception stage emits per-position kernels; aggregation applies them."""

    def __init__(self, channels: int, cfg: PaConvConfig = PaConvConfig(),
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if channels % cfg.G:
            raise ValueError(f"channels {channels} not divisible by G={cfg.G}")
        embed = max(1, int(round(channels * cfg.embed_ratio)))
        self.cfg = cfg
        self.reduce = Conv2d(channels, embed, 1, rng=rng)
        self.dw = Conv2d(embed, embed, cfg.K_p, padding=cfg.K_p // 2, groups=embed, rng=rng)
        self.pw1 = Conv2d(embed, embed, 1, rng=rng)
        self.pw2 = Conv2d(embed, cfg.D, 1, rng=rng)

    def perception(self, x: Tensor) -> Tensor:
        h = self.dw(self.reduce(x))
        h = self.pw2(F.gelu(self.pw1(h)))
        return h.permute(0, 2, 3, 1)            # N, H, W, D

    def forward(self, x: Tensor) -> Tensor:
        return aggregate(x, self.perception(x), self.cfg)


def perception(module: PAConv, x: Tensor) -> Tensor:
    return module.perception(x)


def aggregate(x: Tensor, wmap: Tensor, cfg: PaConvConfig) -> Tensor:
    """Grouped dynamic convolution with per-position K_a x K_a kernels.

    ``wmap`` is (N, H, W, D) with D = G * K_a^2; the channels of group g all
    use kernel g.  Borders are zero padded.
    """
    n, c, h, w = x.shape
    k2 = cfg.K_a * cfg.K_a
    if wmap.shape != (n, h, w, cfg.D):
        raise ValueError(f"weight map must be {(n, h, w, cfg.D)}, got {wmap.shape}")
    if c % cfg.G:
        raise ValueError(f"channels {c} not divisible by G={cfg.G}")
    cols = F.unfold(x, cfg.K_a, padding=cfg.K_a // 2)          # N, C, k2, H, W
    cols = cols.reshape(n, cfg.G, c // cfg.G, k2, h, w)
    kern = wmap.permute(0, 3, 1, 2).reshape(n, cfg.G, 1, k2, h, w)
    return (cols * kern).sum(axis=3).reshape(n, c, h, w)


class SqueezeExcite(Module):
    """Channel gate 2*sigmoid(.) from pooled features; 1 when the logits are 0."""

    def __init__(self, channels: int, reduction: int = 4,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(channels, hidden, rng=rng)
        self.fc2 = Linear(hidden, channels, rng=rng)

    def gate(self, x: Tensor) -> Tensor:
        pooled = x.mean(axis=(2, 3))
        return F.sigmoid(self.fc2(F.relu(self.fc1(pooled)))) * 2.0

    def forward(self, x: Tensor, gate: Optional[Tensor] = None) -> Tensor:
        g = self.gate(x) if gate is None else gate
        n, c = g.shape
        return x * g.reshape(n, c, 1, 1)


class SpatialBranch(Module):
    """PAConv -> depth-wise conv -> SE gate -> conv FFN, each with a skip."""

    def __init__(self, channels: int, cfg: PaConvConfig = PaConvConfig(),
                 ffn_ratio: int = 2, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.paconv = PAConv(channels, cfg, rng=rng)
        self.dw = Conv2d(channels, channels, 3, padding=1, groups=channels, rng=rng)
        self.se = SqueezeExcite(channels, rng=rng)
        self.ffn1 = Conv2d(channels, channels * ffn_ratio, 1, rng=rng)
        self.ffn2 = Conv2d(channels * ffn_ratio, channels, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.paconv(x)
        x = x + self.dw(x)
        x = self.se(x)
        return x + self.ffn2(F.gelu(self.ffn1(x)))

    def zero_residuals(self) -> None:
        """Zero every non-skip path so the branch is the identity."""
        for p in (self.paconv.pw2.weight, self.paconv.pw2.bias, self.dw.weight,
                  self.dw.bias, self.se.fc2.weight, self.se.fc2.bias,
                  self.ffn2.weight, self.ffn2.bias):
            zero_(p)


class FrequencyBranch(Module):
    """Amplitude filter in the Fourier domain; the phase is kept exactly.

    amplitude -> 1x1 conv -> batch norm -> ReLU, then recombined with the
    unit phasor and inverted.  ``passthrough_init`` makes the filter the
    identity in eval mode.  The amplitude is nonnegative, so the ReLU is
    already inactive at that point and needs no bias shift.
    """

    def __init__(self, channels: int, rng: Optional[np.random.Generator] = None,
                 passthrough_init: bool = True):
        super().__init__()
        self.conv = Conv2d(channels, channels, 1, rng=rng)
        self.bn = BatchNorm(channels)
        if passthrough_init:
            self.conv.weight.data[...] = np.eye(channels)[:, :, None, None]
            zero_(self.conv.bias)
            # running var chosen so that BN(a) == a exactly in eval
            self.bn.running_var[...] = 1.0 - self.bn.eps

    def filter_amplitude(self, amp: Tensor) -> Tensor:
        return F.relu(self.bn(self.conv(amp)))

    def forward(self, x: Tensor, return_spectra: bool = False):
        spec = S.fft2(x)
        amp = S.complex_abs(spec)
        phase = S.phase_unit(spec)
        new_amp = self.filter_amplitude(amp)
        out = S.ifft2(phase * new_amp.reshape(*new_amp.shape, 1))
        if return_spectra:
            return out, amp.data, new_amp.data
        return out


def adaptive_fuse(s: Tensor, f: Tensor, alpha: Tensor) -> Tensor:
    """alpha * s + (1 - alpha) * f."""
    if s.shape != f.shape:
        raise ValueError(f"branch shapes differ: {s.shape} vs {f.shape}")
    return alpha * s + (1.0 - alpha) * f


class DBFFM(Module):
    def __init__(self, channels: int, cfg: PaConvConfig = PaConvConfig(),
                 rng: Optional[np.random.Generator] = None, use_frequency: bool = True,
                 use_spatial: bool = True):
        super().__init__()
        self.spatial = SpatialBranch(channels, cfg, rng=rng)
        self.frequency = FrequencyBranch(channels, rng=rng)
        self.alpha = Parameter(np.array(0.5))
        self.use_frequency = use_frequency
        self.use_spatial = use_spatial

    def forward(self, x: Tensor) -> Tensor:
        s = self.spatial(x) if self.use_spatial else x
        f = self.frequency(x) if self.use_frequency else x
        return adaptive_fuse(s, f, self.alpha)


class MSFFM(Module):
    """Independent dual-branch block per pyramid level."""

    def __init__(self, channels: int, levels: int = 3, cfg: PaConvConfig = PaConvConfig(),
                 rng: Optional[np.random.Generator] = None, **kw):
        super().__init__()
        self.blocks = [DBFFM(channels, cfg, rng=rng, **kw) for _ in range(levels)]

    def forward(self, pyramid: Sequence[Tensor]) -> List[Tensor]:
        if len(pyramid) != len(self.blocks):
            raise ValueError(f"expected {len(self.blocks)} levels, got {len(pyramid)}")
        for a, b in zip(pyramid[:-1], pyramid[1:]):
            if a.shape[2] != 2 * b.shape[2] and a.shape[2] != 2 * b.shape[2] - 1:
                raise ValueError(f"levels not at 2x scale steps: {a.shape} -> {b.shape}")
        return [blk(x) for blk, x in zip(self.blocks, pyramid)]


def msffm_forward(module: MSFFM, pyramid: Sequence[Tensor]) -> List[Tensor]:
    return module(pyramid)


def spatial_branch(module: SpatialBranch, x: Tensor) -> Tensor:
    return module(x)


def frequency_branch(module: FrequencyBranch, x: Tensor) -> Tensor:
    return module(x)
