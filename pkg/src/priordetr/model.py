"""Toy end-to-end detector: small CNN backbone with SDFPR residual blocks,
MSFFM over the three output levels, and the strategy-mapped transformer."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import Tensor
from .gmm import GmmPrior2D
from .msffm import MSFFM, PaConvConfig
from .nn import BatchNorm, Conv2d, Module, Parameter
from .prior_dcn import SDFPR, SdfprConfig
from .transformer import Transformer, positional_encoding


@dataclass
class ModelConfig:
    widths: tuple = (32, 64, 128)
    stem: int = 16
    d_model: int = 64
    heads: int = 4
    enc_layers: int = 6
    dec_layers: int = 6
    ffn_ratio: int = 2
    num_queries: int = 300
    num_classes: int = 2
    strategy: str = "dfi"
    dfi_iterative: bool = False
    use_sdfpr: bool = True
    use_prior: bool = True
    use_msffm: bool = True
    sdfpr: SdfprConfig = field(default_factory=SdfprConfig)
    paconv: PaConvConfig = field(default_factory=PaConvConfig)
    temperature: float = 20.0
    two_stage: bool = False  # seed decoder references from encoder proposals

    def __post_init__(self):
        if len(self.widths) != 3:
            raise ValueError(f"backbone needs 3 stage widths, got {self.widths}")
        if self.d_model % self.paconv.G or self.d_model % 4:
            raise ValueError(f"d_model {self.d_model} must be divisible by 4 and G")


def _conv_bn(cin, cout, stride, rng):
    return [Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False, rng=rng), BatchNorm(cout)]


class Stage(Module):
    """Strided conv-BN-ReLU then relu(x + SDFPR(BN(conv(x))))."""

    def __init__(self, cin, cout, sdfpr_cfg, prior, use_sdfpr, rng, seed):
        super().__init__()
        self.down, self.down_bn = _conv_bn(cin, cout, 2, rng)
        self.conv, self.bn = _conv_bn(cout, cout, 1, rng)
        self.sdfpr = SDFPR(cout, sdfpr_cfg, prior, rng=rng, seed=seed) if use_sdfpr else None

    def forward(self, x: Tensor) -> Tensor:
        x = F.relu(self.down_bn(self.down(x)))
        y = self.bn(self.conv(x))
        if self.sdfpr is not None:
            y = self.sdfpr.forward_nchw(y)
        return F.relu(x + y)


class Detector(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), prior: Optional[GmmPrior2D] = None,
                 seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        sd_cfg = SdfprConfig(**{**cfg.sdfpr.__dict__, "use_prior": cfg.use_prior and prior is not None})
        self.stem1, self.stem1_bn = _conv_bn(1, cfg.stem, 2, rng)
        self.stem2, self.stem2_bn = _conv_bn(cfg.stem, cfg.widths[0], 2, rng)
        cins = (cfg.widths[0],) + tuple(cfg.widths[:-1])
        self.stages = [Stage(a, b, sd_cfg, prior, cfg.use_sdfpr, rng, seed=seed * 100 + i)
                       for i, (a, b) in enumerate(zip(cins, cfg.widths))]
        self.proj = [Conv2d(w, cfg.d_model, 1, rng=rng) for w in cfg.widths]
        self.msffm = MSFFM(cfg.d_model, 3, cfg.paconv, rng=rng) if cfg.use_msffm else None
        self.level_embed = Parameter(rng.normal(scale=0.1, size=(3, cfg.d_model)))
        self.transformer = Transformer(cfg.d_model, cfg.heads, cfg.enc_layers, cfg.dec_layers,
                                       cfg.ffn_ratio, cfg.num_queries, cfg.num_classes,
                                       cfg.strategy, cfg.dfi_iterative, cfg.temperature,
                                       two_stage=cfg.two_stage, rng=rng)
        self._pos_cache = {}

    def _pos(self, shapes, dtype) -> np.ndarray:
        key = (tuple(shapes), np.dtype(dtype).str)
        if key not in self._pos_cache:
            self._pos_cache[key] = np.concatenate(
                [positional_encoding(h, w, self.cfg.d_model, self.cfg.temperature)
                 for h, w in shapes]).astype(dtype)
        return self._pos_cache[key]

    def _anchors(self, shapes) -> np.ndarray:
        # one box per token: its cell centre, side doubling with each level
        out = []
        for lvl, (h, w) in enumerate(shapes):
            cy, cx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
            side = np.full(h * w, 0.125 * 2 ** lvl)
            out.append(np.stack([cx.ravel(), cy.ravel(), side, side], 1))
        return np.concatenate(out)

    def features(self, images: Tensor) -> List[Tensor]:
        x = F.relu(self.stem1_bn(self.stem1(images)))
        x = F.relu(self.stem2_bn(self.stem2(x)))
        feats = []
        for stage, proj in zip(self.stages, self.proj):
            x = stage(x)
            feats.append(proj(x))
        if self.msffm is not None:
            feats = self.msffm(feats)
        return feats

    def forward(self, images):
        """``images`` (B, H, W) or (B, 1, H, W) in [0, 1]; returns per-layer
        lists of logits (B, Q, K) and boxes (B, Q, 4)."""
        if not isinstance(images, Tensor):
            images = np.asarray(images)
            if images.ndim == 3:
                images = images[:, None]
            images = Tensor((images - 0.5) / 0.25)
        feats = self.features(images)
        b, d = images.shape[0], self.cfg.d_model
        tokens, shapes = [], []
        for lvl, f in enumerate(feats):
            _, _, h, w = f.shape
            shapes.append((h, w))
            t = f.reshape(b, d, h * w).permute(0, 2, 1)
            tokens.append(t + self.level_embed[lvl].reshape(1, 1, d))
        memory = F.concat(tokens, axis=1)
        pos = Tensor(self._pos(shapes, memory.dtype))
        anchors = self._anchors(shapes) if self.cfg.two_stage else None
        return self.transformer(memory, pos, anchors)

    def predict(self, images, top_k: int = 100) -> List[dict]:
        """Eval-mode detections per image: boxes (cxcywh), scores, labels."""
        was = self.training
        self.eval()
        try:
            logits, boxes = self(images)
        finally:
            self.train(was)
        prob = 1.0 / (1.0 + np.exp(-logits[-1].data))
        bx = boxes[-1].data
        out = []
        for p, b in zip(prob, bx):
            q, k = p.shape
            flat = p.ravel()
            idx = np.argsort(-flat, kind="stable")[:top_k]
            out.append({"boxes": b[idx // k], "scores": flat[idx], "labels": idx % k})
        return out
