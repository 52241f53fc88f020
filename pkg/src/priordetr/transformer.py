"""Encoder/decoder transformer with selectable encoder-to-decoder interaction.

Strategies for the memory K_j = V_j seen by decoder layer j (1-based):

* ``original``:   last encoder output for every layer
* ``sequential``: encoder output j
* ``reversed``:   encoder output L - j + 1
* ``dfi``:        dense aggregate M_{L-j+1}, where
                  M_i = Psi(E_i || sum_{r > i} Gamma_r(E_r))
"""
from __future__ import annotations

import math
from typing import List, Optional, Sequence

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import Tensor
from .nn import MLP, LayerNorm, Linear, Module, Parameter, zero_

STRATEGIES = ("original", "sequential", "reversed", "dfi")


def _check_strategy(strategy: str) -> str:
    s = strategy.lower()
    if s not in STRATEGIES:
        raise ValueError(f"unknown interaction strategy {strategy!r}; choose from {STRATEGIES}")
    return s


# ---------------------------------------------------------------------------
# positional encodings
# ---------------------------------------------------------------------------

def _sine(coords: np.ndarray, d: int, temperature: float) -> np.ndarray:
    """Interleaved sin/cos of ``coords`` (..., ) -> (..., d)."""
    i = np.arange(d)
    dim_t = temperature ** (2 * (i // 2) / d)
    a = coords[..., None] / dim_t
    out = np.empty(a.shape)
    out[..., 0::2] = np.sin(a[..., 0::2])
    out[..., 1::2] = np.cos(a[..., 1::2])
    return out


def positional_encoding(H: int, W: int, D: int, temperature: float = 20.0) -> np.ndarray:
    """2-D sine encoding of a H x W grid -> (H*W, D), (y half then x half).

    Coordinates are pixel centers normalized to (0, 2*pi).
    """
    if D % 4:
        raise ValueError(f"D_model must be divisible by 4, got {D}")
    ys = (np.arange(H) + 0.5) / H * 2 * np.pi
    xs = (np.arange(W) + 0.5) / W * 2 * np.pi
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    half = D // 2
    return np.concatenate([_sine(yy.ravel(), half, temperature),
                           _sine(xx.ravel(), half, temperature)], axis=-1)


def box_sine_embedding(boxes: np.ndarray, D: int, temperature: float = 20.0) -> np.ndarray:
    """Sine embedding of normalized (cx, cy, w, h) boxes -> (..., 2*D).

    The (cy, cx) part uses the same frequencies as ``positional_encoding``.
    """
    b = np.asarray(boxes) * 2 * np.pi
    half = D // 2
    parts = [_sine(b[..., 1], half, temperature), _sine(b[..., 0], half, temperature),
             _sine(b[..., 3], half, temperature), _sine(b[..., 2], half, temperature)]
    return np.concatenate(parts, axis=-1)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class MultiheadAttention(Module):
    def __init__(self, d_model: int, heads: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        self.heads = heads
        self.q_proj = Linear(d_model, d_model, rng=rng)
        self.k_proj = Linear(d_model, d_model, rng=rng)
        self.v_proj = Linear(d_model, d_model, rng=rng)
        self.out_proj = Linear(d_model, d_model, rng=rng)
        self.last_weights: Optional[np.ndarray] = None

    def _split(self, t: Tensor) -> Tensor:
        b, n, d = t.shape
        return t.reshape(b, n, self.heads, d // self.heads).permute(0, 2, 1, 3)

    def forward(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        b, nq, d = q.shape
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        vh = self._split(self.v_proj(v))
        scores = (qh @ kh.transpose(-2, -1)) * (1.0 / math.sqrt(d // self.heads))
        attn = F.softmax(scores, axis=-1)
        self.last_weights = attn.data
        out = (attn @ vh).permute(0, 2, 1, 3).reshape(b, nq, d)
        return self.out_proj(out)


class FFN(Module):
    def __init__(self, d_model: int, ratio: int = 4, rng=None):
        super().__init__()
        self.fc1 = Linear(d_model, d_model * ratio, rng=rng)
        self.fc2 = Linear(d_model * ratio, d_model, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.relu(self.fc1(x)))


class EncoderLayer(Module):
    """Pre-norm self-attention + FFN."""

    def __init__(self, d_model: int, heads: int, ffn_ratio: int = 4, rng=None):
        super().__init__()
        self.norm1 = LayerNorm(d_model)
        self.attn = MultiheadAttention(d_model, heads, rng=rng)
        self.norm2 = LayerNorm(d_model)
        self.ffn = FFN(d_model, ffn_ratio, rng=rng)

    def forward(self, x: Tensor, pos: Optional[Tensor] = None) -> Tensor:
        h = self.norm1(x)
        qk = h + pos if pos is not None else h
        x = x + self.attn(qk, qk, h)
        return x + self.ffn(self.norm2(x))

    def zero_residuals(self) -> None:
        for p in (self.attn.out_proj.weight, self.attn.out_proj.bias,
                  self.ffn.fc2.weight, self.ffn.fc2.bias):
            zero_(p)


class Encoder(Module):
    def __init__(self, num_layers: int, d_model: int, heads: int, ffn_ratio: int = 4, rng=None):
        super().__init__()
        if num_layers < 1:
            raise ValueError(f"need at least one encoder layer, got {num_layers}")
        self.layers = [EncoderLayer(d_model, heads, ffn_ratio, rng=rng) for _ in range(num_layers)]

    def forward(self, x: Tensor, pos: Optional[Tensor] = None) -> List[Tensor]:
        """Returns every layer output E_1 ... E_L."""
        outs = []
        for layer in self.layers:
            x = layer(x, pos)
            outs.append(x)
        return outs


def encoder_forward(encoder: Encoder, x: Tensor, pos: Optional[Tensor] = None) -> List[Tensor]:
    return encoder(x, pos)


class DecoderLayer(Module):
    """Pre-norm self-attention over queries, cross-attention, FFN."""

    def __init__(self, d_model: int, heads: int, ffn_ratio: int = 4, rng=None):
        super().__init__()
        self.norm1 = LayerNorm(d_model)
        self.self_attn = MultiheadAttention(d_model, heads, rng=rng)
        self.norm2 = LayerNorm(d_model)
        self.cross_attn = MultiheadAttention(d_model, heads, rng=rng)
        self.norm3 = LayerNorm(d_model)
        self.ffn = FFN(d_model, ffn_ratio, rng=rng)

    def forward(self, tgt: Tensor, key: Tensor, value: Tensor,
                query_pos: Optional[Tensor] = None, key_pos: Optional[Tensor] = None) -> Tensor:
        h = self.norm1(tgt)
        qk = h + query_pos if query_pos is not None else h
        tgt = tgt + self.self_attn(qk, qk, h)
        h = self.norm2(tgt)
        q = h + query_pos if query_pos is not None else h
        k = key + key_pos if key_pos is not None else key
        tgt = tgt + self.cross_attn(q, k, value)
        return tgt + self.ffn(self.norm3(tgt))

    def zero_residuals(self) -> None:
        for p in (self.self_attn.out_proj.weight, self.self_attn.out_proj.bias,
                  self.cross_attn.out_proj.weight, self.cross_attn.out_proj.bias,
                  self.ffn.fc2.weight, self.ffn.fc2.bias):
            zero_(p)


def decoder_layer_forward(layer: DecoderLayer, q: Tensor, k: Tensor, v: Tensor, **kw) -> Tensor:
    return layer(q, k, v, **kw)


# ---------------------------------------------------------------------------
# dense feature interaction
# ---------------------------------------------------------------------------

class DFIAggregator(Module):
    """M_i = Psi(E_i || sum_{r > i} Gamma_r(E_r)), computed once per forward.

    One Gamma per source layer r >= 2 (shared across destinations); E_1 is
    never a source.  Psi starts
    as [I | 0] and every Gamma at 0, so M_i == E_i at init.  With
    ``iterative`` the sum runs over the already aggregated M_r instead.
    """

    def __init__(self, num_layers: int, d_model: int, iterative: bool = False, rng=None):
        super().__init__()
        self.num_layers = num_layers
        self.iterative = iterative
        self.gammas = [Linear(d_model, d_model, bias=False, rng=rng) for _ in range(num_layers - 1)]
        for g in self.gammas:
            zero_(g.weight)
        self.psi = Linear(2 * d_model, d_model, rng=rng)
        self.psi.weight.data[...] = np.concatenate([np.eye(d_model), np.zeros((d_model, d_model))], 1)
        zero_(self.psi.bias)
        self.consumed = 0

    def forward(self, outputs: Sequence[Tensor]) -> List[Tensor]:
        L = len(outputs)
        if L != self.num_layers:
            raise ValueError(f"expected {self.num_layers} encoder outputs, got {L}")
        self.consumed = 0
        result: List[Optional[Tensor]] = [None] * L
        acc: Optional[Tensor] = None     # running sum over r > i
        for i in range(L - 1, -1, -1):
            e = outputs[i]
            self.consumed += 1
            agg = acc if acc is not None else Tensor(np.zeros(e.shape, dtype=e.dtype))
            m = self.psi(F.concat([e, agg], axis=-1))
            result[i] = m
            if i == 0:
                break
            term = self.gammas[i - 1](m if self.iterative else e)
            acc = term if acc is None else acc + term
        return result  # type: ignore[return-value]


def dfi_aggregate(agg: DFIAggregator, outputs: Sequence[Tensor]) -> List[Tensor]:
    return agg(outputs)


def kv_index(strategy: str, j: int, L: int) -> int:
    """1-based index into the E (or M, for dfi) list used by decoder layer j."""
    strategy = _check_strategy(strategy)
    if not 1 <= j <= L:
        raise ValueError(f"decoder layer index j={j} outside 1..{L}")
    if strategy == "original":
        return L
    if strategy == "sequential":
        return j
    return L - j + 1


def map_kv(strategy: str, encoder_outputs: Sequence, aggregated: Optional[Sequence], j: int):
    """(K_j, V_j) for decoder layer j (1-based)."""
    L = len(encoder_outputs)
    idx = kv_index(strategy, j, L) - 1
    if _check_strategy(strategy) == "dfi":
        if aggregated is None:
            raise ValueError("dfi strategy needs the aggregated maps")
        m = aggregated[idx]
        return m, m
    e = encoder_outputs[idx]
    return e, e


def mapping_table(strategy: str, L: int) -> List[str]:
    """Human-readable K/V assignment, e.g. ['M6', 'M5', ...] for dfi."""
    sym = "M" if _check_strategy(strategy) == "dfi" else "E"
    return [f"{sym}{kv_index(strategy, j, L)}" for j in range(1, L + 1)]


def inverse_sigmoid(x: Tensor, eps: float = 1e-5) -> Tensor:
    x = F.clamp(x, eps, 1 - eps)
    return F.log(x) - F.log(1.0 - x)


class Transformer(Module):
    """Encoder, optional DFI aggregation, and a box-refining decoder.

    Each query carries a reference box; layer j predicts a correction in
    logit space and the refined box (detached) becomes the next reference.
    Returns per-layer class logits and boxes for auxiliary losses.
    """

    def __init__(self, d_model: int = 64, heads: int = 4, enc_layers: int = 6,
                 dec_layers: int = 6, ffn_ratio: int = 4, num_queries: int = 300,
                 num_classes: int = 2, strategy: str = "dfi", dfi_iterative: bool = False,
                 temperature: float = 20.0, two_stage: bool = False,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.strategy = _check_strategy(strategy)
        if self.strategy != "original" and enc_layers != dec_layers:
            raise ValueError(
                f"strategy {strategy!r} pairs layers one-to-one; got {enc_layers} encoder and "
                f"{dec_layers} decoder layers")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_model = d_model
        self.temperature = temperature
        self.encoder = Encoder(enc_layers, d_model, heads, ffn_ratio, rng=rng)
        # own generator: its initial weights are overwritten, and drawing from
        # ``rng`` would shift every later parameter relative to other strategies
        self.dfi = DFIAggregator(enc_layers, d_model, dfi_iterative,
                                 rng=np.random.default_rng(0)) if self.strategy == "dfi" else None
        self.decoder = [DecoderLayer(d_model, heads, ffn_ratio, rng=rng) for _ in range(dec_layers)]
        self.dec_norm = LayerNorm(d_model)
        self.query_content = Parameter(rng.normal(scale=0.1, size=(num_queries, d_model)))
        # anchors spread over the image, modest initial size
        xy = rng.uniform(0.05, 0.95, (num_queries, 2))
        wh = np.full((num_queries, 2), 0.25)
        anchors = np.concatenate([xy, wh], 1)
        self.anchor_logits = Parameter(np.log(anchors / (1 - anchors)))
        self.ref_head = Linear(2 * d_model, d_model, rng=rng)
        self.ref_head2 = Linear(d_model, d_model, rng=rng)
        prior_bias = -math.log((1 - 0.01) / 0.01)
        self.class_heads = [Linear(d_model, num_classes, rng=rng) for _ in range(dec_layers)]
        self.box_heads = [MLP([d_model, d_model, d_model, 4], rng=rng) for _ in range(dec_layers)]
        for ch in self.class_heads:
            ch.bias.data[...] = prior_bias
        for bh in self.box_heads:
            zero_(bh.layers[-1].weight)
            zero_(bh.layers[-1].bias)
        # two-stage: every encoder token proposes a box around its own cell and
        # the top-scoring proposals seed the decoder references
        self.two_stage = two_stage
        if two_stage:
            self.enc_norm = LayerNorm(d_model)
            self.enc_class = Linear(d_model, num_classes, rng=rng)
            self.enc_class.bias.data[...] = prior_bias
            self.enc_box = MLP([d_model, d_model, d_model, 4], rng=rng)
            zero_(self.enc_box.layers[-1].weight)
            zero_(self.enc_box.layers[-1].bias)
        self.last_proposals = None

    def query_pos(self, ref: np.ndarray, dtype) -> Tensor:
        emb = Tensor(box_sine_embedding(ref, self.d_model, self.temperature).astype(dtype))
        return self.ref_head2(F.relu(self.ref_head(emb)))

    def _select(self, enc_last: Tensor, anchors: np.ndarray, ref_logit: Tensor) -> Tensor:
        h = self.enc_norm(enc_last)
        cls = self.enc_class(h)
        a = np.clip(anchors, 1e-4, 1 - 1e-4).astype(enc_last.dtype)
        box_logit = Tensor(np.log(a / (1 - a))[None]) + self.enc_box(h)
        self.last_proposals = (cls, F.sigmoid(box_logit))
        k = min(ref_logit.shape[1], cls.shape[1])
        top = np.argsort(-cls.data.max(-1), axis=1, kind="stable")[:, :k]
        picked = Tensor(np.take_along_axis(box_logit.data, top[..., None], axis=1))
        if k == ref_logit.shape[1]:
            return picked
        # more queries than tokens: the extra ones keep their learned anchors
        return F.concat([picked, ref_logit[:, k:]], axis=1)

    def forward(self, memory: Tensor, pos: Tensor, anchors: Optional[np.ndarray] = None):
        """``memory`` (B, N, D) tokens and ``pos`` (N, D) encodings; two-stage
        mode also needs per-token ``anchors`` (N, 4) in cxcywh."""
        b = memory.shape[0]
        enc = self.encoder(memory, pos)
        agg = self.dfi(enc) if self.dfi is not None else None
        q, d = self.query_content.shape
        tgt = self.query_content.reshape(1, q, d) * Tensor(np.ones((b, 1, 1), dtype=memory.dtype))
        ref_logit = self.anchor_logits.reshape(1, q, 4) * Tensor(np.ones((b, 1, 1), dtype=memory.dtype))
        if self.two_stage:
            if anchors is None:
                raise ValueError("two-stage mode needs per-token anchors")
            ref_logit = self._select(enc[-1], anchors, ref_logit)
        logits, boxes = [], []
        for j, layer in enumerate(self.decoder, start=1):
            kv = enc[-1] if self.strategy == "original" else map_kv(self.strategy, enc, agg, j)[0]
            ref = F.sigmoid(ref_logit)
            qpos = self.query_pos(ref.data, memory.dtype)
            tgt = layer(tgt, kv, kv, query_pos=qpos, key_pos=pos)
            h = self.dec_norm(tgt)
            delta = self.box_heads[j - 1](h)
            new_logit = ref_logit + delta
            boxes.append(F.sigmoid(new_logit))
            logits.append(self.class_heads[j - 1](h))
            ref_logit = new_logit.detach()
        self.last_encoder_outputs = enc
        self.last_aggregated = agg
        return logits, boxes
