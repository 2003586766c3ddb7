"""Multi-head cross-attention with an additive logit mask and a residual GELU FFN."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .gate import (LAMBDA_INFER, LAMBDA_TRAIN, GateHead, GateMap, MaskMatrix, build_mask,
                   gate_forward)
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class AttnConfig:
    d_model: int
    n_heads: int
    n_tokens: int
    d_ff: int | None = None

    def __post_init__(self):
        if self.n_heads < 1 or self.d_model < 1:
            raise ValueError("d_model and n_heads must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ffn_width(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d_model


class MaskAttnBlock:
    """Parameters of one gated cross-attention site.

    Backbone weights (projections, FFN) and the gate head draw from separate
    generators so adding a gate never changes backbone initialization.
    """

    def __init__(self, cfg: AttnConfig, rng: np.random.Generator | None = None,
                 gate_rng: np.random.Generator | None = None, gated: bool = True,
                 prefix: str = "block"):
        self.cfg = cfg
        d, f = cfg.d_model, cfg.ffn_width

        def w(name, shape, std):
            data = np.zeros(shape) if rng is None else rng.normal(0.0, std, shape)
            return Tensor(data, requires_grad=True, name=f"{prefix}.{name}")

        self.w_q = w("w_q", (d, d), 1.0 / math.sqrt(d))
        self.w_k = w("w_k", (d, d), 1.0 / math.sqrt(d))
        self.w_v = w("w_v", (d, d), 1.0 / math.sqrt(d))
        self.w_o = w("w_o", (d, d), 1.0 / math.sqrt(d))
        self.ffn_w1 = w("ffn_w1", (d, f), 1.0 / math.sqrt(d))
        self.ffn_b1 = Tensor(np.zeros(f), requires_grad=True, name=f"{prefix}.ffn_b1")
        self.ffn_w2 = w("ffn_w2", (f, d), 1.0 / math.sqrt(f))
        self.ffn_b2 = Tensor(np.zeros(d), requires_grad=True, name=f"{prefix}.ffn_b2")
        self.gate = GateHead(d, d, gate_rng, prefix=f"{prefix}.gate") if gated else None

    def backbone_parameters(self) -> list[Tensor]:
        return [self.w_q, self.w_k, self.w_v, self.w_o,
                self.ffn_w1, self.ffn_b1, self.ffn_w2, self.ffn_b2]

    def gate_parameters(self) -> list[Tensor]:
        return self.gate.parameters() if self.gate is not None else []

    def parameters(self) -> list[Tensor]:
        return self.backbone_parameters() + self.gate_parameters()


@dataclass
class BlockOutput:
    out: Tensor
    gates: GateMap | None
    mask: MaskMatrix | None
    weights: Tensor | None


def masked_cross_attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | MaskMatrix | None = None,
                           lam: float | None = None, return_weights: bool = False):
    """``softmax(q k^T / sqrt(d) + bias) v`` over arbitrary matching leading axes."""
    if isinstance(bias, MaskMatrix):
        lam = bias.lambda_used if lam is None else lam
        bias = bias.bias
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} are inconsistent")
    d = q.shape[-1]
    logits = tn.scale(tn.matmul(q, tn.transpose(k)), 1.0 / math.sqrt(d))
    weights = tn.softmax_with_bias(logits, bias, lam)
    out = tn.matmul(weights, v)
    return (out, weights) if return_weights else out


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return tn.transpose(tn.reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def multi_head_forward(blk: MaskAttnBlock, x: Tensor, tok: Tensor, m: MaskMatrix | None = None,
                       return_weights: bool = False):
    """Per-head masked cross-attention, heads concatenated and projected by w_o.

    One mask is shared by all heads.
    """
    h = blk.cfg.n_heads
    if x.ndim != 3 or tok.ndim != 3 or x.shape[0] != tok.shape[0]:
        raise ShapeError(f"multi-head: x {x.shape} and tokens {tok.shape} must be (B, *, D)")
    b, n, d = x.shape
    t = tok.shape[1]
    q = _split_heads(tn.linear(x, blk.w_q), h)
    k = _split_heads(tn.linear(tok, blk.w_k), h)
    v = _split_heads(tn.linear(tok, blk.w_v), h)
    bias, lam = None, None
    if m is not None:
        if m.bias.shape != (b, n, t):
            raise ShapeError(f"multi-head: mask {m.bias.shape} does not match ({b}, {n}, {t})")
        bias, lam = tn.reshape(m.bias, (b, 1, n, t)), m.lambda_used
    att, weights = masked_cross_attention(q, k, v, bias, lam, return_weights=True)
    merged = tn.reshape(tn.transpose(att, (0, 2, 1, 3)), (b, n, d))
    out = tn.linear(merged, blk.w_o)
    return (out, weights) if return_weights else out


def ffn_residual(a: Tensor, blk: MaskAttnBlock) -> Tensor:
    """``GELU(a W1 + b1) W2 + b2 + a``."""
    hidden = tn.gelu(tn.linear(a, blk.ffn_w1, blk.ffn_b1))
    return tn.add(tn.linear(hidden, blk.ffn_w2, blk.ffn_b2), a)


def block_forward(blk: MaskAttnBlock, x: Tensor, tok: Tensor, grid: tuple[int, int],
                  mode: str = "train", lam_train: float = LAMBDA_TRAIN,
                  lam_infer: float = LAMBDA_INFER) -> BlockOutput:
    """Gate -> mask -> masked multi-head attention (+x) -> residual FFN.

    ``x`` is the (B, H*W, D) flattened feature grid. The gate head sees
    detached features and token embeddings, so its straight-through gradient
    only reaches gate parameters.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    hgt, wid = grid
    b, n, d = x.shape
    if n != hgt * wid:
        raise ShapeError(f"block: {n} locations do not form a {hgt}x{wid} grid")
    gates = mask = None
    if blk.gate is not None:
        lam = lam_train if mode == "train" else lam_infer
        gates = gate_forward(tn.reshape(x.detach(), (b, hgt, wid, d)), tok.detach(), blk.gate)
        mask = build_mask(gates.hard, lam)
    att, weights = multi_head_forward(blk, x, tok, mask, return_weights=True)
    out = ffn_residual(tn.add(x, att), blk)
    return BlockOutput(out=out, gates=gates, mask=mask, weights=weights)
