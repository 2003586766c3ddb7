"""Registered finite-difference checks for every differentiable op and composite.

Each entry builds a small random graph and returns ``(f, params)`` for
:func:`maskattn.tensor.grad_check`. Gate-head parameters never appear here:
their gradient is the straight-through surrogate, which central differences
of the hard-thresholded forward cannot reproduce. The sigmoid path of the
gate is checked on its own (``gate_probs``).
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .attention import AttnConfig, MaskAttnBlock, block_forward, ffn_residual, multi_head_forward
from .diffusion import ModelConfig, ToyUNet, unet_forward
from .gate import GateHead, build_mask, gate_scores
from .rng import stream
from .tensor import Tensor

DEFAULT_TOL = 1e-5
DEFAULT_H = 1e-6


def _p(rng, *shape, std=1.0):
    return Tensor(rng.normal(0.0, std, shape), requires_grad=True)


def _weighted_sum(y: Tensor, rng) -> Tensor:
    # random projection so every output element matters
    return tn.sum(tn.mul(y, Tensor(rng.normal(size=y.shape))))


def _matmul(rng):
    a, b = _p(rng, 3, 4), _p(rng, 4, 2)
    r = rng.normal(size=(3, 2))
    return lambda: tn.sum(tn.mul(tn.matmul(a, b), Tensor(r))), [a, b]


def _softmax_with_bias(rng):
    logits = _p(rng, 4, 5)
    bias = Tensor(np.where(rng.random((4, 5)) < 0.4, -10.0, 0.0))
    bias.data[:, 0] = 0.0
    bias.requires_grad = True
    r = rng.normal(size=(4, 5))
    return lambda: tn.sum(tn.mul(tn.softmax_with_bias(logits, bias, 10.0), Tensor(r))), [logits, bias]


def _sigmoid(rng):
    x = _p(rng, 3, 4, std=3.0)
    r = rng.normal(size=(3, 4))
    return lambda: tn.sum(tn.mul(tn.sigmoid(x), Tensor(r))), [x]


def _gelu(rng):
    x = _p(rng, 3, 4, std=2.0)
    r = rng.normal(size=(3, 4))
    return lambda: tn.sum(tn.mul(tn.gelu(x), Tensor(r))), [x]


def _linear(rng):
    x, w, b = _p(rng, 3, 4), _p(rng, 4, 2), _p(rng, 2)
    r = rng.normal(size=(3, 2))
    return lambda: tn.sum(tn.mul(tn.linear(x, w, b), Tensor(r))), [x, w, b]


def _conv2d(rng):
    x, w, b = _p(rng, 2, 5, 5, 2), _p(rng, 3, 3, 2, 3, std=0.5), _p(rng, 3)
    r1 = rng.normal(size=(2, 5, 5, 3))
    r2 = rng.normal(size=(2, 3, 3, 3))

    def f():
        y1 = tn.sum(tn.mul(tn.conv2d(x, w, b, stride=1), Tensor(r1)))
        y2 = tn.sum(tn.mul(tn.conv2d(x, w, b, stride=2), Tensor(r2)))
        return tn.add(y1, y2)

    return f, [x, w, b]


def _upsample2x(rng):
    x = _p(rng, 2, 2, 3, 2)
    r = rng.normal(size=(2, 4, 6, 2))
    return lambda: tn.sum(tn.mul(tn.upsample2x(x), Tensor(r))), [x]


def _concat(rng):
    a, b = _p(rng, 2, 3), _p(rng, 2, 2)
    r = rng.normal(size=(2, 5))
    return lambda: tn.sum(tn.mul(tn.concat([a, b], axis=1), Tensor(r))), [a, b]


def _embedding(rng):
    table = _p(rng, 5, 3)
    ids = np.array([[0, 3, 3], [4, 1, 0]])
    r = rng.normal(size=(2, 3, 3))
    return lambda: tn.sum(tn.mul(tn.embedding(table, ids), Tensor(r))), [table]


def _reshape_transpose(rng):
    x = _p(rng, 2, 3, 4)
    r = rng.normal(size=(4, 2, 3))

    def f():
        y = tn.transpose(tn.reshape(x, (6, 4)), (1, 0))
        return tn.sum(tn.mul(tn.reshape(y, (4, 2, 3)), Tensor(r)))

    return f, [x]


def _mse(rng):
    a, b = _p(rng, 3, 4), rng.normal(size=(3, 4))
    return lambda: tn.mse(a, Tensor(b)), [a]


def _gate_probs(rng):
    x, tok = _p(rng, 2, 2, 2, 4), _p(rng, 2, 3, 6)
    head = GateHead(6, 4, rng)
    for t in head.parameters():
        t.data[...] = rng.normal(0.0, 0.5, t.shape)
    r = rng.normal(size=(2, 4, 3))
    return (lambda: tn.sum(tn.mul(tn.sigmoid(gate_scores(x, tok, head)), Tensor(r))),
            [x, tok] + head.parameters())


def _small_block(rng, n_heads=2, d=4, t=3, gated=True):
    blk = MaskAttnBlock(AttnConfig(d_model=d, n_heads=n_heads, n_tokens=t, d_ff=6), rng, rng,
                        gated=gated, prefix="gc")
    if gated:
        # spread the gate scores so a mix of open and closed gates appears
        blk.gate.bias.data[...] = 0.0
        blk.gate.proj_tok.data[...] = rng.normal(0.0, 1.0, blk.gate.proj_tok.shape)
        blk.gate.proj_feat.data[...] = rng.normal(0.0, 1.0, blk.gate.proj_feat.shape)
    return blk


def _mixed_block_inputs(rng, blk, b, hw, t, d):
    # redraw until no gate probability sits within 1e-3 of the threshold
    for _ in range(200):
        x, tok = _p(rng, b, hw[0] * hw[1], d), _p(rng, b, t, d)
        with tn.no_grad():
            res = block_forward(blk, x, tok, hw, "train")
        p = res.gates.probs.data
        if np.all(np.abs(p - 0.5) > 1e-3) and 0 < res.gates.hard.data.mean() < 1:
            return x, tok
    raise RuntimeError("could not draw block inputs with well-separated gates")


def _multi_head(rng):
    blk = _small_block(rng, gated=False)
    x, tok = _p(rng, 2, 4, 4), _p(rng, 2, 3, 4)
    hard = Tensor((rng.random((2, 2, 2, 3)) < 0.6).astype(float))
    mask = build_mask(hard, 10.0)
    r = rng.normal(size=(2, 4, 4))
    return (lambda: tn.sum(tn.mul(multi_head_forward(blk, x, tok, mask), Tensor(r))),
            [x, tok, blk.w_q, blk.w_k, blk.w_v, blk.w_o])


def _ffn_residual(rng):
    blk = _small_block(rng, gated=False)
    a = _p(rng, 2, 3, 4)
    r = rng.normal(size=(2, 3, 4))
    return (lambda: tn.sum(tn.mul(ffn_residual(a, blk), Tensor(r))),
            [a, blk.ffn_w1, blk.ffn_b1, blk.ffn_w2, blk.ffn_b2])


def _maskattn_block(rng):
    blk = _small_block(rng)
    x, tok = _mixed_block_inputs(rng, blk, 2, (2, 2), 3, 4)
    r = rng.normal(size=(2, 4, 4))
    return (lambda: tn.sum(tn.mul(block_forward(blk, x, tok, (2, 2), "train", lam_train=10.0).out,
                                  Tensor(r))),
            [x, tok] + blk.backbone_parameters())


def _unet(rng):
    cfg = ModelConfig(latent_size=4, channels=3, base_channels=2, d_model=4, n_heads=2, n_sites=1,
                      n_tokens=2, vocab_size=5)
    model = ToyUNet(cfg, seed=int(rng.integers(1 << 31)))
    for blk in model.blocks:
        blk.gate.bias.data[...] = 0.0
    z = rng.normal(size=(2, 3, 4, 4))
    tokens = np.array([[1, 3], [4, 2]])
    t = np.array([3, 150])
    r = rng.normal(size=(2, 3, 4, 4))

    def f():
        return tn.sum(tn.mul(unet_forward(model, z, t, tokens, "train"), Tensor(r)))

    return f, [model.params[n] for n in model.backbone_names()]


REGISTRY: dict[str, Callable] = {
    "matmul": _matmul,
    "softmax_with_bias": _softmax_with_bias,
    "sigmoid": _sigmoid,
    "gelu": _gelu,
    "linear": _linear,
    "conv2d": _conv2d,
    "upsample2x": _upsample2x,
    "concat": _concat,
    "embedding": _embedding,
    "reshape_transpose": _reshape_transpose,
    "mse": _mse,
    "gate_probs": _gate_probs,
    "multi_head_forward": _multi_head,
    "ffn_residual": _ffn_residual,
    "maskattn_block": _maskattn_block,
    "unet": _unet,
}


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seconds: float
    passed: bool


def run_all(seed: int = 0, h: float = DEFAULT_H, tol: float = DEFAULT_TOL,
            names: list[str] | None = None) -> list[CheckResult]:
    out = []
    for name in names or list(REGISTRY):
        t0 = time.perf_counter()
        f, params = REGISTRY[name](stream(seed, f"gradcheck.{name}"))
        err = tn.grad_check(f, params, h)
        out.append(CheckResult(name, err, time.perf_counter() - t0, bool(err < tol)))
    return out
