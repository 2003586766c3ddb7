"""Token-conditioned gate heads, hard binarization and additive logit masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import ShapeError, Tensor

LAMBDA_TRAIN = 10.0
LAMBDA_INFER = 1e9
GATE_INIT_BIAS = 2.0
GATE_INIT_STD = 0.02


class GateHead:
    """Bilinear location/token scorer.

    ``score[i, t] = scale * <x_i @ proj_feat, e_t @ proj_tok> + bias``
    """

    def __init__(self, d_model: int, channels: int, rng: np.random.Generator | None = None,
                 prefix: str = "gate"):
        if rng is None:
            proj_tok = np.zeros((d_model, channels))
            proj_feat = np.zeros((channels, channels))
        else:
            proj_tok = rng.normal(0.0, GATE_INIT_STD, (d_model, channels))
            proj_feat = rng.normal(0.0, GATE_INIT_STD, (channels, channels))
        self.proj_tok = Tensor(proj_tok, requires_grad=True, name=f"{prefix}.proj_tok")
        self.proj_feat = Tensor(proj_feat, requires_grad=True, name=f"{prefix}.proj_feat")
        self.bias = Tensor([GATE_INIT_BIAS if rng is not None else 0.0], requires_grad=True,
                           name=f"{prefix}.bias")
        self.scale = Tensor([1.0 if rng is not None else 0.0], requires_grad=True,
                            name=f"{prefix}.scale")
        self.force_open = False

    @property
    def d_model(self) -> int:
        return self.proj_tok.shape[0]

    @property
    def channels(self) -> int:
        return self.proj_feat.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.proj_tok, self.proj_feat, self.bias, self.scale]


@dataclass
class GateMap:
    probs: Tensor  # (B, H, W, T) sigmoid scores
    hard: Tensor  # (B, H, W, T) 0/1, straight-through w.r.t. probs


@dataclass
class MaskMatrix:
    bias: Tensor  # (B, N, T), entries 0 or -lambda
    lambda_used: float
    fallback_rows: int


def gate_scores(x: Tensor, tok: Tensor, head: GateHead) -> Tensor:
    """Pre-sigmoid scores of shape (B, N, T) for x (B, H, W, C) and tok (B, T, D)."""
    if x.ndim != 4 or x.shape[3] != head.channels:
        raise ShapeError(f"gate: feature map {x.shape} does not have {head.channels} channels")
    if tok.ndim != 3 or tok.shape[0] != x.shape[0] or tok.shape[2] != head.d_model:
        raise ShapeError(f"gate: tokens {tok.shape} incompatible with features {x.shape}")
    b, h, w, c = x.shape
    feat = tn.linear(tn.reshape(x, (b, h * w, c)), head.proj_feat)
    tokp = tn.linear(tok, head.proj_tok)
    dots = tn.matmul(feat, tn.transpose(tokp))
    return tn.add(tn.mul(dots, head.scale), head.bias)


def gate_forward(x: Tensor, tok: Tensor, head: GateHead) -> GateMap:
    """Gate probabilities and hard gates for every (location, token) pair.

    Unbatched inputs (H, W, C) / (T, D) are accepted and get a batch axis of 1.
    """
    if x.ndim == 3:
        x = tn.reshape(x, (1,) + x.shape)
    if tok.ndim == 2:
        tok = tn.reshape(tok, (1,) + tok.shape)
    b, h, w, _ = x.shape
    t = tok.shape[1]
    if head.force_open:
        ones = np.ones((b, h, w, t))
        return GateMap(probs=Tensor(ones), hard=Tensor(ones))
    probs = tn.reshape(tn.sigmoid(gate_scores(x, tok, head)), (b, h, w, t))
    return GateMap(probs=probs, hard=binarize_ste(probs))


def binarize_ste(probs: Tensor) -> Tensor:
    """1 where ``probs > 0.5`` (strict), else 0; gradient passes straight through."""
    return tn.binarize_ste(probs, 0.5)


def build_mask(hard: Tensor, lam: float) -> MaskMatrix:
    """Additive bias ``-lam * (1 - hard)`` with (H, W) flattened row-major.

    Rows in which every token is closed are rewritten to all-open and counted.
    """
    if lam < 0:
        raise ValueError(f"mask lambda must be non-negative, got {lam}")
    if hard.ndim == 3:
        hard = tn.reshape(hard, (1,) + hard.shape)
    b, h, w, t = hard.shape
    flat = tn.reshape(hard, (b, h * w, t))
    dead = ~np.any(flat.data > 0.5, axis=-1)  # (B, N)
    bias = tn.scale(tn.sub(flat, 1.0), lam)
    n_dead = int(dead.sum())
    if n_dead:
        keep = np.where(dead, 0.0, 1.0)[..., None]
        bias = tn.mul(bias, Tensor(np.broadcast_to(keep, (b, h * w, t))))
        bias.data[dead] = 0.0  # -lam * 0 would leave -0.0
    return MaskMatrix(bias=bias, lambda_used=float(lam), fallback_rows=n_dead)


def open_mask(b: int, n: int, t: int, lam: float) -> MaskMatrix:
    return MaskMatrix(bias=Tensor(np.zeros((b, n, t))), lambda_used=float(lam), fallback_rows=0)
