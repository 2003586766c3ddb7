"""Forward noising, a toy MaskAttn-UNet denoiser, the epsilon loss, and samplers."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .attention import AttnConfig, BlockOutput, MaskAttnBlock, block_forward
from .gate import LAMBDA_INFER, LAMBDA_TRAIN
from .rng import stream
from .tensor import ContractError, ShapeError, Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray

    @property
    def t_steps(self) -> int:
        return len(self.betas)


def make_schedule(t_steps: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with cumulative alpha products."""
    if t_steps < 1:
        raise ValueError(f"t_steps must be >= 1, got {t_steps}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, t_steps)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bar=np.cumprod(alphas))


def q_sample(z0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; ``t`` is a scalar or one step per sample."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ShapeError(f"q_sample: z0 {z0.shape} and eps {eps.shape} differ")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= sched.t_steps):
        raise IndexError(f"q_sample: step outside [0, {sched.t_steps})")
    ab = sched.alpha_bar[t]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (z0.ndim - 1))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


@dataclass(frozen=True)
class ModelConfig:
    latent_size: int = 16
    channels: int = 3
    base_channels: int = 32
    d_model: int = 64
    n_heads: int = 2
    n_sites: int = 2
    n_tokens: int = 8
    vocab_size: int = 12
    gated: bool = True

    def __post_init__(self):
        if self.latent_size % 4 or self.latent_size < 4:
            raise ValueError(f"latent_size must be a positive multiple of 4, got {self.latent_size}")
        AttnConfig(self.d_model, self.n_heads, self.n_tokens)

    @property
    def mid_size(self) -> int:
        return self.latent_size // 4


@dataclass
class LatentBatch:
    z: np.ndarray  # (B, C, H, W) clean latents
    t: np.ndarray  # (B,) step indices
    eps: np.ndarray  # (B, C, H, W)
    tokens: np.ndarray  # (B, T) token ids

    def __post_init__(self):
        b = self.z.shape[0]
        if not (len(self.t) == self.eps.shape[0] == self.tokens.shape[0] == b):
            raise ShapeError("LatentBatch fields disagree on batch size")


def _conv_w(rng, cin, cout, name, gain=1.0):
    std = gain * math.sqrt(2.0 / (9 * cin))
    return Tensor(rng.normal(0.0, std, (3, 3, cin, cout)), requires_grad=True, name=name)


def _zeros(shape, name):
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


class ToyUNet:
    """Two-level UNet whose lowest-resolution stage hosts the MaskAttn sites."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, lam_train: float = LAMBDA_TRAIN,
                 lam_infer: float = LAMBDA_INFER):
        self.cfg = cfg
        self.lam_train = lam_train
        self.lam_infer = lam_infer
        rng = stream(seed, "init.backbone")
        grng = stream(seed, "init.gates")
        c, c2, d, ch = cfg.base_channels, 2 * cfg.base_channels, cfg.d_model, cfg.channels
        p: dict[str, Tensor] = {}
        p["conv_in.w"] = _conv_w(rng, ch, c, "conv_in.w")
        p["conv_in.b"] = _zeros(c, "conv_in.b")
        p["enc1.w"] = _conv_w(rng, c, c, "enc1.w")
        p["enc1.b"] = _zeros(c, "enc1.b")
        p["down1.w"] = _conv_w(rng, c, c2, "down1.w")
        p["down1.b"] = _zeros(c2, "down1.b")
        p["enc2.w"] = _conv_w(rng, c2, c2, "enc2.w")
        p["enc2.b"] = _zeros(c2, "enc2.b")
        p["down2.w"] = _conv_w(rng, c2, d, "down2.w")
        p["down2.b"] = _zeros(d, "down2.b")
        p["time.w1"] = Tensor(rng.normal(0, 1 / math.sqrt(d), (d, d)), requires_grad=True, name="time.w1")
        p["time.b1"] = _zeros(d, "time.b1")
        p["time.w2"] = Tensor(rng.normal(0, 1 / math.sqrt(d), (d, d)), requires_grad=True, name="time.w2")
        p["time.b2"] = _zeros(d, "time.b2")
        p["mid.pos"] = Tensor(rng.normal(0, 1.0, (cfg.mid_size ** 2, d)), requires_grad=True, name="mid.pos")
        p["tok.emb"] = Tensor(rng.normal(0, 1.0, (cfg.vocab_size, d)), requires_grad=True, name="tok.emb")
        p["tok.pos"] = Tensor(rng.normal(0, 1.0, (cfg.n_tokens, d)), requires_grad=True, name="tok.pos")
        acfg = AttnConfig(d, cfg.n_heads, cfg.n_tokens)
        self.blocks = []
        for i in range(cfg.n_sites):
            blk = MaskAttnBlock(acfg, rng, grng, gated=cfg.gated, prefix=f"mid{i}")
            self.blocks.append(blk)
            for t in blk.parameters():
                p[t.name] = t
        p["up1.w"] = _conv_w(rng, d + c2, c2, "up1.w")
        p["up1.b"] = _zeros(c2, "up1.b")
        p["up2.w"] = _conv_w(rng, c2 + c, c, "up2.w")
        p["up2.b"] = _zeros(c, "up2.b")
        p["conv_out.w"] = _conv_w(rng, c, ch, "conv_out.w", gain=0.1)
        p["conv_out.b"] = _zeros(ch, "conv_out.b")
        self.params = p
        self.last_blocks: list[BlockOutput] = []

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def gate_names(self) -> list[str]:
        return [t.name for b in self.blocks for t in b.gate_parameters()]

    def backbone_names(self) -> list[str]:
        gates = set(self.gate_names())
        return [n for n in self.params if n not in gates]

    @property
    def gates_open(self) -> bool:
        return all(b.gate is None or b.gate.force_open for b in self.blocks)

    @gates_open.setter
    def gates_open(self, value: bool) -> None:
        for b in self.blocks:
            if b.gate is not None:
                b.gate.force_open = bool(value)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


def encode_tokens(model: ToyUNet, tokens: np.ndarray) -> Tensor:
    """Caption encoder, (B, T, D): word plus position embedding."""
    tokens = np.asarray(tokens, dtype=np.int64)
    cfg = model.cfg
    if tokens.ndim != 2 or tokens.shape[1] != cfg.n_tokens:
        raise ShapeError(f"tokens must have shape (B, {cfg.n_tokens}), got {tokens.shape}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ContractError(f"token ids must lie in [0, {cfg.vocab_size})")
    p = model.params
    return tn.add(tn.embedding(p["tok.emb"], tokens), p["tok.pos"])


def unet_forward(model: ToyUNet, z_t, t, tokens, mode: str = "train") -> Tensor:
    """Predict the noise in ``z_t`` (B, C, H, W); returns a Tensor of the same shape."""
    cfg, p = model.cfg, model.params
    z = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
    if z.ndim != 4 or z.shape[1] != cfg.channels or z.shape[2] != cfg.latent_size \
            or z.shape[3] != cfg.latent_size:
        raise ShapeError(f"latent must be (B, {cfg.channels}, {cfg.latent_size}, "
                         f"{cfg.latent_size}), got {z.shape}")
    b = z.shape[0]
    t = np.broadcast_to(np.asarray(t), (b,))
    tok = encode_tokens(model, tokens)
    if tok.shape[0] != b:
        raise ShapeError(f"{tok.shape[0]} captions for a batch of {b}")

    x = tn.transpose(z, (0, 2, 3, 1))
    h0 = tn.gelu(tn.conv2d(x, p["conv_in.w"], p["conv_in.b"]))
    s1 = tn.gelu(tn.conv2d(h0, p["enc1.w"], p["enc1.b"]))
    h1 = tn.gelu(tn.conv2d(s1, p["down1.w"], p["down1.b"], stride=2))
    s2 = tn.gelu(tn.conv2d(h1, p["enc2.w"], p["enc2.b"]))
    h2 = tn.gelu(tn.conv2d(s2, p["down2.w"], p["down2.b"], stride=2))

    temb = Tensor(timestep_embedding(t, cfg.d_model))
    temb = tn.linear(tn.gelu(tn.linear(temb, p["time.w1"], p["time.b1"])), p["time.w2"], p["time.b2"])
    ms = cfg.mid_size
    # queries need to know where they are: learned position plus timestep
    h = tn.add(tn.reshape(h2, (b, ms * ms, cfg.d_model)), p["mid.pos"])
    h = tn.add(h, tn.reshape(temb, (b, 1, cfg.d_model)))
    model.last_blocks = []
    for blk in model.blocks:
        res = block_forward(blk, h, tok, (ms, ms), mode, model.lam_train, model.lam_infer)
        model.last_blocks.append(res)
        h = res.out
    h = tn.reshape(h, (b, ms, ms, cfg.d_model))

    u1 = tn.gelu(tn.conv2d(tn.concat([tn.upsample2x(h), s2], axis=3), p["up1.w"], p["up1.b"]))
    u2 = tn.gelu(tn.conv2d(tn.concat([tn.upsample2x(u1), s1], axis=3), p["up2.w"], p["up2.b"]))
    out = tn.conv2d(u2, p["conv_out.w"], p["conv_out.b"])
    return tn.transpose(out, (0, 3, 1, 2))


def training_loss(batch: LatentBatch, model: ToyUNet, sched: NoiseSchedule, mode: str = "train") -> Tensor:
    """Mean squared error between the true noise and the model's prediction."""
    z_t = q_sample(batch.z, batch.t, batch.eps, sched)
    eps_hat = unet_forward(model, z_t, batch.t, batch.tokens, mode)
    return tn.mse(eps_hat, Tensor(batch.eps))


def _predict_eps(model, x, t, tokens) -> np.ndarray:
    with tn.no_grad():
        return unet_forward(model, x, np.full(x.shape[0], t), tokens, mode="infer").data


def sample(model: ToyUNet, sched: NoiseSchedule, tokens, seed: int, sampler: str = "ddpm",
           steps: int | None = None) -> np.ndarray:
    """Denoise seeded Gaussian latents into (B, C, H, W) samples in [-1, 1].

    ``ddpm`` is the ancestral sampler over every step; ``ddim`` is the
    deterministic (eta = 0) sampler over ``steps`` evenly spaced steps.
    Predicted clean latents are clipped to [-1, 1] at every step.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    cfg = model.cfg
    rng = stream(seed, f"sample.{sampler}")
    shape = (tokens.shape[0], cfg.channels, cfg.latent_size, cfg.latent_size)
    x = rng.standard_normal(shape)
    ab = sched.alpha_bar
    if sampler == "ddpm":
        for t in range(sched.t_steps - 1, -1, -1):
            eps = _predict_eps(model, x, t, tokens)
            x0 = np.clip((x - math.sqrt(1.0 - ab[t]) * eps) / math.sqrt(ab[t]), -1.0, 1.0)
            if t == 0:
                x = x0
                break
            ab_prev = ab[t - 1]
            beta = sched.betas[t]
            coef0 = math.sqrt(ab_prev) * beta / (1.0 - ab[t])
            coeft = math.sqrt(sched.alphas[t]) * (1.0 - ab_prev) / (1.0 - ab[t])
            var = beta * (1.0 - ab_prev) / (1.0 - ab[t])
            x = coef0 * x0 + coeft * x + math.sqrt(var) * rng.standard_normal(shape)
    elif sampler == "ddim":
        n = sched.t_steps if steps is None else int(steps)
        if not 1 <= n <= sched.t_steps:
            raise ValueError(f"ddim steps must lie in [1, {sched.t_steps}], got {n}")
        ts = np.unique(np.round(np.linspace(0, sched.t_steps - 1, n)).astype(int))[::-1]
        for i, t in enumerate(ts):
            eps = _predict_eps(model, x, t, tokens)
            x0 = np.clip((x - math.sqrt(1.0 - ab[t]) * eps) / math.sqrt(ab[t]), -1.0, 1.0)
            if i == len(ts) - 1:
                x = x0
                break
            ab_prev = ab[ts[i + 1]]
            eps = (x - math.sqrt(ab[t]) * x0) / math.sqrt(1.0 - ab[t])
            x = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
    else:
        raise ValueError(f"unknown sampler {sampler!r}; expected 'ddpm' or 'ddim'")
    return x
