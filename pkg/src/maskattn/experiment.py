"""Glue between configs, models, checkpoints and the evaluation protocol."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .config import RunConfig, dump_config, parse_config
from .data import eval_prompts, scene_batches, to_image
from .diffusion import NoiseSchedule, ToyUNet, sample
from .optim import AdamWState, ConfigError, TraceRow, train_phase
from .scenes import ComplianceReport, SceneSpec, caption_of, compliance_score, render_scene

PHASES = ("backbone", "gates")


def build_model(cfg: RunConfig, gated: bool = True) -> ToyUNet:
    return ToyUNet(cfg.model_config(gated), seed=cfg.seed, lam_train=cfg.lambda_train,
                   lam_infer=cfg.lambda_infer)


def trainable_names(model: ToyUNet, phase: str) -> list[str]:
    return model.backbone_names() if phase == "backbone" else model.gate_names()


def batches_for(cfg: RunConfig, phase: str, skip: int = 0):
    stream = scene_batches(cfg.seed, cfg.batch_size, cfg.schedule(), cfg.latent_size,
                           cfg.holdout_fraction, cfg.n_tokens, name=f"data.{phase}")
    return itertools.islice(stream, skip, None)


def run_phase(cfg: RunConfig, phase: str, model: ToyUNet, state: AdamWState | None = None,
              start_step: int = 0, on_step=None) -> tuple[list[TraceRow], AdamWState]:
    """Train one phase: backbone with gates forced open, or gate heads alone."""
    if phase not in PHASES:
        raise ConfigError(f"phase must be one of {PHASES}, got {phase!r}")
    model.gates_open = phase == "backbone"
    tcfg = cfg.train_config(phase)
    _, trace, state = train_phase(model, batches_for(cfg, phase, start_step), tcfg,
                                  trainable_names(model, phase), cfg.schedule(), state,
                                  start_step, on_step)
    return trace, state


def model_checkpoint(cfg: RunConfig, model: ToyUNet, phase: str, step: int,
                     state: AdamWState | None = None) -> Checkpoint:
    tensors = {name: t.data.copy() for name, t in model.named_parameters().items()}
    optim_step = 0
    if state is not None:
        optim_step = state.step
        for name in state.m:
            tensors[f"adamw.m/{name}"] = state.m[name].copy()
            tensors[f"adamw.v/{name}"] = state.v[name].copy()
    return Checkpoint(dump_config(cfg), phase, step, tensors, optim_step)


def restore(ckpt: Checkpoint) -> tuple[RunConfig, ToyUNet, AdamWState | None]:
    """Model (gates forced open for backbone checkpoints) and optimizer state."""
    cfg = parse_config(ckpt.config_text)
    if ckpt.phase not in PHASES:
        raise ConfigError(f"checkpoint has unknown phase tag {ckpt.phase!r}")
    model = build_model(cfg)
    params = model.named_parameters()
    for name, t in params.items():
        if name not in ckpt.tensors:
            raise ConfigError(f"checkpoint lacks parameter {name}")
        if ckpt.tensors[name].shape != t.shape:
            raise ConfigError(f"checkpoint parameter {name} has shape {ckpt.tensors[name].shape}, "
                              f"model expects {t.shape}")
        t.data[...] = ckpt.tensors[name]
    model.gates_open = ckpt.phase == "backbone"
    state = None
    moments = [k for k in ckpt.tensors if k.startswith("adamw.m/")]
    if moments:
        tcfg = cfg.train_config(ckpt.phase)
        state = AdamWState(lr_peak=tcfg.lr_peak, weight_decay=tcfg.weight_decay, beta1=tcfg.beta1,
                           beta2=tcfg.beta2, eps=tcfg.adam_eps, step=ckpt.optim_step)
        for k in moments:
            name = k[len("adamw.m/"):]
            state.m[name] = ckpt.tensors[k].copy()
            state.v[name] = ckpt.tensors[f"adamw.v/{name}"].copy()
    return cfg, model, state


@dataclass
class ScoredSample:
    prompt_id: int
    seed: int
    scene: SceneSpec
    report: ComplianceReport


def describe(s: SceneSpec) -> str:
    return " and ".join(f"{o.color} {o.shape} {o.region}" for o in s.objects)


def score_model(model: ToyUNet | None, sched: NoiseSchedule, prompts: list[SceneSpec], seeds,
                sampler: str = "ddim", steps: int | None = None, size: int = 16) -> list[ScoredSample]:
    """Sample every prompt under every seed and score it; ``model=None`` scores
    the ground-truth renders instead."""
    out = []
    tokens = np.stack([caption_of(s) for s in prompts])
    for seed in seeds:
        if model is None:
            imgs = [render_scene(s, size) for s in prompts]
        else:
            imgs = [to_image(x) for x in sample(model, sched, tokens, seed, sampler, steps)]
        for i, (s, img) in enumerate(zip(prompts, imgs)):
            out.append(ScoredSample(i, seed, s, compliance_score(img, s)))
    return out


def mean_report(rows: list[ScoredSample]) -> ComplianceReport:
    return ComplianceReport(float(np.mean([r.report.presence for r in rows])),
                            float(np.mean([r.report.binding for r in rows])),
                            float(np.mean([r.report.placement for r in rows])))


def held_out_prompts(cfg: RunConfig, n: int, seed: int) -> list[SceneSpec]:
    return eval_prompts(n, seed, cfg.holdout_fraction)
