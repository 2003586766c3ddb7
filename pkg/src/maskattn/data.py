"""Seeded training/evaluation streams of rendered scenes."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .diffusion import LatentBatch, NoiseSchedule
from .rng import stream
from .scenes import SceneSpec, all_scenes, caption_of, render_scene

HOLDOUT_SEED = 20240917


def holdout_split(fraction: float) -> tuple[list, list]:
    """(train, held-out) object tuples; only two-object scenes are held out."""
    pairs = all_scenes(2)
    n_hold = int(round(fraction * len(pairs)))
    order = stream(HOLDOUT_SEED, "holdout").permutation(len(pairs))
    held = {int(i) for i in order[:n_hold]}
    train = all_scenes(1) + [p for i, p in enumerate(pairs) if i not in held]
    return train, [pairs[i] for i in sorted(held)]


def to_latent(img: np.ndarray) -> np.ndarray:
    return img * 2.0 - 1.0


def to_image(z: np.ndarray) -> np.ndarray:
    return np.clip((z + 1.0) * 0.5, 0.0, 1.0)


def scene_batches(seed: int, batch_size: int, sched: NoiseSchedule, size: int = 16,
                  holdout_fraction: float = 0.0, n_tokens: int = 8,
                  name: str = "data") -> Iterator[LatentBatch]:
    """Endless deterministic stream of noised-scene training batches."""
    pool, _ = holdout_split(holdout_fraction)
    rng = stream(seed, name)
    while True:
        idx = rng.integers(len(pool), size=batch_size)
        bgs = rng.uniform(0.4, 0.6, size=batch_size)
        specs = [SceneSpec(pool[i], float(bg)) for i, bg in zip(idx, bgs)]
        z = np.stack([to_latent(render_scene(s, size)) for s in specs])
        tokens = np.stack([caption_of(s, n_tokens) for s in specs])
        t = rng.integers(sched.t_steps, size=batch_size)
        eps = rng.standard_normal(z.shape)
        yield LatentBatch(z=z, t=t, eps=eps, tokens=tokens)


def eval_prompts(n: int, seed: int, holdout_fraction: float = 0.0) -> list[SceneSpec]:
    """``n`` two-object prompts drawn without replacement from the held-out pool
    (or from all two-object scenes when nothing is held out)."""
    _, held = holdout_split(holdout_fraction)
    pool = held if held else all_scenes(2)
    rng = stream(seed, "eval.prompts")
    idx = rng.choice(len(pool), size=n, replace=n > len(pool))
    return [SceneSpec(pool[int(i)]) for i in idx]
