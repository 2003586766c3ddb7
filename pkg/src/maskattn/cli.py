"""Command-line entry point: train, sample, inspect-masks, eval, grad-check.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric
verification failure.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import tensor as tn
from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .config import ConfigError, load_config
from .data import to_image, to_latent
from .diffusion import q_sample, sample, unet_forward
from .experiment import (PHASES, build_model, describe, held_out_prompts, mean_report,
                         model_checkpoint, restore, run_phase, score_model)
from .gradcheck import DEFAULT_H, DEFAULT_TOL, run_all
from .imageio import write_pgm, write_ppm
from .rng import stream
from .scenes import VOCAB, VocabularyError, caption_of, parse_prompt, render_scene

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _out_dir(cfg, override: str | None) -> Path:
    path = Path(override) if override else Path(cfg.output_dir())
    path.mkdir(parents=True, exist_ok=True)
    return path


def _fmt(x: float) -> str:
    return repr(float(x))


def cmd_train(args) -> int:
    phase = args.phase
    state, start = None, 0
    if args.resume:
        ckpt = read_checkpoint(args.resume)
        if ckpt.phase != phase:
            raise ConfigError(f"--resume checkpoint is phase {ckpt.phase!r}, not {phase!r}")
        cfg, model, state = restore(ckpt)
        start = ckpt.step
    else:
        cfg = load_config(args.config)
        if phase == "backbone":
            model = build_model(cfg)
        else:
            default_dir = Path(args.out) if args.out else Path(cfg.output_dir())
            init = Path(args.init) if args.init else default_dir / "backbone.ckpt"
            if not init.exists():
                raise ConfigError(f"phase 'gates' needs a backbone checkpoint; {init} does not exist "
                                  "(run --phase backbone first or pass --init)")
            ckpt = read_checkpoint(init)
            if ckpt.phase != "backbone":
                raise ConfigError(f"{init} is a {ckpt.phase!r} checkpoint, expected 'backbone'")
            bcfg, model, _ = restore(ckpt)
            if bcfg.model_config() != cfg.model_config() or bcfg.seed != cfg.seed:
                raise ConfigError(f"{init} was trained with a different geometry or seed")
            model.lam_train, model.lam_infer = cfg.lambda_train, cfg.lambda_infer
    out = _out_dir(cfg, args.out)

    def on_step(step, st):
        if step % cfg.checkpoint_every == 0:
            write_checkpoint(out / f"{phase}_step{step:06d}.ckpt",
                             model_checkpoint(cfg, model, phase, step, st))

    trace, state = run_phase(cfg, phase, model, state, start, on_step)
    total = cfg.train_config(phase).steps
    write_checkpoint(out / f"{phase}.ckpt", model_checkpoint(cfg, model, phase, total, state))
    csv_path = out / f"{phase}_loss.csv"
    rows = []
    if start and csv_path.exists():
        with open(csv_path) as f:
            rows = [ln for ln in f.read().splitlines()[1:] if ln and int(ln.split(",")[0]) <= start]
    rows += [f"{r.step},{_fmt(r.lr)},{_fmt(r.loss)}" for r in trace]
    with open(csv_path, "w") as f:
        f.write("step,lr,loss\n" + "".join(r + "\n" for r in rows))
    if trace:
        print(f"{phase}: steps {trace[0].step}-{trace[-1].step}, final loss {trace[-1].loss:.5f}")
    print(f"wrote {out / f'{phase}.ckpt'} and {csv_path}")
    return EXIT_OK


def _load(path):
    cfg, model, _ = restore(read_checkpoint(path))
    return cfg, model


def cmd_sample(args) -> int:
    specs = [parse_prompt(p) for p in args.prompt]
    cfg, model = _load(args.checkpoint)
    sampler = args.sampler or cfg.sampler
    steps = args.steps or (cfg.sample_steps if sampler == "ddim" else None)
    out = _out_dir(cfg, args.out_dir)
    tokens = np.stack([caption_of(s, cfg.n_tokens) for s in specs])
    imgs = sample(model, cfg.schedule(), tokens, args.seed, sampler, steps)
    for i, (s, img) in enumerate(zip(specs, imgs)):
        path = out / (f"sample_seed{args.seed}.ppm" if len(specs) == 1 else f"sample_seed{args.seed}_{i:02d}.ppm")
        write_ppm(path, to_image(img), scale=args.scale)
        print(f"{describe(s)} -> {path}")
    return EXIT_OK


def cmd_inspect_masks(args) -> int:
    spec = parse_prompt(args.prompt)
    cfg, model = _load(args.checkpoint)
    sched = cfg.schedule()
    t = cfg.t_steps // 2 if args.step is None else args.step
    if not 0 <= t < cfg.t_steps:
        raise ConfigError(f"--step must lie in [0, {cfg.t_steps})")
    z0 = to_latent(render_scene(spec, cfg.latent_size))[None]
    eps = stream(args.seed, "inspect").standard_normal(z0.shape)
    tokens = caption_of(spec, cfg.n_tokens)[None]
    with tn.no_grad():
        unet_forward(model, q_sample(z0, t, eps, sched), np.array([t]), tokens, mode="infer")
    out = _out_dir(cfg, args.out_dir)
    words = [VOCAB[int(i)].strip("<>") for i in tokens[0]]
    tok_rows, loc_rows = [], []
    print(f"gate statistics at step {t} (open = 1)")
    print(f"{'site':>4} {'tok':>3} {'word':>8} {'open_frac':>9}")
    for site, res in enumerate(model.last_blocks):
        ms = model.cfg.mid_size
        hard = np.ones((ms, ms, cfg.n_tokens)) if res.gates is None \
            else res.gates.hard.data[0]
        for k, word in enumerate(words):
            write_pgm(out / f"mask_site{site}_tok{k}_{word}.pgm",
                      np.where(hard[:, :, k] > 0.5, 255, 0).astype(np.uint8))
            frac = float(hard[:, :, k].mean())
            tok_rows.append((site, k, word, frac))
            print(f"{site:>4} {k:>3} {word:>8} {frac:>9.4f}")
        counts = hard.sum(axis=2).astype(int)
        for r in range(ms):
            for c in range(ms):
                loc_rows.append((site, r, c, int(counts[r, c])))
        print(f"site {site}: open tokens per location\n" + "\n".join(
            "  " + " ".join(f"{v:2d}" for v in row) for row in counts))
        fb = 0 if res.mask is None else res.mask.fallback_rows
        print(f"site {site}: fallback_rows {fb}")
    with open(out / "mask_stats.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["site", "token", "word", "open_fraction"])
        w.writerows([(s, k, wd, _fmt(fr)) for s, k, wd, fr in tok_rows])
    with open(out / "mask_locations.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["site", "row", "col", "open_tokens"])
        w.writerows(loc_rows)
    return EXIT_OK


def _report_rows(label, rows):
    out = [[label, r.prompt_id, r.seed, describe(r.scene), _fmt(r.report.presence),
            _fmt(r.report.binding), _fmt(r.report.placement), _fmt(r.report.total)] for r in rows]
    m = mean_report(rows)
    out.append([label, "mean", "", "", _fmt(m.presence), _fmt(m.binding), _fmt(m.placement), _fmt(m.total)])
    return out, m


def cmd_eval(args) -> int:
    if args.n <= 0:
        raise ConfigError(f"--n must be positive, got {args.n}")
    if args.seeds <= 0:
        raise ConfigError(f"--seeds must be positive, got {args.seeds}")
    cfg, model = _load(args.checkpoint)
    sampler = args.sampler or cfg.sampler
    steps = args.steps or (cfg.sample_steps if sampler == "ddim" else None)
    prompts = held_out_prompts(cfg, args.n, args.seed)
    seeds = [args.seed + k for k in range(args.seeds)]
    sched = cfg.schedule()
    rows = score_model(None if args.ground_truth else model, sched, prompts, seeds, sampler, steps,
                       cfg.latent_size)
    label = "ground_truth" if args.ground_truth else Path(args.checkpoint).stem
    table, m = _report_rows(label, rows)
    base_rows = None
    if args.baseline:
        _, base = _load(args.baseline)
        base_rows = score_model(base, sched, prompts, seeds, sampler, steps, cfg.latent_size)
        btable, bm = _report_rows("baseline:" + Path(args.baseline).stem, base_rows)
        table += btable
    out = Path(args.out) if args.out else _out_dir(cfg, None) / "eval.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["model", "prompt_id", "seed", "prompt", "presence", "binding", "placement", "total"])
        w.writerows(table)
    print(f"{label}: presence {m.presence:.4f} binding {m.binding:.4f} "
          f"placement {m.placement:.4f} total {m.total:.4f}")
    if base_rows is not None:
        paired = out.with_name(out.stem + "_paired.csv")
        diffs = [a.report.total - b.report.total for a, b in zip(rows, base_rows)]
        with open(paired, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["prompt_id", "seed", "prompt", "model_total", "baseline_total", "diff"])
            for a, b, d in zip(rows, base_rows, diffs):
                w.writerow([a.prompt_id, a.seed, describe(a.scene), _fmt(a.report.total),
                            _fmt(b.report.total), _fmt(d)])
            w.writerow(["mean", "", "", _fmt(m.total), _fmt(bm.total), _fmt(float(np.mean(diffs)))])
        print(f"baseline: presence {bm.presence:.4f} binding {bm.binding:.4f} "
              f"placement {bm.placement:.4f} total {bm.total:.4f}")
        print(f"mean paired improvement {np.mean(diffs):+.4f} -> {paired}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    load_config(args.config)  # validates the file when one is given
    results = run_all(seed=args.seed, h=args.h, tol=args.tol)
    # wall-clock time goes to stderr so stdout stays reproducible
    print(f"{'check':<20} {'max_rel_error':>14}  status")
    for r in results:
        print(f"{r.name:<20} {r.max_rel_error:>14.3e}  {'PASS' if r.passed else 'FAIL'}")
    print(f"grad-check: {sum(r.seconds for r in results):.2f}s", file=sys.stderr)
    failed = [r for r in results if not r.passed]
    if failed:
        worst = max(failed, key=lambda r: r.max_rel_error)
        print(f"FAILED: {len(failed)} check(s) above {args.tol:g}; worst is {worst.name} "
              f"({worst.max_rel_error:.3e})", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"all {len(results)} checks below {args.tol:g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="maskattn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train the backbone or the gate heads")
    t.add_argument("config", nargs="?", help="flat key: value configuration file")
    t.add_argument("--phase", choices=PHASES, required=True)
    t.add_argument("--resume", help="continue from a checkpoint of the same phase")
    t.add_argument("--init", help="backbone checkpoint for --phase gates")
    t.add_argument("--out", help="output directory (overrides config and MASKATTN_OUT)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate images for prompts")
    s.add_argument("checkpoint")
    s.add_argument("--prompt", action="append", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sampler", choices=("ddpm", "ddim"))
    s.add_argument("--steps", type=int)
    s.add_argument("--scale", type=int, default=1, help="nearest-neighbour upscaling of the PPM")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_sample)

    m = sub.add_parser("inspect-masks", help="dump hard gates as PGM and print gate statistics")
    m.add_argument("checkpoint")
    m.add_argument("--prompt", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--step", type=int)
    m.add_argument("--out-dir")
    m.set_defaults(func=cmd_inspect_masks)

    e = sub.add_parser("eval", help="compliance of sampled images on held-out prompts")
    e.add_argument("checkpoint")
    e.add_argument("--n", type=int, default=50)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--seeds", type=int, default=1, help="number of sampling seeds per prompt")
    e.add_argument("--baseline", help="checkpoint for a paired comparison")
    e.add_argument("--ground-truth", action="store_true", help="score ground-truth renders")
    e.add_argument("--sampler", choices=("ddpm", "ddim"))
    e.add_argument("--steps", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("grad-check", help="finite-difference check of every registered op")
    g.add_argument("config", nargs="?")
    g.add_argument("--tol", type=float, default=DEFAULT_TOL)
    g.add_argument("--h", type=float, default=DEFAULT_H)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"maskattn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, VocabularyError, CheckpointError, OSError, ValueError) as exc:
        print(f"maskattn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
