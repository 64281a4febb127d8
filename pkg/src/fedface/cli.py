"""Command-line entry point: ``fedface {run,compare,gridsearch,gradcheck,...}``."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import sim
from .config import ConfigError, ExperimentConfig, Seeds, load_config, reference_config
from .data import generate
from .fed_core import load_checkpoint
from .fv import grid_search
from .model import Batch, DivergenceError, gradient_check, init_backbone, init_head

OUT_ENV = "FEDFACE_OUT"
FD_SWEEP = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
GRADCHECK_TOL = 1e-4

CSV_SCHEMA = {
    "metrics.csv": {
        "round": "training round, 1-based",
        "party": "trainer index",
        "loss": "training loss of that party, exponentially smoothed with factor 0.99",
        "eta": "learning rate used in the round",
        "w<i>": "aggregation weighting in force after the round",
        "score": "verification accuracy of the global backbone on the party's "
                 "evaluation shard (empty when not evaluated that round)",
    },
    "fv_trace.csv": {
        "round": "training round after which the snapshot was taken",
        "failed": "1 if a validator failed and the weighting was left unchanged",
        "t_hat": "index of the selected candidate (0 is the weighting in force)",
        "cand<t>_w<i>": "candidate weightings",
        "S_v<v>_c<t>": "raw score of validator v for candidate t",
        "Snorm_v<v>_c<t>": "normalized score",
        "w<i>": "weighting after smoothing",
    },
    "gridsearch.csv": {
        "w0,w1,w2": "lattice weighting",
        "score_v<v>": "raw score of validator v",
        "total": "sum of raw scores",
    },
    "compare.csv": {
        "method": "training method",
        "shard": "evaluation shard index",
        "score": "final verification accuracy",
        "delta": "score minus the centralized baseline's score",
        "final_loss": "size-weighted final smoothed training loss",
    },
}


def _fail(msg: str, code: int = 2) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed_override", None) is not None:
        s = args.seed_override
        cfg = cfg.replace(seeds=Seeds(s, s + 1, s + 2, s + 3))
    if getattr(args, "threads", None):
        cfg = cfg.replace(threads=args.threads)
    return cfg


def _out_root(args, cfg: ExperimentConfig) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, cfg.output_dir))


def _write_schema(out: Path) -> None:
    (out / "csv_schema.json").write_text(json.dumps(CSV_SCHEMA, indent=2) + "\n")


def cmd_run(args) -> int:
    try:
        cfg = _load(args)
    except ConfigError as exc:
        return _fail(str(exc))
    out = _out_root(args, cfg) / f"{cfg.method}-{cfg.digest()}"
    try:
        result = sim.run(cfg, out_dir=out)
    except DivergenceError as exc:
        return _fail(f"diverged: {exc}", 3)
    _write_schema(out)
    agg = result.aggregate_loss
    print(f"{cfg.method}: {cfg.hyper.R} rounds, final aggregate loss {agg:.6f}")
    print(f"outputs in {out}")
    return 0


def format_comparison(comp: sim.Comparison) -> str:
    lines = [f"{'method':<12} {'shard':>5} {'score':>9} {'delta':>9}"]
    for row in comp.rows():
        lines.append(f"{row['method']:<12} {row['shard']:>5} {row['score']:>9.4f} {row['delta']:>+9.4f}")
    return "\n".join(lines)


def cmd_compare(args) -> int:
    try:
        cfg = _load(args)
    except ConfigError as exc:
        return _fail(str(exc))
    out = _out_root(args, cfg) / f"compare-{cfg.digest()}"
    try:
        comp = sim.compare(cfg, out_dir=out)
    except DivergenceError as exc:
        return _fail(f"diverged: {exc}", 3)
    sim.write_comparison(out / "compare.csv", comp)
    _write_schema(out)
    print(format_comparison(comp))
    return 0


def _config_for_checkpoint(ckpt: Path, explicit) -> ExperimentConfig:
    if explicit:
        return load_config(explicit)
    for d in (ckpt.parent, ckpt.parent.parent):
        if (d / "config.yaml").is_file():
            return load_config(d / "config.yaml")
    raise ConfigError(f"no config.yaml found next to {ckpt}; pass --config")


def cmd_gridsearch(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        return _fail(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    if len(ckpt.thetas) != 3:
        return _fail(f"grid search needs a 3-party checkpoint, this one has {len(ckpt.thetas)}")
    try:
        cfg = _config_for_checkpoint(ckpt_path, args.config)
    except ConfigError as exc:
        return _fail(str(exc))
    if args.resolution < 2:
        return _fail("--resolution must be at least 2")
    _, shards = generate(cfg.data)
    validators = sim.build_validators(cfg, shards)
    surface = grid_search(ckpt.thetas, validators, args.resolution)
    out = Path(args.out) if args.out else ckpt_path.with_suffix(f".grid{args.resolution}.csv")
    write_surface(out, surface, len(validators))
    best = max(surface, key=lambda k: surface[k].sum())
    print(f"{len(surface)} lattice points -> {out}")
    print("argmax weighting:", ", ".join(f"{x:.3f}" for x in best),
          f"total score {surface[best].sum():.6f}")
    return 0


def write_surface(path, surface, n_validators: int) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["w0", "w1", "w2"] + [f"score_v{v}" for v in range(n_validators)] + ["total"])
        for pt, scores in surface.items():
            wr.writerow([repr(x) for x in pt] + [repr(float(s)) for s in scores]
                        + [repr(float(scores.sum()))])


def gradcheck_instances(cfg: ExperimentConfig, n: int, batch_size: int = 16):
    """Seeded (backbone, head, theta, omega, batch) tuples from the config's model."""
    parties, _ = generate(cfg.data)
    party = parties[0]
    h_spec = cfg.head.spec(cfg.backbone.feature_dim, party.num_classes)
    for seed in np.random.SeedSequence(cfg.seeds.init).spawn(n):
        rng = np.random.default_rng(seed)
        theta = init_backbone(cfg.backbone, rng)
        omega = init_head(h_spec, rng, sigma=0.1)
        idx = rng.choice(len(party), size=min(batch_size, len(party)), replace=False)
        batch = Batch(party.train.inputs[idx], party.train.labels[idx])
        yield cfg.backbone, h_spec, theta, omega, batch


def cmd_gradcheck(args) -> int:
    try:
        cfg = _load(args)
    except ConfigError as exc:
        return _fail(str(exc))
    instances = list(gradcheck_instances(cfg, args.instances))
    print("fd_step sweep on instance 0:")
    for step in FD_SWEEP:
        err = gradient_check(*instances[0], fd_step=step, perturb=args.perturb)
        print(f"  fd_step={step:.0e}  max_rel_error={err:.3e}")
    worst = max(gradient_check(*inst, fd_step=1e-5, perturb=args.perturb) for inst in instances)
    ok = worst < GRADCHECK_TOL
    print(f"{len(instances)} instances at fd_step=1e-05: max_rel_error={worst:.3e} "
          f"({'PASS' if ok else 'FAIL'}, tolerance {GRADCHECK_TOL:.0e})")
    return 0 if ok else 1


def cmd_reference_config(args) -> int:
    text = reference_config()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_schema(args) -> int:
    print(json.dumps(CSV_SCHEMA, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedface", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="experiment YAML file")
        sp.add_argument("--out", help=f"output root (default: ${OUT_ENV} or config output_dir)")
        sp.add_argument("--seed-override", type=int, help="reseed all four streams from N")
        sp.add_argument("--threads", type=int, help="worker threads for trainers")
        return sp

    with_config(sub.add_parser("run", help="train one method")).set_defaults(func=cmd_run)
    with_config(sub.add_parser("compare", help="train all five methods")).set_defaults(
        func=cmd_compare)

    g = sub.add_parser("gridsearch", help="score a lattice of weightings on a checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--resolution", type=int, default=10)
    g.add_argument("--config", help="config used for the checkpoint's run")
    g.add_argument("--out", help="CSV path")
    g.set_defaults(func=cmd_gridsearch)

    gc = with_config(sub.add_parser("gradcheck", help="finite-difference gradient check"))
    gc.add_argument("--instances", type=int, default=20)
    gc.add_argument("--perturb", type=float, default=0.0, help=argparse.SUPPRESS)
    gc.set_defaults(func=cmd_gradcheck)

    rc = sub.add_parser("reference-config", help="write the default config with all fields")
    rc.add_argument("--out")
    rc.set_defaults(func=cmd_reference_config)

    sub.add_parser("schema", help="print CSV column documentation").set_defaults(func=cmd_schema)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
