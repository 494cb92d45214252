"""Command line entry point.

Subcommands: build-codebook, train-decoder, train-dit, sample, bench-cache,
verify, tokenize, ablate. Every command takes --config plus targeted
overrides and is deterministic given (config, seed) in serial mode.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np
import torch

from . import bench
from .config import RunConfig, load_config
from .container import ModelBundle, load_bundle, save_bundle
from .diffusion import make_schedule
from .errors import TokenfoldError
from .geometry import atoms_from_frames
from .metrics import evaluate_frames
from .pdbio import parse_pdb, write_pdb
from .pipeline import build_codebook, fit_decoder, make_corpus, train_models
from .sampler import SamplerConfig, sample
from .tokenizer import Codebook, tokenize, tokens_to_text


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "eps", None) is not None:
        cfg.sampler.eps_cache = args.eps
    if getattr(args, "w", None) is not None:
        cfg.tokenizer.w = args.w
    if getattr(args, "gate_mode", None) is not None:
        cfg.sampler.gate_mode = args.gate_mode
    return cfg


def cmd_build_codebook(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    cb = build_codebook(cfg)
    out = cfg.resolve(cfg.codebook_path)
    cb.save(out)
    print(f"codebook K={cb.K} d={cb.d} -> {out}")
    return 0


def cmd_train_decoder(args) -> int:
    cfg = _apply_overrides(load_config(args.config, require=("codebook_path",)), args)
    cb = Codebook.load(cfg.resolve(cfg.codebook_path))
    decoder, cb, history = fit_decoder(cfg, cb, log=sys.stdout if args.verbose else None)
    cb.save(cfg.resolve(cfg.codebook_path))
    torch.save(decoder.state_dict(), cfg.resolve(cfg.decoder_path))
    print(f"decoder final loss {history[-1]:.6f} -> {cfg.resolve(cfg.decoder_path)}")
    return 0


def cmd_train_dit(args) -> int:
    """Train the whole stack and write the versioned model container."""
    cfg = _apply_overrides(load_config(args.config), args)
    models, _ = train_models(cfg, log=sys.stdout if args.verbose else None)
    out = cfg.resolve(cfg.container_path)
    save_bundle(out, models)
    print(f"model container -> {out}")
    return 0


def _load_models(cfg: RunConfig) -> ModelBundle:
    return load_bundle(cfg.resolve(cfg.container_path))


def cmd_sample(args) -> int:
    cfg = _apply_overrides(load_config(args.config, require=("container_path",)), args)
    models = _load_models(cfg)
    sched = make_schedule(cfg.schedule.T, cfg.schedule.kind)
    length = args.length or cfg.corpus.length
    sc = bench.sampler_config(
        cfg, length, cfg.seed, class_label=args.class_label
    )
    traj, frames = sample(sc, models, sched)
    report = evaluate_frames(frames)
    out_dir = Path(args.out or cfg.data_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pdb_path = out_dir / f"sample_L{length}_seed{cfg.seed}.pdb"
    pdb_path.write_text(write_pdb(atoms_from_frames(frames)))
    csv_path = out_dir / f"trajectory_L{length}_seed{cfg.seed}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "t", "rho", "pair_updates", "projection_ops", "bytes", "wall_ns"])
        for i, rec in enumerate(traj.steps):
            writer.writerow(
                [i, rec.t, f"{rec.rho:.6f}", rec.pair_updates, rec.projection_ops,
                 rec.bytes_touched, rec.wall_ns]
            )
    print(f"structure -> {pdb_path}")
    print(f"trajectory -> {csv_path}")
    print(
        f"valid={report.valid} bond_fraction={report.bond_fraction_ok:.3f} "
        f"clashes={report.clash_count} rg={report.radius_of_gyration:.2f}"
    )
    return 0


def cmd_bench_cache(args) -> int:
    cfg = _apply_overrides(load_config(args.config, require=("container_path",)), args)
    models = _load_models(cfg)
    sched = make_schedule(cfg.schedule.T, cfg.schedule.kind)
    lengths = (args.length,) if args.length else bench.LENGTH_SWEEP
    out_dir = Path(args.out or cfg.data_dir / "bench")
    rows = bench.bench_cache(cfg, models, sched, out_dir, lengths=lengths,
                             class_label=args.class_label)
    print(f"bench CSVs -> {out_dir}")
    for row in rows:
        print(
            f"L={row['L']} eps={row['eps']} seed={row['seed']} "
            f"pair={row['total_pair_updates']} rmsd={row['final_rmsd_vs_eps0']:.3f} "
            f"valid={row['valid']}"
        )
    return 0


def cmd_verify(args) -> int:
    from . import verify

    models = None
    codebook_path = None
    if args.config:
        cfg = load_config(args.config)
        container = cfg.resolve(cfg.container_path)
        if container.exists():
            models = load_bundle(container)
        cb_path = cfg.resolve(cfg.codebook_path)
        if cb_path.exists():
            codebook_path = cb_path
    results = verify.run_all(codebook_path=codebook_path, models=models)
    failed = 0
    for result in results:
        print(result.line())
        failed += not result.passed
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_tokenize(args) -> int:
    cfg = _apply_overrides(load_config(args.config, require=("codebook_path",)), args)
    cb = Codebook.load(cfg.resolve(cfg.codebook_path))
    from .geometry import frames_from_atoms

    text = Path(args.pdb).read_text()
    for chain_id, backbone in parse_pdb(text).items():
        tokens = tokenize(frames_from_atoms(backbone), cb, pool_k=cfg.tokenizer.pool_k)
        print(f"{chain_id} {tokens_to_text(tokens)}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    which = args.which
    if which in ("variant_table", "guidance"):
        cfg = load_config(args.config, require=("container_path",))
        models = _load_models(cfg)
        sched = make_schedule(cfg.schedule.T, cfg.schedule.kind)
    if which == "variant_table":
        rows = bench.variant_table(cfg, models, sched, length=args.length or 64)
        out = cfg.data_dir / "variants.csv"
        bench.write_variant_table(out, rows)
        for row in rows:
            print(
                f"{row['variant']}: validity={row['validity_pct']:.1f}% "
                f"step={row['mean_step_ms']:.2f}ms sample={row['mean_sample_s']:.2f}s"
            )
        print(f"-> {out}")
    elif which == "guidance":
        for row in bench.guidance_sweep(cfg, models, sched, length=args.length or 64):
            print(f"w={row['w']}: validity={row['validity_pct']:.1f}%")
    elif which == "granularity":
        for row in bench.granularity_sweep(cfg):
            print(
                f"pool_k={row['pool_k']}: K={row['K']} "
                f"quantization_error={row['quantization_error']:.4f} used={row['codebook_used']}"
            )
    elif which == "dimension":
        for row in bench.dimension_sweep(cfg):
            print(f"d={row['d']}: decoder_loss={row['final_decoder_loss']:.5f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tokenfold")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="YAML run config")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--eps", type=float, help="override sampler eps_cache")
        p.add_argument("--w", type=int, help="override tokenizer window")
        p.add_argument("--gate-mode", dest="gate_mode", choices=("per-token", "global"))
        return p

    common(sub.add_parser("build-codebook", help="fit the k-means codebook"))
    p = common(sub.add_parser("train-decoder", help="train the frame-assembly decoder"))
    p.add_argument("--verbose", action="store_true")
    p = common(sub.add_parser("train-dit", help="train the full model stack"))
    p.add_argument("--verbose", action="store_true")

    p = common(sub.add_parser("sample", help="generate one structure"))
    p.add_argument("--length", type=int)
    p.add_argument("--class", dest="class_label", type=int, default=None)
    p.add_argument("--out", help="output directory")

    p = common(sub.add_parser("bench-cache", help="cache benchmark sweep"))
    p.add_argument("--length", type=int, help="restrict to one length")
    p.add_argument("--class", dest="class_label", type=int, default=0)
    p.add_argument("--out", help="output directory")

    p = common(sub.add_parser("verify", help="run invariant checks"), config_required=False)

    p = common(sub.add_parser("tokenize", help="tokenize a PDB file"))
    p.add_argument("pdb", help="input PDB path")

    p = common(sub.add_parser("ablate", help="ablation harnesses"))
    p.add_argument("which", choices=("variant_table", "guidance", "granularity", "dimension"))
    p.add_argument("--length", type=int)
    return parser


COMMANDS = {
    "build-codebook": cmd_build_codebook,
    "train-decoder": cmd_train_decoder,
    "train-dit": cmd_train_dit,
    "sample": cmd_sample,
    "bench-cache": cmd_bench_cache,
    "verify": cmd_verify,
    "tokenize": cmd_tokenize,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except TokenfoldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
