"""Command-line entry point: gen, train, audit, report and oracle-check."""
from __future__ import annotations

import argparse
import ctypes
import json
import os
import sys

import numpy as np

from . import __version__
from . import reports
from .audit import AuditConfig, observations_of, run_audit
from .errors import ConfigurationError, VQAuditError
from .tileworld import dataset_digest, generate_episodes, read_dataset, write_dataset
from .vqcodec import (TrainConfig, build_model, build_oracle_model, checkpoint_digest, frames_to_input,
                      load_checkpoint, reconstruction_mse, save_checkpoint, train)


def _add_audit_flags(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--act-threshold", type=float, default=0.5)
    p.add_argument("--area-threshold", type=int, default=9)
    p.add_argument("--embedder", choices=("descriptor", "encoder"), default="descriptor")
    p.add_argument("--baseline-trials", type=int, default=10)
    p.add_argument("--tsne-top-k", type=int, default=10)
    p.add_argument("--tsne-min-count", type=int, default=50)
    p.add_argument("--tsne-max-per-code", type=int, default=100)
    p.add_argument("--tsne-iters", type=int, default=1000)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--target", choices=("distance", "inner"), default="distance",
                   help="Grad-CAM target scalar for a code")
    p.add_argument("--layer", type=int, default=None, help="encoder layer index for Grad-CAM")
    p.add_argument("--max-observations", type=int, default=None)


def _audit_config(args, **extra):
    return AuditConfig(
        seed=args.seed, act_threshold=args.act_threshold, area_threshold=args.area_threshold,
        embedder=args.embedder, baseline_trials=args.baseline_trials, tsne_top_k=args.tsne_top_k,
        tsne_min_count=args.tsne_min_count, tsne_max_per_code=args.tsne_max_per_code,
        tsne_iters=args.tsne_iters, perplexity=args.perplexity, workers=args.workers,
        target=args.target, layer=args.layer, max_observations=args.max_observations, **extra,
    )


def build_parser():
    parser = argparse.ArgumentParser(prog="vqaudit", description="Audit what the codes of a VQ autoencoder represent.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a tile-world dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--episodes", type=int, default=50)
    g.add_argument("--steps", type=int, default=40)
    g.add_argument("--rows", type=int, default=7)

    t = sub.add_parser("train", help="train the VQ autoencoder")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--codebook-size", type=int, default=64)
    t.add_argument("--dim", type=int, default=16)
    t.add_argument("--steps", type=int, default=5000)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--lr", type=float, default=3e-4)
    t.add_argument("--beta", type=float, default=0.25)
    t.add_argument("--subset", type=int, default=1000, help="number of training frames (0 = all)")
    t.add_argument("--log-every", type=int, default=100)

    a = sub.add_parser("audit", help="run the code audit and write reports")
    a.add_argument("--dataset", required=True)
    a.add_argument("--checkpoint", required=True)
    _add_audit_flags(a)

    r = sub.add_parser("report", help="re-render figures from a saved report directory")
    r.add_argument("--bundle", required=True)
    r.add_argument("--out", default=None)

    o = sub.add_parser("oracle-check", help="audit a hand-built oracle codec and check purity/consistency")
    o.add_argument("--dataset", default=None, help="existing dataset (default: generate one)")
    o.add_argument("--episodes", type=int, default=50)
    o.add_argument("--steps", type=int, default=20)
    o.add_argument("--codebook-size", type=int, default=None)
    o.add_argument("--min-consistency", type=float, default=0.99)
    _add_audit_flags(o)
    return parser


def training_frames(episodes, subset, seed):
    frames = np.array([obs.frame for _, _, obs in observations_of(episodes)])
    if subset and subset < len(frames):
        rng = np.random.Generator(np.random.PCG64(seed))
        frames = frames[np.sort(rng.choice(len(frames), size=subset, replace=False))]
    return frames


def cmd_gen(args):
    episodes = generate_episodes(args.seed, args.episodes, args.steps, rows=args.rows)
    manifest = write_dataset(episodes, args.out, seed=args.seed)
    print(f"wrote {manifest.transitions} transitions from {manifest.episodes} episodes to {args.out}")
    return 0


def cmd_train(args):
    episodes = read_dataset(args.dataset)
    frames = training_frames(episodes, args.subset, args.seed)
    h, w = frames.shape[1:3]
    model = build_model(args.codebook_size, args.dim, args.seed, (h, w))
    config = TrainConfig(args.batch_size, args.steps, args.lr, args.beta, args.seed)
    x = frames_to_input(frames)
    before = reconstruction_mse(model, x)

    def log(step, recon, cb, commit):
        print(f"step {step:5d}  recon {recon:.5f}  codebook {cb:.5f}  commitment {commit:.5f}", flush=True)

    train(model, frames, config, log=log, log_every=args.log_every)
    after = reconstruction_mse(model, x)
    # no paths: the checkpoint bytes should not depend on where the run happened
    hyper = {k: v for k, v in vars(args).items() if k not in ("dataset", "out", "argv", "command")}
    model.meta = {"dataset_checksum": dataset_digest(args.dataset), "train": hyper | {"subset_size": len(frames)},
                  "mse_initial": before, "mse_final": after}
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_checkpoint(model, args.out)
    print(f"reconstruction MSE {before:.5f} -> {after:.5f} ({100 * (1 - after / before):.1f}% lower); saved {args.out}")
    return 0


def _emit(bundle, args, extra_files=None):
    manifest = reports.emit_reports(bundle, args.out, command=" ".join(["vqaudit", *args.argv]),
                                    extra_files=extra_files)
    s = reports.summary(bundle)
    print(f"{bundle.n_observations} observations, {bundle.total_pairs} (observation, code) pairs, "
          f"{bundle.kept} kept, {bundle.dropped} all-zero ({100 * bundle.zero_fraction:.1f}%)")
    print(f"{s['active_codes']} active codes, {len(bundle.crops)} crops, baseline consistency {s['baseline']}")
    print(f"{len(manifest['outputs'])} files written to {args.out}")
    return s


def cmd_audit(args):
    reports.ensure_writable(args.out)
    episodes = read_dataset(args.dataset)
    model = load_checkpoint(args.checkpoint)
    bundle = run_audit(episodes, model, _audit_config(args), dataset_digest(args.dataset),
                       checkpoint_digest(args.checkpoint))
    _emit(bundle, args)
    return 0


def cmd_report(args):
    manifest = reports.render_bundle(args.bundle, args.out)
    print(f"rendered {len(manifest['outputs'])} files into {args.out or args.bundle}")
    return 0


def check_oracle(bundle, min_consistency=0.99):
    """Problems found in an oracle-model audit (empty list = pass)."""
    problems = []
    for code, p in bundle.purity.codes.items():
        if p.purity != 1.0:
            problems.append(f"code {code}: purity {p.purity}")
    for code, e in bundle.consistency.codes.items():
        if e.score < min_consistency:
            problems.append(f"code {code}: consistency {e.score:.6f} < {min_consistency}")
    if bundle.dropped:
        problems.append(f"{bundle.dropped} selected codes produced all-zero heatmaps")
    if bundle.probe_nonzero:
        problems.append(f"{bundle.probe_nonzero} unselected codes produced nonzero heatmaps")
    if not bundle.purity.codes:
        problems.append("no crops were produced")
    return problems


def cmd_oracle_check(args):
    reports.ensure_writable(args.out)
    if args.dataset:
        episodes = read_dataset(args.dataset)
        digest = dataset_digest(args.dataset)
    else:
        episodes = generate_episodes(args.seed, args.episodes, args.steps)
        digest = None
    model = build_oracle_model(codebook_size=args.codebook_size)
    bundle = run_audit(episodes, model, _audit_config(args, probe_unselected=True), digest, "oracle")
    problems = check_oracle(bundle, args.min_consistency)
    result = {"passed": not problems, "problems": problems,
              "codes": len(bundle.purity.codes), "unselected_pairs": bundle.probe_total}
    _emit(bundle, args, {"oracle_check.json": (json.dumps(result, indent=1, sort_keys=True) + "\n").encode()})
    for p in problems:
        print("FAIL", p)
    print("oracle-check", "passed" if not problems else "failed")
    return 0 if not problems else 1


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "audit": cmd_audit, "report": cmd_report,
            "oracle-check": cmd_oracle_check}


def _tune_allocator():
    """Keep large numpy temporaries on the heap instead of fresh mmaps.

    Training allocates and frees the same multi-megabyte buffers every step;
    with glibc defaults each one is a new mmap and a round of page faults.
    No-op where glibc is unavailable.
    """
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 31)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    _tune_allocator()
    args = build_parser().parse_args(argv)
    args.argv = argv
    try:
        return COMMANDS[args.command](args)
    except (VQAuditError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
