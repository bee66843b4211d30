"""Command-line entry point: generate, train, eval, analyze, gradcheck.

Every artifact except ``manifest.json`` is a pure function of (config, seed);
the wall-clock timestamp lives only in the manifest.
"""
from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __doc__ as _pkg_doc
from .cda import alpha_variance_sweep
from .config import VARIANTS, RunConfig
from .errors import ConfigInvalid, CorruptFile, FuzzyAlignError
from .io import atomic_write_text, read_embeddings
from .metrics import evaluate_similarity
from .synthetic import generate, load_world, save_world
from .train import (
    evaluate_model,
    gate_analysis,
    membership_analysis,
    params_from_json,
    params_to_json,
    train,
)

log = logging.getLogger("fuzzyalign")

SWEEP_KS = (1, 2, 4, 8, 12, 16)


def load_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig().validate()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigInvalid("--seed", "must be an unsigned 64-bit integer")
        cfg.scenario.seed = cfg.training.seed = cfg.alignment.seed = args.seed
    if getattr(args, "variant", None):
        cfg.training.variant = args.variant
    return cfg.validate()


def write_manifest(out, command, cfg, files, extra=None):
    manifest = {
        "command": command,
        "config_hash": cfg.hash(),
        "seed": cfg.training.seed if command != "generate" else cfg.scenario.seed,
        "files": sorted(files),
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    manifest.update(extra or {})
    atomic_write_text(Path(out) / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _report_files(out, report, stem="report"):
    atomic_write_text(Path(out) / f"{stem}.json", report.to_json())
    atomic_write_text(Path(out) / f"{stem}.txt", report.to_table())
    return [f"{stem}.json", f"{stem}.txt"]


def _csv(rows, header):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x):
    return repr(float(x))


# commands ---------------------------------------------------------------

def cmd_generate(args):
    cfg = load_config(args)
    out = Path(args.out or cfg.paths.world_dir)
    world = generate(cfg.scenario)
    save_world(world, out)
    atomic_write_text(out / "config.json", cfg.to_json())
    files = [p.name for p in out.iterdir() if p.name != "manifest.json" and not p.name.startswith(".")]
    write_manifest(out, "generate", cfg, files)
    print(f"wrote world ({world.text.features.shape[0]} text, {world.aerial.features.shape[0]} aerial) to {out}")
    return 0


def cmd_train(args):
    cfg = load_config(args)
    world = load_world(args.world or cfg.paths.world_dir)
    out = Path(args.out or cfg.paths.out_dir)
    variant = cfg.training.variant
    params, trace = train(world, variant, cfg.alignment, cfg.training)
    report = evaluate_model(params, world, variant, cfg.alignment)
    meta = {"variant": variant, "config": cfg.to_dict()}
    atomic_write_text(out / "checkpoint.json", params_to_json(params, meta))
    atomic_write_text(out / "trace.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in trace))
    atomic_write_text(out / "config.json", cfg.to_json())
    files = ["checkpoint.json", "trace.jsonl", "config.json"] + _report_files(out, report)
    write_manifest(out, "train", cfg, files, {"variant": variant})
    print(f"{variant}: loss {trace[0]['loss']:.4f} -> {trace[-1]['loss']:.4f}")
    print(report.to_table(), end="")
    return 0


def cmd_eval(args):
    out = Path(args.out or ".")
    if args.checkpoint:
        params, meta = params_from_json(Path(args.checkpoint).read_text())
        cfg = RunConfig.from_dict(meta.get("config", {}))
        world = load_world(args.world or cfg.paths.world_dir)
        report = evaluate_model(params, world, meta.get("variant", cfg.training.variant), cfg.alignment)
    else:
        if not (args.query and args.gallery):
            raise ConfigInvalid("eval", "need --query and --gallery files, or --checkpoint")
        q, qids = read_embeddings(args.query)
        g, gids = read_embeddings(args.gallery)
        if qids is None or gids is None:
            raise CorruptFile("query and gallery files must carry identity ids")
        if g.shape[0] == 0:
            raise CorruptFile(f"{args.gallery}: empty gallery")
        if q.shape[0] == 0:
            raise CorruptFile(f"{args.query}: no queries")
        if q.shape[1] != g.shape[1]:
            raise CorruptFile(f"dimension mismatch: query {q.shape[1]} vs gallery {g.shape[1]}")
        from ._kernels import cosine_matrix

        sim = cosine_matrix(q.astype(np.float64), g.astype(np.float64))
        report = evaluate_similarity(sim, qids.astype(np.int64), gids.astype(np.int64))
    _report_files(out, report)
    print(report.to_table(), end="")
    return 0


def cmd_analyze(args):
    if not args.checkpoint:
        raise ConfigInvalid("analyze", "need --checkpoint")
    params, meta = params_from_json(Path(args.checkpoint).read_text())
    cfg = RunConfig.from_dict(meta.get("config", {}))
    world = load_world(args.world or cfg.paths.world_dir)
    out = Path(args.out or ".")
    files = []

    gate = gate_analysis(params, world, cfg.alignment)
    if gate is not None:
        rows = [(int(r), int(i), _fmt(d), _fmt(a))
                for r, i, d, a in zip(gate["aerial_rows"], gate["ids"], gate["delta"], gate["alpha"])]
        atomic_write_text(out / "gate.csv", _csv(rows, ["aerial_row", "identity", "delta", "alpha"]))
        sweep = alpha_variance_sweep(gate["delta"], SWEEP_KS)
        atomic_write_text(out / "alpha_variance.csv",
                          _csv([(_fmt(k), _fmt(v)) for k, v in sweep], ["k", "alpha_variance"]))
        files += ["gate.csv", "alpha_variance.csv"]
    else:
        log.warning("world has no ground modality: no gate values to dump")

    mem = membership_analysis(params, world)
    if mem is not None:
        drop = world.dropout_fraction()
        rows = []
        for n, (r, i) in enumerate(zip(mem["aerial_rows"], mem["ids"])):
            for k in range(mem["mu_a"].shape[1]):
                rows.append((int(r), int(i), k, _fmt(drop[r]), _fmt(mem["mu_a"][n, k]),
                             _fmt(mem["mu_t"][n, k]), _fmt(mem["mu_joint"][n, k])))
        header = ["aerial_row", "identity", "query", "dropout_fraction", "mu_a", "mu_t", "mu_joint"]
        atomic_write_text(out / "membership.csv", _csv(rows, header))
        files.append("membership.csv")
    if not files:
        print("nothing to analyze: no ground modality and no token branch")
    else:
        print("wrote " + ", ".join(str(out / f) for f in files))
    return 0


def cmd_gradcheck(args):
    from .gradcheck import suite

    rows = suite(seed=args.seed or 0)
    worst = {}
    for r in rows:
        print(f"{r['loss']:4s} B={r['B']} D={r['D']}  worst mixed error {r['error']:.3e}")
        worst[r["loss"]] = max(worst.get(r["loss"], 0.0), r["error"])
    for name, err in worst.items():
        print(f"worst {name}: {err:.3e}")
    return 0 if max(worst.values()) <= args.tolerance else 1


# argument parsing -------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="fuzzyalign", description=_pkg_doc)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--seed", type=int, metavar="U64")
        p.add_argument("--out", metavar="DIR")

    p = sub.add_parser("generate", help="write a synthetic world")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one variant on a world")
    common(p)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--world", metavar="DIR")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score query/gallery files or a checkpoint")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--query", metavar="PATH")
    p.add_argument("--gallery", metavar="PATH")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--world", metavar="DIR")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="dump gate and membership distributions")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--world", metavar="DIR")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="run the gradient check suite")
    p.add_argument("--seed", type=int, metavar="U64")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        print(f"error: invalid config field {exc.field}: {exc.message}", file=sys.stderr)
        return 2
    except (FuzzyAlignError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
