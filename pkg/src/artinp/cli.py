"""Command-line entry point: ``artinp <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import PRESETS, load_config


def _common(p):
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--preset", choices=sorted(PRESETS), default="clinical",
                   help="base settings before --config and ARTINP_* overrides (default: clinical)")
    p.add_argument("--data-root", help="patient folders with cbct/ct NIfTI files")
    p.add_argument("--out-root", help="directory for all pipeline outputs")
    p.add_argument("--seed", type=int, help="patient split seed")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="artinp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write synthetic CT/pseudo-CBCT phantom volumes")
    _common(p)
    p.add_argument("--patients", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--phantom-seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=20.0, help="CBCT noise sigma (HU)")

    for name, help_ in [("prepare-data", "validate volumes, split patients, write TIFF slices"),
                        ("make-gaps", "cut patient-wise gaps into test CBCT volumes"),
                        ("train-completion", "train the gap-completion GAN"),
                        ("train-translation", "train the CBCT-to-sCT GAN")]:
        _common(sub.add_parser(name, help=help_))

    p = sub.add_parser("infer", help="inpaint test CBCTs and translate them to sCT")
    _common(p)
    p.add_argument("--mode", choices=pipeline.MODES, help="default: config mode")
    p.add_argument("--completion-ckpt")
    p.add_argument("--translation-ckpt")

    p = sub.add_parser("evaluate", help="MAE%%, PSNR and SSIM of sCT against CT")
    _common(p)
    p.add_argument("--modes", nargs="+", choices=pipeline.MODES, default=list(pipeline.MODES))
    p.add_argument("--allow-hash-mismatch", action="store_true")
    return parser


def _config(args):
    overrides = {}
    if args.data_root:
        overrides["data_root"] = args.data_root
    if args.out_root:
        overrides["out_root"] = args.out_root
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    return load_config(args.config, args.preset, overrides)


def run(args) -> int:
    cfg = _config(args)
    cmd = args.command
    if cmd == "phantom":
        from pathlib import Path

        from .phantom import Degradation, PhantomSpec, write_dataset

        root = Path(cfg.data_root)
        if root.exists() and any(root.iterdir()) and not args.force:
            raise pipeline.ProvenanceError(f"{root} is not empty; pass --force to overwrite")
        spec = PhantomSpec((args.size,) * 3, args.patients, seed=args.phantom_seed,
                           degradation=Degradation(noise_sigma=args.noise))
        ids = write_dataset(spec, root)
        print(f"wrote {len(ids)} phantom patients to {root}")
    elif cmd == "prepare-data":
        res = pipeline.prepare_data(cfg, args.force)
        s = res["split"]
        print(f"split train/val/test = {len(s.train_ids)}/{len(s.val_ids)}/{len(s.test_ids)}; "
              f"slices in {res['dir']}")
    elif cmd == "make-gaps":
        entries = pipeline.make_gaps(cfg, args.force)
        for e in entries:
            print(f"{e['patient']}: x_start={e['x_start']} width={e['width']}")
    elif cmd == "train-completion":
        s = pipeline.train_completion_stage(cfg, args.force)
        print(f"completion: val recon {s['val_initial']:.5f} -> {s['val_final']:.5f}; best {s['best']}")
    elif cmd == "train-translation":
        s = pipeline.train_translation_stage(cfg, args.force)
        print(f"translation: val MAE% {s['val_initial']['mae_pct']:.3f} -> "
              f"{s['val_final']['mae_pct']:.3f}; best {s['best']}")
    elif cmd == "infer":
        out = pipeline.infer_stage(cfg, cfg.mode, args.completion_ckpt, args.translation_ckpt,
                                   args.force)
        print(f"{cfg.mode} inference written to {out}")
    elif cmd == "evaluate":
        _, table = pipeline.evaluate_stage(cfg, args.modes, args.allow_hash_mismatch, args.force)
        print(table)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (pipeline.PipelineError, FileNotFoundError, KeyError, ValueError, TypeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "command": args.command,
                          "message": str(exc).strip("'\"")}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
