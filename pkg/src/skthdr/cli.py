"""Command-line entry point: ``skthdr {train,infer,gradcheck,synth,eval}``.

Every subcommand exits 0 only if the work it was asked to do succeeded and
all checks it ran passed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import TrainConfig
from .data import generate_scene, read_manifest, save_scene, simulate_exposures, write_manifest
from .errors import CheckpointError, ConfigError, FormatError
from .metrics import mean_record, write_csv
from .raster import write_named

log = logging.getLogger("skthdr")


def _load_config(path: Optional[str], overrides: List[str]) -> TrainConfig:
    text = Path(path).read_text() if path else ""
    if overrides:
        text += "\n" + "\n".join(overrides)
    return TrainConfig.from_text(text)


def cmd_train(args) -> int:
    from .train import train

    cfg = _load_config(args.config, args.set)
    if args.out:
        cfg = cfg.replace(out_dir=args.out)
    report = train(cfg, resume=args.resume)
    print(json.dumps(report.metrics, indent=2, sort_keys=True))
    violations = sum(d["violations"] for d in report.detachment.values())
    if violations:
        log.error("%d detachment violations", violations)
        return 1
    return 0


def cmd_infer(args) -> int:
    from .train import infer_scene_file

    out, rec = infer_scene_file(args.ckpt, args.input, mu=args.mu, pattern=args.pattern)
    if args.output:
        write_named(args.output, {"hdr": out})
    print(json.dumps(rec.__dict__ if rec else {}, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradchecks import format_table, gradcheck_suite

    results = gradcheck_suite(args.only or None)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return 1
    print(f"all {len(results)} checks passed")
    return 0


def cmd_synth(args) -> int:
    from .train import scene_config, split_seeds

    cfg = _load_config(args.config, args.set)
    scfg = scene_config(cfg)
    out = Path(args.out)
    splits = {}
    for split, n in (("train", cfg.n_train), ("test", cfg.n_test)):
        (out / split).mkdir(parents=True, exist_ok=True)
        names = []
        for seed in split_seeds(cfg, split, n):
            scene = generate_scene(scfg, seed)
            name = f"{split}/scene_{seed:06d}.scn"
            save_scene(out / name, scene, simulate_exposures(scene))
            names.append(name)
        splits[split] = names
    write_manifest(out / "manifest.json", splits, scfg, {"format": cfg.format, "bayer_pattern": cfg.bayer_pattern})
    print(f"wrote {sum(map(len, splits.values()))} scenes to {out}")
    return 0


def cmd_eval(args) -> int:
    from .train import infer_scene_file

    data = Path(args.data)
    manifest = read_manifest(data / "manifest.json")
    names = manifest["splits"].get(args.split)
    if not names:
        raise FormatError(f"manifest has no {args.split!r} scenes")
    pattern = manifest.get("bayer_pattern", "RGGB")
    records = []
    for name in names:
        _, rec = infer_scene_file(args.ckpt, data / name, mu=args.mu, pattern=pattern)
        rec.sample_id = name
        records.append(rec)
    mean = mean_record(records)
    summary = {"n": len(records), "psnr_l": mean.psnr_l, "psnr_mu": mean.psnr_mu, "ssim": mean.ssim}
    if args.report:
        report = Path(args.report)
        report.parent.mkdir(parents=True, exist_ok=True)
        report.write_text(json.dumps(summary, indent=2, sort_keys=True))
        write_csv(report.with_suffix(".csv"), records + [mean])
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0 if np.isfinite(mean.psnr_mu) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skthdr")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the configured arms and write reports")
    t.add_argument("--config")
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="run the student on one scene file")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--output", help="write the reconstruction as a named-tensor file")
    i.add_argument("--mu", type=float, default=5000.0)
    i.add_argument("--pattern", default="RGGB")
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    g.add_argument("--only", nargs="*")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write synthetic scenes and a manifest")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a synthesised split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--report", help="JSON summary path; per-scene CSV is written alongside")
    e.add_argument("--mu", type=float, default=5000.0)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
