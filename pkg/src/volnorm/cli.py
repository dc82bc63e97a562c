"""``volnorm`` command line: bench, gradcheck, synth, predict."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, datapipe, gradcheck, objective, tensor, trainer


def _cmd_bench(args) -> int:
    plan = bench.load_plan(args.plan)
    if args.seeds:
        plan.seeds = [int(s) for s in args.seeds.split(",")]
    reports = bench.run_plan(plan, parallel=args.parallel, workers=args.workers,
                             checkpoint_dir=args.checkpoints, progress=print)
    md = bench.emit_report(reports, "markdown")
    csv_text = bench.emit_report(reports, "csv")
    if args.out:
        Path(args.out).write_text(md)
    if args.csv:
        Path(args.csv).write_text(csv_text)
    if not args.out and not args.csv:
        sys.stdout.write(md)
    return 0 if all(not r.status.startswith("failed") for r in reports) else 1


def _cmd_gradcheck(args) -> int:
    results = gradcheck.all_suites(seed=args.seed)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("ALL PASS" if ok else "SOME SUITES FAILED")
    return 0 if ok else 1


def _cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = datapipe.SynthSpec(slices=args.slices, height=args.height, width=args.width,
                              seed=args.seed)
    files = []
    for i, vol in enumerate(datapipe.generate_dataset(spec, args.count)):
        vname, mname = f"volume_{i:03d}.nrrd", f"mask_{i:03d}.nrrd"
        datapipe.write_nrrd(out / vname, vol.intensities.astype(np.float32))
        datapipe.write_nrrd(out / mname, vol.mask * np.uint8(255))
        files.append((vname, mname))
    datapipe.write_manifest(out / "manifest.txt", spec, args.count, files)
    print(f"wrote {args.count} volumes to {out}")
    return 0


def _cmd_predict(args) -> int:
    net = trainer.load_net(args.checkpoint)
    vol = datapipe.read_nrrd(args.volume, args.mask)
    pred = trainer.predict_volume(net, vol)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    blob = tensor.tensor_to_bytes(pred.reshape(1, *pred.shape, 1))
    (out / "mask.tensor").write_bytes(blob)
    datapipe.write_pgm_slices(pred, out / "slices")
    print(f"foreground voxels: {int(pred.sum())} of {pred.size}")
    if args.mask:
        print(f"dice: {objective.dice_hard(pred, vol.mask):.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="volnorm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="run a normalization comparison plan")
    b.add_argument("--plan", required=True, help="plan file (INI sections plan/net/train/data)")
    b.add_argument("--out", help="markdown report path")
    b.add_argument("--csv", help="CSV report path")
    b.add_argument("--seeds", help="comma-separated seeds overriding the plan")
    b.add_argument("--checkpoints", help="directory for per-run checkpoints")
    mode = b.add_mutually_exclusive_group()
    mode.add_argument("--serial", dest="parallel", action="store_false",
                      help="one run at a time (default; clean timings)")
    mode.add_argument("--parallel", dest="parallel", action="store_true",
                      help="run methods concurrently on worker threads")
    b.add_argument("--workers", type=int, default=4)
    b.set_defaults(func=_cmd_bench, parallel=False)

    g = sub.add_parser("gradcheck", help="run every finite-difference suite")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic NRRD dataset and manifest")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=20)
    s.add_argument("--out", default="synth")
    s.add_argument("--slices", type=int, default=16)
    s.add_argument("--height", type=int, default=32)
    s.add_argument("--width", type=int, default=32)
    s.set_defaults(func=_cmd_synth)

    q = sub.add_parser("predict", help="segment a volume with a checkpoint")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--volume", required=True, help="NRRD scan")
    q.add_argument("--mask", help="reference NRRD mask; reports Dice when given")
    q.add_argument("--out", default="prediction")
    q.set_defaults(func=_cmd_predict)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"volnorm {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
