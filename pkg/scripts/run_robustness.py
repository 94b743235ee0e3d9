"""Grade a trained checkpoint against the full perturbation battery.

Runs the standard suite (photometric and geometric warps, resize grid,
FGSM and PGD at the default epsilon ladder) on the test split of an
existing run, prints the accuracy table, and saves the report. Point it
at the directory produced by run_end_to_end.py:

    python scripts/run_robustness.py --run runs/end_to_end --tau-r 0.7
"""

import argparse
import sys
from pathlib import Path

from vigtext.attacks import (
    default_suite_specs,
    parse_attack,
    run_robustness_suite,
    save_robustness_report,
)
from vigtext.cli import format_robustness_table
from vigtext.pipeline import load_manifest
from vigtext.raster import load_image, parse_spec


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run", type=Path, default=Path("runs/end_to_end"),
                    help="directory produced by run_end_to_end.py")
    ap.add_argument("--split", default="test")
    ap.add_argument("--tau-r", type=float, default=None)
    ap.add_argument("--spec", action="append", metavar="KIND:K=V,...",
                    help="replace the default battery, repeatable")
    ap.add_argument("--workers", type=int, default=8)
    args = ap.parse_args(argv)

    manifest = load_manifest(args.run / "data" / "manifest.json")
    checkpoint = args.run / "ckpt" / "best.vgmd"

    if args.spec:
        specs = []
        for text in args.spec:
            kind = text.split(":", 1)[0].strip()
            specs.append(parse_attack(text) if kind in ("fgsm", "pgd") else parse_spec(text))
    else:
        entries = sorted(manifest.entries_for(args.split), key=lambda e: e.image)
        side = load_image(manifest.resolve(entries[0].image)).width
        specs = default_suite_specs(side=side)

    report = run_robustness_suite(
        checkpoint, manifest, specs, split=args.split, tau_r=args.tau_r, workers=args.workers
    )
    print(format_robustness_table(report))
    out = args.run / "robustness.json"
    save_robustness_report(out, report)
    print(f"report written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
