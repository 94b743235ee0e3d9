"""Command line front end for the detection pipeline.

Subcommands cover the full workflow: synthesize a dataset, build and
cache graphs, train, evaluate, run the robustness battery, and render
saved reports. Every command is deterministic given its flags: reruns
produce byte-identical artifacts, so there are no timestamps, host
names, or wall-clock durations anywhere in the output.

Exit codes: 0 success, 1 usage, 2 bad data, 3 provider failure,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .attacks import (
    AttackConfig,
    GeneratorAttackConfig,
    RobustnessReport,
    default_suite_specs,
    parse_attack,
    run_robustness_suite,
    save_robustness_report,
    toy_generator_attack,
)
from .errors import DataError, NumericError, ProviderError
from .fsio import atomic_write_json
from .pipeline import (
    MetricsReport,
    SynthConfig,
    build_graphs,
    evaluate,
    load_manifest,
    save_report,
    synth_dataset,
    train,
)
from .raster import load_image, parse_spec

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_PROVIDER = 3
EXIT_NUMERIC = 4

_METRIC_KEYS = ("accuracy", "precision", "recall", "f1")


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; this tool reserves 2 for data
    errors, so usage problems are remapped to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _workers() -> int:
    return min(8, os.cpu_count() or 1)


# ---------------------------------------------------------------- tables


def _render_table(headers, rows) -> str:
    """Aligned plain-text table: first column left, the rest right."""
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))

    def line(cells):
        first = cells[0].ljust(widths[0])
        rest = [cell.rjust(widths[i + 1]) for i, cell in enumerate(cells[1:])]
        return "  ".join([first, *rest]).rstrip()

    return "\n".join([line(headers), *(line(r) for r in rows)])


def _metric_cells(values) -> list:
    return [f"{values[k]:.4f}" for k in _METRIC_KEYS]


def format_metrics_table(report: MetricsReport) -> str:
    main = {k: getattr(report, k) for k in _METRIC_KEYS}
    rows = [[report.split, *_metric_cells(main)]]
    for name in sorted(report.breakdowns):
        rows.append([name, *_metric_cells(report.breakdowns[name])])
    return _render_table(["split", *_METRIC_KEYS], rows)


def _tau_cell(flag) -> str:
    if flag is None:
        return "-"
    return "pass" if flag else "FAIL"


def format_robustness_table(report: RobustnessReport) -> str:
    clean = {k: getattr(report.clean, k) for k in _METRIC_KEYS}
    rows = [["clean", *_metric_cells(clean), _tau_cell(report.clean.tau_r_pass)]]
    for row in report.rows:
        metrics = {k: getattr(row.metrics, k) for k in _METRIC_KEYS}
        rows.append([row.spec, *_metric_cells(metrics), _tau_cell(row.pass_tau_r)])
    return _render_table(["spec", *_METRIC_KEYS, "tau_r"], rows)


# ------------------------------------------------------------- manifests


def _load_manifest(args):
    manifest = load_manifest(args.manifest)
    provider = manifest.provider
    endpoint = getattr(args, "endpoint", None) or os.environ.get("VIGTEXT_ENDPOINT")
    if getattr(args, "provider", None):
        provider = dataclasses.replace(provider, kind=args.provider)
    if endpoint:
        provider = dataclasses.replace(provider, endpoint=endpoint)
    if provider.kind == "remote" and not provider.endpoint:
        raise ValueError("remote provider needs --endpoint or VIGTEXT_ENDPOINT")
    manifest.provider = provider
    return manifest


def _add_manifest_flags(sub) -> None:
    sub.add_argument("--manifest", required=True, help="dataset manifest JSON")
    sub.add_argument(
        "--provider",
        choices=("toy", "fixture", "remote"),
        help="override the manifest's embedding provider kind",
    )
    sub.add_argument(
        "--endpoint",
        default=None,
        help="remote provider URL (falls back to VIGTEXT_ENDPOINT)",
    )


# -------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        count=args.count, grid_n=args.grid, seed=args.seed, side=args.side
    )
    manifest = synth_dataset(cfg, args.out)
    print(f"wrote {len(manifest.entries)} samples to {args.out}")
    return EXIT_OK


def cmd_build_graphs(args) -> int:
    manifest = _load_manifest(args)
    _, diagnostics = build_graphs(manifest, cache_dir=args.out, workers=_workers())
    for note in diagnostics:
        print(f"note: {note}", file=sys.stderr)
    for entry in manifest.entries:
        print(f"OK {entry.image}")
    print(f"built {len(manifest.entries)} graphs")
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = _load_manifest(args)
    result = train(
        manifest,
        epochs=args.epochs,
        seed=args.seed,
        workers=_workers(),
        out_dir=args.out,
    )
    n_train = len(manifest.entries_for("train"))
    print(f"trained {args.epochs} epochs on {n_train} samples")
    if result.best_epoch is not None:
        print(f"best epoch {result.best_epoch} (val f1 {result.best_val_f1:.4f})")
    print(f"checkpoints written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = _load_manifest(args)
    report = evaluate(
        args.checkpoint,
        manifest,
        split=args.split,
        workers=_workers(),
        tau_r=args.tau_r,
        tau_g=args.tau_g,
    )
    print(format_metrics_table(report))
    if report.tau_r_pass is not None:
        print(f"tau_r {report.tau_r:g}: {_tau_cell(report.tau_r_pass)}")
    if report.tau_g_pass is not None:
        print(f"tau_g {report.tau_g:g}: {_tau_cell(report.tau_g_pass)}")
    if args.out:
        save_report(args.out, report)
        print(f"report written to {args.out}")
    return EXIT_OK


def _parse_any_spec(text: str):
    kind = text.split(":", 1)[0].strip()
    if kind in ("fgsm", "pgd"):
        return parse_attack(text)
    return parse_spec(text)


def _attack_specs(args, manifest):
    specs = []
    if args.kind in ("fgsm", "pgd"):
        if args.eps is None:
            raise ValueError(f"--kind {args.kind} needs --eps")
        specs.append(AttackConfig(args.kind, args.eps))
    for text in args.spec or []:
        specs.append(_parse_any_spec(text))
    if specs:
        return specs
    entries = manifest.entries_for(args.split)
    if not entries:
        raise DataError(f"split {args.split!r} has no entries")
    sample = load_image(manifest.resolve(sorted(e.image for e in entries)[0]))
    return default_suite_specs(side=sample.width)


def cmd_attack(args) -> int:
    manifest = _load_manifest(args)
    if args.kind == "generator":
        cfg = GeneratorAttackConfig(split=args.split)
        result = toy_generator_attack(args.checkpoint, manifest, cfg)
        print(f"evasion rate {result.evasion_rate:.4f} on {len(result.samples)} fakes")
        if args.out:
            atomic_write_json(args.out, result.summary_json())
            print(f"report written to {args.out}")
        return EXIT_OK
    specs = _attack_specs(args, manifest)
    report = run_robustness_suite(
        args.checkpoint,
        manifest,
        specs,
        split=args.split,
        tau_r=args.tau_r,
        workers=_workers(),
    )
    print(format_robustness_table(report))
    if args.out:
        save_robustness_report(args.out, report)
        print(f"report written to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        with open(args.path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read report: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{args.path}: not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise DataError(f"{args.path}: expected a JSON object")
    if "format" in obj:
        print(format_robustness_table(RobustnessReport.from_json(obj)))
    elif "counts" in obj:
        print(format_metrics_table(MetricsReport.from_json(obj)))
    else:
        raise DataError(f"{args.path}: not a recognized report file")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vigtext", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    synth = subs.add_parser("synth", help="generate a synthetic labelled dataset")
    synth.add_argument("--out", required=True, help="output dataset directory")
    synth.add_argument("--count", type=int, default=400)
    synth.add_argument("--grid", type=int, default=4, help="patch grid side")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--side", type=int, default=120, help="image side in pixels")
    synth.set_defaults(func=cmd_synth)

    build = subs.add_parser("build-graphs", help="embed and cache every graph")
    _add_manifest_flags(build)
    build.add_argument("--out", default=None, help="graph cache directory")
    build.set_defaults(func=cmd_build_graphs)

    tr = subs.add_parser("train", help="train a detector")
    _add_manifest_flags(tr)
    tr.add_argument("--out", required=True, help="checkpoint output directory")
    tr.add_argument("--epochs", type=int, default=40)
    tr.add_argument("--seed", type=int, default=0)
    tr.set_defaults(func=cmd_train)

    ev = subs.add_parser("eval", help="evaluate a checkpoint on a split")
    ev.add_argument("checkpoint", help="checkpoint file")
    _add_manifest_flags(ev)
    ev.add_argument("--split", default="test")
    ev.add_argument("--tau-r", type=float, default=None, help="robustness accuracy gate")
    ev.add_argument("--tau-g", type=float, default=None, help="generalization accuracy gate")
    ev.add_argument("--out", default=None, help="write the report as JSON")
    ev.set_defaults(func=cmd_eval)

    at = subs.add_parser("attack", help="run perturbations and attacks")
    at.add_argument("checkpoint", help="checkpoint file")
    _add_manifest_flags(at)
    at.add_argument("--split", default="test")
    at.add_argument("--kind", choices=("fgsm", "pgd", "generator"), default=None)
    at.add_argument("--eps", type=float, default=None, help="attack budget in [0, 1]")
    at.add_argument(
        "--spec",
        action="append",
        metavar="KIND:K=V,...",
        help="perturbation or attack spec, repeatable; default is the full battery",
    )
    at.add_argument("--tau-r", type=float, default=None, help="robustness accuracy gate")
    at.add_argument("--out", default=None, help="write the report as JSON")
    at.set_defaults(func=cmd_attack)

    rep = subs.add_parser("report", help="render a saved report as a table")
    rep.add_argument("path", help="metrics or robustness report JSON")
    rep.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ProviderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
