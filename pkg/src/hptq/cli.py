"""Command line interface.

Subcommands: quantize, eval, stats, ablate. Usage errors exit with code 2,
pipeline failures with code 1.
"""

import argparse
import sys

from .calibrate import ErrorMeasure
from .container import load_dataset, load_model, save_quantized
from .engine import evaluate
from .errors import HptqError
from .pipeline import STAGE_NAMES, PipelineConfig, quantize_pipeline, run_ablation
from .report import (
    render_ablation_text,
    render_eval_text,
    render_text,
    write_ablation,
    write_eval_report,
    write_report,
)
from .stats import collect_statistics, stats_csv


def _add_hyper_flags(p):
    p.add_argument("--bits", type=int, default=8, help="quantizer bit-width")
    p.add_argument("--error", choices=[m.value for m in ErrorMeasure], default="mse",
                   help="threshold selection error measure (nc skips the search)")
    p.add_argument("--z-threshold", type=float, default=24.0, help="outlier removal z-score threshold")
    p.add_argument("--snc-alpha", type=float, default=0.25, help="negative-range/threshold ratio limit for SNC")
    p.add_argument("--iterations", type=int, default=10, help="threshold search halvings")
    p.add_argument("--bins", type=int, default=2048, help="histogram bins")
    p.add_argument("--disable", default="", metavar="STAGE[,STAGE...]",
                   help="stages to skip: " + ", ".join(STAGE_NAMES))


def _config_from_args(parser, args):
    config = PipelineConfig(
        bits=args.bits,
        error_measure=ErrorMeasure(args.error),
        z_threshold=args.z_threshold,
        snc_alpha=args.snc_alpha,
        iterations=args.iterations,
        bins=args.bins,
    )
    disabled = [s.strip() for s in args.disable.split(",") if s.strip()]
    try:
        return config.disable(disabled)
    except ValueError as e:
        parser.error(str(e))


def _load_labels(args, calib):
    if getattr(args, "labels", None):
        labelled = load_dataset(args.labels)
        if labelled.labels is None:
            raise HptqError(f"dataset {args.labels} carries no labels")
        return labelled.labels
    return calib.labels


def build_parser():
    parser = argparse.ArgumentParser(prog="hptq", description="Hardware-friendly post-training quantization")
    sub = parser.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="quantize a float model against a calibration dataset")
    q.add_argument("--model", required=True, help="float model container")
    q.add_argument("--data", required=True, help="calibration dataset container")
    q.add_argument("--out", required=True, help="output quantized model container")
    _add_hyper_flags(q)
    q.add_argument("--report", help="directory for report.json/.txt and figures")

    e = sub.add_parser("eval", help="compare a float and a quantized model on labelled data")
    e.add_argument("--float", dest="float_model", required=True)
    e.add_argument("--quant", dest="quant_model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--labels", help="separate labelled dataset container (defaults to labels in --data)")
    e.add_argument("--report", help="directory for eval.json/.txt and figures")

    s = sub.add_parser("stats", help="dump per-tensor activation statistics as CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="output CSV path")
    s.add_argument("--bins", type=int, default=2048)

    a = sub.add_parser("ablate", help="run the feature ladder and emit a comparison table")
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--labels", help="separate labelled dataset container (defaults to labels in --data)")
    a.add_argument("--out", required=True, help="output directory")
    _add_hyper_flags(a)
    return parser


def cmd_quantize(parser, args):
    config = _config_from_args(parser, args)
    graph = load_model(args.model)
    calib = load_dataset(args.data)
    quant, report = quantize_pipeline(graph, calib, config)
    save_quantized(quant, args.out)
    if args.report:
        store = collect_statistics(quant, calib, config.bins)
        write_report(report, args.report, store=store)
    print(render_text(report))
    print(f"quantized model written to {args.out}")
    return 0


def cmd_eval(parser, args):
    float_graph = load_model(args.float_model)
    quant_graph = load_model(args.quant_model)
    calib = load_dataset(args.data)
    labels = _load_labels(args, calib)
    if labels is None:
        raise HptqError("evaluation needs labels (embed them in --data or pass --labels)")
    result = evaluate(float_graph, quant_graph, calib.samples, labels)
    if args.report:
        write_eval_report(result, args.report)
    print(render_eval_text(result))
    return 0


def cmd_stats(parser, args):
    graph = load_model(args.model)
    calib = load_dataset(args.data)
    store = collect_statistics(graph, calib, args.bins)
    csv_text = stats_csv(store)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(csv_text)
    print(f"statistics for {len(store.ids())} tensors written to {args.out}")
    return 0


def cmd_ablate(parser, args):
    config = _config_from_args(parser, args)
    graph = load_model(args.model)
    calib = load_dataset(args.data)
    labels = _load_labels(args, calib)
    if labels is None:
        raise HptqError("ablation needs labels (embed them in --data or pass --labels)")
    rows = run_ablation(graph, calib, calib.samples, labels, config)
    write_ablation(rows, args.out)
    print(render_ablation_text(rows))
    return 0


COMMANDS = {
    "quantize": cmd_quantize,
    "eval": cmd_eval,
    "stats": cmd_stats,
    "ablate": cmd_ablate,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](parser, args)
    except (HptqError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
