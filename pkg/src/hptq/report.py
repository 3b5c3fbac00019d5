"""Render pipeline reports: JSON, plain text, CSV, and matplotlib figures.

Report files carry no timestamps so identical runs produce identical bytes.
Figures are written alongside the delimited output under <out>/figures/.
"""

import csv
import json
import math
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

MAX_HISTOGRAM_FIGURES = 12


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _save(fig, path):
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_text(report) -> str:
    """Human-readable summary of a pipeline report."""
    lines = ["quantization report", "=" * 19, ""]
    cfg = report["config"]
    lines.append(
        f"bits={cfg['bits']} measure={cfg['error_measure']} z_threshold={cfg['z_threshold']} "
        f"snc_alpha={cfg['snc_alpha']} iterations={cfg['iterations']} bins={cfg['bins']}"
    )
    off = [k for k, v in cfg["toggles"].items() if not v]
    lines.append("disabled stages: " + (", ".join(off) if off else "none"))
    lines.append("")
    for stage in report["stages"]:
        name = stage["stage"]
        if name == "bn_fold":
            lines.append(f"[bn_fold] folded {len(stage['folded'])} batch-norm layer(s): {', '.join(stage['folded']) or '-'}")
        elif name == "statistics":
            lines.append(f"[statistics] {stage['tensors']} tensors over {stage['samples']} samples")
        elif name == "outlier_removal":
            zeroed = stage["bins_zeroed"]
            lines.append(f"[outlier_removal] z>{stage['z_threshold']}: bins zeroed in {len(zeroed)} tensor(s)")
            for tid, n in zeroed.items():
                lines.append(f"  {tid}: {n} bin(s)")
        elif name.startswith("activation_thresholds"):
            lines.append(f"[{name}] measure={stage['measure']}")
            for tid, r in stage["results"].items():
                err = "-" if r["error"] is None else f"{r['error']:.3e}"
                lines.append(
                    f"  {tid}: t=2^{r['exponent']} (nc 2^{r['nc_exponent']}), err={err}"
                )
        elif name == "snc":
            if stage["shifted"]:
                for r in stage["shifted"]:
                    lines.append(
                        f"[snc] {r['layer']}: shift +{r['shift']:.6g} (|s|/t={r['ratio']:.3f}) folded into {', '.join(r['consumers'])}"
                    )
            else:
                lines.append("[snc] no tensors shifted")
        elif name == "equalization":
            if stage["triples"]:
                for t in stage["triples"]:
                    lines.append(
                        f"[equalization] {t['first']} -> {t['activation']} -> {t['second']}: min scale {t['min_scale']:.4f}"
                    )
            else:
                lines.append("[equalization] no eligible triples")
        elif name == "weight_thresholds":
            mode = "per channel" if stage["per_channel"] else "per tensor"
            lines.append(f"[weight_thresholds] {mode}, measure={stage['measure']}")
            for nid, r in stage["results"].items():
                exps = r["exponents"]
                lines.append(f"  {nid}: {len(exps)} channel(s), exponents [{min(exps)}, {max(exps)}]")
        elif name == "bias_correction":
            for layer, mag in stage["layers"].items():
                lines.append(f"[bias_correction] {layer}: max |delta b| = {mag:.3e}")
        elif name == "per_layer_mse":
            lines.append(f"[per_layer_mse] mean over {len(stage['table'])} tensors: {stage['mean']:.6e}")
            for tid, mse in stage["table"].items():
                lines.append(f"  {tid}: {mse:.6e}")
    lines.append("")
    return "\n".join(lines)


def write_report(report, out_dir, store=None):
    """Write report.json, report.txt, per_layer_mse.csv and figures."""
    _ensure_dir(out_dir)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as f:
        f.write(render_text(report))
    mse_stage = _find_stage(report, "per_layer_mse")
    if mse_stage:
        _write_mse_csv(mse_stage["table"], os.path.join(out_dir, "per_layer_mse.csv"))
    figures = _ensure_dir(os.path.join(out_dir, "figures"))
    _figure_per_layer_mse(report, figures)
    _figure_thresholds(report, store, figures)
    _figure_equalization(report, figures)


def _find_stage(report, name):
    for stage in report["stages"]:
        if stage["stage"] == name:
            return stage
    return None


def _write_mse_csv(table, path):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["tensor", "mse"])
        for tid, mse in table.items():
            writer.writerow([tid, repr(mse)])


def _figure_per_layer_mse(report, out_dir):
    stage = _find_stage(report, "per_layer_mse")
    if not stage or not stage["table"]:
        return
    names = list(stage["table"])
    values = [stage["table"][n] for n in names]
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(names)), 4))
    ax.bar(range(len(names)), values, color="#4878cf")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=8)
    ax.set_ylabel("MSE vs float")
    ax.set_yscale("log" if min(values, default=0) > 0 else "linear")
    ax.set_title("Per-tensor quantization error")
    fig.tight_layout()
    _save(fig, os.path.join(out_dir, "per_layer_mse.png"))


def _figure_thresholds(report, store, out_dir):
    if store is None:
        return
    stage = _find_stage(report, "activation_thresholds")
    if not stage:
        return
    items = list(stage["results"].items())[:MAX_HISTOGRAM_FIGURES]
    for tid, r in items:
        ts = store[tid]
        hist = ts.histogram
        fig, ax = plt.subplots(figsize=(6, 3.5))
        widths = np.diff(hist.edges)
        ax.bar(hist.centers, hist.counts, width=widths, color="#9ecae1", edgecolor="none")
        t_nc = math.ldexp(1.0, r["nc_exponent"])
        t = math.ldexp(1.0, r["exponent"])
        ax.axvline(t_nc, color="#888888", linestyle="--", label=f"no-clipping 2^{r['nc_exponent']}")
        ax.axvline(t, color="#d62728", label=f"selected 2^{r['exponent']}")
        if ts.tensor_min < 0:
            ax.axvline(-t_nc, color="#888888", linestyle="--")
            ax.axvline(-t, color="#d62728")
        ax.set_title(tid, fontsize=9)
        ax.set_yscale("log")
        ax.legend(fontsize=7)
        fig.tight_layout()
        _save(fig, os.path.join(out_dir, f"threshold_{_safe(tid)}.png"))


def _figure_equalization(report, out_dir):
    stage = _find_stage(report, "equalization")
    if not stage or not stage["triples"]:
        return
    fig, axes = plt.subplots(1, len(stage["triples"]), figsize=(4 * len(stage["triples"]), 3.2), squeeze=False)
    for ax, triple in zip(axes[0], stage["triples"]):
        scales = triple["scales"]
        ax.bar(range(len(scales)), sorted(1.0 / np.asarray(scales)), color="#74c476")
        ax.set_title(f"{triple['activation']} (1/scale per channel)", fontsize=8)
        ax.set_xlabel("channel (sorted)")
    fig.tight_layout()
    _save(fig, os.path.join(out_dir, "equalization.png"))


def _safe(name):
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


# ---------------------------------------------------------------------------
# Evaluation and ablation outputs
# ---------------------------------------------------------------------------


def render_eval_text(result) -> str:
    d = result.to_dict()
    lines = [
        "evaluation",
        "=" * 10,
        f"metric:            {d['metric']}",
        f"float score:       {d['float_score']:.4f}",
        f"quantized score:   {d['quantized_score']:.4f}",
        f"delta:             {d['delta']:.4f}",
        f"mean per-layer MSE: {d['mean_per_layer_mse']:.6e}",
        "",
        f"{'tensor':<28} mse",
    ]
    for tid, mse in d["per_layer_mse"].items():
        lines.append(f"{tid:<28} {mse:.6e}")
    lines.append("")
    return "\n".join(lines)


def write_eval_report(result, out_dir):
    _ensure_dir(out_dir)
    with open(os.path.join(out_dir, "eval.json"), "w", encoding="utf-8") as f:
        json.dump(result.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "eval.txt"), "w", encoding="utf-8") as f:
        f.write(render_eval_text(result))
    table = result.per_layer_mse
    if table:
        figures = _ensure_dir(os.path.join(out_dir, "figures"))
        fake_report = {"stages": [{"stage": "per_layer_mse", "table": table, "mean": result.mean_mse}]}
        _figure_per_layer_mse(fake_report, figures)


def render_ablation_text(rows) -> str:
    header = f"{'configuration':<22} {'float':>7} {'quant':>7} {'delta':>7} {'mean mse':>12}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row['configuration']:<22} {row['float_accuracy']:>7.4f} {row['quantized_accuracy']:>7.4f} "
            f"{row['delta']:>7.4f} {row['mean_per_layer_mse']:>12.4e}"
        )
    lines.append("")
    return "\n".join(lines)


def write_ablation(rows, out_dir):
    """ablation.csv, ablation.txt and an accuracy/error figure."""
    _ensure_dir(out_dir)
    with open(os.path.join(out_dir, "ablation.csv"), "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(
            f,
            fieldnames=["configuration", "float_accuracy", "quantized_accuracy", "delta", "mean_per_layer_mse"],
            lineterminator="\n",
        )
        writer.writeheader()
        writer.writerows(rows)
    with open(os.path.join(out_dir, "ablation.txt"), "w", encoding="utf-8") as f:
        f.write(render_ablation_text(rows))
    figures = _ensure_dir(os.path.join(out_dir, "figures"))
    names = [r["configuration"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4))
    ax1.bar(range(len(rows)), [r["quantized_accuracy"] for r in rows], color="#4878cf")
    ax1.axhline(rows[0]["float_accuracy"], color="#d62728", linestyle="--", label="float")
    ax1.set_xticks(range(len(rows)))
    ax1.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax1.set_ylabel("top-1 accuracy")
    ax1.legend(fontsize=8)
    ax2.bar(range(len(rows)), [r["mean_per_layer_mse"] for r in rows], color="#74c476")
    ax2.set_xticks(range(len(rows)))
    ax2.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax2.set_ylabel("mean per-layer MSE")
    ax2.set_yscale("log")
    fig.tight_layout()
    _save(fig, os.path.join(figures, "ablation.png"))
