"""Plain-text rendering of evaluation, ablation and grid-search JSON."""
from __future__ import annotations

from typing import Mapping

from .data import LABELS


def _pct(x) -> str:
    return "   -  " if x is None else f"{100 * x:6.2f}"


def render_confusion(normalized, labels=LABELS) -> str:
    width = max(len(l) for l in labels)
    head = " " * (width + 2) + " ".join(f"{l[:6]:>6s}" for l in labels)
    lines = [head]
    for name, row in zip(labels, normalized):
        cells = " ".join(_pct(v) for v in row) if row is not None else "  (no support)"
        lines.append(f"{name:>{width}s}  {cells}")
    return "\n".join(lines)


def render_eval(report: Mapping) -> str:
    meta = report.get("metadata", {})
    pooled = report["pooled"]
    mods = meta.get("model_config", {}).get("modalities", [])
    lines = [
        f"modalities: {', '.join(mods)}   mode: {meta.get('mode')}   k: {meta.get('k')}   seed: {meta.get('seed')}",
        "",
        f"{'fold':>4s}  {'test group':<12s} {'n':>6s} {'macro-F1':>9s}  " + " ".join(f"{l[:6]:>6s}" for l in LABELS),
    ]
    for f in report["folds"]:
        acc = f["per_class_accuracy"]
        group = f["test_group"] if isinstance(f["test_group"], str) else ",".join(f["test_group"])
        lines.append(f"{f['fold']:>4d}  {group:<12s} {f['n_test']:>6d} {100 * f['macro_f1']:8.2f}%  "
                     + " ".join(_pct(acc[l]) for l in LABELS))
    lines += ["", f"pooled macro-F1: {100 * pooled['macro_f1']:.2f}%", "",
              "row-normalized confusion matrix (%; rows = true, columns = predicted):",
              render_confusion(pooled["confusion_normalized"])]
    if pooled.get("degenerate_classes"):
        lines.append(f"classes absent from truth and predictions: {', '.join(pooled['degenerate_classes'])}")
    return "\n".join(lines) + "\n"


def render_ablation(table: Mapping) -> str:
    rows = table["rows"]
    width = max([len("Configuration")] + [len(r["configuration"]) for r in rows])
    lines = [f"{'Configuration':<{width}s}  {'macro-F1 (%)':>12s}  {'ref. F1 (%)':>12s}"]
    for r in rows:
        ref = r.get("reference_f1_percent")
        lines.append(f"{r['configuration']:<{width}s}  {100 * r['macro_f1']:12.2f}  {'' if ref is None else ref:>12}")
    lines.append("")
    lines.append("reference values were measured on a private Pacman dataset and are shown for orientation only.")
    return "\n".join(lines) + "\n"


def render_grid(results) -> str:
    lines = [f"{'rank':>4s}  {'macro-F1':>9s}  {'val loss':>9s}  params"]
    for r in results:
        lines.append(f"{r['rank']:>4d}  {100 * r['macro_f1']:8.2f}%  {r['val_loss']:9.4f}  {r['params']}")
    return "\n".join(lines) + "\n"


def render_any(doc: Mapping) -> str:
    if "rows" in doc:
        return render_ablation(doc)
    if "results" in doc:
        return render_grid(doc["results"])
    if "runs" in doc:
        parts = [render_eval(r) for r in doc["runs"]]
        parts.append(f"macro-F1 over seeds {doc['seeds']}: {100 * doc['macro_f1_mean']:.2f}% "
                     f"+/- {100 * doc['macro_f1_std']:.2f} (population std)\n")
        return "\n".join(parts)
    return render_eval(doc)
