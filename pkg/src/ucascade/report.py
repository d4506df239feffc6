"""Report files: CSV tables of record, curve CSVs and SVG figures.

Floats are written with ``repr`` so a reloaded report equals the one in
memory bit for bit.
"""

import csv
import json
import math
import os

import numpy as np

from . import plotting
from .errors import DataError
from .metrics import ModelScores

MODELS = [
    ("baseline", "Baseline"),
    ("bayes_1ch", "Bayes. CNN"),
    ("fusion_3ch", "Bayes. CNN w/ Uncert. Fusion"),
    ("ensemble", "Bayes. Ensemble"),
]
METRIC_COLUMNS = ["model", "label", "roc_auc", "pr_auc", "weighted_brier", "avg_sigma"]
PREDICTION_COLUMNS = ["baseline", "bayes_1ch_mean", "bayes_1ch_std", "fusion_3ch_mean", "fusion_3ch_std",
                      "ensemble_mean", "ensemble_std"]


def _f(v):
    return repr(float(v))


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _read_rows(path):
    if not os.path.exists(path):
        raise DataError(f"missing report file {path}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_report(out_dir, report, cands, splits):
    """Write every report artifact; returns the list of paths.

    ``splits`` maps a split name to ``(candidate row indices, prediction
    columns)``; the test split drives the metrics and figures.
    """
    paths = []
    paths.append(_write_rows(os.path.join(out_dir, "metrics.csv"), METRIC_COLUMNS, [
        [key, label, _f(r.roc_auc), _f(r.pr_auc), _f(r.brier), _f(r.avg_sigma)]
        for key, label in MODELS for r in [report.rows[key]]]))
    paths.append(_write_rows(os.path.join(out_dir, "summary.csv"), ["key", "value"],
                             [[k, json.dumps(v)] for k, v in sorted(report.summary.items())]))
    rows = []
    for name, (idx, cols) in splits.items():
        for j, i in enumerate(idx):
            rows.append([name, int(cands["volume_id"][i]), *map(int, cands["centroid"][i]), int(cands["label"][i]),
                         int(cands["component_voxels"][i])] + [_f(cols[c][j]) for c in PREDICTION_COLUMNS])
    paths.append(_write_rows(os.path.join(out_dir, "predictions.csv"),
                             ["split", "volume_id", "z", "y", "x", "label", "component_voxels"] + PREDICTION_COLUMNS,
                             rows))
    for key, _ in MODELS:
        r = report.rows[key]
        for kind, curve in (("roc", r.roc), ("pr", r.pr)):
            paths.append(_write_rows(os.path.join(out_dir, f"{kind}_{key}.csv"), ["threshold", "x", "y"],
                                     [[_f(t), _f(x), _f(y)] for t, x, y in zip(*curve)]))
    paths.append(plotting.curve_plot(
        os.path.join(out_dir, "roc.svg"),
        {f"{label} ({report.rows[k].roc_auc:.3f})": report.rows[k].roc[1:] for k, label in MODELS},
        "false positive rate", "true positive rate", "ROC (test candidates)", diagonal=True))
    paths.append(plotting.curve_plot(
        os.path.join(out_dir, "pr.svg"),
        {f"{label} ({report.rows[k].pr_auc:.3f})": report.rows[k].pr[1:] for k, label in MODELS},
        "recall", "precision", "Precision-recall (test candidates)"))
    paths.append(plotting.bar_plot(
        os.path.join(out_dir, "uncertainty.svg"),
        {label: report.rows[k].avg_sigma for k, label in MODELS[1:]},
        "mean predictive std", "Average uncertainty (test candidates)"))
    return paths


def load_report(out_dir):
    """Rebuild the :class:`EvalReport` written by :func:`write_report`."""
    from .experiment import EvalReport

    summary = {r["key"]: json.loads(r["value"]) for r in _read_rows(os.path.join(out_dir, "summary.csv"))}
    rows = {}
    for r in _read_rows(os.path.join(out_dir, "metrics.csv")):
        curves = {}
        for kind in ("roc", "pr"):
            pts = _read_rows(os.path.join(out_dir, f"{kind}_{r['model']}.csv"))
            curves[kind] = tuple(np.array([float(p[c]) for p in pts]) for c in ("threshold", "x", "y"))
        rows[r["model"]] = ModelScores(r["model"], float(r["roc_auc"]), float(r["pr_auc"]),
                                       float(r["weighted_brier"]), float(r["avg_sigma"]),
                                       curves["roc"], curves["pr"])
    return EvalReport(alpha=summary["alpha"], spearman_rho=summary["spearman_rho_val"],
                      spearman_p=summary["spearman_p_val"], rows=rows, summary=summary)


def load_predictions(out_dir):
    return _read_rows(os.path.join(out_dir, "predictions.csv"))


def _fmt(v, digits=4):
    return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.{digits}f}"


def format_table(report):
    """Fixed-order text table of the four model rows plus run summary."""
    lines = [f"{'model':<30} {'ROC-AUC':>8} {'PR-AUC':>8} {'W-Brier':>8} {'avg sd':>8}"]
    for key, label in MODELS:
        r = report.rows[key]
        lines.append(f"{label:<30} {_fmt(r.roc_auc):>8} {_fmt(r.pr_auc):>8} {_fmt(r.brier):>8} "
                     f"{_fmt(r.avg_sigma):>8}")
    s = report.summary
    lines.append("")
    lines.append(f"ensemble alpha: {_fmt(report.alpha, 2)}"
                 f" ({'validation sweep' if s.get('alpha_from_validation') else 'config default'})")
    lines.append(f"spearman rho (val, 1ch vs 3ch): {_fmt(report.spearman_rho)}  p = {report.spearman_p:.3g}")
    lines.append(f"test candidates: {s.get('n_test')} ({s.get('n_test_pos')} positive)")
    for split in ("val", "test"):
        if f"seg_{split}_recall" in s:
            lines.append(f"segmentation {split}: dice {_fmt(s[f'seg_{split}_mean_dice'])}, candidate recall "
                         f"{_fmt(s[f'seg_{split}_recall'])}, precision {_fmt(s[f'seg_{split}_precision'])}")
    return "\n".join(lines)
