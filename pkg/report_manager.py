"""
Result files for evaluation and ablation runs: CSV tables, markdown summaries and plots.
"""

import csv
import logging
import os
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from prettytable import PrettyTable, TableStyle  # noqa: E402

from seg_metrics import CONFUSION_CODES, METRIC_NAMES, TABLE_METRICS, DatasetEvaluation, fp_fn_map  # noqa: E402
from tensor_io import ensure_directory  # noqa: E402

logger = logging.getLogger(__name__)

METRIC_HEADERS = {
    "iou": "IoU",
    "dice": "Dice",
    "precision": "Precision",
    "recall": "Recall",
    "assd_mm": "ASSD (mm)",
    "hd95_mm": "HD95 (mm)",
}
# TN, TP, FP, FN
CONFUSION_COLORS = np.array([[0, 0, 0, 0], [0.2, 0.8, 0.2, 0.45], [0.9, 0.2, 0.2, 0.7], [0.2, 0.4, 0.95, 0.7]])
CLASS_MEDIAN_METRICS = ("dice", "hd95_mm")
BOX_COLORS = ["#6baed6", "#fd8d3c", "#74c476", "#9e9ac8", "#fdd0a2", "#c6dbef"]


def _cell(value: Optional[float], digits: int = 6) -> str:
    return "" if value is None else f"{value:.{digits}g}"


def _markdown(field_names: Sequence[str], rows: Sequence[Sequence]) -> str:
    table = PrettyTable()
    table.field_names = list(field_names)
    for row in rows:
        table.add_row(list(row))
    table.set_style(TableStyle.MARKDOWN)
    return table.get_string()


class ReportManager:
    def __init__(self, out_dir: str):
        self.out_dir = ensure_directory(out_dir)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def _write_csv(self, name: str, header: Sequence[str], rows: Sequence[Sequence]) -> str:
        path = self.path(name)
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(header)
            writer.writerows(rows)
        return path

    def _write_text(self, name: str, text: str) -> str:
        path = self.path(name)
        with open(path, "w") as handle:
            handle.write(text.rstrip("\n") + "\n")
        return path

    # -- evaluation -----------------------------------------------------------

    def write_evaluation(self, evaluation: DatasetEvaluation, title: str = "Evaluation",
                         frame_ids: Optional[Sequence[str]] = None) -> list:
        """per_class.csv/.md, per_frame.csv and summary.md for one evaluated test set."""
        written = []
        class_rows = []
        for name, summaries in evaluation.class_summaries.items():
            row = [name]
            for metric in METRIC_NAMES:
                s = summaries[metric]
                row += [_cell(s.mean), _cell(s.std), _cell(s.median), s.n_defined, s.n_undefined]
            class_rows.append(row)
        header = ["class"]
        for metric in METRIC_NAMES:
            header += [f"{metric}_mean", f"{metric}_std", f"{metric}_median", f"{metric}_n", f"{metric}_excluded"]
        written.append(self._write_csv("per_class.csv", header, class_rows))

        md_rows = [
            [name] + [summaries[m].formatted() for m in METRIC_NAMES]
            for name, summaries in evaluation.class_summaries.items()
        ]
        md_rows.append(["mean (frames)"] + [evaluation.table_row[m].formatted() for m in METRIC_NAMES])
        written.append(self._write_text(
            "per_class.md", _markdown(["Class"] + [METRIC_HEADERS[m] for m in METRIC_NAMES], md_rows)
        ))

        frame_rows = []
        for index, frame in enumerate(evaluation.per_frame):
            frame_id = frame_ids[index] if frame_ids is not None else str(index)
            for metrics in frame:
                row = metrics.as_row()
                frame_rows.append([frame_id, row["class_name"]] + [_cell(row[m]) for m in METRIC_NAMES]
                                  + [row["support_pixels"], row["predicted_pixels"]])
        written.append(self._write_csv(
            "per_frame.csv", ["frame", "class"] + list(METRIC_NAMES) + ["support_pixels", "predicted_pixels"],
            frame_rows,
        ))

        excluded = evaluation.exclusion_counts()
        lines = [
            f"# {title}",
            "",
            f"Frames: {evaluation.n_frames}",
            "",
            _markdown([METRIC_HEADERS[m] for m in TABLE_METRICS],
                      [[evaluation.table_row[m].formatted() for m in TABLE_METRICS]]),
            "",
            "Excluded (undefined) class entries per metric:",
            "",
            _markdown(["Metric", "Excluded"], [[METRIC_HEADERS[m], excluded[m]] for m in METRIC_NAMES]),
        ]
        written.append(self._write_text("summary.md", "\n".join(lines)))
        logger.info(f"[OK] Wrote evaluation report to {self.out_dir}")
        return written

    # -- ablation -------------------------------------------------------------

    def write_ablation(self, report) -> list:
        """ablation.csv/.md, ablation_per_fold.csv and ablation_per_class.csv/.md from an AblationReport."""
        header = ["config", "label", "n_runs"]
        for metric in TABLE_METRICS:
            header += [f"{metric}_mean", f"{metric}_std"]
        rows = []
        md_rows = []
        for row in report.rows.values():
            line = [row.name, row.label, row.n_runs]
            for metric in TABLE_METRICS:
                line += [_cell(row.metrics[metric].mean), _cell(row.metrics[metric].std)]
            rows.append(line)
            md_rows.append([row.label] + [row.metrics[m].formatted() for m in TABLE_METRICS])
        written = [self._write_csv("ablation.csv", header, rows)]

        caption = (f"Leave-one-speaker-out folds: {', '.join(str(f) for f in report.folds)}; "
                   f"seeds per fold: {report.n_seeds}. Mean ± std over runs.")
        written.append(self._write_text(
            "ablation.md", _markdown(["Configuration"] + [METRIC_HEADERS[m] for m in TABLE_METRICS], md_rows)
            + "\n\n" + caption,
        ))

        fold_rows = [
            [r.config_name, r.held_out, r.seed_index, r.seed, r.epochs_run, _cell(r.best_val_dice)]
            + [_cell(r.metrics[m]) for m in TABLE_METRICS]
            + [_cell(r.video_only_metrics[m]) if r.video_only_metrics else "" for m in TABLE_METRICS]
            for r in report.runs
        ]
        written.append(self._write_csv(
            "ablation_per_fold.csv",
            ["config", "held_out", "seed_index", "seed", "epochs_run", "best_val_dice"]
            + list(TABLE_METRICS) + [f"video_only_{m}" for m in TABLE_METRICS],
            fold_rows,
        ))
        written += self._write_ablation_per_class(report)
        logger.info(f"[OK] Wrote ablation tables for {len(report.rows)} rows to {self.out_dir}")
        return written

    def _write_ablation_per_class(self, report) -> list:
        """Median Dice and HD95 per anatomical class for every trained configuration."""
        class_names = report.class_names
        if not class_names:
            return []
        header = ["config", "class"] + [f"{m}_median" for m in CLASS_MEDIAN_METRICS]
        rows = [
            [name, c] + [_cell(report.class_median(name, c, m)) for m in CLASS_MEDIAN_METRICS]
            for name in report.trained_configs for c in class_names
        ]
        written = [self._write_csv("ablation_per_class.csv", header, rows)]

        md_header = ["Configuration"] + [f"{c} {METRIC_HEADERS[m]}" for c in class_names for m in CLASS_MEDIAN_METRICS]
        md_rows = []
        for name in report.trained_configs:
            medians = [report.class_median(name, c, m) for c in class_names for m in CLASS_MEDIAN_METRICS]
            md_rows.append([report.rows[name].label] + ["n/a" if v is None else f"{v:.3f}" for v in medians])
        written.append(self._write_text(
            "ablation_per_class.md",
            _markdown(md_header, md_rows) + "\n\nMedian over test frames per run, averaged over runs.",
        ))
        return written

    # -- figures --------------------------------------------------------------

    def plot_per_class_boxplots(self, evaluation: DatasetEvaluation, metrics: Sequence[str] = ("dice", "hd95_mm"),
                                name: str = "per_class_boxplot.png") -> str:
        fig, axes = plt.subplots(1, len(metrics), figsize=(5 * len(metrics), 4), squeeze=False)
        classes = evaluation.foreground_names
        for ax, metric in zip(axes[0], metrics):
            data = [[v for v in evaluation.class_values(c, metric) if v is not None] or [np.nan] for c in classes]
            boxplot = ax.boxplot(data, patch_artist=True)
            ax.set_xticks(range(1, len(classes) + 1), classes, rotation=30)
            for patch, color in zip(boxplot["boxes"], BOX_COLORS * len(classes)):
                patch.set_facecolor(color)
            ax.set_title(METRIC_HEADERS.get(metric, metric))
            ax.grid(axis="y", alpha=0.3)
        fig.tight_layout()
        path = self.path(name)
        fig.savefig(path, dpi=120)
        plt.close(fig)
        return path

    def plot_fp_fn_overlay(self, image: np.ndarray, pred, truth, class_id: int, class_name: str = "",
                           name: Optional[str] = None) -> str:
        """Grayscale frame with TP (green), FP (red) and FN (blue) pixels of one class overlaid."""
        codes = fp_fn_map(pred, truth, class_id)
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(np.asarray(image).squeeze(), cmap="gray")
        ax.imshow(CONFUSION_COLORS[codes], interpolation="nearest")
        counts = {key: int(np.count_nonzero(codes == code)) for key, code in CONFUSION_CODES.items()}
        precision = counts["TP"] / (counts["TP"] + counts["FP"]) if counts["TP"] + counts["FP"] else float("nan")
        recall = counts["TP"] / (counts["TP"] + counts["FN"]) if counts["TP"] + counts["FN"] else float("nan")
        ax.set_title(f"{class_name or class_id}: precision {precision:.2f}  recall {recall:.2f}")
        ax.axis("off")
        fig.tight_layout()
        path = self.path(name or f"fp_fn_class{class_id}.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        return path
