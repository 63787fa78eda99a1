"""
Segmentation metrics: IoU, Dice, precision/recall, ASSD and HD95 in millimetres.

Surfaces are 4-connected boundaries (the image border counts as background). Directed
surface distances come from an exact Euclidean distance transform; the O(|A||B|) pairwise
version is kept as an oracle. Undefined metrics are None and are excluded from aggregates.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy.ndimage import binary_erosion, distance_transform_edt
from scipy.spatial.distance import cdist

from numcore import ShapeError

logger = logging.getLogger(__name__)

CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
CONFUSION_CODES = {"TN": 0, "TP": 1, "FP": 2, "FN": 3}
METRIC_NAMES = ("iou", "dice", "precision", "recall", "assd_mm", "hd95_mm")
TABLE_METRICS = ("iou", "dice", "assd_mm", "hd95_mm")


@dataclass(frozen=True, eq=False)
class LabelMask:
    values: np.ndarray
    spacing_mm: float

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ShapeError(f"LabelMask must be 2-D, got shape {values.shape}")
        if values.size and (values.min() < 0 or values.max() > 255):
            raise ValueError("label values must fit in an unsigned byte")
        if not self.spacing_mm > 0:
            raise ValueError(f"spacing_mm must be positive, got {self.spacing_mm}")
        object.__setattr__(self, "values", values.astype(np.uint8, copy=False))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def check_classes(self, n_classes: int) -> None:
        if self.values.size and int(self.values.max()) >= n_classes:
            raise ValueError(f"mask holds class {int(self.values.max())} but only {n_classes} classes exist")


@dataclass
class OverlapMetrics:
    iou: Optional[float]
    dice: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    tp: int
    fp: int
    fn: int

    @property
    def undefined(self) -> list:
        return [name for name in ("iou", "dice", "precision", "recall") if getattr(self, name) is None]


@dataclass
class SurfacePointSet:
    pixels: np.ndarray
    spacing_mm: float
    shape: tuple

    def __len__(self) -> int:
        return len(self.pixels)

    @property
    def coords_mm(self) -> np.ndarray:
        return self.pixels.astype(np.float64) * self.spacing_mm

    def raster(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        if len(self.pixels):
            out[self.pixels[:, 0], self.pixels[:, 1]] = True
        return out


@dataclass
class ClassMetrics:
    class_id: int
    class_name: str
    iou: Optional[float]
    dice: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    assd_mm: Optional[float]
    hd95_mm: Optional[float]
    support_pixels: int
    predicted_pixels: int

    @property
    def undefined(self) -> list:
        return [name for name in METRIC_NAMES if getattr(self, name) is None]

    def as_row(self) -> dict:
        row = {"class_id": self.class_id, "class_name": self.class_name}
        row.update({name: getattr(self, name) for name in METRIC_NAMES})
        row.update({"support_pixels": self.support_pixels, "predicted_pixels": self.predicted_pixels})
        return row


def _check_pair(pred: LabelMask, truth: LabelMask) -> None:
    if pred.values.shape != truth.values.shape:
        raise ShapeError(f"prediction {pred.values.shape} and truth {truth.values.shape} differ in size")
    if not np.isclose(pred.spacing_mm, truth.spacing_mm):
        raise ValueError(f"prediction spacing {pred.spacing_mm} mm differs from truth spacing {truth.spacing_mm} mm")


def _ratio(numerator: int, denominator: int) -> Optional[float]:
    return numerator / denominator if denominator else None


def overlap_metrics(pred: LabelMask, truth: LabelMask, class_id: int) -> OverlapMetrics:
    _check_pair(pred, truth)
    p = pred.values == class_id
    t = truth.values == class_id
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    union = tp + fp + fn
    if union == 0:
        iou = dice = 1.0
    else:
        iou = tp / union
        dice = 2 * tp / (2 * tp + fp + fn)
    return OverlapMetrics(iou, dice, _ratio(tp, tp + fp), _ratio(tp, tp + fn), tp, fp, fn)


def extract_surface(mask: LabelMask, class_id: int) -> SurfacePointSet:
    region = mask.values == class_id
    boundary = region & ~binary_erosion(region, structure=CROSS, border_value=0)
    return SurfacePointSet(np.argwhere(boundary), mask.spacing_mm, mask.values.shape)


def directed_distances(a: SurfacePointSet, b: SurfacePointSet) -> np.ndarray:
    """Distance (mm) from every point of ``a`` to its nearest point of ``b``."""
    if a.shape != b.shape:
        raise ShapeError("surface rasters differ in size")
    if not np.isclose(a.spacing_mm, b.spacing_mm):
        raise ValueError("surface point sets differ in pixel spacing")
    if not len(a) or not len(b):
        return np.empty(0)
    distance_map = distance_transform_edt(~b.raster(), sampling=(b.spacing_mm, b.spacing_mm))
    return distance_map[a.pixels[:, 0], a.pixels[:, 1]]


def brute_force_directed_distances(a: SurfacePointSet, b: SurfacePointSet) -> np.ndarray:
    if not len(a) or not len(b):
        return np.empty(0)
    return cdist(a.coords_mm, b.coords_mm).min(axis=1)


def _pooled(a: SurfacePointSet, b: SurfacePointSet, brute_force: bool) -> Optional[np.ndarray]:
    if not len(a) or not len(b):
        return None
    directed = brute_force_directed_distances if brute_force else directed_distances
    return np.concatenate([directed(a, b), directed(b, a)])


def assd(a: SurfacePointSet, b: SurfacePointSet, brute_force: bool = False) -> Optional[float]:
    pooled = _pooled(a, b, brute_force)
    return None if pooled is None else float(pooled.mean())


def hd95(a: SurfacePointSet, b: SurfacePointSet, brute_force: bool = False) -> Optional[float]:
    pooled = _pooled(a, b, brute_force)
    return None if pooled is None else float(np.percentile(pooled, 95, method="linear"))


def hausdorff(a: SurfacePointSet, b: SurfacePointSet) -> Optional[float]:
    pooled = _pooled(a, b, False)
    return None if pooled is None else float(pooled.max())


def class_metrics(pred: LabelMask, truth: LabelMask, class_id: int, class_name: str = "") -> ClassMetrics:
    overlap = overlap_metrics(pred, truth, class_id)
    pred_surface = extract_surface(pred, class_id)
    truth_surface = extract_surface(truth, class_id)
    pooled = _pooled(pred_surface, truth_surface, False)
    return ClassMetrics(
        class_id=class_id,
        class_name=class_name or str(class_id),
        iou=overlap.iou,
        dice=overlap.dice,
        precision=overlap.precision,
        recall=overlap.recall,
        assd_mm=None if pooled is None else float(pooled.mean()),
        hd95_mm=None if pooled is None else float(np.percentile(pooled, 95, method="linear")),
        support_pixels=overlap.tp + overlap.fn,
        predicted_pixels=overlap.tp + overlap.fp,
    )


def frame_metrics(pred: LabelMask, truth: LabelMask, class_names: Sequence[str]) -> list:
    """Foreground ClassMetrics (classes 1..C-1) for one frame."""
    _check_pair(pred, truth)
    return [class_metrics(pred, truth, c, class_names[c]) for c in range(1, len(class_names))]


def fp_fn_map(pred: LabelMask, truth: LabelMask, class_id: int) -> np.ndarray:
    _check_pair(pred, truth)
    p = pred.values == class_id
    t = truth.values == class_id
    codes = np.full(p.shape, CONFUSION_CODES["TN"], dtype=np.uint8)
    codes[p & t] = CONFUSION_CODES["TP"]
    codes[p & ~t] = CONFUSION_CODES["FP"]
    codes[~p & t] = CONFUSION_CODES["FN"]
    return codes


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

@dataclass
class MetricSummary:
    mean: Optional[float]
    std: Optional[float]
    n_defined: int
    n_undefined: int
    quantiles: Optional[tuple] = None

    @classmethod
    def from_values(cls, values: Sequence[Optional[float]]) -> "MetricSummary":
        defined = np.array([v for v in values if v is not None and not np.isnan(v)], dtype=np.float64)
        n_undefined = len(values) - len(defined)
        if not len(defined):
            return cls(None, None, 0, n_undefined)
        quantiles = tuple(float(q) for q in np.quantile(defined, [0.0, 0.25, 0.5, 0.75, 1.0]))
        return cls(float(defined.mean()), float(defined.std()), len(defined), n_undefined, quantiles)

    @property
    def median(self) -> Optional[float]:
        return None if self.quantiles is None else self.quantiles[2]

    def formatted(self, digits: int = 3) -> str:
        if self.mean is None:
            return "n/a"
        return f"{self.mean:.{digits}f} ± {self.std:.{digits}f}"


@dataclass
class DatasetEvaluation:
    class_names: list
    per_frame: list
    class_summaries: dict = field(default_factory=dict)
    frame_scores: dict = field(default_factory=dict)
    table_row: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.per_frame)

    @property
    def foreground_names(self) -> list:
        return list(self.class_names[1:])

    def exclusion_counts(self) -> dict:
        counts = {name: 0 for name in METRIC_NAMES}
        for frame in self.per_frame:
            for metrics in frame:
                for name in metrics.undefined:
                    counts[name] += 1
        return counts

    def class_values(self, class_name: str, metric: str) -> list:
        index = self.foreground_names.index(class_name)
        return [getattr(frame[index], metric) for frame in self.per_frame]


def _frame_score(frame: list, metric: str) -> Optional[float]:
    values = [getattr(m, metric) for m in frame if getattr(m, metric) is not None]
    return float(np.mean(values)) if values else None


def summarize(per_frame: list, class_names: Sequence[str]) -> DatasetEvaluation:
    evaluation = DatasetEvaluation(class_names=list(class_names), per_frame=per_frame)
    for index, name in enumerate(evaluation.foreground_names):
        evaluation.class_summaries[name] = {
            metric: MetricSummary.from_values([getattr(frame[index], metric) for frame in per_frame])
            for metric in METRIC_NAMES
        }
    for metric in METRIC_NAMES:
        scores = [_frame_score(frame, metric) for frame in per_frame]
        evaluation.frame_scores[metric] = scores
        evaluation.table_row[metric] = MetricSummary.from_values(scores)
    return evaluation


def evaluate_dataset(preds: Sequence[LabelMask], truths: Sequence[LabelMask], class_names: Sequence[str],
                     n_jobs: int = 1) -> DatasetEvaluation:
    """Per-frame foreground metrics plus mean ± std (population std) skipping undefined entries."""
    if len(preds) != len(truths):
        raise ShapeError(f"{len(preds)} predictions vs {len(truths)} ground-truth masks")
    if not preds:
        raise ValueError("evaluate_dataset needs at least one frame")
    per_frame = Parallel(n_jobs=n_jobs)(
        delayed(frame_metrics)(pred, truth, class_names) for pred, truth in zip(preds, truths)
    )
    evaluation = summarize(list(per_frame), class_names)
    excluded = evaluation.exclusion_counts()
    logger.info(
        f"[STATS] Evaluated {evaluation.n_frames} frames: "
        f"dice={evaluation.table_row['dice'].formatted()} hd95={evaluation.table_row['hd95_mm'].formatted()} mm "
        f"(undefined distances: {excluded['hd95_mm']})"
    )
    return evaluation
