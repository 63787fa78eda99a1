"""
Training, evaluation and the ablation grid.

TrainingManager runs one (config, fold, seed) job: AdamW with decoupled weight decay, a frozen
audio encoder, progressive unfreezing of the image encoder and early stopping on validation
foreground Dice. run_ablation fans those jobs out over worker processes and folds the results
into an AblationReport with one row per configuration.
"""

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from tqdm import tqdm

import numcore as nc
from objectives import total_loss
from report_manager import ReportManager
from seg_metrics import TABLE_METRICS, DatasetEvaluation, LabelMask, MetricSummary, evaluate_dataset, overlap_metrics
from synth_data import load_dataset, loso_folds, preprocess_dataset, split_loso
from tensor_io import clean_run_name, ensure_directory
from vocseg_config import (
    ABLATION_CONFIGS,
    SEG_CLASS_NAMES,
    VIDEO_ONLY_LABEL,
    VIDEO_ONLY_ROW,
    ContrastiveConfig,
    LossWeights,
    RunConfigFile,
    TrainConfig,
)
from vocseg_model import VocSegModel

logger = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS = ("step", "ce", "dice", "con_global", "con_local", "total")
VALIDATION_BATCH = 32


class NonFiniteGradientError(ArithmeticError):
    def __init__(self, names: Sequence[str]):
        self.names = list(names)
        shown = ", ".join(self.names[:5]) + (" ..." if len(self.names) > 5 else "")
        super().__init__(f"non-finite gradient in {len(self.names)} parameter(s): {shown}")


class EmptyPartitionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    param_steps: dict = field(default_factory=dict)
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> None:
    """
    One AdamW update of ``params[name].data`` for every name in ``grads``.

    Moments are created lazily, so parameters that were never trainable never enter the
    state. Bias correction uses each parameter's own step count, so blocks unfrozen late
    start with an unbiased first step.
    """
    bad = [name for name, grad in grads.items() if not np.all(np.isfinite(grad))]
    if bad:
        raise NonFiniteGradientError(bad)
    state.step += 1
    for name, grad in grads.items():
        param = params[name].data
        if name not in state.first_moment:
            state.first_moment[name] = np.zeros_like(param)
            state.second_moment[name] = np.zeros_like(param)
        t = state.param_steps[name] = state.param_steps.get(name, 0) + 1
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        if state.weight_decay:
            param -= lr * state.weight_decay * param
        param -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


class AdamW:
    def __init__(self, lr: float, betas: tuple = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        if lr <= 0:
            raise ValueError(f"Invalid learning rate: {lr}")
        self.lr = lr
        self.state = OptimizerState(beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def step(self, store, lr: Optional[float] = None) -> None:
        trainable = store.trainable()
        adamw_step(trainable, {name: p.grad for name, p in trainable.items()}, self.state,
                   self.lr if lr is None else lr)


class LRScheduler:
    """Linear warmup to the base rate, then constant or linear decay to zero at ``total_steps``."""

    def __init__(self, base_lr: float, warmup_steps: int = 0, total_steps: int = 0, decay: str = "constant"):
        self.base_lr = base_lr
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.decay = decay
        self.current_step = 0

    def lr_lambda(self, current_step: int) -> float:
        if current_step < self.warmup_steps:
            return float(current_step + 1) / float(self.warmup_steps)
        if self.decay == "constant":
            return 1.0
        return max(0.0, float(self.total_steps - current_step) / float(max(1, self.total_steps - self.warmup_steps)))

    def step(self) -> float:
        lr = self.base_lr * self.lr_lambda(self.current_step)
        self.current_step += 1
        return lr


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_dice: float
    trainable_blocks: list
    improved: bool


@dataclass
class TrainResult:
    best_epoch: Optional[int]
    best_val_dice: Optional[float]
    epochs_run: int
    stopped_early: bool
    history: list
    checkpoint_path: Optional[str] = None


def mean_foreground_dice(preds: Sequence[np.ndarray], masks: Sequence[LabelMask], n_classes: int) -> float:
    """Mean over frames of the mean foreground Dice (overlap only, no surface distances)."""
    scores = []
    for labels, truth in zip(preds, masks):
        pred = LabelMask(labels, truth.spacing_mm)
        scores.append(np.mean([overlap_metrics(pred, truth, c).dice for c in range(1, n_classes)]))
    return float(np.mean(scores))


class TrainingManager:
    def __init__(self, model: VocSegModel, train_config: TrainConfig,
                 contrastive_config: Optional[ContrastiveConfig] = None,
                 loss_weights: Optional[LossWeights] = None, run_dir: Optional[str] = None):
        self.model = model
        self.config = train_config
        self.contrastive_config = contrastive_config or ContrastiveConfig()
        weights = loss_weights or LossWeights()
        if not train_config.contrastive or model.contrastive is None:
            weights = weights.model_copy(update={"w_contrastive": 0.0})
        self.loss_weights = weights
        self.run_dir = run_dir
        self.dropout_p = train_config.modality_dropout_p
        self.optimizer = AdamW(train_config.learning_rate, train_config.betas, train_config.adam_eps,
                               train_config.weight_decay)
        self._shuffle_rng = np.random.default_rng([train_config.seed, 1])
        self._dropout_rng = np.random.default_rng([train_config.seed, 2])
        self.scheduler: Optional[LRScheduler] = None
        self._step = 0
        self._log_writer = None

    def _apply_unfreeze(self, epoch: int, schedule: list) -> None:
        for start, block in schedule:
            if start <= epoch:
                changed = self.model.unfreeze_image_block(block)
                if changed:
                    logger.info(f"[INIT] Epoch {epoch}: unfroze image encoder block {block} ({len(changed)} tensors)")

    def _train_step(self, batch: list) -> float:
        model = self.model
        heads = model.contrastive if self.loss_weights.w_contrastive > 0 else None
        model.store.zero_grad()
        with nc.Tape() as tape:
            output = model.forward_batch(batch, train_flag=True, rng=self._dropout_rng, dropout_p=self.dropout_p)
            breakdown = total_loss(output, [s.mask for s in batch], self.loss_weights, self.contrastive_config, heads)
        if tape.produced(breakdown.total):
            nc.backward(tape, breakdown.total)
            self.optimizer.step(model.store, self.scheduler.step() if self.scheduler else None)
        self._step += 1
        row = breakdown.as_row()
        logger.debug(f"step {self._step}: " + " ".join(f"{k}={v:.4f}" for k, v in row.items()))
        if self._log_writer is not None:
            self._log_writer.writerow([self._step] + [f"{row[k]:.8g}" for k in TRAIN_LOG_COLUMNS[1:]])
        return row["total"]

    def validate(self, samples: Sequence) -> float:
        preds = []
        for start in range(0, len(samples), VALIDATION_BATCH):
            preds.extend(self.model.predict(samples[start:start + VALIDATION_BATCH]))
        return mean_foreground_dice(preds, [s.mask for s in samples], self.model.config.n_seg_classes)

    def train(self, train_samples: Sequence, val_samples: Sequence) -> TrainResult:
        if not train_samples:
            raise EmptyPartitionError("training partition is empty")
        if not val_samples:
            raise EmptyPartitionError("validation partition is empty")
        cfg = self.config
        model = self.model
        schedule = cfg.resolved_unfreeze_schedule(model.config.n_encoder_layers)
        model.freeze_image_encoder()
        steps_per_epoch = math.ceil(len(train_samples) / cfg.batch_size)
        self.scheduler = LRScheduler(cfg.learning_rate, cfg.warmup_steps, cfg.max_epochs * steps_per_epoch,
                                     cfg.lr_schedule)
        audio_fingerprint = model.store.fingerprint("audio_encoder.")

        log_handle = None
        if self.run_dir:
            ensure_directory(self.run_dir)
            log_handle = open(os.path.join(self.run_dir, "train.log.csv"), "w", newline="")
            self._log_writer = csv.writer(log_handle)
            self._log_writer.writerow(TRAIN_LOG_COLUMNS)

        best_dice = None
        best_epoch = None
        best_state = model.store.snapshot()
        history = []
        stale = 0
        stopped_early = False
        try:
            for epoch in range(cfg.max_epochs):
                self._apply_unfreeze(epoch, schedule)
                order = self._shuffle_rng.permutation(len(train_samples))
                losses = [
                    self._train_step([train_samples[i] for i in order[start:start + cfg.batch_size]])
                    for start in range(0, len(order), cfg.batch_size)
                ]
                val_dice = self.validate(val_samples)
                improved = best_dice is None or val_dice > best_dice
                if improved:
                    best_dice, best_epoch, stale = val_dice, epoch, 0
                    best_state = model.store.snapshot()
                else:
                    stale += 1
                history.append(EpochRecord(epoch, float(np.mean(losses)), val_dice, model.trainable_image_blocks(), improved))
                logger.info(
                    f"[STATS] Epoch {epoch}: loss={history[-1].train_loss:.4f} val_dice={val_dice:.4f} "
                    f"best={best_dice:.4f}@{best_epoch} image_blocks={history[-1].trainable_blocks}"
                )
                if stale >= cfg.patience:
                    stopped_early = True
                    logger.info(f"[OK] Early stopping after epoch {epoch} ({stale} epochs without improvement)")
                    break
        finally:
            if log_handle is not None:
                log_handle.close()
                self._log_writer = None

        model.store.restore(best_state)
        if model.store.fingerprint("audio_encoder.") != audio_fingerprint:
            raise RuntimeError("audio encoder parameters changed during training")

        result = TrainResult(best_epoch, best_dice, len(history), stopped_early, history)
        if self.run_dir:
            result.checkpoint_path = model.save_checkpoint(os.path.join(self.run_dir, "checkpoint.json"))
        return result


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvaluationResult:
    evaluation: DatasetEvaluation
    predictions: list
    missing: tuple

    @property
    def table_row(self) -> dict:
        return {metric: self.evaluation.table_row[metric].mean for metric in TABLE_METRICS}


def class_names_for(n_classes: int) -> list:
    if n_classes == len(SEG_CLASS_NAMES):
        return list(SEG_CLASS_NAMES)
    return ["background"] + [f"class_{c}" for c in range(1, n_classes)]


def evaluate(model: VocSegModel, samples: Sequence, video_only: bool = False, missing: Optional[set] = None,
             batch_size: int = 16, n_jobs: int = 1) -> EvaluationResult:
    """
    Argmax inference over ``samples`` (ties go to the lower class index) and full metrics.

    ``missing`` drops individual modalities; ``video_only`` drops audio and phono and
    strips them from the inputs so the placeholder path is the only one available.
    """
    dropped = set(missing or ())
    if video_only:
        dropped |= {"audio", "phono"}
    if dropped:
        samples = [s.without(dropped) for s in samples]
    preds = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        labels = model.predict(batch, missing=frozenset(dropped))
        preds.extend(LabelMask(l, s.mask.spacing_mm) for l, s in zip(labels, batch))
    evaluation = evaluate_dataset(preds, [s.mask for s in samples], class_names_for(model.config.n_seg_classes), n_jobs)
    return EvaluationResult(evaluation, preds, tuple(sorted(dropped)))


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    config_name: str
    held_out: int
    seed_index: int
    seed: int
    epochs_run: int
    best_val_dice: Optional[float]
    metrics: dict
    class_medians: dict
    video_only_metrics: Optional[dict] = None


@dataclass
class AblationRow:
    name: str
    label: str
    n_runs: int
    metrics: dict


@dataclass
class AblationReport:
    rows: dict
    runs: list
    folds: list
    n_seeds: int

    def mean(self, name: str, metric: str = "dice") -> Optional[float]:
        return self.rows[name].metrics[metric].mean

    def ordering_holds(self, names: Sequence[str], metric: str = "dice", tolerance: float = 0.005) -> bool:
        """True when ``names`` are in nonincreasing order of ``metric`` up to ``tolerance``."""
        means = [self.mean(name, metric) for name in names]
        return all(a + tolerance >= b for a, b in zip(means, means[1:]))

    @property
    def trained_configs(self) -> list:
        return [name for name in self.rows if any(r.config_name == name for r in self.runs)]

    @property
    def class_names(self) -> list:
        for run in self.runs:
            if run.class_medians:
                return list(run.class_medians)
        return []

    def class_median(self, name: str, class_name: str, metric: str) -> Optional[float]:
        """Per-run median of one class metric over test frames, averaged over the row's runs."""
        values = [r.class_medians.get(class_name, {}).get(metric) for r in self.runs if r.config_name == name]
        values = [v for v in values if v is not None]
        return float(np.mean(values)) if values else None


def fit_to_dataset(run_config: RunConfigFile, manifest) -> RunConfigFile:
    """Audio, phono and class widths always follow the dataset manifest."""
    return run_config.with_overrides({
        "model.n_audio_frames": manifest.n_audio_frames,
        "model.n_audio_features": manifest.n_audio_features,
        "model.n_phono_classes": manifest.n_phono_classes,
        "model.n_seg_classes": len(manifest.class_names),
    })


@lru_cache(maxsize=2)
def _prepared_dataset(dataset_dir: str, image_size: int) -> tuple:
    dataset = load_dataset(dataset_dir)
    return dataset.manifest, tuple(preprocess_dataset(dataset.samples, image_size))


def _summarize_run(result: EvaluationResult) -> tuple:
    evaluation = result.evaluation
    medians = {
        name: {metric: summary.median for metric, summary in per_metric.items()}
        for name, per_metric in evaluation.class_summaries.items()
    }
    return result.table_row, medians


def run_single(dataset_dir: str, run_config: RunConfigFile, config_name: str, held_out: int, seed_index: int,
               out_dir: Optional[str] = None) -> RunRecord:
    cfg = run_config.for_ablation(config_name)
    manifest, samples = _prepared_dataset(dataset_dir, cfg.model.image_size)
    cfg = fit_to_dataset(cfg, manifest)
    split = split_loso(list(samples), held_out, cfg.train.validation_fraction)
    seed = cfg.train.seed + 1000 * seed_index
    run_dir = None
    if out_dir and cfg.ablation.save_checkpoints:
        run_dir = os.path.join(out_dir, "runs", clean_run_name(f"{config_name} speaker {held_out} seed {seed_index}"))

    model = VocSegModel(cfg.model, seed=seed, projection_dim=cfg.contrastive.projection_dim)
    train_config = cfg.train.model_copy(update={"seed": seed, "modality_dropout_p": cfg.effective_dropout_p()})
    manager = TrainingManager(model, train_config, cfg.contrastive, cfg.loss_weights, run_dir)
    trained = manager.train(split.train, split.validation)
    metrics, medians = _summarize_run(evaluate(model, split.test))
    record = RunRecord(config_name, held_out, seed_index, seed, trained.epochs_run, trained.best_val_dice,
                       metrics, medians)
    if config_name == "vocsegmri" and cfg.ablation.include_video_only:
        record.video_only_metrics = evaluate(model, split.test, video_only=True).table_row
    logger.info(f"[OK] {config_name} speaker={held_out} seed={seed_index}: dice={metrics['dice']:.4f}")
    return record


def build_report(records: Sequence[RunRecord], configs: Sequence[str], folds: list, n_seeds: int) -> AblationReport:
    rows = {}
    for name in configs:
        runs = [r for r in records if r.config_name == name]
        rows[name] = AblationRow(
            name, ABLATION_CONFIGS[name].label, len(runs),
            {metric: MetricSummary.from_values([r.metrics[metric] for r in runs]) for metric in TABLE_METRICS},
        )
    video_runs = [r for r in records if r.video_only_metrics is not None]
    if video_runs:
        rows[VIDEO_ONLY_ROW] = AblationRow(
            VIDEO_ONLY_ROW, VIDEO_ONLY_LABEL, len(video_runs),
            {metric: MetricSummary.from_values([r.video_only_metrics[metric] for r in video_runs])
             for metric in TABLE_METRICS},
        )
    return AblationReport(rows=rows, runs=list(records), folds=list(folds), n_seeds=n_seeds)


def run_ablation(dataset_dir: str, run_config: RunConfigFile, out_dir: Optional[str] = None,
                 n_jobs: int = 1) -> AblationReport:
    """Every configured ablation row x leave-one-speaker-out fold x seed; results merged in job order."""
    settings = run_config.ablation
    dataset = load_dataset(dataset_dir)
    folds = settings.folds or loso_folds(dataset.samples)
    unknown = [f for f in folds if f not in dataset.speakers()]
    if unknown:
        raise ValueError(f"ablation folds reference unknown speakers {unknown}")
    jobs = [(name, held_out, s) for name in settings.configs for held_out in folds for s in range(settings.n_seeds)]
    logger.info(f"[INIT] Ablation: {len(settings.configs)} configs x {len(folds)} folds x {settings.n_seeds} seeds "
                f"= {len(jobs)} runs on {n_jobs} worker(s)")
    records = Parallel(n_jobs=n_jobs)(
        delayed(run_single)(dataset_dir, run_config, name, held_out, s, out_dir)
        for name, held_out, s in tqdm(jobs, desc="ablation")
    )
    report = build_report(records, settings.configs, folds, settings.n_seeds)
    if out_dir:
        run_config.write_resolved(out_dir)
        ReportManager(out_dir).write_ablation(report)
    return report
