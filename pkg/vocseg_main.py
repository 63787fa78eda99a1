"""
VocSeg command line: synthetic data, training, evaluation, the ablation grid, offline metrics
and the self-check suites.

    python vocseg_main.py generate-data --speakers 5 --frames-per-speaker 300 --augment 2 --out data
    python vocseg_main.py train --data data --held-out 0 --out runs/fold0
    python vocseg_main.py eval --checkpoint runs/fold0/checkpoint.json --data data --held-out 0 --out runs/fold0/eval
    python vocseg_main.py ablate --data data --configs vocsegmri,imageonly --out runs/ablation
    python vocseg_main.py metrics --pred runs/fold0/eval/predictions --truth runs/fold0/eval/truth --out scored
    python vocseg_main.py verify gradients

Exit codes: 0 success, 1 verification failure, 2 usage/config/dataset errors, 3 non-finite abort.
"""

import json
import logging
import os
import sys
from typing import Optional

import click
import coloredlogs
from pydantic import ValidationError

from numcore import NumericalError, ShapeError
from report_manager import ReportManager
from seg_metrics import LabelMask, evaluate_dataset
from synth_data import (
    SynthSettings,
    UnknownSpeakerError,
    audio_signal_report,
    class_pixel_frequencies,
    load_dataset,
    preprocess_dataset,
    split_loso,
    write_dataset,
)
from tensor_io import TensorFormatError, ensure_directory, read_mask_file, write_mask_file
from training_manager import (
    NonFiniteGradientError,
    TrainingManager,
    class_names_for,
    evaluate,
    fit_to_dataset,
    run_ablation,
)
from verification import SUITES, run_suite
from vocseg_config import (
    ABLATION_CONFIGS,
    SEG_CLASS_NAMES,
    FusionMode,
    RunConfigFile,
    format_validation_error,
    load_environment,
    log_level,
    worker_count,
)
from vocseg_model import VocSegModel

logger = logging.getLogger("vocseg")

EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2
EXIT_NON_FINITE = 3


def _fail(message: str, code: int = EXIT_USAGE):
    click.echo(f"[ERROR] {message}", err=True)
    sys.exit(code)


def _jobs(requested: Optional[int]) -> int:
    """--jobs, defaulting to and capped at VOCSEG_THREADS."""
    limit = worker_count()
    if requested is None:
        return limit
    if requested < 1:
        _fail(f"--jobs must be at least 1, got {requested}")
    if requested > limit:
        logger.warning(f"[WARN] --jobs {requested} exceeds VOCSEG_THREADS={limit}; using {limit} worker(s)")
        return limit
    return requested


def _csv_list(value: Optional[str], cast=str) -> Optional[list]:
    if value is None:
        return None
    try:
        return [cast(part.strip()) for part in value.split(",") if part.strip()]
    except ValueError:
        _fail(f"could not parse list '{value}'")


def _load_run_config(config_path: Optional[str], overrides: dict) -> RunConfigFile:
    """File values, then flag overrides; schema violations are reported by dotted key path."""
    try:
        return RunConfigFile.from_json_file(config_path).with_overrides(overrides)
    except FileNotFoundError:
        _fail(f"config file not found: {config_path}")
    except json.JSONDecodeError as e:
        _fail(f"config file {config_path} is not valid JSON: {e}")
    except ValidationError as e:
        for line in format_validation_error(e):
            click.echo(f"[ERROR] config {line}", err=True)
        sys.exit(EXIT_USAGE)


def _load_dataset(path: Optional[str]):
    if not path:
        _fail("no dataset path given (use --data or the 'dataset' key of the config file)")
    try:
        return load_dataset(path)
    except FileNotFoundError as e:
        _fail(str(e))
    except (ValidationError, TensorFormatError) as e:
        _fail(f"dataset at {path} is unreadable: {e}")


def _frame_id(sample) -> str:
    return f"s{sample.speaker_id:02d}_f{sample.frame_index:04d}"


@click.group()
@click.option("--log-level", "log_level_name", default=None,
              help="Logging level (default: env VOCSEG_LOG_LEVEL or INFO).")
def cli(log_level_name: Optional[str]):
    """VocSeg: multimodal vocal-tract segmentation on synthetic rtMRI."""
    load_environment()
    level = (log_level_name or log_level()).upper()
    coloredlogs.install(level=level, fmt="%(asctime)s %(name)s %(levelname)s %(message)s")


# ---------------------------------------------------------------------------
# generate-data
# ---------------------------------------------------------------------------

@cli.command("generate-data")
@click.option("--speakers", type=int, default=5, show_default=True, help="Number of synthetic speakers.")
@click.option("--frames-per-speaker", type=int, default=100, show_default=True, help="Original frames per speaker.")
@click.option("--augment", type=int, default=2, show_default=True, help="Augmented copies per original frame.")
@click.option("--seed", type=int, default=17, show_default=True, help="Global generator seed.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output dataset directory.")
@click.option("--jobs", type=int, default=None, help="Worker processes (default and cap: VOCSEG_THREADS).")
def generate_data(speakers, frames_per_speaker, augment, seed, out_dir, jobs):
    """Write a synthetic multimodal dataset (manifest.json + per-speaker tensor blobs)."""
    try:
        settings = SynthSettings(n_speakers=speakers, frames_per_speaker=frames_per_speaker,
                                 augmentations=augment, seed=seed)
    except ValidationError as e:
        for line in format_validation_error(e):
            click.echo(f"[ERROR] {line}", err=True)
        sys.exit(EXIT_USAGE)
    try:
        manifest = write_dataset(out_dir, settings, n_jobs=_jobs(jobs))
    except OSError as e:
        _fail(f"cannot write dataset to {out_dir}: {e}")

    dataset = load_dataset(out_dir)
    click.echo(f"[OK] {manifest.total_samples} samples ({speakers} speakers x {frames_per_speaker} frames x "
               f"{1 + augment})")
    frequencies = class_pixel_frequencies(dataset.samples, len(manifest.class_names))
    for name, frequency in zip(manifest.class_names, frequencies):
        click.echo(f"  {name:<10} {frequency:.4f}")
    try:
        signal = audio_signal_report(dataset.samples, seed=seed)
        verdict = "informative" if signal.informative else "NOT informative"
        click.echo(f"[STATS] audio->tongue regression MAE {signal.mae_real_px:.2f}px vs shuffled "
                   f"{signal.mae_shuffled_px:.2f}px ({verdict})")
    except ValueError as e:
        logger.warning(f"[WARN] audio signal check skipped: {e}")
    if speakers < 3:
        logger.warning("[WARN] fewer than 3 speakers: leave-one-speaker-out training will refuse this dataset")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--data", "data_dir", type=click.Path(), default=None, help="Dataset directory.")
@click.option("--config", "config_path", type=click.Path(), default=None, help="JSON run config.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Run directory.")
@click.option("--held-out", type=int, default=0, show_default=True, help="Test speaker of the fold.")
@click.option("--mode", type=click.Choice([m.value for m in FusionMode]), default=None, help="Fusion mode.")
@click.option("--contrastive/--no-contrastive", default=None, help="Enable the contrastive objective.")
@click.option("--epochs", type=int, default=None, help="Maximum epochs.")
@click.option("--lr", type=float, default=None, help="Learning rate.")
@click.option("--batch-size", type=int, default=None, help="Batch size.")
@click.option("--patience", type=int, default=None, help="Early-stopping patience in epochs.")
@click.option("--dropout", type=float, default=None, help="Modality dropout probability.")
@click.option("--seed", type=int, default=None, help="Training seed.")
def train(data_dir, config_path, out_dir, held_out, mode, contrastive, epochs, lr, batch_size, patience,
          dropout, seed):
    """Train one leave-one-speaker-out fold and write checkpoint.json/.vstn and train.log.csv."""
    run_config = _load_run_config(config_path, {
        "dataset": data_dir,
        "model.fusion_mode": mode,
        "train.contrastive": contrastive,
        "train.max_epochs": epochs,
        "train.learning_rate": lr,
        "train.batch_size": batch_size,
        "train.patience": patience,
        "train.modality_dropout_p": dropout,
        "train.seed": seed,
    })
    dataset = _load_dataset(run_config.dataset)
    run_config = fit_to_dataset(run_config, dataset.manifest)
    samples = preprocess_dataset(dataset.samples, run_config.model.image_size)
    try:
        split = split_loso(samples, held_out, run_config.train.validation_fraction)
    except UnknownSpeakerError:
        _fail(f"speaker {held_out} is not in the dataset (speakers: {dataset.speakers()})")
    except ValueError as e:
        _fail(str(e))

    ensure_directory(out_dir)
    run_config.write_resolved(out_dir)
    model = VocSegModel(run_config.model, seed=run_config.train.seed,
                        projection_dim=run_config.contrastive.projection_dim)
    train_config = run_config.train.model_copy(update={"modality_dropout_p": run_config.effective_dropout_p()})
    manager = TrainingManager(model, train_config, run_config.contrastive, run_config.loss_weights, out_dir)
    try:
        result = manager.train(split.train, split.validation)
    except (NonFiniteGradientError, NumericalError) as e:
        _fail(f"training aborted: {e}", EXIT_NON_FINITE)
    if result.best_val_dice is None:
        click.echo(f"[OK] no epochs run; initial weights saved to {result.checkpoint_path}")
    else:
        click.echo(f"[OK] best validation Dice {result.best_val_dice:.4f} at epoch {result.best_epoch} "
                   f"({result.epochs_run} epochs); checkpoint {result.checkpoint_path}")


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _load_checkpoint(checkpoint: str) -> VocSegModel:
    if not os.path.exists(os.path.splitext(checkpoint)[0] + ".json"):
        _fail(f"checkpoint not found: {checkpoint}")
    try:
        return VocSegModel.load_checkpoint(checkpoint)
    except (ShapeError, ValueError, KeyError, TensorFormatError) as e:
        _fail(f"checkpoint {checkpoint} is unusable: {e}")


def _checkpoint_mismatches(model_config, expected) -> list:
    """Architecture fields where a checkpoint differs from the config fitted to the dataset."""
    ours = model_config.model_dump(mode="json", exclude={"modality_dropout_p"})
    theirs = expected.model_dump(mode="json", exclude={"modality_dropout_p"})
    return [f"model.{key}: checkpoint {ours[key]} vs expected {theirs[key]}" for key in ours if ours[key] != theirs[key]]


@cli.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(), help="checkpoint.json written by train.")
@click.option("--data", "data_dir", type=click.Path(), default=None, help="Dataset directory.")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="JSON run config the checkpoint must match (default: the checkpoint's own model section).")
@click.option("--held-out", type=int, default=0, show_default=True, help="Speaker to evaluate.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Report directory.")
@click.option("--video-only", is_flag=True, help="Drop audio and phonological inputs (placeholder memory).")
@click.option("--no-audio", is_flag=True, help="Drop audio only.")
@click.option("--jobs", type=int, default=None, help="Worker processes for metrics (default and cap: VOCSEG_THREADS).")
def eval_command(checkpoint, data_dir, config_path, held_out, out_dir, video_only, no_audio, jobs):
    """Evaluate a checkpoint on the held-out speaker's original frames."""
    model = _load_checkpoint(checkpoint)
    run_config = _load_run_config(config_path, {"dataset": data_dir})
    if config_path is None:
        run_config = run_config.model_copy(update={"model": model.config})
    dataset = _load_dataset(run_config.dataset)
    mismatches = _checkpoint_mismatches(model.config, fit_to_dataset(run_config, dataset.manifest).model)
    if mismatches:
        for line in mismatches:
            click.echo(f"[ERROR] {line}", err=True)
        _fail(f"checkpoint {checkpoint} does not fit the dataset at {run_config.dataset}")
    samples = preprocess_dataset(dataset.samples, model.config.image_size)
    test = [s for s in samples if s.speaker_id == held_out and not s.augmented]
    if not test:
        _fail(f"speaker {held_out} is not in the dataset (speakers: {dataset.speakers()})")

    try:
        result = evaluate(model, test, video_only=video_only, missing={"audio"} if no_audio else None,
                          n_jobs=_jobs(jobs))
    except (ShapeError, ValueError) as e:
        _fail(f"evaluation failed: {e}")
    ensure_directory(out_dir)
    RunConfigFile(model=model.config, dataset=run_config.dataset).write_resolved(out_dir)
    reports = ReportManager(out_dir)
    frame_ids = [_frame_id(s) for s in test]
    dropped = ", ".join(result.missing) or "none"
    reports.write_evaluation(result.evaluation, title=f"Speaker {held_out} (dropped modalities: {dropped})",
                             frame_ids=frame_ids)
    reports.plot_per_class_boxplots(result.evaluation)
    class_names = result.evaluation.class_names
    for class_id in range(1, len(class_names)):
        reports.plot_fp_fn_overlay(test[0].image, result.predictions[0], test[0].mask, class_id,
                                   class_names[class_id], name=f"fp_fn_{class_names[class_id]}.png")
    for sub in ("predictions", "truth"):
        ensure_directory(os.path.join(out_dir, sub))
    for frame_id, pred, sample in zip(frame_ids, result.predictions, test):
        write_mask_file(os.path.join(out_dir, "predictions", frame_id + ".vstn"), pred.values, pred.spacing_mm,
                        class_names)
        write_mask_file(os.path.join(out_dir, "truth", frame_id + ".vstn"), sample.mask.values,
                        sample.mask.spacing_mm, class_names)
    row = result.evaluation.table_row
    click.echo(f"[OK] {len(test)} frames: Dice {row['dice'].formatted()}  IoU {row['iou'].formatted()}  "
               f"ASSD {row['assd_mm'].formatted()} mm  HD95 {row['hd95_mm'].formatted()} mm")


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--data", "data_dir", type=click.Path(), default=None, help="Dataset directory.")
@click.option("--config", "config_path", type=click.Path(), default=None, help="JSON run config.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Report directory.")
@click.option("--configs", default=None, help=f"Comma-separated subset of: {', '.join(ABLATION_CONFIGS)}.")
@click.option("--seeds", type=int, default=None, help="Seeds per fold.")
@click.option("--folds", default=None, help="Comma-separated held-out speakers (default: all).")
@click.option("--epochs", type=int, default=None, help="Maximum epochs per run.")
@click.option("--no-video-only", is_flag=True, help="Skip the video-only VocSegMRI row.")
@click.option("--save-checkpoints", is_flag=True, help="Keep a checkpoint and train.log.csv per run.")
@click.option("--jobs", type=int, default=None, help="Parallel runs (default and cap: VOCSEG_THREADS).")
def ablate(data_dir, config_path, out_dir, configs, seeds, folds, epochs, no_video_only, save_checkpoints, jobs):
    """Run the configuration x fold x seed grid and write ablation.csv/.md."""
    run_config = _load_run_config(config_path, {
        "dataset": data_dir,
        "ablation.configs": _csv_list(configs),
        "ablation.n_seeds": seeds,
        "ablation.folds": _csv_list(folds, int),
        "ablation.include_video_only": False if no_video_only else None,
        "ablation.save_checkpoints": True if save_checkpoints else None,
        "train.max_epochs": epochs,
    })
    dataset_dir = run_config.dataset
    _load_dataset(dataset_dir)
    try:
        report = run_ablation(dataset_dir, run_config, out_dir, n_jobs=_jobs(jobs))
    except (UnknownSpeakerError, ValueError) as e:
        _fail(str(e))
    except (NonFiniteGradientError, NumericalError) as e:
        _fail(f"ablation aborted: {e}", EXIT_NON_FINITE)
    with open(os.path.join(out_dir, "ablation.md")) as handle:
        click.echo(handle.read())
    click.echo(f"[OK] {len(report.runs)} runs written to {out_dir}")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--pred", "pred_dir", required=True, type=click.Path(), help="Directory of predicted .vstn masks.")
@click.option("--truth", "truth_dir", required=True, type=click.Path(), help="Directory of ground-truth .vstn masks.")
@click.option("--spacing", type=float, default=None, help="Pixel spacing in mm (default: truth sidecars).")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Report directory.")
@click.option("--jobs", type=int, default=None, help="Worker processes (default and cap: VOCSEG_THREADS).")
def metrics(pred_dir, truth_dir, spacing, out_dir, jobs):
    """Score predicted label rasters against ground truth (per-frame CSV + summary)."""
    for path in (pred_dir, truth_dir):
        if not os.path.isdir(path):
            _fail(f"not a directory: {path}")
    preds = {f for f in os.listdir(pred_dir) if f.endswith(".vstn")}
    truths = {f for f in os.listdir(truth_dir) if f.endswith(".vstn")}
    unmatched = sorted(preds ^ truths)
    if unmatched:
        for name in unmatched:
            click.echo(f"[ERROR] unmatched file: {name}", err=True)
        sys.exit(EXIT_USAGE)
    if not preds:
        _fail(f"no .vstn masks in {pred_dir}")
    if spacing is not None and spacing <= 0:
        _fail("--spacing must be positive")

    names = sorted(preds)
    pred_masks, truth_masks = [], []
    class_names = None
    for name in names:
        try:
            pred_values, _, _ = read_mask_file(os.path.join(pred_dir, name))
            truth_values, truth_spacing, truth_classes = read_mask_file(os.path.join(truth_dir, name))
        except TensorFormatError as e:
            _fail(f"{name}: {e}")
        frame_spacing = spacing or truth_spacing
        if frame_spacing is None:
            _fail(f"{name}: no spacing in sidecar, pass --spacing")
        pred_masks.append(LabelMask(pred_values, frame_spacing))
        truth_masks.append(LabelMask(truth_values, frame_spacing))
        class_names = class_names or truth_classes
    if class_names is None:
        n_classes = int(max(max(m.values.max() for m in pred_masks), max(m.values.max() for m in truth_masks))) + 1
        class_names = list(SEG_CLASS_NAMES) if n_classes <= len(SEG_CLASS_NAMES) else class_names_for(n_classes)

    evaluation = evaluate_dataset(pred_masks, truth_masks, class_names, n_jobs=_jobs(jobs))
    frame_ids = [os.path.splitext(n)[0] for n in names]
    ReportManager(out_dir).write_evaluation(evaluation, title=f"Metrics: {pred_dir} vs {truth_dir}",
                                            frame_ids=frame_ids)
    excluded = evaluation.exclusion_counts()
    row = evaluation.table_row
    click.echo(f"[OK] {evaluation.n_frames} frames: Dice {row['dice'].formatted()}  "
               f"HD95 {row['hd95_mm'].formatted()} mm  (undefined HD95 entries: {excluded['hd95_mm']})")


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

@cli.command()
@click.argument("suite", type=click.Choice(list(SUITES) + ["all"]), default="all")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for random test instances.")
def verify(suite, seed):
    """Run the gradient, metric-oracle and loss-anchor self checks."""
    names = SUITES if suite == "all" else (suite,)
    failed = False
    for name in names:
        report = run_suite(name, seed)
        worst = max(report.checks, key=lambda c: c.value / c.tolerance)
        status = "PASS" if report.passed else "FAIL"
        click.echo(f"{status} {name}: {len(report.checks)} checks, worst {worst.name}={worst.value:.3e} "
                   f"(< {worst.tolerance:g})")
        for check in report.failures:
            click.echo(f"  FAIL {check.name}: {check.value:.3e} >= {check.tolerance:g}")
        failed |= not report.passed
    if failed:
        sys.exit(EXIT_VERIFY_FAILED)


if __name__ == "__main__":
    cli()
