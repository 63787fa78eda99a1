"""
Self-check suites run by ``vocseg_main.py verify``.

gradients: every tape primitive and the composite loss against central finite differences.
metrics:   EDT surface distances against the brute-force oracle, overlap against naive counts.
losses:    closed-form anchors of the objective functions.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

import numcore as nc
from numcore import Tensor
from objectives import contrastive_global, cross_entropy, soft_dice_loss, total_loss
from seg_metrics import (
    LabelMask,
    assd,
    brute_force_directed_distances,
    directed_distances,
    extract_surface,
    hd95,
    overlap_metrics,
)
from synth_data import MultimodalSample
from vocseg_config import ContrastiveConfig, FusionMode, LossWeights, ModelConfig
from vocseg_model import VocSegModel

logger = logging.getLogger(__name__)

PRIMITIVE_TOLERANCE = 1e-4
COMPOSITE_TOLERANCE = 1e-3
METRIC_TOLERANCE = 1e-9
SUITES = ("gradients", "metrics", "losses")


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float


@dataclass
class SuiteReport:
    suite: str
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def add(self, name: str, value: float, tolerance: float) -> CheckResult:
        result = CheckResult(name, bool(value < tolerance), float(value), tolerance)
        self.checks.append(result)
        (logger.debug if result.passed else logger.error)(
            f"{'[OK]' if result.passed else '[ERROR]'} {self.suite}/{name}: {value:.3e} (< {tolerance:g})"
        )
        return result


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def _param(rng: np.random.Generator, *shape, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _weighted(fn: Callable, weights: np.ndarray) -> Callable:
    """Reduce a tensor-valued op to a scalar with fixed random weights."""
    w = Tensor(weights)
    return lambda *xs: nc.sum(nc.mul(fn(*xs), w))


def _primitive_cases(rng: np.random.Generator) -> list:
    def case(name, fn, inputs, out_shape):
        return name, _weighted(fn, rng.normal(size=out_shape)), inputs

    # inputs kept away from the relu kink and positive where log/sqrt/div need it
    away_from_zero = rng.choice([-1.0, 1.0], size=(3, 4)) * rng.uniform(0.2, 1.0, size=(3, 4))
    return [
        case("add", nc.add, [_param(rng, 3, 4), _param(rng, 4)], (3, 4)),
        case("sub", nc.sub, [_param(rng, 3, 4), _param(rng, 3, 1)], (3, 4)),
        case("mul", nc.mul, [_param(rng, 3, 4), _param(rng, 3, 4)], (3, 4)),
        case("div", nc.div, [_param(rng, 3, 4), _param(rng, 3, 4, low=0.5, high=2.0)], (3, 4)),
        case("scale", lambda x: nc.scale(x, -1.7), [_param(rng, 2, 5)], (2, 5)),
        case("gelu", nc.gelu, [_param(rng, 3, 4, low=-3, high=3)], (3, 4)),
        case("relu", nc.relu, [Tensor(away_from_zero, requires_grad=True)], (3, 4)),
        case("sigmoid", nc.sigmoid, [_param(rng, 3, 4, low=-3, high=3)], (3, 4)),
        case("exp", nc.exp, [_param(rng, 3, 4)], (3, 4)),
        case("log", nc.log, [_param(rng, 3, 4, low=0.5, high=2.0)], (3, 4)),
        case("sqrt", nc.sqrt, [_param(rng, 3, 4, low=0.5, high=2.0)], (3, 4)),
        case("sum", lambda x: nc.sum(x, axis=1), [_param(rng, 3, 4)], (3,)),
        case("mean", lambda x: nc.mean(x, axis=0, keepdims=True), [_param(rng, 3, 4)], (1, 4)),
        case("softmax", lambda x: nc.softmax(x, axis=-1), [_param(rng, 3, 5, low=-2, high=2)], (3, 5)),
        case("log_softmax", lambda x: nc.log_softmax(x, axis=0), [_param(rng, 4, 3, low=-2, high=2)], (4, 3)),
        case("layernorm", nc.layernorm, [_param(rng, 3, 6, low=-2, high=2), _param(rng, 6), _param(rng, 6)], (3, 6)),
        case("l2_normalize", lambda x: nc.l2_normalize(x, axis=-1), [_param(rng, 3, 4)], (3, 4)),
        case("matmul", nc.matmul, [_param(rng, 5, 7), _param(rng, 7, 3)], (5, 3)),
        case("matmul_batched", nc.matmul, [_param(rng, 2, 3, 4), _param(rng, 2, 4, 2)], (2, 3, 2)),
        case("reshape", lambda x: nc.reshape(x, (4, 3)), [_param(rng, 3, 4)], (4, 3)),
        case("transpose", lambda x: nc.transpose(x, (1, 0, 2)), [_param(rng, 2, 3, 4)], (3, 2, 4)),
        case("broadcast_to", lambda x: nc.broadcast_to(x, (3, 2, 4)), [_param(rng, 2, 1)], (3, 2, 4)),
        case("concat", lambda a, b: nc.concat([a, b], axis=1), [_param(rng, 2, 3), _param(rng, 2, 2)], (2, 5)),
        case("slice_along", lambda x: nc.slice_along(x, 1, 1, 3), [_param(rng, 3, 4)], (3, 2)),
        case("take", lambda x: nc.take(x, [2, 0, 2], axis=0), [_param(rng, 3, 4)], (3, 4)),
        case("embedding_lookup", lambda t: nc.embedding_lookup(t, np.array([[1, 3], [0, 1]])),
             [_param(rng, 4, 3)], (2, 2, 3)),
        case("bilinear_resize", lambda x: nc.bilinear_resize(x, 9, 4), [_param(rng, 6, 6)], (9, 4)),
        case("nearest_resize", lambda x: nc.nearest_resize(x, 3, 8), [_param(rng, 1, 6, 6)], (1, 3, 8)),
    ]


def _composite_check(rng: np.random.Generator, n_entries: int = 25) -> float:
    """Full cross-attention loss (CE + Dice + both contrastive levels) on a 2-sample toy batch."""
    config = ModelConfig(image_size=8, patch_size=4, d_model=8, n_heads=2, n_encoder_layers=1,
                         n_decoder_layers=1, mlp_ratio=2, n_audio_frames=3, n_audio_features=4,
                         n_phono_classes=5, n_seg_classes=3, fusion_mode=FusionMode.CROSS_ATTENTION)
    model = VocSegModel(config, seed=3, projection_dim=4)
    # zero-initialized output would leave query/key/value gradients identically zero
    for name, param in model.store.params.items():
        if ".cross_attention.output." in name:
            param.data[...] = rng.normal(0.0, 0.3, size=param.shape)
    samples = [
        MultimodalSample(
            image=rng.uniform(0, 1, size=(1, 8, 8)),
            mask=LabelMask(rng.integers(0, 3, size=(8, 8)), 1.0),
            audio_features=rng.normal(size=(3, 4)),
            phono=(rng.random(5) < 0.5).astype(float),
            speaker_id=i,
            frame_index=i,
        )
        for i in range(2)
    ]
    weights = LossWeights(w_ce=1.0, w_dice=1.0, w_contrastive=0.1)
    cfg = ContrastiveConfig(projection_dim=4, temperature=0.5)
    trainable = list(model.store.trainable().values())

    def loss(*_params):
        output = model.forward_batch(samples, train_flag=False)
        return total_loss(output, [s.mask for s in samples], weights, cfg, model.contrastive).total

    candidates = [(t, i) for t in trainable for i in range(t.size)]
    picks = rng.choice(len(candidates), size=min(n_entries, len(candidates)), replace=False)
    return nc.gradient_check(loss, trainable, entries=[candidates[i] for i in picks])


def gradient_suite(seed: int = 0) -> SuiteReport:
    report = SuiteReport("gradients")
    rng = np.random.default_rng(seed)
    with nc.precision("float64"):
        for name, fn, inputs in _primitive_cases(rng):
            report.add(name, nc.gradient_check(fn, inputs), PRIMITIVE_TOLERANCE)
        report.add("composite_loss", _composite_check(rng), COMPOSITE_TOLERANCE)
    return report


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def random_mask_pair(rng: np.random.Generator, max_size: int = 32) -> tuple:
    """Blocky random label maps so classes form regions with real boundaries."""
    h, w = rng.integers(4, max_size + 1, size=2)
    n_classes = int(rng.integers(2, 6))
    spacing = float(rng.choice([0.5, 1.0, 1.2, 2.4]))

    def draw():
        coarse = rng.integers(0, n_classes, size=(max(1, h // 3), max(1, w // 3)))
        values = np.kron(coarse, np.ones((3, 3), dtype=int))[:h, :w]
        values = np.pad(values, ((0, h - values.shape[0]), (0, w - values.shape[1])), mode="edge")
        flips = rng.random((h, w)) < 0.1
        values[flips] = rng.integers(0, n_classes, size=int(flips.sum()))
        return LabelMask(values, spacing)

    return draw(), draw(), n_classes


def _naive_counts(pred: np.ndarray, truth: np.ndarray, class_id: int) -> tuple:
    tp = fp = fn = 0
    for p, t in zip(pred.reshape(-1), truth.reshape(-1)):
        tp += int(p == class_id and t == class_id)
        fp += int(p == class_id and t != class_id)
        fn += int(p != class_id and t == class_id)
    return tp, fp, fn


def metric_suite(n_pairs: int = 200, seed: int = 0) -> SuiteReport:
    report = SuiteReport("metrics")
    rng = np.random.default_rng(seed)
    worst_assd = worst_hd = worst_directed = 0.0
    count_mismatches = 0
    identity_error = 0.0
    for _ in range(n_pairs):
        pred, truth, n_classes = random_mask_pair(rng)
        for c in range(n_classes):
            overlap = overlap_metrics(pred, truth, c)
            if (overlap.tp, overlap.fp, overlap.fn) != _naive_counts(pred.values, truth.values, c):
                count_mismatches += 1
            identity_error = max(identity_error, abs(overlap.dice - 2 * overlap.iou / (1 + overlap.iou)))
            a = extract_surface(pred, c)
            b = extract_surface(truth, c)
            if not len(a) or not len(b):
                continue
            fast = assd(a, b)
            worst_assd = max(worst_assd, abs(fast - assd(a, b, brute_force=True)))
            worst_hd = max(worst_hd, abs(hd95(a, b) - hd95(a, b, brute_force=True)))
            worst_directed = max(worst_directed, float(np.max(np.abs(
                directed_distances(a, b) - brute_force_directed_distances(a, b)))))
    report.add("assd_vs_brute_force", worst_assd, METRIC_TOLERANCE)
    report.add("hd95_vs_brute_force", worst_hd, METRIC_TOLERANCE)
    report.add("directed_vs_brute_force", worst_directed, METRIC_TOLERANCE)
    report.add("overlap_count_mismatches", count_mismatches, 0.5)
    report.add("dice_iou_identity", identity_error, 1e-12)
    return report


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_suite(seed: int = 0) -> SuiteReport:
    report = SuiteReport("losses")
    rng = np.random.default_rng(seed)
    with nc.precision("float64"):
        n_classes = 5
        truth = LabelMask(rng.integers(0, n_classes, size=(6, 6)), 1.0)
        uniform = Tensor(np.zeros((n_classes, 6, 6)))
        report.add("uniform_ce_equals_log_c", abs(cross_entropy(uniform, truth).item() - math.log(n_classes)), 1e-6)

        one_hot = (truth.values[None] == np.arange(n_classes)[:, None, None]).astype(float)
        report.add("perfect_soft_dice", abs(soft_dice_loss(Tensor(one_hot), truth).item()), 1e-5)

        confident = Tensor(10.0 * one_hot)
        report.add("margin_ten_ce", cross_entropy(confident, truth).item(), 1e-3)

        for b in (2, 4, 8):
            emb = nc.l2_normalize(Tensor(rng.normal(size=(1, 6))), axis=-1)
            same = nc.broadcast_to(emb, (b, 6))
            value = contrastive_global(same, same, None, temperature=0.07).item()
            report.add(f"identical_embeddings_log_b{b}", abs(value - math.log(b)), 1e-6)

        tau = 0.07
        aligned = Tensor(np.eye(2, 4))
        expected = -math.log(math.exp(1 / tau) / (math.exp(1 / tau) + 1.0))
        value = contrastive_global(aligned, aligned, None, temperature=tau).item()
        report.add("aligned_orthogonal_pairs", abs(value - expected), 1e-9)
    return report


def run_suite(name: str, seed: int = 0) -> SuiteReport:
    if name == "gradients":
        return gradient_suite(seed)
    if name == "metrics":
        return metric_suite(seed=seed)
    if name == "losses":
        return loss_suite(seed)
    raise ValueError(f"unknown verification suite '{name}' (choose from {', '.join(SUITES)})")
