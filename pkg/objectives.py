"""
Training objective: pixel cross-entropy, foreground soft Dice and the two-level
contrastive alignment (global pooled embeddings, local token embeddings).
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

import numcore as nc
from numcore import ShapeError, Tensor
from vocseg_config import ContrastiveConfig, LossWeights

logger = logging.getLogger(__name__)


def mask_values(masks) -> np.ndarray:
    """Label values from a LabelMask, a sequence of LabelMasks or a raw integer array."""
    if hasattr(masks, "values"):
        return np.asarray(masks.values)
    if isinstance(masks, (list, tuple)):
        return np.stack([mask_values(m) for m in masks])
    return np.asarray(masks)


def one_hot(values: np.ndarray, n_classes: int) -> np.ndarray:
    """[..., H, W] labels -> [..., C, H, W] indicator array."""
    values = np.asarray(values)
    if values.size and (values.min() < 0 or values.max() >= n_classes):
        raise ValueError(f"class index out of range [0, {n_classes})")
    classes = np.arange(n_classes).reshape((n_classes, 1, 1))
    return (np.expand_dims(values, -3) == classes).astype(np.float64)


def _check_layout(tensor: Tensor, values: np.ndarray) -> None:
    if tensor.shape[:-3] + tensor.shape[-2:] != values.shape:
        raise ShapeError(f"prediction shape {tensor.shape} does not match mask shape {values.shape}")


def cross_entropy(logits: Tensor, masks) -> Tensor:
    """Mean over every pixel of -log softmax(logits)[true class]; logits [C,H,W] or [B,C,H,W]."""
    values = mask_values(masks)
    _check_layout(logits, values)
    target = Tensor(one_hot(values, logits.shape[-3]))
    log_probs = nc.log_softmax(logits, axis=-3)
    return nc.scale(nc.sum(nc.mul(log_probs, target)), -1.0 / values.size)


def soft_dice_loss(probs: Tensor, masks, eps: float = 1e-6) -> Tensor:
    """1 - mean foreground soft Dice; batched inputs average the per-item losses."""
    values = mask_values(masks)
    _check_layout(probs, values)
    n_classes = probs.shape[-3]
    if n_classes < 2:
        raise ValueError("soft Dice needs at least one foreground class")
    target = one_hot(values, n_classes)
    intersection = nc.sum(nc.mul(probs, Tensor(target)), axis=(-2, -1))
    denominator = nc.add(nc.sum(probs, axis=(-2, -1)), Tensor(target.sum(axis=(-2, -1)) + eps))
    ratio = nc.div(nc.add(nc.scale(intersection, 2.0), eps), denominator)
    foreground = nc.slice_along(ratio, -1, 1, n_classes)
    return nc.sub(1.0, nc.mean(foreground))


def info_nce_direction(anchors: Tensor, candidates: Tensor, temperature: float) -> Tensor:
    """-(1/B) sum_i log softmax(anchors . candidates^T / tau)_ii for L2-normalized rows."""
    b = anchors.shape[0]
    if b < 2:
        raise ValueError("InfoNCE needs at least two items to draw negatives from")
    if candidates.shape != anchors.shape:
        raise ShapeError(f"embedding batches differ: {anchors.shape} vs {candidates.shape}")
    similarity = nc.scale(nc.matmul(anchors, nc.transpose(candidates)), 1.0 / temperature)
    log_probs = nc.log_softmax(similarity, axis=-1)
    return nc.scale(nc.sum(nc.mul(log_probs, Tensor(np.eye(b)))), -1.0 / b)


def info_nce(a: Tensor, b: Tensor, temperature: float) -> Tensor:
    """Symmetric InfoNCE, the mean of both directions."""
    return nc.scale(nc.add(info_nce_direction(a, b, temperature), info_nce_direction(b, a, temperature)), 0.5)


def contrastive_global(img_pool: Tensor, aud_pool: Optional[Tensor], phon_pool: Optional[Tensor],
                       temperature: float = 0.07) -> Tensor:
    """Sum of symmetric InfoNCE over the (image, audio) and (image, phono) pairs that are present."""
    terms = [info_nce(img_pool, other, temperature) for other in (aud_pool, phon_pool) if other is not None]
    if not terms:
        raise ValueError("global contrastive loss needs at least one non-image modality")
    total = terms[0]
    for term in terms[1:]:
        total = nc.add(total, term)
    return total


def contrastive_local(image_tokens: Tensor, memory_tokens: Tensor, real_mask: np.ndarray,
                      temperature: float = 0.07) -> Tensor:
    """
    Token-level InfoNCE over a batch.

    image_tokens [B,P,d] and memory_tokens [B,M,d] are L2-normalized projections;
    real_mask [B,M] marks real (non-placeholder) memory slots. Each image token's positive is
    the similarity-weighted aggregate of its own item's real memory tokens; negatives are the
    real memory tokens of every other item. Items without real memory are skipped and the
    loss is exactly 0 when no item has any.
    """
    b, m, d = memory_tokens.shape
    real_mask = np.asarray(real_mask, dtype=bool)
    if real_mask.shape != (b, m):
        raise ShapeError(f"real_mask shape {real_mask.shape} does not match memory {memory_tokens.shape[:2]}")
    items = [i for i in range(b) if real_mask[i].any()]
    if not items:
        return Tensor(0.0)
    n_patches = image_tokens.shape[1]
    flat_memory = nc.reshape(memory_tokens, (b * m, d))
    per_item = []
    for i in items:
        queries = nc.reshape(nc.take(image_tokens, [i], axis=0), (n_patches, d))
        own = nc.take(flat_memory, i * m + np.flatnonzero(real_mask[i]), axis=0)
        attention = nc.softmax(nc.scale(nc.matmul(queries, nc.transpose(own)), 1.0 / temperature), axis=-1)
        positive = nc.l2_normalize(nc.matmul(attention, own), axis=-1)
        columns = [nc.sum(nc.mul(queries, positive), axis=-1, keepdims=True)]
        negatives = [j * m + k for j in range(b) if j != i for k in np.flatnonzero(real_mask[j])]
        if negatives:
            columns.append(nc.matmul(queries, nc.transpose(nc.take(flat_memory, negatives, axis=0))))
        logits = nc.scale(nc.concat(columns, axis=-1), 1.0 / temperature)
        positive_log_prob = nc.slice_along(nc.log_softmax(logits, axis=-1), -1, 0, 1)
        per_item.append(nc.scale(nc.mean(positive_log_prob), -1.0))
    return nc.scale(nc.sum(nc.concat([nc.reshape(t, (1,)) for t in per_item])), 1.0 / len(per_item))


@dataclass
class LossBreakdown:
    total: Tensor
    ce: float
    dice: float
    con_global: float
    con_local: float

    def as_row(self) -> dict:
        return {
            "ce": self.ce,
            "dice": self.dice,
            "con_global": self.con_global,
            "con_local": self.con_local,
            "total": self.total.item(),
        }


def _global_term(output, heads, temperature: float) -> Optional[Tensor]:
    image = heads.embed(heads.image, output.image_tokens)
    terms = []
    for tokens, dropped, head in (
        (output.audio_tokens, output.dropped_audio, heads.audio),
        (output.phono_tokens, output.dropped_phono, heads.phono),
    ):
        if tokens is None or head is None:
            continue
        present = np.flatnonzero(~dropped)
        if present.size < 2:
            continue
        terms.append(info_nce(
            nc.take(image, present, axis=0),
            nc.take(heads.embed(head, tokens), present, axis=0),
            temperature,
        ))
    if not terms:
        return None
    total = terms[0]
    for term in terms[1:]:
        total = nc.add(total, term)
    return total


def contrastive_terms(output, heads, cfg: ContrastiveConfig) -> tuple:
    """(global, local) contrastive tensors for a BatchOutput; absent terms are None."""
    con_global = _global_term(output, heads, cfg.temperature) if "global" in cfg.levels else None
    con_local = None
    if "local" in cfg.levels and output.memory is not None:
        real = output.real_memory_mask()
        if real.any():
            con_local = contrastive_local(
                heads.local(heads.local_image, output.image_tokens),
                heads.local(heads.local_memory, output.memory),
                real,
                cfg.temperature,
            )
    return con_global, con_local


def total_loss(output, masks: Sequence, weights: LossWeights, cfg: ContrastiveConfig, heads=None) -> LossBreakdown:
    """
    w_ce*CE + w_dice*Dice + w_contrastive*(global + local).

    Zero-weighted terms are not evaluated at all, so w_contrastive == 0 never touches the
    contrastive heads.
    """
    if max(weights.w_ce, weights.w_dice, weights.w_contrastive) <= 0.0:
        raise ValueError("at least one loss weight must be positive")
    logits = output.logits
    parts = []
    values = {"ce": 0.0, "dice": 0.0, "con_global": 0.0, "con_local": 0.0}
    if weights.w_ce > 0:
        ce = cross_entropy(logits, masks)
        values["ce"] = ce.item()
        parts.append(nc.scale(ce, weights.w_ce) if weights.w_ce != 1.0 else ce)
    if weights.w_dice > 0:
        dice = soft_dice_loss(nc.softmax(logits, axis=-3), masks)
        values["dice"] = dice.item()
        parts.append(nc.scale(dice, weights.w_dice) if weights.w_dice != 1.0 else dice)
    if weights.w_contrastive > 0:
        if heads is None:
            raise ValueError("contrastive weight is positive but the model has no contrastive heads")
        for key, term in zip(("con_global", "con_local"), contrastive_terms(output, heads, cfg)):
            if term is not None:
                values[key] = term.item()
                parts.append(nc.scale(term, weights.w_contrastive))
    if not parts:
        # only a contrastive weight was set and no contrastive term was defined for this batch
        total = Tensor(0.0)
    else:
        total = parts[0]
        for part in parts[1:]:
            total = nc.add(total, part)
    return LossBreakdown(total=total, **values)
