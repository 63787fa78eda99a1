"""
VocSegMRI network at desk scale.

ViT-style image encoder, frozen audio encoder, phonological MLP, memory-token builder,
Transformer decoder (image tokens query the memory through cross-attention) and a linear
patch-logit head. The concat-fusion baselines share every component except the decoder's
cross-attention sublayer.

All parameters live in one ParameterStore addressed by dotted names, which is what the
optimizer, the progressive-unfreezing schedule and the checkpoint format work with.
Batched tensors are [B, ...]; the single-sample methods accept either form.
"""

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

import numcore as nc
from numcore import ShapeError, Tensor
from tensor_io import read_tensor_at, write_tensors
from vocseg_config import FusionMode, ModelConfig

logger = logging.getLogger(__name__)

MASKED_LOGIT = -1e9
PROVENANCE_AUDIO = "audio"
PROVENANCE_PHONO = "phono"
PROVENANCE_NULL = "null"
CHECKPOINT_FORMAT = "vocseg-checkpoint"


class ParameterStore:
    """Named parameters with a seeded initializer and a permanently-frozen set."""

    def __init__(self, seed: int):
        self._rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.permanently_frozen: set[str] = set()

    def create(self, name: str, shape: tuple, init: str = "xavier", frozen: bool = False) -> Tensor:
        if name in self.params:
            raise ValueError(f"Parameter '{name}' already exists")
        if init == "xavier":
            std = math.sqrt(2.0 / (shape[0] + shape[-1]))
            data = self._rng.normal(0.0, std, size=shape)
        elif init == "normal":
            data = self._rng.normal(0.0, 0.02, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"Unknown initializer '{init}'")
        param = Tensor(data, requires_grad=not frozen, name=name)
        self.params[name] = param
        if frozen:
            self.permanently_frozen.add(name)
        return param

    def set_trainable(self, prefix: str, flag: bool) -> list:
        changed = []
        for name, param in self.params.items():
            if name.startswith(prefix) and name not in self.permanently_frozen and param.requires_grad != flag:
                param.set_requires_grad(flag)
                changed.append(name)
        return changed

    def trainable(self) -> dict:
        return {name: p for name, p in self.params.items() if p.requires_grad}

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def fingerprint(self, prefix: str = "") -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            if name.startswith(prefix):
                digest.update(name.encode())
                digest.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return digest.hexdigest()

    def snapshot(self) -> dict:
        return {name: p.data.copy() for name, p in self.params.items()}

    def restore(self, snapshot: dict) -> None:
        for name, data in snapshot.items():
            self.params[name].data[...] = data

    def count(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self.params.values() if p.requires_grad or not trainable_only)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

class Linear:
    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int, frozen: bool = False,
                 init: str = "xavier"):
        self.weight = store.create(f"{name}.weight", (d_in, d_out), init, frozen)
        self.bias = store.create(f"{name}.bias", (d_out,), "zeros", frozen)

    def __call__(self, x: Tensor) -> Tensor:
        return nc.add(nc.matmul(x, self.weight), self.bias)


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, width: int, frozen: bool = False):
        self.gain = store.create(f"{name}.gain", (width,), "ones", frozen)
        self.bias = store.create(f"{name}.bias", (width,), "zeros", frozen)

    def __call__(self, x: Tensor) -> Tensor:
        return nc.layernorm(x, self.gain, self.bias)


class FeedForward:
    def __init__(self, store: ParameterStore, name: str, width: int, ratio: int, frozen: bool = False):
        self.expand = Linear(store, f"{name}.expand", width, width * ratio, frozen)
        self.contract = Linear(store, f"{name}.contract", width * ratio, width, frozen)

    def __call__(self, x: Tensor) -> Tensor:
        return self.contract(nc.gelu(self.expand(x)))


class MultiHeadAttention:
    """Scaled dot-product attention; returns the output and the weights [B, heads, Nq, Nk]."""

    def __init__(self, store: ParameterStore, name: str, width: int, n_heads: int, frozen: bool = False,
                 output_init: str = "xavier"):
        self.n_heads = n_heads
        self.head_dim = width // n_heads
        self.query = Linear(store, f"{name}.query", width, width, frozen)
        self.key = Linear(store, f"{name}.key", width, width, frozen)
        self.value = Linear(store, f"{name}.value", width, width, frozen)
        self.output = Linear(store, f"{name}.output", width, width, frozen, output_init)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return nc.transpose(nc.reshape(x, (b, n, self.n_heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, queries: Tensor, keys_values: Tensor, key_bias: Optional[np.ndarray] = None,
                 temperature: float = 1.0) -> tuple:
        b, n, width = queries.shape
        q = self._split(self.query(queries))
        k = self._split(self.key(keys_values))
        v = self._split(self.value(keys_values))
        scores = nc.scale(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))), 1.0 / (math.sqrt(self.head_dim) * temperature))
        if key_bias is not None:
            scores = nc.add(scores, Tensor(key_bias[:, None, None, :]))
        weights = nc.softmax(scores, axis=-1)
        context = nc.reshape(nc.transpose(nc.matmul(weights, v), (0, 2, 1, 3)), (b, n, width))
        return self.output(context), weights.data


class EncoderBlock:
    """Pre-norm Transformer encoder block."""

    def __init__(self, store: ParameterStore, name: str, width: int, n_heads: int, ratio: int, frozen: bool = False):
        self.norm1 = LayerNorm(store, f"{name}.norm1", width, frozen)
        self.attention = MultiHeadAttention(store, f"{name}.attention", width, n_heads, frozen)
        self.norm2 = LayerNorm(store, f"{name}.norm2", width, frozen)
        self.mlp = FeedForward(store, f"{name}.mlp", width, ratio, frozen)

    def __call__(self, x: Tensor) -> Tensor:
        normed = self.norm1(x)
        x = nc.add(x, self.attention(normed, normed)[0])
        return nc.add(x, self.mlp(self.norm2(x)))


class DecoderBlock:
    """
    Post-norm block: self-attention, optional cross-attention into memory, MLP.

    The cross-attention output projection starts at zero, so an untrained decoder ignores
    its memory and fusion is learned on top of the image path.
    """

    def __init__(self, store: ParameterStore, name: str, width: int, n_heads: int, ratio: int, cross: bool):
        self.self_attention = MultiHeadAttention(store, f"{name}.self_attention", width, n_heads)
        self.norm1 = LayerNorm(store, f"{name}.norm1", width)
        self.cross_attention = (
            MultiHeadAttention(store, f"{name}.cross_attention", width, n_heads, output_init="zeros") if cross else None
        )
        self.norm2 = LayerNorm(store, f"{name}.norm2", width) if cross else None
        self.mlp = FeedForward(store, f"{name}.mlp", width, ratio)
        self.norm3 = LayerNorm(store, f"{name}.norm3", width)

    def __call__(self, x: Tensor, memory: Optional[Tensor] = None, key_bias: Optional[np.ndarray] = None,
                 temperature: float = 1.0) -> tuple:
        x = self.norm1(nc.add(x, self.self_attention(x, x)[0]))
        weights = None
        if self.cross_attention is not None and memory is not None:
            attended, weights = self.cross_attention(x, memory, key_bias, temperature)
            x = self.norm2(nc.add(x, attended))
        x = self.norm3(nc.add(x, self.mlp(x)))
        return x, weights


# ---------------------------------------------------------------------------
# modality encoders and fusion
# ---------------------------------------------------------------------------

class ImageEncoder:
    def __init__(self, store: ParameterStore, config: ModelConfig):
        self.config = config
        d = config.d_model
        self.patch_embed = Linear(store, "image_encoder.patch_embed", config.patch_size ** 2, d)
        self.pos_embed = store.create("image_encoder.pos_embed", (config.n_patches, d), "normal")
        self.blocks = [
            EncoderBlock(store, f"image_encoder.blocks.{i}", d, config.n_heads, config.mlp_ratio)
            for i in range(config.n_encoder_layers)
        ]
        self.norm = LayerNorm(store, "image_encoder.norm", d)

    def patchify(self, images: Tensor) -> Tensor:
        """[B,1,H,W] -> [B,P,p*p] with patches in row-major grid order."""
        b = images.shape[0]
        g, p = self.config.grid_size, self.config.patch_size
        grid = nc.reshape(images, (b, g, p, g, p))
        return nc.reshape(nc.transpose(grid, (0, 1, 3, 2, 4)), (b, g * g, p * p))

    def __call__(self, images: Tensor) -> Tensor:
        x = nc.add(self.patch_embed(self.patchify(images)), self.pos_embed)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def block_prefixes(self, block: int) -> list:
        prefixes = [f"image_encoder.blocks.{block}."]
        if block == 0:
            prefixes += ["image_encoder.patch_embed.", "image_encoder.pos_embed"]
        if block == self.config.n_encoder_layers - 1:
            prefixes.append("image_encoder.norm.")
        return prefixes


class AudioEncoder:
    """Frozen random projection plus one encoder block; never receives updates."""

    def __init__(self, store: ParameterStore, config: ModelConfig):
        d = config.d_model
        self.projection = Linear(store, "audio_encoder.projection", config.n_audio_features, d, frozen=True)
        self.block = EncoderBlock(store, "audio_encoder.block", d, config.n_heads, config.mlp_ratio, frozen=True)

    def __call__(self, features: Tensor) -> Tensor:
        return self.block(self.projection(features))


class PhonoEncoder:
    def __init__(self, store: ParameterStore, config: ModelConfig):
        d = config.d_model
        self.hidden = Linear(store, "phono_encoder.hidden", config.n_phono_classes, d)
        self.output = Linear(store, "phono_encoder.output", d, d)

    def __call__(self, phono: Tensor) -> Tensor:
        b = phono.shape[0]
        return nc.reshape(self.output(nc.gelu(self.hidden(phono))), (b, 1, -1))


@dataclass
class MemoryTokens:
    tokens: Tensor
    provenance: tuple

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ShapeError(f"memory must hold at least one token, got shape {self.tokens.shape}")
        if len(self.provenance) != self.tokens.shape[0]:
            raise ShapeError("provenance length differs from token count")

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def real_mask(self) -> np.ndarray:
        return np.array([tag != PROVENANCE_NULL for tag in self.provenance])


class MemoryBuilder:
    """
    Projects present audio/phono tokens and substitutes one learned placeholder per
    dropped modality. Batched memory is padded to a common width; padded slots are
    reported invalid and masked out of cross-attention.
    """

    def __init__(self, store: ParameterStore, config: ModelConfig):
        self.projection = Linear(store, "memory.projection", config.d_model, config.d_model)
        self.null_tokens = store.create("memory.null_tokens", (2, config.d_model), "normal")

    def __call__(self, audio_tokens: Optional[Tensor], phono_tokens: Optional[Tensor],
                 drop_audio: np.ndarray, drop_phono: np.ndarray) -> tuple:
        b = len(drop_audio)
        audio_width = audio_tokens.shape[1] if audio_tokens is not None else 1
        width = audio_width + 1
        keep = np.zeros((b, width, 1))
        select = np.zeros((b, width, 2))
        valid = np.zeros((b, width), dtype=bool)
        provenance = []
        for i in range(b):
            tags = []
            if audio_tokens is not None and not drop_audio[i]:
                keep[i, :audio_width] = 1.0
                valid[i, :audio_width] = True
                tags += [PROVENANCE_AUDIO] * audio_width
            else:
                select[i, 0, 0] = 1.0
                valid[i, 0] = True
                tags.append(PROVENANCE_NULL)
            if phono_tokens is not None and not drop_phono[i]:
                keep[i, -1] = 1.0
                tags.append(PROVENANCE_PHONO)
            else:
                select[i, -1, 1] = 1.0
                tags.append(PROVENANCE_NULL)
            valid[i, -1] = True
            provenance.append(tuple(tags))

        placeholders = nc.matmul(Tensor(select), self.null_tokens)
        if audio_tokens is None and phono_tokens is None:
            return placeholders, valid, provenance
        d = self.null_tokens.shape[1]
        parts = [
            audio_tokens if audio_tokens is not None else Tensor(np.zeros((b, 1, d))),
            phono_tokens if phono_tokens is not None else Tensor(np.zeros((b, 1, d))),
        ]
        real = self.projection(nc.concat(parts, axis=1))
        return nc.add(nc.mul(real, Tensor(keep)), placeholders), valid, provenance

    def pooled_or_placeholder(self, pooled: Optional[Tensor], dropped: np.ndarray, slot: int) -> Tensor:
        """[B,D] pooled modality embedding with the placeholder row for dropped items."""
        b = len(dropped)
        select = np.zeros((b, 2))
        select[dropped, slot] = 1.0
        placeholder = nc.matmul(Tensor(select), self.null_tokens)
        if pooled is None:
            return placeholder
        keep = Tensor((~dropped).astype(float)[:, None])
        return nc.add(nc.mul(pooled, keep), placeholder)


class ProjectionHead:
    def __init__(self, store: ParameterStore, name: str, d_model: int, projection_dim: int):
        self.hidden = Linear(store, f"{name}.hidden", d_model, d_model)
        self.output = Linear(store, f"{name}.output", d_model, projection_dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.output(nc.gelu(self.hidden(x)))


class ContrastiveHeads:
    """Global heads embed mean-pooled tokens per modality; local heads embed single tokens."""

    def __init__(self, store: ParameterStore, config: ModelConfig, projection_dim: int):
        d = config.d_model
        mode = config.fusion_mode
        self.image = ProjectionHead(store, "contrastive.global_image", d, projection_dim)
        self.audio = ProjectionHead(store, "contrastive.global_audio", d, projection_dim) if mode.uses_audio else None
        self.phono = ProjectionHead(store, "contrastive.global_phono", d, projection_dim) if mode.uses_phono else None
        self.local_image = Linear(store, "contrastive.local_image", d, projection_dim)
        self.local_memory = Linear(store, "contrastive.local_memory", d, projection_dim)

    @staticmethod
    def embed(head, tokens: Tensor) -> Tensor:
        return nc.l2_normalize(head(nc.mean(tokens, axis=1)), axis=-1)

    def local(self, linear: Linear, tokens: Tensor) -> Tensor:
        return nc.l2_normalize(linear(tokens), axis=-1)


# ---------------------------------------------------------------------------
# forward outputs
# ---------------------------------------------------------------------------

@dataclass
class ForwardOutput:
    logits: Tensor
    image_tokens: Tensor
    audio_tokens: Optional[Tensor]
    phono_tokens: Optional[Tensor]
    decoded_tokens: Tensor
    memory: Optional[MemoryTokens]


def _item(x: Optional[Tensor], index: int) -> Optional[Tensor]:
    if x is None:
        return None
    return nc.reshape(nc.take(x, [index], axis=0), x.shape[1:])


@dataclass
class BatchOutput:
    logits: Tensor
    image_tokens: Tensor
    audio_tokens: Optional[Tensor]
    phono_tokens: Optional[Tensor]
    decoded: Tensor
    memory: Optional[Tensor]
    memory_valid: Optional[np.ndarray]
    memory_provenance: Optional[list]
    dropped_audio: np.ndarray
    dropped_phono: np.ndarray
    cross_attention: list = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0]

    def memory_tokens(self, index: int) -> Optional[MemoryTokens]:
        if self.memory is None:
            return None
        rows = np.flatnonzero(self.memory_valid[index])
        tokens = nc.take(_item(self.memory, index), rows, axis=0)
        return MemoryTokens(tokens, self.memory_provenance[index])

    def real_memory_mask(self) -> Optional[np.ndarray]:
        """[B,M] True where the padded memory slot holds a real (non-placeholder) token."""
        if self.memory is None:
            return None
        mask = np.zeros_like(self.memory_valid)
        for i, tags in enumerate(self.memory_provenance):
            rows = np.flatnonzero(self.memory_valid[i])
            mask[i, rows] = [tag != PROVENANCE_NULL for tag in tags]
        return mask

    def item(self, index: int) -> ForwardOutput:
        return ForwardOutput(
            logits=_item(self.logits, index),
            image_tokens=_item(self.image_tokens, index),
            audio_tokens=None if self.dropped_audio[index] else _item(self.audio_tokens, index),
            phono_tokens=None if self.dropped_phono[index] else _item(self.phono_tokens, index),
            decoded_tokens=_item(self.decoded, index),
            memory=self.memory_tokens(index),
        )

    def predictions(self) -> np.ndarray:
        """Argmax labels [B,H,W]; ties resolve to the lower class index."""
        return np.argmax(self.logits.data, axis=1).astype(np.uint8)


def _stack(arrays: Sequence, name: str, expected: tuple) -> np.ndarray:
    if any(a is None for a in arrays):
        raise ShapeError(f"{name} is required but missing for at least one sample")
    try:
        stacked = np.stack([np.asarray(a) for a in arrays])
    except ValueError as exc:
        raise ShapeError(f"inconsistent {name} shapes within the batch") from exc
    if stacked.shape[1:] != expected:
        raise ShapeError(f"{name} shape {stacked.shape[1:]} does not match the model's {expected}")
    return stacked


def _batched(x, rank: int) -> tuple:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == rank:
        return nc.reshape(x, (1,) + x.shape), True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"expected rank {rank} or {rank + 1}, got shape {x.shape}")


def _unbatched(x: Tensor, squeeze: bool) -> Tensor:
    return nc.reshape(x, x.shape[1:]) if squeeze else x


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class VocSegModel:
    def __init__(self, config: ModelConfig, seed: int = 0, projection_dim: int = 32):
        self.config = config
        self.seed = seed
        self.projection_dim = projection_dim
        self.store = ParameterStore(seed)
        mode = config.fusion_mode
        d = config.d_model

        self.image_encoder = ImageEncoder(self.store, config)
        self.audio_encoder = AudioEncoder(self.store, config) if mode.uses_audio else None
        self.phono_encoder = PhonoEncoder(self.store, config) if mode.uses_phono else None
        self.memory_builder = MemoryBuilder(self.store, config) if mode != FusionMode.IMAGE_ONLY else None
        n_fused = 1 + int(mode.uses_audio) + int(mode.uses_phono)
        self.concat_projection = None
        if mode.is_concat:
            # image rows pass through, modality rows start at zero
            self.concat_projection = Linear(self.store, "fusion.concat_projection", n_fused * d, d, init="zeros")
            self.concat_projection.weight.data[:d] = np.eye(d)
        self.decoder_blocks = [
            DecoderBlock(self.store, f"decoder.blocks.{i}", d, config.n_heads, config.mlp_ratio,
                         cross=mode == FusionMode.CROSS_ATTENTION)
            for i in range(config.n_decoder_layers)
        ]
        self.head = Linear(self.store, "head.projection", d, config.patch_size ** 2 * config.n_seg_classes)
        self.contrastive = ContrastiveHeads(self.store, config, projection_dim) if mode != FusionMode.IMAGE_ONLY else None

        logger.info(
            f"[INIT] VocSegModel mode={mode.value} params={self.store.count()} "
            f"frozen={len(self.store.permanently_frozen)} seed={seed}"
        )

    # -- single-stage entry points ------------------------------------------

    def encode_image(self, frames) -> Tensor:
        images, squeeze = _batched(frames, 3)
        s = self.config.image_size
        if images.shape[1:] != (1, s, s):
            raise ShapeError(f"image shape {images.shape[1:]} does not match (1, {s}, {s})")
        return _unbatched(self.image_encoder(images), squeeze)

    def encode_audio(self, features) -> Tensor:
        if self.audio_encoder is None:
            raise ValueError(f"mode {self.config.fusion_mode.value} has no audio encoder")
        x, squeeze = _batched(features, 2)
        if x.shape[-1] != self.config.n_audio_features:
            raise ShapeError(f"audio width {x.shape[-1]} does not match {self.config.n_audio_features}")
        return _unbatched(self.audio_encoder(x), squeeze)

    def encode_phono(self, phono) -> Tensor:
        if self.phono_encoder is None:
            raise ValueError(f"mode {self.config.fusion_mode.value} has no phonological encoder")
        x, squeeze = _batched(phono, 1)
        if x.shape[-1] != self.config.n_phono_classes:
            raise ShapeError(f"phono width {x.shape[-1]} does not match {self.config.n_phono_classes}")
        return _unbatched(self.phono_encoder(x), squeeze)

    def build_memory(self, audio_tokens: Optional[Tensor], phono_token: Optional[Tensor],
                     drop_audio: bool = False, drop_phono: bool = False) -> MemoryTokens:
        if self.memory_builder is None:
            raise ValueError("image-only models have no memory")
        audio = None if audio_tokens is None or drop_audio else _batched(audio_tokens, 2)[0]
        phono = None if phono_token is None or drop_phono else _batched(phono_token, 2)[0]
        memory, valid, provenance = self.memory_builder(
            audio, phono, np.array([audio is None]), np.array([phono is None])
        )
        rows = np.flatnonzero(valid[0])
        return MemoryTokens(nc.take(_item(memory, 0), rows, axis=0), provenance[0])

    def decode(self, image_tokens: Tensor, memory=None, key_bias: Optional[np.ndarray] = None,
               temperature: float = 1.0) -> tuple:
        """Returns (decoded tokens, cross-attention weights per layer)."""
        x, squeeze = _batched(image_tokens, 2)
        memory_tensor = memory.tokens if isinstance(memory, MemoryTokens) else memory
        if memory_tensor is not None:
            memory_tensor = _batched(memory_tensor, 2)[0]
            if memory_tensor.shape[-1] != x.shape[-1]:
                raise ShapeError("memory width differs from image token width")
        weights = []
        for block in self.decoder_blocks:
            x, w = block(x, memory_tensor, key_bias, temperature)
            if w is not None:
                weights.append(w)
        return _unbatched(x, squeeze), weights

    def segment(self, decoded: Tensor) -> Tensor:
        x, squeeze = _batched(decoded, 2)
        cfg = self.config
        b = x.shape[0]
        g, p, c = cfg.grid_size, cfg.patch_size, cfg.n_seg_classes
        if x.shape[1] != cfg.n_patches:
            raise ShapeError(f"expected {cfg.n_patches} tokens, got {x.shape[1]}")
        patches = nc.reshape(self.head(x), (b, g, g, c, p, p))
        logits = nc.reshape(nc.transpose(patches, (0, 3, 1, 4, 2, 5)), (b, c, g * p, g * p))
        return _unbatched(logits, squeeze)

    # -- full forward ---------------------------------------------------------

    def forward_batch(self, samples: Sequence, train_flag: bool = False, rng: Optional[np.random.Generator] = None,
                      missing: frozenset = frozenset(), dropout_p: Optional[float] = None) -> BatchOutput:
        if not samples:
            raise ShapeError("forward needs a nonempty batch")
        cfg = self.config
        mode = cfg.fusion_mode
        b = len(samples)
        images = _stack([s.image for s in samples], "image", (1, cfg.image_size, cfg.image_size))

        drop_audio = np.full(b, not mode.uses_audio)
        drop_phono = np.full(b, not mode.uses_phono)
        if mode != FusionMode.IMAGE_ONLY and train_flag:
            p = cfg.modality_dropout_p if dropout_p is None else dropout_p
            rng = rng if rng is not None else np.random.default_rng(0)
            drop_audio |= rng.random(b) < p
            drop_phono |= rng.random(b) < p
        if "audio" in missing:
            drop_audio[:] = True
        if "phono" in missing:
            drop_phono[:] = True

        image_tokens = self.image_encoder(Tensor(images))
        audio_tokens = None
        if mode.uses_audio and not drop_audio.all():
            audio = _stack([s.audio_features for s in samples], "audio_features",
                           (cfg.n_audio_frames, cfg.n_audio_features))
            audio_tokens = self.audio_encoder(Tensor(audio))
        phono_tokens = None
        if mode.uses_phono and not drop_phono.all():
            phono = _stack([s.phono for s in samples], "phono", (cfg.n_phono_classes,))
            phono_tokens = self.phono_encoder(Tensor(phono))

        memory = valid = provenance = None
        if self.memory_builder is not None:
            memory, valid, provenance = self.memory_builder(audio_tokens, phono_tokens, drop_audio, drop_phono)

        cross_weights = []
        if mode == FusionMode.CROSS_ATTENTION:
            key_bias = np.where(valid, 0.0, MASKED_LOGIT)
            decoded, cross_weights = self.decode(image_tokens, memory, key_bias)
        elif mode.is_concat:
            decoded, _ = self.decode(self._concat_fuse(image_tokens, audio_tokens, phono_tokens, drop_audio, drop_phono))
        else:
            decoded, _ = self.decode(image_tokens)

        return BatchOutput(
            logits=self.segment(decoded),
            image_tokens=image_tokens,
            audio_tokens=audio_tokens,
            phono_tokens=phono_tokens,
            decoded=decoded,
            memory=memory,
            memory_valid=valid,
            memory_provenance=provenance,
            dropped_audio=drop_audio,
            dropped_phono=drop_phono,
            cross_attention=cross_weights,
        )

    def _concat_fuse(self, image_tokens, audio_tokens, phono_tokens, drop_audio, drop_phono) -> Tensor:
        b, n_patches, d = image_tokens.shape
        parts = [image_tokens]
        for uses, tokens, dropped, slot in (
            (self.config.fusion_mode.uses_audio, audio_tokens, drop_audio, 0),
            (self.config.fusion_mode.uses_phono, phono_tokens, drop_phono, 1),
        ):
            if not uses:
                continue
            pooled = nc.mean(tokens, axis=1) if tokens is not None else None
            pooled = self.memory_builder.pooled_or_placeholder(pooled, dropped, slot)
            parts.append(nc.broadcast_to(nc.reshape(pooled, (b, 1, d)), (b, n_patches, d)))
        return self.concat_projection(nc.concat(parts, axis=-1))

    def forward(self, samples: Sequence, train_flag: bool = False, rng: Optional[np.random.Generator] = None,
                missing: frozenset = frozenset()) -> list:
        output = self.forward_batch(samples, train_flag=train_flag, rng=rng, missing=missing)
        return [output.item(i) for i in range(output.batch_size)]

    def predict(self, samples: Sequence, missing: frozenset = frozenset()) -> np.ndarray:
        return self.forward_batch(samples, missing=missing).predictions()

    # -- progressive unfreezing ---------------------------------------------

    def freeze_image_encoder(self) -> None:
        self.store.set_trainable("image_encoder.", False)

    def unfreeze_image_block(self, block: int) -> list:
        if not 0 <= block < self.config.n_encoder_layers:
            raise ValueError(f"image encoder has no block {block}")
        changed = []
        for prefix in self.image_encoder.block_prefixes(block):
            changed += self.store.set_trainable(prefix, True)
        return changed

    def trainable_image_blocks(self) -> list:
        return [
            i for i in range(self.config.n_encoder_layers)
            if self.store.params[f"image_encoder.blocks.{i}.norm1.gain"].requires_grad
        ]

    # -- checkpoints ----------------------------------------------------------

    def save_checkpoint(self, path: str) -> str:
        """Write ``<stem>.json`` (manifest) and ``<stem>.vstn`` (tensors); returns the manifest path."""
        stem = os.path.splitext(path)[0]
        names = list(self.store.params)
        offsets = write_tensors(stem + ".vstn", [self.store.params[n].data for n in names])
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "version": 1,
            "config": self.config.model_dump(mode="json"),
            "seed": self.seed,
            "projection_dim": self.projection_dim,
            "tensor_file": os.path.basename(stem + ".vstn"),
            "parameters": [
                {
                    "name": n,
                    "shape": list(self.store.params[n].shape),
                    "frozen": n in self.store.permanently_frozen,
                    "trainable": self.store.params[n].requires_grad,
                    "offset": offset,
                }
                for n, offset in zip(names, offsets)
            ],
        }
        with open(stem + ".json", "w") as handle:
            json.dump(manifest, handle, indent=2, sort_keys=True)
        return stem + ".json"

    @classmethod
    def load_checkpoint(cls, path: str) -> "VocSegModel":
        stem = os.path.splitext(path)[0]
        with open(stem + ".json") as handle:
            manifest = json.load(handle)
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a VocSeg checkpoint")
        model = cls(ModelConfig.model_validate(manifest["config"]), manifest["seed"], manifest["projection_dim"])
        tensor_path = os.path.join(os.path.dirname(stem + ".json"), manifest["tensor_file"])
        with open(tensor_path, "rb") as handle:
            buffer = handle.read()
        for entry in manifest["parameters"]:
            param = model.store.params.get(entry["name"])
            if param is None or list(param.shape) != entry["shape"]:
                raise ShapeError(f"checkpoint parameter {entry['name']} does not fit the model")
            param.data[...] = read_tensor_at(buffer, entry["offset"])
            if entry["name"] not in model.store.permanently_frozen:
                param.set_requires_grad(entry["trainable"])
        logger.info(f"[OK] Loaded checkpoint {os.path.basename(stem)} ({len(manifest['parameters'])} tensors)")
        return model
