"""
Synthetic real-time-MRI-like multimodal data.

Each speaker gets a seeded anatomy and a set of smooth articulator trajectories. A 6-d latent
articulator state drives everything that is generated per frame:

  image/mask  midsagittal rendering of tongue, velum and lips (84x84, 2.4 mm pixels)
  audio       band-energy-like feature frames sampled around the frame timestamp
  phono       multi-hot quantization of four articulatory channels

so the non-image modalities genuinely carry information about the articulator positions.
Also holds augmentation, preprocessing to model resolution, leave-one-speaker-out splits and
the on-disk dataset format (manifest.json plus one VSTN blob per speaker).
"""

import json
import logging
import math
import os
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional, Sequence, Union

import cv2
import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, model_validator
from skimage.draw import ellipse
from skimage.filters import gaussian
from sklearn.linear_model import Ridge
from sklearn.metrics import mean_absolute_error
from sklearn.model_selection import LeaveOneGroupOut, cross_val_predict
from tqdm import tqdm

import numcore as nc
from seg_metrics import LabelMask
from tensor_io import decode_tensor, encode_tensor, ensure_directory
from vocseg_config import RAW_IMAGE_SIZE, RAW_SPACING_MM, SEG_CLASS_NAMES

logger = logging.getLogger(__name__)

FRAME_RATE_HZ = 83.28
LATENT_DIM = 6
# latent channels
TONGUE_FRONT, TONGUE_HEIGHT, TONGUE_SIZE, VELUM, LIP_APERTURE, LIP_PROTRUSION = range(LATENT_DIM)
PHONO_CHANNELS = (TONGUE_FRONT, TONGUE_HEIGHT, VELUM, LIP_APERTURE)
TONGUE_FRONT_PX = 6.0
TONGUE_HEIGHT_PX = 5.0
MANIFEST_NAME = "manifest.json"
DATASET_VERSION = 1

SeedLike = Union[int, Sequence[int]]


class UnknownSpeakerError(KeyError):
    pass


class SynthSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_speakers: int = Field(5, ge=1)
    frames_per_speaker: int = Field(100, ge=1)
    augmentations: int = Field(2, ge=0)
    seed: int = 17
    n_audio_frames: int = Field(4, ge=1)
    n_audio_features: int = Field(16, ge=1)
    n_phono_classes: int = Field(12, ge=len(PHONO_CHANNELS))
    audio_noise: float = Field(0.05, ge=0.0)
    image_noise: float = Field(0.03, ge=0.0)

    @property
    def total_samples(self) -> int:
        return self.n_speakers * self.frames_per_speaker * (1 + self.augmentations)


@dataclass(frozen=True)
class SpeakerParams:
    speaker_id: int
    global_seed: int
    tongue_center: tuple
    tongue_radii: tuple
    velum_center: tuple
    velum_radii: tuple
    upper_lip_center: tuple
    lower_lip_center: tuple
    lip_radii: tuple
    tissue_intensity: float
    tongue_intensity: float
    velum_intensity: float
    lip_contrast: float
    motion_freqs: tuple
    motion_phases: tuple
    motion_amps: tuple
    audio_gain: tuple

    @property
    def anatomy_seed(self) -> tuple:
        return (self.global_seed, self.speaker_id)

    @classmethod
    def from_seed(cls, speaker_id: int, global_seed: int, n_audio_features: int = 16) -> "SpeakerParams":
        rng = np.random.default_rng([global_seed, speaker_id])
        jitter = lambda scale: float(rng.uniform(-scale, scale))  # noqa: E731
        return cls(
            speaker_id=speaker_id,
            global_seed=global_seed,
            tongue_center=(48.0 + jitter(2.0), 44.0 + jitter(2.0)),
            tongue_radii=(10.5 + jitter(0.8), 15.5 + jitter(1.0)),
            velum_center=(24.0 + jitter(1.0), 62.0 + jitter(1.5)),
            velum_radii=(7.5 + jitter(0.5), 3.0 + jitter(0.2)),
            upper_lip_center=(34.0 + jitter(1.0), 16.0 + jitter(1.0)),
            lower_lip_center=(47.0 + jitter(1.0), 17.0 + jitter(1.0)),
            lip_radii=(4.8 + jitter(0.3), 1.7 + jitter(0.1)),
            tissue_intensity=0.35 + jitter(0.04),
            tongue_intensity=0.75 + jitter(0.05),
            velum_intensity=0.62 + jitter(0.04),
            lip_contrast=0.14 + jitter(0.02),
            motion_freqs=tuple(map(tuple, rng.uniform(1.0, 4.0, size=(LATENT_DIM, 2)))),
            motion_phases=tuple(map(tuple, rng.uniform(0.0, 2 * math.pi, size=(LATENT_DIM, 2)))),
            motion_amps=tuple(map(tuple, rng.uniform(0.4, 1.0, size=(LATENT_DIM, 2)))),
            audio_gain=tuple(rng.uniform(0.8, 1.2, size=n_audio_features)),
        )


@dataclass(eq=False)
class MultimodalSample:
    image: np.ndarray
    mask: LabelMask
    audio_features: Optional[np.ndarray]
    phono: Optional[np.ndarray]
    speaker_id: int
    frame_index: int
    augment_index: int = 0

    @property
    def augmented(self) -> bool:
        return self.augment_index > 0

    def without(self, modalities) -> "MultimodalSample":
        return replace(
            self,
            audio_features=None if "audio" in modalities else self.audio_features,
            phono=None if "phono" in modalities else self.phono,
        )


def latent_state(sp: SpeakerParams, t: float) -> np.ndarray:
    """Articulator state in [-1, 1]^6 at (fractional) frame index ``t``."""
    seconds = t / FRAME_RATE_HZ
    freqs = np.asarray(sp.motion_freqs)
    phases = np.asarray(sp.motion_phases)
    amps = np.asarray(sp.motion_amps)
    waves = amps * np.sin(2 * math.pi * freqs * seconds + phases)
    return waves.sum(axis=1) / amps.sum(axis=1)


@lru_cache(maxsize=8)
def _audio_mixing(global_seed: int, n_features: int) -> tuple:
    rng = np.random.default_rng([global_seed, 7919])
    return (
        rng.normal(0.0, 0.8, size=(n_features, LATENT_DIM)),
        rng.normal(0.0, 0.2, size=n_features),
        rng.normal(0.0, 0.8, size=(n_features, LATENT_DIM)),
        rng.uniform(0.0, 2 * math.pi, size=n_features),
    )


def _fill(canvas, labels, center, radii, rotation, value, label=None):
    rr, cc = ellipse(center[0], center[1], radii[0], radii[1], shape=canvas.shape, rotation=rotation)
    canvas[rr, cc] = value
    if label is not None:
        labels[rr, cc] = label


def render_articulators(sp: SpeakerParams, state: np.ndarray, rng: np.random.Generator,
                        image_noise: float = 0.03) -> tuple:
    """Returns (image [84,84] float32 in [0,1], mask [84,84] uint8)."""
    size = RAW_IMAGE_SIZE
    canvas = np.full((size, size), 0.02)
    labels = np.zeros((size, size), dtype=np.uint8)

    # 1. head tissue and oral cavity
    _fill(canvas, labels, (42.0, 46.0), (38.0, 36.0), 0.0, sp.tissue_intensity)
    _fill(canvas, labels, (40.0, 42.0), (15.0, 26.0), 0.0, 0.08)

    # 2. tongue
    cy, cx = sp.tongue_center
    tongue_center = (cy - TONGUE_HEIGHT_PX * state[TONGUE_HEIGHT], cx + TONGUE_FRONT_PX * state[TONGUE_FRONT])
    tongue_radii = (sp.tongue_radii[0] + 1.5 * state[TONGUE_SIZE], sp.tongue_radii[1])
    _fill(canvas, labels, tongue_center, tongue_radii, 0.1 * state[TONGUE_FRONT], sp.tongue_intensity, 1)

    # 3. velum
    vy, vx = sp.velum_center
    _fill(canvas, labels, (vy + 2.0 * state[VELUM], vx), sp.velum_radii, 0.6 + 0.35 * state[VELUM],
          sp.velum_intensity, 2)

    # 4. lips, low contrast against surrounding tissue
    lip_value = sp.tissue_intensity + sp.lip_contrast
    protrusion = -1.5 * state[LIP_PROTRUSION]
    uy, ux = sp.upper_lip_center
    ly, lx = sp.lower_lip_center
    _fill(canvas, labels, (uy - 1.5 * state[LIP_APERTURE], ux + protrusion), sp.lip_radii, 0.3, lip_value, 3)
    _fill(canvas, labels, (ly + 2.5 * state[LIP_APERTURE], lx + protrusion), sp.lip_radii, -0.3, lip_value, 4)

    image = gaussian(canvas, sigma=0.7, preserve_range=True)
    image = np.clip(image + rng.normal(0.0, image_noise, size=image.shape), 0.0, 1.0)
    return image.astype(np.float32), labels


def phono_vector(state: np.ndarray, n_classes: int) -> np.ndarray:
    """Multi-hot vector: one active class per quantized articulatory channel."""
    phono = np.zeros(n_classes, dtype=np.float32)
    for channel, group in zip(PHONO_CHANNELS, np.array_split(np.arange(n_classes), len(PHONO_CHANNELS))):
        level = min(int(math.floor((state[channel] + 1.0) / 2.0 * len(group))), len(group) - 1)
        phono[group[max(level, 0)]] = 1.0
    return phono


def audio_offsets(n_frames: int) -> np.ndarray:
    """Sub-frame offsets of the audio window centred on the frame timestamp."""
    return (np.arange(n_frames) - (n_frames - 1) / 2.0) / n_frames


def audio_features(sp: SpeakerParams, t: int, rng: np.random.Generator, settings: SynthSettings) -> np.ndarray:
    mix, bias, harmonic_mix, harmonic_phase = _audio_mixing(sp.global_seed, settings.n_audio_features)
    gain = np.asarray(sp.audio_gain)
    frames = []
    for offset in audio_offsets(settings.n_audio_frames):
        state = latent_state(sp, t + offset)
        energy = np.tanh(mix @ state + bias)
        harmonics = 0.2 * np.sin(math.pi * (harmonic_mix @ state) + harmonic_phase)
        frames.append(gain * energy + harmonics + rng.normal(0.0, settings.audio_noise, settings.n_audio_features))
    return np.asarray(frames, dtype=np.float32)


def generate_frame(sp: SpeakerParams, t: int, seed: int, settings: Optional[SynthSettings] = None) -> MultimodalSample:
    if t < 0:
        raise ValueError(f"frame index must be nonnegative, got {t}")
    settings = settings or SynthSettings(seed=seed)
    rng = np.random.default_rng([seed, sp.speaker_id, t])
    state = latent_state(sp, t)
    image, labels = render_articulators(sp, state, rng, settings.image_noise)
    return MultimodalSample(
        image=image[None],
        mask=LabelMask(labels, RAW_SPACING_MM),
        audio_features=audio_features(sp, t, rng, settings),
        phono=phono_vector(state, settings.n_phono_classes),
        speaker_id=sp.speaker_id,
        frame_index=t,
    )


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    angle_deg: float = 0.0
    shift_x: float = 0.0
    shift_y: float = 0.0
    scale: float = 1.0
    brightness: float = 0.0
    contrast: float = 1.0
    gamma: float = 1.0

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "AugmentParams":
        log_range = (math.log(0.8), math.log(1.25))
        return cls(
            angle_deg=float(rng.uniform(-10.0, 10.0)),
            shift_x=float(rng.uniform(-4.0, 4.0)),
            shift_y=float(rng.uniform(-4.0, 4.0)),
            scale=float(rng.uniform(0.9, 1.1)),
            brightness=float(rng.uniform(-0.1, 0.1)),
            contrast=float(math.exp(rng.uniform(*log_range))),
            gamma=float(math.exp(rng.uniform(*log_range))),
        )

    @property
    def geometric_identity(self) -> bool:
        return self.angle_deg == 0.0 and self.shift_x == 0.0 and self.shift_y == 0.0 and self.scale == 1.0

    @property
    def intensity_identity(self) -> bool:
        return self.brightness == 0.0 and self.contrast == 1.0 and self.gamma == 1.0


def apply_augmentation(sample: MultimodalSample, params: AugmentParams,
                       augment_index: Optional[int] = None) -> MultimodalSample:
    """Joint geometric transform of image (bilinear) and mask (nearest); intensity on the image only."""
    image = sample.image[0]
    labels = sample.mask.values
    if not params.geometric_identity:
        h, w = image.shape
        matrix = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), params.angle_deg, params.scale)
        matrix[0, 2] += params.shift_x
        matrix[1, 2] += params.shift_y
        image = cv2.warpAffine(image, matrix, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
        labels = cv2.warpAffine(labels, matrix, (w, h), flags=cv2.INTER_NEAREST,
                                borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    if not params.intensity_identity:
        image = np.clip((image - 0.5) * params.contrast + 0.5 + params.brightness, 0.0, 1.0) ** params.gamma
    return replace(
        sample,
        image=np.asarray(image, dtype=np.float32)[None],
        mask=LabelMask(labels, sample.mask.spacing_mm),
        augment_index=sample.augment_index if augment_index is None else augment_index,
    )


def augment(sample: MultimodalSample, seed: SeedLike, augment_index: int = 1) -> MultimodalSample:
    return apply_augmentation(sample, AugmentParams.sample(np.random.default_rng(seed)), augment_index)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def _resize(sample: MultimodalSample, image_size: int) -> tuple:
    height, width = sample.mask.values.shape
    resized = nc.bilinear_resize(nc.Tensor(sample.image, dtype=np.float64), image_size, image_size).data
    rows = nc.nearest_index(height, image_size)
    cols = nc.nearest_index(width, image_size)
    labels = sample.mask.values[np.ix_(rows, cols)]
    return resized, LabelMask(labels, sample.mask.spacing_mm * width / image_size)


def _normalize(image: np.ndarray, intensity_range: tuple) -> np.ndarray:
    low, high = intensity_range
    if high <= low:
        return np.zeros_like(image, dtype=np.float32)
    return np.clip((image - low) / (high - low), 0.0, 1.0).astype(np.float32)


def preprocess(sample: MultimodalSample, image_size: int, intensity_range: Optional[tuple] = None) -> MultimodalSample:
    """Resize to model resolution and min-max normalize (the sample's own range by default)."""
    resized, mask = _resize(sample, image_size)
    if intensity_range is None:
        intensity_range = (float(resized.min()), float(resized.max()))
    return replace(sample, image=_normalize(resized, intensity_range), mask=mask)


def preprocess_dataset(samples: Sequence[MultimodalSample], image_size: int) -> list:
    """Resize every sample, then min-max normalize each speaker's recordings by their joint range."""
    resized = [_resize(s, image_size) for s in samples]
    ranges = {}
    for sample, (image, _) in zip(samples, resized):
        low, high = ranges.get(sample.speaker_id, (math.inf, -math.inf))
        ranges[sample.speaker_id] = (min(low, float(image.min())), max(high, float(image.max())))
    return [
        replace(sample, image=_normalize(image, ranges[sample.speaker_id]), mask=mask)
        for sample, (image, mask) in zip(samples, resized)
    ]


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass
class LosoSplit:
    held_out: int
    train: list
    validation: list
    test: list


def loso_folds(samples: Sequence[MultimodalSample]) -> list:
    """Held-out speaker id per leave-one-speaker-out fold, in speaker order."""
    originals = [s for s in samples if not s.augmented]
    groups = np.array([s.speaker_id for s in originals])
    if len(np.unique(groups)) < 3:
        raise ValueError(f"leave-one-speaker-out needs at least 3 speakers, found {len(np.unique(groups))}")
    splitter = LeaveOneGroupOut()
    held_out = [int(groups[test_idx[0]]) for _, test_idx in splitter.split(np.zeros(len(groups)), groups=groups)]
    return held_out


def split_loso(samples: Sequence[MultimodalSample], held_out: int, validation_fraction: float = 0.15) -> LosoSplit:
    speakers = sorted({s.speaker_id for s in samples})
    if held_out not in speakers:
        raise UnknownSpeakerError(held_out)
    if len(speakers) < 3:
        raise ValueError(f"leave-one-speaker-out needs at least 3 speakers, found {len(speakers)}")
    frames = {}
    for s in samples:
        frames.setdefault(s.speaker_id, set()).add(s.frame_index)
    cutoff = {}
    for speaker, indices in frames.items():
        ordered = sorted(indices)
        n_val = max(1, int(round(validation_fraction * len(ordered))))
        cutoff[speaker] = ordered[-n_val]

    split = LosoSplit(held_out=held_out, train=[], validation=[], test=[])
    for s in samples:
        if s.speaker_id == held_out:
            if not s.augmented:
                split.test.append(s)
        elif s.frame_index >= cutoff[s.speaker_id]:
            if not s.augmented:
                split.validation.append(s)
        else:
            split.train.append(s)
    logger.info(
        f"[STATS] Fold speaker={held_out}: train={len(split.train)} "
        f"validation={len(split.validation)} test={len(split.test)}"
    )
    return split


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

class RecordEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    frame_index: int
    augment_index: int
    offset: int


class SpeakerEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    speaker_id: int
    frames: int
    blob: str
    records: list[RecordEntry]


class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: int = DATASET_VERSION
    global_seed: int
    augmentations: int
    image_size: int = RAW_IMAGE_SIZE
    spacing_mm: float = RAW_SPACING_MM
    n_audio_frames: int
    n_audio_features: int
    n_phono_classes: int
    class_names: list[str] = Field(default_factory=lambda: list(SEG_CLASS_NAMES))
    speakers: list[SpeakerEntry]

    @model_validator(mode="after")
    def _check_counts(self):
        for entry in self.speakers:
            if len(entry.records) != entry.frames * (1 + self.augmentations):
                raise ValueError(f"speaker {entry.speaker_id}: record count does not match frames x (1 + augmentations)")
        return self

    @property
    def total_samples(self) -> int:
        return sum(len(entry.records) for entry in self.speakers)

    @property
    def speaker_ids(self) -> list:
        return [entry.speaker_id for entry in self.speakers]


@dataclass
class SynthDataset:
    manifest: DatasetManifest
    samples: list

    def __len__(self) -> int:
        return len(self.samples)

    def speakers(self) -> list:
        return sorted({s.speaker_id for s in self.samples})

    def by_speaker(self, speaker_id: int, originals_only: bool = False) -> list:
        if speaker_id not in self.manifest.speaker_ids:
            raise UnknownSpeakerError(speaker_id)
        return [s for s in self.samples if s.speaker_id == speaker_id and not (originals_only and s.augmented)]


def generate_speaker(speaker_id: int, settings: SynthSettings) -> list:
    """Originals interleaved with their augmented copies: (t, 0), (t, 1), ..."""
    sp = SpeakerParams.from_seed(speaker_id, settings.seed, settings.n_audio_features)
    samples = []
    for t in range(settings.frames_per_speaker):
        original = generate_frame(sp, t, settings.seed, settings)
        samples.append(original)
        for a in range(1, settings.augmentations + 1):
            samples.append(augment(original, [settings.seed, speaker_id, t, a], augment_index=a))
    return samples


def _encode_speaker(samples: list) -> tuple:
    chunks = []
    records = []
    position = 0
    for s in samples:
        records.append(RecordEntry(frame_index=s.frame_index, augment_index=s.augment_index, offset=position))
        for array in (s.image, s.mask.values, s.audio_features, s.phono):
            blob = encode_tensor(array)
            chunks.append(blob)
            position += len(blob)
    return b"".join(chunks), records


def write_dataset(out_dir: str, settings: SynthSettings, n_jobs: int = 1) -> DatasetManifest:
    ensure_directory(out_dir)
    speaker_ids = list(range(settings.n_speakers))
    generated = Parallel(n_jobs=n_jobs)(
        delayed(generate_speaker)(speaker_id, settings)
        for speaker_id in tqdm(speaker_ids, desc="speakers", disable=len(speaker_ids) < 2)
    )
    entries = []
    for speaker_id, samples in zip(speaker_ids, generated):
        blob_name = f"speaker_{speaker_id:02d}.bin"
        payload, records = _encode_speaker(samples)
        with open(os.path.join(out_dir, blob_name), "wb") as handle:
            handle.write(payload)
        entries.append(SpeakerEntry(speaker_id=speaker_id, frames=settings.frames_per_speaker,
                                    blob=blob_name, records=records))
    manifest = DatasetManifest(
        global_seed=settings.seed,
        augmentations=settings.augmentations,
        n_audio_frames=settings.n_audio_frames,
        n_audio_features=settings.n_audio_features,
        n_phono_classes=settings.n_phono_classes,
        speakers=entries,
    )
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as handle:
        json.dump(manifest.model_dump(mode="json"), handle, indent=2, sort_keys=True)
    logger.info(f"[OK] Wrote {manifest.total_samples} samples for {len(entries)} speakers to {out_dir}")
    return manifest


def load_dataset(path: str) -> SynthDataset:
    manifest_path = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"No dataset manifest at {manifest_path}")
    with open(manifest_path) as handle:
        manifest = DatasetManifest.model_validate(json.load(handle))
    samples = []
    for entry in manifest.speakers:
        with open(os.path.join(path, entry.blob), "rb") as handle:
            buffer = handle.read()
        for record in entry.records:
            image, offset = decode_tensor(buffer, record.offset)
            labels, offset = decode_tensor(buffer, offset)
            audio, offset = decode_tensor(buffer, offset)
            phono, _ = decode_tensor(buffer, offset)
            samples.append(MultimodalSample(
                image=image,
                mask=LabelMask(labels, manifest.spacing_mm),
                audio_features=audio,
                phono=phono,
                speaker_id=entry.speaker_id,
                frame_index=record.frame_index,
                augment_index=record.augment_index,
            ))
    logger.info(f"[OK] Loaded {len(samples)} samples ({len(manifest.speakers)} speakers) from {path}")
    return SynthDataset(manifest, samples)


# ---------------------------------------------------------------------------
# sanity statistics
# ---------------------------------------------------------------------------

def class_pixel_frequencies(samples: Sequence[MultimodalSample], n_classes: int = len(SEG_CLASS_NAMES)) -> np.ndarray:
    counts = np.zeros(n_classes, dtype=np.int64)
    for s in samples:
        counts += np.bincount(s.mask.values.ravel(), minlength=n_classes)[:n_classes]
    return counts / max(int(counts.sum()), 1)


def region_centroid(mask: LabelMask, class_id: int) -> Optional[np.ndarray]:
    pixels = np.argwhere(mask.values == class_id)
    return pixels.mean(axis=0) if len(pixels) else None


@dataclass
class AudioSignalReport:
    n_samples: int
    mae_real_px: float
    mae_shuffled_px: float

    @property
    def informative(self) -> bool:
        return self.mae_real_px < 0.75 * self.mae_shuffled_px


def audio_signal_report(samples: Sequence[MultimodalSample], seed: int = 0) -> AudioSignalReport:
    """Ridge regression from audio features to tongue centroid, against the same fit on shuffled audio."""
    usable = [(s, region_centroid(s.mask, 1)) for s in samples if not s.augmented and s.audio_features is not None]
    usable = [(s, c) for s, c in usable if c is not None]
    if len(usable) < 10:
        raise ValueError("audio signal check needs at least 10 original samples with a tongue region")
    features = np.stack([s.audio_features.ravel() for s, _ in usable])
    targets = np.stack([c for _, c in usable])
    shuffled = features[np.random.default_rng(seed).permutation(len(features))]
    regressor = Ridge(alpha=1.0)
    real = cross_val_predict(regressor, features, targets, cv=5)
    null = cross_val_predict(regressor, shuffled, targets, cv=5)
    report = AudioSignalReport(len(usable), float(mean_absolute_error(targets, real)), float(mean_absolute_error(targets, null)))
    logger.info(
        f"[STATS] Audio->tongue regression on {report.n_samples} frames: MAE real={report.mae_real_px:.2f}px "
        f"shuffled={report.mae_shuffled_px:.2f}px"
    )
    return report
