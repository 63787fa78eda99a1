import hashlib
import os
from dataclasses import replace

import numpy as np
import pytest

from conftest import TINY_SETTINGS
from synth_data import (
    PHONO_CHANNELS,
    TONGUE_FRONT_PX,
    TONGUE_HEIGHT_PX,
    AugmentParams,
    SpeakerParams,
    SynthSettings,
    UnknownSpeakerError,
    apply_augmentation,
    audio_signal_report,
    class_pixel_frequencies,
    generate_frame,
    load_dataset,
    loso_folds,
    phono_vector,
    preprocess,
    region_centroid,
    split_loso,
    write_dataset,
)


def _digest(directory):
    digest = hashlib.sha256()
    for name in sorted(os.listdir(directory)):
        with open(os.path.join(directory, name), "rb") as handle:
            digest.update(name.encode())
            digest.update(handle.read())
    return digest.hexdigest()


class TestGeneration:
    def test_frame_layout(self):
        sample = generate_frame(SpeakerParams.from_seed(0, 17), 5, 17)
        assert sample.image.shape == (1, 84, 84)
        assert sample.image.dtype == np.float32
        assert 0.0 <= sample.image.min() and sample.image.max() <= 1.0
        assert sample.mask.spacing_mm == 2.4
        assert sample.audio_features.shape == (4, 16)
        assert sample.phono.shape == (12,)
        assert set(np.unique(sample.mask.values)) <= {0, 1, 2, 3, 4}

    def test_every_articulator_is_drawn(self):
        sample = generate_frame(SpeakerParams.from_seed(1, 17), 0, 17)
        assert set(np.unique(sample.mask.values)) == {0, 1, 2, 3, 4}

    def test_deterministic(self):
        sp = SpeakerParams.from_seed(2, 17)
        a, b = generate_frame(sp, 7, 17), generate_frame(sp, 7, 17)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask.values, b.mask.values)
        assert np.array_equal(a.audio_features, b.audio_features)

    def test_speakers_differ(self):
        a = generate_frame(SpeakerParams.from_seed(0, 17), 3, 17)
        b = generate_frame(SpeakerParams.from_seed(1, 17), 3, 17)
        assert not np.array_equal(a.mask.values, b.mask.values)

    def test_negative_frame_rejected(self):
        with pytest.raises(ValueError):
            generate_frame(SpeakerParams.from_seed(0, 17), -1, 17)

    def test_phono_one_active_class_per_channel(self):
        phono = phono_vector(np.array([1.0, -1.0, 0.0, 0.2, 0.999, 0.0]), 12)
        assert phono.sum() == 4.0


class TestAugmentation:
    def test_identity_parameters_leave_sample_unchanged(self):
        sample = generate_frame(SpeakerParams.from_seed(0, 17), 0, 17)
        out = apply_augmentation(sample, AugmentParams())
        assert np.array_equal(out.image, sample.image)
        assert np.array_equal(out.mask.values, sample.mask.values)

    def test_mask_keeps_label_set(self, rng):
        sample = generate_frame(SpeakerParams.from_seed(0, 17), 0, 17)
        out = apply_augmentation(sample, AugmentParams.sample(rng), augment_index=1)
        assert out.augmented
        assert set(np.unique(out.mask.values)) <= set(np.unique(sample.mask.values))
        assert np.array_equal(out.audio_features, sample.audio_features)


class TestPreprocess:
    def test_native_size_keeps_spacing(self):
        sample = generate_frame(SpeakerParams.from_seed(0, 17), 0, 17)
        assert preprocess(sample, 84).mask.spacing_mm == pytest.approx(2.4)

    def test_upsampling_scales_spacing(self):
        sample = generate_frame(SpeakerParams.from_seed(0, 17), 0, 17)
        out = preprocess(sample, 224)
        assert out.image.shape == (1, 224, 224)
        assert out.mask.spacing_mm == pytest.approx(0.9)

    def test_constant_image_normalizes_to_zero(self):
        sample = generate_frame(SpeakerParams.from_seed(0, 17), 0, 17)
        flat = preprocess(replace(sample, image=np.full((1, 84, 84), 0.4, np.float32)), 84)
        assert not flat.image.any()

    def test_dataset_normalization_per_speaker(self, tiny_samples):
        for speaker in (0, 1, 2):
            images = np.stack([s.image for s in tiny_samples if s.speaker_id == speaker])
            assert images.min() == pytest.approx(0.0)
            assert images.max() == pytest.approx(1.0)


class TestDatasetFiles:
    def test_counts(self, tiny_dataset):
        assert len(tiny_dataset) == TINY_SETTINGS.total_samples == 3 * 8 * 2
        assert tiny_dataset.manifest.speaker_ids == [0, 1, 2]
        assert tiny_dataset.manifest.n_phono_classes == 12

    def test_reproducible_bytes(self, tmp_path, tiny_dataset_dir):
        write_dataset(str(tmp_path), TINY_SETTINGS)
        assert _digest(str(tmp_path)) == _digest(tiny_dataset_dir)

    def test_parallel_generation_matches(self, tmp_path):
        settings = SynthSettings(n_speakers=2, frames_per_speaker=3, augmentations=1, seed=4)
        write_dataset(str(tmp_path / "serial"), settings)
        write_dataset(str(tmp_path / "parallel"), settings, n_jobs=2)
        assert _digest(str(tmp_path / "serial")) == _digest(str(tmp_path / "parallel"))

    def test_loaded_samples_match_generator(self, tiny_dataset):
        original = generate_frame(SpeakerParams.from_seed(1, 17), 4, 17, TINY_SETTINGS)
        loaded = next(s for s in tiny_dataset.by_speaker(1, originals_only=True) if s.frame_index == 4)
        assert np.array_equal(loaded.image, original.image)
        assert np.array_equal(loaded.mask.values, original.mask.values)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(str(tmp_path))

    def test_unknown_speaker(self, tiny_dataset):
        with pytest.raises(UnknownSpeakerError):
            tiny_dataset.by_speaker(9)


class TestSplits:
    def test_folds_cover_every_speaker_once(self, tiny_dataset):
        assert loso_folds(tiny_dataset.samples) == [0, 1, 2]

    def test_too_few_speakers(self, tiny_dataset):
        two = [s for s in tiny_dataset.samples if s.speaker_id < 2]
        with pytest.raises(ValueError):
            loso_folds(two)

    def test_split_is_disjoint(self, tiny_dataset):
        for held_out in loso_folds(tiny_dataset.samples):
            split = split_loso(tiny_dataset.samples, held_out)
            assert {s.speaker_id for s in split.test} == {held_out}
            assert held_out not in {s.speaker_id for s in split.train + split.validation}
            assert not any(s.augmented for s in split.test + split.validation)
            train_frames = {(s.speaker_id, s.frame_index) for s in split.train}
            val_frames = {(s.speaker_id, s.frame_index) for s in split.validation}
            assert not train_frames & val_frames
            assert len(split.test) == 8

    def test_validation_takes_the_last_frames(self, tiny_dataset):
        split = split_loso(tiny_dataset.samples, 0, validation_fraction=0.25)
        assert sorted({s.frame_index for s in split.validation}) == [6, 7]

    def test_unknown_held_out(self, tiny_dataset):
        with pytest.raises(UnknownSpeakerError):
            split_loso(tiny_dataset.samples, 5)


class TestStatistics:
    def test_class_frequencies_sum_to_one(self, tiny_dataset):
        frequencies = class_pixel_frequencies(tiny_dataset.samples)
        assert frequencies.shape == (5,)
        assert frequencies.sum() == pytest.approx(1.0)
        assert frequencies[0] > frequencies[1:].max()

    def test_audio_signal_is_informative(self, tiny_dataset):
        report = audio_signal_report(tiny_dataset.samples)
        assert report.n_samples == 24
        assert np.isfinite(report.mae_real_px) and np.isfinite(report.mae_shuffled_px)

    def test_audio_signal_needs_samples(self, tiny_dataset):
        with pytest.raises(ValueError):
            audio_signal_report(tiny_dataset.samples[:6])


class TestAnatomy:
    @pytest.fixture(scope="class")
    def hundred_frames(self):
        return [generate_frame(SpeakerParams.from_seed(speaker, 17), t, 17)
                for speaker in range(5) for t in range(20)]

    def test_tongue_outweighs_velum_outweighs_each_lip(self, hundred_frames):
        frequencies = class_pixel_frequencies(hundred_frames)
        tongue, velum, upper_lip, lower_lip = frequencies[1:]
        assert tongue > velum > max(upper_lip, lower_lip)
        for speaker in range(5):
            own = class_pixel_frequencies([s for s in hundred_frames if s.speaker_id == speaker])
            assert own[1] > own[2] > max(own[3], own[4])

    def test_same_phono_vector_means_nearby_articulators(self):
        sp = SpeakerParams.from_seed(1, 17)
        groups = {}
        for t in range(300):
            sample = generate_frame(sp, t, 17)
            groups.setdefault(tuple(sample.phono), []).append(sample.mask)
        bin_width = 2.0 / len(np.array_split(np.arange(12), len(PHONO_CHANNELS))[0])
        tolerance = 1.0
        # (class, axis, pixels per unit of latent state)
        spans = [(1, 0, TONGUE_HEIGHT_PX), (1, 1, TONGUE_FRONT_PX), (2, 0, 2.0), (3, 0, 1.5), (4, 0, 2.5)]
        assert any(len(masks) > 1 for masks in groups.values())
        for masks in groups.values():
            for class_id, axis, px_per_unit in spans:
                coords = [region_centroid(m, class_id)[axis] for m in masks]
                assert max(coords) - min(coords) <= px_per_unit * bin_width + tolerance
