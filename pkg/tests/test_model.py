import numpy as np
import pytest
from scipy.spatial.distance import pdist

import numcore as nc
from conftest import tiny_model_config
from numcore import ShapeError, Tensor
from objectives import total_loss
from seg_metrics import LabelMask
from synth_data import MultimodalSample
from vocseg_config import ContrastiveConfig, FusionMode, LossWeights
from vocseg_model import PROVENANCE_AUDIO, PROVENANCE_NULL, PROVENANCE_PHONO, ParameterStore, VocSegModel


def _sample(rng, size=16, n_classes=5, speaker=0, frame=0):
    return MultimodalSample(
        image=rng.random((1, size, size)).astype(np.float32),
        mask=LabelMask(rng.integers(0, n_classes, size=(size, size)), 2.4),
        audio_features=rng.normal(size=(4, 16)).astype(np.float32),
        phono=(rng.random(12) < 0.3).astype(np.float32),
        speaker_id=speaker,
        frame_index=frame,
    )


@pytest.fixture
def batch(rng):
    return [_sample(rng, frame=i) for i in range(3)]


class TestParameterStore:
    def test_permanently_frozen_never_unfreezes(self):
        store = ParameterStore(0)
        store.create("audio.w", (2, 2), frozen=True)
        store.create("image.w", (2, 2))
        assert store.set_trainable("", True) == []
        assert set(store.trainable()) == {"image.w"}

    def test_snapshot_restore(self):
        store = ParameterStore(0)
        param = store.create("w", (3,), "normal")
        saved = store.snapshot()
        before = store.fingerprint()
        param.data += 1.0
        assert store.fingerprint() != before
        store.restore(saved)
        assert store.fingerprint() == before

    def test_duplicate_name_rejected(self):
        store = ParameterStore(0)
        store.create("w", (2,))
        with pytest.raises(ValueError):
            store.create("w", (2,))

    def test_same_seed_same_parameters(self, tiny_config):
        assert VocSegModel(tiny_config, seed=3).store.fingerprint() == VocSegModel(tiny_config, seed=3).store.fingerprint()
        assert VocSegModel(tiny_config, seed=3).store.fingerprint() != VocSegModel(tiny_config, seed=4).store.fingerprint()


class TestEncoders:
    def test_image_tokens_shape(self):
        model = VocSegModel(tiny_model_config(image_size=64, patch_size=8))
        tokens = model.encode_image(np.zeros((1, 64, 64)))
        assert tokens.shape == (64, 16)

    def test_identical_frames_identical_tokens(self, tiny_config, rng):
        model = VocSegModel(tiny_config)
        frame = rng.random((1, 16, 16))
        tokens = model.encode_image(np.stack([frame, frame]))
        assert np.allclose(tokens.data[0], tokens.data[1])

    def test_image_shape_mismatch(self, tiny_config):
        with pytest.raises(ShapeError):
            VocSegModel(tiny_config).encode_image(np.zeros((1, 20, 20)))

    def test_audio_tokens_one_per_frame(self, tiny_config, rng):
        tokens = VocSegModel(tiny_config).encode_audio(rng.normal(size=(4, 16)))
        assert tokens.shape == (4, 16)

    def test_zero_phono_gives_bias_path_token(self, tiny_config):
        model = VocSegModel(tiny_config)
        a = model.encode_phono(np.zeros(12))
        b = model.encode_phono(np.zeros(12))
        assert a.shape == (1, 16)
        assert np.array_equal(a.data, b.data)

    def test_distinct_one_hots_give_distinct_tokens(self, tiny_config):
        model = VocSegModel(tiny_config)
        e = np.eye(12)
        assert not np.allclose(model.encode_phono(e[0]).data, model.encode_phono(e[5]).data)

    def test_image_only_has_no_audio_encoder(self):
        model = VocSegModel(tiny_model_config(FusionMode.IMAGE_ONLY))
        assert model.contrastive is None
        with pytest.raises(ValueError):
            model.encode_audio(np.zeros((4, 16)))


class TestMemory:
    def test_full_memory(self, tiny_config, rng):
        model = VocSegModel(tiny_config)
        memory = model.build_memory(model.encode_audio(rng.normal(size=(4, 16))), model.encode_phono(np.ones(12)))
        assert memory.n_tokens == 5
        assert memory.provenance == (PROVENANCE_AUDIO,) * 4 + (PROVENANCE_PHONO,)

    def test_both_dropped_gives_two_placeholders(self, tiny_config):
        model = VocSegModel(tiny_config)
        memory = model.build_memory(None, None)
        assert memory.n_tokens == 2
        assert memory.provenance == (PROVENANCE_NULL, PROVENANCE_NULL)
        assert not memory.real_mask.any()

    def test_single_token_memory_attends_with_weight_one(self, tiny_config, rng):
        model = VocSegModel(tiny_config)
        tokens = model.encode_image(rng.random((1, 16, 16)))
        single = Tensor(rng.normal(size=(1, 16)))
        _, weights = model.decode(tokens, single)
        assert np.allclose(weights[0], 1.0)


class TestForward:
    def test_logits_shape(self, tiny_config, batch):
        output = VocSegModel(tiny_config).forward_batch(batch)
        assert output.logits.shape == (3, 5, 16, 16)
        assert output.predictions().dtype == np.uint8

    def test_head_geometry_at_64(self, rng):
        model = VocSegModel(tiny_model_config(image_size=64, patch_size=8))
        logits = model.segment(model.encode_image(rng.random((1, 64, 64))))
        assert logits.shape == (5, 64, 64)

    def test_constant_tokens_give_patch_constant_logits(self, tiny_config):
        model = VocSegModel(tiny_config)
        logits = model.segment(Tensor(np.ones((16, 16)))).data
        assert np.allclose(logits[:, 0:4, 0:4], logits[:, 4:8, 8:12])

    def test_identical_samples_identical_logits(self, tiny_config, rng):
        sample = _sample(rng)
        output = VocSegModel(tiny_config).forward_batch([sample, sample])
        assert np.allclose(output.logits.data[0], output.logits.data[1])

    def test_cross_attention_rows_sum_to_one(self, tiny_config, batch):
        output = VocSegModel(tiny_config).forward_batch(batch)
        for weights in output.cross_attention:
            assert np.allclose(weights.sum(axis=-1), 1.0, atol=1e-5)

    @pytest.mark.parametrize("mode", list(FusionMode))
    def test_every_mode_runs_video_only(self, mode, rng):
        model = VocSegModel(tiny_model_config(mode))
        samples = [_sample(rng).without({"audio", "phono"}) for _ in range(2)]
        predictions = model.predict(samples, missing=frozenset({"audio", "phono"}))
        assert predictions.shape == (2, 16, 16)
        assert predictions.max() < 5

    def test_missing_audio_without_flag_is_an_error(self, tiny_config, rng):
        with pytest.raises(ShapeError):
            VocSegModel(tiny_config).forward_batch([_sample(rng).without({"audio"})])

    def test_dropout_one_drops_everything_in_training(self, tiny_config, batch, rng):
        output = VocSegModel(tiny_config).forward_batch(batch, train_flag=True, rng=rng, dropout_p=1.0)
        assert output.dropped_audio.all() and output.dropped_phono.all()
        assert output.audio_tokens is None
        assert not output.real_memory_mask().any()

    def test_no_dropout_at_inference(self, tiny_config, batch):
        output = VocSegModel(tiny_config).forward_batch(batch, dropout_p=1.0)
        assert not output.dropped_audio.any()

    def test_item_view(self, tiny_config, batch):
        item = VocSegModel(tiny_config).forward(batch)[1]
        assert item.logits.shape == (5, 16, 16)
        assert item.memory.n_tokens == 5

    def test_empty_batch(self, tiny_config):
        with pytest.raises(ShapeError):
            VocSegModel(tiny_config).forward_batch([])


class TestUnfreezing:
    def test_freeze_then_unfreeze_top_block(self, tiny_config):
        model = VocSegModel(tiny_config)
        model.freeze_image_encoder()
        assert model.trainable_image_blocks() == []
        changed = model.unfreeze_image_block(1)
        assert changed
        assert "image_encoder.norm.gain" in changed
        assert model.trainable_image_blocks() == [1]

    def test_audio_encoder_stays_frozen(self, tiny_config):
        model = VocSegModel(tiny_config)
        assert not any(name.startswith("audio_encoder.") for name in model.store.trainable())

    def test_unknown_block(self, tiny_config):
        with pytest.raises(ValueError):
            VocSegModel(tiny_config).unfreeze_image_block(7)

    def test_frozen_parameters_get_no_gradient(self, tiny_config, batch):
        model = VocSegModel(tiny_config)
        model.freeze_image_encoder()
        model.store.zero_grad()
        with nc.Tape() as tape:
            loss = total_loss(model.forward_batch(batch), [s.mask for s in batch],
                              LossWeights(w_contrastive=0.0), ContrastiveConfig())
        nc.backward(tape, loss.total)
        image_grads = [p.grad for n, p in model.store.params.items() if n.startswith("image_encoder.")]
        assert all(g is None or not g.any() for g in image_grads)
        assert model.store.params["head.projection.weight"].grad.any()


class TestCheckpoint:
    def test_round_trip_preserves_predictions(self, tiny_config, batch, tmp_path):
        model = VocSegModel(tiny_config, seed=9)
        model.freeze_image_encoder()
        model.unfreeze_image_block(1)
        manifest = model.save_checkpoint(str(tmp_path / "model.json"))
        assert (tmp_path / "model.vstn").exists()
        loaded = VocSegModel.load_checkpoint(manifest)
        assert loaded.store.fingerprint() == model.store.fingerprint()
        assert loaded.trainable_image_blocks() == [1]
        assert np.array_equal(loaded.predict(batch), model.predict(batch))

    def test_foreign_checkpoint_format_rejected(self, tiny_config, tmp_path):
        path = str(tmp_path / "model.json")
        VocSegModel(tiny_config).save_checkpoint(path)
        with open(path) as handle:
            text = handle.read()
        with open(path, "w") as handle:
            handle.write(text.replace('"format": "vocseg-checkpoint"', '"format": "other"'))
        with pytest.raises(ValueError):
            VocSegModel.load_checkpoint(path)


def _shuffle_patches(image: np.ndarray, order: np.ndarray, patch: int) -> np.ndarray:
    g = image.shape[-1] // patch
    blocks = image.reshape(g, patch, g, patch).transpose(0, 2, 1, 3).reshape(g * g, patch, patch)
    return blocks[order].reshape(g, g, patch, patch).transpose(0, 2, 1, 3).reshape(1, g * patch, g * patch)


class TestEncoderGeometry:
    def test_positional_embedding_makes_tokens_position_aware(self, float64, tiny_config, rng):
        model = VocSegModel(tiny_config, seed=2)
        image = rng.random((1, 16, 16))
        order = rng.permutation(tiny_config.n_patches)
        tokens = model.encode_image(image).data
        shuffled = model.encode_image(_shuffle_patches(image, order, tiny_config.patch_size)).data
        assert not np.allclose(shuffled, tokens[order], atol=1e-6)

    def test_without_positional_embedding_tokens_follow_their_patches(self, float64, tiny_config, rng):
        model = VocSegModel(tiny_config, seed=2)
        model.image_encoder.pos_embed.data[...] = 0.0
        image = rng.random((1, 16, 16))
        order = rng.permutation(tiny_config.n_patches)
        tokens = model.encode_image(image).data
        shuffled = model.encode_image(_shuffle_patches(image, order, tiny_config.patch_size)).data
        assert np.allclose(shuffled, tokens[order], atol=1e-9)

    def test_distinct_audio_gives_distinct_tokens(self, float64, tiny_config, rng):
        model = VocSegModel(tiny_config)
        tokens = model.encode_audio(rng.normal(size=(100, 4, 16))).data
        flat = tokens.reshape(100, -1)
        assert pdist(flat).min() > 1e-6


class TestFusionStart:
    def test_untrained_cross_attention_ignores_memory(self, tiny_config, rng):
        model = VocSegModel(tiny_config, seed=3)
        base = _sample(rng)
        other = MultimodalSample(base.image, base.mask, rng.normal(size=(4, 16)).astype(np.float32),
                                 np.ones(12, dtype=np.float32), 1, 1)
        output = model.forward_batch([base, other])
        assert np.allclose(output.logits.data[0], output.logits.data[1], atol=1e-6)
        video = model.forward_batch([base], missing=frozenset({"audio", "phono"}))
        assert np.allclose(video.logits.data[0], output.logits.data[0], atol=1e-6)

    def test_untrained_concat_passes_image_tokens_through(self, rng):
        model = VocSegModel(tiny_model_config(FusionMode.CONCAT_VAP), seed=3)
        d = model.config.d_model
        weight = model.concat_projection.weight.data
        assert np.array_equal(weight[:d], np.eye(d))
        assert not weight[d:].any()
        base = _sample(rng)
        other = MultimodalSample(base.image, base.mask, rng.normal(size=(4, 16)).astype(np.float32),
                                 np.zeros(12, dtype=np.float32), 1, 1)
        logits = model.forward_batch([base, other]).logits.data
        assert np.allclose(logits[0], logits[1], atol=1e-6)

    def test_fusion_parameters_receive_gradient_from_the_start(self, tiny_config, batch):
        model = VocSegModel(tiny_config)
        model.store.zero_grad()
        with nc.Tape() as tape:
            loss = total_loss(model.forward_batch(batch), [s.mask for s in batch],
                              LossWeights(w_contrastive=0.0), ContrastiveConfig())
        nc.backward(tape, loss.total)
        assert model.store.params["decoder.blocks.0.cross_attention.output.weight"].grad.any()
