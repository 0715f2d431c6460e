import numpy as np
import pytest
import torch

from contrareg.data import AugmentationConfig
from contrareg.encoder import (
    EncoderConfig,
    Representation,
    StepRecord,
    TrainConfig,
    build_encoder,
    forward_image,
    infer_representation,
    load_checkpoint,
    save_checkpoint,
    train,
    visualize,
    write_history_csv,
)
from contrareg.fixtures import two_modality_pair
from contrareg.data import MultimodalSample
from contrareg.image import Image


TINY = EncoderConfig(
    in_channels=1,
    out_channels=1,
    first_conv_filters=8,
    num_blocks=2,
    block_depth=2,
    bottleneck_layers=2,
    growth_rate=4,
)


def param_hash(model):
    return tuple(float(p.detach().sum()) for p in model.parameters())


class TestBuildEncoder:
    def test_same_seed_identical_parameters(self):
        m1 = build_encoder(TINY, seed=11)
        m2 = build_encoder(TINY, seed=11)
        for p1, p2 in zip(m1.parameters(), m2.parameters()):
            assert torch.equal(p1, p2)

    def test_different_seed_differs(self):
        assert param_hash(build_encoder(TINY, 1)) != param_hash(build_encoder(TINY, 2))

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            EncoderConfig(compression=0.0)
        with pytest.raises(ValueError):
            EncoderConfig(compression=1.5)
        with pytest.raises(ValueError):
            EncoderConfig(pooling="stochastic")

    def test_layer_list_inventory(self):
        model = build_encoder(TINY, 0)
        names = model.layer_list()
        assert any("DenseBlock" in n for n in names)
        assert any("TransitionDown" in n for n in names)


class TestForward:
    def test_output_shape_matches_input(self):
        model = build_encoder(TINY, 0)
        img = Image(np.random.default_rng(0).random((1, 32, 32), dtype=np.float64).astype(np.float32))
        rep = forward_image(model, img)
        assert rep.values.shape == (1, 32, 32)

    def test_multi_channel_output(self):
        cfg = EncoderConfig(**{**TINY.__dict__, "out_channels": 3})
        model = build_encoder(cfg, 0)
        img = Image(np.zeros((1, 16, 16), dtype=np.float32) + 0.5)
        assert forward_image(model, img).values.shape == (3, 16, 16)

    def test_eval_mode_deterministic(self):
        model = build_encoder(TINY, 3)
        img = Image(np.random.default_rng(1).random((1, 32, 32)).astype(np.float32))
        r1 = forward_image(model, img)
        r2 = forward_image(model, img)
        assert np.array_equal(r1.values, r2.values)

    def test_non_multiple_size_padded_and_cropped(self):
        model = build_encoder(TINY, 0)
        img = Image(np.random.default_rng(2).random((1, 21, 19)).astype(np.float32))
        rep = forward_image(model, img)
        assert rep.values.shape == (1, 21, 19)

    def test_too_small_input_rejected(self):
        model = build_encoder(TINY, 0)
        with pytest.raises(ValueError, match="smaller"):
            forward_image(model, Image(np.zeros((1, 2, 2), dtype=np.float32) + 0.1))

    def test_tiled_inference_consistent_on_interior(self):
        # fully convolutional: aligned tiles agree with whole-image inference
        # away from tile borders (receptive-field interior)
        cfg = EncoderConfig(
            in_channels=1,
            out_channels=1,
            first_conv_filters=4,
            num_blocks=1,
            block_depth=1,
            bottleneck_layers=1,
            growth_rate=4,
        )
        model = build_encoder(cfg, 5)
        rng = np.random.default_rng(3)
        img = Image(rng.random((1, 64, 64)).astype(np.float32))
        whole = forward_image(model, img).values
        tile = forward_image(model, Image(img.pixels[:, :32, :32])).values
        margin = 12  # larger than the receptive-field radius of this config
        np.testing.assert_allclose(
            whole[:, : 32 - margin, : 32 - margin], tile[:, :-margin, :-margin], atol=1e-4
        )


def synthetic_samples(size=128, seed=0):
    a, b = two_modality_pair(size, seed)
    return [MultimodalSample(images=[a, b], sample_id="fixture")]


FAST_TRAIN = TrainConfig(
    optimizer="adam",
    learning_rate=1e-3,
    weight_decay=0.0,
    batch_size=2,
    steps_per_epoch=2,
    epochs=1,
    temperature=0.5,
    critic="mse",
    group="trivial",
    patch_size=(32, 32),
    seed=0,
)


class TestTrainLoop:
    def test_zero_epochs_returns_initialization(self):
        samples = synthetic_samples()
        cfg = TrainConfig(**{**FAST_TRAIN.__dict__, "epochs": 0})
        result = train(samples, {"a": TINY, "b": TINY}, cfg, AugmentationConfig.none())
        assert result.history == []
        ref = build_encoder(TINY, cfg.seed)
        for p1, p2 in zip(result.models["a"].parameters(), ref.parameters()):
            assert torch.equal(p1, p2)

    def test_loss_history_finite_and_clipped(self):
        samples = synthetic_samples()
        result = train(samples, {"a": TINY, "b": TINY}, FAST_TRAIN, AugmentationConfig.none())
        assert len(result.history) == 2
        for rec in result.history:
            assert np.isfinite(rec.loss)
            assert rec.grad_norm <= FAST_TRAIN.grad_clip + 1e-6

    def test_same_seed_reproducible(self):
        samples = synthetic_samples()
        r1 = train(samples, {"a": TINY, "b": TINY}, FAST_TRAIN, AugmentationConfig.none())
        r2 = train(samples, {"a": TINY, "b": TINY}, FAST_TRAIN, AugmentationConfig.none())
        assert [rec.loss for rec in r1.history] == [rec.loss for rec in r2.history]
        for p1, p2 in zip(r1.models["a"].parameters(), r2.models["a"].parameters()):
            assert torch.equal(p1, p2)

    def test_missing_modality_config_rejected(self):
        samples = synthetic_samples()
        with pytest.raises(ValueError, match="b"):
            train(samples, {"a": TINY}, FAST_TRAIN, AugmentationConfig.none())

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train([], {"a": TINY}, FAST_TRAIN, AugmentationConfig.none())

    def test_history_csv(self, tmp_path):
        write_history_csv([StepRecord(0, 1.5, 0.3)], tmp_path / "h.csv")
        text = (tmp_path / "h.csv").read_text()
        assert "step,loss,grad_norm" in text and "1.5" in text


class TestCheckpoint:
    def test_round_trip_bit_exact_forward(self, tmp_path):
        samples = synthetic_samples()
        result = train(samples, {"a": TINY, "b": TINY}, FAST_TRAIN, AugmentationConfig.none())
        path = tmp_path / "ckpt.pt"
        save_checkpoint(result, path)
        ckpt = load_checkpoint(path)
        img = Image(np.random.default_rng(5).random((1, 32, 32)).astype(np.float32), modality="a")
        before = forward_image(result.models["a"], img).values
        after = infer_representation(ckpt, img).values
        assert np.array_equal(before, after)

    def test_modality_mismatch_rejected(self, tmp_path):
        samples = synthetic_samples()
        result = train(samples, {"a": TINY, "b": TINY}, FAST_TRAIN, AugmentationConfig.none())
        path = tmp_path / "ckpt.pt"
        save_checkpoint(result, path)
        ckpt = load_checkpoint(path)
        img = Image(np.zeros((1, 32, 32), dtype=np.float32) + 0.3, modality="zz")
        with pytest.raises(ValueError, match="zz"):
            infer_representation(ckpt, img)

    def test_checkpoint_records_configs_and_layers(self, tmp_path):
        samples = synthetic_samples()
        result = train(samples, {"a": TINY, "b": TINY}, FAST_TRAIN, AugmentationConfig.none())
        save_checkpoint(result, tmp_path / "c.pt")
        ckpt = load_checkpoint(tmp_path / "c.pt")
        assert ckpt.modalities == ["a", "b"]
        assert ckpt.train_config.seed == FAST_TRAIN.seed
        assert len(ckpt.layer_lists["a"]) > 5
        assert len(ckpt.history) == 2


class TestVisualize:
    def test_zero_representation_logistic_midpoint(self):
        rep = Representation(np.zeros((1, 4, 4), dtype=np.float32))
        out = visualize(rep, mode="logistic", temperature=0.5)
        # sigma(0) = 0.5 -> 127.5 -> round-half-to-even -> 128
        assert np.all(out.pixels == 128)

    def test_saturation(self):
        rep = Representation(np.full((1, 3, 3), 1e6, dtype=np.float32))
        assert np.all(visualize(rep).pixels == 255)
        rep = Representation(np.full((1, 3, 3), -1e6, dtype=np.float32))
        assert np.all(visualize(rep).pixels == 0)

    def test_monotone_in_input(self):
        vals = np.linspace(-4, 4, 33, dtype=np.float32).reshape(1, 33, 1)
        out = visualize(Representation(vals), mode="logistic", temperature=0.5)
        flat = out.pixels.ravel().astype(int)
        assert np.all(np.diff(flat) >= 0)
        assert flat.min() >= 0 and flat.max() <= 255

    def test_joint_percentile_uses_partner_envelope(self):
        rng = np.random.default_rng(0)
        a = Representation(rng.normal(0, 1, (1, 32, 32)).astype(np.float32))
        b = Representation(rng.normal(0, 1, (1, 32, 32)).astype(np.float32))
        out = visualize(a, mode="joint_percentile", partner=b)
        assert out.pixels.min() >= 0 and out.pixels.max() <= 255

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            visualize(Representation(np.zeros((1, 2, 2), dtype=np.float32)), mode="gamma")
