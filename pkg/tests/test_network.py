import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from app.services.model.network import (
    AgainVC,
    ModelConfig,
    StyleStats,
    build_model,
    convert,
    encode_style,
    parameter_count,
    plan_windows,
    style_distance,
    style_proximity,
)
from app.services.model.ops import ActivationSpec, ShapeError, channel_stats


def _mel(frames: int, seed: int = 0, n_mels: int = 80) -> np.ndarray:
    return np.random.default_rng(seed).normal(-4.0, 2.0, size=(n_mels, frames)).astype(np.float32)


class TestModelConfig:
    def test_defaults(self):
        config = ModelConfig()
        assert config.channels == [256] * 4
        assert config.activation == ActivationSpec(kind="sigmoid", alpha=0.1)
        assert config.variant == "single_encoder"

    @pytest.mark.parametrize(
        "changes",
        [
            {"n_blocks": 0, "channels": []},
            {"channels": [256, 256, 0, 256]},
            {"channels": [256, 256]},
            {"epsilon": 0.0},
            {"epsilon": 1e-2},
            {"kernel_size": 4},
        ],
    )
    def test_rejects_invalid(self, changes):
        with pytest.raises(ValueError):
            ModelConfig().updated(**changes)


class TestEncodeDecode:
    def test_shapes(self, tiny_model, tiny_config):
        x = torch.from_numpy(np.stack([_mel(128, s) for s in range(3)]))
        content, style = tiny_model.encode(x)
        assert content.values.shape == (3, tiny_config.bottleneck_channels, 128)
        assert len(style) == tiny_config.n_blocks
        assert style.widths == tiny_config.channels
        assert tiny_model.decode(content, style).shape == x.shape

    def test_sigma_positive(self, tiny_model):
        _, style = tiny_model.encode(torch.from_numpy(_mel(128)[None]))
        assert all(bool((sigma > 0).all()) for _, sigma in style.layers)

    def test_sigmoid_content_in_unit_interval(self, tiny_model):
        content, _ = tiny_model.encode(torch.from_numpy(_mel(128)[None]))
        assert bool((content.values > 0).all()) and bool((content.values < 1).all())

    @settings(max_examples=60, deadline=None)
    @given(
        st.sampled_from(["sigmoid:2", "sigmoid:1", "sigmoid:0.1", "sigmoid:0.01", "tanh", "relu"]),
        st.integers(0, 2**16),
        st.floats(0.1, 50.0),
        st.floats(-1e3, 1e3, allow_nan=False),
        st.integers(0, 127),
    )
    def test_content_range_holds_for_any_weights(self, activation, seed, weight_scale, spike, spike_at):
        config = ModelConfig(
            n_blocks=2, channels=[16, 16], bottleneck_channels=4, kernel_size=1,
            activation=ActivationSpec.parse(activation), seed=seed,
        )
        model = AgainVC(config)
        with torch.no_grad():
            for p in model.parameters():
                p.mul_(weight_scale)
        x = torch.full((1, 80, 128), -4.0)
        x[..., spike_at] = spike
        values = model.encode(x)[0].values
        assert bool(torch.isfinite(values).all())
        if config.activation.kind == "sigmoid":
            assert bool((values > 0).all()) and bool((values < 1).all())
        elif config.activation.kind == "tanh":
            assert bool((values > -1).all()) and bool((values < 1).all())
        else:
            assert bool((values >= 0).all())

    @pytest.mark.parametrize("activation", ["tanh", "sigmoid:2"])
    def test_saturated_content_stays_open(self, pointwise_config, activation):
        model = AgainVC(pointwise_config.updated(activation=ActivationSpec.parse(activation)))
        x = torch.full((1, 80, 128), -4.0)
        x[..., 0] = 20.0
        values = model.encode(x)[0].values
        assert float(values.abs().max()) < 1.0
        if activation.startswith("sigmoid"):
            assert float(values.min()) > 0.0

    def test_wrong_mel_count(self, tiny_model):
        with pytest.raises(ShapeError):
            tiny_model.encode(torch.zeros(1, 40, 128))

    def test_style_from_other_model_rejected(self, tiny_model, tiny_config):
        other = AgainVC(tiny_config.updated(channels=[16, 16]))
        content, _ = tiny_model.encode(torch.from_numpy(_mel(128)[None]))
        _, style = other.encode(torch.from_numpy(_mel(128)[None]))
        with pytest.raises(ShapeError):
            tiny_model.decode(content, style)

    def test_content_width_checked(self, tiny_model):
        _, style = tiny_model.encode(torch.from_numpy(_mel(128)[None]))
        with pytest.raises(ShapeError):
            tiny_model.decode(torch.zeros(1, 7, 128), style)

    def test_style_permutation_invariant(self, pointwise_config):
        model = AgainVC(pointwise_config)
        x = torch.from_numpy(_mel(64)[None]).double()
        model = model.double()
        shuffled = x[..., torch.randperm(64, generator=torch.Generator().manual_seed(0))]
        content_a, style_a = model.encode(x)
        content_b, style_b = model.encode(shuffled)
        torch.testing.assert_close(style_a.flatten(), style_b.flatten(), rtol=0, atol=1e-10)
        assert not torch.allclose(content_a.values, content_b.values)

    @pytest.mark.parametrize(
        "changes",
        [
            {},
            {"kernel_size": 1},
            {"n_blocks": 3, "channels": [8, 24, 16], "bottleneck_channels": 2},
            {"activation": ActivationSpec(kind="none"), "bottleneck_channels": 1},
        ],
    )
    def test_adain_injects_style_stats(self, tiny_config, changes):
        model = AgainVC(tiny_config.updated(**changes)).double()
        captured = []
        hooks = [
            norm.register_forward_hook(lambda module, inputs, output: captured.append((output, inputs[1], inputs[2])))
            for norm in model.decoder.adains
        ]
        source = torch.from_numpy(_mel(128, 1)[None]).double()
        target = torch.from_numpy(_mel(128, 2)[None] * 1.5 + 1.0).double()
        with torch.no_grad():
            content, _ = model.encode(source)
            _, style = model.encode(target)
            model.decode(content, style)
        for hook in hooks:
            hook.remove()

        assert len(captured) == len(model.decoder.adains)
        eps = model.config.epsilon
        for output, mu, sigma in captured:
            out_mu, out_sigma = channel_stats(output, eps)
            torch.testing.assert_close(out_mu, mu, rtol=0, atol=1e-5)
            torch.testing.assert_close(torch.sqrt(out_sigma ** 2 - eps), sigma, rtol=1e-5, atol=1e-5)

    def test_first_decoder_stage_carries_target_style(self, tiny_model):
        captured = []
        hook = tiny_model.decoder.adains[0].register_forward_hook(lambda module, inputs, output: captured.append(output))
        target = _mel(200, 7) * 1.5 + 1.0
        convert(tiny_model, _mel(128, 6), target)
        hook.remove()
        mu, sigma = encode_style(tiny_model, target).layers[-1]
        out_mu, out_sigma = channel_stats(captured[0].double(), tiny_model.config.epsilon)
        torch.testing.assert_close(out_mu, mu.double(), rtol=0, atol=1e-5)
        torch.testing.assert_close(torch.sqrt(out_sigma ** 2 - 1e-5), sigma.double(), rtol=1e-5, atol=1e-5)


class TestVariants:
    def test_default_parameter_ratio(self):
        single = parameter_count(build_model(ModelConfig()))
        dual = parameter_count(build_model(ModelConfig(variant="dual_encoder")))
        assert dual > single
        assert 1.2 <= dual / single <= 1.6

    @pytest.mark.parametrize("use_default", [True, False])
    def test_dual_adds_one_style_encoder(self, tiny_config, use_default):
        config = ModelConfig() if use_default else tiny_config
        single = build_model(config)
        dual = build_model(config.updated(variant="dual_encoder"))
        style_encoder = parameter_count(dual.style_encoder)
        assert parameter_count(dual) == parameter_count(single) + style_encoder
        assert style_encoder == parameter_count(single.encoder) - parameter_count(single.encoder.content_head)

    @pytest.mark.parametrize("variant", ["single_encoder", "dual_encoder"])
    def test_wider_channels_grow_count(self, tiny_config, variant):
        config = tiny_config.updated(variant=variant)
        doubled = config.updated(channels=[2 * width for width in config.channels])
        assert parameter_count(build_model(doubled)) > parameter_count(build_model(config))

    def test_dual_has_separate_style_encoder(self, tiny_config):
        model = AgainVC(tiny_config.updated(variant="dual_encoder"))
        assert model.style_encoder is not None
        assert model.style_encoder.content_head is None
        style_ids = {id(p) for p in model.style_parameters()}
        assert style_ids.isdisjoint(id(p) for p in model.content_parameters())

    def test_single_style_parameters_skip_content_head(self, tiny_model):
        head = {id(p) for p in tiny_model.encoder.content_head.parameters()}
        assert head.isdisjoint(id(p) for p in tiny_model.style_parameters())

    def test_seeded_init(self, tiny_config):
        a, b = AgainVC(tiny_config), AgainVC(tiny_config)
        c = AgainVC(tiny_config.updated(seed=1))
        for (name, pa), pb in zip(a.state_dict().items(), b.state_dict().values()):
            assert torch.equal(pa, pb), name
        assert not all(torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))

    def test_init_leaves_global_rng_alone(self, tiny_config):
        torch.manual_seed(123)
        expected = torch.rand(3)
        torch.manual_seed(123)
        AgainVC(tiny_config)
        assert torch.equal(torch.rand(3), expected)


class TestConvert:
    def test_plan_windows(self):
        assert plan_windows(100, 128) == [(0, 100)]
        assert plan_windows(256, 128) == [(0, 128), (128, 128)]
        assert plan_windows(300, 128) == [(0, 128), (128, 128), (256, 44)]

    def test_last_window_padded_by_repetition(self, tiny_model):
        source, target = _mel(300, 1), _mel(150, 2)
        converted = convert(tiny_model, source, target)
        tail = source[:, 256:]
        padded = np.concatenate([tail, tail, tail], axis=1)[:, -128:]
        style = encode_style(tiny_model, target)
        with torch.no_grad():
            content, _ = tiny_model.encode(torch.from_numpy(np.ascontiguousarray(padded))[None])
            expected = tiny_model.decode(content, style)[0].numpy()[:, -44:]
            content, _ = tiny_model.encode(torch.from_numpy(np.ascontiguousarray(source[:, 128:256]))[None])
            middle = tiny_model.decode(content, style)[0].numpy()
        np.testing.assert_allclose(converted[:, 256:], expected, rtol=0, atol=1e-5)
        np.testing.assert_allclose(converted[:, 128:256], middle, rtol=0, atol=1e-5)

    @pytest.mark.parametrize("frames", [60, 128, 200, 300])
    def test_output_length_matches_source(self, tiny_model, frames):
        out = convert(tiny_model, _mel(frames, 1), _mel(90, 2))
        assert out.shape == (80, frames)
        assert np.all(np.isfinite(out))

    def test_self_conversion_equals_reconstruction(self, tiny_model):
        x = _mel(128, 4)
        converted = convert(tiny_model, x, x)
        with torch.no_grad():
            reconstructed = tiny_model.reconstruct(torch.from_numpy(x)[None])[0].numpy()
        np.testing.assert_array_equal(converted, reconstructed)

    def test_self_conversion_short_input(self, tiny_model):
        x = _mel(70, 5)
        converted = convert(tiny_model, x, x)
        padded = np.concatenate([x, x], axis=1)[:, -128:]
        with torch.no_grad():
            reconstructed = tiny_model.reconstruct(torch.from_numpy(padded)[None])[0].numpy()
        np.testing.assert_allclose(converted, reconstructed[:, -70:], rtol=0, atol=1e-6)

    def test_output_depends_on_target(self, tiny_model):
        source = _mel(128, 1)
        a = convert(tiny_model, source, _mel(128, 2))
        b = convert(tiny_model, source, _mel(128, 3))
        assert not np.allclose(a, b)

    def test_style_distance(self, tiny_model):
        style = encode_style(tiny_model, _mel(128))
        assert isinstance(style, StyleStats)
        assert style_distance(style, style) == 0.0
        assert style_distance(style, encode_style(tiny_model, _mel(128, 9) + 3.0)) > 0.0

    def test_leaves_training_mode(self, tiny_model):
        tiny_model.train()
        convert(tiny_model, _mel(128), _mel(128))
        assert tiny_model.training


@pytest.mark.slow
def test_converted_style_moves_to_target(tmp_path):
    from app.services.audio.pipeline import load_mel
    from app.services.audio.synth import synthesize_mel_corpus
    from app.services.training.corpus import build_corpus_index
    from app.services.training.trainer import TrainConfig, run_training

    root = synthesize_mel_corpus(tmp_path / "desk", n_speakers=4, utterances_per_speaker=24, seed=0)
    index = build_corpus_index(root, 0.75, seed=0)
    config = TrainConfig(total_steps=2000, checkpoint_every=1000, log_every=200)
    model = run_training(index, ModelConfig(bottleneck_channels=4), config, tmp_path / "run").model
    model.eval()

    speaker_a, speaker_b = index.speakers[0], index.speakers[1]
    source = load_mel(index.path_of(index.utterances[speaker_a][0])).values
    target = load_mel(index.path_of(index.utterances[speaker_b][0])).values
    converted = convert(model, source, target)
    proximity = style_proximity(model, converted, source, target)
    assert proximity["to_target"] < proximity["to_source"]
