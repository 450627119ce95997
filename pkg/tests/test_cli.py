import json

import numpy as np
import pandas as pd
import pytest
import soundfile as sf
import torch

import main as cli
from app.cli import commands
from app.cli.commands import (
    EXIT_CONFIG_MISMATCH,
    EXIT_DIVERGENCE,
    EXIT_INPUT_ERROR,
    ExperimentConfig,
    cmd_convert,
    cmd_preprocess,
    cmd_synthcorpus,
    cmd_train,
    exit_code_for,
)
from app.services.audio.pipeline import AudioPipeline, load_mel
from app.services.model.checkpoint import load_checkpoint, save_checkpoint
from app.services.model.network import AgainVC, ModelConfig, _left_pad_by_repetition
from app.services.training.corpus import CorpusIndex
from app.services.training.trainer import DivergenceError
from utils.hashing import file_sha256

TINY = {
    "model": {"n_blocks": 2, "channels": [32, 32], "kernel_size": 3},
    "train": {"batch_size": 4, "checkpoint_every": 100, "log_every": 100},
    "probe": {"steps": 20, "hidden_channels": 8},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture
def index_path(tmp_path):
    cmd_synthcorpus(tmp_path / "corpus", kind="mel", speakers=4, utterances=6, seed=0)
    return tmp_path / "corpus" / "index.json"


def _manifest(path):
    return json.loads(path.read_text())


class TestConfig:
    def test_flags_override_file(self, config_file):
        config = ExperimentConfig.load(config_file).with_overrides(seed=7, steps=12, activation="relu", bottleneck=8)
        assert config.model.channels == [32, 32]
        assert config.train.total_steps == 12
        assert config.model.activation.kind == "relu"
        assert config.model.bottleneck_channels == 8
        assert {config.corpus.seed, config.model.seed, config.train.seed, config.probe.seed} == {7}

    def test_defaults_follow_recipe(self):
        config = ExperimentConfig()
        assert config.train.learning_rate == 5e-4 and config.train.batch_size == 32
        assert config.audio.sample_rate == 22050 and config.audio.n_mels == 80

    def test_bad_activation_flag(self):
        with pytest.raises(ValueError):
            ExperimentConfig().with_overrides(activation="sigmoid:-1")

    @pytest.mark.parametrize(
        "error, code",
        [
            (DivergenceError("nan"), 3),
            (commands.ConfigMismatchError("x"), 4),
            (commands.ShapeError("x"), 4),
            (commands.CorpusError("x"), 2),
            (FileNotFoundError("x"), 2),
            (RuntimeError("x"), 1),
        ],
    )
    def test_exit_codes(self, error, code):
        assert exit_code_for(error) == code


class TestSynthCorpus:
    def test_mel_corpus_with_index(self, index_path):
        index = CorpusIndex.load(index_path)
        assert len(index.speakers) == 4
        assert _manifest(index_path.parent / "manifest.json")["command"] == "synthcorpus"

    def test_wav_corpus(self, tmp_path):
        assert cli.main(["synthcorpus", "--kind", "wav", "--speakers", "2", "--utterances", "2", "--out", str(tmp_path / "w")]) == 0
        wavs = sorted((tmp_path / "w").glob("*/*.wav"))
        assert len(wavs) == 4
        assert sf.info(str(wavs[0])).samplerate == 22050


class TestPreprocess:
    def test_builds_cache_and_index(self, wav_corpus, tmp_path):
        before = {p: file_sha256(p) for p in wav_corpus.glob("*/*.wav")}
        result = cmd_preprocess(wav_corpus, tmp_path / "cache")
        assert len(result.index.speakers) == 4
        assert len(result.processed) == 12 and not result.failures
        assert (tmp_path / "cache" / "index.json").is_file()
        mel = load_mel(tmp_path / "cache" / "spk00" / "spk00_000.npy")
        assert mel.n_mels == 80
        manifest = _manifest(result.manifest_path)
        assert len(manifest["input_hashes"]) == 12
        assert {p: file_sha256(p) for p in before} == before

    def test_rerun_skips_unchanged(self, wav_corpus, tmp_path):
        cmd_preprocess(wav_corpus, tmp_path / "cache")
        mel_path = tmp_path / "cache" / "spk01" / "spk01_001.npy"
        first = mel_path.read_bytes()
        again = cmd_preprocess(wav_corpus, tmp_path / "cache")
        assert again.processed == [] and len(again.skipped) == 12
        assert mel_path.read_bytes() == first

    def test_corrupt_file_listed(self, wav_corpus, tmp_path):
        (wav_corpus / "spk02" / "spk02_broken.wav").write_bytes(b"RIFF\x00\x00\x00\x00WAVEjunk")
        code = cli.main(["preprocess", str(wav_corpus), "--out", str(tmp_path / "cache")])
        assert code == 0
        manifest = _manifest(tmp_path / "cache" / "manifest.json")
        assert [f["file"] for f in manifest["failures"]] == ["spk02/spk02_broken.wav"]
        assert manifest["exit_code"] == 0

    def test_too_many_failures(self, tmp_path):
        for speaker in ("a", "b"):
            (tmp_path / "bad" / speaker).mkdir(parents=True)
            (tmp_path / "bad" / speaker / "x.wav").write_bytes(b"nope")
        assert cli.main(["preprocess", str(tmp_path / "bad"), "--out", str(tmp_path / "cache")]) == EXIT_INPUT_ERROR
        assert _manifest(tmp_path / "cache" / "manifest.json")["exit_code"] == EXIT_INPUT_ERROR

    def test_missing_corpus(self, tmp_path):
        assert cli.main(["preprocess", str(tmp_path / "nowhere"), "--out", str(tmp_path / "cache")]) == EXIT_INPUT_ERROR


class TestTrain:
    def test_zero_steps_is_initialization(self, index_path, config_file, tmp_path):
        out = tmp_path / "train"
        assert cli.main(["train", "--config", str(config_file), "--index", str(index_path), "--steps", "0", "--out", str(out)]) == 0
        model, _ = load_checkpoint(out / "final.safetensors")
        init = AgainVC(ExperimentConfig.load(config_file).model)
        for name, value in init.state_dict().items():
            assert torch.equal(model.state_dict()[name], value), name
        manifest = _manifest(out / "manifest.json")
        assert manifest["config"]["train"]["learning_rate"] == 0.0005
        assert (manifest["config"]["train"]["beta1"], manifest["config"]["train"]["beta2"]) == (0.9, 0.999)
        assert manifest["config"]["train"]["batch_size"] == 4
        assert manifest["input_hashes"]["index"] == file_sha256(index_path)

    def test_default_manifest_batch_size(self, index_path, tmp_path):
        out = tmp_path / "train"
        assert cli.main(["train", "--index", str(index_path), "--steps", "0", "--out", str(out)]) == 0
        assert _manifest(out / "manifest.json")["config"]["train"]["batch_size"] == 32

    def test_same_seed_same_checkpoint(self, index_path, config_file, tmp_path):
        for name in ("a", "b"):
            args = ["train", "--config", str(config_file), "--index", str(index_path), "--steps", "3", "--seed", "5",
                    "--out", str(tmp_path / name)]
            assert cli.main(args) == 0
        assert file_sha256(tmp_path / "a" / "final.safetensors") == file_sha256(tmp_path / "b" / "final.safetensors")
        assert (tmp_path / "a" / "loss_history.csv").read_bytes() == (tmp_path / "b" / "loss_history.csv").read_bytes()

    def test_divergence_exit_code(self, index_path, config_file, tmp_path, monkeypatch):
        def diverge(*args, **kwargs):
            raise DivergenceError("loss is nan", step=1)

        monkeypatch.setattr(commands, "run_training", diverge)
        args = ["train", "--config", str(config_file), "--index", str(index_path), "--out", str(tmp_path / "t")]
        assert cli.main(args) == EXIT_DIVERGENCE
        assert _manifest(tmp_path / "t" / "manifest.json")["exit_code"] == EXIT_DIVERGENCE


class TestConvert:
    @pytest.fixture
    def checkpoint(self, tmp_path):
        config = ModelConfig(**TINY["model"])
        return save_checkpoint(AgainVC(config), tmp_path / "model.safetensors")

    def test_self_conversion_matches_reconstruction(self, checkpoint, tone_wav, tmp_path):
        result = cmd_convert(checkpoint, tone_wav, tone_wav, tmp_path / "out" / "self.wav")
        _, mel = AudioPipeline().process_file(tone_wav)
        model, _ = load_checkpoint(checkpoint)
        model.eval()
        padded = _left_pad_by_repetition(mel.values, model.config.segment_length)
        with torch.no_grad():
            reconstructed = model.reconstruct(torch.from_numpy(padded)[None])[0].numpy()[:, -mel.frames:]
        np.testing.assert_allclose(result.mel, reconstructed, rtol=0, atol=1e-6)
        np.testing.assert_array_equal(np.load(result.mel_path), result.mel)

    def test_writes_wav_and_manifest(self, checkpoint, tone_wav, wav_corpus, tmp_path):
        target = wav_corpus / "spk03" / "spk03_000.wav"
        out = tmp_path / "converted.wav"
        assert cli.main(["convert", str(checkpoint), str(tone_wav), str(target), "--out", str(out)]) == 0
        assert sf.info(str(out)).samplerate == 22050
        manifest = _manifest(out.with_suffix(".manifest.json"))
        assert set(manifest["stages"]) == {"source", "target", "convert", "vocoder"}
        assert set(manifest["stages"]["convert"]["style"]) == {"to_source", "to_target"}
        assert set(manifest["input_hashes"]) == {"checkpoint", "source", "target"}
        assert manifest["outputs"]["wav"] == str(out)

    def test_deterministic(self, checkpoint, tone_wav, wav_corpus, tmp_path):
        target = wav_corpus / "spk01" / "spk01_002.wav"
        a = cmd_convert(checkpoint, tone_wav, target, tmp_path / "a.wav")
        b = cmd_convert(checkpoint, tone_wav, target, tmp_path / "b.wav")
        assert a.wav_path.read_bytes() == b.wav_path.read_bytes()

    def test_mel_count_mismatch(self, tmp_path, tone_wav):
        narrow = save_checkpoint(AgainVC(ModelConfig(n_mels=40, **TINY["model"])), tmp_path / "narrow.safetensors")
        code = cli.main(["convert", str(narrow), str(tone_wav), str(tone_wav), "--out", str(tmp_path / "x.wav")])
        assert code == EXIT_CONFIG_MISMATCH

    def test_unreadable_source(self, checkpoint, tone_wav, tmp_path):
        code = cli.main(["convert", str(checkpoint), str(tmp_path / "missing.wav"), str(tone_wav), "--out", str(tmp_path / "x.wav")])
        assert code == EXIT_INPUT_ERROR


class TestReports:
    def test_probe_csv_has_chance(self, index_path, config_file, tmp_path):
        checkpoint = save_checkpoint(AgainVC(ModelConfig(**TINY["model"])), tmp_path / "m.safetensors")
        out = tmp_path / "probe"
        assert cli.main(["probe", str(checkpoint), "--config", str(config_file), "--index", str(index_path), "--out", str(out)]) == 0
        frame = pd.read_csv(out / "probe.csv")
        n_train = len(CorpusIndex.load(index_path).train_speakers)
        assert frame["chance"].tolist() == pytest.approx([100.0 / n_train])
        assert (out / "probe.json").is_file() and (out / "manifest.json").is_file()

    def test_sweep_two_rows(self, index_path, config_file, tmp_path):
        out = tmp_path / "sweep"
        args = ["sweep", "--config", str(config_file), "--index", str(index_path), "--steps", "2",
                "--activations", "none,sigmoid:0.1", "--bottlenecks", "4", "--out", str(out)]
        assert cli.main(args) == 0
        frame = pd.read_csv(out / "sweep.csv")
        assert len(frame) == 2
        assert list(frame["activation"]) == ["none", "sigmoid"]
        assert (out / "sweep.png").is_file()
        assert _manifest(out / "manifest.json")["command"] == "sweep"

    def test_compare_four_rows(self, index_path, config_file, tmp_path):
        out = tmp_path / "compare"
        args = ["compare", "--config", str(config_file), "--index", str(index_path), "--steps", "2", "--out", str(out)]
        assert cli.main(args) == 0
        assert len(pd.read_csv(out / "compare.csv")) == 4


@pytest.mark.slow
def test_wav_pipeline_converts_toward_target(tmp_path):
    corpus = cmd_synthcorpus(tmp_path / "wavs", kind="wav", speakers=4, utterances=24, seed=0)
    cmd_preprocess(corpus, tmp_path / "cache")
    config = ExperimentConfig().with_overrides(steps=2000, bottleneck=4)
    trained = cmd_train(tmp_path / "cache" / "index.json", tmp_path / "train", config)
    out = tmp_path / "converted.wav"
    cmd_convert(trained.checkpoint_path, corpus / "spk00" / "spk00_000.wav", corpus / "spk01" / "spk01_000.wav", out)
    style = _manifest(out.with_suffix(".manifest.json"))["stages"]["convert"]["style"]
    assert style["to_target"] < style["to_source"]
