from pathlib import Path

import numpy as np
import pytest
import torch

from app.services.audio.pipeline import AudioClip, AudioConfig, write_wav
from app.services.audio.synth import synthesize_mel_corpus, synthesize_wav_corpus
from app.services.model.network import AgainVC, ModelConfig
from app.services.training.corpus import build_corpus_index
from app.services.training.trainer import TrainConfig


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(n_blocks=2, channels=[32, 32], bottleneck_channels=4, kernel_size=3)


@pytest.fixture
def pointwise_config() -> ModelConfig:
    """Kernel-1 convolutions: every layer acts on frames independently."""
    return ModelConfig(n_blocks=2, channels=[16, 16], bottleneck_channels=4, kernel_size=1)


@pytest.fixture
def tiny_model(tiny_config) -> AgainVC:
    return AgainVC(tiny_config)


@pytest.fixture
def quick_train() -> TrainConfig:
    return TrainConfig(batch_size=8, total_steps=6, checkpoint_every=3, log_every=2)


@pytest.fixture
def mel_corpus(tmp_path) -> Path:
    return synthesize_mel_corpus(tmp_path / "mels", n_speakers=4, utterances_per_speaker=6, seed=0)


@pytest.fixture
def mel_index(mel_corpus):
    return build_corpus_index(mel_corpus, train_fraction=0.75, seed=0)


@pytest.fixture
def wav_corpus(tmp_path) -> Path:
    return synthesize_wav_corpus(tmp_path / "wavs", n_speakers=4, utterances_per_speaker=3, seed=0)


def tone(freq: float = 440.0, seconds: float = 1.0, sample_rate: int = 22050, amplitude: float = 0.5) -> np.ndarray:
    t = np.arange(int(seconds * sample_rate)) / sample_rate
    return (amplitude * np.sin(2 * np.pi * freq * t)).astype(np.float32)


@pytest.fixture
def tone_wav(tmp_path) -> Path:
    return write_wav(AudioClip(tone(seconds=1.2), 22050), tmp_path / "tone.wav")


@pytest.fixture
def audio_config() -> AudioConfig:
    return AudioConfig()
