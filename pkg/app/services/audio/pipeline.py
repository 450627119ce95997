from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union
import json
import math

import librosa
import numpy as np
import soundfile as sf
from pydantic import BaseModel, Field

from utils.logger import logger


class AudioPipelineError(Exception):
    """Custom exception for audio pipeline errors"""
    pass


class AudioDecodeError(AudioPipelineError):
    """Raised when an audio file cannot be read or decoded"""
    pass


class EmptyInputError(AudioPipelineError):
    """Raised when audio is empty or entirely silent"""
    pass


class TooShortError(AudioPipelineError):
    """Raised when a clip is shorter than one analysis window"""
    pass


class InvalidInputError(AudioPipelineError):
    """Raised on non-finite values or an unexpected sample rate"""
    pass


class AudioConfig(BaseModel):
    """Signal-processing settings shared by preprocessing, conversion and vocoding."""

    sample_rate: int = Field(default=22050, gt=0, description="Target sample rate in Hz")
    n_fft: int = Field(default=1024, gt=0, description="STFT size in samples")
    win_length: int = Field(default=1024, gt=0, description="STFT window length in samples")
    hop_length: int = Field(default=256, gt=0, description="STFT hop in samples")
    n_mels: int = Field(default=80, gt=0, description="Number of mel bins")
    fmin: float = Field(default=0.0, ge=0.0, description="Lowest mel filter frequency")
    fmax: Optional[float] = Field(default=None, description="Highest mel filter frequency (None = Nyquist)")
    log_floor: float = Field(default=1e-5, gt=0.0, description="Mel energies are clamped below at this value before log")
    center: bool = Field(default=True, description="Centered STFT framing")
    pad_mode: str = Field(default="reflect", description="Padding used by centered framing")
    window: str = Field(default="hann", description="STFT window")
    res_type: str = Field(default="soxr_hq", description="librosa resampler")
    trim_db: float = Field(default=-40.0, lt=0.0, description="Silence threshold relative to the loudest frame")
    trim_frame_length: int = Field(default=2048, gt=0, description="Silence analysis frame length")
    trim_hop_length: int = Field(default=512, gt=0, description="Silence analysis hop")
    segment_length: int = Field(default=128, gt=0, description="Training segment length in frames")
    griffin_lim_iters: int = Field(default=60, ge=1, description="Griffin-Lim iterations")
    griffin_lim_momentum: float = Field(default=0.99, ge=0.0, description="Fast Griffin-Lim momentum")
    griffin_lim_seed: int = Field(default=0, description="Seed for the random initial phase")

    @property
    def framing(self) -> str:
        return f"centered-{self.pad_mode}-{self.window}" if self.center else f"uncentered-{self.window}"

    def sidecar(self) -> Dict[str, Any]:
        return {
            "sample_rate": self.sample_rate,
            "n_mels": self.n_mels,
            "hop": self.hop_length,
            "win": self.win_length,
            "n_fft": self.n_fft,
            "fmin": self.fmin,
            "fmax": self.fmax,
            "log_floor": self.log_floor,
            "framing": self.framing,
        }


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise InvalidInputError(f"Invalid sample rate: {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInputError("Audio samples contain non-finite values")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def peak(self) -> float:
        return float(np.max(np.abs(self.samples))) if self.samples.size else 0.0


@dataclass
class MelSpectrogram:
    """Log-mel magnitudes, shape (n_mels, frames)."""

    values: np.ndarray
    sample_rate: int = 22050
    hop_length: int = 256
    win_length: int = 1024
    log_floor: float = 1e-5

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[1] < 1:
            raise InvalidInputError(f"Mel spectrogram must be (n_mels, T>=1), got {self.values.shape}")

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]

    @property
    def floor_value(self) -> float:
        return math.log(self.log_floor)


@dataclass
class MelSegment:
    """Fixed-length crop of a MelSpectrogram used as the training currency."""

    values: np.ndarray
    start: int = 0
    padded: bool = False
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.values.shape[1]


def load_and_normalize(path: Union[str, Path], config: Optional[AudioConfig] = None) -> AudioClip:
    """Read a PCM WAV file as a mono, peak-normalized clip at the target rate.

    Args:
        path: WAV file path
        config: Audio settings (sample_rate and res_type are used)

    Returns:
        AudioClip: mono clip at config.sample_rate with max |amplitude| == 1 unless silent

    Raises:
        AudioDecodeError: if the file is missing, unreadable or corrupt
        EmptyInputError: if the file holds no samples
    """
    config = config or AudioConfig()
    path = Path(path)
    if not path.is_file():
        raise AudioDecodeError(f"Audio file not found: {path}")

    try:
        data, sr = sf.read(str(path), dtype="float32", always_2d=True)
    except Exception as e:
        raise AudioDecodeError(f"Failed to decode audio {path}: {str(e)}") from e

    if data.size == 0:
        raise EmptyInputError(f"Audio file is empty: {path}")

    samples = data.mean(axis=1)
    if not np.all(np.isfinite(samples)):
        raise AudioDecodeError(f"Decoded audio contains non-finite values: {path}")

    if sr != config.sample_rate:
        try:
            samples = librosa.resample(samples, orig_sr=sr, target_sr=config.sample_rate, res_type=config.res_type)
        except Exception as e:
            raise AudioDecodeError(f"Failed to resample {path} from {sr} Hz: {str(e)}") from e

    return peak_normalize(AudioClip(samples, config.sample_rate))


def peak_normalize(clip: AudioClip) -> AudioClip:
    peak = clip.peak
    if peak == 0.0:
        return clip
    return AudioClip(clip.samples / peak, clip.sample_rate)


def trim_silence(
    clip: AudioClip,
    threshold_db: float = -40.0,
    frame_length: int = 2048,
    hop_length: int = 512,
) -> AudioClip:
    """Drop leading and trailing frames quieter than threshold_db below the loudest frame.

    Interior samples are returned untouched (a contiguous slice of the input).
    """
    if threshold_db >= 0:
        raise InvalidInputError(f"threshold_db must be negative, got {threshold_db}")
    if clip.samples.size == 0 or clip.peak == 0.0:
        raise EmptyInputError("Cannot trim an entirely silent clip")

    _, (start, end) = librosa.effects.trim(
        clip.samples,
        top_db=-threshold_db,
        ref=np.max,
        frame_length=frame_length,
        hop_length=hop_length,
    )
    if end <= start:
        raise EmptyInputError("Clip is silent below the trim threshold")
    return AudioClip(clip.samples[start:end], clip.sample_rate)


@lru_cache(maxsize=8)
def _mel_basis(sr: int, n_fft: int, n_mels: int, fmin: float, fmax: Optional[float]) -> np.ndarray:
    return librosa.filters.mel(sr=sr, n_fft=n_fft, n_mels=n_mels, fmin=fmin, fmax=fmax).astype(np.float32)


def mel_spectrogram(clip: AudioClip, config: Optional[AudioConfig] = None) -> MelSpectrogram:
    """Natural-log mel magnitudes with a global floor of log(config.log_floor).

    Frame count follows centered framing: 1 + samples // hop.
    """
    config = config or AudioConfig()
    if clip.sample_rate != config.sample_rate:
        raise InvalidInputError(f"Expected {config.sample_rate} Hz audio, got {clip.sample_rate} Hz")
    if clip.samples.size < config.n_fft:
        raise TooShortError(f"Clip has {clip.samples.size} samples, fewer than one {config.n_fft}-sample window")

    stft = librosa.stft(
        clip.samples,
        n_fft=config.n_fft,
        hop_length=config.hop_length,
        win_length=config.win_length,
        window=config.window,
        center=config.center,
        pad_mode=config.pad_mode,
    )
    magnitude = np.abs(stft).astype(np.float32)
    mel = _mel_basis(config.sample_rate, config.n_fft, config.n_mels, config.fmin, config.fmax) @ magnitude
    values = np.log(np.maximum(mel, config.log_floor))
    return MelSpectrogram(
        values=values,
        sample_rate=config.sample_rate,
        hop_length=config.hop_length,
        win_length=config.win_length,
        log_floor=config.log_floor,
    )


def sample_segment(mel: MelSpectrogram, rng: np.random.Generator, segment_length: int = 128) -> MelSegment:
    """Uniformly random contiguous crop; inputs shorter than segment_length are right-padded with the floor."""
    frames = mel.frames
    if frames < segment_length:
        pad = np.full((mel.n_mels, segment_length - frames), mel.floor_value, dtype=np.float32)
        return MelSegment(
            values=np.concatenate([mel.values, pad], axis=1),
            start=0,
            padded=True,
            metadata={"original_frames": frames},
        )
    start = int(rng.integers(0, frames - segment_length + 1))
    return MelSegment(values=mel.values[:, start:start + segment_length].copy(), start=start)


def griffin_lim_waveform(mel: MelSpectrogram, iterations: int = 60, config: Optional[AudioConfig] = None) -> np.ndarray:
    """Griffin-Lim reconstruction without output normalization."""
    config = config or AudioConfig()
    if iterations < 1:
        raise InvalidInputError(f"iterations must be >= 1, got {iterations}")
    if not np.all(np.isfinite(mel.values)):
        raise InvalidInputError("Mel spectrogram contains non-finite values")

    magnitude = librosa.feature.inverse.mel_to_stft(
        np.exp(mel.values.astype(np.float64)),
        sr=config.sample_rate,
        n_fft=config.n_fft,
        power=1.0,
        fmin=config.fmin,
        fmax=config.fmax,
    )
    samples = librosa.griffinlim(
        magnitude,
        n_iter=iterations,
        hop_length=config.hop_length,
        win_length=config.win_length,
        n_fft=config.n_fft,
        window=config.window,
        center=config.center,
        pad_mode=config.pad_mode,
        momentum=config.griffin_lim_momentum,
        init="random",
        random_state=config.griffin_lim_seed,
    )
    return samples.astype(np.float32)


def griffin_lim_invert(mel: MelSpectrogram, iterations: int = 60, config: Optional[AudioConfig] = None) -> AudioClip:
    """Invert a log-mel spectrogram to a peak-normalized waveform."""
    config = config or AudioConfig()
    samples = griffin_lim_waveform(mel, iterations=iterations, config=config)
    return peak_normalize(AudioClip(samples, config.sample_rate))


def write_wav(clip: AudioClip, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), clip.samples, clip.sample_rate, subtype="PCM_16")
    return path


def sidecar_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".json")


def save_mel(
    mel: MelSpectrogram,
    path: Union[str, Path],
    config: Optional[AudioConfig] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Persist mel values as .npy with a JSON sidecar describing the extraction settings."""
    config = config or AudioConfig()
    path = Path(path).with_suffix(".npy")
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, mel.values.astype(np.float32), allow_pickle=False)

    sidecar = config.sidecar()
    sidecar["frames"] = mel.frames
    sidecar.update(extra or {})
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def read_sidecar(path: Union[str, Path]) -> Dict[str, Any]:
    side = sidecar_path(path)
    if not side.is_file():
        return {}
    return json.loads(side.read_text())


def load_mel(path: Union[str, Path]) -> MelSpectrogram:
    path = Path(path).with_suffix(".npy")
    try:
        values = np.load(path, allow_pickle=False)
    except Exception as e:
        raise AudioDecodeError(f"Failed to load mel file {path}: {str(e)}") from e
    meta = read_sidecar(path)
    return MelSpectrogram(
        values=values,
        sample_rate=meta.get("sample_rate", 22050),
        hop_length=meta.get("hop", 256),
        win_length=meta.get("win", 1024),
        log_floor=meta.get("log_floor", 1e-5),
    )


class AudioPipeline:
    """WAV → trimmed mono clip → log-mel, and log-mel → WAV via Griffin-Lim."""

    def __init__(self, config: Optional[AudioConfig] = None):
        self.config = config or AudioConfig()

    def load(self, path: Union[str, Path], trim: bool = True) -> AudioClip:
        clip = load_and_normalize(path, self.config)
        if trim:
            clip = trim_silence(
                clip,
                threshold_db=self.config.trim_db,
                frame_length=self.config.trim_frame_length,
                hop_length=self.config.trim_hop_length,
            )
        return clip

    def process_file(self, path: Union[str, Path], trim: bool = True) -> Tuple[AudioClip, MelSpectrogram]:
        clip = self.load(path, trim=trim)
        mel = mel_spectrogram(clip, self.config)
        logger.debug(f"{path}: {clip.duration:.2f}s -> {mel.frames} frames")
        return clip, mel

    def invert(self, mel: MelSpectrogram, iterations: Optional[int] = None) -> AudioClip:
        return griffin_lim_invert(mel, iterations=iterations or self.config.griffin_lim_iters, config=self.config)
