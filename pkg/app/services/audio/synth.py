"""Desk-scale synthetic speakers.

Two generators share one idea: every speaker reads sequences drawn from a
common pool of "phones", and speaker identity lives only in a time-invariant
transform. For the mel corpus that transform is a per-channel affine
signature (scale, offset); for the WAV corpus it is the fundamental
frequency plus a spectral tilt.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union
import math

import numpy as np

from utils.logger import logger
from .pipeline import AudioClip, AudioConfig, MelSpectrogram, save_mel, write_wav


@dataclass
class SpeakerSignature:
    speaker_id: str
    scale: np.ndarray
    offset: np.ndarray


def _smooth(values: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return values
    kernel = np.hanning(width + 2)[1:-1]
    kernel /= kernel.sum()
    return np.convolve(values, kernel, mode="same")


def make_phone_pool(n_phones: int, n_mels: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth random spectral envelopes, one row per phone, roughly zero-mean."""
    pool = rng.normal(0.0, 1.5, size=(n_phones, n_mels))
    return np.stack([_smooth(row, 9) for row in pool])


def make_speaker_signatures(n_speakers: int, n_mels: int, rng: np.random.Generator) -> List[SpeakerSignature]:
    signatures = []
    for index in range(n_speakers):
        log_scale = _smooth(rng.normal(0.0, 0.35, size=n_mels), 15)
        offset = _smooth(rng.normal(-4.0, 1.5, size=n_mels), 15)
        signatures.append(SpeakerSignature(f"spk{index:02d}", np.exp(log_scale), offset))
    return signatures


def render_content(pool: np.ndarray, frames: int, rng: np.random.Generator) -> np.ndarray:
    """Piecewise phone sequence with short transitions, shape (n_mels, frames)."""
    columns = []
    while sum(c.shape[1] for c in columns) < frames:
        phone = pool[rng.integers(0, pool.shape[0])]
        duration = int(rng.integers(4, 16))
        columns.append(np.repeat(phone[:, None], duration, axis=1))
    content = np.concatenate(columns, axis=1)[:, :frames]
    kernel = np.ones(3) / 3.0
    return np.apply_along_axis(lambda row: np.convolve(row, kernel, mode="same"), 1, content)


def synthesize_mel_corpus(
    out_dir: Union[str, Path],
    n_speakers: int = 4,
    utterances_per_speaker: int = 24,
    min_frames: int = 160,
    max_frames: int = 320,
    n_phones: int = 24,
    noise: float = 0.05,
    seed: int = 0,
    config: Optional[AudioConfig] = None,
) -> Path:
    """Write `<out_dir>/<speaker>/<utt>.npy` log-mel files built from affine speaker signatures.

    Every speaker transforms content drawn from the same phone pool, so
    instance normalization can remove speaker identity exactly.
    """
    config = config or AudioConfig()
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    pool = make_phone_pool(n_phones, config.n_mels, rng)
    signatures = make_speaker_signatures(n_speakers, config.n_mels, rng)
    floor = math.log(config.log_floor)

    for signature in signatures:
        for utt in range(utterances_per_speaker):
            frames = int(rng.integers(min_frames, max_frames + 1))
            content = render_content(pool, frames, rng)
            values = signature.scale[:, None] * content + signature.offset[:, None]
            values = values + rng.normal(0.0, noise, size=values.shape)
            mel = MelSpectrogram(np.maximum(values, floor).astype(np.float32), log_floor=config.log_floor)
            save_mel(mel, out_dir / signature.speaker_id / f"{signature.speaker_id}_{utt:03d}", config,
                     extra={"synthetic": True})

    logger.info(f"Synthesized mel corpus: {n_speakers} speakers x {utterances_per_speaker} utterances in {out_dir}")
    return out_dir


VOWEL_FORMANTS = [
    (730.0, 1090.0), (270.0, 2290.0), (530.0, 1840.0), (300.0, 870.0),
    (660.0, 1720.0), (490.0, 1350.0), (640.0, 1190.0), (440.0, 1020.0),
]


def render_speaker_wave(
    phones: List[int],
    durations: List[float],
    f0: float,
    tilt_db_per_octave: float,
    sample_rate: int,
) -> np.ndarray:
    """Harmonic source shaped by phone formants and a speaker-specific spectral tilt."""
    pieces = []
    phase = 0.0
    for phone, duration in zip(phones, durations):
        n = int(duration * sample_rate)
        t = np.arange(n) / sample_rate
        f1, f2 = VOWEL_FORMANTS[phone % len(VOWEL_FORMANTS)]
        wave = np.zeros(n)
        n_harmonics = int((sample_rate / 2 - 200) // f0)
        for h in range(1, n_harmonics + 1):
            freq = h * f0
            envelope = np.exp(-((freq - f1) / 180.0) ** 2) + 0.6 * np.exp(-((freq - f2) / 240.0) ** 2) + 0.02
            tilt = 10 ** ((tilt_db_per_octave * math.log2(freq / f0)) / 20.0)
            wave += envelope * tilt * np.sin(2 * np.pi * freq * t + h * phase)
        fade = min(n // 10, int(0.01 * sample_rate))
        if fade > 0:
            ramp = np.linspace(0.0, 1.0, fade)
            wave[:fade] *= ramp
            wave[-fade:] *= ramp[::-1]
        pieces.append(wave)
        phase += 2 * np.pi * f0 * duration
    wave = np.concatenate(pieces)
    return wave / max(np.max(np.abs(wave)), 1e-9)


def synthesize_wav_corpus(
    out_dir: Union[str, Path],
    n_speakers: int = 4,
    utterances_per_speaker: int = 6,
    sample_rate: int = 22050,
    lead_silence: float = 0.25,
    seed: int = 0,
) -> Path:
    """Write `<out_dir>/<speaker>/<utt>.wav` with per-speaker f0 and tilt over shared phone sequences."""
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    f0s = np.linspace(95.0, 240.0, n_speakers)
    tilts = np.linspace(-3.0, -9.0, n_speakers)
    scripts = []
    for _ in range(utterances_per_speaker):
        count = int(rng.integers(6, 12))
        scripts.append(([int(p) for p in rng.integers(0, len(VOWEL_FORMANTS), size=count)],
                        [float(d) for d in rng.uniform(0.12, 0.3, size=count)]))

    silence = np.zeros(int(lead_silence * sample_rate))
    for index in range(n_speakers):
        speaker = f"spk{index:02d}"
        for utt, (phones, durations) in enumerate(scripts):
            voiced = render_speaker_wave(phones, durations, float(f0s[index]), float(tilts[index]), sample_rate)
            samples = 0.8 * np.concatenate([silence, voiced, silence])
            write_wav(AudioClip(samples, sample_rate), out_dir / speaker / f"{speaker}_{utt:03d}.wav")

    logger.info(f"Synthesized WAV corpus: {n_speakers} speakers x {utterances_per_speaker} utterances in {out_dir}")
    return out_dir
