from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError

from app.services.audio.pipeline import (
    AudioClip,
    AudioConfig,
    AudioPipeline,
    AudioPipelineError,
    MelSpectrogram,
    read_sidecar,
    save_mel,
    write_wav,
)
from app.services.audio.synth import synthesize_mel_corpus, synthesize_wav_corpus
from app.services.model.checkpoint import ConfigMismatchError, load_checkpoint
from app.services.model.network import ModelConfig, convert, style_proximity
from app.services.model.ops import ActivationSpec, ModelError, ShapeError
from app.services.probe.classifier import ProbeConfig, ProbeError
from app.services.probe.evaluation import (
    DEFAULT_BOTTLENECKS,
    SweepGrid,
    compare_encoder_variants,
    evaluate_model,
    run_sweep,
    write_reports,
)
from app.services.training.corpus import CorpusConfig, CorpusError, CorpusIndex, build_corpus_index
from app.services.training.trainer import DivergenceError, TrainConfig, TrainingResult, run_training
from config import get_config
from utils.hashing import file_sha256
from utils.logger import logger
from .manifest import RunManifest

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_INPUT_ERROR = 2
EXIT_DIVERGENCE = 3
EXIT_CONFIG_MISMATCH = 4

MIN_PREPROCESS_SUCCESS = 0.9


class PreprocessError(CorpusError):
    """Raised when too many corpus files fail to preprocess"""
    pass


class ExperimentConfig(BaseModel):
    """Everything a command can be configured with; loaded from `--config` and overridden by flags."""

    audio: AudioConfig = Field(default_factory=AudioConfig)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None) -> "ExperimentConfig":
        if path is None:
            return cls()
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"Config file not found: {path}")
        return cls.model_validate_json(path.read_text())

    def with_overrides(
        self,
        seed: Optional[int] = None,
        steps: Optional[int] = None,
        activation: Optional[str] = None,
        bottleneck: Optional[int] = None,
    ) -> "ExperimentConfig":
        data = self.model_dump(mode="json")
        if seed is not None:
            for section in ("corpus", "model", "train", "probe"):
                data[section]["seed"] = seed
        if steps is not None:
            data["train"]["total_steps"] = steps
        if activation is not None:
            data["model"]["activation"] = ActivationSpec.parse(activation).model_dump()
        if bottleneck is not None:
            data["model"]["bottleneck_channels"] = bottleneck
        return ExperimentConfig.model_validate(data)


def exit_code_for(error: BaseException) -> int:
    """Stable mapping from failures to process exit codes."""
    if isinstance(error, DivergenceError):
        return EXIT_DIVERGENCE
    if isinstance(error, (ConfigMismatchError, ShapeError)):
        return EXIT_CONFIG_MISMATCH
    if isinstance(error, (AudioPipelineError, CorpusError, ProbeError, ModelError, ValidationError, FileNotFoundError, ValueError)):
        return EXIT_INPUT_ERROR
    return EXIT_UNEXPECTED


def default_cache_dir() -> Path:
    return Path(get_config().CACHE_DIR) / "mels"


def default_index_path() -> Path:
    return default_cache_dir() / "index.json"


def cmd_synthcorpus(
    out_dir: Union[str, Path],
    kind: str = "mel",
    speakers: int = 4,
    utterances: int = 24,
    seed: int = 0,
    config: Optional[ExperimentConfig] = None,
) -> Path:
    """Generate a desk-scale corpus: affine-signature mels (`mel`) or harmonic speakers (`wav`)."""
    config = config or ExperimentConfig()
    out_dir = Path(out_dir)
    manifest = RunManifest(
        command="synthcorpus",
        config={"kind": kind, "speakers": speakers, "utterances": utterances, "audio": config.audio.model_dump(mode="json")},
        seed=seed,
    )
    if kind == "mel":
        synthesize_mel_corpus(out_dir, n_speakers=speakers, utterances_per_speaker=utterances, seed=seed, config=config.audio)
        index = build_corpus_index(out_dir, config.corpus.train_fraction, config.corpus.seed, config.corpus.max_utterances)
        manifest.outputs["index"] = str(index.save(out_dir / "index.json"))
    elif kind == "wav":
        synthesize_wav_corpus(out_dir, n_speakers=speakers, utterances_per_speaker=utterances, sample_rate=config.audio.sample_rate, seed=seed)
    else:
        raise ValueError(f"Unknown corpus kind {kind!r}; expected 'mel' or 'wav'")
    manifest.outputs["corpus"] = str(out_dir)
    manifest.finish(out_dir / "manifest.json")
    return out_dir


@dataclass
class PreprocessResult:
    index: CorpusIndex
    processed: List[str]
    skipped: List[str]
    failures: List[Dict[str, str]]
    manifest_path: Path


def cmd_preprocess(
    corpus_dir: Union[str, Path],
    out_dir: Optional[Union[str, Path]] = None,
    config: Optional[ExperimentConfig] = None,
) -> PreprocessResult:
    """WAV corpus → trimmed log-mel cache, corpus index and manifest.

    Files whose cached sidecar records the same source hash and extraction
    settings are skipped. Fails if fewer than 90% of files succeed.
    """
    config = config or ExperimentConfig()
    corpus_dir = Path(corpus_dir)
    out_dir = Path(out_dir) if out_dir else default_cache_dir()
    if not corpus_dir.is_dir():
        raise CorpusError(f"Corpus directory not found: {corpus_dir}")
    wavs = sorted(corpus_dir.glob("*/*.wav"))
    if not wavs:
        raise CorpusError(f"No `<speaker>/<utterance>.wav` files under {corpus_dir}")

    manifest = RunManifest(command="preprocess", config=config.model_dump(mode="json"), seed=config.corpus.seed)
    pipeline = AudioPipeline(config.audio)
    settings = config.audio.sidecar()
    processed, skipped, failures = [], [], []

    for wav in wavs:
        rel = wav.relative_to(corpus_dir).as_posix()
        digest = file_sha256(wav)
        manifest.input_hashes[rel] = digest
        target = out_dir / Path(rel).with_suffix(".npy")

        cached = read_sidecar(target)
        if target.is_file() and cached.get("source_sha256") == digest and all(cached.get(k) == v for k, v in settings.items()):
            skipped.append(rel)
            continue
        try:
            _, mel = pipeline.process_file(wav)
            save_mel(mel, target, config.audio, extra={"source": rel, "source_sha256": digest})
            processed.append(rel)
        except AudioPipelineError as e:
            logger.warning(f"Skipping {rel}: {str(e)}")
            failures.append({"file": rel, "error": str(e)})

    manifest.failures = failures
    manifest.stages["preprocess"] = {"total": len(wavs), "processed": len(processed), "skipped": len(skipped), "failed": len(failures)}
    manifest_path = out_dir / "manifest.json"
    success = 1.0 - len(failures) / len(wavs)
    if success < MIN_PREPROCESS_SUCCESS:
        manifest.finish(manifest_path, EXIT_INPUT_ERROR)
        raise PreprocessError(f"Only {success:.0%} of {len(wavs)} files preprocessed; see {manifest_path}")

    index = build_corpus_index(out_dir, config.corpus.train_fraction, config.corpus.seed, config.corpus.max_utterances)
    manifest.outputs["index"] = str(index.save(out_dir / "index.json"))
    manifest.outputs["mels"] = str(out_dir)
    logger.info(f"Preprocessed {len(processed)} files, skipped {len(skipped)}, failed {len(failures)}")
    return PreprocessResult(index, processed, skipped, failures, manifest.finish(manifest_path))


def cmd_train(
    index_path: Optional[Union[str, Path]] = None,
    out_dir: Optional[Union[str, Path]] = None,
    config: Optional[ExperimentConfig] = None,
) -> TrainingResult:
    config = config or ExperimentConfig()
    index_path = Path(index_path) if index_path else default_index_path()
    out_dir = Path(out_dir) if out_dir else Path(get_config().OUTPUT_DIR) / "train"
    index = CorpusIndex.load(index_path)

    manifest = RunManifest(command="train", config=config.model_dump(mode="json"), seed=config.train.seed)
    manifest.input_hashes["index"] = file_sha256(index_path)
    try:
        result = run_training(index, config.model, config.train, out_dir)
    except DivergenceError as e:
        manifest.failures.append({"stage": "train", "error": str(e)})
        manifest.finish(out_dir / "manifest.json", EXIT_DIVERGENCE)
        raise

    manifest.outputs["checkpoint"] = str(result.checkpoint_path)
    manifest.outputs["loss_history"] = str(result.history_path)
    manifest.stages["train"] = {
        "steps": len(result.history),
        "initial_loss": result.history[0] if result.history else None,
        "final_loss": result.history[-1] if result.history else None,
        "checkpoint_sha256": file_sha256(result.checkpoint_path),
    }
    manifest.finish(out_dir / "manifest.json")
    return result


@dataclass
class ConversionResult:
    mel: np.ndarray
    clip: AudioClip
    wav_path: Path
    mel_path: Path
    manifest_path: Path


def cmd_convert(
    checkpoint: Union[str, Path],
    source_wav: Union[str, Path],
    target_wav: Union[str, Path],
    out_wav: Union[str, Path],
    config: Optional[ExperimentConfig] = None,
) -> ConversionResult:
    """load → trim → mel → convert → Griffin-Lim → WAV; the pre-vocoder mel is saved next to the WAV."""
    config = config or ExperimentConfig()
    out_wav = Path(out_wav)
    model, header = load_checkpoint(checkpoint)
    if model.config.n_mels != config.audio.n_mels:
        raise ConfigMismatchError(f"Checkpoint expects {model.config.n_mels} mel bins, audio config produces {config.audio.n_mels}")

    manifest = RunManifest(
        command="convert",
        config={"audio": config.audio.model_dump(mode="json"), "model": header["model_config"]},
        seed=config.audio.griffin_lim_seed,
    )
    for name, path in (("checkpoint", checkpoint), ("source", source_wav), ("target", target_wav)):
        manifest.input_hashes[name] = file_sha256(path) if Path(path).is_file() else ""

    pipeline = AudioPipeline(config.audio)
    source_clip, source_mel = pipeline.process_file(source_wav)
    target_clip, target_mel = pipeline.process_file(target_wav)
    converted = convert(model, source_mel.values, target_mel.values)

    mel_path = save_mel(MelSpectrogram(converted, log_floor=config.audio.log_floor), out_wav.with_suffix(".npy"), config.audio)
    clip = pipeline.invert(MelSpectrogram(converted, log_floor=config.audio.log_floor))
    write_wav(clip, out_wav)

    manifest.stages = {
        "source": {"seconds": source_clip.duration, "frames": source_mel.frames},
        "target": {"seconds": target_clip.duration, "frames": target_mel.frames},
        "convert": {"frames": int(converted.shape[1]), "style": style_proximity(model, converted, source_mel.values, target_mel.values)},
        "vocoder": {"kind": "griffin-lim", "iterations": config.audio.griffin_lim_iters, "sample_rate": clip.sample_rate},
    }
    manifest.outputs = {"wav": str(out_wav), "mel": str(mel_path)}
    manifest_path = manifest.finish(out_wav.with_suffix(".manifest.json"))
    return ConversionResult(converted, clip, out_wav, mel_path, manifest_path)


def cmd_probe(
    checkpoint: Union[str, Path],
    index_path: Optional[Union[str, Path]] = None,
    out_dir: Optional[Union[str, Path]] = None,
    config: Optional[ExperimentConfig] = None,
):
    """Both probes and the reconstruction error for one trained checkpoint."""
    config = config or ExperimentConfig()
    index_path = Path(index_path) if index_path else default_index_path()
    out_dir = Path(out_dir) if out_dir else Path(get_config().OUTPUT_DIR) / "probe"
    index = CorpusIndex.load(index_path)

    manifest = RunManifest(command="probe", config={"probe": config.probe.model_dump(mode="json")}, seed=config.probe.seed)
    manifest.input_hashes = {"checkpoint": file_sha256(checkpoint), "index": file_sha256(index_path)}
    report = evaluate_model(checkpoint, index, config.probe, seed=config.probe.seed)
    paths = write_reports([report], out_dir, "probe")
    manifest.outputs = {name: str(path) for name, path in paths.items()}
    manifest.finish(out_dir / "manifest.json")
    return report


def _load_index_for(index_path: Optional[Union[str, Path]]) -> Tuple[CorpusIndex, Path]:
    index_path = Path(index_path) if index_path else default_index_path()
    return CorpusIndex.load(index_path), index_path


def cmd_sweep(
    index_path: Optional[Union[str, Path]] = None,
    out_dir: Optional[Union[str, Path]] = None,
    config: Optional[ExperimentConfig] = None,
    activations: Optional[Sequence[str]] = None,
    bottlenecks: Optional[Sequence[int]] = None,
    seeds: Sequence[int] = (0,),
    jobs: int = 1,
):
    config = config or ExperimentConfig()
    out_dir = Path(out_dir) if out_dir else Path(get_config().OUTPUT_DIR) / "sweep"
    index, index_path = _load_index_for(index_path)
    grid = SweepGrid(
        activations=[ActivationSpec.parse(a) for a in (activations or ["none", "sigmoid:0.1"])],
        bottlenecks=list(bottlenecks or DEFAULT_BOTTLENECKS),
    )

    manifest = RunManifest(
        command="sweep",
        config={**config.model_dump(mode="json"), "grid": grid.model_dump(mode="json"), "seeds": list(seeds), "jobs": jobs},
        seed=seeds[0] if seeds else None,
    )
    manifest.input_hashes["index"] = file_sha256(index_path)
    reports = run_sweep(grid, index, out_dir, config.model, config.train, config.probe, seeds=seeds, jobs=jobs)
    manifest.failures = [{"point": f"{r.activation}:{r.alpha}/{r.bottleneck}/seed{r.seed}", "error": r.error or ""} for r in reports if r.status != "ok"]
    manifest.outputs = {"csv": str(out_dir / "sweep.csv"), "json": str(out_dir / "sweep.json"), "plot": str(out_dir / "sweep.png")}
    manifest.finish(out_dir / "manifest.json")
    return reports


def cmd_compare(
    index_path: Optional[Union[str, Path]] = None,
    out_dir: Optional[Union[str, Path]] = None,
    config: Optional[ExperimentConfig] = None,
    seeds: Sequence[int] = (0,),
    jobs: int = 1,
) -> pd.DataFrame:
    config = config or ExperimentConfig()
    out_dir = Path(out_dir) if out_dir else Path(get_config().OUTPUT_DIR) / "compare"
    index, index_path = _load_index_for(index_path)

    manifest = RunManifest(command="compare", config={**config.model_dump(mode="json"), "seeds": list(seeds)}, seed=seeds[0] if seeds else None)
    manifest.input_hashes["index"] = file_sha256(index_path)
    table = compare_encoder_variants(index, out_dir, config.model, config.train, config.probe, seeds=seeds, jobs=jobs)
    manifest.outputs = {"csv": str(out_dir / "compare.csv"), "json": str(out_dir / "compare.json")}
    manifest.finish(out_dir / "manifest.json")
    return table
