from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from threading import Lock
from typing import Dict, Iterator, List, Optional, Sequence, Union

import numpy as np
import torch
from pydantic import BaseModel, Field, model_validator

from app.services.audio.pipeline import MelSegment, MelSpectrogram, load_mel, sample_segment
from utils.logger import logger


class TrainingError(Exception):
    """Custom exception for training errors"""
    pass


class CorpusError(TrainingError):
    """Raised when a corpus directory cannot support training or evaluation"""
    pass


class CorpusConfig(BaseModel):
    train_fraction: float = Field(default=0.8, gt=0.0, lt=1.0, description="Share of speakers used for training")
    max_utterances: int = Field(default=200, ge=1, description="Per-speaker utterance cap")
    seed: int = Field(default=0, description="Seed for the speaker split and utterance cap")
    pattern: str = Field(default="*.npy", description="Glob for utterance files inside a speaker directory")


class CorpusIndex(BaseModel):
    """Speakers, their utterance files (relative to root) and the train/eval speaker split."""

    root: str
    speakers: List[str]
    utterances: Dict[str, List[str]]
    train_speakers: List[str]
    eval_speakers: List[str]
    seed: int = 0

    @model_validator(mode="after")
    def _check_split(self):
        overlap = set(self.train_speakers) & set(self.eval_speakers)
        if overlap:
            raise ValueError(f"Train and eval speakers overlap: {sorted(overlap)}")
        return self

    def path_of(self, ref: str) -> Path:
        return Path(self.root) / ref

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2))
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CorpusIndex":
        path = Path(path)
        if not path.is_file():
            raise CorpusError(f"Corpus index not found: {path}")
        return cls.model_validate_json(path.read_text())


def build_corpus_index(
    root: Union[str, Path],
    train_fraction: float = 0.8,
    seed: int = 0,
    max_utterances: int = 200,
    pattern: str = "*.npy",
) -> CorpusIndex:
    """Scan `<root>/<speaker_id>/<utterance>` and split speakers into disjoint train/eval sets.

    Raises:
        CorpusError: fewer than two speakers, or an invalid train_fraction
    """
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"Corpus directory not found: {root}")
    if not 0.0 < train_fraction < 1.0:
        raise CorpusError(f"train_fraction must be in (0, 1), got {train_fraction}")

    rng = np.random.default_rng(seed)
    utterances: Dict[str, List[str]] = {}
    for speaker_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(speaker_dir.glob(pattern))
        if not files:
            continue
        if len(files) > max_utterances:
            keep = np.sort(rng.choice(len(files), size=max_utterances, replace=False))
            files = [files[i] for i in keep]
        utterances[speaker_dir.name] = [f.relative_to(root).as_posix() for f in files]

    speakers = sorted(utterances)
    if len(speakers) < 2:
        raise CorpusError(f"Need at least 2 speakers under {root}, found {len(speakers)}")

    n_train = min(max(int(round(train_fraction * len(speakers))), 1), len(speakers) - 1)
    order = rng.permutation(len(speakers))
    train = sorted(speakers[i] for i in order[:n_train])
    held_out = sorted(speakers[i] for i in order[n_train:])
    logger.info(f"Indexed {len(speakers)} speakers under {root}: {len(train)} train / {len(held_out)} eval")
    return CorpusIndex(
        root=str(root),
        speakers=speakers,
        utterances=utterances,
        train_speakers=train,
        eval_speakers=held_out,
        seed=seed,
    )


class MelStore:
    """Lazy, cached access to the mel files of a corpus index."""

    def __init__(self, index: CorpusIndex):
        self.index = index
        self._cache: Dict[str, MelSpectrogram] = {}
        self._lock = Lock()

    def get(self, ref: str) -> MelSpectrogram:
        with self._lock:
            mel = self._cache.get(ref)
        if mel is None:
            mel = load_mel(self.index.path_of(ref))
            with self._lock:
                self._cache.setdefault(ref, mel)
        return mel


@dataclass
class Batch:
    mels: torch.Tensor
    speakers: List[str]
    segments: List[MelSegment]

    def __len__(self) -> int:
        return len(self.speakers)


def next_batch(
    index: CorpusIndex,
    rng: np.random.Generator,
    batch_size: int = 32,
    segment_length: int = 128,
    store: Optional[MelStore] = None,
    speakers: Optional[Sequence[str]] = None,
) -> Batch:
    """Sample a speaker uniformly, then one of its utterances uniformly, then a random crop."""
    store = store or MelStore(index)
    speakers = list(speakers if speakers is not None else index.train_speakers)
    if not speakers:
        raise CorpusError("Cannot sample a batch from an empty speaker list")

    chosen, segments = [], []
    for _ in range(batch_size):
        speaker = speakers[int(rng.integers(0, len(speakers)))]
        refs = index.utterances[speaker]
        ref = refs[int(rng.integers(0, len(refs)))]
        segment = sample_segment(store.get(ref), rng, segment_length)
        segment.metadata["ref"] = ref
        chosen.append(speaker)
        segments.append(segment)

    mels = torch.from_numpy(np.stack([s.values for s in segments]))
    return Batch(mels=mels, speakers=chosen, segments=segments)


def batch_rng(seed: int, step: int) -> np.random.Generator:
    """Per-step generator, so batch contents never depend on worker scheduling."""
    return np.random.default_rng([seed, step])


class BatchStream:
    """Deterministic sequence of training batches with optional bounded thread prefetch."""

    def __init__(
        self,
        index: CorpusIndex,
        steps: int,
        seed: int,
        batch_size: int = 32,
        segment_length: int = 128,
        store: Optional[MelStore] = None,
        speakers: Optional[Sequence[str]] = None,
        workers: int = 0,
        prefetch: int = 4,
    ):
        self.index = index
        self.steps = steps
        self.seed = seed
        self.batch_size = batch_size
        self.segment_length = segment_length
        self.store = store or MelStore(index)
        self.speakers = list(speakers if speakers is not None else index.train_speakers)
        self.workers = workers
        self.prefetch = max(prefetch, 1)

    def __len__(self) -> int:
        return self.steps

    def make(self, step: int) -> Batch:
        return next_batch(
            self.index,
            batch_rng(self.seed, step),
            batch_size=self.batch_size,
            segment_length=self.segment_length,
            store=self.store,
            speakers=self.speakers,
        )

    def __iter__(self) -> Iterator[Batch]:
        if self.workers <= 0:
            for step in range(self.steps):
                yield self.make(step)
            return

        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            pending = deque()
            submitted = 0
            while submitted < min(self.prefetch, self.steps):
                pending.append(executor.submit(self.make, submitted))
                submitted += 1
            while pending:
                batch = pending.popleft().result()
                if submitted < self.steps:
                    pending.append(executor.submit(self.make, submitted))
                    submitted += 1
                yield batch
