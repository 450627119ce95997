from .corpus import (
    Batch,
    BatchStream,
    CorpusConfig,
    CorpusError,
    CorpusIndex,
    MelStore,
    TrainingError,
    batch_rng,
    build_corpus_index,
    next_batch,
)
from .trainer import (
    DivergenceError,
    TrainConfig,
    TrainingResult,
    build_optimizer,
    run_training,
    smooth_losses,
    train_step,
)
