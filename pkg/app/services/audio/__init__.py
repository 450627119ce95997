from .pipeline import (
    AudioClip,
    AudioConfig,
    AudioDecodeError,
    AudioPipeline,
    AudioPipelineError,
    EmptyInputError,
    InvalidInputError,
    MelSegment,
    MelSpectrogram,
    TooShortError,
    griffin_lim_invert,
    load_and_normalize,
    load_mel,
    mel_spectrogram,
    sample_segment,
    save_mel,
    trim_silence,
    write_wav,
)
