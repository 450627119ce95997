from .classifier import DegenerateProbeError, ProbeConfig, ProbeError, ProbeResult, SpeakerProbe, fit_probe
from .evaluation import (
    ProbeReport,
    SweepGrid,
    compare_encoder_variants,
    evaluate_model,
    reconstruction_error,
    run_sweep,
    train_content_probe,
    train_style_probe,
)
