"""avatr: avatar-conditioned transformer speaker extraction.

A self-contained time-domain target-speaker extraction package: a minimal
reverse-mode autodiff engine, the attention blocks and the two extraction
architectures built on it, SNR-controlled mixture simulation with a
synthetic corpus generator, SISDR training/evaluation, a scikit-learn
style estimator, and a CLI (``avatr synth|train|eval|extract|export-avatars``).
"""

from .audio import (
    CorpusManifest,
    Episode,
    MixResult,
    Waveform,
    mix_at_snr,
    read_wav,
    sample_episode,
    synth_corpus_generate,
    write_wav,
)
from .autodiff import Tensor, check_gradients
from .blocks import (
    ConditionalAttentionBlock,
    MultiHeadAttention,
    SelfAttentionBlock,
    attention,
    positional_encoding,
)
from .errors import (
    AvatrError,
    CheckpointError,
    ConfigError,
    DataError,
    NumericalError,
    ShapeError,
)
from .estimator import AvatrExtractor
from .models import (
    AvatrV1,
    AvatrV2,
    ModelConfig,
    build_model,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    write_checkpoint,
)
from .training import (
    Adam,
    EvalReport,
    PlateauScheduler,
    TrainConfig,
    episodic_loss,
    evaluate,
    run_training,
    sisdr,
    sisdr_loss,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AvatrError",
    "AvatrExtractor",
    "AvatrV1",
    "AvatrV2",
    "CheckpointError",
    "ConditionalAttentionBlock",
    "ConfigError",
    "CorpusManifest",
    "DataError",
    "Episode",
    "EvalReport",
    "MixResult",
    "ModelConfig",
    "MultiHeadAttention",
    "NumericalError",
    "PlateauScheduler",
    "SelfAttentionBlock",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "Waveform",
    "attention",
    "build_model",
    "check_gradients",
    "episodic_loss",
    "evaluate",
    "load_checkpoint",
    "mix_at_snr",
    "positional_encoding",
    "read_checkpoint",
    "read_wav",
    "run_training",
    "sample_episode",
    "save_checkpoint",
    "sisdr",
    "sisdr_loss",
    "synth_corpus_generate",
    "write_checkpoint",
    "write_wav",
]
