"""
LEGO - codebook-guided self-supervised pretraining for scene-text images.

A frozen text-knowledge codebook (T-VQVAE) supplies discrete character
tokens that steer three pretext tasks on a shared ViT encoder:
selective individual discrimination, masked image modeling and a
reorder-the-pieces ranking task. The pretrained encoder is then evaluated
by CTC recognition and super-resolution.

Main functionality:
- Synthetic corpus rendering and augmentation
- T-VQVAE training and the frozen codebook file
- Pretext losses and the joint pretraining loop with checkpoints
- Downstream probing, fine-tuning and evaluation reports

Example usage:
    from lego import TextKnowledgeCodebook, PretrainConfig, run_pretraining

    codebook = TextKnowledgeCodebook.load("runs/codebook.tkcb")
    state = run_pretraining(PretrainConfig(), samples, codebook, "runs/pt")
"""

__version__ = "0.1.0"

from .codebook import TextKnowledgeCodebook, TokenCache, TokenSequence
from .config import Config, get_config, reload_config
from .corpus import (
    AugmentationPolicy,
    Charset,
    TextSample,
    build_corpus,
    load_corpus,
)
from .downstream import (
    DownstreamConfig,
    EvalReport,
    finetune,
    probe_train,
    sr_finetune,
)
from .encoder import ViTEncoder
from .errors import (
    ConfigurationError,
    DivergenceError,
    IntegrityError,
    LegoError,
    ValidationError,
)
from .trainer import PretrainConfig, load_checkpoint, run_pretraining
from .tvqvae import TvqvaeConfig, TvqvaeModel, load_tvqvae, train_tvqvae

__all__ = [
    "AugmentationPolicy",
    "Charset",
    "Config",
    "ConfigurationError",
    "DivergenceError",
    "DownstreamConfig",
    "EvalReport",
    "IntegrityError",
    "LegoError",
    "PretrainConfig",
    "TextKnowledgeCodebook",
    "TextSample",
    "TokenCache",
    "TokenSequence",
    "TvqvaeConfig",
    "TvqvaeModel",
    "ValidationError",
    "ViTEncoder",
    "build_corpus",
    "finetune",
    "get_config",
    "load_checkpoint",
    "load_corpus",
    "load_tvqvae",
    "probe_train",
    "reload_config",
    "run_pretraining",
    "sr_finetune",
    "train_tvqvae",
]
