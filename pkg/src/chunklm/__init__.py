"""Tokenizer-free byte-level language model with learned hierarchical
chunking: a boundary router over raw UTF-8 bytes, a cross-chunk attention
block, document-level Gaussian latents, and a discretized-logistic
mixture decoder, trained under a sequence-length curriculum.
"""

from .autodiff import Tape, Tensor, backward, gradcheck, primitive_forward
from .byte_frontend import ByteSequence, encode_document
from .config import ModelConfig, RunConfig, load_config
from .model import Model
from .objective import LossWeights

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "gradcheck",
    "primitive_forward",
    "ByteSequence",
    "encode_document",
    "ModelConfig",
    "RunConfig",
    "load_config",
    "Model",
    "LossWeights",
    "__version__",
]
