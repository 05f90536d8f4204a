"""attnmae: masked-modeling pretraining whose input masks are sampled
from the model's own first-layer attention maps.

The package is organized as:

    rng         counter-based deterministic random streams
    autograd    float64 tensors, reverse-mode tape, ascending-order sums
    gradcheck   finite-difference gradient verification
    embedding   byte/scalar token embedding with learned positions
    attention   multi-head self/cross attention and transformer blocks
    masker      attention-guided mask sampling, oracle, random baseline
    model       end-to-end encoder/decoder with masked reconstruction
    trainer     AdamW loop, metrics log, checkpointing, evaluation
    data        synthetic grouped tokens, CSV/byte ingestion, splits
    cli         operator commands (pretrain, finetune, eval, dumps, bench)
"""

from .autograd import Tensor, backward, no_grad, reset_tape
from .masker import MaskSpec, sample_mask, random_mask, apply_mask
from .model import MaskedAutoencoder, ModelConfig
from .rng import Rng
from .trainer import TrainConfig, pretrain_loop, finetune_loop, evaluate

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "no_grad", "reset_tape",
    "MaskSpec", "sample_mask", "random_mask", "apply_mask",
    "MaskedAutoencoder", "ModelConfig",
    "Rng",
    "TrainConfig", "pretrain_loop", "finetune_loop", "evaluate",
    "__version__",
]
