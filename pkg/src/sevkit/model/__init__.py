"""Multi-task network: shared encoder, mean-pooled severity head, and
frame-wise CTC head, implemented in float64 numpy with explicit
forward/backward passes so analytic gradients can be verified against
finite differences.
"""

from .encoder import (
    EncoderConfig,
    LatentSequence,
    SubprocessEncoderAdapter,
    ToyEncoder,
    build_encoder,
    encode,
    read_latent_matrix,
    write_latent_matrix,
)
from .ctc import (
    CTCAlignmentError,
    ctc_loss,
    ctc_loss_and_grad_from_logits,
    greedy_decode,
    min_alignment_frames,
)
from .network import (
    CTCHead,
    LossBundle,
    MTLModel,
    ModelError,
    SeverityHead,
    ce_loss,
    combined_loss,
    ctc_frame_distributions,
    load_checkpoint,
    mean_pool,
    save_checkpoint,
    severity_distribution,
    softmax,
)

__all__ = [
    "EncoderConfig",
    "LatentSequence",
    "SubprocessEncoderAdapter",
    "ToyEncoder",
    "build_encoder",
    "encode",
    "read_latent_matrix",
    "write_latent_matrix",
    "CTCAlignmentError",
    "ctc_loss",
    "ctc_loss_and_grad_from_logits",
    "greedy_decode",
    "min_alignment_frames",
    "CTCHead",
    "LossBundle",
    "MTLModel",
    "ModelError",
    "SeverityHead",
    "ce_loss",
    "combined_loss",
    "ctc_frame_distributions",
    "load_checkpoint",
    "mean_pool",
    "save_checkpoint",
    "severity_distribution",
    "softmax",
]
