"""Heads, losses, and the assembled multi-task model.

The severity head maps the mean-pooled latent vector to 5 class logits;
the CTC head maps every latent frame to vocabulary-plus-blank logits.
The combined objective is ce + alpha * ctc, with the cross-entropy term
gated off during the first `warmup_epochs` epochs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import NUM_SEVERITY_CLASSES
from ..corpus import RawAudio
from ..serialize import read_container, write_container
from .ctc import BLANK, ctc_loss_and_grad_from_logits, ctc_loss_from_logits
from .encoder import EncoderConfig, LatentSequence, ToyEncoder, build_encoder
from .layers import Linear


class ModelError(Exception):
    """Shape or argument error in a model operation."""


@dataclass(frozen=True)
class LossBundle:
    """One step/epoch of loss bookkeeping under the warmup gate."""

    ce: float
    ctc: float
    alpha: float
    warmup_epochs: int
    epoch: int
    combined: float


def combined_loss(ce: float, ctc: float, alpha: float, epoch: int, warmup_epochs: int) -> LossBundle:
    """Gate the cross-entropy term off during warmup, then add it back.

    epoch < warmup_epochs: combined = alpha * ctc (the alpha scaling keeps
    the CTC gradient magnitude continuous across the boundary);
    afterwards: combined = ce + alpha * ctc.
    """
    if alpha < 0:
        raise ModelError("alpha must be >= 0")
    if epoch < 0:
        raise ModelError("epoch must be >= 0")
    if epoch < warmup_epochs:
        combined = alpha * ctc
    else:
        combined = ce + alpha * ctc
    return LossBundle(ce=ce, ctc=ctc, alpha=alpha, warmup_epochs=warmup_epochs, epoch=epoch, combined=combined)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def mean_pool(latent: LatentSequence) -> np.ndarray:
    """Average the valid latent rows into one utterance vector."""
    if latent.valid_length < 1:
        raise ModelError("cannot pool an empty latent sequence")
    return latent.H[: latent.valid_length].mean(axis=0)


@dataclass
class SeverityHead:
    """Linear map from the pooled vector to 5 severity logits."""

    weight: np.ndarray  # (5, F)
    bias: np.ndarray  # (5,)

    @classmethod
    def create(cls, feature_dim: int, seed: int) -> "SeverityHead":
        layer = Linear("severity_head", feature_dim, NUM_SEVERITY_CLASSES, seed)
        return cls(weight=layer.weight, bias=layer.bias)

    def logits(self, pooled: np.ndarray) -> np.ndarray:
        if pooled.shape != (self.weight.shape[1],):
            raise ModelError(f"pooled vector of dim {pooled.shape} does not match head dim {self.weight.shape[1]}")
        return self.weight @ pooled + self.bias


@dataclass
class CTCHead:
    """Linear map applied to every latent frame; row 0 is the blank."""

    weight: np.ndarray  # (V + 1, F)
    bias: np.ndarray  # (V + 1,)
    vocabulary: tuple[int, ...]
    blank_index: int = BLANK

    @classmethod
    def create(cls, feature_dim: int, vocabulary, seed: int) -> "CTCHead":
        vocabulary = tuple(vocabulary)
        layer = Linear("ctc_head", feature_dim, len(vocabulary) + 1, seed)
        return cls(weight=layer.weight, bias=layer.bias, vocabulary=vocabulary)

    @property
    def num_symbols(self) -> int:
        return len(self.vocabulary) + 1

    def logits(self, H: np.ndarray) -> np.ndarray:
        if H.shape[1] != self.weight.shape[1]:
            raise ModelError(f"latent dim {H.shape[1]} does not match head dim {self.weight.shape[1]}")
        return H @ self.weight.T + self.bias


def severity_distribution(pooled: np.ndarray, head: SeverityHead) -> np.ndarray:
    """Class probabilities softmax(W h + b); positive, sums to one."""
    return softmax(head.logits(pooled))


def ctc_frame_distributions(latent: LatentSequence, head: CTCHead) -> np.ndarray:
    """Row-stochastic (T', V+1) matrix over the valid frames."""
    logits = head.logits(latent.H[: latent.valid_length])
    return softmax(logits, axis=1)


def ce_loss(logits: np.ndarray, label: int) -> float:
    """Cross entropy -log p[label], evaluated in log space from logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise ModelError(f"label {label} outside 0..{logits.shape[-1] - 1}")
    return float(-log_softmax(logits)[label])


def _ce_grad(logits: np.ndarray, label: int) -> np.ndarray:
    grad = softmax(logits)
    grad[label] -= 1.0
    return grad


class MTLModel:
    """Shared encoder with a severity head and an optional CTC head.

    Owns all trainable parameters (exposed as flat name -> array dicts for
    the optimizer) and implements the per-utterance forward/backward used
    by the trainer.
    """

    def __init__(self, encoder_config: EncoderConfig, vocabulary, with_ctc_head: bool = True):
        self.encoder_config = encoder_config
        self.encoder = build_encoder(encoder_config)
        self.severity = Linear("severity_head", encoder_config.feature_dim, NUM_SEVERITY_CLASSES, encoder_config.seed)
        self.vocabulary = tuple(vocabulary)
        self.with_ctc_head = with_ctc_head
        if with_ctc_head:
            self.ctc = Linear("ctc_head", encoder_config.feature_dim, len(self.vocabulary) + 1, encoder_config.seed)
        else:
            self.ctc = None
        self._heads = [self.severity] + ([self.ctc] if self.ctc is not None else [])
        # CTC head row for each vocabulary token (row 0 is the blank)
        self._token_row = {tok: i + 1 for i, tok in enumerate(self.vocabulary)}

    def _target_rows(self, transcript) -> tuple[int, ...]:
        try:
            return tuple(self._token_row[tok] for tok in transcript)
        except KeyError as exc:
            raise ModelError(f"transcript token {exc.args[0]!r} not in the model vocabulary")

    # ---- parameter plumbing -------------------------------------------------
    def parameters(self) -> dict[str, np.ndarray]:
        out = dict(self.encoder.parameters()) if isinstance(self.encoder, ToyEncoder) else {}
        for head in self._heads:
            out.update(head.parameters())
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out = dict(self.encoder.gradients()) if isinstance(self.encoder, ToyEncoder) else {}
        for head in self._heads:
            out.update(head.gradients())
        return out

    def zero_grad(self):
        if isinstance(self.encoder, ToyEncoder):
            self.encoder.zero_grad()
        for head in self._heads:
            head.zero_grad()

    def set_parameters(self, params: dict[str, np.ndarray]):
        for key, value in params.items():
            if key.startswith("encoder."):
                self.encoder.set_parameter(key, value)
            elif key.startswith("severity_head."):
                self.severity.set_parameter(key, value)
            elif key.startswith("ctc_head."):
                if self.ctc is None:
                    raise ModelError("model has no CTC head")
                self.ctc.set_parameter(key, value)
            else:
                raise ModelError(f"unknown parameter {key!r}")

    @property
    def severity_head(self) -> SeverityHead:
        return SeverityHead(weight=self.severity.weight, bias=self.severity.bias)

    @property
    def ctc_head(self) -> CTCHead:
        if self.ctc is None:
            raise ModelError("model has no CTC head")
        return CTCHead(weight=self.ctc.weight, bias=self.ctc.bias, vocabulary=self.vocabulary)

    # ---- forward paths ------------------------------------------------------
    def encode(self, audio: RawAudio) -> LatentSequence:
        return self.encoder.forward(audio)

    def pooled_vector(self, audio: RawAudio) -> np.ndarray:
        return mean_pool(self.encode(audio))

    def class_probabilities(self, audio: RawAudio) -> np.ndarray:
        return softmax(self.severity.forward(self.pooled_vector(audio)[None, :])[0])

    def predict(self, audio: RawAudio) -> int:
        return int(np.argmax(self.class_probabilities(audio)))

    def utterance_losses(self, audio: RawAudio, label: int, transcript) -> tuple[float, float]:
        """Forward-only (ce, ctc) for one utterance; ctc is 0 without a head."""
        latent = self.encode(audio)
        pooled = mean_pool(latent)
        ce = ce_loss(self.severity_head.logits(pooled), label)
        ctc = 0.0
        if self.ctc is not None:
            logits = self.ctc_head.logits(latent.H[: latent.valid_length])
            ctc = ctc_loss_from_logits(logits, self._target_rows(transcript))
        return ce, ctc

    def accumulate_gradients(
        self,
        audio: RawAudio,
        label: int,
        transcript,
        ce_scale: float,
        ctc_scale: float,
    ) -> tuple[float, float]:
        """Forward + backward for one utterance.

        Adds ce_scale * d(ce) + ctc_scale * d(ctc) into the gradient
        buffers and returns the unscaled (ce, ctc) losses.  A zero scale
        skips that loss's backward entirely, so gated-off heads receive
        exactly zero gradient.
        """
        latent = self.encode(audio)
        t_valid = latent.valid_length
        pooled = mean_pool(latent)

        ce_logits = self.severity.forward(pooled[None, :])[0]
        ce = ce_loss(ce_logits, label)
        ctc = 0.0

        dH = np.zeros_like(latent.H)
        if self.ctc is not None:
            ctc_logits = self.ctc.forward(latent.H[:t_valid])
            ctc, dlogits_ctc = ctc_loss_and_grad_from_logits(ctc_logits, self._target_rows(transcript))
            if ctc_scale != 0.0:
                dH[:t_valid] += self.ctc.backward(ctc_scale * dlogits_ctc)
        if ce_scale != 0.0:
            dpooled = self.severity.backward((ce_scale * _ce_grad(ce_logits, label))[None, :])[0]
            dH[:t_valid] += dpooled[None, :] / t_valid
        wants_backward = ce_scale != 0.0 or (self.ctc is not None and ctc_scale != 0.0)
        if wants_backward and hasattr(self.encoder, "backward"):
            self.encoder.backward(dH)  # adapter encoders are frozen
        return ce, ctc


# ---- checkpoint container ----------------------------------------------------

CHECKPOINT_KIND = "sevkit-mtl-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: MTLModel, alpha: float, warmup_epochs: int, extra: dict | None = None,
                    extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    """Write the versioned checkpoint: encoder config, parameter tensors,
    vocabulary, loss weighting, plus any trainer bookkeeping."""
    cfg = model.encoder_config
    meta = {
        "kind": CHECKPOINT_KIND,
        "checkpoint_version": CHECKPOINT_VERSION,
        "encoder": {
            "kind": cfg.kind,
            "feature_dim": cfg.feature_dim,
            "downsampling": cfg.downsampling,
            "seed": cfg.seed,
            "num_blocks": cfg.num_blocks,
            "num_heads": cfg.num_heads,
        },
        "vocabulary": list(model.vocabulary),
        "with_ctc_head": model.with_ctc_head,
        "alpha": alpha,
        "warmup_epochs": warmup_epochs,
        "extra": extra or {},
    }
    tensors = dict(model.parameters())
    if extra_tensors:
        for name, tensor in extra_tensors.items():
            tensors[f"extra.{name}"] = tensor
    write_container(path, meta, tensors)


def load_checkpoint(path) -> tuple[MTLModel, dict, dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint; returns (model, meta, extra tensors)."""
    meta, tensors = read_container(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ModelError(f"{path}: not a model checkpoint")
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {meta.get('checkpoint_version')}")
    enc = meta["encoder"]
    config = EncoderConfig(
        kind=enc["kind"],
        feature_dim=enc["feature_dim"],
        downsampling=enc["downsampling"],
        seed=enc["seed"],
        num_blocks=enc["num_blocks"],
        num_heads=enc["num_heads"],
    )
    model = MTLModel(config, meta["vocabulary"], with_ctc_head=meta["with_ctc_head"])
    params = {k: v for k, v in tensors.items() if not k.startswith("extra.")}
    expected = set(model.parameters())
    if set(params) != expected:
        raise ModelError(f"{path}: checkpoint tensors do not match the model's parameters")
    model.set_parameters(params)
    extra_tensors = {k[len("extra."):]: v for k, v in tensors.items() if k.startswith("extra.")}
    return model, meta, extra_tensors
