"""Fine-tuning loop: Adam optimization of the multi-task model with
warmup gating, per-epoch curve logging, and best-model selection on the
validation combined loss.

Everything is deterministic for a fixed (config, data, seed): parameter
initialization is seed-derived per tensor, epoch shuffles come from a
per-epoch seed stream (so checkpoint resume replays the exact same
order), and all arithmetic is single-threaded float64.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .corpus import RawAudio, SpeakerRecord, Utterance
from .model.ctc import min_alignment_frames
from .model.network import MTLModel, save_checkpoint, load_checkpoint

SHUFFLE_TAG = 0x5E7C


class TrainerError(Exception):
    """Unusable training inputs or a diverged run."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings (defaults mirror the fine-tuning recipe)."""

    lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 100
    warmup_epochs: int = 20
    alpha: float = 0.1
    seed: int = 0
    clip_norm: float = 5.0

    def __post_init__(self):
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise TrainerError("need 0 <= warmup_epochs <= epochs")
        if self.batch_size < 1:
            raise TrainerError("batch_size must be >= 1")
        if self.lr <= 0:
            raise TrainerError("lr must be > 0")
        if self.alpha < 0:
            raise TrainerError("alpha must be >= 0")


@dataclass(frozen=True)
class AdamState:
    """First/second moment estimates and the step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            step=0,
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; pure (returns new params/state)."""
    t = state.step + 1
    bc1 = 1.0 - config.beta1**t
    bc2 = 1.0 - config.beta2**t
    new_params, new_m, new_v = {}, {}, {}
    for key, p in params.items():
        g = grads[key]
        if not np.all(np.isfinite(g)):
            raise TrainerError(f"non-finite gradient in parameter {key!r}")
        m = config.beta1 * state.m[key] + (1.0 - config.beta1) * g
        v = config.beta2 * state.v[key] + (1.0 - config.beta2) * g * g
        update = config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        new_params[key] = p - update
        new_m[key] = m
        new_v[key] = v
    return new_params, AdamState(m=new_m, v=new_v, step=t)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / total
        return {k: g * scale for k, g in grads.items()}
    return grads


@dataclass(frozen=True)
class TrainingExample:
    utterance_id: str
    audio: RawAudio
    label: int
    transcript: tuple[int, ...]


def examples_from_corpus(
    roster: list[SpeakerRecord], utterances: list[Utterance]
) -> list[TrainingExample]:
    """Pair each utterance with its speaker's severity label."""
    labels = {r.speaker_id: r.severity for r in roster}
    return [
        TrainingExample(
            utterance_id=u.utterance_id,
            audio=u.audio,
            label=labels[u.speaker_id],
            transcript=tuple(u.transcript),
        )
        for u in utterances
    ]


@dataclass(frozen=True)
class CurveRow:
    epoch: int
    train_ce: float
    train_ctc: float
    train_combined: float
    valid_ce: float
    valid_ctc: float
    valid_combined: float
    wall_time: float


@dataclass
class TrainingCurves:
    rows: list[CurveRow] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def __len__(self) -> int:
        return len(self.rows)


CURVE_FIELDS = (
    "epoch",
    "train_ce",
    "train_ctc",
    "train_combined",
    "valid_ce",
    "valid_ctc",
    "valid_combined",
    "wall_time",
)


def write_curves(path, curves: TrainingCurves) -> None:
    with open(path, "w") as fh:
        fh.write("\t".join(CURVE_FIELDS) + "\n")
        for row in curves.rows:
            cells = [str(row.epoch)] + [f"{getattr(row, f):.12g}" for f in CURVE_FIELDS[1:]]
            fh.write("\t".join(cells) + "\n")


def read_curves(path) -> TrainingCurves:
    curves = TrainingCurves()
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != CURVE_FIELDS:
            raise TrainerError(f"{path}: bad curves header")
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            curves.rows.append(
                CurveRow(int(parts[0]), *[float(x) for x in parts[1:]])
            )
    return curves


@dataclass
class Checkpoint:
    """Parameters plus optimizer state at the end of one epoch."""

    epoch: int
    params: dict[str, np.ndarray]
    adam_state: AdamState
    valid_combined: float


def _snapshot(model: MTLModel, state: AdamState, epoch: int, valid_combined: float) -> Checkpoint:
    return Checkpoint(
        epoch=epoch,
        params={k: v.copy() for k, v in model.parameters().items()},
        adam_state=AdamState(
            m={k: v.copy() for k, v in state.m.items()},
            v={k: v.copy() for k, v in state.v.items()},
            step=state.step,
        ),
        valid_combined=valid_combined,
    )


def eligible_epochs(num_epochs: int, warmup_epochs: int) -> list[int]:
    """Epoch indices whose combined loss is comparable (past the warmup)."""
    return [e for e in range(num_epochs) if e >= warmup_epochs]


def best_epoch(valid_combined, warmup_epochs: int) -> int:
    """Argmin of the validation combined loss over post-warmup epochs;
    ties resolve to the earliest epoch."""
    eligible = eligible_epochs(len(valid_combined), warmup_epochs)
    if not eligible:
        raise TrainerError("no epoch is eligible for best-model selection")
    return min(eligible, key=lambda e: (valid_combined[e], e))


def select_best(curves: TrainingCurves, checkpoints: dict[int, Checkpoint], warmup_epochs: int) -> Checkpoint:
    """Pick the best checkpoint by validation combined loss (post-warmup)."""
    epoch = best_epoch(curves.column("valid_combined"), warmup_epochs)
    if epoch not in checkpoints:
        raise TrainerError(f"no checkpoint retained for best epoch {epoch}")
    return checkpoints[epoch]


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, SHUFFLE_TAG, epoch]))


def _alignable(example: TrainingExample, model: MTLModel) -> bool:
    if not model.with_ctc_head:
        return True
    frames = -(-example.audio.samples.size // model.encoder_config.downsampling)
    return frames >= min_alignment_frames(example.transcript)


def _evaluate_losses(model: MTLModel, examples: list[TrainingExample]) -> tuple[float, float]:
    ce_sum = ctc_sum = 0.0
    for ex in examples:
        ce, ctc = model.utterance_losses(ex.audio, ex.label, ex.transcript)
        ce_sum += ce
        ctc_sum += ctc
    n = len(examples)
    return ce_sum / n, ctc_sum / n


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    curves: TrainingCurves
    skipped_unalignable: int


def train(
    model: MTLModel,
    train_set: list[TrainingExample],
    valid_set: list[TrainingExample],
    config: TrainConfig,
    resume: Checkpoint | None = None,
    log=None,
) -> TrainResult:
    """Run the full fine-tuning loop.

    Per epoch: seed-derived shuffle, batched forward/backward with the
    warmup gate, global-norm gradient clipping, one Adam step per batch,
    then a frozen-parameter validation pass.  The best checkpoint is the
    argmin of validation combined loss over post-warmup epochs (earliest
    on ties); with warmup_epochs == epochs the final epoch is kept.
    """
    if not train_set or not valid_set:
        raise TrainerError("train and valid partitions must be non-empty")

    usable = [ex for ex in train_set if _alignable(ex, model)]
    skipped = len(train_set) - len(usable)
    if not usable:
        raise TrainerError("every training utterance was skipped as CTC-unalignable")
    valid_usable = [ex for ex in valid_set if _alignable(ex, model)]
    if not valid_usable:
        raise TrainerError("every validation utterance was skipped as CTC-unalignable")
    skipped += len(valid_set) - len(valid_usable)

    if resume is not None:
        model.set_parameters(resume.params)
        state = resume.adam_state
        start_epoch = resume.epoch + 1
    else:
        state = AdamState.zeros_like(model.parameters())
        start_epoch = 0

    curves = TrainingCurves()
    best: Checkpoint | None = None
    final: Checkpoint | None = None

    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        warm = epoch < config.warmup_epochs
        order = _epoch_rng(config.seed, epoch).permutation(len(usable))
        ce_sum = ctc_sum = 0.0
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo : lo + config.batch_size]
            b = len(batch)
            ce_scale = 0.0 if warm else 1.0 / b
            ctc_scale = config.alpha / b if model.with_ctc_head else 0.0
            model.zero_grad()
            for i in batch:
                ex = usable[i]
                ce, ctc = model.accumulate_gradients(ex.audio, ex.label, ex.transcript, ce_scale, ctc_scale)
                ce_sum += ce
                ctc_sum += ctc
            grads = model.gradients()
            for key, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise TrainerError(
                        f"epoch {epoch}: non-finite gradient in {key!r} "
                        f"(batch starting at shuffled index {lo}); aborting epoch"
                    )
            grads = clip_gradients(grads, config.clip_norm)
            params, state = adam_step(model.parameters(), grads, state, config)
            model.set_parameters(params)

        train_ce = ce_sum / len(usable)
        train_ctc = ctc_sum / len(usable)
        valid_ce, valid_ctc = _evaluate_losses(model, valid_usable)
        train_combined = config.alpha * train_ctc if warm else train_ce + config.alpha * train_ctc
        valid_combined = config.alpha * valid_ctc if warm else valid_ce + config.alpha * valid_ctc
        wall = time.perf_counter() - t0
        curves.rows.append(
            CurveRow(epoch, train_ce, train_ctc, train_combined, valid_ce, valid_ctc, valid_combined, wall)
        )
        if log is not None:
            log(
                f"epoch {epoch:3d}  train ce {train_ce:.4f} ctc {train_ctc:.4f}  "
                f"valid ce {valid_ce:.4f} ctc {valid_ctc:.4f} L {valid_combined:.4f}"
                + ("  [warmup]" if warm else "")
            )

        final = _snapshot(model, state, epoch, valid_combined)
        if not warm and (best is None or valid_combined < best.valid_combined):
            best = final

    if final is None:
        raise TrainerError("no epochs were run")
    if best is None:
        best = final  # degenerate warmup (warmup_epochs == epochs)
    return TrainResult(best=best, final=final, curves=curves, skipped_unalignable=skipped)


# ---- trainer checkpoints on disk ----------------------------------------------


def save_trainer_checkpoint(path, model: MTLModel, checkpoint: Checkpoint, config: TrainConfig) -> None:
    """Persist a Checkpoint (parameters + optimizer state) for resume."""
    template = MTLModel(model.encoder_config, model.vocabulary, with_ctc_head=model.with_ctc_head)
    template.set_parameters(checkpoint.params)
    extra_tensors = {}
    for key, tensor in checkpoint.adam_state.m.items():
        extra_tensors[f"adam_m.{key}"] = tensor
    for key, tensor in checkpoint.adam_state.v.items():
        extra_tensors[f"adam_v.{key}"] = tensor
    save_checkpoint(
        path,
        template,
        alpha=config.alpha,
        warmup_epochs=config.warmup_epochs,
        extra={
            "epoch": checkpoint.epoch,
            "valid_combined": checkpoint.valid_combined,
            "adam_step": checkpoint.adam_state.step,
            "train_config": {
                "lr": config.lr,
                "beta1": config.beta1,
                "beta2": config.beta2,
                "eps": config.eps,
                "batch_size": config.batch_size,
                "epochs": config.epochs,
                "warmup_epochs": config.warmup_epochs,
                "alpha": config.alpha,
                "seed": config.seed,
                "clip_norm": config.clip_norm,
            },
        },
        extra_tensors=extra_tensors,
    )


def load_trainer_checkpoint(path) -> tuple[MTLModel, Checkpoint, TrainConfig]:
    """Rebuild (model, Checkpoint, TrainConfig) from a trainer checkpoint."""
    model, meta, extra_tensors = load_checkpoint(path)
    extra = meta["extra"]
    params = model.parameters()
    moments1 = {k[len("adam_m."):]: t for k, t in extra_tensors.items() if k.startswith("adam_m.")}
    moments2 = {k[len("adam_v."):]: t for k, t in extra_tensors.items() if k.startswith("adam_v.")}
    if set(moments1) != set(params) or set(moments2) != set(params):
        raise TrainerError(f"{path}: optimizer state does not match parameters")
    state = AdamState(m=moments1, v=moments2, step=int(extra["adam_step"]))
    checkpoint = Checkpoint(
        epoch=int(extra["epoch"]),
        params={k: p.copy() for k, p in params.items()},
        adam_state=state,
        valid_combined=float(extra["valid_combined"]),
    )
    config = TrainConfig(**extra["train_config"])
    return model, checkpoint, config
