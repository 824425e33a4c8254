"""Evaluation: confusion matrix, macro-averaged metrics, latent-table
export, cluster silhouettes, and training-run comparison.

Macro conventions (documented because they vary between toolkits):
classes absent from the ground truth are excluded from macro averages;
classes never predicted get precision 0.  Percentages render with two
decimals.  Silhouettes use Euclidean distance; points in singleton
clusters score 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import NUM_SEVERITY_CLASSES
from .corpus import SpeakerRecord, Utterance
from .model.network import MTLModel, mean_pool
from .trainer import TrainingCurves


class EvaluationError(Exception):
    """Invalid evaluation input."""


# ---- confusion matrix and macro metrics ----------------------------------------


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts[true, predicted] over the 5 severity classes."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "counts", counts)
        if counts.shape != (NUM_SEVERITY_CLASSES, NUM_SEVERITY_CLASSES):
            raise EvaluationError("confusion matrix must be 5x5")
        if np.any(counts < 0):
            raise EvaluationError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(y_true, y_pred) -> ConfusionMatrix:
    """Exact counts; labels must be in 0..4 and sequences equal length."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.size < 1:
        raise EvaluationError("need equal-length non-empty label sequences")
    for name, arr in (("true", y_true), ("predicted", y_pred)):
        if arr.min() < 0 or arr.max() >= NUM_SEVERITY_CLASSES:
            raise EvaluationError(f"{name} label out of range 0..4")
    counts = np.zeros((NUM_SEVERITY_CLASSES, NUM_SEVERITY_CLASSES), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts=counts)


@dataclass(frozen=True)
class MetricsReport:
    """Headline metrics as percentages plus per-class detail."""

    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: dict[int, dict[str, float]]
    matrix: ConfusionMatrix

    def rendered(self) -> str:
        lines = [
            f"accuracy:  {self.accuracy:.2f}",
            f"precision: {self.macro_precision:.2f} (macro)",
            f"recall:    {self.macro_recall:.2f} (macro)",
            f"f1:        {self.macro_f1:.2f} (macro)",
            "",
            "class  precision  recall      f1",
        ]
        for label in sorted(self.per_class):
            row = self.per_class[label]
            lines.append(
                f"{label:5d}  {row['precision']:9.2f}  {row['recall']:6.2f}  {row['f1']:6.2f}"
            )
        lines.append("")
        lines.append("confusion (rows = true, cols = predicted):")
        for row in self.matrix.counts:
            lines.append("  " + " ".join(f"{c:5d}" for c in row))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        payload = {
            "accuracy": round(self.accuracy, 2),
            "macro_precision": round(self.macro_precision, 2),
            "macro_recall": round(self.macro_recall, 2),
            "macro_f1": round(self.macro_f1, 2),
            "per_class": {
                str(k): {m: round(x, 2) for m, x in v.items()} for k, v in self.per_class.items()
            },
            "confusion": self.matrix.counts.tolist(),
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def macro_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy plus macro precision/recall/F1 from the raw counts.

    Per class: precision = diag/colsum (0 when never predicted), recall =
    diag/rowsum, F1 their harmonic mean.  Classes with an empty row
    (absent from the truth) are excluded from the macro averages.
    """
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise EvaluationError("empty confusion matrix")
    diag = np.diag(counts)
    colsum = counts.sum(axis=0)
    rowsum = counts.sum(axis=1)

    per_class = {}
    precisions, recalls, f1s = [], [], []
    for k in range(NUM_SEVERITY_CLASSES):
        if rowsum[k] == 0:
            continue
        precision = diag[k] / colsum[k] if colsum[k] > 0 else 0.0
        recall = diag[k] / rowsum[k]
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
        per_class[k] = {
            "precision": 100.0 * precision,
            "recall": 100.0 * recall,
            "f1": 100.0 * f1,
        }
        precisions.append(precision)
        recalls.append(recall)
        f1s.append(f1)

    return MetricsReport(
        accuracy=100.0 * float(diag.sum() / total),
        macro_precision=100.0 * float(np.mean(precisions)),
        macro_recall=100.0 * float(np.mean(recalls)),
        macro_f1=100.0 * float(np.mean(f1s)),
        per_class=per_class,
        matrix=cm,
    )


# ---- latent export -------------------------------------------------------------


@dataclass
class LatentTable:
    """One row per utterance: id, severity, text_id, partition, pooled vector."""

    utterance_ids: list[str]
    severities: np.ndarray
    text_ids: np.ndarray
    partitions: list[str]
    vectors: np.ndarray

    def __len__(self) -> int:
        return len(self.utterance_ids)


def export_latents(
    model: MTLModel,
    roster: list[SpeakerRecord],
    utterances: list[Utterance],
    partition_of: dict[str, str],
) -> LatentTable:
    """Mean-pooled latent vector per utterance (pure in model and data)."""
    labels = {r.speaker_id: r.severity for r in roster}
    ids, sev, txt, parts, vecs = [], [], [], [], []
    for utt in utterances:
        latent = model.encode(utt.audio)
        vecs.append(mean_pool(latent))
        ids.append(utt.utterance_id)
        sev.append(labels[utt.speaker_id])
        txt.append(utt.text_id)
        parts.append(partition_of.get(utt.speaker_id, "unsplit"))
    return LatentTable(
        utterance_ids=ids,
        severities=np.array(sev, dtype=np.int64),
        text_ids=np.array(txt, dtype=np.int64),
        partitions=parts,
        vectors=np.stack(vecs),
    )


def write_latent_table(path, table: LatentTable) -> None:
    dim = table.vectors.shape[1]
    with open(path, "w") as fh:
        header = ["utterance_id", "severity", "text_id", "partition"] + [f"h{L:03d}" for L in range(dim)]
        fh.write("\t".join(header) + "\n")
        for i in range(len(table)):
            cells = [
                table.utterance_ids[i],
                str(int(table.severities[i])),
                str(int(table.text_ids[i])),
                table.partitions[i],
            ] + [f"{x:.12g}" for x in table.vectors[i]]
            fh.write("\t".join(cells) + "\n")


def read_latent_table(path) -> LatentTable:
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[:4] != ["utterance_id", "severity", "text_id", "partition"]:
            raise EvaluationError(f"{path}: bad latent table header")
        ids, sev, txt, parts, vecs = [], [], [], [], []
        for line in fh:
            cells = line.rstrip("\n").split("\t")
            ids.append(cells[0])
            sev.append(int(cells[1]))
            txt.append(int(cells[2]))
            parts.append(cells[3])
            vecs.append([float(x) for x in cells[4:]])
    return LatentTable(
        utterance_ids=ids,
        severities=np.array(sev, dtype=np.int64),
        text_ids=np.array(txt, dtype=np.int64),
        partitions=parts,
        vectors=np.array(vecs, dtype=np.float64),
    )


# ---- silhouette ----------------------------------------------------------------


@dataclass(frozen=True)
class SilhouetteReport:
    labeling: str
    mean: float
    per_cluster: dict[int, float]


def silhouette(vectors: np.ndarray, labels, labeling: str = "labels") -> SilhouetteReport:
    """Standard Euclidean silhouette.

    Points in singleton clusters score 0, as do points whose cohesion and
    separation are both 0 (coincident points).
    """
    X = np.asarray(vectors, dtype=np.float64)
    y = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise EvaluationError("vectors and labels must have matching first dimension")
    unique = np.unique(y)
    if unique.size < 2:
        raise EvaluationError("silhouette needs at least 2 distinct labels")

    diff = X[:, None, :] - X[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    n = X.shape[0]
    scores = np.zeros(n)
    for i in range(n):
        same = y == y[i]
        n_same = int(same.sum())
        if n_same <= 1:
            scores[i] = 0.0  # singleton convention
            continue
        a = dist[i, same].sum() / (n_same - 1)
        b = np.inf
        for other in unique:
            if other == y[i]:
                continue
            mask = y == other
            b = min(b, dist[i, mask].mean())
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom

    per_cluster = {int(k): float(scores[y == k].mean()) for k in unique}
    return SilhouetteReport(labeling=labeling, mean=float(scores.mean()), per_cluster=per_cluster)


# ---- run comparison ------------------------------------------------------------


@dataclass
class RunComparison:
    epochs: np.ndarray
    deltas: dict[str, np.ndarray]
    argmin_valid_ce: tuple[int, int]

    def rendered_rows(self, name_a: str = "a", name_b: str = "b"):
        fields = ("valid_ce", "valid_ctc", "valid_combined", "train_ce", "train_ctc", "train_combined")
        yield ["epoch"] + [f"delta_{f}" for f in fields]
        for i, epoch in enumerate(self.epochs):
            yield [str(int(epoch))] + [f"{self.deltas[f][i]:.12g}" for f in fields]


def compare_runs(curves_a: TrainingCurves, curves_b: TrainingCurves) -> RunComparison:
    """Per-epoch deltas (b minus a) plus each run's argmin-validation-CE
    epoch; supports single-task-vs-multi-task and warmup sweeps."""
    if len(curves_a) != len(curves_b):
        raise EvaluationError(
            f"curve length mismatch: {len(curves_a)} vs {len(curves_b)} epochs"
        )
    fields = ("valid_ce", "valid_ctc", "valid_combined", "train_ce", "train_ctc", "train_combined")
    deltas = {f: curves_b.column(f) - curves_a.column(f) for f in fields}
    argmin_a = int(np.argmin(curves_a.column("valid_ce")))
    argmin_b = int(np.argmin(curves_b.column("valid_ce")))
    return RunComparison(
        epochs=curves_a.column("epoch"),
        deltas=deltas,
        argmin_valid_ce=(argmin_a, argmin_b),
    )


def write_comparison(path, comparison: RunComparison, name_a: str = "a", name_b: str = "b") -> None:
    with open(path, "w") as fh:
        fh.write(f"# argmin_valid_ce\t{name_a}={comparison.argmin_valid_ce[0]}\t{name_b}={comparison.argmin_valid_ce[1]}\n")
        for row in comparison.rendered_rows(name_a, name_b):
            fh.write("\t".join(row) + "\n")
