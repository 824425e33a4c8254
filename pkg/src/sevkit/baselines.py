"""Classical classifier baselines over hand-crafted features: RBF SVM,
MLP, and gradient-boosted trees, with validation-set grid search.

The SVM uses one-vs-rest soft-margin RBF machines solved to KKT
tolerance 1e-3; the MLP is a fixed-width-64 fully connected net trained
on cross entropy with early stopping on a validation loss; the boosted
trees use exact greedy splits, 100 rounds, shrinkage 0.3.  Standardizing
always fits on the training partition only.
"""

from __future__ import annotations

import itertools
import pickle
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.multiclass import OneVsRestClassifier
from sklearn.svm import SVC

from . import NUM_SEVERITY_CLASSES
from .features import FeatureVector
from .gbdt import GradientBoostedTrees, fit_gbdt

SVM_KKT_TOL = 1e-3
MLP_WIDTH = 64
MLP_MAX_EPOCHS = 200
MLP_PATIENCE = 10
MLP_BATCH = 32

DECADES = tuple(float(10.0**k) for k in range(-4, 5))
MLP_ACTIVATIONS = ("tanh", "relu", "logistic", "identity")
MLP_OPTIMIZERS = ("adam", "sgd")
MLP_LRS = (1e-4, 1e-3, 1e-2, 1e-1)
GBDT_DEPTHS = (3, 4, 5)

MODEL_FORMAT_VERSION = 1


class BaselineError(Exception):
    """Invalid training input or configuration."""


# ---- standardization -----------------------------------------------------------


@dataclass(frozen=True)
class Scaler:
    """Per-dimension z-score statistics fit on the training partition."""

    mean: np.ndarray
    std: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.size


def _stack(features: list[FeatureVector]) -> np.ndarray:
    if not features:
        raise BaselineError("empty feature list")
    dim = len(features[0].values)
    for f in features:
        if len(f.values) != dim:
            raise BaselineError("inconsistent feature dimensionality")
    return np.stack([f.values for f in features])


def fit_scaler(train_features: list[FeatureVector]) -> Scaler:
    X = _stack(train_features)
    return Scaler(mean=X.mean(axis=0), std=X.std(axis=0))  # population std


def apply_scaler(scaler: Scaler, features: FeatureVector) -> FeatureVector:
    if len(features.values) != scaler.dim:
        raise BaselineError(f"scaler expects dim {scaler.dim}, got {len(features.values)}")
    std = np.where(scaler.std > 0, scaler.std, 1.0)
    values = (features.values - scaler.mean) / std
    values = np.where(scaler.std > 0, values, 0.0)  # constant dims map to 0
    return FeatureVector(values=values, names=features.names, set_id=features.set_id)


def scale_matrix(scaler: Scaler, X: np.ndarray) -> np.ndarray:
    std = np.where(scaler.std > 0, scaler.std, 1.0)
    Z = (X - scaler.mean) / std
    return np.where(scaler.std > 0, Z, 0.0)


# ---- classifier models ---------------------------------------------------------


@dataclass
class ClassifierModel:
    """A fitted classifier: family tag, opaque payload, config snapshot."""

    family: str
    payload: object
    config: dict
    num_features: int

    def predict(self, features) -> int:
        return int(predict(self, features))


def _as_matrix(features) -> np.ndarray:
    if isinstance(features, FeatureVector):
        return features.values[None, :]
    if isinstance(features, list) and features and isinstance(features[0], FeatureVector):
        return _stack(features)
    arr = np.asarray(features, dtype=np.float64)
    return arr[None, :] if arr.ndim == 1 else arr


def train_svm(features, labels, C: float, gamma: float) -> ClassifierModel:
    """One-vs-rest RBF SVM (libsvm soft-margin dual, tolerance 1e-3)."""
    X = _as_matrix(features)
    y = np.asarray(labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise BaselineError("SVM needs at least 2 classes in the training data")
    if C <= 0 or gamma <= 0:
        raise BaselineError("C and gamma must be positive")
    clf = OneVsRestClassifier(SVC(C=C, gamma=gamma, kernel="rbf", tol=SVM_KKT_TOL))
    clf.fit(X, y)
    return ClassifierModel(
        family="svm", payload=clf, config={"C": C, "gamma": gamma}, num_features=X.shape[1]
    )


# ---- fixed-width MLP (numpy, deterministic) ------------------------------------


def _activation(name: str):
    if name == "tanh":
        return np.tanh, lambda a: 1.0 - a * a
    if name == "relu":
        return lambda z: np.maximum(z, 0.0), lambda a: (a > 0).astype(np.float64)
    if name == "logistic":
        return lambda z: 1.0 / (1.0 + np.exp(-z)), lambda a: a * (1.0 - a)
    if name == "identity":
        return lambda z: z, lambda a: np.ones_like(a)
    raise BaselineError(f"unknown activation {name!r}")


@dataclass
class _MLPNet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str

    def forward(self, X: np.ndarray, keep: bool = False):
        act, _ = _activation(self.activation)
        a = X
        acts = [a]
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            a = act(a @ W + b)
            acts.append(a)
        logits = a @ self.weights[-1] + self.biases[-1]
        return (logits, acts) if keep else logits


def _mlp_loss(net: _MLPNet, X: np.ndarray, y: np.ndarray) -> float:
    logits = net.forward(X)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(y)), y].mean())


def train_mlp(
    features,
    labels,
    hidden_layers: int,
    activation: str = "relu",
    optimizer: str = "adam",
    lr: float = 1e-3,
    seed: int = 0,
    eval_set=None,
    max_epochs: int = MLP_MAX_EPOCHS,
) -> ClassifierModel:
    """Fully connected net, width 64 per hidden layer, cross-entropy
    objective; with an eval_set, stops early on its loss (patience 10)."""
    if not 1 <= hidden_layers <= 10:
        raise BaselineError(f"hidden_layers must be in [1, 10], got {hidden_layers}")
    if activation not in MLP_ACTIVATIONS:
        raise BaselineError(f"activation must be one of {MLP_ACTIVATIONS}")
    if optimizer not in MLP_OPTIMIZERS:
        raise BaselineError(f"optimizer must be one of {MLP_OPTIMIZERS}")
    X = _as_matrix(features)
    y = np.asarray(labels, dtype=np.int64)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3170]))
    dims = [X.shape[1]] + [MLP_WIDTH] * hidden_layers + [NUM_SEVERITY_CLASSES]
    net = _MLPNet(
        weights=[rng.normal(0.0, np.sqrt(2.0 / dims[i]), size=(dims[i], dims[i + 1])) for i in range(len(dims) - 1)],
        biases=[np.zeros(dims[i + 1]) for i in range(len(dims) - 1)],
        activation=activation,
    )
    act, act_grad = _activation(activation)
    m = [np.zeros_like(w) for w in net.weights] + [np.zeros_like(b) for b in net.biases]
    v = [np.zeros_like(w) for w in net.weights] + [np.zeros_like(b) for b in net.biases]
    step = 0
    best = None
    best_loss = np.inf
    stale = 0

    for epoch in range(max_epochs):
        order = rng.permutation(len(X))
        for lo in range(0, len(order), MLP_BATCH):
            idx = order[lo : lo + MLP_BATCH]
            xb, yb = X[idx], y[idx]
            logits, acts = net.forward(xb, keep=True)
            shifted = logits - logits.max(axis=1, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
            delta = probs
            delta[np.arange(len(yb)), yb] -= 1.0
            delta /= len(yb)

            grads_w, grads_b = [], []
            for layer in range(len(net.weights) - 1, -1, -1):
                grads_w.append(acts[layer].T @ delta)
                grads_b.append(delta.sum(axis=0))
                if layer > 0:
                    delta = (delta @ net.weights[layer].T) * act_grad(acts[layer])
            grads_w.reverse()
            grads_b.reverse()

            flat_params = net.weights + net.biases
            flat_grads = grads_w + grads_b
            step += 1
            for i, (p, g) in enumerate(zip(flat_params, flat_grads)):
                if optimizer == "sgd":
                    p -= lr * g
                else:
                    m[i] = 0.9 * m[i] + 0.1 * g
                    v[i] = 0.999 * v[i] + 0.001 * g * g
                    mhat = m[i] / (1.0 - 0.9**step)
                    vhat = v[i] / (1.0 - 0.999**step)
                    p -= lr * mhat / (np.sqrt(vhat) + 1e-8)

        if eval_set is not None:
            Xv, yv = _as_matrix(eval_set[0]), np.asarray(eval_set[1], dtype=np.int64)
            loss = _mlp_loss(net, Xv, yv)
            if loss < best_loss - 1e-12:
                best_loss = loss
                best = ([w.copy() for w in net.weights], [b.copy() for b in net.biases])
                stale = 0
            else:
                stale += 1
                if stale >= MLP_PATIENCE:
                    break

    if best is not None:
        net.weights, net.biases = best
    config = {
        "hidden_layers": hidden_layers,
        "activation": activation,
        "optimizer": optimizer,
        "lr": lr,
        "seed": seed,
    }
    return ClassifierModel(family="mlp", payload=net, config=config, num_features=X.shape[1])


def train_gbdt(features, labels, max_depth: int, eval_set=None) -> ClassifierModel:
    """Boosted trees with softmax objective and exact greedy splits."""
    if not 3 <= max_depth <= 5:
        raise BaselineError(f"max_depth must be in [3, 5], got {max_depth}")
    X = _as_matrix(features)
    y = np.asarray(labels, dtype=np.int64)
    ev = None
    if eval_set is not None:
        ev = (_as_matrix(eval_set[0]), np.asarray(eval_set[1], dtype=np.int64))
    booster = fit_gbdt(X, y, num_classes=NUM_SEVERITY_CLASSES, max_depth=max_depth, eval_set=ev)
    return ClassifierModel(
        family="gbdt", payload=booster, config={"max_depth": max_depth}, num_features=X.shape[1]
    )


def predict(model: ClassifierModel, features) -> int:
    """Deterministic label in 0..4 for one feature vector."""
    X = _as_matrix(features)
    if X.shape[1] != model.num_features:
        raise BaselineError(f"model expects {model.num_features} features, got {X.shape[1]}")
    if model.family == "svm":
        return int(model.payload.predict(X)[0])
    if model.family == "mlp":
        return int(np.argmax(model.payload.forward(X)[0]))
    if model.family == "gbdt":
        return int(model.payload.predict(X)[0])
    raise BaselineError(f"unknown family {model.family!r}")


def predict_batch(model: ClassifierModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != model.num_features:
        raise BaselineError(f"model expects {model.num_features} features, got {X.shape[1]}")
    if model.family == "svm":
        return model.payload.predict(X).astype(np.int64)
    if model.family == "mlp":
        return np.argmax(model.payload.forward(X), axis=1)
    if model.family == "gbdt":
        return model.payload.predict(X).astype(np.int64)
    raise BaselineError(f"unknown family {model.family!r}")


# ---- grid search ---------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Classifier family plus named hyperparameter candidate lists."""

    family: str
    grid: dict[str, tuple]

    def __post_init__(self):
        if not self.grid or any(len(v) == 0 for v in self.grid.values()):
            raise BaselineError("grid must be non-empty")

    def configurations(self):
        """All combinations in lexicographic order of sorted values."""
        keys = sorted(self.grid)
        value_lists = [sorted(self.grid[k], key=lambda x: (str(type(x)), x)) for k in keys]
        for combo in itertools.product(*value_lists):
            yield dict(zip(keys, combo))


def default_grid(family: str) -> GridSpec:
    if family == "svm":
        return GridSpec("svm", {"C": DECADES, "gamma": DECADES})
    if family == "mlp":
        return GridSpec(
            "mlp",
            {
                "hidden_layers": tuple(range(1, 11)),
                "activation": MLP_ACTIVATIONS,
                "optimizer": MLP_OPTIMIZERS,
                "lr": MLP_LRS,
            },
        )
    if family == "gbdt":
        return GridSpec("gbdt", {"max_depth": GBDT_DEPTHS})
    raise BaselineError(f"unknown family {family!r}")


def train_family(family: str, X, y, config: dict, eval_set=None, seed: int = 0) -> ClassifierModel:
    if family == "svm":
        return train_svm(X, y, **config)
    if family == "mlp":
        return train_mlp(X, y, seed=seed, eval_set=eval_set, **config)
    if family == "gbdt":
        return train_gbdt(X, y, eval_set=eval_set, **config)
    raise BaselineError(f"unknown family {family!r}")


@dataclass
class GridResult:
    config: dict
    metrics: dict | None
    train_time: float
    error: str | None = None


@dataclass
class GridSearchOutcome:
    best_model: ClassifierModel
    best_config: dict
    best_metric: float
    table: list[GridResult] = field(default_factory=list)


def grid_search(
    family: str,
    grid: GridSpec,
    train_data: tuple[np.ndarray, np.ndarray],
    valid_data: tuple[np.ndarray, np.ndarray],
    metric: str = "macro_f1",
    seed: int = 0,
) -> GridSearchOutcome:
    """Train every configuration and pick the validation argmax.

    Ties go to the lexicographically smallest configuration (the
    enumeration order), and individual failures are recorded in the
    result table and skipped; if everything fails, raise.
    """
    from .evaluation import confusion, macro_metrics

    if metric not in ("macro_f1", "accuracy"):
        raise BaselineError(f"metric must be macro_f1 or accuracy, got {metric!r}")
    if grid.family != family:
        raise BaselineError(f"grid family {grid.family!r} does not match {family!r}")
    Xt, yt = train_data
    Xv, yv = valid_data

    best = None
    table = []
    for config in grid.configurations():
        t0 = time.perf_counter()
        try:
            model = train_family(family, Xt, yt, config, eval_set=(Xv, yv), seed=seed)
            y_pred = predict_batch(model, np.asarray(Xv, dtype=np.float64))
            report = macro_metrics(confusion(yv, y_pred))
            metrics = {
                "accuracy": report.accuracy,
                "precision": report.macro_precision,
                "recall": report.macro_recall,
                "macro_f1": report.macro_f1,
            }
            table.append(GridResult(config=config, metrics=metrics, train_time=time.perf_counter() - t0))
            score = metrics[metric]
            if best is None or score > best[0]:
                best = (score, config, model)
        except (BaselineError, ValueError) as exc:
            table.append(
                GridResult(config=config, metrics=None, train_time=time.perf_counter() - t0, error=str(exc))
            )
    if best is None:
        raise BaselineError("every grid configuration failed to train")
    return GridSearchOutcome(best_model=best[2], best_config=best[1], best_metric=best[0], table=table)


def write_grid_table(path, family: str, outcome: GridSearchOutcome) -> None:
    """One line per configuration with validation metrics and train time."""
    keys = sorted(outcome.table[0].config) if outcome.table else []
    with open(path, "w") as fh:
        fh.write(
            "family\t" + "\t".join(keys) + "\taccuracy\tprecision\trecall\tmacro_f1\ttrain_time\terror\n"
        )
        for row in outcome.table:
            cells = [family] + [str(row.config[k]) for k in keys]
            if row.metrics is None:
                cells += ["", "", "", ""]
            else:
                cells += [f"{row.metrics[m]:.2f}" for m in ("accuracy", "precision", "recall", "macro_f1")]
            cells.append(f"{row.train_time:.4f}")
            cells.append(row.error or "")
            fh.write("\t".join(cells) + "\n")


# ---- serialization -------------------------------------------------------------


def save_classifier(path, model: ClassifierModel, scaler: Scaler | None = None) -> None:
    blob = {
        "format_version": MODEL_FORMAT_VERSION,
        "family": model.family,
        "config": model.config,
        "num_features": model.num_features,
        "payload": model.payload,
        "scaler": scaler,
    }
    with open(path, "wb") as fh:
        pickle.dump(blob, fh)


def load_classifier(path) -> tuple[ClassifierModel, Scaler | None]:
    with open(path, "rb") as fh:
        blob = pickle.load(fh)
    if blob.get("format_version") != MODEL_FORMAT_VERSION:
        raise BaselineError(f"{path}: unsupported classifier format version")
    model = ClassifierModel(
        family=blob["family"],
        payload=blob["payload"],
        config=blob["config"],
        num_features=blob["num_features"],
    )
    return model, blob.get("scaler")
