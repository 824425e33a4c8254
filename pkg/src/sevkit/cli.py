"""Command-line pipeline driver.

Subcommands: synth, split, extract-features, train-baseline, train-mtl,
evaluate, analyze, compare.  Settings resolve in three layers: built-in
defaults, then a JSON config file (--config), then explicit flags.  Each
run writes into one output directory (default: content-addressed by the
config hash under $SEVKIT_OUTPUT_ROOT) together with a run manifest
recording inputs, config hash, and seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import corpus, evaluation, features, plotting, synth
from .embedding import embed_2d, write_coordinates
from .model.encoder import EncoderConfig
from .model.network import MTLModel
from .trainer import (
    TrainConfig,
    TrainerError,
    examples_from_corpus,
    load_trainer_checkpoint,
    read_curves,
    save_trainer_checkpoint,
    train,
    write_curves,
)

OUTPUT_ROOT_ENV = "SEVKIT_OUTPUT_ROOT"


class CliError(Exception):
    """User-facing command failure (message printed, nonzero exit)."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob the pipeline commands accept.

    Path fields stay None until a command needs them; loading a config
    file rejects unknown keys so typos fail fast.
    """

    # corpus paths
    manifest: str | None = None
    roster: str | None = None
    split: str | None = None
    plan: str | None = None
    features: str | None = None
    checkpoint: str | None = None
    classifier: str | None = None
    run_dir: str | None = None
    # synthesis
    size: int = 50
    # splitting
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    # features / baselines
    feature_set: str = "combined"
    family: str = "svm"
    metric: str = "macro_f1"
    partition: str = "test"
    # encoder
    feature_dim: int = 64
    downsampling: int = 320
    num_blocks: int = 2
    num_heads: int = 4
    # training
    lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 100
    warmup_epochs: int = 20
    alpha: float = 0.1
    clip_norm: float = 5.0
    # analysis
    converged: bool = True
    # misc
    seed: int = 0
    out: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def load_config(path) -> ExperimentConfig:
    """Parse a JSON config file, rejecting unknown keys."""
    with open(path) as fh:
        payload = json.load(fh)
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(payload) - known
    if unknown:
        raise CliError(f"{path}: unknown config keys {sorted(unknown)}")
    if "ratios" in payload:
        payload["ratios"] = tuple(payload["ratios"])
    return ExperimentConfig(**payload)


def config_hash(command: str, config: ExperimentConfig) -> str:
    blob = json.dumps({"command": command, "config": asdict(config)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def resolve_out_dir(command: str, config: ExperimentConfig) -> Path:
    if config.out:
        out = Path(config.out)
    else:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        out = root / f"{command}-{config_hash(command, config)}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run_manifest(out_dir: Path, command: str, config: ExperimentConfig, inputs: list) -> None:
    manifest = {
        "command": command,
        "config": asdict(config),
        "config_hash": config_hash(command, config),
        "seed": config.seed,
        "inputs": {str(p): _sha256(p) for p in inputs},
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _require(config: ExperimentConfig, *names: str):
    for name in names:
        value = getattr(config, name)
        if value is None:
            raise CliError(f"missing required input --{name.replace('_', '-')}")
        if not Path(value).exists():
            raise CliError(f"missing upstream artifact: {name} file {value!r} does not exist")


def _load_corpus(config: ExperimentConfig):
    _require(config, "manifest")
    manifest = Path(config.manifest)
    roster_path = Path(config.roster) if config.roster else manifest.parent / "roster.tsv"
    if not roster_path.exists():
        raise CliError(f"missing upstream artifact: roster file {str(roster_path)!r} does not exist")
    return corpus.load_manifest(manifest, roster_path), [manifest, roster_path]


# ---- subcommands ---------------------------------------------------------------


def cmd_synth(config: ExperimentConfig) -> int:
    out_dir = resolve_out_dir("synth", config)
    try:
        synth.generate_corpus(out_dir, seed=config.seed, size=config.size)
    except synth.SynthError as exc:
        raise CliError(str(exc))
    write_run_manifest(out_dir, "synth", config, [])
    print(f"synth: wrote {config.size}-speaker corpus to {out_dir}")
    return 0


def cmd_split(config: ExperimentConfig) -> int:
    (roster, utterances), inputs = _load_corpus(config)
    plan = None
    if config.plan:
        if not Path(config.plan).exists():
            raise CliError(f"missing upstream artifact: plan file {config.plan!r} does not exist")
        plan = corpus.load_split_plan(config.plan)
        inputs.append(Path(config.plan))
    out_dir = resolve_out_dir("split", config)
    try:
        assignment = corpus.make_split(roster, ratios=config.ratios, seed=config.seed, plan=plan)
    except corpus.CorpusError as exc:
        raise CliError(str(exc))
    corpus.write_split(out_dir / "split.tsv", assignment)
    report = corpus.validate_split(assignment, roster, utterances)
    with open(out_dir / "split_report.txt", "w") as fh:
        fh.write(f"violations: {len(report.violations)}\n")
        for v in report.violations:
            fh.write(f"  {v}\n")
        fh.write("cell counts (severity, gender -> train/valid/test):\n")
        for (sev, gen) in sorted(report.cell_counts):
            c = report.cell_counts[(sev, gen)]
            fh.write(f"  {sev} {gen}: {c['train']}/{c['valid']}/{c['test']}\n")
        fh.write("utterances per partition:\n")
        for part in corpus.PARTITIONS:
            fh.write(f"  {part}: {report.utterance_counts[part]}\n")
    write_run_manifest(out_dir, "split", config, inputs)
    if report.violations:
        print(f"split: wrote {out_dir}/split.tsv with {len(report.violations)} violations", file=sys.stderr)
        return 1
    print(f"split: wrote {out_dir}/split.tsv (no violations)")
    return 0


def cmd_extract_features(config: ExperimentConfig) -> int:
    (roster, utterances), inputs = _load_corpus(config)
    if config.feature_set not in ("acoustic", "linguistic", "combined"):
        raise CliError(f"unknown feature set {config.feature_set!r}")
    out_dir = resolve_out_dir("extract-features", config)
    rows = []
    for utt in utterances:
        vec = features.extract_feature_set(utt.audio, utt.transcript, config.feature_set)
        rows.append((utt.utterance_id, vec))
    out_path = out_dir / f"features_{config.feature_set}.tsv"
    features.write_feature_table(out_path, rows)
    write_run_manifest(out_dir, "extract-features", config, inputs)
    print(f"extract-features: wrote {out_path} ({len(rows)} utterances, {len(rows[0][1].values)} dims)")
    return 0


def _feature_split_arrays(config: ExperimentConfig):
    """Features joined with labels and partitions via the manifest; the
    scaler is fit downstream on the training partition only."""
    _require(config, "features", "split")
    (roster, utterances), inputs = _load_corpus(config)
    feature_rows = features.read_feature_table(config.features)
    assignment = corpus.read_split(config.split)
    labels = {r.speaker_id: r.severity for r in roster}
    speaker_of = {u.utterance_id: u.speaker_id for u in utterances}

    data = {part: ([], []) for part in corpus.PARTITIONS}
    for utt_id, vec in feature_rows:
        spk = speaker_of.get(utt_id)
        if spk is None:
            raise CliError(f"feature row {utt_id!r} not present in the manifest")
        if spk not in assignment.partitions:
            raise CliError(f"feature row {utt_id!r}: speaker {spk!r} not in split")
        part = assignment.partitions[spk]
        data[part][0].append(vec)
        data[part][1].append(labels[spk])
    inputs += [Path(config.features), Path(config.split)]
    return data, inputs


def cmd_train_baseline(config: ExperimentConfig) -> int:
    data, inputs = _feature_split_arrays(config)
    out_dir = resolve_out_dir("train-baseline", config)
    train_vecs, train_labels = data["train"]
    valid_vecs, valid_labels = data["valid"]
    if not train_vecs or not valid_vecs:
        raise CliError("train and valid partitions must both contain feature rows")

    scaler = bl.fit_scaler(train_vecs)
    Xt = bl.scale_matrix(scaler, np.stack([v.values for v in train_vecs]))
    Xv = bl.scale_matrix(scaler, np.stack([v.values for v in valid_vecs]))
    yt = np.array(train_labels)
    yv = np.array(valid_labels)

    grid = bl.default_grid(config.family)
    outcome = bl.grid_search(config.family, grid, (Xt, yt), (Xv, yv), metric=config.metric, seed=config.seed)
    bl.write_grid_table(out_dir / "grid_table.tsv", config.family, outcome)
    bl.save_classifier(out_dir / "classifier.pkl", outcome.best_model, scaler)
    summary = {
        "family": config.family,
        "metric": config.metric,
        "best_config": outcome.best_config,
        "best_validation_metric": round(outcome.best_metric, 2),
        "configurations": len(outcome.table),
        "failures": sum(1 for r in outcome.table if r.error),
    }
    (out_dir / "baseline_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_run_manifest(out_dir, "train-baseline", config, inputs)
    print(
        f"train-baseline: {config.family} best {config.metric} "
        f"{outcome.best_metric:.2f} with {outcome.best_config} -> {out_dir}"
    )
    return 0


def _train_config(config: ExperimentConfig) -> TrainConfig:
    return TrainConfig(
        lr=config.lr,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps,
        batch_size=config.batch_size,
        epochs=config.epochs,
        warmup_epochs=config.warmup_epochs,
        alpha=config.alpha,
        seed=config.seed,
        clip_norm=config.clip_norm,
    )


def cmd_train_mtl(config: ExperimentConfig) -> int:
    (roster, utterances), inputs = _load_corpus(config)
    _require(config, "split")
    assignment = corpus.read_split(config.split)
    inputs.append(Path(config.split))
    parts = corpus.partition_utterances(utterances, assignment)
    out_dir = resolve_out_dir("train-mtl", config)

    encoder_config = EncoderConfig(
        kind="toy",
        feature_dim=config.feature_dim,
        downsampling=config.downsampling,
        seed=config.seed,
        num_blocks=config.num_blocks,
        num_heads=config.num_heads,
    )
    vocabulary = sorted({tok for utt in utterances for tok in utt.transcript})
    if not vocabulary:
        raise CliError("no transcript tokens found in the manifest")
    model = MTLModel(encoder_config, vocabulary=vocabulary)
    train_config = _train_config(config)
    resume = None
    if config.checkpoint:
        _require(config, "checkpoint")
        model, resume, _ = load_trainer_checkpoint(config.checkpoint)
        inputs.append(Path(config.checkpoint))

    train_set = examples_from_corpus(roster, parts["train"])
    valid_set = examples_from_corpus(roster, parts["valid"])
    try:
        result = train(model, train_set, valid_set, train_config, resume=resume, log=print)
    except TrainerError as exc:
        raise CliError(str(exc))

    write_curves(out_dir / "curves.tsv", result.curves)
    plotting.save_curves_figure(
        out_dir / "curves.png",
        result.curves,
        title=f"alpha={config.alpha} warmup={config.warmup_epochs}",
    )
    model.set_parameters(result.best.params)
    save_trainer_checkpoint(out_dir / "checkpoint_best.ckpt", model, result.best, train_config)
    model.set_parameters(result.final.params)
    save_trainer_checkpoint(out_dir / "checkpoint_final.ckpt", model, result.final, train_config)
    write_run_manifest(out_dir, "train-mtl", config, inputs)
    print(
        f"train-mtl: best epoch {result.best.epoch} "
        f"(valid L {result.best.valid_combined:.4f}), "
        f"skipped {result.skipped_unalignable} unalignable -> {out_dir}"
    )
    return 0


def _predictions_for_partition(config: ExperimentConfig):
    (roster, utterances), inputs = _load_corpus(config)
    _require(config, "split")
    assignment = corpus.read_split(config.split)
    inputs.append(Path(config.split))
    parts = corpus.partition_utterances(utterances, assignment)
    if config.partition not in parts:
        raise CliError(f"unknown partition {config.partition!r}")
    chosen = parts[config.partition]
    labels = {r.speaker_id: r.severity for r in roster}

    if config.classifier:
        _require(config, "classifier", "features")
        model, scaler = bl.load_classifier(config.classifier)
        inputs += [Path(config.classifier), Path(config.features)]
        feature_rows = {utt_id: vec for utt_id, vec in features.read_feature_table(config.features)}
        ids, y_true, y_pred = [], [], []
        for utt in chosen:
            if utt.utterance_id not in feature_rows:
                raise CliError(f"missing upstream artifact: no feature row for {utt.utterance_id!r}")
            vec = feature_rows[utt.utterance_id]
            if scaler is not None:
                vec = bl.apply_scaler(scaler, vec)
            ids.append(utt.utterance_id)
            y_true.append(labels[utt.speaker_id])
            y_pred.append(bl.predict(model, vec))
    else:
        _require(config, "checkpoint")
        model, _, _ = load_trainer_checkpoint(config.checkpoint)
        inputs.append(Path(config.checkpoint))
        ids, y_true, y_pred = [], [], []
        for utt in chosen:
            ids.append(utt.utterance_id)
            y_true.append(labels[utt.speaker_id])
            y_pred.append(model.predict(utt.audio))
    return ids, np.array(y_true), np.array(y_pred), inputs


def cmd_evaluate(config: ExperimentConfig) -> int:
    ids, y_true, y_pred, inputs = _predictions_for_partition(config)
    out_dir = resolve_out_dir("evaluate", config)
    cm = evaluation.confusion(y_true, y_pred)
    report = evaluation.macro_metrics(cm)
    (out_dir / "metrics.json").write_text(report.to_json())
    (out_dir / "metrics.txt").write_text(report.rendered())
    with open(out_dir / "predictions.tsv", "w") as fh:
        fh.write("utterance_id\ttrue\tpredicted\n")
        for i, utt_id in enumerate(ids):
            fh.write(f"{utt_id}\t{y_true[i]}\t{y_pred[i]}\n")
    plotting.save_confusion_figure(out_dir / "confusion.png", cm)
    write_run_manifest(out_dir, "evaluate", config, inputs)
    print(
        f"evaluate[{config.partition}]: accuracy {report.accuracy:.2f} "
        f"precision {report.macro_precision:.2f} recall {report.macro_recall:.2f} "
        f"f1 {report.macro_f1:.2f} -> {out_dir}"
    )
    return 0


def cmd_analyze(config: ExperimentConfig) -> int:
    (roster, utterances), inputs = _load_corpus(config)
    _require(config, "split")
    assignment = corpus.read_split(config.split)
    inputs.append(Path(config.split))

    checkpoint_path = config.checkpoint
    if checkpoint_path is None and config.run_dir:
        name = "checkpoint_final.ckpt" if config.converged else "checkpoint_best.ckpt"
        checkpoint_path = str(Path(config.run_dir) / name)
    if checkpoint_path is None:
        raise CliError("analyze needs --checkpoint or --run-dir")
    if not Path(checkpoint_path).exists():
        raise CliError(f"missing upstream artifact: checkpoint {checkpoint_path!r} does not exist")
    inputs.append(Path(checkpoint_path))
    model, _, _ = load_trainer_checkpoint(checkpoint_path)

    parts = corpus.partition_utterances(utterances, assignment)
    chosen = parts[config.partition]
    if len(chosen) < 3:
        raise CliError(f"partition {config.partition!r} has {len(chosen)} utterances; need >= 3")
    out_dir = resolve_out_dir("analyze", config)

    table = evaluation.export_latents(model, roster, chosen, assignment.partitions)
    evaluation.write_latent_table(out_dir / "latents.tsv", table)

    coords = embed_2d(table.vectors, seed=config.seed)
    write_coordinates(out_dir / "embedding.tsv", table.utterance_ids, coords, table.severities, table.text_ids)
    plotting.save_embedding_figure(out_dir / "embedding_severity.png", coords, table.severities, "severity")
    plotting.save_embedding_figure(out_dir / "embedding_text.png", coords, table.text_ids, "text")

    reports = [
        evaluation.silhouette(table.vectors, table.severities, labeling="severity"),
        evaluation.silhouette(table.vectors, table.text_ids, labeling="text_id"),
    ]
    with open(out_dir / "silhouettes.tsv", "w") as fh:
        fh.write("labeling\tmean\tper_cluster\n")
        for rep in reports:
            per = ",".join(f"{k}:{v:.4f}" for k, v in sorted(rep.per_cluster.items()))
            fh.write(f"{rep.labeling}\t{rep.mean:.6f}\t{per}\n")
    write_run_manifest(out_dir, "analyze", config, inputs)
    print(
        f"analyze[{config.partition}]: silhouette severity {reports[0].mean:.3f}, "
        f"text {reports[1].mean:.3f} -> {out_dir}"
    )
    return 0


def cmd_compare(config: ExperimentConfig, curve_paths: list[str], names: list[str] | None) -> int:
    if len(curve_paths) != 2:
        raise CliError("compare needs exactly two curves files")
    for p in curve_paths:
        if not Path(p).exists():
            raise CliError(f"missing upstream artifact: curves file {p!r} does not exist")
    names = names or ["a", "b"]
    curves_a = read_curves(curve_paths[0])
    curves_b = read_curves(curve_paths[1])
    try:
        comparison = evaluation.compare_runs(curves_a, curves_b)
    except evaluation.EvaluationError as exc:
        raise CliError(str(exc))
    out_dir = resolve_out_dir("compare", config)
    evaluation.write_comparison(out_dir / "comparison.tsv", comparison, names[0], names[1])
    plotting.save_comparison_figure(out_dir / "comparison.png", {names[0]: curves_a, names[1]: curves_b})
    write_run_manifest(out_dir, "compare", config, [Path(p) for p in curve_paths])
    print(
        f"compare: argmin valid CE epoch {names[0]}={comparison.argmin_valid_ce[0]} "
        f"{names[1]}={comparison.argmin_valid_ce[1]} -> {out_dir}"
    )
    return 0


# ---- argument wiring -----------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="JSON config file (flags override it)")
    parser.add_argument("--out", help="output directory (default: content-addressed under the output root)")
    parser.add_argument("--seed", type=int, help="random seed")


_FLAG_SPECS: dict[str, dict] = {
    "manifest": {}, "roster": {}, "split": {}, "plan": {}, "features": {},
    "checkpoint": {}, "classifier": {}, "run_dir": {},
    "size": {"type": int}, "feature_set": {"choices": ("acoustic", "linguistic", "combined")},
    "family": {"choices": ("svm", "mlp", "gbdt")}, "metric": {"choices": ("macro_f1", "accuracy")},
    "partition": {"choices": corpus.PARTITIONS},
    "feature_dim": {"type": int}, "downsampling": {"type": int},
    "num_blocks": {"type": int}, "num_heads": {"type": int},
    "lr": {"type": float}, "beta1": {"type": float}, "beta2": {"type": float},
    "eps": {"type": float}, "batch_size": {"type": int}, "epochs": {"type": int},
    "alpha": {"type": float}, "clip_norm": {"type": float},
}


def _add_flags(parser: argparse.ArgumentParser, *names: str):
    for name in names:
        spec = _FLAG_SPECS[name]
        parser.add_argument(f"--{name.replace('_', '-')}", **spec)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sevkit",
        description="Severity classification pipeline: synthesize, split, extract, train, evaluate, analyze.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    _add_common(p)
    _add_flags(p, "size")

    p = sub.add_parser("split", help="speaker-independent stratified split")
    _add_common(p)
    _add_flags(p, "manifest", "roster", "plan")
    p.add_argument("--ratios", help="comma-separated train,valid,test ratios")

    p = sub.add_parser("extract-features", help="hand-crafted feature extraction")
    _add_common(p)
    _add_flags(p, "manifest", "roster", "feature_set")

    p = sub.add_parser("train-baseline", help="grid-search a classical classifier")
    _add_common(p)
    _add_flags(p, "manifest", "roster", "features", "split", "family", "metric")

    p = sub.add_parser("train-mtl", help="fine-tune the multi-task model")
    _add_common(p)
    _add_flags(
        p, "manifest", "roster", "split", "checkpoint", "feature_dim", "downsampling",
        "num_blocks", "num_heads", "lr", "beta1", "beta2", "eps", "batch_size",
        "epochs", "alpha", "clip_norm",
    )
    p.add_argument("--e", type=int, dest="warmup_epochs", help="warmup epochs before enabling the class loss")

    p = sub.add_parser("evaluate", help="metrics report for a checkpoint or classifier")
    _add_common(p)
    _add_flags(p, "manifest", "roster", "split", "checkpoint", "classifier", "features", "partition")

    p = sub.add_parser("analyze", help="latent export, 2D embedding, silhouettes")
    _add_common(p)
    _add_flags(p, "manifest", "roster", "split", "checkpoint", "run_dir", "partition")
    p.add_argument("--converged", action=argparse.BooleanOptionalAction, default=None,
                   help="use the fully-converged (final) checkpoint from --run-dir instead of the best")

    p = sub.add_parser("compare", help="per-epoch comparison of two training runs")
    _add_common(p)
    p.add_argument("curves", nargs=2, help="two curves.tsv files")
    p.add_argument("--names", help="comma-separated run names for the report")
    return parser


def _merge_config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = {}
    for f in fields(ExperimentConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value
    if getattr(args, "ratios", None):
        parts = tuple(float(x) for x in args.ratios.split(","))
        if len(parts) != 3:
            raise CliError("--ratios needs three comma-separated values")
        overrides["ratios"] = parts
    if getattr(args, "converged", None) is not None:
        overrides["converged"] = args.converged
    return replace(config, **overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _merge_config(args)
        if args.command == "synth":
            return cmd_synth(config)
        if args.command == "split":
            return cmd_split(config)
        if args.command == "extract-features":
            return cmd_extract_features(config)
        if args.command == "train-baseline":
            return cmd_train_baseline(config)
        if args.command == "train-mtl":
            return cmd_train_mtl(config)
        if args.command == "evaluate":
            return cmd_evaluate(config)
        if args.command == "analyze":
            return cmd_analyze(config)
        if args.command == "compare":
            names = args.names.split(",") if args.names else None
            return cmd_compare(config, args.curves, names)
        raise CliError(f"unknown command {args.command!r}")
    except (CliError, corpus.CorpusError, features.FeatureError, bl.BaselineError,
            evaluation.EvaluationError, TrainerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
