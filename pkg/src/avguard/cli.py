"""
The ``avguard`` command line.

Every subcommand reads the run configuration, works inside one workspace
directory and records a manifest of what it wrote. Domain errors end the run
with a one-line diagnostic on stderr and exit status 1; ``gate`` exits with
``GATE_FILTERED_EXIT`` when it filters the command.
"""

import argparse
import logging
import os
import shutil
import sys
from collections import defaultdict
from collections.abc import Callable, Sequence
from dataclasses import replace
from pathlib import Path

from . import __version__
from .audio import FeatureStore, extract_features, load_wav, mfcc_features
from .config import RunConfig, load_config
from .dataset import (
    FoldAssignment,
    PairedDataset,
    build_aid,
    check_gtsrb_corpus,
    check_speech_corpus,
    dataset_digest,
    load_dataset,
    load_sign_images,
    load_speech_commands,
    read_image,
    save_dataset,
    split_folds,
    subset_indices,
)
from .errors import AvguardError, ConfigurationError, DatasetError
from .evaluation import SUBSETS, embed_penultimate, evaluate, load_report, report_table, save_report
from .gate import CommandGate
from .labels import COMMANDS
from .models import Architecture, build_model, load_checkpoint, summarize
from .provenance import run_record
from .training import Split, cross_validate, train
from .tsne import EXAGGERATION_ITERS, plot_points, save_points, separation_score, tsne_3d
from .workspace import WORKSPACE_ENV, Workspace, atomic_output, write_json

log = logging.getLogger(__name__)

GATE_FILTERED_EXIT = 3


def _at_least(minimum: int) -> Callable[[str], int]:
    def parse(value: str) -> int:
        number = int(value)
        if number < minimum:
            raise argparse.ArgumentTypeError(f"must be at least {minimum}, got {number}")
        return number

    return parse


def _existing(kind: str) -> Callable[[str], Path]:
    def parse(value: str) -> Path:
        path = Path(value)
        if not (path.is_dir() if kind == "directory" else path.is_file()):
            raise argparse.ArgumentTypeError(f"{value}: no such {kind}")
        return path

    return parse


def _setup(args: argparse.Namespace, **overrides) -> tuple[RunConfig, Workspace]:
    # an explicitly named workspace owns its run.toml; its [paths] workspace is then ignored
    named = Workspace.resolve(args.workspace) if args.workspace or os.environ.get(WORKSPACE_ENV) else None
    config_path = args.config_path
    if config_path is None and named is not None and named.config_path.exists():
        config_path = named.config_path
    # flag paths are relative to the current directory, file paths to the file
    overrides = {k: str(Path(v).resolve()) if k.startswith("paths.") and v is not None else v for k, v in overrides.items()}
    cfg = load_config(config_path, overrides)
    return cfg, named or Workspace.resolve(None, cfg.paths.workspace)


def _seeds(cfg: RunConfig) -> dict[str, int]:
    return {"dataset": cfg.dataset.seed, "model": cfg.model_seed, "train": cfg.train.seed}


def _load_built(ws: Workspace) -> tuple[PairedDataset, FoldAssignment]:
    dataset, folds = load_dataset(ws.dataset_dir)
    if folds is None:
        raise DatasetError(f"{ws.dataset_dir} has no fold assignment; rerun `avguard build-dataset`")
    return dataset, folds


def extract_features_cmd(args: argparse.Namespace) -> int:
    cfg, ws = _setup(args, **{"paths.speech_commands": args.speech_commands})
    root = cfg.paths.speech_commands
    if root is None:
        raise ConfigurationError("No Speech Commands root: pass --speech-commands or set [paths] speech_commands")
    check_speech_corpus(root)

    clips = load_speech_commands(root, COMMANDS, cfg.dataset.clips_per_class)
    files = FeatureStore.save(ws.features_dir, extract_features(clips, args.jobs))
    ws.write_manifest("extract-features", {**run_record(cfg.to_dict(), _seeds(cfg)), "clips": len(clips)}, files)
    print(f"Extracted {len(clips)} clips into {ws.features_dir}")
    return 0


def build_dataset_cmd(args: argparse.Namespace) -> int:
    cfg, ws = _setup(
        args, **{"paths.speech_commands": args.speech_commands, "paths.gtsrb": args.gtsrb, "dataset.seed": args.seed}
    )
    speech_root, gtsrb_root = cfg.require_corpora()
    check_gtsrb_corpus(gtsrb_root, cfg.dataset.class_map)

    try:
        audio = FeatureStore.load(ws.features_dir)
        log.info("Using %d precomputed feature rows from %s", len(audio), ws.features_dir)
    except FileNotFoundError:
        check_speech_corpus(speech_root)
        audio = extract_features(load_speech_commands(speech_root, COMMANDS, cfg.dataset.clips_per_class), args.jobs)

    images = load_sign_images(gtsrb_root, cfg.dataset.class_map, cfg.dataset.images_per_class)
    dataset = build_aid(audio, images, cfg.dataset.anomaly_fraction, cfg.dataset.seed)
    folds = split_folds(dataset, cfg.dataset.folds, cfg.dataset.seed)
    files = save_dataset(dataset, ws.dataset_dir, folds)

    if cfg.source is not None and cfg.source != ws.config_path:
        ws.root.mkdir(parents=True, exist_ok=True)
        with atomic_output(ws.config_path) as tmp:
            shutil.copyfile(cfg.source, tmp)
        files.append(ws.config_path)

    digest = dataset_digest(dataset)
    ws.write_manifest("build-dataset", run_record(cfg.to_dict(), _seeds(cfg), digest), files)
    counts = ", ".join(f"{t.word}={n}" for t, n in dataset.class_counts.items())
    print(f"Built {len(dataset)} pairs ({counts}) in {folds.k} folds; digest {digest[:12]}")
    return 0


def train_cmd(args: argparse.Namespace) -> int:
    cfg, ws = _setup(
        args,
        **{
            "model.arch": args.arch,
            "model.seed": args.seed,
            "train.fold": args.fold,
            "train.epochs": args.epochs,
            "train.batch_size": args.batch_size,
            "train.seed": args.seed,
        },
    )
    dataset, folds = _load_built(ws)
    spec = cfg.model
    arch_id = spec.arch.value
    digest = dataset_digest(dataset)

    if args.all_folds:
        results = cross_validate(spec, dataset, folds, cfg.train, run_dir=lambda k: ws.run_dir(arch_id, k)).fold_results
        fold_ids = range(folds.k)
    else:
        model = build_model(spec, cfg.model_seed)
        split = Split.from_folds(folds, cfg.fold)
        results = (train(model, dataset, split, cfg.train, ws.run_dir(arch_id, cfg.fold), fold=cfg.fold),)
        fold_ids = (cfg.fold,)

    for k, result in zip(fold_ids, results):
        run_dir = ws.run_dir(arch_id, k)
        summary = run_dir / "summary.txt"
        summary.write_text(summarize(build_model(spec, cfg.model_seed)))
        record = {
            **run_record(cfg.to_dict(), _seeds(cfg), digest),
            "arch": arch_id,
            "fold": k,
            "best_epoch": result.best_epoch,
            "best_validation_accuracy": result.best_validation_accuracy,
        }
        ws.write_manifest("train", record, [run_dir / "history.jsonl", summary, *result.checkpoints], tag=f"{arch_id}-fold{k}")
        print(f"{arch_id} fold {k}: best epoch {result.best_epoch}, validation accuracy {result.best_validation_accuracy:.4f}")

    if args.all_folds:
        accuracies = [r.best_validation_accuracy for r in results]
        mean = sum(accuracies) / len(accuracies)
        std = (sum((a - mean) ** 2 for a in accuracies) / len(accuracies)) ** 0.5
        print(f"{arch_id}: {mean:.4f} ± {std:.4f} over {folds.k} folds")
    return 0


def evaluate_cmd(args: argparse.Namespace) -> int:
    cfg, ws = _setup(args)
    dataset, folds = _load_built(ws)
    model, meta = load_checkpoint(args.checkpoint)
    fold = args.fold if args.fold is not None else meta.fold if meta.fold is not None else cfg.fold

    report = evaluate(model, dataset, folds.validation_indices(fold), args.subset)
    arch_id = meta.spec.arch.value
    metadata = {"arch": arch_id, "fold": fold, "epoch": meta.epoch, "checkpoint": ws.relative(args.checkpoint)}
    path = save_report(ws.evaluation_path(arch_id, args.subset), replace(report, metadata=metadata))
    ws.write_manifest(
        "evaluate", run_record(cfg.to_dict(), _seeds(cfg), dataset_digest(dataset)), [path], tag=f"{arch_id}-{args.subset}"
    )

    metrics = " ".join(f"{m} {getattr(report, m):.4f}" for m in ("accuracy", "precision", "recall", "f1"))
    line = f"{arch_id} {args.subset}: {metrics}"
    if report.attack_success_rate is not None:
        line += f" attack success rate {report.attack_success_rate:.4f}"
    print(line)
    return 0


def visualize_tsne_cmd(args: argparse.Namespace) -> int:
    cfg, ws = _setup(
        args,
        **{"evaluation.perplexity": args.perplexity, "evaluation.tsne_iterations": args.iterations, "evaluation.plot": args.plot},
    )
    dataset, folds = _load_built(ws)
    model, meta = load_checkpoint(args.checkpoint)
    fold = meta.fold if meta.fold is not None else cfg.fold
    indices = subset_indices(dataset, folds.validation_indices(fold), args.subset)

    embeddings = embed_penultimate(model, dataset, indices)
    options = cfg.evaluation
    result = tsne_3d(embeddings.values, embeddings.labels, options.perplexity, options.tsne_iterations, options.tsne_seed)

    arch_id = meta.spec.arch.value
    files = [save_points(ws.tsne_dir / f"{arch_id}-{args.subset}.csv", result)]
    if options.plot:
        files.append(plot_points(ws.tsne_dir / f"{arch_id}-{args.subset}.png", result))
    record = run_record(cfg.to_dict(), _seeds(cfg), dataset_digest(dataset))
    record.update(initial_kl=result.initial_kl, final_kl=result.final_kl)
    ws.write_manifest("visualize-tsne", record, files, tag=f"{arch_id}-{args.subset}")

    message = f"{arch_id} {args.subset}: KL {result.initial_kl:.4f} -> {result.final_kl:.4f}"
    if len(set(embeddings.labels.tolist())) > 1:
        message += f", silhouette {separation_score(result):.3f}"
    print(message)
    return 0


def report_cmd(args: argparse.Namespace) -> int:
    cfg, ws = _setup(args)
    reports: dict[str, dict] = defaultdict(dict)
    for path in sorted(ws.evaluations_dir.glob("*.json")):
        report = load_report(path)
        reports[report.metadata.get("arch", path.stem.rsplit("-", 1)[0])][report.subset] = report
    if not reports:
        raise DatasetError(f"No evaluations in {ws.evaluations_dir}; run `avguard evaluate` first")

    table = report_table(reports)
    json_path = write_json(ws.root / "report.json", table.to_dict(orient="records"))
    csv_path = ws.root / "report.csv"
    with atomic_output(csv_path) as tmp:
        table.to_csv(tmp, index=False, float_format="%.4f")
    ws.write_manifest("report", run_record(cfg.to_dict(), _seeds(cfg)), [json_path, csv_path])
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return 0


def gate_cmd(args: argparse.Namespace) -> int:
    cfg, ws = _setup(args)
    model, _ = load_checkpoint(args.checkpoint)
    decision = CommandGate(model).decide(read_image(args.image), mfcc_features(load_wav(args.audio)), args.command)

    record = {
        **run_record(cfg.to_dict(), _seeds(cfg)),
        "input": {"image": str(args.image), "audio": str(args.audio), "command": args.command},
        "decision": {"accepted": decision.accepted, "predicted": decision.predicted.word, "confidence": decision.confidence},
    }
    ws.write_manifest("gate", record, [])
    status = "accepted" if decision.accepted else f"filtered ({decision.reason})"
    print(f"{args.command}: {status}, p={decision.confidence:.3f}")
    return 0 if decision.accepted else GATE_FILTERED_EXIT


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avguard",
        description="Train and evaluate audio-visual fusion models that flag voice commands the camera view contradicts.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="log debug messages")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")

    run = argparse.ArgumentParser(add_help=False)
    run.add_argument(
        "--workspace", type=Path, default=None, help=f"workspace directory (overrides {WORKSPACE_ENV} and [paths] workspace)"
    )
    run.add_argument(
        "--config", dest="config_path", type=Path, default=None, help="run configuration (default: run.toml in the workspace)"
    )

    commands = parser.add_subparsers(dest="command_name", metavar="COMMAND", required=True)
    subset = {"dest": "subset", "choices": SUBSETS, "default": "mixed", "help": "validation pairs to use (default: mixed)"}
    checkpoint = {"type": _existing("file"), "required": True, "help": "trained model checkpoint"}

    sub = commands.add_parser("extract-features", parents=[run], help="compute MFCC feature vectors for the command-word clips")
    sub.add_argument("--speech-commands", type=_existing("directory"), help="Speech Commands corpus root")
    sub.add_argument("--jobs", type=_at_least(1), default=1, help="worker processes (default: 1)")
    sub.set_defaults(func=extract_features_cmd)

    sub = commands.add_parser(
        "build-dataset", parents=[run], help="pair clips with signs, add anomaly pairs and assign cross-validation folds"
    )
    sub.add_argument("--speech-commands", type=_existing("directory"), help="Speech Commands corpus root")
    sub.add_argument("--gtsrb", type=_existing("directory"), help="GTSRB training set root")
    sub.add_argument("--seed", type=int, help="pairing and fold seed")
    sub.add_argument("--jobs", type=_at_least(1), default=1, help="worker processes for MFCC extraction (default: 1)")
    sub.set_defaults(func=build_dataset_cmd)

    sub = commands.add_parser("train", parents=[run], help="train one architecture, keeping a checkpoint per improving epoch")
    sub.add_argument("--arch", choices=[a.value for a in Architecture], help="fusion architecture")
    sub.add_argument("--fold", type=_at_least(0), help="validation fold")
    sub.add_argument("--all-folds", action="store_true", help="train one model per fold and report mean ± std")
    sub.add_argument("--epochs", type=_at_least(1))
    sub.add_argument("--batch-size", type=_at_least(1))
    sub.add_argument("--seed", type=int, help="initialization and shuffling seed")
    sub.set_defaults(func=train_cmd)

    sub = commands.add_parser("evaluate", parents=[run], help="accuracy, weighted precision/recall/F1 and attack success rate")
    sub.add_argument("--checkpoint", **checkpoint)
    sub.add_argument("--set", **subset)
    sub.add_argument("--fold", type=_at_least(0), help="validation fold (default: the checkpoint's)")
    sub.set_defaults(func=evaluate_cmd)

    sub = commands.add_parser("visualize-tsne", parents=[run], help="project penultimate-layer embeddings to 3-D with t-SNE")
    sub.add_argument("--checkpoint", **checkpoint)
    sub.add_argument("--set", **subset)
    sub.add_argument("--perplexity", type=float)
    sub.add_argument("--iterations", type=_at_least(EXAGGERATION_ITERS + 1))
    sub.add_argument("--plot", action=argparse.BooleanOptionalAction, default=None, help="render a 3-D scatter plot")
    sub.set_defaults(func=visualize_tsne_cmd)

    sub = commands.add_parser("report", parents=[run], help="tabulate every stored evaluation, one row per architecture")
    sub.set_defaults(func=report_cmd)

    sub = commands.add_parser("gate", parents=[run], help="accept or filter one recognized voice command")
    sub.add_argument("--checkpoint", **checkpoint)
    sub.add_argument("--image", type=_existing("file"), required=True, help="camera frame")
    sub.add_argument("--audio", type=_existing("file"), required=True, help="recognized clip (WAV)")
    sub.add_argument("--command", choices=[c.word for c in COMMANDS], required=True, help="recognized command")
    sub.set_defaults(func=gate_cmd)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        return args.func(args)
    except (AvguardError, FileNotFoundError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1
