"""
Command-line interface for mfa-replay.

Every command runs once per recipe seed, in `<output_dir>/seed_<s>/`:

    train-source       source classifier and source GAN
    adapt --domain t   one adaptation step, reading only domain t from disk
    run-sequence       the whole sequence plus a mean ± std summary table
    grid-search        run-sequence for every (lambda_ld, lambda_id, lambda_r1)
    eval               metrics of a saved classifier on every domain
    generate-samples   replay sample sheet of the saved EMA generator
    segment            sliding-window segmentation of one large image

Recipe keys are overridden with dotted flags after the command, e.g.
`--train.lambda_ld 1.0` or `--data.num_domains=2`.
"""

import argparse
import logging
import shutil
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from mfa_replay.config import ExperimentRecipe, RuntimeConfig, TrainingConfig, config_hash, parse_override_value
from mfa_replay.data.toy import synth_toy_sequence
from mfa_replay.data.types import ClassTaxonomy, DomainDataset, DomainSequence
from mfa_replay.errors import DataError, PhaseFailedError, PreconditionError, UsageError
from mfa_replay.evaluation.embeddings import export_embeddings
from mfa_replay.evaluation.report import (
    MetricsReport,
    evaluate,
    format_summary_table,
    plot_f1_evolution,
    summarize_seeds,
    write_confusion_matrices,
    write_report,
    write_summary,
)
from mfa_replay.loaders.images import MANIFEST_NAME, export_sequence, load_dataset, read_image
from mfa_replay.models.generator import export_sample_sheet
from mfa_replay.persistence.records import RECORD_FILE, ExperimentRecorder, load_record
from mfa_replay.recipes import list_recipes, resolve_recipe
from mfa_replay.segmentation import segment, write_segmentation
from mfa_replay.training.sequence import adapt_domain, grid_search, has_state, run_sequence, train_source
from mfa_replay.training.state import CLASSIFIER_CHECKPOINT, GAN_CHECKPOINT, PhaseState, load_state
from mfa_replay.utils.file_access import FileAccessRecorder
from mfa_replay.utils.logging import log_context, setup_structured_logging
from mfa_replay.utils.seeding import seed_everything

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_DATA = 3

TOY_SPEC_NAME = "toy_spec.json"

COMMANDS = (
    "train-source",
    "adapt",
    "run-sequence",
    "grid-search",
    "eval",
    "generate-samples",
    "segment",
)


class CliArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> CliArgumentParser:
    parser = CliArgumentParser(
        prog="mfa-replay",
        description="Continual domain adaptation with feature-driven generative replay",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        allow_abbrev=False,
        epilog=f"""
Built-in recipes: {", ".join(list_recipes())}

Examples:
  mfa-replay run-sequence --recipe toy                 Full method, 3 seeds, summary table
  mfa-replay run-sequence --recipe toy-lb              Source-only lower bound
  mfa-replay train-source --recipe configs/toy.yaml    Source phase from a YAML recipe
  mfa-replay adapt --recipe toy --domain 1             One adaptation step
  mfa-replay grid-search --recipe toy --seeds "[0]"    Loss-weight grid, one seed
  mfa-replay eval --recipe toy --split val             Metrics of the saved classifiers
  mfa-replay segment --recipe toy --image slide.png    Segment a large image
  mfa-replay run-sequence --recipe toy --train.lambda_ld 2.0 --train.disable_mfa=true
        """,
    )
    parser.add_argument("command", choices=COMMANDS, help="Command to run")
    parser.add_argument(
        "--recipe",
        default="toy",
        help="Built-in recipe name or YAML recipe file (default: toy)",
    )
    parser.add_argument("--domain", type=int, help="Target domain index (adapt)")
    parser.add_argument(
        "--checkpoint",
        type=Path,
        help="Run directory or classifier.ckpt to use instead of the recipe's seed folders",
    )
    parser.add_argument("--image", type=Path, help="Image to segment (segment)")
    parser.add_argument(
        "--split",
        choices=["train", "val", "test"],
        default="test",
        help="Split to evaluate (default: test)",
    )
    parser.add_argument(
        "--embeddings",
        type=int,
        default=0,
        metavar="N",
        help="Also export N feature vectors per (domain, class) as CSV (eval)",
    )
    parser.add_argument(
        "--per-cell",
        type=int,
        default=8,
        help="Samples per (domain, class) row of the sample sheet (default: 8)",
    )
    parser.add_argument(
        "--force",
        action="store_true",
        help="Recompute outputs that already exist",
    )
    parser.add_argument("--quiet", action="store_true", help="Suppress status messages")
    return parser


def parse_overrides(tokens: Sequence[str]) -> Dict[str, Any]:
    """
    Turn leftover `--a.b value` / `--a.b=value` tokens into dotted overrides.

    Raises:
        UsageError: A token is not a flag, or a flag has no value
    """
    overrides: Dict[str, Any] = {}
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--") or len(token) <= 2:
            raise UsageError(f"Unexpected argument '{token}'")
        key = token[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"Override '--{key}' needs a value")
            i += 1
            raw = tokens[i]
        overrides[key] = parse_override_value(raw)
        i += 1
    return overrides


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, PhaseFailedError):
        return exit_code_for(error.cause)
    if isinstance(error, UsageError):
        return EXIT_USAGE
    if isinstance(error, (DataError, FileNotFoundError)):
        return EXIT_DATA
    return EXIT_RUNTIME


# ============ DATA ============


def taxonomy_for(recipe: ExperimentRecipe) -> ClassTaxonomy:
    if recipe.data.kind == "toy":
        return ClassTaxonomy.numbered(recipe.data.num_classes)
    if not recipe.data.class_names:
        raise UsageError("directory recipes need data.class_names")
    return ClassTaxonomy(tuple(recipe.data.class_names))


def domain_roots(recipe: ExperimentRecipe) -> List[Path]:
    """One directory per domain; roots[0] is the labeled source."""
    if recipe.data.kind == "toy":
        root = recipe.resolved_data_root()
        return [root / f"domain_{t}" for t in range(recipe.data.num_domains)]
    if len(recipe.data.roots) < 2:
        raise UsageError("directory recipes need at least two data.roots (source and one target)")
    return [Path(r).resolve() for r in recipe.data.roots]


def ensure_toy_data(recipe: ExperimentRecipe) -> None:
    """Write the synthetic sequence under the data root unless every domain is already there."""
    if recipe.data.kind != "toy":
        return
    data = recipe.data
    data_root = recipe.resolved_data_root()
    spec_path = data_root / TOY_SPEC_NAME
    spec = data.model_dump_json(exclude={"data_root"})
    roots = domain_roots(recipe)
    if spec_path.is_file() and all((root / MANIFEST_NAME).is_file() for root in roots):
        if spec_path.read_text(encoding="utf-8") == spec:
            return
        logger.warning(f"Toy data in {data_root} was generated with other settings; regenerating")
    for root in roots:
        if root.exists():
            shutil.rmtree(root)
    sequence = synth_toy_sequence(
        num_domains=data.num_domains,
        num_classes=data.num_classes,
        samples_per_domain=data.samples_per_domain,
        seed=data.toy_seed,
        image_size=data.image_size,
        drop_classes=data.drop_classes,
        split_ratios=data.split_ratios,
    )
    export_sequence(sequence, data_root)
    spec_path.write_text(spec, encoding="utf-8")
    logger.info(f"Toy sequence written to {data_root}")


def load_domain(recipe: ExperimentRecipe, t: int) -> DomainDataset:
    """Load domain t alone; nothing under the other domains' roots is opened."""
    data = recipe.data
    crop_size = data.image_size if data.kind == "toy" else data.crop_size
    return load_dataset(
        domain_roots(recipe)[t],
        taxonomy_for(recipe),
        labeled=(t == 0),
        crop_size=crop_size,
        domain_index=t,
        seed=data.split_seed + t,
        split_ratios=data.split_ratios,
    )


def load_sequence(recipe: ExperimentRecipe) -> DomainSequence:
    domains = [load_domain(recipe, t) for t in range(len(domain_roots(recipe)))]
    return DomainSequence(source=domains[0], targets=tuple(domains[1:]))


def available_domains(recipe: ExperimentRecipe) -> List[DomainDataset]:
    """Every domain still on disk; missing ones are skipped with a warning."""
    datasets = []
    for t, root in enumerate(domain_roots(recipe)):
        if not root.is_dir():
            logger.warning(f"Domain {t} is not on disk ({root}); it is left out of the evaluation")
            continue
        datasets.append(load_domain(recipe, t))
    if not datasets:
        raise FileNotFoundError(f"no domain of recipe '{recipe.name}' is on disk")
    return datasets


# ============ RUN DIRECTORIES ============


def seed_config(recipe: ExperimentRecipe, seed: int) -> TrainingConfig:
    return recipe.train.model_copy(update={"seed": seed})


def run_dir_for(recipe: ExperimentRecipe, seed: int) -> Path:
    return recipe.resolved_output_dir() / f"seed_{seed}"


def _metadata(recipe: ExperimentRecipe, config: TrainingConfig, command: str) -> Dict[str, Any]:
    return {
        "recipe": recipe.name,
        "command": command,
        "seed": config.seed,
        "config_hash": config_hash(config),
        "config": config.model_dump(mode="json"),
    }


def _checkpoint_targets(recipe: ExperimentRecipe, checkpoint: Optional[Path]) -> List[Tuple[int, Path, bool]]:
    """(seed, run directory, check config hash) for every state a command reads."""
    if checkpoint is None:
        return [(seed, run_dir_for(recipe, seed), True) for seed in recipe.seeds]
    directory = checkpoint.parent if checkpoint.suffix == ".ckpt" else checkpoint
    return [(recipe.seeds[0], directory, False)]


def _load_saved(recipe: ExperimentRecipe, seed: int, directory: Path, check_hash: bool) -> PhaseState:
    if not (directory / CLASSIFIER_CHECKPOINT).is_file():
        raise FileNotFoundError(f"no {CLASSIFIER_CHECKPOINT} in {directory}")
    return load_state(seed_config(recipe, seed), directory, check_hash=check_hash)


def _run_recorded(recorder: ExperimentRecorder, action: Callable[[], Any]) -> Any:
    try:
        result = action()
    except Exception as e:
        recorder.finish("failed", error=e)
        raise
    recorder.finish("completed")
    return result


# ============ COMMANDS ============


def cmd_train_source(recipe: ExperimentRecipe, args: argparse.Namespace) -> None:
    ensure_toy_data(recipe)
    source = load_domain(recipe, 0)
    for seed in recipe.seeds:
        config = seed_config(recipe, seed)
        run_dir = run_dir_for(recipe, seed)
        if has_state(run_dir) and not args.force:
            _say(args, f"✓ seed {seed}: source state already in {run_dir} (--force retrains)")
            continue
        (run_dir / GAN_CHECKPOINT).unlink(missing_ok=True)
        seed_everything(seed)
        recorder = ExperimentRecorder(run_dir, metadata=_metadata(recipe, config, "train-source"))
        _run_recorded(recorder, lambda: train_source(config, source, run_dir, recorder))
        _say(args, f"✓ seed {seed}: source phase done, state in {run_dir}")


def cmd_adapt(recipe: ExperimentRecipe, args: argparse.Namespace) -> None:
    roots = domain_roots(recipe)
    t = args.domain
    if t is None:
        raise UsageError("adapt needs --domain")
    if not 1 <= t < len(roots):
        raise UsageError(f"--domain must be a target index in [1, {len(roots) - 1}], got {t}")

    for seed in recipe.seeds:
        config = seed_config(recipe, seed)
        run_dir = run_dir_for(recipe, seed)
        recorder = ExperimentRecorder.resume(run_dir, metadata=_metadata(recipe, config, "adapt"))
        with FileAccessRecorder() as audit:
            try:
                target = load_domain(recipe, t)
                state = adapt_domain(config, target, run_dir, recorder)
            except Exception as e:
                recorder.finish("failed", error=e)
                raise

        prior_reads = {str(d): audit.opened_under(roots[d]) for d in range(t)}
        violations = sum(len(paths) for paths in prior_reads.values())
        recorder.set(
            f"data_access_audit_domain_{t}",
            {"files_opened": len(audit.paths), "prior_domain_reads": prior_reads},
        )
        if violations:
            error = PreconditionError(f"adapting to domain {t} read {violations} files of earlier domains")
            recorder.finish("failed", error=error)
            raise error
        recorder.finish("completed")
        _say(args, f"✓ seed {seed}: state at domain {state.t}, no earlier-domain file opened")


def _summarize(recipe: ExperimentRecipe, reports: List[MetricsReport], stem: str, args: argparse.Namespace) -> None:
    frame = summarize_seeds(reports)
    txt_path, csv_path = write_summary(frame, recipe.resolved_output_dir(), stem=stem)
    if not args.quiet:
        print(f"\n{recipe.name} ({len(reports)} seed{'s' if len(reports) != 1 else ''})")
        print(format_summary_table(frame))
        print(f"\n  Summary: {txt_path}\n  CSV:     {csv_path}")


def cmd_run_sequence(recipe: ExperimentRecipe, args: argparse.Namespace) -> None:
    ensure_toy_data(recipe)
    sequence = load_sequence(recipe)
    records: List[Dict[str, Any]] = []
    for seed in recipe.seeds:
        config = seed_config(recipe, seed)
        run_dir = run_dir_for(recipe, seed)
        record = _completed_record(run_dir)
        if record is not None and not args.force:
            _say(args, f"✓ seed {seed}: already completed in {run_dir} (--force reruns)")
        else:
            if args.force and run_dir.exists():
                shutil.rmtree(run_dir)
            seed_everything(seed)
            recorder = ExperimentRecorder(run_dir, metadata=_metadata(recipe, config, "run-sequence"))
            record = run_sequence(config, sequence, run_dir, recorder)
            _say(args, f"✓ seed {seed}: overall F1 {100 * record['final']['overall_f1']:.1f}")
        records.append(record)

    plot_f1_evolution(records, recipe.resolved_output_dir() / "f1_evolution.png")
    _summarize(recipe, [MetricsReport.model_validate(r["final"]) for r in records], "summary", args)


def _completed_record(run_dir: Path) -> Optional[Dict[str, Any]]:
    path = run_dir / RECORD_FILE
    if not path.is_file():
        return None
    record = load_record(path)
    if record.get("status") != "completed" or "final" not in record:
        return None
    return record


def cmd_grid_search(recipe: ExperimentRecipe, args: argparse.Namespace) -> None:
    ensure_toy_data(recipe)
    sequence = load_sequence(recipe)
    for seed in recipe.seeds:
        config = seed_config(recipe, seed)
        grid_dir = run_dir_for(recipe, seed) / "grid"
        if (grid_dir / "grid_search.json").is_file() and not args.force:
            _say(args, f"✓ seed {seed}: grid already searched in {grid_dir} (--force reruns)")
            continue
        seed_everything(seed)
        summary = grid_search(config, sequence, grid_dir)
        selected = summary["selected"]
        _say(
            args,
            f"✓ seed {seed}: selected lambda_ld={selected['lambda_ld']} lambda_id={selected['lambda_id']} "
            f"lambda_r1={selected['lambda_r1']} (surrogate {selected['selection_surrogate']:.4f})",
        )


def cmd_eval(recipe: ExperimentRecipe, args: argparse.Namespace) -> None:
    targets = _checkpoint_targets(recipe, args.checkpoint)
    for _, directory, _ in targets:
        if not (directory / CLASSIFIER_CHECKPOINT).is_file():
            raise FileNotFoundError(f"no {CLASSIFIER_CHECKPOINT} in {directory}")
    datasets = available_domains(recipe)

    reports = []
    for seed, directory, check_hash in targets:
        config = seed_config(recipe, seed)
        state = _load_saved(recipe, seed, directory, check_hash)
        report = evaluate(
            state.classifier,
            datasets,
            split=args.split,
            metadata={"seed": seed, "checkpoint": str(directory), "domain": state.t},
            tap=config.uda_tap,
            seed=seed,
        )
        eval_dir = directory / "eval"
        write_report(report, eval_dir / f"metrics_{args.split}.json")
        write_confusion_matrices(report, eval_dir / f"confusion_{args.split}", state.class_names)
        if args.embeddings > 0:
            export_embeddings(
                state.classifier,
                datasets,
                args.embeddings,
                eval_dir / f"embeddings_{args.split}.csv",
                tap=config.uda_tap,
                seed=seed,
                split=args.split,
            )
        reports.append(report)
        _say(args, f"✓ seed {seed}: {args.split} overall F1 {100 * report.overall_f1:.1f} ({eval_dir})")
    _summarize(recipe, reports, f"eval_{args.split}", args)


def cmd_generate_samples(recipe: ExperimentRecipe, args: argparse.Namespace) -> None:
    for seed, directory, check_hash in _checkpoint_targets(recipe, args.checkpoint):
        state = _load_saved(recipe, seed, directory, check_hash)
        if state.ema_generator is None:
            raise PreconditionError(f"{directory} holds no trained generator")
        path = export_sample_sheet(
            state.ema_generator,
            state.num_classes,
            range(state.covered_domains),
            directory / "samples" / "replay_samples.png",
            seed=seed,
            per_cell=args.per_cell,
        )
        _say(args, f"✓ seed {seed}: sample sheet for {state.covered_domains} domain(s) at {path}")


def cmd_segment(recipe: ExperimentRecipe, args: argparse.Namespace) -> None:
    if args.image is None:
        raise UsageError("segment needs --image")
    image = read_image(args.image)
    for seed, directory, check_hash in _checkpoint_targets(recipe, args.checkpoint):
        state = _load_saved(recipe, seed, directory, check_hash)
        class_map, prob_maps = segment(state.classifier, image, recipe.segmentation)
        paths = write_segmentation(
            class_map, prob_maps, state.class_names, directory / "segmentation", stem=args.image.stem
        )
        _say(args, f"✓ seed {seed}: {class_map.shape[0]}x{class_map.shape[1]} class map at {paths['class_map']}")


COMMAND_HANDLERS: Dict[str, Callable[[ExperimentRecipe, argparse.Namespace], None]] = {
    "train-source": cmd_train_source,
    "adapt": cmd_adapt,
    "run-sequence": cmd_run_sequence,
    "grid-search": cmd_grid_search,
    "eval": cmd_eval,
    "generate-samples": cmd_generate_samples,
    "segment": cmd_segment,
}


def _say(args: argparse.Namespace, message: str) -> None:
    if not args.quiet:
        print(message)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one command.

    Returns:
        Exit status: 0 success, 1 usage, 2 runtime, 3 data
    """
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        recipe = resolve_recipe(args.recipe, parse_overrides(extra))
        try:
            RuntimeConfig.validate_required()
        except ValueError as e:
            raise UsageError(str(e)) from e
        setup_structured_logging(
            log_level=RuntimeConfig.LOG_LEVEL,
            json_output=RuntimeConfig.LOG_JSON,
            log_file=str(recipe.resolved_output_dir() / "logs" / "mfa_replay.log"),
        )
        with log_context(logger, args.command, recipe=recipe.name, seeds=recipe.seeds):
            COMMAND_HANDLERS[args.command](recipe, args)
    except Exception as e:
        code = exit_code_for(e)
        print(f"\n✗ {type(e).__name__}: {e}", file=sys.stderr)
        logger.error(f"{type(e).__name__}: {e}", exc_info=code == EXIT_RUNTIME, extra={"exit_code": code})
        return code
    return EXIT_OK
