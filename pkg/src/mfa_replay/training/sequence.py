"""
Drivers above the single phases: whole-sequence runs, the per-command
building blocks the CLI uses, and the hyperparameter grid search.
"""

import json
import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from mfa_replay.config import TrainingConfig, config_hash, grid_points
from mfa_replay.data.types import DomainDataset, DomainSequence
from mfa_replay.errors import PhaseFailedError, PreconditionError
from mfa_replay.evaluation.report import MetricsReport, evaluate, write_confusion_matrices, write_report
from mfa_replay.persistence.records import ExperimentRecorder
from mfa_replay.training.phases import (
    adapt_classifier,
    adapt_gan,
    selection_split,
    surrogate_score,
    train_source_classifier,
    train_source_gan,
)
from mfa_replay.training.state import (
    CLASSIFIER_CHECKPOINT,
    PhaseState,
    build_classifier,
    load_state,
    save_state,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _recorder_for(config: TrainingConfig, output_dir: Path, recorder: Optional[ExperimentRecorder]) -> ExperimentRecorder:
    if recorder is not None:
        return recorder
    return ExperimentRecorder(
        output_dir,
        metadata={"config_hash": config_hash(config), "seed": config.seed, "config": config.model_dump(mode="json")},
    )


def evaluate_after(
    phase: str,
    state: PhaseState,
    datasets: List[DomainDataset],
    recorder: ExperimentRecorder,
    config: TrainingConfig,
) -> MetricsReport:
    """Score the current classifier on every given domain and log it as an F1-evolution point."""
    report = evaluate(
        state.classifier,
        datasets,
        split="test",
        metadata={"after_phase": phase, "domain": state.t, "seed": config.seed, "steps": dict(state.steps)},
        tap=config.uda_tap,
        seed=config.seed,
    )
    recorder.record_evaluation(phase, state.t, report.model_dump(mode="json"))
    return report


def _finish_phase(
    phase: str,
    state: PhaseState,
    config: TrainingConfig,
    output_dir: Path,
    recorder: ExperimentRecorder,
    started: float,
) -> None:
    state.mark_completed(phase)
    paths = save_state(state, config, output_dir)
    recorder.record_phase(
        phase,
        domain=state.t,
        step=state.steps.get(phase, 0),
        metrics=dict(state.best),
        checkpoints={k: str(v) for k, v in paths.items()},
        duration_seconds=round(time.perf_counter() - started, 3),
    )


# ============ BUILDING BLOCKS ============


def train_source(
    config: TrainingConfig,
    source: DomainDataset,
    output_dir: PathLike,
    recorder: ExperimentRecorder,
    evaluation_domains: Optional[List[DomainDataset]] = None,
) -> PhaseState:
    """Source classifier then (unless the run is the lower bound) the source GAN."""
    output_dir = Path(output_dir)
    state = PhaseState(
        t=0,
        classifier=build_classifier(config, source.taxonomy.size, source.image_shape),
        label_prior=source.label_prior,
        class_names=source.taxonomy.names,
    )
    domains = evaluation_domains or [source]

    started = time.perf_counter()
    train_source_classifier(config, source, state.classifier, state=state)
    _finish_phase("train_source_classifier", state, config, output_dir, recorder, started)
    evaluate_after("train_source_classifier", state, domains, recorder, config)

    if config.disable_adaptation:
        logger.info("Adaptation disabled; the source-only classifier is the final model")
        return state

    started = time.perf_counter()
    train_source_gan(config, source, state.classifier, state=state, output_dir=output_dir)
    _finish_phase("train_source_gan", state, config, output_dir, recorder, started)
    evaluate_after("train_source_gan", state, domains, recorder, config)
    return state


def adapt_to(
    config: TrainingConfig,
    state: PhaseState,
    target: DomainDataset,
    output_dir: PathLike,
    recorder: ExperimentRecorder,
    evaluation_domains: Optional[List[DomainDataset]] = None,
) -> PhaseState:
    """Classifier adaptation, then GAN adaptation unless replay is source-only."""
    output_dir = Path(output_dir)
    domains = evaluation_domains or [target]
    t = target.domain_index

    started = time.perf_counter()
    adapt_classifier(config, state, target, output_dir=output_dir)
    _finish_phase("adapt_classifier", state, config, output_dir, recorder, started)
    evaluate_after("adapt_classifier", state, domains, recorder, config)

    if config.disable_cg:
        logger.info(f"Source-only replay: the generator is not adapted to domain {t}")
        return state
    return adapt_generator_to(config, state, target, output_dir, recorder, domains)


def adapt_generator_to(
    config: TrainingConfig,
    state: PhaseState,
    target: DomainDataset,
    output_dir: PathLike,
    recorder: ExperimentRecorder,
    evaluation_domains: Optional[List[DomainDataset]] = None,
) -> PhaseState:
    """GAN adaptation to the domain the classifier was just adapted to."""
    output_dir = Path(output_dir)
    started = time.perf_counter()
    adapt_gan(config, state, target, output_dir=output_dir)
    _finish_phase("adapt_gan", state, config, output_dir, recorder, started)
    evaluate_after("adapt_gan", state, evaluation_domains or [target], recorder, config)
    return state


def has_state(output_dir: PathLike) -> bool:
    return (Path(output_dir) / CLASSIFIER_CHECKPOINT).exists()


def adapt_domain(
    config: TrainingConfig,
    target: DomainDataset,
    output_dir: PathLike,
    recorder: ExperimentRecorder,
) -> PhaseState:
    """
    Continue a run from its saved state with only domain t in memory.

    A state whose classifier is at t but whose GAN adaptation to t never
    finished resumes with that GAN phase. Re-running on a state that
    already covers t in full is a no-op.

    Raises:
        FileNotFoundError: No saved state in output_dir
        PreconditionError: The saved state is not at domain t - 1
    """
    output_dir = Path(output_dir)
    if not has_state(output_dir):
        raise FileNotFoundError(f"no saved state in {output_dir}; run train-source first")
    state = load_state(config, output_dir)
    t = target.domain_index
    if state.t == t and not config.disable_cg and not state.has_completed("adapt_gan", t):
        logger.info(f"Classifier already adapted to domain {t}; resuming GAN adaptation")
        return adapt_generator_to(config, state, target, output_dir, recorder, [target])
    if state.t >= t:
        logger.info(f"State already covers domain {t}; nothing to do")
        return state
    if state.t != t - 1:
        raise PreconditionError(f"the saved state is at domain {state.t}; adapt domain {state.t + 1} first")
    if config.disable_adaptation:
        raise PreconditionError("adaptation is disabled in this configuration")
    return adapt_to(config, state, target, output_dir, recorder, [target])


# ============ SEQUENCE ============


def run_sequence(
    config: TrainingConfig,
    sequence: DomainSequence,
    output_dir: PathLike,
    recorder: Optional[ExperimentRecorder] = None,
) -> Dict[str, Any]:
    """
    Source training, then adaptation to each target in order, with an
    evaluation on every domain's test split after each phase.

    Returns:
        The experiment record (also written to output_dir/record.json)

    Raises:
        PhaseFailedError: A phase failed; the partial record is on disk
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    recorder = _recorder_for(config, output_dir, recorder)
    domains = list(sequence.domains)
    phase = "train_source"
    try:
        state = train_source(config, sequence.source, output_dir, recorder, domains)
        if not config.disable_adaptation:
            for target in sequence.targets:
                phase = f"adapt_domain_{target.domain_index}"
                adapt_to(config, state, target, output_dir, recorder, domains)

        phase = "final_evaluation"
        final = evaluate(
            state.classifier, domains, split="test",
            metadata={"seed": config.seed, "config_hash": config_hash(config), "domain": state.t},
            tap=config.uda_tap, seed=config.seed,
        )
        write_report(final, output_dir / "metrics.json")
        write_confusion_matrices(final, output_dir / "confusion", sequence.taxonomy.names)
        last = sequence.targets[-1] if sequence.targets else sequence.source
        recorder.set("final", final.model_dump(mode="json"))
        recorder.set("selection_surrogate", surrogate_score(state.classifier, last, selection_split(last)))
        recorder.finish("completed")
    except Exception as e:
        record_path = recorder.finish("failed", error=e)
        raise PhaseFailedError(phase, record_path, e) from e
    return recorder.record


def grid_search(config: TrainingConfig, sequence: DomainSequence, output_dir: PathLike) -> Dict[str, Any]:
    """
    run_sequence for every (lambda_ld, lambda_id, lambda_r1) grid point.

    The selected point has the lowest InfoMax surrogate of the final model on
    the last target's validation split.
    """
    output_dir = Path(output_dir)
    points = []
    for index, point in enumerate(grid_points(config.grid)):
        point_config = TrainingConfig.model_validate({**config.model_dump(), **point})
        point_dir = output_dir / f"point_{index:02d}"
        logger.info(f"Grid point {index}: {point}", extra={"grid_point": index, **point})
        record = run_sequence(point_config, sequence, point_dir)
        points.append(
            {
                "index": index,
                **point,
                "selection_surrogate": record["selection_surrogate"],
                "overall_f1": record["final"]["overall_f1"],
                "run_dir": str(point_dir),
            }
        )
    selected = min(points, key=lambda p: p["selection_surrogate"])
    summary = {"points": points, "selected": selected}
    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / "grid_search.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    logger.info(f"Selected grid point {selected['index']}", extra={"selected": selected["index"]})
    return summary
