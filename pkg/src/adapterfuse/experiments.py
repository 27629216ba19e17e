"""Desk-scale experiments: adapter-only overfit and the detection-value run.

Both are deterministic functions of their seed and are what the acceptance
suite drives; the detection-value experiment also backs the headline claim
that the detection path is what earns the Match score.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .dataset import QAPair, SynthCorpus, synth_corpus
from .experts import CameraFeatureSet, ExpertConfig, load_features
from .metrics import MetricReport, PredictionPair, StubJudge, compute_report
from .pipeline import FusedPipeline
from .training import FreezePlan, TrainConfig, TrainLog, dataset_loss, run_stage, stage_config
from .transformer import ModelConfig, generate


ADAPTER_INIT_STD = 0.3


def experiment_model_config(seed: int) -> ModelConfig:
    return ModelConfig(d_emb=32, n_layers=2, max_seq=64, seed=seed, init_std=0.3)


def experiment_expert_config() -> ExpertConfig:
    return ExpertConfig(n_det=2)


def build_experiment_pipeline(seed: int) -> FusedPipeline:
    return FusedPipeline.build(
        experiment_model_config(seed),
        experiment_expert_config(),
        adapter_init_std=ADAPTER_INIT_STD,
    )


def greedy_answers(
    pipeline: FusedPipeline,
    pairs: Sequence[QAPair],
    features: dict[str, CameraFeatureSet],
    max_new: int = 16,
) -> list[tuple[str, str, str, int]]:
    """Greedy fused decoding for every pair: (id, output, truth, tag) rows.

    max_new is clamped so generation never exceeds the model's max_seq.
    """
    vocab = pipeline.model.vocab
    rows = []
    for qa in pairs:
        prompt = [vocab.bos_id] + vocab.encode(qa.question)
        budget = min(max_new, pipeline.model.config.max_seq - len(prompt))
        context = pipeline.context(features[qa.id])
        tokens = generate(pipeline.model, prompt, context, max_new=budget)
        output = vocab.decode(tokens[len(prompt):])
        rows.append((qa.id, output, qa.answer, qa.tag))
    return rows


@dataclass
class OverfitResult:
    base_loss: float
    fused_loss_at_init: float
    log: TrainLog
    final_loss: float
    steps: int


def overfit_run(
    seed: int,
    size: int = 4,
    max_steps: int = 500,
    learning_rate: float = 0.014,
    momentum: float = 0.9,
    weight_decay: float = 0.05,
    corpus_dir=None,
) -> OverfitResult:
    """Drive a tiny corpus to memorization through stage-1 parameters only.

    Also records the zero-gate warm start: the fused loss before any update
    equals the frozen base model's loss exactly.
    """
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        corpus = synth_corpus(
            seed, size, corpus_dir or tmp, expert_config=experiment_expert_config()
        )
        pipeline = build_experiment_pipeline(seed)
        features = {
            qa.id: load_features(path)
            for qa, path in zip(corpus.pairs, corpus.feature_paths)
        }
        base_loss = dataset_loss(pipeline, corpus.pairs, features, use_adapters=False)
        fused_loss = dataset_loss(pipeline, corpus.pairs, features, use_adapters=True)
        batch_size = 2
        steps_per_epoch = -(-size // batch_size)
        epochs = max_steps // steps_per_epoch
        config = TrainConfig(
            learning_rate=learning_rate,
            weight_decay=weight_decay,
            batch_size=batch_size,
            epochs=epochs,
            momentum=momentum,
            seed=seed,
            stage=1,
        )
        plan = FreezePlan.default(pipeline.model.config.n_layers)
        log = run_stage(pipeline, corpus.pairs, features, config, plan)
        final_loss = dataset_loss(pipeline, corpus.pairs, features, use_adapters=True)
        return OverfitResult(
            base_loss=base_loss,
            fused_loss_at_init=fused_loss,
            log=log,
            final_loss=final_loss,
            steps=len(log.records),
        )


@dataclass
class DetectionValueResult:
    match_fused: float
    match_ablated: float
    report_fused: MetricReport
    report_ablated: MetricReport
    log_fused: TrainLog
    log_ablated: TrainLog
    rows_fused: list[tuple[str, str, str, int]]
    rows_ablated: list[tuple[str, str, str, int]]

    @property
    def match_gap(self) -> float:
        return self.match_fused - self.match_ablated


def _train_two_stages(
    pipeline: FusedPipeline,
    corpus: SynthCorpus,
    features: dict[str, CameraFeatureSet],
    base_config: TrainConfig,
    plan: FreezePlan,
    stage2_epochs: int,
) -> TrainLog:
    log = run_stage(pipeline, corpus.pairs, features, base_config, plan)
    stage2 = stage_config(base_config, stage=2, epochs=stage2_epochs)
    tail = run_stage(
        pipeline, corpus.pairs, features, stage2, plan, step_offset=len(log.records)
    )
    log.records.extend(tail.records)
    return log


def detection_value_experiment(
    seed: int,
    size: int = 200,
    stage1_epochs: int = 40,
    stage2_epochs: int = 5,
    learning_rate: float = 0.02,
    momentum: float = 0.9,
    weight_decay: float = 0.05,
    out_dir=None,
) -> DetectionValueResult:
    """Identically seeded fused vs detect-gate-clamped runs on one corpus.

    Both runs share the corpus, the initialization, and the batch order; the
    only difference is the ablation's freeze plan, which pins every detect
    gate at zero. The returned Match scores quantify what the detection path
    contributes. With `out_dir` set, reports, logs, predictions, and the
    comparison figure are written there.
    """
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        corpus_root = Path(out_dir) / "corpus" if out_dir is not None else Path(tmp)
        corpus = synth_corpus(seed, size, corpus_root, expert_config=experiment_expert_config())
        features = {
            qa.id: load_features(path)
            for qa, path in zip(corpus.pairs, corpus.feature_paths)
        }
        base_config = TrainConfig(
            learning_rate=learning_rate,
            weight_decay=weight_decay,
            batch_size=2,
            epochs=stage1_epochs,
            momentum=momentum,
            seed=seed,
            stage=1,
        )
        n_layers = experiment_model_config(seed).n_layers

        runs = {}
        for label, clamp in (("fused", False), ("ablated", True)):
            pipeline = build_experiment_pipeline(seed)
            plan = FreezePlan.default(n_layers, clamp_detect_gate=clamp)
            log = _train_two_stages(pipeline, corpus, features, base_config, plan, stage2_epochs)
            rows = greedy_answers(pipeline, corpus.pairs, features)
            pairs = [PredictionPair(output, truth, tag) for _, output, truth, tag in rows]
            report = compute_report(pairs, StubJudge())
            runs[label] = (log, rows, report)

    result = DetectionValueResult(
        match_fused=runs["fused"][2].match,
        match_ablated=runs["ablated"][2].match,
        report_fused=runs["fused"][2],
        report_ablated=runs["ablated"][2],
        log_fused=runs["fused"][0],
        log_ablated=runs["ablated"][0],
        rows_fused=runs["fused"][1],
        rows_ablated=runs["ablated"][1],
    )
    if out_dir is not None:
        _write_experiment_outputs(Path(out_dir), result)
    return result


def _write_experiment_outputs(out_dir: Path, result: DetectionValueResult) -> None:
    from .reporting import (
        loss_figure,
        match_comparison_figure,
        write_predictions,
        write_report,
    )

    out_dir.mkdir(parents=True, exist_ok=True)
    write_report(out_dir / "report_fused.txt", result.report_fused, "fused")
    write_report(out_dir / "report_ablated.txt", result.report_ablated, "detect-gate-clamped")
    write_predictions(out_dir / "predictions_fused.tsv", result.rows_fused)
    write_predictions(out_dir / "predictions_ablated.tsv", result.rows_ablated)
    result.log_fused.append_to(out_dir / "train_log_fused.csv")
    result.log_ablated.append_to(out_dir / "train_log_ablated.csv")
    loss_figure(result.log_fused.records, out_dir / "loss_fused.png")
    loss_figure(result.log_ablated.records, out_dir / "loss_ablated.png")
    match_comparison_figure(
        result.match_fused, result.match_ablated, out_dir / "match_comparison.png"
    )
