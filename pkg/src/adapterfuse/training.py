"""Two-stage fine-tuning: answer-masked cross-entropy, SGD with decoupled
weight decay, and strict prefix-based parameter freezing.

Stage 1 trains the detection path (separators + adaptation encoder +
projection), optionally the perception path, and the adapter cross-attention
weights with their zero gates (without the gates no gradient would reach the
expert paths at initialization). Stage 2 trains only the decoder layers'
bias vectors. The frozen feature encoders are not parameters at all: they
live behind the feature-file interface.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from statistics import fmean
from typing import Sequence

import numpy as np

from .dataset import QAPair
from .errors import CapacityError, DivergenceError
from .experts import CameraFeatureSet
from .fusion import fused_forward
from .numerics import Parameter, Tape, cross_entropy, matmul, param_or_value, seeded_rng
from .pipeline import FusedPipeline
from .transformer import transformer_forward


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings. The defaults are the documented reproduction
    values; desk-scale experiments pass much larger toy learning rates."""

    learning_rate: float = 1e-5
    weight_decay: float = 0.05
    batch_size: int = 2
    epochs: int = 1
    momentum: float = 0.0
    seed: int = 0
    stage: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")


@dataclass(frozen=True)
class FreezePlan:
    """Per-stage sets of trainable parameter-name prefixes."""

    stage1: tuple[str, ...]
    stage2: tuple[str, ...]

    @classmethod
    def default(
        cls,
        n_layers: int,
        train_perception: bool = True,
        clamp_detect_gate: bool = False,
    ) -> "FreezePlan":
        """Stage 1: expert paths plus adapter states; stage 2: decoder biases.

        `train_perception=False` keeps the perception adaptation frozen (the
        warm-start configuration). `clamp_detect_gate=True` freezes every
        detect gate at its zero init, which silences the detection modality
        for the whole run.
        """
        stage1: list[str] = ["expert.detect."]
        if train_perception:
            stage1.append("expert.percept.")
        if clamp_detect_gate:
            for layer in range(n_layers):
                stage1.append(f"adapter.layer{layer}.percept.")
                stage1.append(f"adapter.layer{layer}.detect.w_")
        else:
            stage1.append("adapter.")
        stage2 = tuple(f"lm.layer{layer}.b_" for layer in range(n_layers))
        return cls(tuple(stage1), stage2)

    def prefixes(self, stage: int) -> tuple[str, ...]:
        if stage == 1:
            return self.stage1
        if stage == 2:
            return self.stage2
        raise ValueError("stage must be 1 or 2")

    def apply(self, stage: int, named: dict[str, Parameter]) -> list[str]:
        """Set trainable flags for the stage; returns the trainable names."""
        prefixes = self.prefixes(stage)
        trainable = []
        for name, p in named.items():
            p.trainable = any(name.startswith(prefix) for prefix in prefixes)
            if p.trainable:
                trainable.append(name)
        return trainable


def encode_qa(pipeline: FusedPipeline, qa: QAPair) -> tuple[list[int], list[int], list[int]]:
    """Token ids for [bos] question answer [eos], shifted for next-token loss.

    Returns (inputs, targets, loss_positions): inputs[i] predicts targets[i],
    and only positions whose target is an answer token (or the closing [eos])
    contribute to the loss.
    """
    vocab = pipeline.model.vocab
    ids = [vocab.bos_id] + vocab.encode(qa.question) + vocab.encode(qa.answer) + [vocab.eos_id]
    if len(ids) > pipeline.model.config.max_seq + 1:
        raise CapacityError(
            f"qa {qa.id!r} needs {len(ids)} tokens, max_seq is {pipeline.model.config.max_seq}"
        )
    inputs = ids[:-1]
    targets = ids[1:]
    first_answer = 1 + len(vocab.encode(qa.question))
    positions = list(range(first_answer - 1, len(inputs)))
    return inputs, targets, positions


def answer_loss(
    pipeline: FusedPipeline,
    qa: QAPair,
    feats: CameraFeatureSet,
    tape: Tape | None = None,
    use_adapters: bool = True,
):
    """Mean next-token cross-entropy over answer positions only.

    With `use_adapters=False` the loss runs the plain base model; with fresh
    (zero-gate) adapters both paths agree exactly.
    """
    inputs, targets, positions = encode_qa(pipeline, qa)
    if use_adapters:
        q_percept, q_detect = pipeline.build_queries(feats, tape)
        z = fused_forward(pipeline.model, pipeline.adapters, q_percept, q_detect, inputs, tape)
    else:
        z = transformer_forward(pipeline.model, inputs, tape)
    logits = matmul(z, param_or_value(pipeline.model.head, tape))
    return cross_entropy(logits, targets, positions)


def sgd_step(
    params: Sequence[Parameter],
    config: TrainConfig,
    momentum_state: dict[str, np.ndarray] | None = None,
) -> None:
    """p <- p - lr * (grad + weight_decay * p) for trainable parameters.

    Frozen parameters stay bit-identical. With momentum > 0 the gradient
    term is replaced by its running buffer (decay stays decoupled).
    """
    for p in params:
        if not p.trainable:
            continue
        grad = p.optimizer_grad()
        if not np.isfinite(grad).all():
            raise DivergenceError(f"non-finite gradient for parameter {p.name!r}")
        if config.momentum > 0.0 and momentum_state is not None:
            buf = momentum_state.get(p.name)
            if buf is None:
                buf = np.zeros_like(grad)
            buf = config.momentum * buf + grad
            momentum_state[p.name] = buf
            step_dir = buf
        else:
            step_dir = grad
        p.value -= config.learning_rate * (step_dir + config.weight_decay * p.value)


@dataclass
class TrainStep:
    step: int
    stage: int
    loss: float


@dataclass
class TrainLog:
    records: list[TrainStep] = field(default_factory=list)

    def lines(self) -> list[str]:
        return [f"{r.step},{r.stage},{r.loss:.10f}" for r in self.records]

    def append_to(self, path) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            for line in self.lines():
                fh.write(line + "\n")

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss if self.records else float("nan")


def run_stage(
    pipeline: FusedPipeline,
    pairs: Sequence[QAPair],
    features: dict[str, CameraFeatureSet],
    config: TrainConfig,
    plan: FreezePlan,
    log_path=None,
    step_offset: int = 0,
) -> TrainLog:
    """One fine-tuning stage over seed-shuffled batches.

    Gradients are averaged within each batch; the optimizer only ever touches
    the stage's trainable prefixes. Records one (step, stage, loss) line per
    batch and optionally appends them to `log_path`.
    """
    if not pairs:
        raise ValueError("run_stage needs a non-empty dataset")
    named = pipeline.named_parameters()
    plan.apply(config.stage, named)
    params = list(named.values())
    rng = seeded_rng(config.seed, f"train-stage{config.stage}")
    momentum_state: dict[str, np.ndarray] = {}
    log = TrainLog()
    step = step_offset
    for _ in range(config.epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            for p in params:
                p.zero_grad()
            losses = []
            for index in batch:
                qa = pairs[int(index)]
                tape = Tape()
                loss = answer_loss(pipeline, qa, features[qa.id], tape)
                tape.backward(loss, seed=1.0 / len(batch))
                losses.append(float(loss.data[0, 0]))
            sgd_step(params, config, momentum_state)
            step += 1
            log.records.append(TrainStep(step, config.stage, fmean(losses)))
    if log_path is not None:
        log.append_to(log_path)
    return log


def dataset_loss(
    pipeline: FusedPipeline,
    pairs: Sequence[QAPair],
    features: dict[str, CameraFeatureSet],
    use_adapters: bool = True,
) -> float:
    """Mean answer loss over a dataset (no gradients)."""
    return fmean(
        float(answer_loss(pipeline, qa, features[qa.id], use_adapters=use_adapters))
        for qa in pairs
    )


def stage_config(config: TrainConfig, stage: int, epochs: int | None = None) -> TrainConfig:
    """Copy of `config` targeting another stage (and optionally epoch count)."""
    updates: dict = {"stage": stage}
    if epochs is not None:
        updates["epochs"] = epochs
    return replace(config, **updates)
