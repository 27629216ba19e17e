"""Bundle of base model, adapter bank, and expert path parameters."""

from __future__ import annotations

from dataclasses import dataclass

from .experts import (
    CameraFeatureSet,
    DetectionPathParams,
    ExpertConfig,
    PerceptionPathParams,
    build_detect_query,
    build_percept_query,
)
from .fusion import AdapterBank, ExpertQuery, FusedContext
from .numerics import Parameter, Tape
from .transformer import LanguageModel, ModelConfig


@dataclass
class FusedPipeline:
    """Everything trainable, addressable by parameter-name prefix.

    Name namespaces: "lm." for the base model, "adapter." for the per-layer
    cross-attention states and gates, "expert.detect." / "expert.percept."
    for the two query builders.
    """

    model: LanguageModel
    adapters: AdapterBank
    detect: DetectionPathParams
    percept: PerceptionPathParams
    experts: ExpertConfig

    @classmethod
    def build(
        cls,
        model_config: ModelConfig,
        expert_config: ExpertConfig | None = None,
        adapter_init_std: float | None = None,
    ) -> "FusedPipeline":
        expert_config = expert_config or ExpertConfig()
        model = LanguageModel.build(model_config)
        adapters = AdapterBank.build(
            model_config.n_layers, model_config.d_emb, model_config.seed, adapter_init_std
        )
        detect = DetectionPathParams.build(expert_config, model_config.d_emb, model_config.seed)
        percept = PerceptionPathParams.build(expert_config, model_config.d_emb, model_config.seed)
        return cls(model, adapters, detect, percept, expert_config)

    def parameters(self) -> list[Parameter]:
        return [
            *self.model.parameters(),
            *self.adapters.parameters(),
            *self.detect.parameters(),
            *self.percept.parameters(),
        ]

    def named_parameters(self) -> dict[str, Parameter]:
        named = {}
        for p in self.parameters():
            if p.name in named:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            named[p.name] = p
        return named

    def build_queries(
        self, feats: CameraFeatureSet, tape: Tape | None = None
    ) -> tuple[ExpertQuery, ExpertQuery]:
        """Per-sample expert queries, shared by every decoder layer."""
        q_percept = build_percept_query(self.percept, feats, tape)
        q_detect = build_detect_query(self.detect, feats, tape)
        return q_percept, q_detect

    def context(self, feats: CameraFeatureSet) -> FusedContext:
        """Inference-time fused context (queries built off-tape)."""
        q_percept, q_detect = self.build_queries(feats)
        return FusedContext(self.adapters, q_percept, q_detect)
