"""Single-file checkpoint container for a full pipeline.

Format: one magic line, then a JSON document holding both configs and every
named parameter (shape, trainable flag, row-major values). Floats are
serialized with Python's shortest round-trip repr, so save -> load is
bit-exact and identical pipelines produce byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .errors import CheckpointError
from .experts import ExpertConfig
from .pipeline import FusedPipeline
from .transformer import ModelConfig

CHECKPOINT_MAGIC = "ADAPTERFUSE-CKPT-v1"


def dumps_checkpoint(pipeline: FusedPipeline) -> str:
    params = {
        name: {
            "shape": list(p.shape),
            "trainable": p.trainable,
            "data": p.value.tolist(),
        }
        for name, p in sorted(pipeline.named_parameters().items())
    }
    body = {
        "model": asdict(pipeline.model.config),
        "experts": asdict(pipeline.experts),
        "params": params,
    }
    return CHECKPOINT_MAGIC + "\n" + json.dumps(body, sort_keys=True) + "\n"


def save_checkpoint(path, pipeline: FusedPipeline) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_checkpoint(pipeline))


def loads_checkpoint(text: str) -> FusedPipeline:
    newline = text.find("\n")
    if newline < 0 or text[:newline] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"missing magic header {CHECKPOINT_MAGIC!r}")
    try:
        body = json.loads(text[newline + 1 :])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unparseable checkpoint body: {exc}") from exc
    try:
        model_config = ModelConfig(**body["model"])
        expert_config = ExpertConfig(**body["experts"])
        stored = body["params"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad checkpoint structure: {exc}") from exc
    pipeline = FusedPipeline.build(model_config, expert_config)
    named = pipeline.named_parameters()
    if set(stored) != set(named):
        missing = sorted(set(named) - set(stored))
        extra = sorted(set(stored) - set(named))
        raise CheckpointError(
            f"parameter names disagree with configs (missing {missing}, extra {extra})"
        )
    for name, payload in stored.items():
        value = np.asarray(payload["data"], dtype=np.float64)
        if list(value.shape) != payload["shape"] or value.shape != named[name].shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {value.shape}, expected {named[name].shape}"
            )
        named[name].value[...] = value
        named[name].trainable = bool(payload["trainable"])
    return pipeline


def load_checkpoint(path) -> FusedPipeline:
    with open(path, "r", encoding="utf-8") as fh:
        return loads_checkpoint(fh.read())
