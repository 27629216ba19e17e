"""QA dataset I/O and the synthetic desk-scale corpus generator.

Datasets are JSON-lines files (one object per line) with a leading
`# adapterfuse-dataset-v1` comment; each record carries id, question, answer,
integer tag, and a feature_ref path resolved relative to the dataset file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .errors import DatasetError
from .experts import (
    CLASS_LABELS,
    N_CAMERAS,
    CameraFeatureSet,
    ExpertConfig,
    Scene,
    SceneObject,
    load_features,
    save_features,
    synth_encoder,
)
from .numerics import seeded_rng

DATASET_HEADER = "# adapterfuse-dataset-v1"

COORD_GRID = (16.0, 48.0, 80.0)

_REQUIRED_FIELDS = ("id", "question", "answer", "tag", "feature_ref")


@dataclass(frozen=True)
class QAPair:
    """One question/answer record plus the path to its camera features."""

    id: str
    question: str
    answer: str
    tag: int
    feature_ref: str

    def __post_init__(self):
        if not self.question or not self.answer:
            raise DatasetError(f"qa {self.id!r}: question and answer must be non-empty")


def load_dataset(path, check_refs: bool = True) -> list[QAPair]:
    """Parse a JSON-lines dataset; errors name the offending line."""
    path = Path(path)
    pairs: list[QAPair] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}: line {lineno}: invalid JSON ({exc})") from exc
            if not isinstance(record, dict):
                raise DatasetError(f"{path}: line {lineno}: expected a JSON object")
            missing = [k for k in _REQUIRED_FIELDS if k not in record]
            if missing:
                raise DatasetError(
                    f"{path}: line {lineno}: missing field {missing[0]!r}"
                )
            try:
                pair = QAPair(
                    id=str(record["id"]),
                    question=str(record["question"]),
                    answer=str(record["answer"]),
                    tag=int(record["tag"]),
                    feature_ref=str(record["feature_ref"]),
                )
            except (TypeError, ValueError) as exc:
                raise DatasetError(f"{path}: line {lineno}: {exc}") from exc
            if check_refs and not (path.parent / pair.feature_ref).is_file():
                raise DatasetError(
                    f"{path}: line {lineno}: dangling feature_ref {pair.feature_ref!r}"
                )
            pairs.append(pair)
    return pairs


def save_dataset(path, pairs: Sequence[QAPair]) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(DATASET_HEADER + "\n")
        for pair in pairs:
            fh.write(
                json.dumps(
                    {
                        "id": pair.id,
                        "question": pair.question,
                        "answer": pair.answer,
                        "tag": pair.tag,
                        "feature_ref": pair.feature_ref,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_feature_map(dataset_path, pairs: Sequence[QAPair]) -> dict[str, CameraFeatureSet]:
    """Load every referenced feature file, keyed by QA id."""
    base = Path(dataset_path).parent
    return {pair.id: load_features(base / pair.feature_ref) for pair in pairs}


def coordinate_answer(x: float, y: float) -> str:
    return f"<{x:.1f},{y:.1f}>"


@dataclass
class SynthCorpus:
    """Everything synth_corpus wrote: records, scenes, and file locations."""

    pairs: list[QAPair]
    scenes: list[Scene]
    dataset_path: Path
    feature_paths: list[Path]


def synth_corpus(
    seed: int,
    size: int,
    out_dir,
    expert_config: ExpertConfig | None = None,
    grid: Sequence[float] = COORD_GRID,
) -> SynthCorpus:
    """Generate `size` single-object scenes with coordinate questions.

    Every scene holds one object (uniform class, camera, and grid cell); the
    question asks where that object is and the answer is its coordinates, so
    answering correctly requires the per-camera positions that only the
    detection features carry. Output is byte-identical for a fixed seed.
    """
    if size < 1:
        raise ValueError("synth_corpus needs size >= 1")
    expert_config = expert_config or ExpertConfig()
    out_dir = Path(out_dir)
    feature_dir = out_dir / "features"
    feature_dir.mkdir(parents=True, exist_ok=True)
    rng = seeded_rng(seed, "synth-corpus")
    pairs: list[QAPair] = []
    scenes: list[Scene] = []
    feature_paths: list[Path] = []
    for index in range(size):
        label = CLASS_LABELS[int(rng.integers(len(CLASS_LABELS)))]
        camera = int(rng.integers(N_CAMERAS)) + 1
        x = float(grid[int(rng.integers(len(grid)))])
        y = float(grid[int(rng.integers(len(grid)))])
        scene = Scene((SceneObject(camera=camera, label=label, x=x, y=y),))
        feats = synth_encoder(seed, scene, expert_config)
        ref = f"features/sample_{index:04d}.feat"
        feature_path = out_dir / ref
        save_features(feature_path, feats)
        pairs.append(
            QAPair(
                id=f"s{index:04d}",
                question=f"where is the {label}?",
                answer=coordinate_answer(x, y),
                tag=0,
                feature_ref=ref,
            )
        )
        scenes.append(scene)
        feature_paths.append(feature_path)
    dataset_path = out_dir / "dataset.jsonl"
    save_dataset(dataset_path, pairs)
    return SynthCorpus(pairs, scenes, dataset_path, feature_paths)
