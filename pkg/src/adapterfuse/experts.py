"""Perception and detection expert paths over six-camera feature sets.

Real image encoders are out of scope: features arrive through a text file
interface (`load_features`/`save_features`) or from `synth_encoder`, a
deterministic stand-in that turns a scene descriptor into per-camera
detector rows and a global perception feature block.

The detection path prefixes each camera's detector rows with that camera's
trainable ID-separator, concatenates all six groups (M = 6 + 6 * n_det rows),
and runs the result through a bidirectional adaptation encoder followed by a
linear projection into embedding space. The perception path prepends a
learnable query prefix to the perception features, encodes, keeps only the
prefix positions, and projects. Query building is a pure function of
(params, features), so per-sample parallel evaluation is safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FeatureFormatError
from .fusion import ExpertQuery
from .numerics import (
    Parameter,
    Tape,
    concat_rows,
    matmul,
    param_or_value,
    seeded_rng,
    slice_rows,
)
from .transformer import DecoderLayer, block_forward

N_CAMERAS = 6

CLASS_LABELS = ("car", "truck", "person", "cyclist", "cone", "sign")

# detect feature row: presence flag, class one-hot, scaled coords, two
# sine/cosine position channels per axis
_DETECT_LAYOUT_DIMS = 1 + len(CLASS_LABELS) + 2 + 8
_PERCEPT_LAYOUT_DIMS = len(CLASS_LABELS) + 1

COORD_RANGE = 100.0

FEATURE_MAGIC = "ADAPTERFUSE-FEAT-v1"


@dataclass(frozen=True)
class ExpertConfig:
    """Dimensions and init scale of the expert paths (toy defaults)."""

    d_yolos: int = 32
    d_clip: int = 48
    n_det: int = 8
    prefix_len: int = 4
    n_percept: int = 10
    init_std: float | None = None

    def __post_init__(self):
        if min(self.d_yolos, self.d_clip, self.n_det, self.prefix_len, self.n_percept) < 1:
            raise ValueError("all expert dimensions must be >= 1")

    @property
    def detect_rows(self) -> int:
        return N_CAMERAS * (1 + self.n_det)

    def path_std(self, dim: int) -> float:
        return self.init_std if self.init_std is not None else 1.0 / math.sqrt(dim)


@dataclass
class CameraFeatureSet:
    """Six camera detector-token matrices plus one perception feature matrix."""

    cameras: list[np.ndarray]
    perception: np.ndarray

    def __post_init__(self):
        if len(self.cameras) != N_CAMERAS:
            raise FeatureFormatError(
                f"expected {N_CAMERAS} cameras, got {len(self.cameras)}"
            )
        counts = {m.shape[0] for m in self.cameras}
        widths = {m.shape[1] for m in self.cameras}
        if len(counts) != 1 or len(widths) != 1:
            raise FeatureFormatError(
                "camera token matrices disagree on shape: "
                f"rows {sorted(counts)}, cols {sorted(widths)}"
            )
        for i, m in enumerate(self.cameras, start=1):
            if not np.isfinite(m).all():
                raise FeatureFormatError(f"camera {i} has non-finite feature values")
        if not np.isfinite(self.perception).all():
            raise FeatureFormatError("perception features have non-finite values")

    @property
    def n_det(self) -> int:
        return self.cameras[0].shape[0]

    @property
    def d_yolos(self) -> int:
        return self.cameras[0].shape[1]

    def validate_against(self, config: ExpertConfig) -> "CameraFeatureSet":
        if self.n_det != config.n_det or self.d_yolos != config.d_yolos:
            raise FeatureFormatError(
                f"detector tokens are {self.n_det}x{self.d_yolos}, config expects "
                f"{config.n_det}x{config.d_yolos}"
            )
        if self.perception.shape != (config.n_percept, config.d_clip):
            raise FeatureFormatError(
                f"perception features are {self.perception.shape}, config expects "
                f"({config.n_percept}, {config.d_clip})"
            )
        return self


@dataclass
class DetectionPathParams:
    """Six ID separators, the adaptation encoder, and the projection to d_emb."""

    id_separators: list[Parameter]
    encoder: DecoderLayer
    projection: Parameter

    @classmethod
    def build(cls, config: ExpertConfig, d_emb: int, seed: int) -> "DetectionPathParams":
        rng = seeded_rng(seed, "expert-detect")
        std = config.path_std(config.d_yolos)
        separators = [
            Parameter(f"expert.detect.sep{i}", rng.normal(0.0, std, (1, config.d_yolos)))
            for i in range(N_CAMERAS)
        ]
        encoder = DecoderLayer.create("expert.detect.encoder", config.d_yolos, rng, std)
        projection = Parameter(
            "expert.detect.proj", rng.normal(0.0, std, (config.d_yolos, d_emb))
        )
        return cls(separators, encoder, projection)

    def parameters(self) -> list[Parameter]:
        return [*self.id_separators, *self.encoder.parameters(), self.projection]


@dataclass
class PerceptionPathParams:
    """Learnable query prefix, adaptation encoder, and projection to d_emb."""

    prefix: Parameter
    encoder: DecoderLayer
    projection: Parameter

    @classmethod
    def build(cls, config: ExpertConfig, d_emb: int, seed: int) -> "PerceptionPathParams":
        rng = seeded_rng(seed, "expert-percept")
        std = config.path_std(config.d_clip)
        prefix = Parameter(
            "expert.percept.prefix", rng.normal(0.0, std, (config.prefix_len, config.d_clip))
        )
        encoder = DecoderLayer.create("expert.percept.encoder", config.d_clip, rng, std)
        projection = Parameter(
            "expert.percept.proj", rng.normal(0.0, std, (config.d_clip, d_emb))
        )
        return cls(prefix, encoder, projection)

    def parameters(self) -> list[Parameter]:
        return [self.prefix, *self.encoder.parameters(), self.projection]


def concat_detect_rows(params: DetectionPathParams, feats: CameraFeatureSet, tape: Tape | None = None):
    """Pre-encoder concatenation [sep_1 | cam_1 | ... | sep_6 | cam_6].

    Row block i depends only on camera i's tokens and separator i.
    """
    parts = []
    for i in range(N_CAMERAS):
        parts.append(param_or_value(params.id_separators[i], tape))
        parts.append(feats.cameras[i])
    return concat_rows(parts)


def build_detect_query(
    params: DetectionPathParams, feats: CameraFeatureSet, tape: Tape | None = None
) -> ExpertQuery:
    """Detector query: concatenate with separators, encode jointly, project.

    Output has exactly 6 + 6 * n_det rows; the bidirectional encoder lets the
    cameras attend to each other while the separators keep the groups
    order-identifiable.
    """
    sep_width = params.id_separators[0].shape[1]
    if feats.d_yolos != sep_width:
        raise FeatureFormatError(
            f"detector tokens have width {feats.d_yolos}, separators have {sep_width}"
        )
    stacked = concat_detect_rows(params, feats, tape)
    encoded = block_forward(params.encoder, stacked, causal=False)
    projected = matmul(encoded, param_or_value(params.projection, tape))
    return ExpertQuery("detect", projected)


def build_percept_query(
    params: PerceptionPathParams, feats: CameraFeatureSet, tape: Tape | None = None
) -> ExpertQuery:
    """Perceptual query: [prefix | features] -> encoder -> prefix rows -> project."""
    if feats.perception.shape[0] < 1:
        raise FeatureFormatError("perception feature matrix is empty")
    prefix_width = params.prefix.shape[1]
    if feats.perception.shape[1] != prefix_width:
        raise FeatureFormatError(
            f"perception features have width {feats.perception.shape[1]}, "
            f"prefix queries have {prefix_width}"
        )
    stacked = concat_rows([param_or_value(params.prefix, tape), feats.perception])
    encoded = block_forward(params.encoder, stacked, causal=False)
    kept = slice_rows(encoded, 0, params.prefix.shape[0])
    projected = matmul(kept, param_or_value(params.projection, tape))
    return ExpertQuery("percept", projected)


# ---------------------------------------------------------------------------
# Feature file format: magic line, then one "<section> <rows> <cols>" header
# per block followed by that many rows of repr'd floats. Sections are
# "camera 1".."camera 6" and "perception".
# ---------------------------------------------------------------------------


def _format_rows(m: np.ndarray) -> list[str]:
    return [" ".join(repr(float(v)) for v in row) for row in m]


def save_features(path, feats: CameraFeatureSet) -> None:
    lines = [FEATURE_MAGIC]
    for i, cam in enumerate(feats.cameras, start=1):
        lines.append(f"camera {i} {cam.shape[0]} {cam.shape[1]}")
        lines.extend(_format_rows(cam))
    lines.append(f"perception {feats.perception.shape[0]} {feats.perception.shape[1]}")
    lines.extend(_format_rows(feats.perception))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_block(lines: list[str], pos: int, rows: int, cols: int, what: str) -> tuple[np.ndarray, int]:
    block = np.empty((rows, cols))
    for r in range(rows):
        if pos >= len(lines):
            raise FeatureFormatError(f"{what}: file ended inside a {rows}x{cols} block")
        values = lines[pos].split()
        if len(values) != cols:
            raise FeatureFormatError(
                f"{what}: row {r} has {len(values)} values, expected {cols}"
            )
        try:
            block[r] = [float(v) for v in values]
        except ValueError as exc:
            raise FeatureFormatError(f"{what}: unparseable value in row {r}") from exc
        pos += 1
    if not np.isfinite(block).all():
        raise FeatureFormatError(f"{what}: non-finite feature values")
    return block, pos


def load_features(path) -> CameraFeatureSet:
    """Parse and validate a feature file; errors name the offending camera."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh]
    if not lines or lines[0] != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: missing magic header {FEATURE_MAGIC!r}")
    cameras: dict[int, np.ndarray] = {}
    perception = None
    pos = 1
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        header = lines[pos].split()
        pos += 1
        if header[0] == "camera" and len(header) == 4:
            index = int(header[1])
            if not 1 <= index <= N_CAMERAS:
                raise FeatureFormatError(f"camera index {index} out of range 1..{N_CAMERAS}")
            block, pos = _parse_block(
                lines, pos, int(header[2]), int(header[3]), f"camera {index}"
            )
            cameras[index] = block
        elif header[0] == "perception" and len(header) == 3:
            perception, pos = _parse_block(
                lines, pos, int(header[1]), int(header[2]), "perception"
            )
        else:
            raise FeatureFormatError(f"unrecognized section header: {lines[pos - 1]!r}")
    missing = [i for i in range(1, N_CAMERAS + 1) if i not in cameras]
    if missing:
        raise FeatureFormatError(f"missing camera {missing[0]} in {path}")
    if perception is None:
        raise FeatureFormatError(f"missing perception section in {path}")
    return CameraFeatureSet([cameras[i] for i in range(1, N_CAMERAS + 1)], perception)


# ---------------------------------------------------------------------------
# Synthetic scene encoder (stands in for the frozen image experts)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneObject:
    """One object in a scene: which camera sees it, its class, its coordinates."""

    camera: int
    label: str
    x: float
    y: float

    def __post_init__(self):
        if not 1 <= self.camera <= N_CAMERAS:
            raise ValueError(f"camera must be 1..{N_CAMERAS}, got {self.camera}")
        if self.label not in CLASS_LABELS:
            raise ValueError(f"unknown object class {self.label!r}")


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...] = field(default=())


def _encode_object_row(obj: SceneObject, d_yolos: int) -> np.ndarray:
    row = np.zeros(d_yolos)
    row[0] = 1.0
    row[1 + CLASS_LABELS.index(obj.label)] = 1.0
    base = 1 + len(CLASS_LABELS)
    row[base + 0] = obj.x / COORD_RANGE
    row[base + 1] = obj.y / COORD_RANGE
    for axis, value in enumerate((obj.x, obj.y)):
        for j, period in enumerate((COORD_RANGE, COORD_RANGE / 4.0)):
            angle = 2.0 * math.pi * value / period
            row[base + 2 + axis * 4 + 2 * j] = math.sin(angle)
            row[base + 2 + axis * 4 + 2 * j + 1] = math.cos(angle)
    return row


def synth_encoder(seed: int, scene: Scene, config: ExpertConfig | None = None) -> CameraFeatureSet:
    """Deterministic feature double for the frozen image experts.

    Detector rows hold, per object, a presence flag, a class one-hot, scaled
    coordinates, and sine/cosine position channels; cameras without objects
    keep all-zero null rows, so feature sets built from scenes that differ in
    one camera's objects differ only in that camera's rows. Perception rows
    hold a per-class presence histogram and no position information.
    """
    config = config or ExpertConfig()
    if config.d_yolos < _DETECT_LAYOUT_DIMS:
        raise FeatureFormatError(
            f"synth_encoder needs d_yolos >= {_DETECT_LAYOUT_DIMS}, got {config.d_yolos}"
        )
    if config.d_clip < _PERCEPT_LAYOUT_DIMS:
        raise FeatureFormatError(
            f"synth_encoder needs d_clip >= {_PERCEPT_LAYOUT_DIMS}, got {config.d_clip}"
        )
    cameras = [np.zeros((config.n_det, config.d_yolos)) for _ in range(N_CAMERAS)]
    slots = [0] * N_CAMERAS
    for obj in scene.objects:
        cam = obj.camera - 1
        if slots[cam] >= config.n_det:
            raise FeatureFormatError(
                f"camera {obj.camera} holds more than n_det={config.n_det} objects"
            )
        row = _encode_object_row(obj, config.d_yolos)
        if config.d_yolos > _DETECT_LAYOUT_DIMS:
            # per-(camera, slot) encoder fingerprint in the padding channels,
            # independent of the object itself
            pad_rng = seeded_rng(seed, f"synth-pad-{obj.camera}-{slots[cam]}")
            row[_DETECT_LAYOUT_DIMS:] = 0.1 * pad_rng.standard_normal(
                config.d_yolos - _DETECT_LAYOUT_DIMS
            )
        cameras[cam][slots[cam]] = row
        slots[cam] += 1
    perception = np.zeros((config.n_percept, config.d_clip))
    for class_index, label in enumerate(CLASS_LABELS):
        count = sum(1 for obj in scene.objects if obj.label == label)
        if class_index < config.n_percept:
            perception[class_index, class_index] = 1.0
            perception[class_index, len(CLASS_LABELS)] = float(count)
    return CameraFeatureSet(cameras, perception)
