"""Report files and figures.

A report file is grep-able key=value text under a version header, with the
human table appended as trailing comment lines. Figures are rendered with
matplotlib's Agg backend next to the delimited outputs.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .errors import DatasetError, ScoreRangeError
from .metrics import MetricReport, PredictionPair
from .training import TrainStep

REPORT_HEADER = "# adapterfuse-report-v1"

TABLE_COLUMNS = (
    "Accuracy",
    "ChatGPT",
    "Match",
    "Bleu_1",
    "Bleu_2",
    "Bleu_3",
    "Bleu_4",
    "ROUGE_l",
    "CIDEr",
    "Final_score",
)

_KEYS = (
    "accuracy",
    "chatgpt",
    "match",
    "bleu_1",
    "bleu_2",
    "bleu_3",
    "bleu_4",
    "rouge_l",
    "cider",
    "final_score",
)

_FIG_STYLE = {"figure.figsize": (7.0, 4.0), "axes.grid": True, "grid.alpha": 0.3}


def report_values(report: MetricReport) -> dict[str, float]:
    return {
        "accuracy": report.accuracy,
        "chatgpt": report.chatgpt,
        "match": report.match,
        "bleu_1": report.bleu[0],
        "bleu_2": report.bleu[1],
        "bleu_3": report.bleu[2],
        "bleu_4": report.bleu[3],
        "rouge_l": report.rouge_l,
        "cider": report.cider,
        "final_score": report.final_score,
    }


def render_table(report: MetricReport, label: str = "run") -> str:
    values = report_values(report)
    cells = [f"{values[key]:.6f}" for key in _KEYS]
    widths = [max(len(h), len(c)) for h, c in zip(TABLE_COLUMNS, cells)]
    name_w = max(len("Experiment"), len(label))
    header = "Experiment".ljust(name_w) + "  " + "  ".join(
        h.ljust(w) for h, w in zip(TABLE_COLUMNS, widths)
    )
    row = label.ljust(name_w) + "  " + "  ".join(
        c.ljust(w) for c, w in zip(cells, widths)
    )
    return header + "\n" + row


def format_report(report: MetricReport, label: str = "run") -> str:
    lines = [REPORT_HEADER]
    lines.extend(f"{key}={value:.6f}" for key, value in report_values(report).items())
    lines.append("#")
    lines.extend("# " + line for line in render_table(report, label).splitlines())
    return "\n".join(lines) + "\n"


def write_report(path, report: MetricReport, label: str = "run") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_report(report, label))


def parse_components(path) -> dict[str, float]:
    """key=value floats from a report/components file (comments ignored)."""
    values: dict[str, float] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DatasetError(f"{path}: line {lineno}: expected key=value")
            key, _, raw = line.partition("=")
            try:
                values[key.strip()] = float(raw.strip())
            except ValueError as exc:
                raise DatasetError(f"{path}: line {lineno}: bad float {raw!r}") from exc
    return values


def components_from_file(path) -> tuple[float, float, float, tuple[float, ...], float, float]:
    """(accuracy, chatgpt, match, bleu_1..4, rouge_l, cider) from a file."""
    values = parse_components(path)
    missing = [k for k in _KEYS[:-1] if k not in values]
    if missing:
        raise ScoreRangeError(f"{path}: missing component {missing[0]!r}")
    bleu = tuple(values[f"bleu_{i}"] for i in (1, 2, 3, 4))
    return (
        values["accuracy"],
        values["chatgpt"],
        values["match"],
        bleu,
        values["rouge_l"],
        values["cider"],
    )


# ---------------------------------------------------------------------------
# Prediction files: one tab-separated record per line (id, output, truth, tag)
# ---------------------------------------------------------------------------

PREDICTIONS_HEADER = "# adapterfuse-predictions-v1"


def _sanitize(text: str) -> str:
    return text.replace("\t", " ").replace("\n", " ").replace("\r", " ")


def write_predictions(path, rows: Sequence[tuple[str, str, str, int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(PREDICTIONS_HEADER + "\n")
        for record_id, output, truth, tag in rows:
            fh.write(
                f"{_sanitize(record_id)}\t{_sanitize(output)}\t{_sanitize(truth)}\t{tag}\n"
            )


def read_predictions(path) -> list[tuple[str, PredictionPair]]:
    rows: list[tuple[str, PredictionPair]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DatasetError(
                    f"{path}: line {lineno}: expected 4 tab-separated fields, got {len(parts)}"
                )
            record_id, output, truth, tag = parts
            try:
                rows.append((record_id, PredictionPair(output, truth, int(tag))))
            except ValueError as exc:
                raise DatasetError(f"{path}: line {lineno}: bad tag {tag!r}") from exc
    return rows


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------


def metric_figure(report: MetricReport, path) -> Path:
    """Bar chart of the normalized metric components."""
    values = report_values(report)
    normalized = {
        "accuracy": values["accuracy"],
        "chatgpt": values["chatgpt"] / 100.0,
        "match": values["match"] / 100.0,
        "bleu_1": values["bleu_1"],
        "bleu_2": values["bleu_2"],
        "bleu_3": values["bleu_3"],
        "bleu_4": values["bleu_4"],
        "rouge_l": values["rouge_l"],
        "cider": values["cider"] / 10.0,
        "final": values["final_score"],
    }
    with plt.rc_context(_FIG_STYLE):
        fig, ax = plt.subplots()
        ax.bar(range(len(normalized)), list(normalized.values()), color="#4878a8")
        ax.set_xticks(range(len(normalized)))
        ax.set_xticklabels(list(normalized), rotation=45, ha="right")
        ax.set_ylim(0.0, 1.05)
        ax.set_ylabel("normalized score")
        ax.set_title("metric components")
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return path


def loss_figure(records: Sequence[TrainStep], path) -> Path:
    """Training loss curve, one line per stage."""
    with plt.rc_context(_FIG_STYLE):
        fig, ax = plt.subplots()
        for stage in sorted({r.stage for r in records}):
            steps = [r.step for r in records if r.stage == stage]
            losses = [r.loss for r in records if r.stage == stage]
            ax.plot(steps, losses, label=f"stage {stage}")
        ax.set_xlabel("step")
        ax.set_ylabel("batch loss")
        ax.set_title("training loss")
        ax.legend()
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return path


def match_comparison_figure(match_fused: float, match_ablated: float, path) -> Path:
    """Fused vs detect-gate-clamped Match score bars."""
    with plt.rc_context(_FIG_STYLE):
        fig, ax = plt.subplots()
        ax.bar([0, 1], [match_fused, match_ablated], color=["#4878a8", "#a85448"])
        ax.set_xticks([0, 1])
        ax.set_xticklabels(["fused", "detect gate clamped"])
        ax.set_ylabel("Match score")
        ax.set_ylim(0, 105)
        ax.set_title("detection-value experiment")
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return path
