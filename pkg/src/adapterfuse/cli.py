"""Command-line surface: synth / train / generate / eval / score / gradcheck.

Exit codes: 0 success, 1 usage error (usage text on stderr), 2 data or
numerical error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import load_dataset, load_feature_map, synth_corpus
from .errors import AdapterFuseError, DatasetError
from .experiments import greedy_answers
from .experts import ExpertConfig
from .metrics import RemoteJudge, StubJudge, final_score
from .pipeline import FusedPipeline
from .reporting import (
    components_from_file,
    loss_figure,
    metric_figure,
    read_predictions,
    render_table,
    write_predictions,
    write_report,
)
from .training import FreezePlan, TrainConfig, run_stage
from .transformer import ModelConfig


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1, not 2."""

    def error(self, message):
        raise _UsageError(message)


@dataclass
class RunConfig:
    """Everything one training run needs, loaded from a JSON config file."""

    seed: int
    model: ModelConfig
    experts: ExpertConfig
    train: TrainConfig
    freeze: FreezePlan
    dataset: Path
    out_dir: Path

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"{path}: cannot read run config ({exc})") from exc
        try:
            seed = int(raw.get("seed", 0))
            model = ModelConfig(seed=seed, **raw.get("model", {}))
            experts = ExpertConfig(**raw.get("experts", {}))
            train = TrainConfig(seed=seed, **raw.get("train", {}))
            freeze_raw = raw.get("freeze", {})
            freeze = FreezePlan.default(
                model.n_layers,
                train_perception=bool(freeze_raw.get("train_perception", True)),
                clamp_detect_gate=bool(freeze_raw.get("clamp_detect_gate", False)),
            )
            dataset = (path.parent / raw["dataset"]).resolve()
            out_dir = (path.parent / raw["out_dir"]).resolve()
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}: bad run config ({exc})") from exc
        if not dataset.is_file():
            raise DatasetError(f"{path}: dataset {dataset} does not exist")
        return cls(seed, model, experts, train, freeze, dataset, out_dir)


def build_parser() -> _Parser:
    parser = _Parser(prog="adapterfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic QA corpus with feature files")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-det", type=int, default=2, help="detector tokens per camera")

    p = sub.add_parser("train", help="run one fine-tuning stage from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--ckpt", help="checkpoint to start from (e.g. the stage-1 output)")

    p = sub.add_parser("generate", help="greedy-decode answers for a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="predictions file to write")
    p.add_argument("--max-new", type=int, default=16)

    p = sub.add_parser("eval", help="score a predictions file with every metric")
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True, help="report file to write")
    p.add_argument("--judge", choices=("stub", "remote"), default="stub")
    p.add_argument("--no-figure", action="store_true")

    p = sub.add_parser("score", help="Final_Score from a key=value component file")
    p.add_argument("--components", required=True)

    sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    return parser


def _cmd_synth(args) -> int:
    corpus = synth_corpus(
        args.seed, args.size, args.out, expert_config=ExpertConfig(n_det=args.n_det)
    )
    print(f"wrote {len(corpus.pairs)} records to {corpus.dataset_path}")
    return 0


def _cmd_train(args) -> int:
    config = RunConfig.load(args.config)
    if args.ckpt:
        pipeline = load_checkpoint(args.ckpt)
    else:
        pipeline = FusedPipeline.build(config.model, config.experts)
    pairs = load_dataset(config.dataset)
    features = load_feature_map(config.dataset, pairs)
    for qa in pairs:
        features[qa.id].validate_against(config.experts)
    train = replace(config.train, stage=args.stage)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    log = run_stage(
        pipeline,
        pairs,
        features,
        train,
        config.freeze,
        log_path=config.out_dir / "train_log.csv",
    )
    ckpt_path = config.out_dir / f"stage{args.stage}.ckpt"
    save_checkpoint(ckpt_path, pipeline)
    loss_figure(log.records, config.out_dir / f"train_loss_stage{args.stage}.png")
    print(
        f"stage {args.stage}: {len(log.records)} steps, "
        f"final loss {log.final_loss:.6f}, checkpoint {ckpt_path}"
    )
    return 0


def _cmd_generate(args) -> int:
    pipeline = load_checkpoint(args.ckpt)
    pairs = load_dataset(args.dataset)
    features = load_feature_map(args.dataset, pairs)
    rows = greedy_answers(pipeline, pairs, features, max_new=args.max_new)
    write_predictions(args.out, rows)
    print(f"wrote {len(rows)} predictions to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .metrics import compute_report

    rows = read_predictions(args.pred)
    if not rows:
        raise DatasetError(f"{args.pred}: no prediction records")
    pairs = [pair for _, pair in rows]
    judge = StubJudge() if args.judge == "stub" else RemoteJudge()
    report = compute_report(pairs, judge)
    out = Path(args.out)
    write_report(out, report, label=Path(args.pred).stem)
    if not args.no_figure:
        metric_figure(report, out.with_name(out.stem + "_metrics.png"))
    print(render_table(report, label=Path(args.pred).stem))
    return 0


def _cmd_score(args) -> int:
    components = components_from_file(args.components)
    value = final_score(*components)
    print(f"{value:.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradsuite import run_gradient_suite

    results = run_gradient_suite()
    worst_name = max(results, key=results.get)
    failed = {name: err for name, err in results.items() if err >= 1e-5}
    for name, err in results.items():
        status = "PASS" if err < 1e-5 else "FAIL"
        print(f"{status} {name}: max relative error {err:.3e}")
    print(f"worst: {worst_name} ({results[worst_name]:.3e})")
    return 2 if failed else 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "generate": _cmd_generate,
    "eval": _cmd_eval,
    "score": _cmd_score,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"adapterfuse: error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (AdapterFuseError, OSError) as exc:
        print(f"adapterfuse: {exc}", file=sys.stderr)
        return 2


def console_entry() -> None:  # pragma: no cover - thin wrapper
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
