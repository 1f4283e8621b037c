"""Command-line front end.

Subcommands: train, eval, latency, trace-gate, gradcheck. Run
configuration is a single JSON file with model/task/train sections;
unknown keys are rejected so typos in mode names cannot pass silently.
Exit codes: 0 success, 1 config/parse error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cells import BNConfig, CellBNMode, GateBNMode
from .context import ContextParseError, parse_plan_string
from .network import (
    ConfigError,
    LatencyModel,
    Model,
    ModelConfig,
    config_from_dict,
    init_model,
    load_checkpoint,
    model_latency_ms,
    save_checkpoint,
)
from .training import (
    NonFiniteError,
    TaskSpec,
    TrainConfig,
    evaluate,
    gen_task,
    grad_check_cell,
    grad_check_model,
    split_dataset,
    trace_gate,
    trace_to_csv,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    task: TaskSpec
    train: TrainConfig
    output_dir: Path


def _require_keys(section: dict, allowed: set[str], required: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(section)
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")


def _parse_task(raw: dict) -> TaskSpec:
    allowed = {"kind", "frames", "feature_dim", "classes", "sequences", "lookahead", "window", "seed"}
    _require_keys(raw, allowed, {"kind", "frames", "feature_dim", "classes"}, "task")
    try:
        return TaskSpec(
            kind=raw["kind"],
            frames=raw["frames"],
            feature_dim=raw["feature_dim"],
            classes=raw["classes"],
            sequences=raw.get("sequences", 128),
            lookahead=raw.get("lookahead"),
            window=raw.get("window"),
            seed=raw.get("seed", 0),
        )
    except ValueError as exc:
        raise ConfigError(f"task: {exc}") from None


def _parse_train(raw: dict) -> TrainConfig:
    allowed = {
        "learning_rate", "momentum", "batch_size", "epochs",
        "clip_norm", "eval_fraction", "seed",
    }
    _require_keys(raw, allowed, {"learning_rate"}, "train")
    if raw.get("batch_size", 8) < 2:
        raise ConfigError(
            "train.batch_size: must be >= 2 because train-mode batch norm "
            "estimates variance over the batch"
        )
    try:
        return TrainConfig(
            learning_rate=raw["learning_rate"],
            momentum=raw.get("momentum", 0.9),
            batch_size=raw.get("batch_size", 8),
            epochs=raw.get("epochs", 10),
            clip_norm=raw.get("clip_norm", 5.0),
            eval_fraction=raw.get("eval_fraction", 0.2),
            seed=raw.get("seed", 0),
        )
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None


def load_run_config(path) -> RunConfig:
    """Parse and cross-validate a run configuration file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    _require_keys(raw, {"model", "task", "train", "output_dir"},
                  {"model", "task", "train", "output_dir"}, str(path))
    try:
        model_cfg = config_from_dict(raw["model"])
    except (ConfigError, ContextParseError, KeyError) as exc:
        detail = f"missing key {exc}" if isinstance(exc, KeyError) else exc
        raise ConfigError(f"model: {detail}") from None
    task = _parse_task(raw["task"])
    train_cfg = _parse_train(raw["train"])

    if task.feature_dim != model_cfg.input_dim:
        raise ConfigError(
            f"task.feature_dim ({task.feature_dim}) must equal model.input_dim "
            f"({model_cfg.input_dim})"
        )
    if task.classes != model_cfg.output_dim:
        raise ConfigError(
            f"task.classes ({task.classes}) must equal model.output_dim "
            f"({model_cfg.output_dim})"
        )
    return RunConfig(model=model_cfg, task=task, train=train_cfg,
                     output_dir=Path(raw["output_dir"]))


def metrics_to_csv(metrics) -> str:
    lines = ["epoch,split,loss,accuracy"]
    lines += [f"{m.epoch},{m.split},{m.loss!r},{m.accuracy!r}" for m in metrics]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    try:
        cfg = load_run_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    dataset = gen_task(cfg.task)
    model = init_model(cfg.model, seed=cfg.train.seed)
    try:
        model, metrics = train(model, dataset, cfg.train)
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

    outdir = cfg.output_dir
    outdir.mkdir(parents=True, exist_ok=True)
    ckpt_path = outdir / "checkpoint.json"
    metrics_path = outdir / "metrics.csv"
    save_checkpoint(model, ckpt_path)
    metrics_path.write_text(metrics_to_csv(metrics))
    if not args.no_figures:
        from .report import plot_training_curves

        plot_training_curves(metrics, outdir / "metrics.png")

    final = {m.split: m for m in metrics[-2:]} if metrics else {}
    manifest = {
        "config_sha256": hashlib.sha256(Path(args.config).read_bytes()).hexdigest(),
        "seeds": {"data": cfg.task.seed, "init": cfg.train.seed},
        "epochs": cfg.train.epochs,
        "final": {
            split: {"loss": m.loss, "accuracy": m.accuracy} for split, m in final.items()
        },
        "files": sorted(p.name for p in outdir.iterdir() if p.is_file()),
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    for m in metrics[-2:]:
        print(f"epoch={m.epoch} split={m.split} loss={m.loss:.4f} accuracy={m.accuracy:.4f}")
    print(f"wrote {ckpt_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        cfg = load_run_config(args.config)
        model = load_checkpoint(args.checkpoint)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    dataset = gen_task(cfg.task)
    train_set, eval_set = split_dataset(dataset, cfg.train.eval_fraction)
    splits = {"train": train_set, "eval": eval_set}
    chosen = splits if args.split == "all" else {args.split: splits[args.split]}
    for name, subset in chosen.items():
        loss, acc = evaluate(model, subset)
        print(f"split={name} loss={loss!r} accuracy={acc!r}")
    return EXIT_OK


def cmd_latency(args) -> int:
    lat = LatencyModel(base_latency_ms=args.base, frame_ms=args.frame)
    plan_strings = args.plan if args.plan else [""]
    for text in plan_strings:
        try:
            plan = parse_plan_string(text)
        except ContextParseError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        total = 0
        for i, spec in enumerate(plan, start=2):
            print(f"layer {i}: {spec} future_frames={spec.future_reach}")
            total += spec.future_reach
        print(f"total_future_frames={total}")
        print(f"latency_ms={model_latency_ms(plan, lat):g}")
    return EXIT_OK


def cmd_trace_gate(args) -> int:
    try:
        cfg = load_run_config(args.config)
        model = load_checkpoint(args.checkpoint)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if cfg.model != model.config:
        print("error: checkpoint model config differs from run config", file=sys.stderr)
        return EXIT_CONFIG
    layer = args.layer if args.layer is not None else model.config.layer_count
    dataset = gen_task(cfg.task)
    _, eval_set = split_dataset(dataset, cfg.train.eval_fraction)
    inputs = np.ascontiguousarray(eval_set.inputs.transpose(1, 0, 2))
    try:
        records = trace_gate(model, inputs, layer)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = outdir / "trace.csv"
    csv_path.write_text(trace_to_csv(records))
    if not args.no_figures:
        from .report import plot_gate_trace

        plot_gate_trace(records, outdir / "trace.png", title=f"layer {layer} update gate")
    print(f"wrote {csv_path} ({len(records)} frames)")
    return EXIT_OK


_GATE_CHOICES = {"none": GateBNMode.NONE, "itoh": GateBNMode.ITOH, "both": GateBNMode.BOTH}
_CELL_CHOICES = {"itoh": CellBNMode.ITOH, "both": CellBNMode.BOTH}


def _tiny_model(cell_kind: str) -> Model:
    plan = "{1x1; 1x2} " if cell_kind == "mgruip-ctx" else ""
    config = ModelConfig(
        cell_kind=cell_kind,
        layer_count=2,
        cells_per_layer=4,
        input_dim=3,
        output_dim=3,
        projection_dim=None if cell_kind == "mgru" else 3,
        context_plan=parse_plan_string(plan),
    )
    # seed picked for a well-conditioned check instance: a batch variance
    # near epsilon at any BN site would break the finite-difference oracle
    return init_model(config, seed=0)


def cmd_gradcheck(args) -> int:
    cells = ("mgru", "mgruip", "mgruip-ctx") if args.cell == "all" else (args.cell,)
    gates = tuple(_GATE_CHOICES) if args.bn_gate == "all" else (args.bn_gate,)
    cell_bns = tuple(_CELL_CHOICES) if args.bn_cell == "all" else (args.bn_cell,)

    reports = []
    if not args.full_model:
        for kind, gate, cell_bn in itertools.product(cells, gates, cell_bns):
            cfg = BNConfig(gate=_GATE_CHOICES[gate], cell=_CELL_CHOICES[cell_bn])
            report = grad_check_cell(kind, cfg, step=args.step, tolerance=args.tolerance)
            reports.append((f"{kind} gate={gate} cell={cell_bn}", report))
    if args.full_model or (args.cell == "all" and args.bn_gate == "all" and args.bn_cell == "all"):
        for kind in cells:
            model = _tiny_model(kind)
            rng = np.random.default_rng(1000)
            inputs = rng.normal(size=(6, 3, 3))
            labels = rng.integers(0, 3, size=(6, 3))
            report = grad_check_model(model, inputs, labels, step=args.step, tolerance=args.tolerance)
            reports.append((f"full-model {kind}", report))

    if args.self_test_corrupt and reports:
        name, report = reports[0]
        reports[0] = (
            name + " [corrupted]",
            type(report)(
                max_rel_err=report.max_rel_err + 1.0,
                worst_name=report.worst_name,
                worst_index=report.worst_index,
                coords_checked=report.coords_checked,
                tolerance=report.tolerance,
            ),
        )

    worst = max(reports, key=lambda item: item[1].max_rel_err)
    for name, report in reports:
        print(f"{name}: {report}")
    print(f"worst: {worst[0]}: {worst[1]}")
    return EXIT_OK if all(r.passed for _, r in reports) else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mgrulab",
        description="Train, inspect and verify update-gated recurrent models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a run config")
    p_train.add_argument("config", help="path to a JSON run config")
    p_train.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on its task")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", required=True, help="run config that defines the task")
    p_eval.add_argument("--split", choices=("train", "eval", "all"), default="eval")
    p_eval.set_defaults(fn=cmd_eval)

    p_lat = sub.add_parser("latency", help="latency of layerwise context plans")
    p_lat.add_argument("plan", nargs="*", help="per-layer {K1xs1; K2xs2} tokens, one string per plan")
    p_lat.add_argument("--base", type=float, default=70.0, help="base latency in ms")
    p_lat.add_argument("--frame", type=float, default=10.0, help="milliseconds per frame")
    p_lat.set_defaults(fn=cmd_latency)

    p_trace = sub.add_parser("trace-gate", help="per-frame mean update-gate activation")
    p_trace.add_argument("--checkpoint", required=True)
    p_trace.add_argument("--config", required=True, help="run config that defines the task")
    p_trace.add_argument("--layer", type=int, default=None, help="1-based layer (default: top)")
    p_trace.add_argument("--out-dir", default=".")
    p_trace.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p_trace.set_defaults(fn=cmd_trace_gate)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient sweep")
    p_grad.add_argument("--cell", choices=("mgru", "mgruip", "mgruip-ctx", "all"), default="all")
    p_grad.add_argument("--bn-gate", choices=("none", "itoh", "both", "all"), default="all")
    p_grad.add_argument("--bn-cell", choices=("itoh", "both", "all"), default="all")
    p_grad.add_argument("--full-model", action="store_true",
                        help="check only the tiny stacked models")
    p_grad.add_argument("--step", type=float, default=1e-5)
    p_grad.add_argument("--tolerance", type=float, default=1e-4)
    p_grad.add_argument("--self-test-corrupt", action="store_true",
                        help="testing hook: corrupt one result to verify the detector trips")
    p_grad.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


def run_main() -> None:
    sys.exit(main())
