"""Command-line entry point: ``sop2 <command> [options]``.

Exit codes: 0 success, 2 usage error, 3 data or configuration error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .backbone import set_embeddings
from .checkpoint import check_backbone, domain_header, load_checkpoint, load_scenes, save_checkpoint, save_scenes
from .config import RunConfig, TuningMode, load_run_config, full_config, settings
from .errors import ConfigurationError, Sop2Error, UsageError
from .logging_config import logger
from .numkernel import FloatArray, no_tape
from .pointcloud import Scene, generate_scenes
from .prompts import pool_value_rows
from .schemas import BenchResult, SweepReport, SweepRow
from .tuner import (
    build_model,
    check_detections,
    count_params,
    evaluate,
    pretrain,
    target_scenes,
    train,
    transfer,
)
from .validation import SWEEP_PARAMS, InputValidator

EVAL_OFFSET = 10_000


def _check(result: tuple) -> None:
    ok, message = result[0], result[1]
    if not ok:
        raise UsageError(message)


def _load_run(args: argparse.Namespace) -> RunConfig:
    run = load_run_config(args.config) if getattr(args, "config", None) else full_config()
    if args.seed is not None:
        run = run.with_overrides(model={"seed": args.seed}, train={"seed": args.seed})
    return run


def _scenes_from(args: argparse.Namespace, run: RunConfig,
                 fallback: Callable[[], List[Scene]]) -> List[Scene]:
    if getattr(args, "data", None):
        scenes, _ = load_scenes(args.data)
        if scenes and not np.allclose(scenes[0].cloud.extent, run.model.extent, rtol=0.0, atol=1e-9):
            raise ConfigurationError(
                f"scene archive extent {tuple(scenes[0].cloud.extent)} does not match "
                f"model.extent {tuple(run.model.extent)}"
            )
        return scenes
    return fallback()


def eval_scenes(run: RunConfig) -> List[Scene]:
    """Held-out target scenes, disjoint from the training draw."""
    return target_scenes(run, run.train.eval_scenes, offset=EVAL_OFFSET)


def _write_text(path: str, text: str, force: bool) -> None:
    _check(InputValidator.validate_output_path(path, force))
    Path(path).write_text(text, encoding="utf-8")


# ==================== COMMANDS ====================

def cmd_gen_data(args: argparse.Namespace) -> None:
    _check(InputValidator.validate_scene_count(args.scenes))
    _check(InputValidator.validate_domain(args.domain))
    _check(InputValidator.validate_output_path(args.out, args.force))
    run = _load_run(args)
    params = run.source if args.domain == "source" else run.target
    seed = args.seed if args.seed is not None else settings.seed
    scenes = generate_scenes(seed, params, run.model.extent, args.scenes)
    save_scenes(args.out, scenes, domain_header(args.domain, params, seed, run.model.extent))
    print(f"wrote {len(scenes)} {args.domain} scenes to {args.out}")


def cmd_train(args: argparse.Namespace) -> None:
    supplied = _load_run(args)
    overrides: Dict[str, object] = {}
    if args.mode:
        overrides["mode"] = args.mode
    if args.fraction is not None:
        _check(InputValidator.validate_fraction(args.fraction))
        overrides["fraction"] = args.fraction
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    run = supplied.with_overrides(train=overrides)
    mode = run.train.mode
    _check(InputValidator.validate_output_path(args.out, args.force))

    pretrained: Optional[Mapping[str, FloatArray]] = None
    if mode is TuningMode.FROM_SCRATCH:
        if args.pretrained:
            raise UsageError("--mode from_scratch does not take --pretrained")
    else:
        if not args.pretrained:
            raise ConfigurationError(f"--mode {mode.value} tunes a pretrained model; pass --pretrained")
        source = load_checkpoint(args.pretrained)
        check_backbone(run, source.run)
        pretrained = source.state

    scenes = _scenes_from(args, run, lambda: target_scenes(run))
    model = build_model(run.model, mode, pretrained)
    log = train(model, scenes, run.train, mode)

    derived = {"train": overrides, "model": {"prompt_mode": model.config.prompt_mode.value}}
    save_checkpoint(args.out, model.state_dict(), supplied, mode, derived)
    if args.log:
        _write_text(args.log, log.to_jsonl(), args.force)
    print(f"mode={mode.value} scenes={log.scenes_used} epochs={len(log.epochs)} final_loss={log.final_loss}")


def cmd_eval(args: argparse.Namespace) -> None:
    expected = _load_run(args) if args.config else None
    ckpt = load_checkpoint(args.ckpt, expected)
    model = build_model(ckpt.run.model, ckpt.mode)
    model.load_state_dict(ckpt.state)
    scenes = _scenes_from(args, ckpt.run, lambda: eval_scenes(ckpt.run))
    print(evaluate(model, scenes).to_table())


def cmd_count_params(args: argparse.Namespace) -> None:
    run = _load_run(args)
    mode = TuningMode(args.mode) if args.mode else run.train.mode
    report = count_params(build_model(run.model, mode), mode)
    print(report.to_table())
    if args.out:
        _write_text(args.out, report.to_kv(), args.force)


def cmd_export_embeddings(args: argparse.Namespace) -> None:
    _check(InputValidator.validate_output_path(args.out, args.force))
    ckpt = load_checkpoint(args.ckpt)
    model = build_model(ckpt.run.model, ckpt.mode)
    model.load_state_dict(ckpt.state)
    channels = model.config.channels
    features = [f"c_{i}" for i in range(channels)]
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")

    if args.what == "pools":
        if not model.pools:
            raise ConfigurationError("checkpoint has no prompt pools to export")
        writer.writerow(["partition", "entry", "slot", *features])
        for key in sorted(model.pools, key=int):
            pool = model.pools[key]
            for row, vector in enumerate(pool_value_rows(pool)):
                entry, slot = divmod(row, pool.prompt_length)
                writer.writerow([key, entry, slot, *(repr(float(v)) for v in vector)])
    else:
        scenes = _scenes_from(args, ckpt.run, lambda: eval_scenes(ckpt.run))
        writer.writerow(["scene", "partition", "set", *features])
        with no_tape():
            for s, scene in enumerate(scenes):
                result = model(scene.cloud)
                check_detections(result.detections)
                for partition, index, vector in set_embeddings(result.trace):
                    writer.writerow([s, partition, index, *(repr(float(v)) for v in vector)])
    Path(args.out).write_text(buffer.getvalue(), encoding="utf-8")
    print(f"wrote {args.what} embeddings to {args.out}")


def apply_sweep_value(run: RunConfig, param: str, value: float) -> RunConfig:
    field = SWEEP_PARAMS[param]
    if field == "fraction":
        return run.with_overrides(train={"fraction": value})
    return run.with_overrides(model={field: int(value)})


def run_sweep_point(run_text: str, param: str, value: float,
                    pretrained: Mapping[str, FloatArray]) -> SweepRow:
    """Fine-tune and evaluate one sweep value; self-contained so it can run in a worker process."""
    run = apply_sweep_value(RunConfig.from_text(run_text), param, value)
    mode = run.train.mode
    result = transfer(run, mode, pretrained)
    metrics = evaluate(result.model, eval_scenes(run))
    return SweepRow(
        param=param,
        value=value,
        final_loss=result.log.final_loss,
        mean_f1=metrics.mean_f1,
        trainable=count_params(result.model, mode).trainable,
    )


def cmd_sweep(args: argparse.Namespace) -> None:
    _check(InputValidator.validate_sweep_param(args.param))
    ok, message, values = InputValidator.parse_values(args.values, integral=args.param != "fraction")
    _check((ok, message))
    if args.param == "fraction":
        for value in values:
            _check(InputValidator.validate_fraction(value))
    if args.out:
        _check(InputValidator.validate_output_path(args.out, args.force))
    run = _load_run(args)
    if args.mode:
        run = run.with_overrides(train={"mode": args.mode})
    for value in values:
        apply_sweep_value(run, args.param, value)

    if args.pretrained:
        source = load_checkpoint(args.pretrained)
        check_backbone(run, source.run)
        pretrained: Mapping[str, FloatArray] = source.state
    else:
        pretrained = pretrain(run)

    text = run.to_text()
    if settings.sweep_workers > 1 and len(values) > 1:
        with ProcessPoolExecutor(max_workers=settings.sweep_workers) as pool:
            rows = list(pool.map(run_sweep_point, [text] * len(values), [args.param] * len(values),
                                 values, [pretrained] * len(values)))
    else:
        rows = [run_sweep_point(text, args.param, value, pretrained) for value in values]

    report = SweepReport(param=args.param, rows=sorted(rows, key=lambda row: row.value))
    print(report.to_csv(), end="")
    if args.out:
        Path(args.out).write_text(report.to_csv(), encoding="utf-8")


def cmd_bench(args: argparse.Namespace) -> None:
    run = _load_run(args)
    if args.repeats < 1:
        raise UsageError("--repeats must be at least 1")
    scene = target_scenes(run, 1)[0]
    baseline = build_model(run.model, TuningMode.FROM_SCRATCH)
    prompted = build_model(run.model, TuningMode.SOP2)

    def timed(model: Callable) -> float:
        samples = []
        with no_tape():
            for _ in range(args.repeats):
                started = time.perf_counter()
                out = model(scene.cloud)
                samples.append(time.perf_counter() - started)
                check_detections(out.detections)
        return float(np.median(samples)) * 1000.0

    result = BenchResult(
        voxels=baseline(scene.cloud).voxels.num_voxels,
        repeats=args.repeats,
        baseline_ms=timed(baseline),
        prompted_ms=timed(prompted),
        baseline_params=baseline.num_parameters(),
        prompted_params=prompted.num_parameters(),
    )
    print(result.model_dump_json(indent=2))


# ==================== PARSER ====================

def _add_force(p: argparse.ArgumentParser) -> None:
    p.add_argument("--force", action="store_true", help="overwrite existing output files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sop2", description="Scene-oriented prompt pools for voxel detectors")
    parser.add_argument("--seed", type=int, default=None, help="global seed, overrides config seeds")
    sub = parser.add_subparsers(dest="command", required=True)
    modes = [m.value for m in TuningMode]

    p = sub.add_parser("gen-data", help="generate a synthetic scene archive")
    p.add_argument("--domain", default="source", help="source or target")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    _add_force(p)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="train or fine-tune under a tuning mode")
    p.add_argument("--config")
    p.add_argument("--mode", choices=modes)
    p.add_argument("--pretrained")
    p.add_argument("--data")
    p.add_argument("--fraction", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="write per-epoch records as JSON lines")
    _add_force(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="cell-level precision / recall / F1")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data")
    p.add_argument("--config", help="reject the checkpoint unless its config matches")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("count-params", help="trainable parameters per group")
    p.add_argument("--config")
    p.add_argument("--mode", choices=modes)
    p.add_argument("--out", help="also write key=value lines here")
    _add_force(p)
    p.set_defaults(handler=cmd_count_params)

    p = sub.add_parser("export-embeddings", help="per-set features or pool values as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data")
    p.add_argument("--what", choices=("sets", "pools"), default="sets")
    p.add_argument("--out", required=True)
    _add_force(p)
    p.set_defaults(handler=cmd_export_embeddings)

    p = sub.add_parser("sweep", help="fine-tune once per value of one hyperparameter")
    p.add_argument("--param", required=True, help="M, n_P, K or fraction")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--config")
    p.add_argument("--mode", choices=modes)
    p.add_argument("--pretrained")
    p.add_argument("--out")
    _add_force(p)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("bench", help="forward-pass timing, plain vs pooled backbone")
    p.add_argument("--config")
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(handler=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    started = time.perf_counter()
    try:
        args.handler(args)
    except Sop2Error as exc:
        logger.log_error(type(exc).__name__, str(exc), command=args.command, exit_code=exc.exit_code)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    logger.log_command(args.command, time.perf_counter() - started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
