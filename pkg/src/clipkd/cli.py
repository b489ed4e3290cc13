"""Command-line entry point.

Subcommands: gen-data, train-teacher, distill, eval, grad-check,
analyze, sweep. Exit codes: 0 success, 1 runtime failure (IO,
divergence, bad files), 2 config error, 3 gradient-check failure.
Every output file starts with the config digest and seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .batch import EmbeddingBatch
from .config import (apply_overrides, config_digest, load_config,
                     to_model_config, to_settings, to_synthetic_spec,
                     to_weights, validate_config)
from .data import class_prompts, generate_dataset
from .encoders import encode_text
from .errors import ClipKdError, ConfigError, FormatError, TrainingDiverged
from .evalkit import recall_at_k, similarity_report, zero_shot_accuracy
from .grads import grad_check_report
from .trainkit import distill, encode_split, load_checkpoint, train_teacher

THREADS_ENV = "CLIPKD_THREADS"


def _resolve_config(args) -> dict:
    cfg = load_config(args.config) if args.config else validate_config({})
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def _out_dir(args, cfg) -> Path:
    out = args.out or cfg.get("out_dir")
    if not out:
        raise ConfigError("an output directory is required (--out or config out_dir)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_kv_csv(path: Path, rows: list[tuple[str, object]], digest: str, seed: int):
    lines = [f"# config_digest={digest} seed={seed}", "metric,value"]
    lines += [f"{key},{value!r}" if isinstance(value, float) else f"{key},{value}"
              for key, value in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    spec = to_synthetic_spec(cfg)
    spec.validate()
    print(f"train/val/test: {spec.train_size}/{spec.val_size}/{spec.test_size}")
    if args.out or cfg.get("out_dir"):
        out = _out_dir(args, cfg)
        echo = {"config_digest": config_digest(cfg), "seed": cfg["seed"], "config": cfg}
        (out / "spec_echo.json").write_text(
            json.dumps(echo, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        print(f"wrote {out / 'spec_echo.json'}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg)
    result = train_teacher(to_synthetic_spec(cfg), to_model_config(cfg, "teacher"),
                           to_settings(cfg), cfg["seed"], out_dir=out,
                           digest=config_digest(cfg))
    final = result.final_breakdown
    print(f"teacher trained: steps={cfg['steps']} final_task_loss="
          f"{final.task if final else float('nan'):.6f}")
    print(f"wrote {result.checkpoint_path} and {result.metrics_path}")
    return 0


def cmd_distill(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg)
    weights = to_weights(cfg)
    teacher = None
    if weights.any_enabled:
        if not args.teacher:
            raise ConfigError("distillation weights enabled: --teacher <ckpt> is required")
        teacher, _, _ = load_checkpoint(args.teacher)
    result = distill(teacher, to_synthetic_spec(cfg), to_model_config(cfg, "student"),
                     weights, to_settings(cfg), cfg["seed"], out_dir=out,
                     digest=config_digest(cfg))
    final = result.final_breakdown
    enabled = ",".join(sorted(weights.enabled)) or "none"
    print(f"student trained: kd_terms={enabled} final_total_loss="
          f"{final.total if final else float('nan'):.6f}")
    print(f"wrote {result.checkpoint_path} and {result.metrics_path}")
    return 0


def _evaluate_model(model, cfg) -> list[tuple[str, object]]:
    spec = to_synthetic_spec(cfg)
    test = generate_dataset(spec)["test"]
    image_rows, text_rows = encode_split(model, test)
    image = EmbeddingBatch(image_rows)
    text = EmbeddingBatch(text_rows)
    i2t = recall_at_k(image, text, direction="i2t")
    t2i = recall_at_k(text, image, direction="t2i")
    prompts = encode_text(model, class_prompts(spec).texts)
    accuracy = zero_shot_accuracy(image, prompts, test.labels)
    rows: list[tuple[str, object]] = [("n", test.n)]
    for report in (i2t, t2i):
        for k, value in sorted(report.recalls.items()):
            rows.append((f"{report.direction}_r{k}", float(value)))
    rows.append(("zero_shot_acc", float(accuracy)))
    return rows


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg)
    ckpt = args.student or args.teacher
    if not ckpt:
        raise ConfigError("eval needs --student <ckpt> or --teacher <ckpt>")
    model, _, _ = load_checkpoint(ckpt)
    rows = _evaluate_model(model, cfg)
    _write_kv_csv(out / "eval.csv", rows, config_digest(cfg), cfg["seed"])
    for key, value in rows:
        print(f"{key} = {value}")
    print(f"wrote {out / 'eval.csv'}")
    return 0


def cmd_grad_check(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg)
    report = grad_check_report()
    lines = [f"# config_digest={config_digest(cfg)} seed={cfg['seed']}",
             "block,max_relative_error,max_absolute_error,tolerance,ok"]
    for name, (rel, ab, tol) in report.blocks.items():
        lines.append(f"{name},{rel!r},{ab!r},{tol!r},{int(rel <= tol)}")
    lines.append(f"overall,{report.max_relative_error!r},{report.max_absolute_error!r},"
                 f",{int(report.passed)}")
    (out / "grad_check.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"gradient checks {'passed' if report.passed else 'FAILED'}: "
          f"max relative error {report.max_relative_error:.3e}")
    print(f"wrote {out / 'grad_check.csv'}")
    return 0 if report.passed else 3


def cmd_analyze(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg)
    if not args.teacher or not args.student:
        raise ConfigError("analyze needs both --teacher <ckpt> and --student <ckpt>")
    teacher, _, _ = load_checkpoint(args.teacher)
    student, _, _ = load_checkpoint(args.student)
    val = generate_dataset(to_synthetic_spec(cfg))["val"]
    report = similarity_report(teacher, student, val)
    _write_kv_csv(out / "analysis.csv", report.as_rows(), config_digest(cfg), cfg["seed"])
    for key, value in report.as_rows():
        print(f"{key} = {value}")
    print(f"wrote {out / 'analysis.csv'}")
    return 0


def _sweep_point(payload: tuple) -> tuple[float, list[tuple[str, object]]]:
    cfg, teacher_path, parameter, value, out_dir = payload
    cfg = json.loads(json.dumps(cfg))
    if parameter == "mask_ratio":
        cfg["mask_ratio"] = value
        if cfg["weights"]["mfd"] <= 0:
            cfg["weights"]["mfd"] = 2000.0
    else:
        cfg["weights"][parameter] = value
    cfg = validate_config(cfg)
    weights = to_weights(cfg)
    teacher = None
    if weights.any_enabled:
        teacher, _, _ = load_checkpoint(teacher_path)
    result = distill(teacher, to_synthetic_spec(cfg), to_model_config(cfg, "student"),
                     weights, to_settings(cfg), cfg["seed"], out_dir=out_dir,
                     digest=config_digest(cfg))
    spec = to_synthetic_spec(cfg)
    val = generate_dataset(spec)["val"]
    image_rows, text_rows = encode_split(result.model, val)
    image, text = EmbeddingBatch(image_rows), EmbeddingBatch(text_rows)
    i2t = recall_at_k(image, text, direction="i2t").recall_at(1)
    t2i = recall_at_k(text, image, direction="t2i").recall_at(1)
    prompts = encode_text(result.model, class_prompts(spec).texts)
    acc = zero_shot_accuracy(image, prompts, val.labels)
    return value, [("i2t_r1", float(i2t)), ("t2i_r1", float(t2i)),
                   ("zero_shot_acc", float(acc))]


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg)
    sweep = cfg["sweep"]
    if sweep["parameter"] is None:
        raise ConfigError("sweep.parameter: must name a loss weight or mask_ratio")
    if not args.teacher:
        raise ConfigError("sweep needs --teacher <ckpt>")
    payloads = [(cfg, args.teacher, sweep["parameter"], value, str(out / f"point_{i}"))
                for i, value in enumerate(sweep["values"])]
    workers = int(os.environ.get(THREADS_ENV, "1") or "1")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_sweep_point, payloads))
    else:
        outcomes = [_sweep_point(p) for p in payloads]
    lines = [f"# config_digest={config_digest(cfg)} seed={cfg['seed']}",
             "parameter,value,i2t_r1,t2i_r1,zero_shot_acc"]
    for value, metrics in outcomes:
        cells = [sweep["parameter"], repr(float(value))]
        cells += [repr(float(v)) for _, v in metrics]
        lines.append(",".join(cells))
        print(f"{sweep['parameter']}={value}: " +
              " ".join(f"{k}={v:.4f}" for k, v in metrics))
    (out / "sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {out / 'sweep.csv'}")
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clipkd",
        description="Dual-encoder contrastive distillation at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {
        "gen-data": cmd_gen_data,
        "train-teacher": cmd_train_teacher,
        "distill": cmd_distill,
        "eval": cmd_eval,
        "grad-check": cmd_grad_check,
        "analyze": cmd_analyze,
        "sweep": cmd_sweep,
    }
    for name, handler in handlers.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config path (defaults apply if omitted)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a top-level scalar config field (repeatable)")
        p.add_argument("--teacher", help="teacher checkpoint path")
        p.add_argument("--student", help="student checkpoint path")
        p.set_defaults(func=handler)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (FormatError, TrainingDiverged) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"io error: {err}", file=sys.stderr)
        return 1
    except ClipKdError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
