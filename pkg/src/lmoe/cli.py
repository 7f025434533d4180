"""Command line: ``lmoe {train,evaluate,generate,gradcheck,sweep,inspect}``.

Exit codes: 0 ok, 1 runtime or check failure, 2 configuration error,
3 training divergence (the last good state is checkpointed first).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .config import RunConfig, load_config
from .data import Vocab
from .errors import ConfigError, DivergenceError, LmoeError
from .gating import entropy
from .gradcheck import grad_check, tiny_setup
from .inference import generate, task_accuracy
from .rng import stream_rng
from .runner import prepare_data, run_sweep, run_training
from .trainer import load_checkpoint, routing_summary

log = logging.getLogger("lmoe")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be in [0, 2^64), got {text}")
    return value


def _non_negative_float(text: str) -> float:
    value = float(text)
    if not math.isfinite(value) or value < 0:
        raise argparse.ArgumentTypeError(f"expected a finite value >= 0, got {text}")
    return value


def _lambda_list(text: str) -> list[float]:
    try:
        lams = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--lambda-list: not a comma-separated list of numbers: {text!r}") from None
    if not lams or any(not math.isfinite(x) or x < 0 for x in lams):
        raise argparse.ArgumentTypeError(f"--lambda-list: need non-negative numbers, got {text!r}")
    return lams


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lmoe", description="LoRA mixture-of-experts on a frozen toy transformer.")
    parser.add_argument("--print-config", action="store_true",
                        help="print the effective configuration (defaults merged with --config) and exit")
    parser.add_argument("--config", metavar="PATH", help="JSON run configuration")
    sub = parser.add_subparsers(dest="command")

    def common(p, checkpoint_help=None):
        p.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS, help="JSON run configuration")
        p.add_argument("--seed", type=_u64, help="override train.seed")
        p.add_argument("--out", metavar="DIR", help="output directory (overrides out_dir)")
        if checkpoint_help:
            p.add_argument("--checkpoint", metavar="PATH", help=checkpoint_help)

    common(sub.add_parser("train", help="train experts and gates"), "resume from this checkpoint")
    common(sub.add_parser("evaluate", help="held-out loss, routing and task accuracy of a checkpoint"),
           "checkpoint to evaluate")
    p = sub.add_parser("generate", help="decode from a checkpoint with a per-token routing trace")
    common(p, "checkpoint to decode with")
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new-tokens", type=int, default=8)
    p.add_argument("--temperature", type=_non_negative_float, default=0.0)
    p = sub.add_parser("gradcheck", help="finite-difference check of the joint loss gradient")
    common(p)
    p.add_argument("--coords", type=int, default=20, help="sampled coordinates per trainable tensor")
    p.add_argument("--tol", type=float, default=1e-4)
    p = sub.add_parser("sweep", help="train once per lambda from matched seeds and compare routing")
    common(p)
    p.add_argument("--lambda-list", type=_lambda_list, default=[0.0, 0.01, 0.1], metavar="CSV")
    p.add_argument("--steps", type=int, help="steps per run (default: train.steps)")
    p = sub.add_parser("inspect", help="routing.csv (step, p_bar_i, entropy) from a metrics.jsonl")
    p.add_argument("metrics", metavar="METRICS", help="path to metrics.jsonl")
    p.add_argument("--out", metavar="PATH", help="CSV path (default: routing.csv beside the metrics file)")
    return parser


def _configure_logging() -> None:
    level = os.environ.get("LMOE_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigError(f"LMOE_LOG: unknown log level {level!r}")
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def _run_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    cfg.validate()
    return cfg


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _load(path: str):
    if not path:
        raise ConfigError("--checkpoint is required for this command")
    state, meta = load_checkpoint(path)
    if "vocab" not in meta or "run_config" not in meta:
        raise ConfigError(f"{path}: checkpoint was not written by `lmoe train` (no vocabulary stored)")
    return state, meta, Vocab(list(meta["vocab"]))


def cmd_train(args) -> int:
    cfg = _run_config(args)
    summary = run_training(cfg, cfg.out_dir, resume=args.checkpoint)
    print(f"trained to step {summary['steps']} in {summary['runtime_seconds']:.1f}s; outputs in {cfg.out_dir}")
    if "l_ar_relative_drop" in summary:
        print(f"L_AR first {summary['l_ar_first']:.4f}  smoothed final {summary['l_ar_smoothed_final']:.4f}  "
              f"drop {100 * summary['l_ar_relative_drop']:.1f}%")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    state, meta, vocab = _load(args.checkpoint)
    cfg = RunConfig.from_dict(meta["run_config"]) if args.config is None else _run_config(args)
    data = prepare_data(cfg)
    if data.vocab.chars != vocab.chars:
        raise ConfigError("evaluate: configured data has a different vocabulary than the checkpoint")
    s = routing_summary(state.model, data.eval, vocab, cfg.train.seq_len)
    report = {"step": state.step, "l_ar": s.l_ar, "p_bar": s.p_bar, "sum_sq": s.sum_sq, "entropy": s.entropy,
              "task_accuracy": task_accuracy(state.model, vocab, data.eval)}
    _print_json(report)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_generate(args) -> int:
    state, meta, vocab = _load(args.checkpoint)
    seed = args.seed if args.seed is not None else meta["run_config"]["train"]["seed"]
    rng = stream_rng(seed, "sample")
    g = generate(state.model, vocab, args.prompt, args.max_new_tokens, args.temperature, rng)
    print(g.text)
    print(json.dumps({"prompt": g.prompt, "text": g.text, "token_ids": g.token_ids, "trace": g.trace},
                     sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    with dc.float64_mode():
        model, batch = tiny_setup(seed)
        report = grad_check(model, batch, n_coords=args.coords, tol=args.tol, seed=seed)
    print(f"{'tensor':<40} {'coords':>6} {'max rel err':>12}")
    for e in report.entries:
        print(f"{e.name:<40} {e.checked:>6} {e.max_rel_err:>12.3e}")
    print(f"max relative error {report.max_rel_err:.3e} (tolerance {report.tolerance:g}): "
          f"{'PASS' if report.passed else 'FAIL'}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_sweep(args) -> int:
    cfg = _run_config(args)
    runs = run_sweep(cfg, args.lambda_list, args.steps)
    rows = []
    for r in runs:
        row = {"lambda": r.lam, "error": r.error}
        if r.summary is not None:
            row.update({"p_bar": r.summary.p_bar, "sum_sq": r.summary.sum_sq, "entropy": r.summary.entropy,
                        "probe_l_ar": r.summary.l_ar, "final_l_ar": r.final_l_ar,
                        "l_lb_min": r.lb_range[0], "l_lb_max": r.lb_range[1]})
        rows.append(row)
    print(f"{'lambda':>10} {'sum p_bar^2':>12} {'entropy':>9} {'L_AR':>8}")
    for row in rows:
        if row["error"]:
            print(f"{row['lambda']:>10g}  failed: {row['error']}")
        else:
            print(f"{row['lambda']:>10g} {row['sum_sq']:>12.5f} {row['entropy']:>9.4f} {row['probe_l_ar']:>8.4f}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    return EXIT_FAIL if any(row["error"] for row in rows) else EXIT_OK


def routing_rows(metrics_path: str | Path) -> list[list]:
    """(step, p_bar_0..p_bar_{N-1}, entropy) per logged step."""
    rows = []
    with open(metrics_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                p = [float(x) for x in rec["p_bar"]]
                step = int(rec["step"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"{metrics_path}:{lineno}: not a metrics record ({exc})") from None
            rows.append([step, *p, float(rec.get("entropy", entropy(np.asarray(p))))])
    return rows


def cmd_inspect(args) -> int:
    rows = routing_rows(args.metrics)
    if not rows:
        raise ConfigError(f"{args.metrics}: no metrics records")
    n = len(rows[0]) - 2
    out = Path(args.out) if args.out else Path(args.metrics).with_name("routing.csv")
    with open(out, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["step", *(f"p_bar_{i}" for i in range(n)), "entropy"])
        w.writerows(rows)
    last = rows[-1]
    print(f"{len(rows)} steps, {n} experts -> {out}")
    print("final p_bar " + " ".join(f"{x:.4f}" for x in last[1:-1]) + f"  entropy {last[-1]:.4f}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "generate": cmd_generate,
            "gradcheck": cmd_gradcheck, "sweep": cmd_sweep, "inspect": cmd_inspect}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _configure_logging()
        if args.print_config:
            _print_json(_run_config(args).to_dict())
            return EXIT_OK
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_CONFIG
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"lmoe: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"lmoe: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (LmoeError, OSError) as exc:
        print(f"lmoe: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
