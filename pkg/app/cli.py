# app/cli.py
"""Command line: python -m app <command> [--config FILE] [--seed N] [--task T] [--no-kapt] [--no-nte]."""

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

from app import config
from app.datasim.generator import SimulationConfig, generate_dataset
from app.datasim.storage import save_dataset
from app.main import serve
from app.processing.cv import CONFIG_NAME, evaluate_run, run_ablation, run_cv
from app.processing.decoding import DECODER_REPORT_NAME, interpret_run, run_decoder
from app.processing.gradchecks import TOLERANCE, run_gradchecks
from app.processing.plots import emit_plots, emit_similarity
from app.utils import file_handler
from app.utils.errors import DiffMathError, GaitVLMError

logger = logging.getLogger(__name__)

EXIT_ERROR = 1
EXIT_USAGE = 2


class ArgumentError(GaitVLMError):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument errors become a JSON record and exit code 2."""

    def error(self, message: str):
        _print_error(ArgumentError(message).to_record())
        sys.exit(EXIT_USAGE)


def _print_error(record: Dict[str, Any]) -> None:
    print(json.dumps(record, default=str), file=sys.stderr)


def _emit(result: Dict[str, Any]) -> None:
    print(json.dumps(result, indent=2, default=str))


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if args.task is not None:
        out["task"] = args.task
    if args.no_kapt:
        out["use_kapt"] = False
    if args.no_nte:
        out["use_nte"] = False
    return out


def _run_dir(path: Optional[str]) -> str:
    if path:
        return os.path.abspath(path)
    return file_handler.get_run_dir(file_handler.new_run_id(), create=True)


# --- commands ---

def cmd_gen_data(args, cfg) -> Dict[str, Any]:
    dataset = generate_dataset(SimulationConfig.from_experiment(cfg))
    path = save_dataset(dataset, args.out)
    videos = dataset.videos()
    return {"path": path, "subjects": len(dataset.subjects), "videos": len(videos), "paired": sum(v.paired for v in videos)}


def cmd_train(args, cfg) -> Dict[str, Any]:
    run_dir = _run_dir(args.run)
    if args.ablation:
        reports = run_ablation(cfg, run_dir)
        return {"run_dir": run_dir, "variants": {n: {"mean_accuracy": r.mean_accuracy, "mean_macro_f1": r.mean_macro_f1} for n, r in reports.items()}}
    report = run_cv(cfg, run_dir)
    return {
        "run_dir": run_dir,
        "variant": report.variant,
        "mean_accuracy": report.mean_accuracy,
        "std_accuracy": report.std_accuracy,
        "mean_macro_f1": report.mean_macro_f1,
        "std_macro_f1": report.std_macro_f1,
    }


def cmd_eval(args, cfg) -> Dict[str, Any]:
    reports = evaluate_run(args.run, args.fold)
    result = {str(i): r.model_dump() for i, r in reports.items()}
    file_handler.save_json(os.path.join(args.run, "eval.json"), result)
    return {"run_dir": args.run, "folds": {i: r["accuracy"] for i, r in result.items()}}


def cmd_decode(args, cfg) -> Dict[str, Any]:
    if args.run:
        # interpret with the configuration the run was trained under
        cfg = config.load_config(os.path.join(args.run, CONFIG_NAME))
    outcome = run_decoder(cfg)
    result: Dict[str, Any] = outcome.summary()
    if args.run:
        result["interpretations"] = interpret_run(args.run, cfg, outcome.model, stats=outcome.stats)
        file_handler.save_json(os.path.join(args.run, DECODER_REPORT_NAME), outcome.summary())
    return result


def cmd_plot_similarity(args, cfg) -> Dict[str, Any]:
    if args.run:
        return {"files": emit_plots(args.run)}
    return {"files": emit_similarity(args.out, cfg, points=args.points)}


def cmd_gradcheck(args, cfg) -> Dict[str, Any]:
    worst = run_gradchecks(cfg, points=args.points, max_entries=args.entries)
    failed = {k: v for k, v in worst.items() if v >= TOLERANCE}
    if failed:
        raise DiffMathError(f"Gradient check above {TOLERANCE}: {failed}")
    return {"max_relative_error": worst, "tolerance": TOLERANCE}


def cmd_serve(args, cfg) -> Dict[str, Any]:
    serve(host=args.host, port=args.port)
    return {}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat KEY=value experiment config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--task", choices=sorted(config.TASK_CLASSES))
    common.add_argument("--no-kapt", action="store_true", help="plain learnable context, no keyword tokens")
    common.add_argument("--no-nte", action="store_true", help="drop the numeric alignment term")

    parser = _Parser(prog="python -m app", description="Knowledge-augmented gait classification experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate and store a synthetic dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="k-fold cross-validation run")
    p.add_argument("--run", help="run directory (default: a new one under GAIT_RUN_ROOT)")
    p.add_argument("--ablation", action="store_true", help="run the four model variants")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="re-evaluate the checkpoints of a run")
    p.add_argument("--run", required=True)
    p.add_argument("--fold", type=int, action="append", help="fold index (repeatable; default all)")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("decode", parents=[common], help="train the decoder and report fidelity")
    p.add_argument("--run", help="also interpret the classes of this run's first fold")
    p.set_defaults(handler=cmd_decode)

    p = sub.add_parser("plot-similarity", parents=[common], help="similarity maps and plot data")
    p.add_argument("--out", default=".")
    p.add_argument("--run", help="emit every plot file for a finished run")
    p.add_argument("--points", type=int, default=201)
    p.set_defaults(handler=cmd_plot_similarity)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss")
    p.add_argument("--points", type=int, default=10)
    p.add_argument("--entries", type=int, default=8, help="checked entries per tensor (smaller tensors in full)")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("serve", parents=[common], help="start the run service")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=config.PORT)
    p.set_defaults(handler=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    config.setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = config.load_config(args.config, _overrides(args))
        result = args.handler(args, cfg)
    except GaitVLMError as e:
        logger.error(f"Command '{args.command}' failed: {e}", exc_info=True)
        _print_error(e.to_record())
        return EXIT_ERROR
    except Exception as e:
        logger.error(f"Command '{args.command}' failed unexpectedly: {e}", exc_info=True)
        _print_error({"error": type(e).__name__, "message": str(e)})
        return EXIT_ERROR
    if result:
        _emit(result)
    return 0
