"""
Multi-Perspective Anomaly Detection - Command Line
Subcommands: synth, pretrain, train, eval, baseline, hpo, repro
"""

import argparse
import logging
import sys
from typing import Callable, Dict, List, Optional

import settings
from checkpoint import load_checkpoint, load_pretrained
from evaluation import reports_table, write_reports
from exceptions import AnomalyDetectionError, exit_code_for
from experiment import ExperimentRunner
from experiment_config import PRESETS, SCALES, ExperimentConfig, is_baseline_preset, load_config, preset

logger = logging.getLogger(__name__)


def resolve_config(args: argparse.Namespace, preset_name: Optional[str] = None) -> ExperimentConfig:
    """--config file, else a named preset, else defaults; then --seed and --out overrides"""
    name = preset_name or getattr(args, "preset", None)
    if args.config:
        config = load_config(args.config)
    elif name:
        config = preset(name, args.scale)
    else:
        config = ExperimentConfig(scale=args.scale)
    if args.seed is not None:
        config.seed = args.seed
    if args.out:
        config.output_dir = args.out
    return config.validate()


def _finish(runner: ExperimentRunner, command: str) -> None:
    manifest = runner.write_run_manifest(command)
    print(f"✅ {command} finished - artifacts in {runner.out_dir} (manifest {manifest})")


def cmd_synth(args: argparse.Namespace) -> int:
    runner = ExperimentRunner(resolve_config(args))
    directory = runner.synth()
    print(f"✅ Dataset exported to {directory}")
    _finish(runner, "synth")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    runner = ExperimentRunner(resolve_config(args))
    pretrained = runner.pretrain(runner.config.seed)
    path = runner.save_pretrained(pretrained, runner.config.seed)
    print(f"✅ Pretrained {pretrained.strategy.value} networks saved to {path} (final loss {pretrained.loss_history[-1]:.6f})")
    _finish(runner, "pretrain")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    runner = ExperimentRunner(resolve_config(args))
    pretrained = load_pretrained(args.pretrained) if args.pretrained else None
    model = runner.train(runner.config.seed, pretrained)
    path = runner.save_model(model, runner.config.seed)
    print(f"✅ SVDD model saved to {path} (radius {model.sphere.radius:.6f})")
    _finish(runner, "train")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    runner = ExperimentRunner(resolve_config(args))
    model = load_checkpoint(args.checkpoint)
    runner.check_model_shape(model)
    reports = {runner.config.name: runner.evaluate(model)}
    runner.artifacts.extend(write_reports(reports, runner.out_dir, "eval_report"))
    print(reports_table(reports))
    _finish(runner, "eval")
    return 0


def cmd_baseline(args: argparse.Namespace) -> int:
    runner = ExperimentRunner(resolve_config(args))
    reports = runner.run_baselines()
    print(reports_table(reports))
    _finish(runner, "baseline")
    return 0


def cmd_hpo(args: argparse.Namespace) -> int:
    runner = ExperimentRunner(resolve_config(args))
    result, report = runner.search()
    finished = sum(1 for t in result.trials if t.status == "ok")
    print(f"📊 {finished}/{len(result.trials)} trials finished; best objective {result.best.objective:.4f}")
    print(reports_table({f"{runner.config.name}-search": report}))
    _finish(runner, "hpo")
    return 0


def cmd_repro(args: argparse.Namespace) -> int:
    runner = ExperimentRunner(resolve_config(args, args.name))
    if is_baseline_preset(args.name):
        reports = runner.run_baselines()
    else:
        reports = runner.reproduce()
    print(reports_table(reports))
    _finish(runner, f"repro {args.name}")
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "hpo": cmd_hpo,
    "repro": cmd_repro,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (default: $MVSVDD_OUTPUT_DIR/<experiment name>)")
    common.add_argument("--scale", choices=SCALES, default="desk", help="preset scale")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")

    parser = argparse.ArgumentParser(
        prog="cli.py", description="Multi-perspective Deep SVDD anomaly detection experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate or load the dataset and export it as PNG + CSV",
        "pretrain": "autoencoder stage only; writes a pretrained checkpoint",
        "train": "both training stages, or the SVDD stage only with --pretrained",
        "baseline": "PCA + OC-SVM, KDE and Isolation Forest grid search",
        "hpo": "hyperband search, then the winner on every seed",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    sub.choices["train"].add_argument("--pretrained", help="pretrained networks checkpoint directory")

    p = sub.add_parser("eval", parents=[common], help="score a test split with a trained checkpoint")
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint directory")

    p = sub.add_parser("repro", parents=[common], help="full pipeline of a named preset")
    p.add_argument("name", choices=sorted(PRESETS), metavar="PRESET", help="preset name, e.g. table5-digit0")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings.configure_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except AnomalyDetectionError as e:
        logger.debug("Command %s failed", args.command, exc_info=True)
        print(f"❌ {type(e).__name__}: {e}")
        return exit_code_for(e)
    except Exception as e:
        logger.exception("Unexpected error in %s", args.command)
        print(f"❌ Internal error: {e}")
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
