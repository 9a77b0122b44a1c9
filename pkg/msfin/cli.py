"""Command-line entry point: train, infer, eval, params and selftest."""
import argparse
import sys
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional

import pandas as pd
from threadpoolctl import threadpool_limits

from msfin.core.config import load_config_file, settings
from msfin.core.exceptions import ConfigurationError, MsfinError
from msfin.core.logging import configure_logging
from msfin.models.common import Ablation, Recipe, Subcommand
from msfin.models.manifest import NETWORK_KEYS, PRESET_KEYS, TRAIN_KEYS, RunManifest
from msfin.models.network import NetworkConfig
from msfin.models.training import TrainConfig
from msfin.nn.network import MSFIN
from msfin.nn.params import PUBLISHED_TOTALS_K, ablation_totals, count_parameters
from msfin.selftest import SLOW_SUITES, SUITES, run_selftest
from msfin.services.checkpoint_service import checkpoint_service
from msfin.services.dataset_service import lr_directory_for
from msfin.services.evaluation_service import evaluation_service
from msfin.services.training_service import training_service
from msfin.utils.visualizations import TrainingVisualizer

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

# Extra spellings for a few config keys.
FLAG_ALIASES = {"total_steps": ["--steps"]}


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _add_config_flags(parser: argparse.ArgumentParser, model, keys: Iterable[str]) -> None:
    group = parser.add_argument_group(f"{model.__name__} overrides")
    for key in keys:
        field = model.model_fields[key]
        group.add_argument(
            _flag(key), *FLAG_ALIASES.get(key, []), dest=f"cfg_{key}", default=None, metavar="VALUE",
            help=f"(default: {field.default})",
        )


def _add_network_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="flat `key = value` config file")
    parser.add_argument("--ablation", dest="cfg_ablation", choices=[a.value for a in Ablation],
                        help="toggle overlay applied on top of the variant preset")
    _add_config_flags(parser, NetworkConfig, NETWORK_KEYS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msfin", description=settings.PROJECT_DESCRIPTION)
    parser.add_argument("--log-level", default=None, help=f"(default: {settings.LOG_LEVEL})")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser(Subcommand.TRAIN.value, help="train a network on a directory of HR images")
    train.add_argument("--data", type=Path, required=True, help="directory of HR training PNGs")
    train.add_argument("--out", type=Path, required=True, help="output directory")
    train.add_argument("--resume", type=Path, help="checkpoint to continue from")
    train.add_argument("--recipe", dest="cfg_recipe", choices=[r.value for r in Recipe],
                       help="whole-run preset applied under the config file and flags")
    _add_network_flags(train)
    _add_config_flags(train, TrainConfig, TRAIN_KEYS)

    infer = sub.add_parser(Subcommand.INFER.value, help="super-resolve one image")
    infer.add_argument("--ckpt", type=Path, required=True)
    infer.add_argument("--in", dest="input", type=Path, required=True)
    infer.add_argument("--out", type=Path, required=True)
    infer.add_argument("--ensemble", action="store_true", help="x8 dihedral self-ensemble")

    evaluate = sub.add_parser(Subcommand.EVAL.value, help="PSNR/SSIM over a directory of HR images")
    evaluate.add_argument("--ckpt", type=Path, required=True)
    evaluate.add_argument("--hr", type=Path, required=True)
    evaluate.add_argument("--ensemble", action="store_true")
    evaluate.add_argument("--shave", type=int, default=None, help="border shave (default: scale)")
    evaluate.add_argument("--save-sr", type=Path, default=None, help="write SR PNGs here")
    evaluate.add_argument("--lr-dir", default=None,
                          help="read LR images from this directory ('auto': sibling LRx{scale})")
    evaluate.add_argument("--csv", type=Path, default=None, help="write the report as CSV")
    evaluate.add_argument("--plot", type=Path, default=None, help="write a plotly HTML chart")

    params = sub.add_parser(Subcommand.PARAMS.value, help="per-layer parameter report")
    _add_network_flags(params)
    params.add_argument("--target", type=float, default=None,
                        help="expected total in K; exit 1 when off by more than 2%%")
    params.add_argument("--ablations", action="store_true", help="also list every ablation overlay")

    selftest = sub.add_parser(Subcommand.SELFTEST.value, help="gradient, adjoint, shape and metric checks")
    selftest.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    selftest.add_argument("--suite", action="append", choices=list(SUITES) + list(SLOW_SUITES),
                          help="run only this suite (repeatable; default: every fast suite)")
    return parser


def collect_overrides(args: argparse.Namespace, keys: Iterable[str]) -> Dict[str, str]:
    """Flag values the user actually passed, keyed by config field name."""
    overrides = {}
    for key in keys:
        value = getattr(args, f"cfg_{key}", None)
        if value is not None:
            overrides[key] = str(value)
    return overrides


def _file_values(args: argparse.Namespace) -> Dict[str, str]:
    return load_config_file(args.config) if getattr(args, "config", None) else {}


def cmd_train(args: argparse.Namespace) -> int:
    overrides = collect_overrides(args, NETWORK_KEYS + TRAIN_KEYS + PRESET_KEYS)
    base: Dict[str, str] = {"seed": str(settings.DEFAULT_SEED)}
    if args.resume:
        base.update(checkpoint_service.load(args.resume).config)
    base.update(_file_values(args))
    manifest = RunManifest.resolve(
        Subcommand.TRAIN, base, overrides, str(args.config) if args.config else None
    )
    net = MSFIN(manifest.network, seed=manifest.train.seed)
    summary = training_service.train_loop(net, args.data, manifest, args.out, resume=args.resume)
    print(f"steps {summary.start_step} -> {summary.final_step}")
    if summary.initial_loss is not None:
        print(f"loss {summary.initial_loss:.6f} -> {summary.final_loss:.6f}")
    if summary.val_psnr is not None:
        print(f"validation PSNR {summary.val_psnr:.2f} dB")
    if summary.checkpoints:
        print(f"checkpoint {summary.checkpoints[-1]}")
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    net, manifest = checkpoint_service.load_network(args.ckpt, command=Subcommand.INFER)
    sr = evaluation_service.infer(net, args.input, args.out, manifest.network.scale, args.ensemble)
    print(f"{args.out} ({sr.width}x{sr.height})")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    net, manifest = checkpoint_service.load_network(args.ckpt, command=Subcommand.EVAL)
    scale = manifest.network.scale
    lr_dir = lr_directory_for(args.hr, scale) if args.lr_dir == "auto" else args.lr_dir
    report = evaluation_service.evaluate_dir(
        net, args.hr, scale,
        shave=args.shave, ensemble=args.ensemble, save_sr=args.save_sr, lr_dir=lr_dir,
        config=manifest.config_echo(),
    )
    print(report.format_table())
    if args.csv:
        report.to_csv(str(args.csv))
    if args.plot:
        TrainingVisualizer.write_html(TrainingVisualizer.create_metric_bars(report), args.plot)
    return EXIT_OK


def cmd_params(args: argparse.Namespace) -> int:
    overrides = collect_overrides(args, NETWORK_KEYS + PRESET_KEYS)
    manifest = RunManifest.resolve(
        Subcommand.PARAMS, _file_values(args), overrides, str(args.config) if args.config else None
    )
    report = count_parameters(manifest.network)
    print(report.format_table())
    published = PUBLISHED_TOTALS_K.get(manifest.network.variant.value)
    if published is not None:
        print(f"published {manifest.network.variant.value}: {published:.0f}K")
    if args.ablations:
        totals = ablation_totals(manifest.network)
        frame = pd.DataFrame({"ablation": list(totals), "params": list(totals.values())})
        print(frame.to_string(index=False))
    if args.target is not None and not report.within(args.target):
        print(f"total {report.total_k:.1f}K is not within 2% of {args.target:g}K", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_selftest(args: argparse.Namespace) -> int:
    report = run_selftest(args.seed, args.suite)
    print(report.format_table())
    return EXIT_OK if report.passed else EXIT_FAILURE


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    Subcommand.TRAIN.value: cmd_train,
    Subcommand.INFER.value: cmd_infer,
    Subcommand.EVAL.value: cmd_eval,
    Subcommand.PARAMS.value: cmd_params,
    Subcommand.SELFTEST.value: cmd_selftest,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK

    logger = configure_logging(
        log_level=args.log_level or settings.LOG_LEVEL,
        json_format=settings.LOG_JSON,
        log_to_file=settings.LOG_TO_FILE,
        log_dir=settings.LOG_DIR,
    )
    try:
        with threadpool_limits(limits=settings.MSFIN_THREADS):
            return COMMANDS[args.command](args)
    except ConfigurationError as e:
        logger.error(f"Configuration error: {str(e)}")
        print(f"msfin {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except MsfinError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        print(f"msfin {args.command}: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
