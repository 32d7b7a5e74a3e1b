"""Command-line entry point.

Settings are layered: built-in defaults, then a flat ``key = value`` config
file (keys are flag names without the leading dashes), then ``PILF_*``
environment variables (flag name upper-cased, dashes as underscores), then
command-line flags.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Any, Sequence

from .data import FORMATS, ParseError, SplitSpec
from .harness import ExperimentConfig, SweepConfig, run_experiment, sweep_gains
from .model import DEFAULT_INIT_SCALE, Hyperparams
from .optimizers import DivergenceError, OptimizerKind

ENV_PREFIX = "PILF_"


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off", ""):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


# flag -> (converter, default, help)
OPTIONS: dict[str, tuple[Any, Any, str]] = {
    "data": (str, None, "ratings file, or ROWSxCOLS[,rank=..,density=..,noise=..,seed=..] "
                        "with --format synthetic"),
    "format": (str, "movielens-dat", f"one of {', '.join(FORMATS)}, synthetic"),
    "optimizer": (str, "plain-sgd", "plain-sgd or pilf (pilf needs --kp and --ki)"),
    "rank": (int, 20, "latent dimension f"),
    "lr": (float, 0.01, "learning rate eta"),
    "lambda": (float, 0.03, "regularization lambda"),
    "kp": (float, None, "proportional gain (pilf)"),
    "ki": (float, None, "integral gain (pilf)"),
    "epochs": (int, 1000, "maximum number of epochs"),
    "seed": (int, 0, "seed for initialization and shuffling"),
    "split": (str, "0.8,0.1,0.1", "train,validation,test fractions"),
    "split-seed": (int, None, "seed for the split (defaults to --seed)"),
    "out": (str, None, "metrics csv (single run) or sweep csv (sweep mode)"),
    "checkpoint": (str, None, "write best factors to this csv"),
    "sweep-kp": (_floats, None, "comma-separated kp grid; enables sweep mode"),
    "sweep-ki": (_floats, None, "comma-separated ki grid; enables sweep mode"),
    "workers": (int, None, "parallel sweep cells"),
    "cell-dir": (str, None, "per-cell metrics csv directory in sweep mode"),
    "aggregation": (str, "mean", "per-node error aggregation: mean or sum"),
    "clamp": (float, None, "symmetric bound on the integral accumulators"),
    "init-scale": (float, DEFAULT_INIT_SCALE, "factors start uniform in (0, init-scale]"),
    "threshold": (float, 1e-5, "minimum validation RMSE improvement"),
    "patience": (int, 2, "epochs without improvement before stopping"),
    "no-shuffle": (_bool, False, "visit entries in stored order every epoch"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pilf",
        description="Train plain or PI-refined SGD latent factor models on sparse ratings.",
    )
    parser.add_argument("--config", help="flat key = value settings file")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    for name, (conv, default, text) in OPTIONS.items():
        if conv is _bool:
            parser.add_argument(f"--{name}", action="store_const", const=True,
                                default=argparse.SUPPRESS, help=text)
        else:
            parser.add_argument(f"--{name}", type=conv, default=argparse.SUPPRESS,
                                help=f"{text} (default: {default})")
    return parser


def read_config_file(path: str) -> dict[str, str]:
    settings: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip().lstrip("-")
            if not sep or key not in OPTIONS:
                raise ValueError(f"{path}:{lineno}: unrecognised setting {raw.strip()!r}")
            settings[key] = value.strip()
    return settings


def env_settings(environ: dict[str, str] | None = None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    found = {}
    for name in OPTIONS:
        key = ENV_PREFIX + name.upper().replace("-", "_")
        if key in environ:
            found[name] = environ[key]
    return found


def resolve_settings(argv: Sequence[str] | None, environ: dict[str, str] | None = None
                     ) -> tuple[dict[str, Any], argparse.Namespace]:
    parser = build_parser()
    args = parser.parse_args(argv)
    settings = {name: default for name, (_, default, _) in OPTIONS.items()}
    layered: dict[str, str] = {}
    if args.config:
        layered.update(read_config_file(args.config))
    layered.update(env_settings(environ))
    for name, value in layered.items():
        conv = OPTIONS[name][0]
        try:
            settings[name] = conv(value)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            parser.error(f"bad value for {name}: {value!r} ({exc})")
    for name in OPTIONS:
        attr = name.replace("-", "_")
        if hasattr(args, attr):
            settings[name] = getattr(args, attr)
    return settings, args


def make_configs(settings: dict[str, Any]) -> ExperimentConfig | SweepConfig:
    sweep = settings["sweep-kp"] is not None or settings["sweep-ki"] is not None
    optimizer = OptimizerKind.PILF if sweep else OptimizerKind(settings["optimizer"])
    kp, ki = settings["kp"], settings["ki"]
    if sweep:
        kp = 1.0 if kp is None else kp
        ki = 0.0 if ki is None else ki
    hp = Hyperparams(
        eta=settings["lr"], lam=settings["lambda"], rank=settings["rank"], kp=kp, ki=ki,
        max_epochs=settings["epochs"], conv_threshold=settings["threshold"],
        conv_patience=settings["patience"], seed=settings["seed"],
        init_scale=settings["init-scale"], shuffle_per_epoch=not settings["no-shuffle"],
        integral_aggregation=settings["aggregation"], integral_clamp=settings["clamp"],
    )
    split_seed = settings["split-seed"] if settings["split-seed"] is not None else settings["seed"]
    base = ExperimentConfig(
        data_path=settings["data"], data_format=settings["format"],
        split=SplitSpec.parse(settings["split"], seed=split_seed),
        optimizer=optimizer, hp=hp, output_path=settings["out"],
        checkpoint_path=settings["checkpoint"],
    )
    if not sweep:
        return base
    return SweepConfig(base, settings["sweep-kp"] or [kp], settings["sweep-ki"] or [ki],
                       workers=settings["workers"], cell_dir=settings["cell-dir"])


def main(argv: Sequence[str] | None = None) -> int:
    try:
        settings, args = resolve_settings(argv)
    except (OSError, ValueError) as exc:
        print(f"pilf: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if settings["data"] is None:
        print("pilf: --data is required", file=sys.stderr)
        return 2
    try:
        config = make_configs(settings)
    except ValueError as exc:
        print(f"pilf: {exc}", file=sys.stderr)
        return 2

    try:
        if isinstance(config, SweepConfig):
            rows = sweep_gains(config)
            print("kp\tki\tbest_rmse\tbest_mae\tepochs_to_best\tseconds_to_best\tdiverged")
            for r in rows:
                print(f"{r.kp:g}\t{r.ki:g}\t{r.best_rmse:.4f}\t{r.best_mae:.4f}\t"
                      f"{r.epochs_to_best}\t{r.seconds_to_best:.2f}\t{int(r.diverged)}")
        else:
            result = run_experiment(config)
            f = result.final
            print(f"optimizer={config.optimizer.value} best_epoch={f.epoch} "
                  f"epochs_run={len(result.history)} converged={result.converged}")
            print(f"val_rmse={f.val_rmse:.4f} val_mae={f.val_mae:.4f} "
                  f"test_rmse={result.test_rmse:.4f} test_mae={result.test_mae:.4f}")
            print(f"seconds_to_best={f.elapsed_seconds:.2f} "
                  f"seconds_total={result.seconds_total:.2f}")
    except ParseError as exc:
        print(f"pilf: cannot read {settings['data']}: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"pilf: {exc}", file=sys.stderr)
        return 4
    except (OSError, ValueError) as exc:
        print(f"pilf: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
