"""Command-line entry point.

Subcommands: train, eval, plan, count, gradcheck, ablate,
export-activations, sweep.  Flags may also be supplied through a key=value
config file (``--config``); explicit flags override file values, and the
fully resolved run spec is echoed into the output directory before any
work starts.  Exit codes: 0 ok, 2 usage/configuration, 3 data/checkpoint,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from . import planner
from .errors import (
    CheckpointError,
    ConfigurationError,
    DataError,
    NumericalError,
)
from .gradcheck import check_model_gradients, summarize_groups
from .model import (
    ThriftyConfig,
    ThriftyNet,
    deserialize_model,
    mean_activations,
    save_model,
)
from .training import (
    AlphaRegConfig,
    TrainConfig,
    ablation_alpha,
    evaluate,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _parse_int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(tok) for tok in text.replace(",", " ").split())


def _coerce(raw: str, like):
    if isinstance(like, bool):
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"expected a boolean, got {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def read_config_file(path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


class RunSpec:
    """Merged view of defaults, config file, and explicit flags."""

    def __init__(self, args: argparse.Namespace, defaults: dict):
        self.defaults = defaults
        self.file_values: dict[str, str] = {}
        config_path = getattr(args, "config", None)
        if config_path:
            if not Path(config_path).is_file():
                raise ConfigurationError(f"config file not found: {config_path}")
            self.file_values = read_config_file(config_path)
        self.resolved: dict = {}
        for key, default in defaults.items():
            cli_value = getattr(args, key, None)
            if cli_value is not None:
                self.resolved[key] = cli_value
            elif key in self.file_values:
                self.resolved[key] = _coerce(self.file_values[key], default)
            else:
                self.resolved[key] = default
        unknown = set(self.file_values) - set(defaults)
        if unknown:
            raise ConfigurationError(
                f"unknown keys in config file: {sorted(unknown)}"
            )

    def __getattr__(self, key):
        try:
            return self.resolved[key]
        except KeyError as exc:
            raise AttributeError(key) from exc

    def echo(self, path: Path) -> None:
        lines = [f"{key}={self.resolved[key]}" for key in sorted(self.resolved)]
        path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Shared flag groups
# ---------------------------------------------------------------------------

ARCH_DEFAULTS = {
    "filters": 0,            # 0 = derive from the budget
    "budget": 40000,
    "budget_convention": "total",
    "iterations": 15,
    "history": 5,
    "kernel": 3,
    "pools": 4,
    "schedule": "regular",   # regular | front_loaded | explicit comma list
    "conv": "classical",
    "activation": "relu",
}

DATA_DEFAULTS = {
    "dataset": "cifar10",    # cifar10 | cifar100 | raw
    "data_dir": "data",
    "raw_train": "",
    "raw_test": "",
    "limit_train": 0,        # 0 = full split; otherwise a class-balanced subset
    "limit_test": 0,
}

TRAIN_DEFAULTS = {
    "epochs": 200,
    "lr": 0.1,
    "lr_drops": "50,100,150",
    "momentum": 0.9,
    "weight_decay": 0.0,
    "batch_size": 128,
    "seed": 0,
    "augment": True,
    "flip": True,
    "alpha_reg": False,
    "lambda0": 3e-4,
    "eps": 1.5e-4,
    "alpha_epochs": 0,       # 0 = anneal for the whole run
    "steps_per_epoch": 0,    # 0 = one pass over the train split
}


def _add_flags(parser: argparse.ArgumentParser, defaults: dict) -> None:
    for key, default in defaults.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(default, bool):
            group = parser.add_mutually_exclusive_group()
            group.add_argument(flag, dest=key, action="store_const", const=True,
                               default=None, help=f"(default: {default})")
            group.add_argument("--no-" + key.replace("_", "-"), dest=key,
                               action="store_const", const=False, default=None,
                               help=argparse.SUPPRESS)
        else:
            parser.add_argument(flag, dest=key, type=type(default), default=None,
                                help=f"(default: {default})")


def _build_schedule(spec) -> tuple[int, ...]:
    text = str(spec.schedule)
    if text in ("regular", "front_loaded"):
        return planner.make_schedule(spec.iterations, spec.pools, text)
    return planner.make_schedule(spec.iterations, placement="explicit",
                                 explicit=_parse_int_list(text))


def _class_count(spec) -> int:
    return {"cifar10": 10, "cifar100": 100}.get(spec.dataset, 0)


def _build_model_config(spec, num_classes: int) -> ThriftyConfig:
    schedule = _build_schedule(spec)
    filters = spec.filters
    if filters <= 0:
        filters = planner.solve_filters(
            spec.budget, spec.iterations, spec.history, (spec.kernel, spec.kernel),
            spec.conv, num_classes, spec.budget_convention,
        )
    return ThriftyConfig(
        filters=filters,
        iterations=spec.iterations,
        schedule=schedule,
        history=spec.history,
        kernel=(spec.kernel, spec.kernel),
        conv_mode=spec.conv,
        activation=spec.activation,
        num_classes=num_classes,
    )


def _load_datasets(spec):
    if spec.dataset == "cifar10":
        train_ds, test_ds = data_mod.load_cifar10(spec.data_dir)
    elif spec.dataset == "cifar100":
        train_ds, test_ds = data_mod.load_cifar100(spec.data_dir)
    elif spec.dataset == "raw":
        if not spec.raw_train or not spec.raw_test:
            raise ConfigurationError(
                "dataset=raw needs --raw-train and --raw-test container paths"
            )
        train_ds = data_mod.load_raw(spec.raw_train, "train")
        test_ds = data_mod.load_raw(spec.raw_test, "test")
        if train_ds.class_count != test_ds.class_count:
            test_ds = replace_class_count(test_ds, train_ds.class_count)
    else:
        raise ConfigurationError(f"unknown dataset {spec.dataset!r}")
    subset_seed = getattr(spec, "seed", 0)
    if spec.limit_train:
        train_ds = _limit(train_ds, spec.limit_train, subset_seed)
    if spec.limit_test:
        test_ds = _limit(test_ds, spec.limit_test, subset_seed + 1)
    return train_ds, test_ds


def replace_class_count(ds, class_count: int):
    return data_mod.ImageDataset(ds.images, ds.labels, ds.split, class_count)


def _limit(ds, total: int, seed: int):
    if total % ds.class_count != 0:
        raise ConfigurationError(
            f"--limit values must be divisible by the class count "
            f"({total} vs {ds.class_count})"
        )
    return data_mod.class_balanced_subset(ds, total // ds.class_count, seed)


def _train_config(spec) -> TrainConfig:
    alpha_reg = None
    if spec.alpha_reg:
        alpha_reg = AlphaRegConfig(
            lambda0=spec.lambda0,
            eps=spec.eps,
            epochs=spec.alpha_epochs or None,
        )
    return TrainConfig(
        epochs=spec.epochs,
        lr0=spec.lr,
        lr_drops=_parse_int_list(spec.lr_drops),
        momentum=spec.momentum,
        weight_decay=spec.weight_decay,
        batch_size=spec.batch_size,
        seed=spec.seed,
        augment=spec.augment,
        flip=spec.flip,
        alpha_reg=alpha_reg,
        steps_per_epoch=spec.steps_per_epoch or None,
    )


def _load_checkpoint_model(path) -> ThriftyNet:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    model, _ = deserialize_model(path.read_bytes())
    return model


def _prepare_out(spec, out: str) -> Path:
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec.echo(out_dir / "runspec.txt")
    return out_dir


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    spec = RunSpec(args, {**ARCH_DEFAULTS, **DATA_DEFAULTS, **TRAIN_DEFAULTS})
    train_ds, test_ds = _load_datasets(spec)
    config = _build_model_config(spec, train_ds.class_count)
    counts = planner.param_count(config)
    out_dir = _prepare_out(spec, args.out)
    print(f"filters={config.filters} params_total={counts.total} "
          f"params_table1={counts.table1_total}")
    model = ThriftyNet(config, seed=spec.seed)
    result = train(model, train_ds, test_ds, _train_config(spec),
                   out_dir=out_dir, resume_from=args.resume or None)
    print(f"best_test_acc={result.best_test_acc:.2f} "
          f"final_test_acc={result.final_test_acc:.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    spec = RunSpec(args, dict(DATA_DEFAULTS))
    model = _load_checkpoint_model(args.checkpoint)
    _, test_ds = _load_datasets(spec)
    if test_ds.class_count != model.config.num_classes:
        raise ConfigurationError(
            f"checkpoint expects {model.config.num_classes} classes, dataset "
            f"has {test_ds.class_count}"
        )
    acc = evaluate(model, test_ds)
    print(f"test_acc={acc:.4f}")
    return EXIT_OK


def cmd_count(args) -> int:
    spec = RunSpec(args, {**ARCH_DEFAULTS, "input_size": 32, "classes": 10})
    config = _build_model_config(spec, spec.classes)
    counts = planner.param_count(config)
    macs = planner.mac_count(config, (spec.input_size, spec.input_size))
    print(f"filters={config.filters}")
    print(f"params_core={counts.core}")
    print(f"params_alpha={counts.alpha_full}")
    print(f"params_head={counts.head}")
    print(f"params_total={counts.total}")
    print(f"params_table1={counts.table1_total}")
    print(f"macs_total={macs.total}")
    print("macs_per_iteration=" + ",".join(str(m) for m in macs.per_iteration))
    return EXIT_OK


def cmd_plan(args) -> int:
    spec = RunSpec(args, {**ARCH_DEFAULTS, "input_size": 32, "classes": 10,
                          "iterations_list": "", "pools_list": ""})
    iteration_values = _parse_int_list(spec.iterations_list) or (spec.iterations,)
    pool_values = _parse_int_list(spec.pools_list) or (spec.pools,)
    rows = []
    for iterations in iteration_values:
        for pools in pool_values:
            filters = spec.filters or planner.solve_filters(
                spec.budget, iterations, spec.history,
                (spec.kernel, spec.kernel), spec.conv, spec.classes,
                spec.budget_convention,
            )
            config = ThriftyConfig(
                filters=filters,
                iterations=iterations,
                schedule=planner.make_schedule(iterations, pools, "regular"),
                history=spec.history,
                kernel=(spec.kernel, spec.kernel),
                conv_mode=spec.conv,
                activation=spec.activation,
                num_classes=spec.classes,
            )
            rows.append(planner.plan_row(config, (spec.input_size, spec.input_size)))
    rows.sort(key=lambda r: r["macs_total"])
    print(",".join(planner.PLAN_COLUMNS))
    for row in rows:
        print(",".join(str(row[c]) for c in planner.PLAN_COLUMNS))
    if args.out:
        metrics_mod.write_csv(args.out, planner.PLAN_COLUMNS,
                              [[row[c] for c in planner.PLAN_COLUMNS] for row in rows])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = summarize_groups(check_model_gradients(seed=args.seed,
                                                     tol=args.tolerance))
    failed = False
    for check in results:
        status = "PASS" if check.passed else "FAIL"
        print(f"{check.name}: {status} max_rel_err={check.max_rel_err:.3e} "
              f"tol={check.tol:.1e}")
        failed |= not check.passed
    if failed:
        raise NumericalError("analytic gradients do not match finite differences")
    return EXIT_OK


def cmd_ablate(args) -> int:
    spec = RunSpec(args, {**ARCH_DEFAULTS, **DATA_DEFAULTS, **TRAIN_DEFAULTS,
                          "phase1_epochs": 150, "phase2_epochs": 150})
    train_ds, test_ds = _load_datasets(spec)
    config = _build_model_config(spec, train_ds.class_count)
    if config.history < 1:
        raise ConfigurationError("the shortcut study needs --history >= 1")
    out_dir = _prepare_out(spec, args.out)
    base = _train_config(spec)
    if base.alpha_reg is None:
        base = replace(base, alpha_reg=AlphaRegConfig(spec.lambda0, spec.eps))
    report = ablation_alpha(config, train_ds, test_ds, base,
                            phase1_epochs=spec.phase1_epochs,
                            phase2_epochs=spec.phase2_epochs, out_dir=out_dir)
    rows = [
        ("baseline", report.baseline_acc),
        ("finetune_a", report.finetune_acc),
        ("same_init_b", report.same_init_acc),
        ("fresh_init_c", report.fresh_init_acc),
    ]
    for name, acc in rows:
        print(f"{name}={acc:.2f}")
    metrics_mod.write_csv(out_dir / "ablation.csv", ("variant", "test_acc"), rows)
    np.savetxt(out_dir / "alpha_binarized.csv", report.binarized_alpha,
               fmt="%.1f", delimiter=",")
    return EXIT_OK


def cmd_export_activations(args) -> int:
    spec = RunSpec(args, dict(DATA_DEFAULTS))
    model = _load_checkpoint_model(args.checkpoint)
    train_ds, _ = _load_datasets(spec)
    matrix = mean_activations(model, train_ds.images)
    metrics_mod.write_matrix_csv(matrix, args.out)
    print(f"wrote {matrix.shape[0]}x{matrix.shape[1]} matrix to {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = RunSpec(args, {**DATA_DEFAULTS, **TRAIN_DEFAULTS, "classes": 10,
                          "repeats": 1})
    entries = metrics_mod.parse_manifest(args.manifest)
    if not entries:
        raise ConfigurationError(f"manifest {args.manifest} lists no configs")
    train_ds, test_ds = _load_datasets(spec)
    configs = []
    for entry in entries:
        merged = dict(ARCH_DEFAULTS)
        for key, value in entry.items():
            if key not in merged:
                raise ConfigurationError(f"unknown manifest key {key!r}")
            merged[key] = _coerce(value, merged[key])
        entry_spec = argparse.Namespace(**merged)
        configs.append(_build_model_config(entry_spec, train_ds.class_count))
    out_dir = _prepare_out(spec, args.out)
    rows = metrics_mod.sweep(configs, train_ds, test_ds, _train_config(spec),
                             repeats=spec.repeats, out_dir=out_dir)
    metrics_mod.write_csv(out_dir / "sweep.csv", metrics_mod.SWEEP_COLUMNS, rows)
    for row in rows:
        print(",".join(str(v) for v in row))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser assembly
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="thriftynet",
        description="Train and analyze recursive single-convolution classifiers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def new_command(name, func, help_text, flag_groups=(), **extra):
        cmd = sub.add_parser(name, help=help_text,
                             formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        cmd.add_argument("--config", default=None,
                         help="key=value file; explicit flags override it")
        for group in flag_groups:
            _add_flags(cmd, group)
        for flag, kwargs in extra.items():
            cmd.add_argument(flag, **kwargs)
        cmd.set_defaults(func=func)
        return cmd

    new_command(
        "train", cmd_train, "train a model",
        (ARCH_DEFAULTS, DATA_DEFAULTS, TRAIN_DEFAULTS),
        **{
            "--out": dict(default="runs/train", help="output directory"),
            "--resume": dict(default="", help="resume from a last.ckpt"),
        },
    )
    new_command(
        "eval", cmd_eval, "evaluate a checkpoint on the test split",
        (DATA_DEFAULTS,),
        **{"--checkpoint": dict(required=True, help="model checkpoint path")},
    )
    new_command(
        "count", cmd_count, "print parameter and MAC counts",
        (ARCH_DEFAULTS,),
        **{
            "--input-size": dict(dest="input_size", type=int, default=None,
                                 help="(default: 32)"),
            "--classes": dict(type=int, default=None, help="(default: 10)"),
        },
    )
    new_command(
        "plan", cmd_plan, "budget-constrained architecture table",
        (ARCH_DEFAULTS,),
        **{
            "--input-size": dict(dest="input_size", type=int, default=None,
                                 help="(default: 32)"),
            "--classes": dict(type=int, default=None, help="(default: 10)"),
            "--iterations-list": dict(dest="iterations_list", default=None,
                                      help="comma list of iteration counts"),
            "--pools-list": dict(dest="pools_list", default=None,
                                 help="comma list of pool counts"),
            "--out": dict(default="", help="optional CSV output path"),
        },
    )
    new_command(
        "gradcheck", cmd_gradcheck, "verify analytic gradients per group",
        (),
        **{
            "--seed": dict(type=int, default=0, help="rng seed"),
            "--tolerance": dict(type=float, default=1e-4,
                                help="max relative error allowed"),
        },
    )
    new_command(
        "ablate", cmd_ablate, "shortcut binarization/freezing study",
        (ARCH_DEFAULTS, DATA_DEFAULTS, TRAIN_DEFAULTS),
        **{
            "--phase1-epochs": dict(dest="phase1_epochs", type=int, default=None,
                                    help="(default: 150)"),
            "--phase2-epochs": dict(dest="phase2_epochs", type=int, default=None,
                                    help="(default: 150)"),
            "--out": dict(default="runs/ablation", help="output directory"),
        },
    )
    new_command(
        "export-activations", cmd_export_activations,
        "mean activation matrix of a trained model",
        (DATA_DEFAULTS,),
        **{
            "--checkpoint": dict(required=True, help="model checkpoint path"),
            "--out": dict(default="activations.csv", help="CSV output path"),
        },
    )
    new_command(
        "sweep", cmd_sweep, "train every config in a manifest",
        (DATA_DEFAULTS, TRAIN_DEFAULTS),
        **{
            "--manifest": dict(required=True,
                               help="file with one key=value config per line"),
            "--classes": dict(type=int, default=None, help="(default: 10)"),
            "--repeats": dict(type=int, default=None,
                              help="seeds per sweep point (default: 1)"),
            "--out": dict(default="runs/sweep", help="output directory"),
        },
    )
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
