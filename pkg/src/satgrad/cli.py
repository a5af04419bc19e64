"""Command-line entry point: ``satgrad <command> [options]``.

Every option can also come from a flat JSON file given with ``--config``;
command-line flags override file values, which override the defaults in
``DEFAULTS``.  Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numba

from . import __version__
from .attacks import (
    DEFAULT_EPSILON,
    DEFAULT_SURROGATE_GAIN,
    DEFAULT_SURROGATE_SCALE,
    EPSILON_GRID,
    AttackConfig,
    AttackMode,
    best_epsilon,
    run_attack,
)
from .data import Dataset, IdxError, load_mnist
from .diagnostics import (
    DEFAULT_GAINS,
    conditional_success,
    distribution_report,
    gain_sweep,
    gradient_stats,
    sweep_correlation,
    write_histogram_csv,
    write_sweep_csv,
)
from .model import Activation, ModelFormatError, MlpModel, load_model, save_model
from .training import (
    OPTIMIZERS,
    SCHEDULES,
    TrainingConfig,
    TrainingDivergedError,
    auto_penalty_search,
    evaluate_accuracy,
    hidden_saturation_fraction,
    recipe_config,
    train,
)

log = logging.getLogger("satgrad")

REPORT_STABLE_GAIN = 1e-4

# Documented defaults.  Training keys left as None fall back to the vanilla
# or saturated recipe in satgrad.training (saturated whenever lambda != 0).
DEFAULTS = {
    "data_dir": None,
    "out_dir": "out",
    "seed": 0,
    "precision": "binary64",
    "dims": [784, 256, 128, 10],
    "activation": "sigmoid",
    "threads": None,
    "train_limit": None,
    "test_limit": None,
    "epochs": None,
    "batch_size": None,
    "learning_rate": None,
    "optimizer": None,
    "momentum": None,
    "beta1": None,
    "beta2": None,
    "adam_eps": None,
    "lambda": 0.0,
    "schedule": None,
    "ramp_start_epoch": None,
    "ramp_epochs": None,
    "sharpen_gain": None,
    "sharpen_logit_scale": None,
    "sharpen_start_epoch": None,
    "sharpen_epochs": None,
    "harden_gain": None,
    "harden_logit_scale": None,
    "reference": None,
    "model": None,
    "mode": "naive",
    "epsilon": DEFAULT_EPSILON,
    "epsilon_grid": list(EPSILON_GRID),
    "surrogate_gain": DEFAULT_SURROGATE_GAIN,
    "surrogate_scale": DEFAULT_SURROGATE_SCALE,
    "report_stable_gain": REPORT_STABLE_GAIN,
    "clip": True,
    "gains": list(DEFAULT_GAINS),
    "vanilla_sigmoid": None,
    "saturated_sigmoid": None,
    "vanilla_relu": None,
    "saturated_relu": None,
}

TRAINING_KEYS = ("epochs", "batch_size", "learning_rate", "optimizer", "momentum", "beta1",
                 "beta2", "adam_eps", "schedule", "ramp_start_epoch", "ramp_epochs",
                 "sharpen_gain", "sharpen_logit_scale", "sharpen_start_epoch", "sharpen_epochs",
                 "harden_gain", "harden_logit_scale")


class UsageError(Exception):
    pass


def _lambda(value: str):
    if value == "auto":
        return value
    try:
        lam = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'auto', got {value!r}") from None
    if not lam >= 0:
        raise argparse.ArgumentTypeError("lambda must be nonnegative")
    return lam


def _epsilon(value: str):
    if value == "grid":
        return value
    return float(value)


def _floats(value: str) -> list[float]:
    return [float(v) for v in value.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="flat JSON file of option values")
    common.add_argument("--data-dir", dest="data_dir", help="MNIST IDX directory (default: $SATGRAD_DATA_DIR)")
    common.add_argument("--out-dir", dest="out_dir", help="output directory (default: out)")
    common.add_argument("--seed", type=int)
    common.add_argument("--precision", choices=["binary32", "binary64"])
    common.add_argument("--threads", type=int, help="cap on worker threads")
    common.add_argument("--test-limit", dest="test_limit", type=int,
                        help="use only the first N test images")
    common.add_argument("-v", "--verbose", action="store_true")

    model_opt = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    model_opt.add_argument("--model", help="model file (default: OUT_DIR/model.bin)")

    attack_opt = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    attack_opt.add_argument("--epsilon", type=_epsilon, help="step size, or 'grid' for the best of --epsilon-grid")
    attack_opt.add_argument("--epsilon-grid", dest="epsilon_grid", type=_floats)

    parser = argparse.ArgumentParser(prog="satgrad", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, **kwargs):
        return sub.add_parser(name, argument_default=argparse.SUPPRESS, **kwargs)

    p = command("train", parents=[common], help="train a vanilla or saturated MLP")
    p.add_argument("--activation", choices=[a.value for a in Activation])
    p.add_argument("--dims", type=lambda v: [int(d) for d in v.split(",")])
    p.add_argument("--lambda", dest="lambda", type=_lambda,
                   help="penalty weight; 0 trains a vanilla model, 'auto' searches for saturation")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--optimizer", choices=OPTIMIZERS)
    p.add_argument("--momentum", type=float)
    p.add_argument("--schedule", choices=SCHEDULES)
    p.add_argument("--ramp-start", dest="ramp_start_epoch", type=float)
    p.add_argument("--ramp-epochs", dest="ramp_epochs", type=int)
    p.add_argument("--sharpen-gain", dest="sharpen_gain", type=float)
    p.add_argument("--sharpen-logit-scale", dest="sharpen_logit_scale", type=float)
    p.add_argument("--sharpen-start", dest="sharpen_start_epoch", type=float)
    p.add_argument("--sharpen-epochs", dest="sharpen_epochs", type=float)
    p.add_argument("--harden-gain", dest="harden_gain", type=float)
    p.add_argument("--harden-logit-scale", dest="harden_logit_scale", type=float)
    p.add_argument("--train-limit", dest="train_limit", type=int,
                   help="use only the first N training images")
    p.add_argument("--reference", help="vanilla model giving the reference accuracy for --lambda auto")

    command("eval", parents=[common, model_opt], help="clean accuracy and saturation")

    p = command("attack", parents=[common, model_opt, attack_opt], help="FGSM attack")
    p.add_argument("--mode", choices=[m.value for m in AttackMode])
    p.add_argument("--surrogate-gain", dest="surrogate_gain", type=float)
    p.add_argument("--surrogate-scale", dest="surrogate_scale", type=float)
    p.add_argument("--no-clip", dest="clip", action="store_false")

    p = command("grad-stats", parents=[common, model_opt], help="exact-zero gradient statistics")
    p.add_argument("--reference", help="model whose median nonzero |g| is the reference")

    p = command("sweep", parents=[common, model_opt], help="gain sweep on a sigmoid model")
    p.add_argument("--gains", type=_floats)
    p.add_argument("--epsilon", type=_epsilon, help="step size, or 'grid' for the best naive one")
    p.add_argument("--epsilon-grid", dest="epsilon_grid", type=_floats)

    command("dist-report", parents=[common, model_opt], help="weight and activation distributions")

    p = command("report", parents=[common, attack_opt], help="full reproduction report")
    for name in ("vanilla_sigmoid", "saturated_sigmoid", "vanilla_relu", "saturated_relu"):
        p.add_argument("--" + name.replace("_", "-"), dest=name)
    p.add_argument("--surrogate-scale", dest="surrogate_scale", type=float)
    p.add_argument("--stable-gain", dest="report_stable_gain", type=float)
    p.add_argument("--gains", type=_floats)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and explicit flags, in that order."""
    cfg = dict(DEFAULTS)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        unknown = sorted(set(loaded) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(loaded)
    cfg.update(flags)
    return cfg


def training_config(cfg: dict, lam: float) -> TrainingConfig:
    overrides = {k: cfg[k] for k in TRAINING_KEYS if cfg.get(k) is not None}
    overrides.update(seed=cfg["seed"], precision=cfg["precision"], dims=tuple(cfg["dims"]))
    if lam != 0:
        overrides["penalty_weight"] = lam
    try:
        return recipe_config(cfg["activation"], saturated=lam != 0, **overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(cfg) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _test_set(cfg) -> Dataset:
    return load_mnist(cfg["data_dir"], "test", cfg["precision"]).subset(cfg["test_limit"])


def _model(cfg, key="model") -> MlpModel:
    path = cfg.get(key) or Path(cfg["out_dir"]) / "model.bin"
    return load_model(path)


def cmd_train(cfg) -> int:
    out = _out_dir(cfg)
    train_set = load_mnist(cfg["data_dir"], "train", cfg["precision"]).subset(cfg["train_limit"])
    test_set = _test_set(cfg)
    lam = cfg["lambda"]
    progress = lambda m: log.info("epoch %d loss %.4f penalty %.4g lambda %.3g acc %.4f sat %.4f",  # noqa: E731
                                  m.epoch, m.loss, m.penalty, m.penalty_weight, m.accuracy,
                                  m.saturation_fraction)
    if lam == "auto":
        start = training_config(cfg, recipe_config(cfg["activation"], True).penalty_weight)
        if cfg.get("reference"):
            ref = _model(cfg, "reference")
            ref_acc = evaluate_accuracy(ref, test_set.images, test_set.labels)
        else:
            log.info("training a vanilla reference model")
            ref, _ = train(training_config(cfg, 0.0), train_set, cfg["activation"], test_set, progress)
            ref_acc = evaluate_accuracy(ref, test_set.images, test_set.labels)
        model, metrics, lam = auto_penalty_search(start, train_set, cfg["activation"], test_set,
                                                  ref_acc, progress=progress)
        config = TrainingConfig(**{**start.to_dict(), "penalty_weight": lam})
    else:
        config = training_config(cfg, float(lam))
        model, metrics = train(config, train_set, cfg["activation"], test_set, progress)
    save_model(model, out / "model.bin")
    metrics.write_csv(out / "metrics.csv")
    write_json({**cfg, "lambda": lam, "training": config.to_dict()}, out / "config.json")
    fin = metrics.final
    print(f"accuracy {fin.accuracy:.4f} saturation {fin.saturation_fraction:.4f} lambda {lam:g}")
    return 0


def cmd_eval(cfg) -> int:
    model = _model(cfg)
    test_set = _test_set(cfg)
    result = {
        "accuracy": evaluate_accuracy(model, test_set.images, test_set.labels),
        "saturation_fraction": hidden_saturation_fraction(model, test_set.images),
        "n_images": len(test_set),
    }
    print(json.dumps(result, sort_keys=True))
    return 0


def _attack_config(cfg, epsilon, mode=None, gain=None) -> AttackConfig:
    try:
        return AttackConfig(epsilon if epsilon != "grid" else DEFAULT_EPSILON, mode or cfg["mode"],
                            gain if gain is not None else cfg["surrogate_gain"],
                            cfg["surrogate_scale"], cfg["clip"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _run(model, config, dataset, epsilon, grid):
    if epsilon == "grid":
        return best_epsilon(model, config, dataset, grid)
    return config.epsilon, run_attack(model, config, dataset)


def _sweep_epsilon(model, dataset, cfg) -> float:
    """The configured epsilon, or the grid value that best breaks ``model`` naively."""
    if cfg["epsilon"] != "grid":
        return cfg["epsilon"]
    return best_epsilon(model, _attack_config(cfg, "grid", "naive"), dataset, cfg["epsilon_grid"])[0]


def cmd_attack(cfg) -> int:
    model = _model(cfg)
    test_set = _test_set(cfg)
    config = _attack_config(cfg, cfg["epsilon"])
    eps, res = _run(model, config, test_set, cfg["epsilon"], cfg["epsilon_grid"])
    res.write_csv(_out_dir(cfg) / f"attack_{config.mode.value}.csv")
    print(f"mode {res.config.label} epsilon {eps:g} clean {res.clean_accuracy:.4f} "
          f"accuracy {res.accuracy:.4f} zero-gradient {res.zero_gradient[res.attacked].mean():.4f}")
    return 0


def cmd_grad_stats(cfg) -> int:
    model = _model(cfg)
    ref = _model(cfg, "reference") if cfg.get("reference") else None
    report = gradient_stats(model, _test_set(cfg), reference=ref)
    out = _out_dir(cfg)
    write_json(report.to_dict(), out / "gradstats.json")
    write_histogram_csv(report.histogram, out / "gradhist.csv")
    print(f"zero-elements {report.zero_element_ratio:.4f} all-zero-images {report.all_zero_image_ratio:.4f} "
          f"median-nonzero {report.median_nonzero_abs:.3g}")
    return 0


def cmd_sweep(cfg) -> int:
    model = _model(cfg)
    test_set = _test_set(cfg)
    eps = _sweep_epsilon(model, test_set, cfg)
    points = gain_sweep(model, test_set, cfg["gains"], eps)
    write_sweep_csv(points, _out_dir(cfg) / "sweep.csv")
    for p in points:
        print(f"gain {p.gain:.3g} nonzero {p.nonzero_gradient_ratio:.4f} accuracy {p.accuracy:.4f}")
    print(f"correlation {sweep_correlation(points):.4f}")
    return 0


def cmd_dist_report(cfg) -> int:
    report = distribution_report(_model(cfg), _test_set(cfg))
    write_json(report.to_dict(), _out_dir(cfg) / "dist.json")
    kurt = " ".join(f"{layer.weight_kurtosis:.3f}" for layer in report.layers)
    print(f"weight-kurtosis {kurt} saturated-mass {report.saturated_activation_mass:.4f}")
    return 0


def _cell(model, config, dataset, cfg) -> dict:
    eps, res = _run(model, config, dataset, cfg["epsilon"], cfg["epsilon_grid"])
    return {"accuracy": res.accuracy, "epsilon": eps, "attack": config.label}


def _table_row(model, dataset, cfg, stable: AttackConfig) -> dict:
    return {
        "plain": evaluate_accuracy(model, dataset.images, dataset.labels),
        "naive": _cell(model, _attack_config(cfg, cfg["epsilon"], "naive"), dataset, cfg),
        "stable": _cell(model, stable, dataset, cfg),
    }


def build_report(cfg) -> dict:
    test_set = _test_set(cfg)
    report = {"n_test_images": len(test_set), "epsilon": cfg["epsilon"],
              "epsilon_grid": cfg["epsilon_grid"], "activations": {}}
    for act in ("sigmoid", "relu"):
        paths = {kind: cfg.get(f"{kind}_{act}") for kind in ("vanilla", "saturated")}
        if not any(paths.values()):
            continue
        models = {k: load_model(p) for k, p in paths.items() if p}
        if act == "sigmoid":
            stable = _attack_config(cfg, cfg["epsilon"], "stable-gain", cfg["report_stable_gain"])
        else:
            stable = _attack_config(cfg, cfg["epsilon"], "stable-logit")
        section = {"table": {k: _table_row(m, test_set, cfg, stable) for k, m in models.items()}}
        stats = {k: gradient_stats(m, test_set, reference=models.get("vanilla"))
                 for k, m in models.items()}
        section["gradient_stats"] = {k: s.to_dict() for k, s in stats.items()}
        section["distribution"] = {k: distribution_report(m, test_set).to_dict() for k, m in models.items()}
        sat = models.get("saturated")
        if sat is not None:
            eps = _sweep_epsilon(sat, test_set, cfg)
            cond = conditional_success(sat, test_set, eps)
            section["conditional_success"] = {"qualifying": cond.qualifying, "successes": cond.successes,
                                              "attacked": cond.attacked, "rate": cond.rate,
                                              "epsilon": eps}
            if act == "sigmoid":
                points = gain_sweep(sat, test_set, cfg["gains"], eps)
                section["sweep"] = {
                    "epsilon": eps,
                    "points": [{"gain": p.gain, "nonzero_gradient_ratio": p.nonzero_gradient_ratio,
                                "nonzero_image_ratio": p.nonzero_image_ratio, "accuracy": p.accuracy}
                               for p in points],
                    "correlation": sweep_correlation(points),
                }
        report["activations"][act] = section
    if not report["activations"]:
        raise UsageError("report needs at least one model (--vanilla-sigmoid, --saturated-sigmoid, ...)")
    return report


def cmd_report(cfg) -> int:
    report = build_report(cfg)
    write_json(report, _out_dir(cfg) / "report.json")
    for act, section in report["activations"].items():
        for kind, row in section["table"].items():
            print(f"{act:7s} {kind:9s} plain {row['plain']:.4f} naive {row['naive']['accuracy']:.4f} "
                  f"stable {row['stable']['accuracy']:.4f}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "attack": cmd_attack,
    "grad-stats": cmd_grad_stats,
    "sweep": cmd_sweep,
    "dist-report": cmd_dist_report,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(message)s")
    try:
        cfg = resolve(args)
        if cfg.get("threads"):
            numba.set_num_threads(min(int(cfg["threads"]), numba.config.NUMBA_NUM_THREADS))
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        parser.error(str(exc))
    except (FileNotFoundError, IdxError, ModelFormatError, TrainingDivergedError, ValueError) as exc:
        print(f"satgrad: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
