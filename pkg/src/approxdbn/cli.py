"""Command-line entry point.

Commands: train, search, curve, eval. Runs are driven by a JSON config
file (strictly validated, unknown keys rejected); a few common flags
override config values. Exit codes: 0 success, 2 config error, 3 data
error, 4 infeasible accuracy constraint.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import dataset as ds
from . import ddbn, search
from .ddbn import ModelFileError, TrainConfig
from .search import InfeasibleConstraint, SearchConfig

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_INFEASIBLE = 4


class ConfigError(Exception):
    pass


_TOP_LEVEL_KEYS = {
    "train_images", "train_labels", "test_images", "test_labels",
    "hidden_sizes", "train_subset", "validation_fraction", "seed",
    "out_dir", "train", "search", "curve", "eval",
}
_CURVE_KEYS = {"orders", "random_seeds", "eval_split"}
_EVAL_KEYS = {"mode", "samples", "seed"}
_SEARCH_EXTRA_KEYS = {"variant", "order_seed"}


def _check_keys(section, allowed, name):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")


def _dataclass_from(section, cls, name):
    allowed = {f.name for f in dataclasses.fields(cls)}
    _check_keys(section, allowed, name)
    try:
        return cls(**section)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad {name} section: {e}") from e


class RunConfig:
    def __init__(self, raw):
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        _check_keys(raw, _TOP_LEVEL_KEYS, "config")
        self.raw = raw
        self.train_images = raw.get("train_images")
        self.train_labels = raw.get("train_labels")
        self.test_images = raw.get("test_images")
        self.test_labels = raw.get("test_labels")
        self.hidden_sizes = raw.get("hidden_sizes", [100, 50])
        if (not isinstance(self.hidden_sizes, list) or not self.hidden_sizes
                or any(not isinstance(n, int) or n < 1 for n in self.hidden_sizes)):
            raise ConfigError("hidden_sizes must be a nonempty list of positive ints")
        self.train_subset = raw.get("train_subset", 0)
        self.validation_fraction = raw.get("validation_fraction", 0.1)
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError("validation_fraction must be in [0, 1)")
        self.seed = raw.get("seed", 0)
        self.out_dir = raw.get("out_dir", "out")

        train_raw = dict(raw.get("train", {}))
        train_raw.setdefault("seed", self.seed)
        self.train_config = _dataclass_from(train_raw, TrainConfig, "train")

        search_raw = dict(raw.get("search", {}))
        self.variant = search_raw.pop("variant", "full")
        if self.variant not in search.VARIANTS:
            raise ConfigError(f"unknown search variant {self.variant!r}")
        self.order_seed = search_raw.pop("order_seed", self.seed)
        self.search_config = _dataclass_from(search_raw, SearchConfig, "search")

        curve_raw = raw.get("curve", {})
        _check_keys(curve_raw, _CURVE_KEYS, "curve")
        self.curve_orders = curve_raw.get("orders", ["criticality", "random"])
        self.curve_random_seeds = curve_raw.get("random_seeds", [0])
        self.curve_eval_split = curve_raw.get("eval_split", "validation")

        eval_raw = raw.get("eval", {})
        _check_keys(eval_raw, _EVAL_KEYS, "eval")
        self.eval_mode = eval_raw.get("mode", "mean_field")
        self.eval_samples = eval_raw.get("samples", 10)
        self.eval_seed = eval_raw.get("seed", self.seed)

    @property
    def layer_sizes(self):
        return [784] + list(self.hidden_sizes) + [10]


def load_config(path, overrides):
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if overrides.seed is not None:
        raw["seed"] = overrides.seed
        raw.setdefault("train", {})["seed"] = overrides.seed
    if overrides.out is not None:
        raw["out_dir"] = overrides.out
    return RunConfig(raw)


def _prepare_out_dir(config):
    out = config.out_dir
    try:
        os.makedirs(out, exist_ok=True)
        echo_path = os.path.join(out, "config_echo.json")
        with open(echo_path, "w") as f:
            json.dump(config.raw, f, indent=2, sort_keys=True)
    except OSError as e:
        raise ConfigError(f"output directory {out!r} is not writable: {e}") from e
    return out


def _load_train_split(config):
    data = ds.load_idx(config.train_images, config.train_labels)
    if config.train_subset:
        data = data.subset(np.arange(min(config.train_subset, len(data))))
    return ds.split(data, config.validation_fraction, config.seed)


def _set_threads(n):
    if n is None:
        return
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=n)
    except ImportError:
        os.environ["OMP_NUM_THREADS"] = str(n)


def cmd_train(config):
    out = _prepare_out_dir(config)
    train, val = _load_train_split(config)
    model = ddbn.train_ddbn(train.images, train.one_hot, config.layer_sizes,
                            config.train_config)
    model_path = os.path.join(out, "model.bin")
    ddbn.save_model(model, model_path)
    summary = {
        "layer_sizes": config.layer_sizes,
        "train_samples": len(train),
        "validation_samples": len(val),
        "seed": config.seed,
    }
    if len(val):
        summary["validation_accuracy"] = ddbn.evaluate_accuracy(
            model, val.images, val.labels, mode="mean_field")
    with open(os.path.join(out, "training_summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    print(f"model written to {model_path}")
    if "validation_accuracy" in summary:
        print(f"validation accuracy {summary['validation_accuracy']:.4f}")
    return 0


def cmd_search(config, model_path):
    out = _prepare_out_dir(config)
    model = ddbn.load_model(model_path)
    train, val = _load_train_split(config)
    if len(val) == 0:
        raise ConfigError("search needs a nonzero validation_fraction")
    result = search.run_approxdbn(
        model, config.search_config, train.images, train.one_hot,
        val.images, val.labels, variant=config.variant,
        train_config=config.train_config, order_seed=config.order_seed)
    ddbn.save_model(result.model, os.path.join(out, "final_model.bin"))
    search.write_trace(result.trace, os.path.join(out, "trace.ndjson"))
    report = dict(result.report)
    if config.test_images and config.test_labels:
        test = ds.load_idx(config.test_images, config.test_labels)
        report["test_accuracy_mean_field"] = ddbn.evaluate_accuracy(
            result.model, test.images, test.labels, mode="mean_field")
        report["test_accuracy_stochastic"] = ddbn.evaluate_accuracy(
            result.model, test.images, test.labels, mode="stochastic",
            samples=config.eval_samples, seed=config.eval_seed)
    report["seed"] = config.seed
    with open(os.path.join(out, "report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    with open(os.path.join(out, "bit_histogram.json"), "w") as f:
        json.dump([{"bit_length": b, "neuron_count": c}
                   for b, c in report["bit_length_histogram"]], f, indent=2)
    print(f"final relative accuracy {report['relative_accuracy']:.4f}, "
          f"total hidden bits {report['total_hidden_bits']}")
    return 0


def cmd_curve(config, model_path):
    out = _prepare_out_dir(config)
    model = ddbn.load_model(model_path)
    train, val = _load_train_split(config)
    if config.curve_eval_split == "test":
        test = ds.load_idx(config.test_images, config.test_labels)
        eval_images, eval_labels = test.images, test.labels
    else:
        eval_images, eval_labels = val.images, val.labels
    sc = config.search_config
    curves = {}
    if "criticality" in config.curve_orders:
        curves["criticality"] = search.approximation_curve(
            model, sc, train.images, train.one_hot, eval_images, eval_labels,
            order="criticality")
    if "random" in config.curve_orders:
        randoms = []
        for seed in config.curve_random_seeds:
            c = search.approximation_curve(
                model, sc, train.images, train.one_hot, eval_images,
                eval_labels, order="random", order_seed=seed)
            curves[f"random_{seed}"] = c
            randoms.append(c)
        if randoms:
            curves["random_mean"] = np.mean(randoms, axis=0)
    for name, curve in curves.items():
        with open(os.path.join(out, f"curve_{name}.json"), "w") as f:
            json.dump({"pruned_count": list(range(len(curve))),
                       "accuracy": [float(a) for a in curve]}, f)
    print(f"wrote {len(curves)} curve files to {out}")
    return 0


def cmd_eval(model_path, images_path, labels_path, mode, samples, seed):
    model = ddbn.load_model(model_path)
    data = ds.load_idx(images_path, labels_path)
    acc = ddbn.evaluate_accuracy(model, data.images, data.labels, mode=mode,
                                 samples=samples, seed=seed)
    counts = ddbn.confusion_counts(model, data.images, data.labels, mode=mode,
                                   samples=samples, seed=seed)
    print(f"accuracy {acc:.6f} ({mode})")
    print("confusion (rows = true label, cols = predicted):")
    for row in counts:
        print(" ".join(f"{c:5d}" for c in row))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="approxdbn",
        description="Train and approximate discriminative deep belief networks.")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread cap (results are thread-count independent)")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("train", "search", "curve"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        if name in ("search", "curve"):
            p.add_argument("--model", required=True)

    p = sub.add_parser("eval")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--mode", choices=["mean_field", "stochastic"],
                   default="mean_field")
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    _set_threads(args.threads)
    try:
        if args.command == "eval":
            return cmd_eval(args.model, args.images, args.labels,
                            args.mode, args.samples, args.seed)
        config = load_config(args.config, args)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "search":
            return cmd_search(config, args.model)
        return cmd_curve(config, args.model)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ds.DatasetError, ModelFileError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except InfeasibleConstraint as e:
        print(f"infeasible constraint: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
