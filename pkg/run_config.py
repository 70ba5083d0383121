"""
Run configuration for the command-line harness.

A run config is a flat UTF-8 text file of `key = value` lines ('#' starts a
comment). `--set key=value` flags override file values. Every key is declared
once in KEYS with its type, default and the commands that accept it.
"""

import os
from dataclasses import dataclass

from nn.dataset import format_edges, parse_edges

OUTPUT_ROOT_ENV = "GCDR_OUTPUT_ROOT"
COMMANDS = ("generate", "validate", "train", "ablate", "curve")
TRAINING = ("train", "ablate", "curve")
ALL_VARIANTS = "full,stage1-only,single-branch,shared-d,no-adv-stage1,no-adv-at-all,direct"


class RunConfigError(ValueError):
    """Unknown key, bad value or missing mandatory key."""


def _bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int_list(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _str_list(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _ratio(text):
    parts = tuple(int(v) for v in text.split(":"))
    if len(parts) != 2:
        raise ValueError(f"expected 'a:b', got {text!r}")
    return parts


def _optional_int(text):
    return None if text.strip().lower() in ("", "none", "auto") else int(text)


def _edges(text):
    return tuple(parse_edges(text))


@dataclass(frozen=True)
class Key:
    name: str
    parse: object
    default: str
    commands: tuple
    help: str

    def format(self, value):
        if self.parse is _edges:
            return format_edges(value)
        if self.parse is _ratio:
            return ":".join(str(v) for v in value)
        if isinstance(value, tuple):
            return ",".join(str(v) for v in value)
        if isinstance(value, bool):
            return "true" if value else "false"
        return "" if value is None else str(value)


KEYS = {key.name: key for key in [
    Key("seed", int, None, COMMANDS, "Master seed (mandatory)."),
    Key("data_dir", str, "data", COMMANDS,
        "Directory holding samples.npz and split.manifest (written by generate)."),
    Key("output_dir", str, "", TRAINING,
        "Run output directory; default $GCDR_OUTPUT_ROOT/<command> or runs/<command>."),
    Key("run_id", str, "", TRAINING, "Identifier written into every CSV row; default <command>-<seed>."),
    Key("verbose", _bool, "false", COMMANDS, "Show progress bars."),
    # generate
    Key("dataset", str, "cmnist", ("generate",), "Dataset kind: cmnist or tabular."),
    Key("idx_dir", str, "", ("generate",),
        "Directory with MNIST IDX files (train-images-idx3-ubyte[.gz] ...); empty = built-in glyphs."),
    Key("train_pool", int, "60000", ("generate",), "Built-in glyphs rendered for the training pool."),
    Key("test_pool", int, "10000", ("generate",), "Built-in glyphs rendered for the test pool."),
    Key("bg_pair", _int_list, "1,2", ("generate",), "Background colors A,B (1-10) of the C-MNIST split."),
    Key("n_samples", int, "6000", ("generate",), "Tabular sample count."),
    Key("names", _str_list, "class,device,site", ("generate",), "Tabular attribute names, class first."),
    Key("cardinalities", _int_list, "6,3,4", ("generate",), "Tabular attribute cardinalities."),
    Key("feature_dim", int, "32", ("generate",), "Tabular feature width."),
    Key("grouping_attribute", int, "2", ("generate",), "1-based attribute the tabular split groups classes on."),
    Key("validation_fraction", float, "0.1", ("generate",), "Share of test carved out as validation."),
    Key("causal_edges", _edges, "-", ("generate",) + TRAINING,
        "Causal edges 'cause>effect,...' (1-based). generate: tabular data edge (at most one). "
        "train/ablate/curve: prior edges, default taken from the manifest."),
    Key("check", _bool, "false", ("ablate", "curve"),
        "Exit with code 2 when an acceptance check fails."),
    # training
    Key("variant", str, "full", ("train", "curve"), "Training variant."),
    Key("variants", _str_list, ALL_VARIANTS, ("ablate",), "Variants trained by ablate."),
    Key("workers", int, "1", ("ablate",), "Parallel worker processes for ablate."),
    Key("marks", _int_list, "1,10,30", ("curve",), "Stage-1 epochs at which stage 2 is run."),
    Key("batch_size", int, "64", TRAINING, "Mini-batch size."),
    Key("stage1_epochs", int, "30", TRAINING, "Stage-1 epochs."),
    Key("stage2_epochs", int, "10", TRAINING, "Stage-2 epochs."),
    Key("step_ratio", _ratio, "1:5", TRAINING, "Discriminator : adversarial steps per scheduling unit."),
    Key("learning_rate", float, "0.001", TRAINING, "Adam learning rate."),
    Key("screening_threshold", float, "0.9", TRAINING, "Minimum donor confidence for augmentation."),
    Key("augment_factor", float, "4", TRAINING, "Augmented items per training sample."),
    Key("augment_count", _optional_int, "auto", TRAINING, "Explicit augmented item count."),
]}


def parse_lines(lines, source="<config>"):
    """`key = value` lines -> dict of raw strings."""
    raw = {}
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise RunConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        raw[key.strip()] = value.strip()
    return raw


def read_config_file(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        return parse_lines(f.read().splitlines(), source=path)


def parse_overrides(items):
    """['key=value', ...] from repeated --set flags."""
    raw = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise RunConfigError(f"--set expects key=value, got {item!r}")
        raw[key.strip()] = value.strip()
    return raw


class RunConfig:
    """Resolved settings of one command; attribute access by key name."""

    def __init__(self, command, values, explicit):
        self.command = command
        self._values = values
        self.explicit = frozenset(explicit)

    @classmethod
    def resolve(cls, command, file_values=None, overrides=None, environ=None):
        if command not in COMMANDS:
            raise RunConfigError(f"unknown command {command!r}")
        raw = dict(file_values or {})
        raw.update(overrides or {})
        for name in raw:
            if name not in KEYS:
                raise RunConfigError(f"unknown key {name!r}")
            if command not in KEYS[name].commands:
                raise RunConfigError(f"key {name!r} is not used by '{command}'")
        if "seed" not in raw:
            raise RunConfigError("'seed' is mandatory")

        values = {}
        for name, key in KEYS.items():
            if command not in key.commands:
                continue
            text = raw.get(name, key.default)
            if text is None:
                continue
            try:
                values[name] = key.parse(text)
            except ValueError as exc:
                raise RunConfigError(f"bad value for {name!r}: {exc}") from None

        if command in TRAINING:
            environ = os.environ if environ is None else environ
            if not values["output_dir"]:
                root = environ.get(OUTPUT_ROOT_ENV, "runs")
                values["output_dir"] = os.path.join(root, command)
            if not values["run_id"]:
                values["run_id"] = f"{command}-{values['seed']}"
        return cls(command, values, raw.keys())

    def __getattr__(self, name):
        values = self.__dict__.get("_values", {})
        if name in values:
            return values[name]
        raise AttributeError(name)

    def get(self, name, default=None):
        return self._values.get(name, default)

    def items(self):
        return sorted(self._values.items())

    def lines(self):
        return [f"{name} = {KEYS[name].format(value)}" for name, value in self.items()]

    def write_resolved(self, directory):
        """Echo the resolved settings to <directory>/config.resolved."""
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, "config.resolved")
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(f"# command = {self.command}\n")
            f.write("\n".join(self.lines()) + "\n")
        return path


def describe_keys(command=None):
    """Help text listing every key (optionally only those of one command)."""
    rows = []
    for key in KEYS.values():
        if command is not None and command not in key.commands:
            continue
        default = "(required)" if key.default is None else repr(key.default)
        rows.append(f"  {key.name:<20} {default:<22} {key.help}")
    return "\n".join(rows)
