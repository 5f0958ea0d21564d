"""Experiment configuration: a flat ``key = value`` text format with ``[section]`` headers.

Keys may be written fully qualified (``meta.K = 10``) anywhere, or bare
inside their section (``[meta]`` then ``K = 10``). ``#`` starts a comment.
Unknown keys and malformed values are errors that carry the line number.
"""
import hashlib
import os
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional

from .errors import ConfigError, MarkError
from .model import FE_VARIANTS, ArchConfig
from .numcore import SgdConfig
from .training import MetaConfig, TrainConfig, Variant

DATA_DIR_ENV = "MARK_DATA_DIR"


def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _bool(s):
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt(parse):
    def inner(s):
        return None if s.lower() in ("", "none", "auto") else parse(s)
    inner.__name__ = f"optional {parse.__name__.lstrip('_')}"
    return inner


def _int_list(s):
    out = tuple(int(p) for p in s.replace(",", " ").split())
    if not out:
        raise ValueError("empty list")
    return out


def _str_list(s):
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _choice(*options):
    def inner(s):
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s
    inner.__name__ = "|".join(options)
    return inner


def _path(s):
    return s


_int.__name__, _float.__name__, _bool.__name__ = "int", "float", "bool"
_int_list.__name__, _str_list.__name__, _path.__name__ = "int list", "string list", "path"


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    doc: str


VARIANTS = tuple(v.value for v in Variant)

SCHEMA: Dict[str, Key] = {
    # scenario
    "scenario.source": Key(_choice("synthetic", "idx", "cifar100"), "synthetic", "where task data comes from"),
    "scenario.tasks": Key(_int, 5, "number of tasks T"),
    "scenario.classes_per_task": Key(_int, 4, "classes per synthetic task"),
    "scenario.input_shape": Key(_int_list, (3, 32, 32), "synthetic input shape, e.g. `32` or `3 8 8`"),
    "scenario.separation": Key(_float, 4.0, "minimum distance between synthetic class means"),
    "scenario.noise": Key(_float, 1.0, "standard deviation of synthetic within-class noise"),
    "scenario.samples_per_class": Key(_int, 100, "synthetic samples generated per class"),
    "scenario.order": Key(_choice("sorted", "shuffled"), "sorted", "class-to-task assignment"),
    "scenario.seeds": Key(_int_list, (0,), "one run per seed; the seed also drives data generation"),
    "scenario.data_dir": Key(_opt(_path), None, f"dataset root; defaults to ${DATA_DIR_ENV}"),
    "scenario.train_images": Key(_path, "train-images-idx3-ubyte", "IDX training images (relative to data_dir)"),
    "scenario.train_labels": Key(_path, "train-labels-idx1-ubyte", "IDX training labels"),
    "scenario.test_images": Key(_opt(_path), "t10k-images-idx3-ubyte", "IDX test images; none to hold out 20%"),
    "scenario.test_labels": Key(_opt(_path), "t10k-labels-idx1-ubyte", "IDX test labels"),
    "scenario.cifar_train": Key(_path, "train.bin", "CIFAR-100 binary training file"),
    "scenario.cifar_test": Key(_opt(_path), "test.bin", "CIFAR-100 binary test file; none to hold out 20%"),
    "scenario.standardize": Key(_bool, False, "per-channel standardization after scaling to [0, 1]"),
    "scenario.embeddings": Key(_opt(_path), None, "MARKEMB1 file for the external_embedding extractor"),
    # architecture
    "arch.mode": Key(_choice("conv", "dense"), "conv", "KB block type; dense suits vector inputs"),
    "arch.block_channels": Key(_int_list, (64, 128, 256), "channels (or hidden units) per KB block"),
    "arch.kernel_size": Key(_int, 3, "KB convolution kernel size"),
    "arch.padding": Key(_int, 0, "KB convolution zero padding"),
    "arch.pool_window": Key(_int, 2, "max-pooling window after each conv block"),
    "arch.trunk_dim": Key(_int, 256, "width of the KB output projection"),
    "arch.embed_dim": Key(_int, 128, "feature-extractor embedding width"),
    "arch.fe_variant": Key(_choice(*FE_VARIANTS), "task_trained", "feature extractor kind"),
    "arch.fe_channels": Key(_int, 32, "feature-extractor conv filters (hidden units in dense mode)"),
    "arch.fe_kernel_size": Key(_int, 3, "feature-extractor kernel size"),
    "arch.mask_bias": Key(_bool, True, "mask generator has a bias (initialized to 1)"),
    # optimization
    "optim.lr": Key(_float, 0.01, "SGD learning rate outside the KB update"),
    "optim.momentum": Key(_float, 0.9, "SGD momentum outside the KB update"),
    "optim.weight_decay": Key(_float, 0.01, "SGD weight decay"),
    "optim.batch_size": Key(_int, 128, "minibatch size"),
    "optim.epochs": Key(_int, 50, "epochs per query phase (and default for other phases)"),
    "optim.init_epochs": Key(_opt(_int), None, "epochs of KB initialization on the first task"),
    "optim.fe_epochs": Key(_opt(_int), None, "epochs of per-task feature-extractor training"),
    "optim.joint_epochs": Key(_opt(_int), None, "epochs of joint training in the baselines"),
    "optim.retrain_epochs": Key(_opt(_int), None, "epochs of re-querying in the retrain analysis"),
    # metalearning
    "meta.K": Key(_int, 10, "mini-tasks per outer iteration"),
    "meta.H": Key(_opt(_int), None, "classes per mini-task; auto = max(2, ceil(C/2))"),
    "meta.h": Key(_opt(_int), None, "instances per class; auto = min(64, smallest class)"),
    "meta.E_inner": Key(_int, 40, "epochs of training per KB copy"),
    "meta.E_outer": Key(_int, 15, "outer iterations of the KB update"),
    "meta.inner_lr": Key(_float, 0.001, "learning rate inside the KB update (momentum 0)"),
    "meta.inner_weight_decay": Key(_float, 0.0, "weight decay inside the KB update"),
    "meta.alpha": Key(_float, 1.0, "meta step size"),
    "meta.meta_sign": Key(_choice("reptile", "descent"), "reptile", "reptile moves toward the adapted copies, descent away"),
    "meta.inner_masks": Key(_bool, True, "apply the task's (frozen) masks while training KB copies"),
    "meta.val_batch": Key(_int, 128, "validation samples used to score each KB copy"),
    # run
    "run.variant": Key(_choice(*VARIANTS), "full_mark", "training procedure"),
    "run.threads": Key(_int, 1, "parallel KB copies; results do not depend on it"),
    "run.out": Key(_path, "runs/out", "output directory"),
    "run.eval_splits": Key(_str_list, ("test",), "splits evaluated after every epoch"),
    "run.verify_frozen": Key(_bool, True, "hash the KB around every phase that must not change it"),
    # analysis
    "analysis.updates": Key(_bool, True, "emit per-task KB weight-update fractions"),
    "analysis.tau": Key(_float, 1e-3, "absolute change above which a weight counts as updated"),
    "analysis.retrain": Key(_bool, False, "re-query every task against the final KB"),
    "analysis.critical": Key(_bool, False, "probe every mask dimension of every task"),
    "analysis.critical_threshold": Key(_float, 1.0, "accuracy drop (percentage points) marking a critical dimension"),
}

# keys that do not affect results
NON_SEMANTIC = ("run.out", "run.threads")


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


class ExperimentConfig:
    """Resolved configuration: every schema key with a typed value."""

    def __init__(self, values: Optional[Dict[str, Any]] = None, path=None):
        self.values = {k: spec.default for k, spec in SCHEMA.items()}
        if values:
            for k, v in values.items():
                if k not in SCHEMA:
                    raise ConfigError(f"unknown key {k!r}", path=path)
                self.values[k] = v
        self.path = path
        self._validate()

    def __getitem__(self, key):
        return self.values[key]

    def _validate(self):
        if not self["scenario.seeds"]:
            raise ConfigError("scenario.seeds must not be empty", path=self.path)
        try:
            self.train_config()
            self.arch_config(self.input_shape_hint())
        except MarkError as exc:
            raise ConfigError(str(exc), path=self.path) from exc

    def input_shape_hint(self):
        if self["scenario.source"] == "synthetic":
            return tuple(self["scenario.input_shape"])
        return (3, 32, 32) if self["scenario.source"] == "cifar100" else (1, 28, 28)

    def override(self, **changes):
        vals = dict(self.values)
        vals.update(changes)
        return ExperimentConfig(vals, self.path)

    @property
    def seeds(self):
        return list(self["scenario.seeds"])

    @property
    def data_dir(self):
        return self["scenario.data_dir"] or os.environ.get(DATA_DIR_ENV, ".")

    def arch_config(self, input_shape) -> ArchConfig:
        v = self.values
        return ArchConfig(mode=v["arch.mode"], input_shape=tuple(input_shape),
                          block_channels=tuple(v["arch.block_channels"]), kernel_size=v["arch.kernel_size"],
                          padding=v["arch.padding"], pool_window=v["arch.pool_window"],
                          trunk_dim=v["arch.trunk_dim"], embed_dim=v["arch.embed_dim"],
                          fe_variant=v["arch.fe_variant"], fe_channels=v["arch.fe_channels"],
                          fe_kernel_size=v["arch.fe_kernel_size"], mask_bias=v["arch.mask_bias"])

    def train_config(self) -> TrainConfig:
        v = self.values
        meta = MetaConfig(K=v["meta.K"], H=v["meta.H"], h=v["meta.h"], E_inner=v["meta.E_inner"],
                          E_outer=v["meta.E_outer"], inner_lr=v["meta.inner_lr"],
                          inner_weight_decay=v["meta.inner_weight_decay"], alpha=v["meta.alpha"],
                          meta_sign=v["meta.meta_sign"], inner_masks=v["meta.inner_masks"],
                          val_batch=v["meta.val_batch"])
        return TrainConfig(sgd=SgdConfig(v["optim.lr"], v["optim.momentum"], v["optim.weight_decay"]),
                           batch_size=v["optim.batch_size"], epochs=v["optim.epochs"],
                           init_epochs=v["optim.init_epochs"], fe_epochs=v["optim.fe_epochs"],
                           joint_epochs=v["optim.joint_epochs"], retrain_epochs=v["optim.retrain_epochs"],
                           meta=meta, eval_splits=tuple(v["run.eval_splits"]), threads=v["run.threads"],
                           verify_frozen=v["run.verify_frozen"])

    def to_text(self, exclude=()) -> str:
        """Canonical text form; parsing it back yields an equal config."""
        lines, section = [], None
        for key in SCHEMA:
            if key in exclude:
                continue
            sec, name = key.split(".", 1)
            if sec != section:
                if section is not None:
                    lines.append("")
                lines.append(f"[{sec}]")
                section = sec
            lines.append(f"{name} = {_format(self.values[key])}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text(exclude=NON_SEMANTIC).encode()).hexdigest()

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.values == other.values


def parse_text(text, path=None) -> ExperimentConfig:
    values, seen = {}, {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or not line[1:-1].strip():
                raise ConfigError(f"malformed section header {raw.strip()!r}", lineno, path)
            section = line[1:-1].strip()
            if not any(k.startswith(section + ".") for k in SCHEMA):
                raise ConfigError(f"unknown section [{section}]", lineno, path)
            continue
        if "=" not in line:
            raise ConfigError(f"expected `key = value`, got {raw.strip()!r}", lineno, path)
        name, value = (p.strip() for p in line.split("=", 1))
        key = name if "." in name or section is None else f"{section}.{name}"
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", lineno, path)
        if key in seen:
            raise ConfigError(f"{key!r} already set on line {seen[key]}", lineno, path)
        spec = SCHEMA[key]
        try:
            values[key] = spec.parse(value)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected {spec.parse.__name__}, got {value!r} ({exc})", lineno, path) from None
        seen[key] = lineno
    return ExperimentConfig(values, path)


def parse_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", 0, path) from None
    return parse_text(text, path)


def reference_text() -> str:
    """Every key with its type, default and meaning, as a Markdown table."""
    lines = ["# Configuration reference", "",
             "Keys are `section.name`; inside a `[section]` block the bare name also works.", "",
             "| key | type | default | meaning |", "|---|---|---|---|"]
    for key, spec in SCHEMA.items():
        kind = spec.parse.__name__.replace("|", " \\| ")
        lines.append(f"| `{key}` | {kind} | `{_format(spec.default)}` | {spec.doc} |")
    return "\n".join(lines) + "\n"

