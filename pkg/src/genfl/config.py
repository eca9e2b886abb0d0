"""Experiment configuration: a flat ``key = value`` text format.

Values are JSON literals (numbers, ``true``/``false``, lists, quoted
strings); bare words are read as strings. ``#`` starts a comment line.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from genfl.federation import FLConfig

OUTPUT_DIR_ENV = "GENFL_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    run_id: str = ""
    output_dir: str = ""
    seeds: tuple = (0,)
    parallel: bool = False
    # data source
    dataset: str = "synthetic"  # or "mnist"
    mnist_train_images: str = ""
    mnist_train_labels: str = ""
    mnist_test_images: str = ""
    mnist_test_labels: str = ""
    num_classes: int = 10
    n_per_class: int = 600
    n_test_per_class: int = 100
    dim: int = 20
    class_separation: float = 8.0
    # partition
    partition: str = "iid"  # or "sorted_shards"
    per_class_count: int = 54
    shard_size: int = 300
    shards_per_client: int = 2
    split_policy: str = ""  # derived from mode and prior_mode when empty
    # model
    hidden: tuple = (600, 600)
    # federated training
    num_clients: int = 100
    participation: float = 0.1
    local_epochs: int = 5
    batch_size: int = 25
    lr: float = 0.0  # 0 selects 5e-3, or 5e-4 with a single client
    momentum: float = 0.95
    rounds: int = 10
    objective: str = "f1"
    kl_penalty: float = 1.0
    sigma_prior: float = 0.025
    p_min: float = 1e-4
    mode: str = "flsob"
    prior_mode: str = "learnt"
    prior_rounds: int = 100
    prior_epochs: int = 5
    prior_lr: float = 5e-3
    prior_momentum: float = 0.99
    dropout: float = 0.2
    workers: int = 1
    # certification
    delta: float = 0.05
    delta_prime: float = 0.01
    n_mc: int = 0  # 0 selects 150000 for MNIST, 10000 for synthetic data
    loss_kind: str = "zero_one"
    coupled_mc: bool = True
    n_test_mc: int = 100

    @property
    def effective_lr(self) -> float:
        if self.lr > 0:
            return self.lr
        return 5e-4 if self.num_clients == 1 else 5e-3

    @property
    def effective_n_mc(self) -> int:
        if self.n_mc > 0:
            return self.n_mc
        return 150_000 if self.dataset == "mnist" else 10_000

    @property
    def effective_split_policy(self) -> str:
        if self.split_policy:
            return self.split_policy
        if self.mode == "flsob":
            return "learnt_prior_iid" if self.prior_mode == "learnt" else "none"
        return "learnt_prior_noniid" if self.prior_mode == "learnt" else "random_prior"

    @property
    def sizes(self) -> tuple:
        in_dim = 784 if self.dataset == "mnist" else self.dim
        return (in_dim, *self.hidden, self.num_classes)

    def fl_config(self, seed: int) -> FLConfig:
        names = {f.name for f in fields(FLConfig)}
        kw = {k: getattr(self, k) for k in names if k not in ("lr", "seed")}
        return FLConfig(lr=self.effective_lr, seed=seed, **kw)

    def resolved(self) -> "ExperimentSpec":
        """Copy with every 'auto' default replaced by its effective value."""
        return dataclasses.replace(
            self, lr=self.effective_lr, n_mc=self.effective_n_mc, split_policy=self.effective_split_policy
        )


_FIELDS = {f.name: f for f in fields(ExperimentSpec)}


def _coerce(name, value, line):
    default = _FIELDS[name].default
    where = f"line {line}: " if line else ""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
        value = tuple(value) if ok else value
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(f"{where}field '{name}' has invalid value {value!r}")
    return value


def validate(spec: ExperimentSpec) -> ExperimentSpec:
    def bad(name, why):
        raise ConfigError(f"field '{name}' {why}")

    if not spec.run_id:
        bad("run_id", "is required")
    if any(c in spec.run_id for c in "/\\ \t"):
        bad("run_id", "must not contain path separators or whitespace")
    if not spec.seeds:
        bad("seeds", "must list at least one seed")
    if spec.dataset not in ("synthetic", "mnist"):
        bad("dataset", "must be 'synthetic' or 'mnist'")
    if spec.partition not in ("iid", "sorted_shards"):
        bad("partition", "must be 'iid' or 'sorted_shards'")
    if spec.loss_kind not in ("zero_one", "bounded_ce"):
        bad("loss_kind", "must be 'zero_one' or 'bounded_ce'")
    if spec.split_policy not in ("", "none", "random_prior", "learnt_prior_iid", "learnt_prior_noniid"):
        bad("split_policy", f"unknown policy {spec.split_policy!r}")
    for name in ("num_classes", "n_per_class", "n_test_per_class", "dim", "per_class_count", "shard_size",
                 "shards_per_client", "n_test_mc"):
        if getattr(spec, name) < 1:
            bad(name, "must be positive")
    if spec.n_mc < 0 or spec.lr < 0:
        bad("n_mc" if spec.n_mc < 0 else "lr", "must be >= 0")
    if any(h < 1 for h in spec.hidden):
        bad("hidden", "layer widths must be positive")
    if not (0 < spec.delta_prime < 1) or spec.delta + spec.delta_prime >= 1:
        bad("delta_prime", "must lie in (0, 1) with delta + delta_prime < 1")
    if spec.class_separation < 0:
        bad("class_separation", "must be >= 0")
    if spec.dataset == "mnist":
        for name in ("mnist_train_images", "mnist_train_labels", "mnist_test_images", "mnist_test_labels"):
            if not getattr(spec, name):
                bad(name, "is required for the MNIST dataset")
    try:
        spec.fl_config(spec.seeds[0])
    except ValueError as exc:
        msg = str(exc)
        name = msg.split(" ", 1)[0]
        raise ConfigError(f"field '{name}' invalid: {msg}") from None
    return spec


def parse_config_text(text: str) -> ExperimentSpec:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, rhs = line.partition("=")
        key, rhs = key.strip(), rhs.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        try:
            value = json.loads(rhs)
        except json.JSONDecodeError:
            if not rhs or rhs[0] in "[{\"" or " " in rhs:
                raise ConfigError(f"line {lineno}: cannot parse value {rhs!r}") from None
            value = rhs
        values[key] = _coerce(key, value, lineno)
    if "output_dir" not in values:
        values["output_dir"] = os.environ.get(OUTPUT_DIR_ENV, "runs")
    return validate(ExperimentSpec(**values))


def parse_config(path) -> ExperimentSpec:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)


def dump_config(spec: ExperimentSpec) -> str:
    """Every field, one per line, in declaration order; re-parses to ``spec``."""
    lines = []
    for f in fields(ExperimentSpec):
        value = getattr(spec, f.name)
        if isinstance(value, tuple):
            value = list(value)
        lines.append(f"{f.name} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"
