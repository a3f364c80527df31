"""Experiment configuration: a flat ``key = value`` text file with dotted keys.

Example::

    # four-task addition fixture
    tasks = moons, blobs, rings, xor-grid
    seed = 0
    network.layer_dims = 8, 32, 32, 2
    network.activation = relu
    objective = cross_entropy

Blank lines and ``#`` comments are ignored. Unknown keys, repeated keys and
unparseable values fail with the offending line number.

All randomness comes from the single root ``seed``, offset per consumer:
``init`` (+0), task ``i`` data (+1000+i), task ``i`` fine-tune (+2000+i) and
the refinement run (+3000).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

from . import objectives as obj
from . import refnet as rn
from .dvbasi import RunConfig
from .errors import ConfigError

SEED_OFFSETS = {"init": 0, "data": 1000, "finetune": 2000, "run": 3000}
MERGE_METHODS = ("task_addition",)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _names(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default); a default of ``None`` marks a required key
_SCHEMA: dict[str, tuple[Callable[[str], object], object]] = {
    "tasks": (_names, None),
    "seed": (int, 0),
    "network.layer_dims": (_ints, None),
    "network.activation": (str.strip, "relu"),
    "finetune.epochs": (int, 40),
    "finetune.batch_size": (int, 32),
    "finetune.learning_rate": (float, 0.1),
    "merge.method": (str.strip, "task_addition"),
    "run.outer_iterations": (int, 4),
    "run.max_epochs": (int, 60),
    "run.patience": (int, 5),
    "run.alpha0": (float, 0.3),
    "run.batch_size": (int, 32),
    "run.learning_rate": (float, 0.01),
    "run.weight_decay": (float, 0.0),
    "objective": (str.strip, "cross_entropy"),
    "tta.target": (str.strip, ""),
    "boost.task": (str.strip, ""),
    "output.dir": (str.strip, "out"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    tasks: tuple[str, ...]
    network: rn.MlpSpec
    finetune_epochs: int = 40
    finetune_batch_size: int = 32
    finetune_learning_rate: float = 0.1
    merge_method: str = "task_addition"
    run: RunConfig = field(default_factory=RunConfig)
    seed: int = 0
    tta_target: str = ""
    boost_task: str = ""
    output_dir: str = "out"
    source: str | None = None

    def task_seed(self, i: int) -> int:
        return self.seed + SEED_OFFSETS["data"] + i

    def finetune_seed(self, i: int) -> int:
        return self.seed + SEED_OFFSETS["finetune"] + i

    @property
    def init_seed(self) -> int:
        return self.seed + SEED_OFFSETS["init"]

    def train_hyper(self, i: int) -> rn.TrainHyper:
        return rn.TrainHyper(
            epochs=self.finetune_epochs,
            batch_size=self.finetune_batch_size,
            learning_rate=self.finetune_learning_rate,
            seed=self.finetune_seed(i),
        )

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Re-derive every seed from a new root (used by ``--seed``)."""
        return replace(self, seed=seed, run=replace(self.run, seed=seed + SEED_OFFSETS["run"]))


def parse_pairs(text: str) -> dict[str, tuple[str, int]]:
    """Split the document into ``{key: (raw value, line number)}``."""
    out: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        if key not in _SCHEMA:
            raise ConfigError(f"unknown key {key!r}", line=lineno, key=key)
        if key in out:
            raise ConfigError(f"key {key!r} repeated (first set on line {out[key][1]})", line=lineno, key=key)
        out[key] = (value.strip(), lineno)
    return out


def parse_config(text: str, source: str | None = None) -> ExperimentConfig:
    pairs = parse_pairs(text)
    values: dict[str, object] = {}
    for key, (parser, default) in _SCHEMA.items():
        if key not in pairs:
            if default is None:
                raise ConfigError(f"missing required key {key!r}", key=key)
            values[key] = default
            continue
        raw, lineno = pairs[key]
        try:
            values[key] = parser(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", line=lineno, key=key) from exc

    def fail(key: str, message: str):
        line = pairs[key][1] if key in pairs else None
        return ConfigError(message, line=line, key=key)

    tasks = values["tasks"]
    if not tasks:
        raise fail("tasks", "'tasks' lists no task kinds")
    if len(set(tasks)) != len(tasks):
        raise fail("tasks", "'tasks' contains duplicates")
    for t in tasks:
        try:
            rn.parse_kind(t)
        except ValueError as exc:
            raise fail("tasks", str(exc)) from exc
    try:
        network = rn.MlpSpec(values["network.layer_dims"], values["network.activation"])
    except ValueError as exc:
        key = "network.activation" if "activation" in str(exc) else "network.layer_dims"
        raise fail(key, str(exc)) from exc
    if values["merge.method"] not in MERGE_METHODS:
        raise fail("merge.method", f"merge.method must be one of {MERGE_METHODS}")
    try:
        objective = obj.ObjectiveKind.parse(values["objective"])
    except ValueError as exc:
        raise fail("objective", str(exc)) from exc
    named = set(filter(None, (objective.target, objective.control, *objective.tasks)))
    unknown = sorted(named - set(tasks))
    if unknown:
        raise fail("objective", f"objective names tasks not in 'tasks': {unknown}")
    for key in ("tta.target", "boost.task"):
        if values[key] and values[key] not in tasks:
            raise fail(key, f"{key} {values[key]!r} is not in 'tasks'")
    seed = values["seed"]
    try:
        run = RunConfig(
            outer_iterations=values["run.outer_iterations"],
            max_epochs=values["run.max_epochs"],
            patience=values["run.patience"],
            alpha0=values["run.alpha0"],
            objective=objective,
            seed=seed + SEED_OFFSETS["run"],
            batch_size=values["run.batch_size"],
            learning_rate=values["run.learning_rate"],
            weight_decay=values["run.weight_decay"],
        )
        hyper = rn.TrainHyper(
            epochs=values["finetune.epochs"],
            batch_size=values["finetune.batch_size"],
            learning_rate=values["finetune.learning_rate"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(
        tasks=tasks,
        network=network,
        finetune_epochs=hyper.epochs,
        finetune_batch_size=hyper.batch_size,
        finetune_learning_rate=hyper.learning_rate,
        merge_method=values["merge.method"],
        run=run,
        seed=seed,
        tta_target=values["tta.target"],
        boost_task=values["boost.task"],
        output_dir=values["output.dir"],
        source=source,
    )


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {str(path)!r}: {exc.strerror or exc}") from exc
    try:
        return parse_config(text, source=str(path))
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}", key=exc.key) from exc
