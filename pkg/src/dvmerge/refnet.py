"""Small MLP classifier with hand-written backprop, synthetic tasks and SGD fine-tuning.

Every task lives in a 2-d plane of a shared input space (default 8-d); the
other coordinates carry small isotropic noise. Tasks of different kinds sit
in different planes, so one network can learn all of them while each
fine-tune mostly touches its own input columns.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import objectives as obj
from .errors import FormatError, ShapeMismatchError
from .paramspace import BlockShape, BlockVector, Checkpoint
from .vectors import VectorHistory

ACTIVATIONS = ("tanh", "relu")
SPLIT_SIZES = {"train": 600, "val": 200, "test": 200}
BASE_KINDS = ("moons", "blobs", "rings", "xor-grid")
# plane index (input dims 2p, 2p+1) each task family occupies
KIND_PLANE = {"moons": 0, "blobs": 1, "rings": 2, "xor-grid": 3, "rotated-moons": 0}
BACKGROUND_NOISE = 0.05


@dataclass(frozen=True)
class MlpSpec:
    layer_dims: tuple[int, ...]
    activation: str = "tanh"
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if len(self.layer_dims) < 2:
            raise ValueError("layer_dims needs at least input and output sizes")
        if any(d < 1 for d in self.layer_dims):
            raise ValueError("layer sizes must be positive")
        if self.layer_dims[-1] < 2:
            raise ValueError("need at least two classes")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @classmethod
    def of(cls, weights: Checkpoint) -> "MlpSpec":
        """Recover the architecture from a checkpoint's block layout and meta."""
        dims = []
        has_bias = any(n.endswith(".bias") for n in weights.names)
        n = 0
        while f"layer{n}.weight" in weights:
            out_dim, in_dim = weights[f"layer{n}.weight"].shape
            if not dims:
                dims.append(in_dim)
            elif dims[-1] != in_dim:
                raise ShapeMismatchError(f"layer{n}.weight expects {in_dim} inputs, previous layer gives {dims[-1]}")
            dims.append(out_dim)
            n += 1
        if n == 0:
            raise ShapeMismatchError("checkpoint has no layer0.weight block")
        return cls(tuple(dims), weights.meta.get("activation", "tanh"), has_bias)


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    task_id: str
    split: str

    def __post_init__(self):
        x = np.array(self.inputs, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ValueError("inputs must be (n, d) with one label per row")
        if np.any(y < 0):
            raise ValueError("labels must be non-negative")
        if self.split not in SPLIT_SIZES:
            raise ValueError(f"split must be one of {tuple(SPLIT_SIZES)}")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.task_id, self.split)


@dataclass(frozen=True)
class Task:
    """The train/val/test splits of one synthetic task."""

    task_id: str
    train: Dataset
    val: Dataset
    test: Dataset

    def split(self, name: str) -> Dataset:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 0.1
    seed: int = 0
    record_history: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")


# -- network -----------------------------------------------------------------

def init_weights(spec: MlpSpec, seed: int) -> Checkpoint:
    """Gaussian weights with std 1/sqrt(fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    blocks = []
    for n, (fan_in, fan_out) in enumerate(zip(spec.layer_dims[:-1], spec.layer_dims[1:])):
        w = rng.standard_normal((fan_out, fan_in)) / math.sqrt(fan_in)
        blocks.append((BlockShape(f"layer{n}.weight", (fan_out, fan_in)), w))
        if spec.bias:
            blocks.append((BlockShape(f"layer{n}.bias", (fan_out,)), np.zeros(fan_out)))
    meta = {"activation": spec.activation, "init_seed": str(seed)}
    return Checkpoint(blocks, meta)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _act_grad(a: np.ndarray, z: np.ndarray, kind: str) -> np.ndarray:
    return 1.0 - a * a if kind == "tanh" else (z > 0).astype(np.float64)


def _forward_cache(weights: Checkpoint, x: np.ndarray):
    spec = MlpSpec.of(weights)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != spec.layer_dims[0]:
        raise ShapeMismatchError(f"input width {x.shape[1]} but network expects {spec.layer_dims[0]}")
    n_layers = len(spec.layer_dims) - 1
    acts, pre = [x], []
    h = x
    for n in range(n_layers):
        z = h @ weights[f"layer{n}.weight"].T
        if spec.bias:
            z = z + weights[f"layer{n}.bias"]
        pre.append(z)
        h = z if n == n_layers - 1 else _act(z, spec.activation)
        acts.append(h)
    return spec, acts, pre


def forward(weights: Checkpoint, inputs) -> np.ndarray:
    """Logits, one row per input row."""
    return _forward_cache(weights, inputs)[1][-1]


def backward(weights: Checkpoint, batch: Dataset, objective: str | obj.ObjectiveKind = "cross_entropy"):
    """Mean loss over ``batch`` and its gradient with respect to every block.

    Only the single-dataset objectives (cross_entropy, entropy_min) are valid
    here; composite objectives are assembled from several calls.
    """
    kind = objective.kind if isinstance(objective, obj.ObjectiveKind) else objective
    if len(batch) == 0:
        raise ValueError("empty batch")
    spec, acts, pre = _forward_cache(weights, batch.inputs)
    logits = acts[-1]
    if kind == "cross_entropy":
        loss, dz = obj.cross_entropy_grad(logits, batch.labels)
    elif kind == "entropy_min":
        loss, dz = obj.entropy_grad(logits)
    else:
        raise ValueError(f"backward handles cross_entropy or entropy_min, not {kind!r}")

    grads: dict[str, np.ndarray] = {}
    n_layers = len(spec.layer_dims) - 1
    for n in reversed(range(n_layers)):
        w = weights[f"layer{n}.weight"]
        grads[f"layer{n}.weight"] = dz.T @ acts[n]
        if spec.bias:
            grads[f"layer{n}.bias"] = dz.sum(axis=0)
        if n > 0:
            dz = (dz @ w) * _act_grad(acts[n], pre[n - 1], spec.activation)
    grad = BlockVector((s, grads[s.name]) for s in weights.shapes)
    return loss, grad


def predict(weights: Checkpoint, inputs) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    return np.argmax(forward(weights, inputs), axis=1)


def accuracy(weights: Checkpoint, data: Dataset) -> float:
    if len(data) == 0:
        raise ValueError(f"empty {data.split} split for task {data.task_id!r}")
    return float(np.mean(predict(weights, data.inputs) == data.labels))


def mean_entropy(weights: Checkpoint, data: Dataset) -> float:
    return obj.entropy_min(forward(weights, data.inputs))


def fine_tune(pre: Checkpoint, data: Dataset, hyper: TrainHyper):
    """Plain minibatch SGD on cross-entropy starting from ``pre``.

    Returns ``(weights, history)``; history is a :class:`VectorHistory` with one
    snapshot per optimizer step (plus the start) when ``record_history`` is
    set, else ``None``.
    """
    rng = np.random.default_rng(hyper.seed)
    theta = pre
    flat_shapes = theta.shapes
    params = [a.copy() for a in theta.arrays]
    snapshots = [pre] if hyper.record_history else None
    n = len(data)
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            batch = data.subset(order[start:start + hyper.batch_size])
            current = Checkpoint(zip(flat_shapes, params), pre.meta)
            _, grad = backward(current, batch, "cross_entropy")
            params = [p - hyper.learning_rate * g for p, g in zip(params, grad.arrays)]
            if snapshots is not None:
                snapshots.append(Checkpoint(zip(flat_shapes, params), pre.meta))
    out = Checkpoint(zip(flat_shapes, params), pre.meta) if hyper.epochs > 0 else pre
    history = VectorHistory(tuple(snapshots)) if snapshots is not None else None
    return out, history


# -- synthetic tasks ---------------------------------------------------------

_ROTATED = re.compile(r"^rotated-moons@(-?\d+(?:\.\d+)?)$")


def parse_kind(kind: str) -> tuple[str, float]:
    """Split a task kind string into (family, rotation angle in degrees)."""
    kind = kind.strip()
    if kind in BASE_KINDS:
        return kind, 0.0
    m = _ROTATED.match(kind)
    if m:
        return "rotated-moons", float(m.group(1))
    raise ValueError(f"unknown task kind {kind!r}; expected one of {BASE_KINDS} or rotated-moons@<deg>")


def _plane_points(family: str, angle: float, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = labels.shape[0]
    if family in ("moons", "rotated-moons"):
        t = rng.uniform(0.0, math.pi, n)
        upper = np.stack([np.cos(t), np.sin(t)], axis=1)
        lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
        pts = np.where(labels[:, None] == 0, upper, lower) - np.array([0.5, 0.25])
        pts = pts + rng.normal(0.0, 0.1, (n, 2))
    elif family == "blobs":
        # eight blobs on a circle, classes alternating; point-symmetric about the origin
        slot = 2 * rng.integers(0, 4, n) + labels
        phi = slot * (math.pi / 4) + math.pi / 8
        pts = 1.2 * np.stack([np.cos(phi), np.sin(phi)], axis=1) + rng.normal(0.0, 0.12, (n, 2))
    elif family == "rings":
        radius = np.where(labels == 0, 0.5, 1.3) + rng.normal(0.0, 0.1, n)
        phi = rng.uniform(0.0, 2 * math.pi, n)
        pts = np.stack([radius * np.cos(phi), radius * np.sin(phi)], axis=1)
    elif family == "xor-grid":
        # quadrant sign pattern decides the class; points kept off the axes
        sx = rng.choice([-1.0, 1.0], n)
        sy = np.where(labels == 0, sx, -sx)
        pts = np.stack([sx * rng.uniform(0.15, 1.2, n), sy * rng.uniform(0.15, 1.2, n)], axis=1)
    else:  # pragma: no cover - guarded by parse_kind
        raise ValueError(family)
    if angle:
        a = math.radians(angle)
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        pts = pts @ rot.T
    return pts


def make_task(kind: str, seed: int, dim: int = 8) -> Task:
    """Generate a binary task with 600/200/200 stratified train/val/test samples."""
    family, angle = parse_kind(kind)
    plane = KIND_PLANE[family]
    if dim < 2 * plane + 2:
        raise ValueError(f"{family} occupies input dims {2 * plane}-{2 * plane + 1}; dim={dim} is too small")
    rng = np.random.default_rng(seed)
    splits = {}
    for split, size in SPLIT_SIZES.items():
        labels = np.repeat([0, 1], size // 2)
        labels = labels[rng.permutation(size)]
        x = rng.normal(0.0, BACKGROUND_NOISE, (size, dim))
        x[:, 2 * plane:2 * plane + 2] = _plane_points(family, angle, labels, rng)
        splits[split] = Dataset(x, labels, kind, split)
    return Task(kind, splits["train"], splits["val"], splits["test"])


def save_task(task: Task, path: str | Path) -> None:
    """Write all splits as CSV: ``task_id,split,label,f0..fD`` with 17 significant digits."""
    dim = task.train.inputs.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["task_id", "split", "label"] + [f"f{i}" for i in range(dim)])
        for split in SPLIT_SIZES:
            data = task.split(split)
            for x, y in zip(data.inputs, data.labels):
                writer.writerow([task.task_id, split, int(y)] + [f"{v:.17g}" for v in x])


def load_task(path: str | Path) -> Task:
    rows: dict[str, tuple[list, list]] = {s: ([], []) for s in SPLIT_SIZES}
    task_id = None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:3] != ["task_id", "split", "label"]:
            raise FormatError(f"{path}: bad header")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            if task_id is None:
                task_id = row[0]
            elif row[0] != task_id:
                raise FormatError(f"{path}:{lineno}: mixed task ids {task_id!r} and {row[0]!r}")
            if row[1] not in rows:
                raise FormatError(f"{path}:{lineno}: unknown split {row[1]!r}")
            try:
                rows[row[1]][0].append([float(v) for v in row[3:]])
                rows[row[1]][1].append(int(row[2]))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    if task_id is None:
        raise FormatError(f"{path}: no samples")
    dim = len(header) - 3
    splits = {
        s: Dataset(np.array(xs, dtype=np.float64).reshape(-1, dim), np.array(ys, dtype=np.int64), task_id, s)
        for s, (xs, ys) in rows.items()
    }
    return Task(task_id, splits["train"], splits["val"], splits["test"])


def concat(datasets: Sequence[Dataset], split: str | None = None) -> Dataset:
    """Pool several datasets (labels are kept as-is)."""
    if not datasets:
        raise ValueError("nothing to concatenate")
    return Dataset(
        np.concatenate([d.inputs for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        "+".join(d.task_id for d in datasets),
        split or datasets[0].split,
    )
