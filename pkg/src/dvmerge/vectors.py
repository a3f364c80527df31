"""Task vectors, difference vectors and the telescoping check on training histories."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import paramspace as ps
from .errors import DegenerateInputError, FormatError, ShapeMismatchError
from .paramspace import BlockVector, Checkpoint

HISTORY_INDEX = "index.txt"


@dataclass(frozen=True)
class VectorHistory:
    """Weight snapshots ``theta^(0..K)`` recorded during one training run."""

    steps: tuple[Checkpoint, ...]

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        for i, snap in enumerate(self.steps[1:], start=1):
            if not snap.same_structure(self.steps[0]):
                raise ShapeMismatchError(f"history step {i} differs in shape from step 0")

    def __len__(self) -> int:
        return len(self.steps)

    def increments(self) -> list[BlockVector]:
        """Per-step moves ``theta^(k) - theta^(k-1)`` for k = 1..K."""
        return [ps.subtract(b, a) for a, b in zip(self.steps[:-1], self.steps[1:])]

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        width = max(4, len(str(len(self.steps))))
        names = []
        for k, snap in enumerate(self.steps):
            name = f"step_{k:0{width}d}.dvck"
            ps.save(snap, directory / name)
            names.append(name)
        (directory / HISTORY_INDEX).write_text("\n".join(names) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> "VectorHistory":
        directory = Path(directory)
        index = directory / HISTORY_INDEX
        if not index.exists():
            raise FormatError(f"{directory}: missing {HISTORY_INDEX}")
        names = [ln.strip() for ln in index.read_text(encoding="utf-8").splitlines() if ln.strip()]
        return cls(tuple(ps.load_checkpoint(directory / n) for n in names))


def task_vector(ft: Checkpoint, pre: Checkpoint) -> BlockVector:
    return ps.subtract(ft, pre)


def difference_vector(current: Checkpoint, pre: Checkpoint) -> BlockVector:
    """Displacement of any weight state from the pre-trained weights."""
    return ps.subtract(current, pre)


def negate(v: BlockVector) -> BlockVector:
    return -v


def sum_vectors(vs: Sequence[BlockVector]) -> BlockVector:
    if not vs:
        raise ValueError("sum_vectors needs at least one vector")
    total = vs[0]
    for v in vs[1:]:
        total = total + v
    return total


def cosine(a: BlockVector, b: BlockVector) -> float:
    na, nb = ps.global_norm(a), ps.global_norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("cosine of a zero vector is undefined")
    return ps.dot(a, b) / (na * nb)


def random_unit_matched(template: BlockVector, seed: int | Sequence[int]) -> BlockVector:
    """Isotropic random direction rescaled to the template's global norm.

    Coordinates are i.i.d. standard normal before normalization, which gives a
    uniformly distributed direction on the sphere.
    """
    target = ps.global_norm(template)
    if target == 0:
        raise DegenerateInputError("cannot match the norm of a zero template")
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal(template.size)
    unit = raw / math.sqrt(float(np.dot(raw, raw)))
    return BlockVector.from_flat(template, unit * target)


def telescoping_residual(h: VectorHistory, pre: Checkpoint) -> float:
    """Norm of ``delta(last) - sum_k increment_k - delta(first)``.

    Zero up to floating point accumulation when the history is consistent.
    """
    if len(h) == 0:
        raise ValueError("empty history")
    ps.check_compatible(h.steps[0], pre)
    first = difference_vector(h.steps[0], pre)
    last = difference_vector(h.steps[-1], pre)
    incs = h.increments()
    accumulated = sum_vectors(incs) if incs else BlockVector.zeros(pre)
    return ps.global_norm(last - accumulated - first)
