"""Shared toy fixtures: small checkpoints and the four-task merging benchmark."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from dvmerge import dvbasi as dv
from dvmerge import refnet as rn
from dvmerge import vectors as vec
from dvmerge.paramspace import BlockShape, BlockVector, Checkpoint

KINDS = ("moons", "blobs", "rings", "xor-grid")
SPEC = rn.MlpSpec((8, 32, 32, 2), "relu")
FT_EPOCHS = 40
SEEDS = (0, 1, 2)


def ckpt(*blocks, meta=None):
    """``ckpt(("w", [2, 2], [1, 2, 3, 4]), ...)`` -> Checkpoint."""
    return Checkpoint([(BlockShape(n, d), np.asarray(v, dtype=float)) for n, d, v in blocks], meta)


def bvec(*blocks):
    return BlockVector([(BlockShape(n, d), np.asarray(v, dtype=float)) for n, d, v in blocks])


def random_checkpoint(spec: rn.MlpSpec, seed: int, scale: float = 1.0) -> Checkpoint:
    """Weights and biases all random (init_weights leaves biases at zero)."""
    base = rn.init_weights(spec, seed)
    rng = np.random.default_rng(seed + 7919)
    return Checkpoint(((s, scale * rng.normal(size=s.size)) for s in base.shapes), base.meta)


class Bench:
    """Pre-trained weights, tasks, fine-tunes and the task-addition start for one seed."""

    def __init__(self, seed: int, kinds=KINDS, spec=SPEC, ft_epochs=FT_EPOCHS):
        self.seed = seed
        self.pre = rn.init_weights(spec, seed)
        self.tasks = [rn.make_task(k, 1000 * seed + i) for i, k in enumerate(kinds)]
        self.fts = [
            rn.fine_tune(self.pre, t.train, rn.TrainHyper(epochs=ft_epochs, seed=10 * seed + i))[0]
            for i, t in enumerate(self.tasks)
        ]
        self.taus = [vec.task_vector(f, self.pre) for f in self.fts]
        self.by_id = {t.task_id: i for i, t in enumerate(self.tasks)}
        self.reference = {t.task_id: rn.accuracy(f, t.test) for f, t in zip(self.fts, self.tasks)}
        self._theta0 = None

    @property
    def theta0(self) -> Checkpoint:
        if self._theta0 is None:
            self._theta0 = dv.merge_initial(self.taus, self.pre, [t.val for t in self.tasks])
        return self._theta0

    def mean_test(self, theta) -> float:
        return float(np.mean([rn.accuracy(theta, t.test) for t in self.tasks]))

    def cfg(self, **kw) -> dv.RunConfig:
        base = dict(outer_iterations=4, seed=self.seed, batch_size=32)
        base.update(kw)
        return dv.RunConfig(**base)


@lru_cache(maxsize=None)
def bench(seed: int) -> Bench:
    return Bench(seed)


@lru_cache(maxsize=None)
def addition_runs(seed: int, alpha0: float = 0.3):
    """``{runner name: (theta, report)}`` on the four-task benchmark."""
    b = bench(seed)
    cfg = b.cfg(alpha0=alpha0)
    runners = {"anisotropic": dv.dvbasi_run}
    if alpha0 == 0.3:
        runners.update(isotropic=dv.isotropic_run, random=dv.random_perturbation_run)
    return {name: fn(b.pre, b.theta0, b.tasks, cfg, b.reference) for name, fn in runners.items()}
