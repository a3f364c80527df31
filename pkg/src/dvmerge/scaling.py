"""Per-block scaling coefficients for a difference vector, their gradient, and the AdamW step."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import paramspace as ps
from .errors import NonFiniteError, ShapeMismatchError
from .paramspace import BlockVector


@dataclass(frozen=True)
class ScalingMatrix:
    """One coefficient per parameter block, in block order.

    Stands for a block-diagonal matrix whose i-th diagonal block is
    ``lambdas[i] * I``; the identity factors are never materialized.
    """

    names: tuple[str, ...]
    lambdas: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))
        if len(self.names) != len(self.lambdas):
            raise ValueError("one lambda per block required")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate block names")
        for name, lam in zip(self.names, self.lambdas):
            if not math.isfinite(lam):
                raise NonFiniteError(f"lambda for block {name!r} is not finite")

    def __len__(self) -> int:
        return len(self.lambdas)

    def pairs(self) -> list[tuple[str, float]]:
        return list(zip(self.names, self.lambdas))

    def with_values(self, values: Sequence[float]) -> "ScalingMatrix":
        return ScalingMatrix(self.names, tuple(values))


def init_scaling(template, alpha0: float) -> ScalingMatrix:
    alpha0 = float(alpha0)
    if not math.isfinite(alpha0):
        raise NonFiniteError("initial scaling must be finite")
    return ScalingMatrix(template.names, (alpha0,) * len(template.names))


def _check_coverage(lam: ScalingMatrix, v) -> None:
    if lam.names != v.names:
        raise ShapeMismatchError(f"scaling covers blocks {lam.names}, vector has {v.names}")


def apply(lam: ScalingMatrix, delta: BlockVector) -> BlockVector:
    """Scale block i of ``delta`` by ``lambda_i``."""
    _check_coverage(lam, delta)
    return BlockVector((s, x * c) for (s, x), c in zip(delta, lam.lambdas))


def lambda_gradient(theta_grad: BlockVector, delta: BlockVector) -> list[float]:
    """dL/dlambda_i = <dL/dtheta_i, delta_i> for theta = theta_j + Lambda delta."""
    ps.check_compatible(theta_grad, delta)
    return [float(np.dot(g, d)) for g, d in zip(theta_grad.arrays, delta.arrays)]


@dataclass(frozen=True)
class OptimizerState:
    first_moment: tuple[float, ...]
    second_moment: tuple[float, ...]
    step_count: int = 0
    learning_rate: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def fresh(cls, n: int, **hyper) -> "OptimizerState":
        return cls((0.0,) * n, (0.0,) * n, **hyper)


def optimizer_step(
    state: OptimizerState, lam: ScalingMatrix, grads: Sequence[float]
) -> tuple[OptimizerState, ScalingMatrix]:
    """One bias-corrected Adam update with decoupled weight decay."""
    if not (len(grads) == len(lam) == len(state.first_moment)):
        raise ShapeMismatchError(
            f"{len(grads)} gradients, {len(lam)} lambdas, {len(state.first_moment)} moments"
        )
    for name, g in zip(lam.names, grads):
        if not math.isfinite(g):
            raise NonFiniteError(f"non-finite lambda gradient for block {name!r}")
    b1, b2 = state.betas
    t = state.step_count + 1
    lr = state.learning_rate
    m = [b1 * mi + (1 - b1) * g for mi, g in zip(state.first_moment, grads)]
    v = [b2 * vi + (1 - b2) * g * g for vi, g in zip(state.second_moment, grads)]
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    new = []
    for x, mi, vi in zip(lam.lambdas, m, v):
        x = x * (1 - lr * state.weight_decay)
        x = x - lr * (mi / c1) / (math.sqrt(vi / c2) + state.epsilon)
        new.append(x)
    return replace(state, first_moment=tuple(m), second_moment=tuple(v), step_count=t), lam.with_values(new)
