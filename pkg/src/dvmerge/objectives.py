"""Loss functions on logits and the MGDA gradient combiner."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import paramspace as ps
from .errors import DegenerateInputError, ShapeMismatchError
from .paramspace import BlockVector

KINDS = ("cross_entropy", "entropy_min", "negation", "moo")


@dataclass(frozen=True)
class ObjectiveKind:
    kind: str
    target: str | None = None
    control: str | None = None
    tasks: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown objective {self.kind!r}; expected one of {KINDS}")
        if self.kind == "negation":
            if not self.target or not self.control or self.target == self.control:
                raise ValueError("negation needs two distinct task ids")
        if self.kind == "moo" and len(self.tasks) < 2:
            raise ValueError("moo needs at least two task ids")

    @property
    def supervised(self) -> bool:
        return self.kind != "entropy_min"

    @classmethod
    def parse(cls, text: str) -> "ObjectiveKind":
        """Parse ``cross_entropy | entropy_min | negation:<t>:<c> | moo:<a>,<b>,...``."""
        text = text.strip()
        head, _, rest = text.partition(":")
        if head == "negation":
            target, sep, control = rest.partition(":")
            if not sep:
                raise ValueError(f"negation objective must be negation:<target>:<control>, got {text!r}")
            return cls("negation", target=target.strip(), control=control.strip())
        if head == "moo":
            return cls("moo", tasks=tuple(t.strip() for t in rest.split(",") if t.strip()))
        if rest:
            raise ValueError(f"objective {head!r} takes no arguments")
        return cls(head)

    def __str__(self) -> str:
        if self.kind == "negation":
            return f"negation:{self.target}:{self.control}"
        if self.kind == "moo":
            return "moo:" + ",".join(self.tasks)
        return self.kind


@dataclass(frozen=True)
class SimplexWeights:
    weights: tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        object.__setattr__(self, "weights", w)
        if any(x < -1e-12 for x in w) or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"weights are not on the simplex: {w}")

    def __len__(self):
        return len(self.weights)

    def __getitem__(self, i):
        return self.weights[i]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _as_logits(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError("logits must be a non-empty 2-d array")
    return z


def cross_entropy(logits, labels) -> float:
    return cross_entropy_grad(logits, labels)[0]


def cross_entropy_grad(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = _as_logits(logits)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = z.shape
    if y.shape[0] != n:
        raise ValueError(f"{n} logit rows but {y.shape[0]} labels")
    if np.any(y < 0) or np.any(y >= c):
        raise ValueError(f"label out of range for {c} classes")
    logp = _log_softmax(z)
    loss = -float(logp[np.arange(n), y].mean())
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


def entropy_min(logits) -> float:
    return entropy_grad(logits)[0]


def row_entropy(logits) -> np.ndarray:
    logp = _log_softmax(_as_logits(logits))
    return -(np.exp(logp) * logp).sum(axis=1)


def entropy_grad(logits) -> tuple[float, np.ndarray]:
    """Mean Shannon entropy (nats) of the softmax rows and its logit gradient.

    For one row, dH/dz_k = -p_k (log p_k + H).
    """
    z = _as_logits(logits)
    n = z.shape[0]
    logp = _log_softmax(z)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=1, keepdims=True)
    grad = -p * (logp + h)
    return float(h.mean()), grad / n


def negation_loss(target_loss: float, control_loss: float) -> float:
    """Descend on the control task while ascending on the target task."""
    if not (math.isfinite(target_loss) and math.isfinite(control_loss)):
        raise ValueError("negation_loss needs finite inputs")
    return control_loss - target_loss


def _min_norm_pair(g11: float, g12: float, g22: float) -> float:
    """Weight ``gamma`` on the first point minimizing |gamma*a + (1-gamma)*b|^2, from Gram entries.

    A non-positive denominator means a == b; any weight works and 0.5 is returned.
    """
    denom = g11 - 2.0 * g12 + g22
    if denom <= 0.0:
        return 0.5
    return min(1.0, max(0.0, (g22 - g12) / denom))


def mgda_weights(grads: Sequence[BlockVector], tol: float = 1e-8, max_iter: int = 250) -> SimplexWeights:
    """Simplex weights minimizing the norm of the weighted gradient sum.

    Two gradients use the closed form; more use Frank-Wolfe with away steps
    and exact line search on the Gram matrix, stopping when the duality gap
    drops to ``tol``.
    """
    if len(grads) < 2:
        raise ValueError("mgda_weights needs at least two gradients")
    for i, g in enumerate(grads):
        ps.check_compatible(grads[0], g)
        if ps.global_norm(g) == 0.0:
            raise DegenerateInputError(f"gradient {i} is all zeros")
    flat = np.stack([g.flat() for g in grads])
    gram = flat @ flat.T
    n = len(grads)

    if n == 2:
        gamma = _min_norm_pair(float(gram[0, 0]), float(gram[0, 1]), float(gram[1, 1]))
        return SimplexWeights((gamma, 1.0 - gamma))

    w = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        gw = gram @ w
        t = int(np.argmin(gw))
        gap = float(w @ gw - gw[t])
        if gap <= tol:
            break
        # away step: move mass off the worst vertex still in use
        active = np.flatnonzero(w > 0.0)
        a = int(active[np.argmax(gw[active])])
        if gap >= float(gw[a] - w @ gw) or w[a] >= 1.0:
            d = -w.copy()
            d[t] += 1.0
            step_max = 1.0
        else:
            d = w.copy()
            d[a] -= 1.0
            step_max = w[a] / (1.0 - w[a])
        # exact line search of the quadratic (w + s d)' G (w + s d) on [0, step_max]
        curv = float(d @ gram @ d)
        slope = float(d @ gw)
        step = step_max if curv <= 0.0 else min(step_max, max(0.0, -slope / curv))
        w = w + step * d
        w[np.abs(w) < 1e-15] = 0.0
    w = np.clip(w, 0.0, None)
    w /= w.sum()
    return SimplexWeights(tuple(w))


def combined_direction(grads: Sequence[BlockVector], w: SimplexWeights) -> BlockVector:
    if len(grads) != len(w):
        raise ShapeMismatchError(f"{len(grads)} gradients but {len(w)} weights")
    total = ps.scale_uniform(grads[0], w[0])
    for g, wi in zip(grads[1:], w.weights[1:]):
        total = total + ps.scale_uniform(g, wi)
    return total
