"""Iterative refinement of merged weights along their difference vector.

Each outer iteration takes the current best weights ``theta``, forms
``delta = theta - pre``, and learns one coefficient per parameter block so
that ``theta + Lambda * delta`` minimizes the training objective. The
validation metric is tracked once per epoch (epoch 0 being ``theta`` itself);
the inner loop stops after ``patience`` epochs without improvement and the
best-scoring candidate becomes the next ``theta``.

The baselines share this loop: the isotropic runner ties all coefficients
together, and the random runner swaps ``delta`` for a random direction of
the same norm.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import objectives as obj
from . import paramspace as ps
from . import refnet as rn
from . import scaling as sc
from . import vectors as vec
from .errors import ConstraintError, NonFiniteError, ShapeMismatchError
from .paramspace import BlockVector, Checkpoint
from .refnet import Dataset, Task

log = logging.getLogger(__name__)

ALPHA_GRID = tuple(round(0.05 * k, 10) for k in range(1, 21))
IMPROVE_TOL = 1e-6
NEGATION_FLOOR = 0.95
THREADS_ENV = "DV_MERGE_THREADS"

ASSUMPTIONS = {
    "entropy_surrogate": "unsupervised loss is the mean Shannon entropy (nats) of the softmax over unlabeled inputs",
    "unsupervised_selection": "unsupervised runs select on mean validation entropy (lower is better)",
    "selection_split": "early stopping and best-model selection use the validation split, never test",
    "optimizer": "AdamW on the coefficients, betas (0.9, 0.999), eps 1e-8, decay 0 unless configured",
    "mgda": "two objectives: closed-form min-norm weights; more: Frank-Wolfe with exact line search",
    "random_direction": "random perturbation drawn once per outer iteration, N(0, I) normalized, global norm matched",
    "improvement": "an epoch improves when it beats the iteration best by more than 1e-6",
    "initial_merge": "theta0 is task addition with a single alpha grid-searched on validation accuracy",
}


@dataclass(frozen=True)
class RunConfig:
    outer_iterations: int = 4
    max_epochs: int = 60
    patience: int = 5
    alpha0: float = 0.3
    objective: obj.ObjectiveKind = field(default_factory=lambda: obj.ObjectiveKind("cross_entropy"))
    seed: int = 0
    batch_size: int = 64
    learning_rate: float = 0.01
    weight_decay: float = 0.0

    def __post_init__(self):
        if isinstance(self.objective, str):
            object.__setattr__(self, "objective", obj.ObjectiveKind.parse(self.objective))
        if self.outer_iterations < 0:
            raise ValueError("outer_iterations must be >= 0")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("max_epochs, patience and batch_size must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if not (self.learning_rate > 0 and math.isfinite(self.alpha0)):
            raise ValueError("learning_rate must be positive and alpha0 finite")

    def echo(self) -> dict:
        d = asdict(self)
        d["objective"] = str(self.objective)
        return d


@dataclass
class EpochRecord:
    epoch: int
    metric: float
    eligible: bool
    lambdas: list[float]
    train_loss: float | None = None


@dataclass
class IterationRecord:
    index: int
    perturbation: str
    delta_block_norms: list[float]
    delta_global_norm: float
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float = float("nan")
    best_lambdas: list[float] = field(default_factory=list)

    @property
    def metrics(self) -> list[float]:
        return [e.metric for e in self.epochs]


@dataclass
class RunReport:
    protocol: str
    config: dict
    block_names: list[str]
    metric_name: str
    higher_is_better: bool
    iterations: list[IterationRecord] = field(default_factory=list)
    initial_metric: float | None = None
    initial_accuracy: dict[str, float] = field(default_factory=dict)
    final_accuracy: dict[str, float] = field(default_factory=dict)
    reference_accuracy: dict[str, float] = field(default_factory=dict)
    flags: dict[str, str] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    assumptions: dict[str, str] = field(default_factory=lambda: dict(ASSUMPTIONS))
    generated_at: str | None = None

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(list(self.final_accuracy.values())))

    @property
    def relative_accuracy(self) -> float | None:
        """Mean final accuracy over the mean reference (fine-tuned) accuracy."""
        shared = [k for k in self.final_accuracy if k in self.reference_accuracy]
        if not shared:
            return None
        ref = float(np.mean([self.reference_accuracy[k] for k in shared]))
        if ref <= 0:
            return None
        return float(np.mean([self.final_accuracy[k] for k in shared])) / ref

    def best_metrics(self) -> list[float]:
        return [it.best_metric for it in self.iterations]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_accuracy"] = self.mean_accuracy if self.final_accuracy else None
        d["relative_accuracy"] = self.relative_accuracy
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunReport":
        d = dict(d)
        d.pop("mean_accuracy", None)
        d.pop("relative_accuracy", None)
        iterations = []
        for it in d.pop("iterations"):
            it = dict(it)
            it["epochs"] = [EpochRecord(**e) for e in it["epochs"]]
            iterations.append(IterationRecord(**it))
        return cls(iterations=iterations, **d)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls.from_dict(json.loads(text))

    def csv_rows(self) -> list[tuple]:
        """``iteration, epoch, metric, global_delta_norm, best_flag`` per evaluated epoch."""
        rows = []
        for it in self.iterations:
            for e in it.epochs:
                rows.append((it.index, e.epoch, e.metric, it.delta_global_norm, int(e.epoch == it.best_epoch)))
        return rows

    def to_csv(self) -> str:
        lines = ["iteration,epoch,metric,global_delta_norm,best_flag"]
        lines += [f"{i},{e},{m!r},{n!r},{b}" for i, e, m, n, b in self.csv_rows()]
        return "\n".join(lines) + "\n"


# -- objective plumbing ------------------------------------------------------

def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _ordered_map(fn: Callable, items: Sequence) -> list:
    """Map in parallel when allowed; results always come back in input order."""
    threads = min(_thread_count(), len(items))
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


class _Problem:
    """Training objective plus the validation signal used for model selection."""

    metric_name = "val_accuracy"
    higher_is_better = True

    def __init__(self, streams: Sequence[Dataset], batch_size: int):
        self.streams = list(streams)
        self.batch_size = batch_size

    def epoch_batches(self, rng: np.random.Generator) -> list[list[Dataset]]:
        """One list of per-stream batches for each optimizer step of the epoch."""
        longest = max(len(d) for d in self.streams)
        steps = math.ceil(longest / self.batch_size)
        orders = []
        for d in self.streams:
            reps = math.ceil(steps * self.batch_size / len(d))
            orders.append(np.concatenate([rng.permutation(len(d)) for _ in range(reps)]))
        out = []
        for k in range(steps):
            lo = k * self.batch_size
            batch = []
            for d, order in zip(self.streams, orders):
                if len(d) == longest:
                    idx = order[lo:min(lo + self.batch_size, len(d))]
                else:
                    idx = order[lo:lo + self.batch_size]
                batch.append(d.subset(idx))
            out.append(batch)
        return out

    def loss_grad(self, theta: Checkpoint, batches: list[Dataset]) -> tuple[float, BlockVector]:
        raise NotImplementedError

    def metric(self, theta: Checkpoint) -> tuple[float, bool]:
        raise NotImplementedError

    def better(self, a: float, b: float) -> bool:
        return a > b + IMPROVE_TOL if self.higher_is_better else a < b - IMPROVE_TOL


class _PooledProblem(_Problem):
    """Cross-entropy or entropy over the union of all task training sets."""

    def __init__(self, tasks: Sequence[Task], kind: str, batch_size: int):
        super().__init__([rn.concat([t.train for t in tasks], "train")], batch_size)
        self.kind = kind
        self.val = [t.val for t in tasks]
        if kind == "entropy_min":
            self.metric_name = "val_entropy"
            self.higher_is_better = False

    def loss_grad(self, theta, batches):
        return rn.backward(theta, batches[0], self.kind)

    def metric(self, theta):
        if self.kind == "entropy_min":
            return float(np.mean([rn.mean_entropy(theta, d) for d in self.val])), True
        return float(np.mean([rn.accuracy(theta, d) for d in self.val])), True


class _MooProblem(_Problem):
    """Per-task cross-entropy gradients combined with MGDA weights."""

    def __init__(self, tasks: Sequence[Task], batch_size: int):
        super().__init__([t.train for t in tasks], batch_size)
        self.val = [t.val for t in tasks]
        self.last_weights: tuple[float, ...] = ()

    def loss_grad(self, theta, batches):
        results = _ordered_map(lambda b: rn.backward(theta, b, "cross_entropy"), batches)
        grads = [g for _, g in results]
        if any(ps.global_norm(g) == 0.0 for g in grads):
            weights = obj.SimplexWeights((1.0 / len(grads),) * len(grads))
        else:
            weights = obj.mgda_weights(grads)
        self.last_weights = weights.weights
        loss = float(np.mean([l for l, _ in results]))
        return loss, obj.combined_direction(grads, weights)

    def metric(self, theta):
        return float(np.mean([rn.accuracy(theta, d) for d in self.val])), True


class _NegationProblem(_Problem):
    """Ascend on the target task, descend on the control, subject to a control floor."""

    metric_name = "val_target_accuracy"
    higher_is_better = False

    def __init__(self, target: Task, control: Task, floor: float, batch_size: int):
        super().__init__([target.train, control.train], batch_size)
        self.target, self.control, self.floor = target, control, floor

    def loss_grad(self, theta, batches):
        (lt, gt), (lc, gc) = _ordered_map(lambda b: rn.backward(theta, b, "cross_entropy"), batches)
        return obj.negation_loss(lt, lc), gc - gt

    def metric(self, theta):
        eligible = rn.accuracy(theta, self.control.val) >= self.floor
        return rn.accuracy(theta, self.target.val), eligible


def _task_map(tasks: Sequence[Task]) -> dict[str, Task]:
    out = {}
    for t in tasks:
        if t.task_id in out:
            raise ValueError(f"duplicate task {t.task_id!r}")
        out[t.task_id] = t
    return out


def _build_problem(pre: Checkpoint, tasks: Sequence[Task], cfg: RunConfig) -> _Problem:
    kind = cfg.objective.kind
    by_id = _task_map(tasks)
    if kind in ("cross_entropy", "entropy_min"):
        return _PooledProblem(tasks, kind, cfg.batch_size)
    if kind == "moo":
        missing = [t for t in cfg.objective.tasks if t not in by_id]
        if missing:
            raise ValueError(f"moo objective names unknown tasks {missing}")
        return _MooProblem([by_id[t] for t in cfg.objective.tasks], cfg.batch_size)
    target, control = cfg.objective.target, cfg.objective.control
    for t in (target, control):
        if t not in by_id:
            raise ValueError(f"negation objective names unknown task {t!r}")
    floor = NEGATION_FLOOR * rn.accuracy(pre, by_id[control].val)
    return _NegationProblem(by_id[target], by_id[control], floor, cfg.batch_size)


# -- the iterative loop ------------------------------------------------------

def _refine_once(
    theta: Checkpoint,
    direction: BlockVector,
    problem: _Problem,
    cfg: RunConfig,
    record: IterationRecord,
    tied: bool,
) -> Checkpoint:
    """One outer iteration: learn the block coefficients, return the best candidate."""
    lam = sc.init_scaling(direction, cfg.alpha0)
    n_params = 1 if tied else len(lam)
    state = sc.OptimizerState.fresh(n_params, learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
    shared = sc.ScalingMatrix(("*",), (cfg.alpha0,)) if tied else lam

    best_theta = theta
    best_metric, eligible = problem.metric(theta)
    if not eligible:
        raise ConstraintError(f"iteration {record.index}: starting point violates the selection constraint")
    record.epochs.append(EpochRecord(0, best_metric, True, [0.0] * len(lam)))
    record.best_epoch, record.best_metric, record.best_lambdas = 0, best_metric, [0.0] * len(lam)

    rng = np.random.default_rng([cfg.seed, record.index])
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        for batches in problem.epoch_batches(rng):
            point = ps.add(theta, sc.apply(lam, direction))
            try:
                loss, grad = problem.loss_grad(point, batches)
            except NonFiniteError as exc:
                raise NonFiniteError(f"iteration {record.index}, epoch {epoch}: {exc}") from exc
            if not math.isfinite(loss):
                raise NonFiniteError(f"iteration {record.index}, epoch {epoch}: loss is {loss}")
            losses.append(loss)
            lg = sc.lambda_gradient(grad, direction)
            if tied:
                state, shared = sc.optimizer_step(state, shared, [sum(lg)])
                lam = lam.with_values(shared.lambdas * len(lam))
            else:
                state, lam = sc.optimizer_step(state, lam, lg)

        candidate = ps.add(theta, sc.apply(lam, direction))
        metric, eligible = problem.metric(candidate)
        record.epochs.append(EpochRecord(epoch, metric, eligible, list(lam.lambdas), float(np.mean(losses))))
        if eligible and problem.better(metric, best_metric):
            best_metric, best_theta = metric, candidate
            record.best_epoch, record.best_metric, record.best_lambdas = epoch, metric, list(lam.lambdas)
            stale = 0
        else:
            stale += 1
        if stale >= cfg.patience:
            break
    log.debug("iteration %d: best epoch %d metric %.6f", record.index, record.best_epoch, best_metric)
    return best_theta


def _iterate(
    pre: Checkpoint,
    theta0: Checkpoint,
    problem: _Problem,
    cfg: RunConfig,
    report: RunReport,
    *,
    tied: bool = False,
    perturbation: str = "difference",
) -> Checkpoint:
    ps.check_compatible(pre, theta0)
    theta = theta0
    report.initial_metric = problem.metric(theta0)[0]
    for m in range(1, cfg.outer_iterations + 1):
        delta = vec.difference_vector(theta, pre)
        per_block, total = ps.norm(delta)
        if perturbation == "random":
            direction = vec.random_unit_matched(delta, (cfg.seed, 0x5EED, m - 1))
        else:
            direction = delta
        record = IterationRecord(m, perturbation, per_block, total)
        report.iterations.append(record)
        theta = _refine_once(theta, direction, problem, cfg, record, tied)
    return theta


def _new_report(protocol: str, pre: Checkpoint, cfg: RunConfig, problem: _Problem, **flags) -> RunReport:
    return RunReport(
        protocol=protocol,
        config=cfg.echo(),
        block_names=list(pre.names),
        metric_name=problem.metric_name,
        higher_is_better=problem.higher_is_better,
        flags={k: str(v) for k, v in flags.items()},
    )


def _finish(report: RunReport, theta0, theta, tasks: Sequence[Task], reference: Mapping[str, float] | None):
    report.initial_accuracy = {t.task_id: rn.accuracy(theta0, t.test) for t in tasks}
    report.final_accuracy = {t.task_id: rn.accuracy(theta, t.test) for t in tasks}
    if reference:
        report.reference_accuracy = {k: float(v) for k, v in reference.items() if k in report.final_accuracy}


def _run(protocol, pre, theta0, tasks, cfg, reference, *, tied=False, perturbation="difference"):
    problem = _build_problem(pre, tasks, cfg)
    report = _new_report(
        protocol, pre, cfg, problem,
        scaling="isotropic" if tied else "anisotropic", perturbation=perturbation,
    )
    theta = _iterate(pre, theta0, problem, cfg, report, tied=tied, perturbation=perturbation)
    _finish(report, theta0, theta, tasks, reference)
    return theta, report


def dvbasi_run(pre, theta0, data: Sequence[Task], cfg: RunConfig, reference: Mapping[str, float] | None = None):
    """Anisotropic refinement along difference vectors. Returns ``(theta_M, report)``."""
    return _run("dvbasi", pre, theta0, data, cfg, reference)


def isotropic_run(pre, theta0, data: Sequence[Task], cfg: RunConfig, reference: Mapping[str, float] | None = None):
    """Same loop with one coefficient shared by every block."""
    return _run("isotropic", pre, theta0, data, cfg, reference, tied=True)


def random_perturbation_run(pre, theta0, data: Sequence[Task], cfg: RunConfig, reference=None):
    """Same loop, but each iteration perturbs along a random direction of matching norm."""
    return _run("random", pre, theta0, data, cfg, reference, perturbation="random")


# -- protocols ---------------------------------------------------------------

def merge_initial(
    task_vectors: Sequence[BlockVector],
    pre: Checkpoint,
    val: Sequence[Dataset],
    grid: Sequence[float] = ALPHA_GRID,
) -> Checkpoint:
    """Task addition ``pre + alpha * sum(tau)`` with alpha picked on mean validation accuracy."""
    if not task_vectors:
        raise ValueError("merge_initial needs at least one task vector")
    total = vec.sum_vectors(list(task_vectors))
    best, best_alpha, best_acc = None, None, -1.0
    for alpha in grid:
        theta = ps.add(pre, ps.scale_uniform(total, alpha))
        acc = float(np.mean([rn.accuracy(theta, d) for d in val]))
        if acc > best_acc:
            best, best_alpha, best_acc = theta, alpha, acc
    return best.with_meta(merge_alpha=repr(best_alpha))


def negation_run(
    pre: Checkpoint,
    tau_target: BlockVector,
    target: Task,
    control: Task,
    cfg: RunConfig,
    grid: Sequence[float] = ALPHA_GRID,
):
    """Forget the target task while keeping control accuracy within 95% of ``pre``.

    ``theta0 = pre - alpha * tau_target`` with the alpha that minimizes target
    validation accuracy among those meeting the control floor, then refined
    with the negation objective. Candidates under the floor are never selected.
    """
    if target.task_id == control.task_id:
        raise ValueError("target and control must be different tasks")
    cfg = replace(cfg, objective=obj.ObjectiveKind("negation", target=target.task_id, control=control.task_id))
    floor = NEGATION_FLOOR * rn.accuracy(pre, control.val)
    theta0, best_acc, best_alpha = None, math.inf, None
    for alpha in grid:
        theta = ps.add(pre, ps.scale_uniform(tau_target, -alpha))
        if rn.accuracy(theta, control.val) < floor:
            continue
        acc = rn.accuracy(theta, target.val)
        if acc < best_acc:
            theta0, best_acc, best_alpha = theta, acc, alpha
    if theta0 is None:
        raise ConstraintError(
            f"no alpha keeps {control.task_id!r} validation accuracy above {floor:.4f}"
        )
    theta0 = theta0.with_meta(merge_alpha=repr(-best_alpha))
    theta, report = _run("negation", pre, theta0, [target, control], cfg, None)
    report.extra = {
        "target": target.task_id,
        "control": control.task_id,
        "control_floor": floor,
        "alpha": -best_alpha,
        "pre_accuracy": {t.task_id: rn.accuracy(pre, t.test) for t in (target, control)},
        "pre_control_val_accuracy": rn.accuracy(pre, control.val),
        "final_control_val_accuracy": rn.accuracy(theta, control.val),
    }
    return theta, report


def tta_run(
    pre: Checkpoint,
    all_vectors: Mapping[str, BlockVector],
    target_id: str,
    data: Sequence[Task],
    cfg: RunConfig,
) -> RunReport:
    """Adapt to an unlabeled target using only the other tasks' vectors.

    The starting merge uses the source tasks' labeled validation sets; the
    refinement minimizes prediction entropy on the target's unlabeled inputs.
    """
    return tta_adapt(pre, all_vectors, target_id, data, cfg)[1]


def tta_adapt(pre, all_vectors, target_id, data, cfg):
    """Like :func:`tta_run` but also returns the adapted weights."""
    if target_id not in all_vectors:
        raise ValueError(f"no task vector for target {target_id!r}")
    if len(all_vectors) < 2:
        raise ValueError("test-time adaptation needs at least one vector besides the target's")
    by_id = _task_map(data)
    sources = [k for k in all_vectors if k != target_id]
    for k in sources + [target_id]:
        if k not in by_id:
            raise ValueError(f"no data for task {k!r}")
    theta0 = merge_initial([all_vectors[k] for k in sources], pre, [by_id[k].val for k in sources])
    target = by_id[target_id]
    unlabeled = Task(
        target_id,
        *(Dataset(d.inputs, np.zeros(len(d), dtype=np.int64), target_id, d.split) for d in (target.train, target.val)),
        target.test,
    )
    cfg = replace(cfg, objective=obj.ObjectiveKind("entropy_min"))
    problem = _build_problem(pre, [unlabeled], cfg)
    report = _new_report("tta", pre, cfg, problem, scaling="anisotropic", perturbation="difference")
    theta = _iterate(pre, theta0, problem, cfg, report)
    _finish(report, theta0, theta, [target], None)
    report.extra = {
        "target": target_id,
        "composition_inputs": sources,
        "pre_accuracy": rn.accuracy(pre, target.test),
        "merge_alpha": theta0.meta.get("merge_alpha"),
    }
    return theta, report


def single_task_boost(ft: Checkpoint, pre: Checkpoint, data: Task, cfg: RunConfig):
    """Continue from a fine-tuned checkpoint along its own task vector."""
    cfg = replace(cfg, objective=obj.ObjectiveKind("cross_entropy"))
    theta, report = _run("boost", pre, ft, [data], cfg, {data.task_id: rn.accuracy(ft, data.test)})
    report.extra = {
        "task": data.task_id,
        "test_accuracy_before": rn.accuracy(ft, data.test),
        "test_accuracy_after": rn.accuracy(theta, data.test),
    }
    return theta, report
