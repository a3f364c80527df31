"""Command-line entry point: ``dvmerge finetune | run --protocol P | report``.

Exit codes: 0 on success, 1 when a protocol or file operation fails, 2 for
usage and configuration errors.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import logging
import sys
from pathlib import Path

from . import dvbasi as dv
from . import paramspace as ps
from . import refnet as rn
from . import vectors as vec
from .config import ExperimentConfig, load_config
from .errors import ConfigError, DVMergeError

log = logging.getLogger("dvmerge")

PROTOCOLS = ("addition", "negation", "tta", "boost", "baseline-iso", "baseline-random")
PRE_FILE = "pre.dvck"


class CommandError(Exception):
    """A failure reported to the user with a message and exit code."""

    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def ft_file(task_id: str) -> str:
    return f"ft_{task_id}.dvck"


def data_file(task_id: str) -> str:
    return f"task_{task_id}.csv"


def _out_dir(cfg: ExperimentConfig, override: str | None) -> Path:
    return Path(override if override is not None else cfg.output_dir)


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _write(path: Path, payload: bytes | str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(payload, str):
            path.write_text(payload, encoding="utf-8")
        else:
            path.write_bytes(payload)
    except OSError as exc:
        raise CommandError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _load_ckpt(path: Path) -> ps.Checkpoint:
    if not path.exists():
        raise CommandError(f"missing checkpoint {path} (run 'finetune' first)")
    return ps.load_checkpoint(path)


def _load_task(path: Path) -> rn.Task:
    if not path.exists():
        raise CommandError(f"missing task data {path} (run 'finetune' first)")
    return rn.load_task(path)


# -- finetune ----------------------------------------------------------------

def cmd_finetune(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg, args.out)
    pre = rn.init_weights(cfg.network, cfg.init_seed)
    _write(out / PRE_FILE, ps.to_bytes(pre))
    print(f"{'task':<20} {'pre':>7} {'finetuned':>10}")
    for i, kind in enumerate(cfg.tasks):
        task = rn.make_task(kind, cfg.task_seed(i), dim=cfg.network.layer_dims[0])
        ft, _ = rn.fine_tune(pre, task.train, cfg.train_hyper(i))
        ft = ft.with_meta(task=kind, finetune_seed=str(cfg.finetune_seed(i)))
        _write(out / ft_file(kind), ps.to_bytes(ft))
        try:
            rn.save_task(task, out / data_file(kind))
        except OSError as exc:
            raise CommandError(f"cannot write {out / data_file(kind)}: {exc.strerror or exc}") from exc
        print(f"{kind:<20} {rn.accuracy(pre, task.test):>7.4f} {rn.accuracy(ft, task.test):>10.4f}")
    return 0


# -- run ---------------------------------------------------------------------

def _inputs(cfg: ExperimentConfig, out: Path):
    pre = _load_ckpt(out / PRE_FILE)
    if rn.MlpSpec.of(pre).layer_dims != cfg.network.layer_dims:
        raise CommandError(f"{out / PRE_FILE} does not match network.layer_dims {list(cfg.network.layer_dims)}")
    fts = {k: _load_ckpt(out / ft_file(k)) for k in cfg.tasks}
    tasks = {k: _load_task(out / data_file(k)) for k in cfg.tasks}
    return pre, fts, tasks


def _execute(protocol: str, cfg: ExperimentConfig, pre, fts, tasks):
    run = cfg.run
    ids = list(cfg.tasks)
    taus = {k: vec.task_vector(fts[k], pre) for k in ids}
    reference = {k: rn.accuracy(fts[k], tasks[k].test) for k in ids}
    if protocol in ("addition", "baseline-iso", "baseline-random"):
        if run.objective.kind == "negation":
            raise CommandError("a negation objective needs --protocol negation", code=2)
        theta0 = dv.merge_initial([taus[k] for k in ids], pre, [tasks[k].val for k in ids])
        runner = {
            "addition": dv.dvbasi_run,
            "baseline-iso": dv.isotropic_run,
            "baseline-random": dv.random_perturbation_run,
        }[protocol]
        return runner(pre, theta0, [tasks[k] for k in ids], run, reference)
    if protocol == "negation":
        if run.objective.kind != "negation":
            raise CommandError("protocol negation needs 'objective = negation:<target>:<control>'", code=2)
        t, c = run.objective.target, run.objective.control
        return dv.negation_run(pre, taus[t], tasks[t], tasks[c], run)
    if protocol == "tta":
        target = cfg.tta_target or ids[-1]
        if len(ids) < 2:
            raise CommandError("protocol tta needs at least two tasks", code=2)
        return dv.tta_adapt(pre, taus, target, [tasks[k] for k in ids], run)
    if protocol == "boost":
        k = cfg.boost_task or ids[0]
        return dv.single_task_boost(fts[k], pre, tasks[k], run)
    raise CommandError(f"unknown protocol {protocol!r}", code=2)  # pragma: no cover - argparse guards this


def summary_table(report: dv.RunReport) -> str:
    lines = [f"protocol: {report.protocol}   {report.metric_name} per iteration: "
             + ", ".join(f"{m:.4f}" for m in report.best_metrics())]
    lines.append(f"{'task':<20} {'Abs.':>8} {'ref':>8}")
    for k, acc in report.final_accuracy.items():
        ref = report.reference_accuracy.get(k)
        lines.append(f"{k:<20} {acc:>8.4f} {ref:>8.4f}" if ref is not None else f"{k:<20} {acc:>8.4f} {'-':>8}")
    rel = report.relative_accuracy
    lines.append(f"{'mean':<20} {report.mean_accuracy:>8.4f}")
    lines.append(f"Rel.: {rel:.4f}" if rel is not None else "Rel.: n/a")
    return "\n".join(lines)


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg, args.out)
    pre, fts, tasks = _inputs(cfg, out)
    theta, report = _execute(args.protocol, cfg, pre, fts, tasks)
    report.generated_at = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    stem = f"report-{args.protocol}"
    _write(out / f"{stem}.json", report.to_json())
    _write(out / f"{stem}.csv", report.to_csv())
    _write(out / f"final-{args.protocol}.dvck", ps.to_bytes(theta))
    print(summary_table(report))
    return 0


# -- report ------------------------------------------------------------------

def iteration_summary(report: dv.RunReport) -> str:
    lines = ["iteration,epochs,best_epoch,best_metric,delta_global_norm"]
    for it in report.iterations:
        lines.append(f"{it.index},{len(it.epochs)},{it.best_epoch},{it.best_metric!r},{it.delta_global_norm!r}")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    path = Path(args.report)
    try:
        report = dv.RunReport.from_json(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise CommandError(f"cannot read report {path}: {exc.strerror or exc}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise CommandError(f"malformed report {path}: {exc}") from exc
    out = Path(args.out) if args.out is not None else path.parent
    stem = path.stem
    _write(out / f"{stem}-epochs.csv", report.to_csv())
    summary = iteration_summary(report)
    _write(out / f"{stem}-summary.txt", summary)
    sys.stdout.write(summary)
    return 0


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dvmerge", description="Task-vector merging with iterative block scaling.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log inner-loop progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment config file")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")

    p = sub.add_parser("finetune", help="create pre-trained and fine-tuned checkpoints plus task data")
    common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("run", help="run a merging protocol on existing checkpoints")
    common(p)
    p.add_argument("--protocol", required=True, choices=PROTOCOLS)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="emit per-epoch CSV and an iteration summary from a report")
    p.add_argument("report", help="report JSON written by 'run'")
    p.add_argument("--out", help="directory for the emitted files (default: next to the report)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"dvmerge: config error: {exc}", file=sys.stderr)
        return 2
    except CommandError as exc:
        print(f"dvmerge: {exc}", file=sys.stderr)
        return exc.code
    except (DVMergeError, ValueError) as exc:
        print(f"dvmerge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
