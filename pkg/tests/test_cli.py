import json

import numpy as np
import pytest

from dvmerge import cli
from dvmerge import dvbasi as dv
from dvmerge import paramspace as ps
from dvmerge.config import SEED_OFFSETS, load_config, parse_config
from dvmerge.errors import ConfigError

BASE = """\
# small two-task experiment
tasks = moons, rings
seed = 4
network.layer_dims = 8, 8, 2
network.activation = relu
finetune.epochs = 3
run.outer_iterations = 2
run.max_epochs = 6
run.patience = 2
run.batch_size = 64
objective = cross_entropy
"""


def write_cfg(tmp_path, text=BASE, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def run_cli(*argv):
    return cli.main(list(argv))


# -- config ----------------------------------------------------------------------

def test_parse_config_values():
    cfg = parse_config(BASE)
    assert cfg.tasks == ("moons", "rings")
    assert cfg.network.layer_dims == (8, 8, 2) and cfg.network.activation == "relu"
    assert cfg.run.outer_iterations == 2 and cfg.run.max_epochs == 6
    assert cfg.run.alpha0 == 0.3 and cfg.run.learning_rate == 0.01
    assert cfg.run.seed == 4 + SEED_OFFSETS["run"]
    assert cfg.task_seed(1) == 4 + SEED_OFFSETS["data"] + 1
    assert cfg.finetune_seed(0) == 4 + SEED_OFFSETS["finetune"]
    assert cfg.with_seed(9).run.seed == 9 + SEED_OFFSETS["run"]


@pytest.mark.parametrize("extra, line, key", [
    ("bogus.key = 1\n", 12, "bogus.key"),
    ("run.patience = many\n", 12, "run.patience"),
    ("seed = 5\n", 12, "seed"),
    ("just words\n", 12, None),
    ("objective = negation:moons:blobs\n", 12, "objective"),
    ("tta.target = blobs\n", 12, "tta.target"),
])
def test_config_errors_carry_line_numbers(extra, line, key):
    with pytest.raises(ConfigError) as info:
        parse_config(BASE + extra)
    assert info.value.line == line
    assert str(info.value).startswith(f"line {line}: ")
    assert info.value.key == key


def test_missing_required_key():
    text = "\n".join(ln for ln in BASE.splitlines() if not ln.startswith("network.layer_dims"))
    with pytest.raises(ConfigError, match="network.layer_dims"):
        parse_config(text)


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.cfg")


# -- commands --------------------------------------------------------------------

@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("exp")
    cfg = write_cfg(tmp)
    assert run_cli("finetune", "--config", cfg, "--out", str(tmp / "out")) == 0
    return tmp, cfg


def test_finetune_writes_checkpoints(workdir, capsys, tmp_path):
    tmp, cfg = workdir
    out = tmp / "out"
    ckpts = sorted(p.name for p in out.glob("*.dvck"))
    assert ckpts == ["ft_moons.dvck", "ft_rings.dvck", "pre.dvck"]
    assert ps.load_checkpoint(out / "ft_moons.dvck").meta["task"] == "moons"
    # same seeds, byte-identical output
    assert run_cli("finetune", "--config", cfg, "--out", str(tmp_path)) == 0
    for name in ckpts:
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()
    assert "moons" in capsys.readouterr().out


def test_seed_flag_changes_checkpoints(workdir, tmp_path):
    tmp, cfg = workdir
    assert run_cli("finetune", "--config", cfg, "--out", str(tmp_path), "--seed", "11") == 0
    assert (tmp_path / "pre.dvck").read_bytes() != (tmp / "out" / "pre.dvck").read_bytes()


def test_finetune_missing_key_exits_2(tmp_path, capsys):
    text = "\n".join(ln for ln in BASE.splitlines() if not ln.startswith("network.layer_dims"))
    assert run_cli("finetune", "--config", write_cfg(tmp_path, text)) == 2
    assert "network.layer_dims" in capsys.readouterr().err


def test_finetune_unreadable_config(tmp_path, capsys):
    assert run_cli("finetune", "--config", str(tmp_path / "missing.cfg")) != 0
    assert "missing.cfg" in capsys.readouterr().err


def test_run_addition(workdir, capsys):
    tmp, cfg = workdir
    out = tmp / "out"
    assert run_cli("run", "--config", cfg, "--out", str(out), "--protocol", "addition") == 0
    text = capsys.readouterr().out
    assert "Abs." in text and "Rel.:" in text
    report = json.loads((out / "report-addition.json").read_text())
    assert len(report["iterations"]) == 2
    assert report["generated_at"]
    assert (out / "final-addition.dvck").exists()
    final, ref = report["final_accuracy"], report["reference_accuracy"]
    recomputed = np.mean(list(final.values())) / np.mean([ref[k] for k in final])
    assert abs(report["relative_accuracy"] - recomputed) <= 1e-9
    printed = float(text.split("Rel.:")[1].split()[0])
    assert abs(printed - recomputed) <= 5e-5


def test_run_baseline_random_flagged(workdir):
    tmp, cfg = workdir
    out = tmp / "out"
    assert run_cli("run", "--config", cfg, "--out", str(out), "--protocol", "baseline-random") == 0
    report = json.loads((out / "report-baseline-random.json").read_text())
    assert report["flags"]["perturbation"] == "random"


@pytest.mark.parametrize("protocol", ["baseline-iso", "boost", "tta"])
def test_run_other_protocols(workdir, protocol):
    tmp, cfg = workdir
    out = tmp / "out"
    assert run_cli("run", "--config", cfg, "--out", str(out), "--protocol", protocol) == 0
    assert (out / f"report-{protocol}.json").exists()
    assert (out / f"final-{protocol}.dvck").exists()


def test_run_negation(workdir, tmp_path):
    tmp, _ = workdir
    out = tmp / "out"
    cfg = write_cfg(tmp_path, BASE.replace("objective = cross_entropy", "objective = negation:moons:rings"))
    assert run_cli("run", "--config", cfg, "--out", str(out), "--protocol", "negation") == 0
    report = json.loads((out / "report-negation.json").read_text())
    assert report["extra"]["final_control_val_accuracy"] >= report["extra"]["control_floor"]
    # negation protocol without a negation objective is a usage error
    assert run_cli("run", "--config", str(tmp / "exp.cfg"), "--out", str(out), "--protocol", "negation") == 2


def test_run_missing_checkpoint(workdir, tmp_path, capsys):
    _, cfg = workdir
    assert run_cli("run", "--config", cfg, "--out", str(tmp_path), "--protocol", "addition") == 1
    assert str(tmp_path / "pre.dvck") in capsys.readouterr().err


def test_run_is_reproducible(workdir):
    tmp, cfg = workdir
    out = tmp / "out"
    texts = []
    for _ in range(2):
        assert run_cli("run", "--config", cfg, "--out", str(out), "--protocol", "addition") == 0
        d = json.loads((out / "report-addition.json").read_text())
        d.pop("generated_at")
        texts.append(((out / "report-addition.csv").read_bytes(), json.dumps(d),
                      (out / "final-addition.dvck").read_bytes()))
    assert texts[0] == texts[1]


def test_report_command(workdir, tmp_path, capsys):
    tmp, cfg = workdir
    out = tmp / "out"
    assert run_cli("run", "--config", cfg, "--out", str(out), "--protocol", "addition") == 0
    capsys.readouterr()
    assert run_cli("report", str(out / "report-addition.json"), "--out", str(tmp_path)) == 0
    summary = capsys.readouterr().out.splitlines()
    report = dv.RunReport.from_json((out / "report-addition.json").read_text())
    assert len(summary) - 1 == len(report.iterations)
    rows = (tmp_path / "report-addition-epochs.csv").read_text().splitlines()
    assert len(rows) - 1 == sum(len(it.epochs) for it in report.iterations)
    per_iteration = {}
    for row in rows[1:]:
        fields = row.split(",")
        per_iteration[fields[0]] = per_iteration.get(fields[0], 0) + int(fields[4])
    assert list(per_iteration.values()) == [1] * len(report.iterations)
    assert (tmp_path / "report-addition-summary.txt").exists()


def test_report_malformed(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run_cli("report", str(bad)) == 1
    bad.write_text(json.dumps({"protocol": "x"}))
    assert run_cli("report", str(bad)) == 1
    assert run_cli("report", str(tmp_path / "absent.json")) == 1


def test_report_four_iterations(tmp_path, capsys):
    cfg = write_cfg(tmp_path, BASE.replace("run.outer_iterations = 2", "run.outer_iterations = 4"))
    out = tmp_path / "o"
    assert run_cli("finetune", "--config", cfg, "--out", str(out)) == 0
    assert run_cli("run", "--config", cfg, "--out", str(out), "--protocol", "addition") == 0
    capsys.readouterr()
    assert run_cli("report", str(out / "report-addition.json")) == 0
    assert len(capsys.readouterr().out.splitlines()) == 1 + 4
