import csv
import io
import json
from pathlib import Path

import jsonschema
import pytest

from splitpriv.data import generate_synthetic, write_idx
from splitpriv.errors import ConfigError
from splitpriv.harness import Experiment, ExperimentConfig, from_mapping, load_config, run_pipeline, stage_seed
from splitpriv.harness.cli import main
from splitpriv.harness.config import dump_config
from splitpriv.harness.pipeline import RunRecord
from splitpriv.harness.report import CSV_COLUMNS, REPORT_SCHEMA, emit_report, render_csv
from splitpriv.metrics import compute_pa, compute_pi

ROOT = Path(__file__).resolve().parents[1]

TINY = """
seed = 1
cuts = ["conv1", "conv5"]
data.n = 400
data.user_classes = 4
user.epochs = 3
user.batch_size = 32
baseline.epochs = 4
baseline.batch_size = 32
attack_train.epochs = 1
mi.n_samples = 120
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


# --- config ----------------------------------------------------------------------------


def test_default_config_file_matches_code_defaults():
    assert load_config(ROOT / "configs" / "default.toml") == ExperimentConfig()


def test_dotted_and_nested_keys_agree(tmp_path):
    a = tmp_path / "a.toml"
    a.write_text('defense.strategy = "none"\nmi.k = 7\n')
    b = tmp_path / "b.toml"
    b.write_text('[defense]\nstrategy = "none"\n[mi]\nk = 7\n')
    assert load_config(a) == load_config(b)
    assert load_config(a).defense.strategy == "none" and load_config(a).mi.k == 7


def test_dump_round_trip(tmp_path):
    cfg = from_mapping({"seed": 4, "cuts": ["conv2"], "user.milestones": [0.3], "data.overlap": True})
    path = tmp_path / "c.toml"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


@pytest.mark.parametrize("values", [
    {"bogus": 1},
    {"defense.nope": 1},
    {"mi.k": "five"},
    {"data.overlap": 1},
    {"user.lr": True},
    {"defense.strategy": "dropout"},
    {"model.arch": "alexnet"},
    {"cuts": 3},
])
def test_config_errors(values):
    with pytest.raises(ConfigError):
        from_mapping(values)


def test_malformed_and_missing_files(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = = 1")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")


def test_digest_ignores_output_dir():
    a = from_mapping({"out": "x"})
    assert a.digest() == from_mapping({"out": "y"}).digest()
    assert a.digest() != from_mapping({"seed": 9}).digest()


def test_stage_seed_order_independent():
    assert stage_seed(0, "defense", "conv1") == stage_seed(0, "defense", "conv1")
    seeds = {stage_seed(0, "defense", c) for c in ("conv1", "conv2", "conv3")}
    assert len(seeds) == 3
    assert stage_seed(1, "defense", "conv1") != stage_seed(0, "defense", "conv1")
    assert 0 <= stage_seed(123, "x") < 2**31


# --- pipeline / CLI --------------------------------------------------------------------------


def test_cli_run_outputs(tiny_config, tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["run", "--config", str(tiny_config), "--out", str(out)])
    assert code == 0
    rows = list(csv.reader(io.StringIO((out / "reports.csv").read_text())))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert [r[0] for r in rows[1:]] == ["conv1", "conv5"]
    assert b"\r\n" not in (out / "reports.csv").read_bytes()
    doc = json.loads((out / "reports.json").read_text())
    jsonschema.validate(doc, REPORT_SCHEMA)
    for rep in doc["reports"]:
        assert rep["pa"] == compute_pa(rep["accuracy_u_prime"], rep["accuracy_u"])[0]
        pi, raw = compute_pi(rep["accuracy_a"], rep["accuracy_a_prime"], rep["accuracy_r"])
        assert (rep["pi"], rep["pi_raw"]) == (pi, raw)
        assert rep["provenance"]["edge_digest_before"] == rep["provenance"]["edge_digest_after"]
    for row in rows[1:]:
        values = dict(zip(CSV_COLUMNS, row))
        assert float(values["normalized_accuracy"]) == float(values["accuracy_u_prime"]) / float(values["accuracy_u"])
    assert (out / "user_model.splk").exists() and (out / "defense_conv1.splk").exists()
    record = json.loads((out / "run_record.json").read_text())
    assert set(record["wall_times"]) >= {"train_user", "baseline", "conv1", "conv5"}


def test_cli_stage_subcommands_share_artifacts(tiny_config, tmp_path):
    out = tmp_path / "stages"
    base = ["--config", str(tiny_config), "--out", str(out), "--cuts", "conv2"]
    for cmd in ("train-user", "profile-cuts", "defend", "evaluate", "measure-mi", "attack"):
        assert main([cmd] + base) == 0, cmd
    assert (out / "profile.csv").read_text().splitlines()[0] == "cut,index,flops_ratio,params_ratio"
    assert len((out / "profile.csv").read_text().splitlines()) == 6
    assert "conv2" in json.loads((out / "mi.json").read_text())["mi"]
    assert main(["report"] + base + ["--format", "csv,json,plots"]) == 0
    assert (out / "cut_profile.png").exists() and (out / "mi_vs_attack.png").exists()
    staged = (out / "reports.csv").read_text()
    fresh = tmp_path / "fresh"
    assert main(["run", "--config", str(tiny_config), "--out", str(fresh), "--cuts", "conv2"]) == 0
    assert (fresh / "reports.csv").read_text() == staged


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text('defense.strategy = "magic"\n')
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "config error" in capsys.readouterr().err
    assert main(["defend", "--out", str(tmp_path / "o"), "--cuts", "conv9"]) == 1


def test_failing_cut_is_isolated(tiny_config, tmp_path, monkeypatch):
    original = Experiment.mi

    def flaky(self, cut):
        if cut.label == "conv5":
            raise ValueError("injected failure")
        return original(self, cut)

    monkeypatch.setattr(Experiment, "mi", flaky)
    out = tmp_path / "partial"
    assert main(["run", "--config", str(tiny_config), "--out", str(out)]) == 2
    doc = json.loads((out / "reports.json").read_text())
    assert [r["cut"] for r in doc["reports"]] == ["conv1"]
    assert "injected failure" in doc["failures"]["conv5"]
    clean = tmp_path / "clean"
    main(["run", "--config", str(tiny_config), "--out", str(clean), "--cuts", "conv1"])
    (alone,) = json.loads((clean / "reports.json").read_text())["reports"]
    # the cut selection is part of the config digest; everything else must match
    for rep in (alone, doc["reports"][0]):
        rep["provenance"].pop("config_digest")
    assert alone == doc["reports"][0]


def test_emit_report_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        emit_report(RunRecord("x"), blocker / "sub")
    assert render_csv(RunRecord("x")) == ",".join(CSV_COLUMNS) + "\n"


def test_idx_source(tmp_path):
    user, _ = generate_synthetic(0, 400, user_classes=3)
    _, att = generate_synthetic(1, 400, user_classes=3)
    write_idx(user, tmp_path / "ui", tmp_path / "ul")
    write_idx(att, tmp_path / "ai", tmp_path / "al")
    cfg = from_mapping({"out": str(tmp_path / "run"), "cuts": ["conv3"], "data.source": "idx",
                        "data.user_images": str(tmp_path / "ui"), "data.user_labels": str(tmp_path / "ul"),
                        "data.attacker_images": str(tmp_path / "ai"), "data.attacker_labels": str(tmp_path / "al"),
                        "user.epochs": 2, "baseline.epochs": 4, "baseline.batch_size": 32, "attack_train.epochs": 1,
                        "mi.n_samples": 100})
    record = run_pipeline(cfg)
    assert record.exit_code == 0 and len(record.reports) == 1
    with pytest.raises(ConfigError):
        run_pipeline(from_mapping({"out": str(tmp_path / "x"), "data.source": "idx"}))
