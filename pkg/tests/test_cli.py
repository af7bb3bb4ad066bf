import json
import os

import pytest

from advgrid import cli, harness

TINY_CONFIG = {
    "dataset": {"n_per_class_train": 8, "n_per_class_test": 4},
    "train": {"epochs": 4},
    "adversarial": {"epochs": 2, "steps": 2},
    "surrogates": {"epochs": 2},
}

TINY_BUDGETS = {
    "budgets": {
        "intensity:linf": 0.25,
        "intensity:l1": 3.0,
        "intensity:l2": 1.0,
        "location:linf": 0.06,
        "location:l1": 1.2,
        "location:l2": 0.25,
    },
    "failures": {},
    "metadata": {},
}

CHECKPOINTS = [
    "standard.ckpt", "adversarial.ckpt",
    "surrogate_s0.ckpt", "surrogate_s1.ckpt",
    "surrogate_s2.ckpt", "surrogate_s3.ckpt",
]


def make_run_dir(tmp_path):
    out = tmp_path / "run"
    out.mkdir()
    (out / "budgets.json").write_text(json.dumps(TINY_BUDGETS))
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    return str(out), str(cfg)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("cli")
    out, cfg = make_run_dir(tmp_path)
    assert cli.main(["train", "--config", cfg, "--out", out]) == 0
    assert cli.main(
        ["evaluate", "--config", cfg, "--out", out, "--state", "S0", "--jobs", "1"]
    ) == 0
    return out, cfg


class TestTrain:
    def test_checkpoints_written(self, tiny_run):
        out, _ = tiny_run
        for name in CHECKPOINTS:
            assert os.path.exists(os.path.join(out, name))

    def test_rerun_identical(self, tiny_run, tmp_path):
        out, cfg = tiny_run
        out2, _ = make_run_dir(tmp_path)
        assert cli.main(["train", "--config", cfg, "--out", out2]) == 0
        for name in CHECKPOINTS:
            with open(os.path.join(out, name), "rb") as a:
                with open(os.path.join(out2, name), "rb") as b:
                    assert a.read() == b.read(), name

    def test_missing_out_dir_created(self, tmp_path):
        out, cfg = make_run_dir(tmp_path)
        nested = os.path.join(str(tmp_path), "deep", "dir")
        os.makedirs(os.path.dirname(nested), exist_ok=True)
        # budgets live elsewhere, so train calibrates inline; keep it tiny
        rc = cli.main(["train", "--config", cfg, "--out", nested])
        assert rc == 0
        assert os.path.isdir(nested)


class TestEvaluate:
    def test_state_filter_single_cell(self, tiny_run):
        out, _ = tiny_run
        rows, meta = harness.parse_report_json(os.path.join(out, "report.json"))
        assert [r.state for r in rows] == ["S0"]
        assert len(meta["per_cell_accuracy"]) == 1
        assert "I-linf|ce|whitebox" in meta["per_cell_accuracy"]
        assert os.path.exists(os.path.join(out, "report.csv"))
        assert os.path.exists(os.path.join(out, "table.csv"))

    def test_metadata_embeds_config_and_conventions(self, tiny_run):
        out, _ = tiny_run
        _, meta = harness.parse_report_json(os.path.join(out, "report.json"))
        assert meta["config"]["dataset"]["n_per_class_train"] == 8
        assert "flow_units" in meta["conventions"]
        assert meta["attack_defaults"]["steps"] == 20

    def test_outcomes_persisted(self, tiny_run):
        out, _ = tiny_run
        assert os.path.exists(
            os.path.join(out, "outcomes", "cell_I-linf_ce_whitebox.json")
        )

    def test_unknown_state(self, tiny_run):
        out, cfg = tiny_run
        rc = cli.main(
            ["evaluate", "--config", cfg, "--out", out, "--state", "S9"]
        )
        assert rc == 2

    def test_missing_checkpoints(self, tmp_path, capsys):
        out, cfg = make_run_dir(tmp_path)
        rc = cli.main(["evaluate", "--config", cfg, "--out", out])
        assert rc == 1
        assert "train" in capsys.readouterr().err


class TestDiagnose:
    def test_writes_document(self, tiny_run):
        out, cfg = tiny_run
        assert cli.main(["diagnose", "--config", cfg, "--out", out]) == 0
        with open(os.path.join(out, "diagnostics.json")) as fh:
            doc = json.load(fh)
        assert "histogram" in doc and "traps" in doc
        assert "overlap_mass" in doc["histogram"]
        assert "config" in doc["metadata"]

    def test_bins_respected(self, tiny_run):
        out, cfg = tiny_run
        assert cli.main(
            ["diagnose", "--config", cfg, "--out", out, "--bins", "5"]
        ) == 0
        with open(os.path.join(out, "diagnostics.json")) as fh:
            doc = json.load(fh)
        assert len(doc["histogram"]["bin_edges"]) == 6

    def test_missing_outcomes(self, tmp_path, capsys):
        out, cfg = make_run_dir(tmp_path)
        rc = cli.main(["diagnose", "--config", cfg, "--out", out])
        assert rc == 1
        assert "evaluate" in capsys.readouterr().err


class TestDemoToy:
    def test_default_run(self, tmp_path, capsys):
        out = str(tmp_path / "demo")
        assert cli.main(["demo-toy", "--out", out]) == 0
        with open(os.path.join(out, "toy_demo.json")) as fh:
            doc = json.load(fh)
        assert doc["inconsistency"] is True
        assert doc["weights"] == [[0.2, 0.8], [0.9, 0.4], [0.3, 0.9]]
        assert "inconsistency: True" in capsys.readouterr().out

    def test_zero_eps(self, tmp_path):
        out = str(tmp_path / "demo")
        assert cli.main(["demo-toy", "--out", out, "--eps", "0"]) == 0
        with open(os.path.join(out, "toy_demo.json")) as fh:
            assert json.load(fh)["inconsistency"] is False

    def test_invalid_point(self, tmp_path):
        rc = cli.main(
            ["demo-toy", "--out", str(tmp_path), "--x", "3", "0"]
        )
        assert rc == 2


class TestConfig:
    def test_defaults(self):
        cfg = cli.load_config()
        assert cfg == cli.DEFAULT_CONFIG

    def test_merge_is_deep(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"dataset": {"seed": 99}}))
        cfg = cli.load_config(str(p))
        assert cfg["dataset"]["seed"] == 99
        assert cfg["dataset"]["height"] == 8  # untouched default

    def test_seed_override(self):
        cfg = cli.load_config(seed=100)
        assert cfg["dataset"]["seed"] == 107
        assert cfg["train"]["seed"] == 100
        assert cfg["adversarial"]["seed"] == 101
        assert cfg["surrogates"]["seeds"] == [111, 112, 113, 114]

    def test_invalid_json(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text("{nope")
        rc = cli.main(["demo-toy", "--out", str(tmp_path)])
        assert rc == 0  # demo-toy ignores config
        with pytest.raises(cli.ConfigError):
            cli.load_config(str(p))

    def test_non_object_config(self, tmp_path):
        p = tmp_path / "list.json"
        p.write_text("[1, 2]")
        with pytest.raises(cli.ConfigError):
            cli.load_config(str(p))
