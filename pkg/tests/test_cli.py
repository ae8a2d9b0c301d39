import json

import pytest

from ctrengine.cli import COMMANDS, run


def read_json(p):
    return json.loads(p.read_text())


SMALL = ["--synthetic.n_examples", "1500", "--synthetic.seed", "6", "--trainer.batch_size", "128"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert run(["gen-data", "--out", str(out)] + SMALL) == 0
    return out


class TestCommands:
    def test_gen_data(self, data):
        lines = (data / "examples.jsonl").read_text().splitlines()
        assert len(lines) == 1500
        assert len((data / "truth.jsonl").read_text().splitlines()) == 1500
        m = read_json(data / "manifest.json")
        assert m["command"] == "gen-data"
        assert {"examples.jsonl", "truth.jsonl", "config.json", "feature_spec.json"} <= set(m["outputs"])

    def test_train_and_resume(self, data, tmp_path):
        args = ["--data", str(data / "examples.jsonl"), "--config", str(data / "config.json")]
        assert run(["train", "--out", str(tmp_path / "t")] + args) == 0
        for f in ("checkpoint.npz", "metrics.jsonl", "predictions.jsonl", "summary.json", "manifest.json"):
            assert (tmp_path / "t" / f).exists()
        s = read_json(tmp_path / "t" / "summary.json")
        assert s["examples"] == 1500 and s["progressive_logloss"] > 0
        assert str(data / "examples.jsonl") in read_json(tmp_path / "t" / "manifest.json")["inputs"]

    def test_snapshot_rerun_is_identical(self, data, tmp_path):
        base = ["--data", str(data / "examples.jsonl")] + SMALL
        assert run(["train", "--out", str(tmp_path / "a")] + base) == 0
        assert run(["train", "--out", str(tmp_path / "b"), "--data", str(data / "examples.jsonl"),
                    "--config", str(tmp_path / "a" / "config.json")]) == 0
        ma = read_json(tmp_path / "a" / "manifest.json")["outputs"]
        mb = read_json(tmp_path / "b" / "manifest.json")["outputs"]
        for f in ("predictions.jsonl", "metrics.jsonl", "summary.json", "config.json"):
            assert ma[f] == mb[f]

    def test_teacher_sample_distill_eval_report(self, data, tmp_path):
        ex = str(data / "examples.jsonl")
        assert run(["train-teacher", "--out", str(tmp_path / "t"), "--data", ex] + SMALL) == 0
        teacher = str(tmp_path / "t" / "teacher.jsonl")
        assert run(["sample", "--out", str(tmp_path / "s"), "--data", ex, "--teacher", teacher]) == 0
        summary = read_json(tmp_path / "s" / "sampling_summary.json")
        assert summary["seen"] == 1500 and 0 < summary["kept"] < 1500
        assert "negative" in summary["per_rule"]
        sampled = str(tmp_path / "s" / "sampled.jsonl")
        assert run(["distill-train", "--out", str(tmp_path / "d"), "--data", sampled, "--teacher", teacher,
                    "--losses.distill_weight", "1.0"] + SMALL) == 0
        ck = str(tmp_path / "d" / "checkpoint.npz")
        assert run(["eval", "--out", str(tmp_path / "e"), "--data", ex, "--checkpoint", ck]) == 0
        assert len((tmp_path / "e" / "predictions.jsonl").read_text().splitlines()) == 1500
        preds = str(tmp_path / "e" / "predictions.jsonl")
        assert run(["report", "--out", str(tmp_path / "r"), "--data", ex, "--predictions", preds]) == 0
        csv = (tmp_path / "r" / "calibration.csv").read_text().splitlines()
        assert csv[0].startswith("bucket,")
        assert read_json(tmp_path / "r" / "summary.json")["examples"] == 1500

    def test_pd_equal_seeds(self, data, tmp_path):
        assert run(["pd", "--out", str(tmp_path), "--data", str(data / "examples.jsonl"),
                    "--seed-a", "3", "--seed-b", "3"] + SMALL) == 0
        rep = read_json(tmp_path / "pd_report.json")
        assert rep == {"M": 1500, "delta_r": 0.0, "seed_a": 3, "seed_b": 3}

    def test_pd_different_seeds(self, data, tmp_path):
        assert run(["pd", "--out", str(tmp_path), "--data", str(data / "examples.jsonl")] + SMALL) == 0
        assert read_json(tmp_path / "pd_report.json")["delta_r"] > 0

    def test_nas(self, data, tmp_path):
        space = json.dumps({"decisions": [{"kind": "hidden", "key": 0, "options": [8, 32]}]})
        assert run(["nas", "--out", str(tmp_path), "--data", str(data / "examples.jsonl"),
                    "--target-fraction", "0.6", "--gamma", "-2", "--alpha0", "0.05", "--rho", "0.9",
                    "--set", f"nas.space={space}"] + SMALL) == 0
        sel = read_json(tmp_path / "selection.json")
        assert set(sel["decisions"]) == {"hidden:0"}
        rows = (tmp_path / "trajectory.jsonl").read_text().splitlines()
        assert len(rows) == 12
        assert {"step", "decisions", "reward"} <= set(json.loads(rows[0]))
        assert read_json(tmp_path / "config.json")["nas"]["gamma"] == -2.0


class TestExitCodes:
    def test_every_command_registered(self):
        assert set(COMMANDS) == {"gen-data", "train", "train-teacher", "sample", "distill-train", "eval", "pd",
                                 "nas", "report"}

    def test_unknown_command(self, tmp_path, capsys):
        assert run(["fly", "--out", str(tmp_path)]) == 1
        assert "fly" in capsys.readouterr().err

    def test_unknown_field(self, tmp_path, capsys):
        assert run(["gen-data", "--out", str(tmp_path), "--optimizer.nope", "1"]) == 1
        assert "optimizer.nope" in capsys.readouterr().err

    def test_missing_data(self, tmp_path):
        assert run(["train", "--out", str(tmp_path)]) == 1

    def test_missing_file(self, tmp_path):
        assert run(["train", "--out", str(tmp_path), "--data", str(tmp_path / "none.jsonl")]) == 1

    def test_bad_line_reported(self, tmp_path, capsys):
        (tmp_path / "x.jsonl").write_text("{}\n")
        assert run(["train", "--out", str(tmp_path / "o"), "--data", str(tmp_path / "x.jsonl")]) == 1
        assert "1" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numerical_abort(self, data, tmp_path):
        assert run(["train", "--out", str(tmp_path), "--data", str(data / "examples.jsonl"),
                    "--optimizer.lr", "1e300", "--optimizer.initial_accumulator", "1e-300"] + SMALL) == 2

    def test_no_command(self):
        assert run([]) == 1
