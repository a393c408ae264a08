import json

import pytest

from pstdet.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main

from conftest import TINY


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    return root, str(cfg)


def files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def run_twice(root, name, args):
    """Run a command into two fresh directories and return both file maps."""
    out = []
    for k in range(2):
        d = root / f"{name}{k}"
        assert main(args + ["--out", str(d), "--quiet"]) == EXIT_OK
        out.append(files(d))
    return out


def test_pipeline_is_byte_deterministic(workspace):
    root, cfg = workspace
    a, b = run_twice(root, "data", ["synth", "--count", "4", "--seed", "3", "--config", cfg])
    assert a == b and "image_00003.pgm" in a
    data = str(root / "data0")

    a, b = run_twice(root, "clf", ["train-classifier", "--data", data, "--config", cfg])
    assert a == b and list(a) == ["classifier.json"]
    model = str(root / "clf0" / "classifier.json")

    label_files = []
    for k in range(2):
        path = root / f"labels{k}" / "labels_00000.jsonl"
        args = ["label", "--image", f"{data}/image_00000.pgm", "--proposals", f"{data}/proposals_00000.jsonl"]
        args += ["--gts", f"{data}/gts_00000.jsonl", "--model", model, "--out", str(path), "--quiet"]
        assert main(args) == EXIT_OK
        label_files.append(path.read_bytes())
    assert label_files[0] == label_files[1]
    assert json.loads(label_files[0].splitlines()[0])["set"] in {"pos", "neg", "omitted"}

    a, b = run_twice(root, "sub", ["train-subnet", "--data", data, "--config", cfg])
    assert a == b
    subnet = str(root / "sub0" / "subnet.json")

    a, b = run_twice(root, "eval", ["eval", "--data", data, "--model", subnet, "--config", cfg])
    assert a == b and set(a) == {"detections.jsonl", "curves.csv", "curves.svg", "metrics.json"}


def test_experiment_is_byte_deterministic(workspace):
    root, cfg = workspace
    a, b = run_twice(root, "exp", ["experiment", "--config", cfg])
    assert a == b
    assert {"results.csv", "curves.csv", "curves.svg", "summary.json", "partial/seed_0.json"} <= set(a)


@pytest.mark.parametrize("cmd, name, first", [("cost", "cost.csv", "layer,kind"), ("rf", "rf.csv", "layer")])
def test_cost_and_rf(workspace, capsys, cmd, name, first):
    root, _ = workspace
    assert main([cmd]) == EXIT_OK
    text = capsys.readouterr().out
    assert text.startswith(first)
    a, b = run_twice(root, cmd, [cmd])
    assert a == b and a[name].decode() == text


def test_cost_totals(tmp_path, capsys):
    # the experiment default uses the narrow classifier
    assert main(["cost"]) == EXIT_OK
    assert capsys.readouterr().out.strip().splitlines()[-1].split(",")[6] == "17348"
    wide = tmp_path / "wide.json"
    wide.write_text(json.dumps({"classifier": {"channels": [8, 16, 32, 64, 64]}}))
    assert main(["cost", "--config", str(wide)]) == EXIT_OK
    assert capsys.readouterr().out.strip().splitlines()[-1].split(",")[6:8] == ["65224", "185"]


class TestExitCodes:
    def test_bad_config_file(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["cost", "--config", str(bad)]) == EXIT_CONFIG
        assert main(["cost", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG

    def test_unknown_key(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"nope": 1}))
        assert main(["rf", "--config", str(bad)]) == EXIT_CONFIG

    def test_invalid_eps(self, workspace):
        root, _ = workspace
        data = root / "data0"
        if not data.exists():
            main(["synth", "--count", "1", "--out", str(data), "--quiet"])
        args = ["label", "--image", f"{data}/image_00000.pgm", "--proposals", f"{data}/proposals_00000.jsonl"]
        args += ["--gts", f"{data}/gts_00000.jsonl", "--eps", "1.5", "--out", str(root / "x.jsonl"), "--quiet"]
        assert main(args) == EXIT_CONFIG

    def test_missing_data(self, tmp_path):
        assert main(["train-classifier", "--data", str(tmp_path), "--quiet"]) == EXIT_RUNTIME
        assert main(["eval", "--data", str(tmp_path), "--model", str(tmp_path / "m.json"), "--quiet"]) == EXIT_RUNTIME

    def test_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["no-such-command"])
        assert exc.value.code == 2
