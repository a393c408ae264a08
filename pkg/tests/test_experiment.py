import json
from dataclasses import replace

import pytest

from pstdet import tensor_nn as tn
from pstdet.classifier import ClassifierConfig, default_architecture
from pstdet.evaluation import FPPI_PRESETS
from pstdet.experiment import (
    ConfigError,
    ExperimentConfig,
    NoPositivesError,
    Report,
    infer,
    label_lines,
    run_experiment,
    train_subnetwork,
)
from pstdet.geometry import BoundingBox
from pstdet.labeling import LabeledProposals, iou_label
from pstdet.report import emit_report
from pstdet.synth import RpnSimConfig, SceneConfig, generate_scenes, proposal_rng, simulate_proposals

from conftest import TINY

SMALL = ClassifierConfig(channels=(2, 2, 2, 2, 2))
TCFG = tn.TrainConfig(epochs=1, batch_size=8, seed=3)


def toy_data(n=3, seed=0):
    scenes = generate_scenes(SceneConfig(n_pedestrians=(1, 2)), n, seed)
    props = [simulate_proposals(s, RpnSimConfig(n_background=10), proposal_rng(seed, i)) for i, s in enumerate(scenes)]
    labels = [iou_label(p, s.gts, 0.5) for s, p in zip(scenes, props)]
    return scenes, props, labels


class TestTrainSubnetwork:
    def test_deterministic(self):
        scenes, props, labels = toy_data()
        a, ia = train_subnetwork(scenes, props, labels, TCFG, SMALL, 8)
        b, ib = train_subnetwork(scenes, props, labels, TCFG, SMALL, 8)
        assert a.to_json() == b.to_json()
        assert ia == ib and ia.samples == ia.positives + ia.negatives

    def test_no_positives(self):
        scenes, props, _ = toy_data()
        labels = [iou_label(p, [], 0.5) for p in props]
        with pytest.raises(NoPositivesError):
            train_subnetwork(scenes, props, labels, TCFG, SMALL)

    def test_all_negatives_omitted_is_counted(self):
        scenes, props, labels = toy_data()
        emptied = [
            LabeledProposals(lp.n, lp.iou, lp.positives, [], sorted(lp.negatives + lp.omitted), lp.positives, {i: 1.0 for i in lp.negatives})
            for lp in labels
        ]
        _, info = train_subnetwork(scenes, props, emptied, TCFG, SMALL, 8)
        assert info.negatives == 0
        assert info.no_negative_batches == sum(1 for lp in labels if lp.positives)


class TestInfer:
    def test_empty(self):
        scenes, _, _ = toy_data(1)
        assert infer(scenes[0], [], default_architecture(SMALL)) == []

    def test_duplicates_collapse(self):
        scenes, _, _ = toy_data(1)
        box = BoundingBox(10, 10, 40, 80)
        dets = infer(scenes[0], [box, box, box], default_architecture(SMALL), frame=4)
        assert len(dets) == 1
        assert dets[0].box == box and dets[0].frame == 4 and dets[0].confidence == 0.5


class TestConfig:
    def test_round_trip(self):
        cfg = ExperimentConfig.from_dict(TINY)
        assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
        assert cfg.classifier.channels == (2, 2, 2, 2, 2)
        assert cfg.subnet_train.lr == ExperimentConfig().subnet_train.lr

    def test_preset(self):
        assert ExperimentConfig.from_dict({"fppi_preset": "wide"}).fppi_range == FPPI_PRESETS["wide"]

    @pytest.mark.parametrize(
        "d",
        [
            {"bogus": 1},
            {"fppi_preset": "huge"},
            {"seeds": []},
            {"n_scenes": 1},
            {"thresholds": {"eps": 2.0}},
            {"subnet_train": {"lr": -1}},
            {"classifier": {"channels": [1, 2]}},
            {"fppi_range": [1.0, 0.1]},
        ],
    )
    def test_errors(self, d):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(d)


@pytest.fixture(scope="module")
def tiny_report():
    return run_experiment(ExperimentConfig.from_dict(TINY))


class TestRunExperiment:
    def test_rows(self, tiny_report):
        rows = [r.row() for r in tiny_report.results]
        assert [r["arm"] for r in rows] == ["baseline", "pst"]
        for r in tiny_report.results:
            assert r.tp + r.fn == sum(map(len, r.gts))
            assert 0.0 < r.lamr <= 1.0

    def test_repeat_is_identical(self, tiny_report):
        again = run_experiment(ExperimentConfig.from_dict(TINY))
        assert [r.row() for r in again.results] == [r.row() for r in tiny_report.results]

    def test_eps_one_arms_agree(self):
        cfg = ExperimentConfig.from_dict({**TINY, "thresholds": {"eps_iou": 0.5, "eps": 1.0}})
        report = run_experiment(cfg)
        base, pst = report.results
        assert {**base.row(), "arm": ""} == {**pst.row(), "arm": ""}
        assert pst.omitted == 0

    def test_partials_written(self, tmp_path):
        cfg = replace(ExperimentConfig.from_dict(TINY), out_dir=str(tmp_path))
        run_experiment(cfg)
        doc = json.loads((tmp_path / "seed_0.json").read_text())
        assert [r["arm"] for r in doc["rows"]] == ["baseline", "pst"]


class TestEmitReport:
    def test_empty_report(self, tmp_path):
        paths = emit_report(Report(ExperimentConfig()), tmp_path)
        assert [p.name for p in paths] == ["results.csv", "curves.csv", "curves.svg", "summary.json"]
        assert (tmp_path / "results.csv").read_text().count("\n") == 1
        assert (tmp_path / "curves.svg").read_text().startswith("<svg")

    def test_two_arms_and_byte_identical(self, tiny_report, tmp_path):
        emit_report(tiny_report, tmp_path / "a")
        emit_report(tiny_report, tmp_path / "b")
        for name in ("results.csv", "curves.csv", "curves.svg", "summary.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        svg = (tmp_path / "a" / "curves.svg").read_text()
        assert svg.count("<polyline") == 2
        arms = {line.split(",")[0] for line in (tmp_path / "a" / "curves.csv").read_text().splitlines()[1:]}
        assert arms == {"baseline", "pst"}

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            emit_report(Report(ExperimentConfig()), blocker / "sub")


def test_label_lines_excludes_scores():
    scenes, props, labels = toy_data(2)
    text = label_lines(labels)
    assert "phi" not in text and text.count("\n") == sum(lp.n for lp in labels)
