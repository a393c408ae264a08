import numpy as np
import pytest

from pstdet.geometry import BoundingBox, coverage, iou, max_iou
from pstdet.synth import (
    RpnSimConfig,
    SceneConfig,
    generate_scene,
    generate_scenes,
    misleading_negative_oracle,
    partial_crop,
    proposal_rng,
    scene_rng,
    simulate_proposals,
)


def inside(b: BoundingBox, w: int, h: int) -> bool:
    return 0 <= b.x1 < b.x2 <= w and 0 <= b.y1 < b.y2 <= h


class TestGenerateScene:
    def test_no_pedestrians(self):
        scene = generate_scene(SceneConfig(n_pedestrians=(0, 0)), scene_rng(0, 0))
        assert scene.gts == []

    def test_deterministic(self):
        a = generate_scene(SceneConfig(), scene_rng(5, 3))
        b = generate_scene(SceneConfig(), scene_rng(5, 3))
        np.testing.assert_array_equal(a.image, b.image)
        assert a.gts == b.gts and a.distractors == b.distractors

    def test_scenes_are_independent_of_batch_position(self):
        batch = generate_scenes(SceneConfig(), 4, seed=2)
        alone = generate_scenes(SceneConfig(), 1, seed=2, start=3)[0]
        np.testing.assert_array_equal(batch[3].image, alone.image)

    def test_exact_count_and_overlap_limit(self):
        cfg = SceneConfig(n_pedestrians=(3, 3))
        for k in range(20):
            scene = generate_scene(cfg, scene_rng(1, k))
            assert len(scene.gts) == 3
            for i in range(3):
                for j in range(i + 1, 3):
                    assert iou(scene.gts[i], scene.gts[j]) < 0.7

    def test_image_range_and_boxes_inside(self):
        for scene in generate_scenes(SceneConfig(), 15, seed=4):
            assert scene.image.shape == (256, 256)
            assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0
            assert all(inside(g, 256, 256) for g in scene.gts)
            assert all(inside(d, 256, 256) for d in scene.distractors)

    @pytest.mark.parametrize(
        "kw", [dict(n_pedestrians=(3, 1)), dict(ped_height=(10.0, 300.0)), dict(occlusion_prob=1.5), dict(noise=-0.1)]
    )
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            SceneConfig(**kw)

    def test_config_round_trip(self):
        cfg = SceneConfig(n_pedestrians=(2, 3), noise=0.0)
        assert SceneConfig.from_dict(cfg.to_dict()) == cfg


class TestSimulateProposals:
    def test_exact_copies(self):
        scene = generate_scene(SceneConfig(), scene_rng(0, 1))
        cfg = RpnSimConfig(jitter_per_gt=1, sigma_shift=0, sigma_scale=0, partial_crop_prob=0, n_background=0)
        props = simulate_proposals(scene, cfg, proposal_rng(0, 1))
        assert props == scene.gts
        assert all(max_iou(p, scene.gts)[0] == 1.0 for p in props)

    def test_background_only(self):
        scene = generate_scene(SceneConfig(n_pedestrians=(0, 0)), scene_rng(0, 2))
        props = simulate_proposals(scene, RpnSimConfig(n_background=100), proposal_rng(0, 2))
        assert len(props) == 100

    def test_partial_crop_always(self):
        cfg = RpnSimConfig(partial_crop_prob=1.0)
        for k, scene in enumerate(generate_scenes(SceneConfig(), 30, seed=6)):
            props = simulate_proposals(scene, cfg, proposal_rng(6, k))
            for g in scene.gts:
                assert any(coverage(g, p) >= 0.5 and iou(g, p) < 0.5 for p in props)

    def test_boxes_inside_and_deterministic(self):
        for k, scene in enumerate(generate_scenes(SceneConfig(), 10, seed=7)):
            a = simulate_proposals(scene, RpnSimConfig(), proposal_rng(7, k))
            b = simulate_proposals(scene, RpnSimConfig(), proposal_rng(7, k))
            assert a == b
            assert all(inside(p, scene.width, scene.height) for p in a)

    def test_misleading_fraction_band(self):
        mis = neg = 0
        for k, scene in enumerate(generate_scenes(SceneConfig(), 60, seed=8)):
            for p in simulate_proposals(scene, RpnSimConfig(), proposal_rng(8, k)):
                if max_iou(p, scene.gts)[0] < 0.5:
                    neg += 1
                    mis += misleading_negative_oracle(p, scene.gts)
        assert 0.05 <= mis / neg <= 0.30

    def test_partial_crop_geometry(self):
        gt = BoundingBox(10, 10, 30, 50)
        for d in ("up", "down", "left", "right"):
            box = partial_crop(gt, d, 0.3, 0.6)
            assert coverage(gt, box) == pytest.approx(0.7)
            assert iou(gt, box) == pytest.approx(0.7 / 1.6)
        with pytest.raises(ValueError):
            partial_crop(gt, "sideways", 0.3, 0.6)


class TestOracle:
    def test_examples(self):
        gt = BoundingBox(0, 0, 10, 20)
        assert not misleading_negative_oracle(gt, [gt])
        assert not misleading_negative_oracle(BoundingBox(50, 50, 60, 60), [gt])
        assert misleading_negative_oracle(BoundingBox(0, 8, 10, 30), [gt], 0.5, 0.5)
        assert not misleading_negative_oracle(BoundingBox(0, 8, 10, 30), [])

    def test_range(self):
        with pytest.raises(ValueError):
            misleading_negative_oracle(BoundingBox(0, 0, 1, 1), [], 1.5, 0.5)
