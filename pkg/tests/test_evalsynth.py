"""Metrics, evaluation reports, synthetic scenes and the ablation harness."""

import numpy as np
import pytest

from crowdscale import evalsynth as es
from crowdscale import geometry as geo
from crowdscale import model, training as tr
from crowdscale.errors import UsageError
from crowdscale.groundtruth import DensityMap, total_count


def small_params(variant="CAN"):
    return model.build(model.ModelConfig(variant=variant, width_multiplier=0.125,
                                         seed=0))


class TestMetrics:
    def test_perfect_prediction(self):
        mae, rmse = es.compute_metrics([(3.0, 3.0), (7.0, 7.0)])
        assert mae == 0.0 and rmse == 0.0

    def test_single_pair(self):
        mae, rmse = es.compute_metrics([(3.0, 5.0)])
        assert mae == 2.0 and rmse == 2.0

    def test_hand_fixture(self):
        mae, rmse = es.compute_metrics([(1.0, 2.0), (7.0, 4.0)])
        assert mae == 2.0
        assert rmse == np.sqrt(5.0)

    def test_mae_le_rmse_random(self, rng):
        for _ in range(200):
            n = int(rng.integers(1, 20))
            pairs = list(zip(rng.uniform(0, 100, n), rng.uniform(0, 100, n)))
            mae, rmse = es.compute_metrics(pairs)
            assert mae <= rmse + 1e-12


class TestEvalReport:
    def test_csv_layout(self, tmp_path):
        report = es.EvalReport(entries=[("img0", 1.0, 2.0), ("img1", 7.0, 4.0)],
                               mae=2.0, rmse=np.sqrt(5.0))
        path = tmp_path / "report.csv"
        report.write_csv(path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "image,z,zhat,abs_err"
        assert lines[1].startswith("img0,1.0,2.0,1.0")
        assert lines[-2].startswith("MAE,2.0")
        assert lines[-1].startswith("RMSE,2.2360679")

    def test_empty_dataset_rejected(self):
        with pytest.raises(UsageError):
            es.evaluate(small_params(), [])


class TestCounts:
    def test_zero_final_layer_zero_count(self, rng):
        params = small_params()
        params["decoder.conv6.weight"].data[:] = 0.0
        params["decoder.conv6.bias"].data[:] = 0.0
        sample = tr.make_sample(rng.random((1, 3, 64, 64)).astype(np.float32),
                                DensityMap(np.zeros((64, 64))))
        assert es.predict_count(params, sample) == 0.0

    def test_all_ones_roi_matches_no_roi(self, rng):
        params = small_params()
        img = rng.random((1, 3, 64, 64)).astype(np.float32)
        plain = tr.make_sample(img, DensityMap(np.zeros((64, 64))))
        masked = tr.make_sample(img, DensityMap(np.zeros((64, 64))),
                                roi=geo.RoiMask(np.ones((64, 64))))
        assert es.predict_count(params, plain) == es.predict_count(params, masked)

    def test_half_plane_partition(self, rng):
        params = small_params()
        img = rng.random((1, 3, 64, 64)).astype(np.float32)
        left = np.zeros((64, 64)); left[:, :32] = 1
        right = 1 - left
        d = DensityMap(np.zeros((64, 64)))
        full = es.predict_count(params, tr.make_sample(img, d))
        a = es.predict_count(params, tr.make_sample(img, d, roi=geo.RoiMask(left)))
        b = es.predict_count(params, tr.make_sample(img, d, roi=geo.RoiMask(right)))
        assert abs((a + b) - full) <= 1e-6 * max(full, 1.0)

    def test_roi_changes_true_count(self):
        from crowdscale.groundtruth import HeadAnnotations, KernelSpec, \
            density_from_spec
        # heads on both sides; ROI keeps only the left one
        density = density_from_spec(
            HeadAnnotations([(10.0, 32.0), (50.0, 32.0)], (64, 64)),
            KernelSpec(sigma=2.0))
        mask = np.zeros((64, 64)); mask[:, :32] = 1
        s = tr.make_sample(np.zeros((1, 3, 64, 64), dtype=np.float32), density,
                           roi=geo.RoiMask(mask))
        s.meta["points"] = np.array([[10.0, 32.0], [50.0, 32.0]])
        assert es.true_count(s) == 1.0
        s_no_roi = tr.make_sample(np.zeros((1, 3, 64, 64), dtype=np.float32),
                                  density)
        assert abs(es.true_count(s_no_roi) - 2.0) < 1e-6


class TestSceneSpec:
    def test_expected_count_constant(self):
        spec = es.SceneSpec(ground_x=(0.0, 10.0), ground_z=(0.0, 20.0),
                            ground_density=("constant", 0.1))
        assert spec.expected_count() == 0.1 * 10 * 20

    def test_expected_count_ramp(self):
        spec = es.SceneSpec(ground_x=(0.0, 10.0), ground_z=(0.0, 20.0),
                            ground_density=("ramp", 0.1, 0.3))
        assert abs(spec.expected_count() - 0.2 * 10 * 20) < 1e-12


class TestSynthScene:
    def test_deterministic(self):
        spec = es.SceneSpec(image_dims=(64, 64), seed=9)
        s1 = es.synth_scene(spec)
        s2 = es.synth_scene(spec)
        np.testing.assert_array_equal(s1.image, s2.image)
        np.testing.assert_array_equal(s1.meta["points"], s2.meta["points"])

    def test_seed_changes_scene(self):
        s1 = es.synth_scene(es.SceneSpec(image_dims=(64, 64), seed=1))
        s2 = es.synth_scene(es.SceneSpec(image_dims=(64, 64), seed=2))
        assert not np.array_equal(s1.image, s2.image)

    def test_gt_count_matches_visible_heads(self):
        s = es.synth_scene(es.SceneSpec(image_dims=(64, 64), seed=4))
        k = len(s.meta["points"])
        assert abs(total_count(s.gt_density_full) - k) <= max(1e-6 * k, 1e-9)

    def test_poisson_mean(self):
        spec = es.SceneSpec(image_dims=(64, 64), ground_density=("constant", 0.05))
        lam = spec.expected_count()
        counts = []
        for seed in range(50):
            rng = np.random.default_rng(seed)
            counts.append(len(es._sample_ground_points(
                es.SceneSpec(**{**spec.__dict__, "seed": seed}), rng)))
        assert abs(np.mean(counts) - lam) <= 0.1 * lam

    def test_head_radius_decreases_with_distance(self):
        spec = es.SceneSpec(image_dims=(128, 128), seed=0)
        hom = geo.camera_homography(spec.camera_height, spec.tilt_deg,
                                    spec.focal_px, spec.image_dims)
        pmap = geo.perspective_map_from_homography(hom, spec.image_dims)
        col = pmap.values[:, 64]
        valid = pmap.meta["valid_mask"][:, 64]
        # image rows from horizon downward are closer to the camera
        assert (np.diff(col[valid]) > 0).all()

    def test_ramp_sampler_distribution(self):
        spec = es.SceneSpec(ground_z=(0.0, 10.0), ground_x=(0.0, 10.0),
                            ground_density=("ramp", 0.02, 0.4))
        rng = np.random.default_rng(0)
        pts = np.concatenate([es._sample_ground_points(spec, rng)
                              for _ in range(200)])
        zs = pts[:, 1]
        near = (zs < 5).sum()
        far = (zs >= 5).sum()
        # linear ramp 0.02 -> 0.4: far half holds ~73% of mass
        assert far / (near + far) > 0.65


class TestAblation:
    def test_identical_variant_rows_match(self):
        train_set = [es.synth_scene(es.SceneSpec(image_dims=(64, 64), seed=s,
                                                 ground_density=("constant", 0.03)))
                     for s in range(2)]
        test_set = [es.synth_scene(es.SceneSpec(image_dims=(64, 64), seed=s,
                                                ground_density=("constant", 0.03)))
                    for s in range(10, 12)]
        cfgs = [model.ModelConfig(variant="CAN", width_multiplier=0.125, seed=0)
                for _ in range(2)]
        tcfg = tr.TrainConfig(optimizer="adam", epochs=1, seed=0,
                              crop_enabled=False, mirror_enabled=False)
        results = es.ablation_run(cfgs, train_set, test_set, tcfg)
        assert results[0][1].mae == results[1][1].mae
        assert results[0][1].rmse == results[1][1].rmse

    def test_csv_reports_reference_and_rows(self, tmp_path):
        report = es.EvalReport(entries=[("a", 1.0, 1.5)], mae=0.5, rmse=0.5)
        path = tmp_path / "ablation.csv"
        es.write_ablation_csv(path, [("CAN", report), ("VGG_SIMPLE", report)])
        text = path.read_text()
        assert "62.3 / 100.0" in text
        assert "never asserted" in text
        assert text.strip().split("\n")[-1].startswith("VGG_SIMPLE,1,0.5")
