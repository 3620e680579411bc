import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from oracles import all_subsets, smooth_loop, sup_loop
from rlplace import perception as P
from rlplace.exceptions import (ContractError, DivergenceError, ParameterError, ShapeError,
                                ValidationError, VersionError)
from rlplace.lidar import STATIC, PointCloud
from rlplace.scene import OrientedBox, TrafficFrame, Vec3, Vehicle, build_roi_grid

GRID = build_roi_grid((0.0, 20.0, 0.0, 20.0), 2.0)


def static_cloud(xyz):
    xyz = np.asarray(xyz, float).reshape(-1, 3)
    return PointCloud(0, "world", xyz, np.full(len(xyz), STATIC))


def random_instance(rng, n=2, h=5, w=6):
    feats = rng.normal(size=(n, h, w, 4))
    feats[:, 0, 0, :] = 0.0
    conf = rng.uniform(0, 1, size=(n, h, w))
    masks = (conf > 0.2).astype(float)
    return rng.normal(size=5), feats, conf, masks


class TestFeatures:
    def test_empty_cloud(self):
        f = P.extract_features(static_cloud(np.empty((0, 3))), GRID)
        assert f.values.shape == (10, 10, 4) and not f.values.any()

    def test_single_point(self):
        f = P.extract_features(static_cloud([[3.0, 5.0, 0.7]]), GRID).values
        i, j = 2, 1
        assert f[i, j, 0] == pytest.approx(math.log(2))
        assert f[i, j, 1] == pytest.approx(0.7)
        assert f[i, j, 2] == 0.0
        assert f[i, j, 3] == 0.0
        mask = np.ones((10, 10), bool)
        mask[i, j] = False
        assert not f[mask].any()

    def test_ring_fraction(self):
        # centre cell with two of its eight neighbours occupied
        pts = [[5.0, 5.0, 0.0], [3.0, 5.0, 0.0], [5.0, 7.0, 1.0], [5.0, 7.0, 2.0]]
        f = P.extract_features(static_cloud(pts), GRID).values
        assert f[2, 2, 3] == pytest.approx(2 / 8)
        assert f[3, 2, 2] == pytest.approx(1.0)
        assert f[3, 2, 1] == pytest.approx(1.5)
        # corner cells have three in-bounds neighbours
        f2 = P.extract_features(static_cloud([[1, 1, 0], [3, 1, 0]]), GRID).values
        assert f2[0, 0, 3] == pytest.approx(1 / 3)

    def test_translation_shifts_columns(self):
        rng = np.random.default_rng(3)
        xyz = np.column_stack([rng.uniform(0, 20, 300), rng.uniform(0, 20, 300),
                               rng.uniform(0, 3, 300)])
        a = P.extract_features(static_cloud(xyz), GRID).values
        b = P.extract_features(static_cloud(xyz + [GRID.cell_size, 0, 0]), GRID).values
        np.testing.assert_allclose(b[1:-1, 2:-1], a[1:-1, 1:-2], atol=1e-12)

    def test_vehicle_points_rejected(self):
        c = PointCloud(0, "world", np.zeros((2, 3)), np.array([STATIC, 4]))
        with pytest.raises(ContractError):
            P.extract_features(c, GRID)

    def test_transformer_api(self):
        fx = P.FeatureExtractor(GRID)
        assert fx.get_params() == {"grid": GRID}
        out = fx.fit_transform([static_cloud([[1, 1, 0]]), static_cloud([[9, 9, 1]])])
        assert out.shape == (2, 10, 10, 4)


class TestPredict:
    def test_zero_model_half(self):
        feats = P.extract_features(static_cloud([[1, 1, 1]]), GRID)
        a = P.predict_ability(P.PredictorModel((0, 0, 0, 0), 0.0), feats)
        assert np.all(a.values == 0.5)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=5, max_size=5))
    def test_open_interval(self, theta):
        rng = np.random.default_rng(0)
        feats = P.FeatureGrid(GRID, rng.normal(scale=50, size=(10, 10, 4)))
        a = P.predict_ability(P.PredictorModel(tuple(theta[:4]), theta[4]), feats).values
        assert np.all((a > 0) & (a < 1))

    def test_monotone_in_f1(self):
        vals = np.zeros((10, 10, 4))
        m = P.PredictorModel((0.8, 0.1, -0.2, 0.3), -0.5)
        lo = P.predict_ability(m, P.FeatureGrid(GRID, vals)).values[4, 4]
        vals[4, 4, 0] = 1.0
        hi = P.predict_ability(m, P.FeatureGrid(GRID, vals)).values[4, 4]
        assert hi > lo

    def test_empty_cells_map_to_sigmoid_bias(self):
        m = P.PredictorModel((1, 1, 1, 1), 0.3)
        a = P.predict_ability(m, P.FeatureGrid(GRID, np.zeros((10, 10, 4)))).values
        np.testing.assert_allclose(a, 1 / (1 + math.exp(-0.3)))

    def test_ability_map_validates(self):
        with pytest.raises(ValidationError):
            P.AbilityMap(GRID, np.ones((10, 10)))


def veh(vid, x, y):
    return Vehicle(vid, OrientedBox(Vec3(x, y, 1.0), Vec3(1.5, 0.8, 0.7), 0.0))


class TestConfidence:
    def test_zero_points(self):
        fr = TrafficFrame(0, (veh(0, 5.0, 5.0),))
        assert not P.confidence_from_counts(fr, {}, GRID).values.any()

    def test_n0_points(self):
        fr = TrafficFrame(0, (veh(0, 5.0, 5.0),))
        c = P.confidence_from_counts(fr, {0: 20}, GRID).values
        np.testing.assert_allclose(np.unique(c), [0.0, 1 - math.exp(-1)])
        # footprint x 3.5..6.5, y 4.2..5.8 -> columns 1..3, row 2
        assert np.count_nonzero(c) == 3
        assert c[2, 1:4].tolist() == [pytest.approx(0.6321205588)] * 3

    def test_disjoint_sum(self):
        a, b = veh(0, 5.0, 5.0), veh(1, 15.0, 15.0)
        both = P.confidence_from_counts(TrafficFrame(0, (a, b)), {0: 10, 1: 30}, GRID).values
        ca = P.confidence_from_counts(TrafficFrame(0, (a,)), {0: 10}, GRID).values
        cb = P.confidence_from_counts(TrafficFrame(0, (b,)), {1: 30}, GRID).values
        np.testing.assert_allclose(both, ca + cb)

    def test_overlap_takes_max(self):
        a, b = veh(0, 5.0, 5.0), veh(1, 5.5, 5.0)
        c = P.confidence_from_counts(TrafficFrame(0, (a, b)), {0: 5, 1: 40}, GRID).values
        assert c.max() == pytest.approx(1 - math.exp(-2))

    def test_surrogate_from_scene(self, small_scene, small_cache):
        c = P.surrogate_confidence(small_scene, 0, [0, 1], cache=small_cache)
        assert c.values.shape == small_scene.grid.shape and c.values.max() > 0

    def test_empty_placement(self, small_scene, small_cache):
        with pytest.raises(ParameterError):
            P.surrogate_confidence(small_scene, 0, [], cache=small_cache)


class TestMask:
    def test_default_threshold(self):
        c = P.ConfidenceMap(GRID, np.where(np.arange(100).reshape(10, 10) % 2, 0.3, 0.1))
        k = P.build_mask(c, 0.2).values
        assert set(np.unique(k)) == {0.0, 1.0}
        np.testing.assert_array_equal(k, (c.values == 0.3).astype(float))

    def test_zero_conf(self):
        assert not P.build_mask(P.ConfidenceMap(GRID, np.zeros((10, 10)))).values.any()

    def test_strict(self):
        assert not P.build_mask(P.ConfidenceMap(GRID, np.full((10, 10), 0.2)), 0.2).values.any()

    @given(st.floats(0.05, 3.0))
    def test_invariant_to_monotone_rescaling(self, alpha):
        rng = np.random.default_rng(1)
        c = rng.uniform(0, 1, (10, 10))
        thr = 0.2
        # increasing map on [0, 1] that fixes the threshold
        low = thr * np.clip(c / thr, 0, None) ** alpha
        high = thr + (1 - thr) * np.clip((c - thr) / (1 - thr), 0, None) ** alpha
        rescaled = np.where(c <= thr, low, high)
        k1 = P.build_mask(P.ConfidenceMap(GRID, c), thr).values
        k2 = P.build_mask(P.ConfidenceMap(GRID, rescaled), thr).values
        np.testing.assert_array_equal(k1, k2)


class TestLosses:
    def test_sup_zero_when_equal(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(0.01, 0.99, (6, 7))
        assert P.loss_sup(a, a, rng.integers(0, 2, (6, 7))) == 0.0

    def test_sup_empty_mask(self):
        assert P.loss_sup(np.full((3, 3), 0.2), np.full((3, 3), 0.9), np.zeros((3, 3))) == 0.0

    def test_sup_single_cell(self):
        a, c, k = np.full((4, 4), 0.3), np.full((4, 4), 0.8), np.zeros((4, 4))
        k[1, 2] = 1
        assert P.loss_sup(a, c, k) == 0.5

    def test_sup_shape_mismatch(self):
        with pytest.raises(ShapeError):
            P.loss_sup(np.zeros((3, 3)), np.zeros((3, 4)), np.zeros((3, 3)))

    @given(st.integers(0, 10_000))
    def test_sup_matches_loop(self, seed):
        rng = np.random.default_rng(seed)
        a, c = rng.uniform(size=(5, 4)), rng.uniform(size=(5, 4))
        k = rng.integers(0, 2, (5, 4)).astype(float)
        assert P.loss_sup(a, c, k) == pytest.approx(sup_loop(a, c, k), abs=1e-12)
        assert P.loss_sup(a, c, k) >= 0

    def test_smooth_constant(self):
        assert P.loss_smooth(np.full((5, 9), 0.37)) == 0.0

    def test_smooth_checkerboard(self):
        board = (np.indices((8, 8)).sum(axis=0) % 2).astype(float)
        assert P.loss_smooth(board) == pytest.approx(smooth_loop(board), abs=1e-12)
        assert P.loss_smooth(board) == pytest.approx(3.5, abs=1e-12)

    def test_smooth_single_cell(self):
        h, w, delta = 9, 11, 0.125
        a = np.full((h, w), 0.4)
        a[4, 5] += delta
        assert abs(P.loss_smooth(a) - 8 * delta / (h * w)) <= 1e-12

    def test_smooth_too_small(self):
        with pytest.raises(ShapeError):
            P.loss_smooth(np.zeros((1, 5)))

    @given(st.integers(2, 7), st.integers(2, 7), st.integers(0, 10_000))
    def test_smooth_matches_loop(self, h, w, seed):
        a = np.random.default_rng(seed).uniform(size=(h, w))
        assert P.loss_smooth(a) == pytest.approx(smooth_loop(a), abs=1e-12)
        assert P.loss_smooth(a) >= 0

    def test_loss_matches_pieces(self):
        rng = np.random.default_rng(2)
        theta, feats, conf, masks = random_instance(rng)
        a = P.sigmoid(feats @ theta[:4] + theta[4])
        ref = np.mean([P.loss_sup(a[s], conf[s], masks[s]) + 0.1 * P.loss_smooth(a[s])
                       for s in range(2)])
        assert P.loss_and_grad(theta, feats, conf, masks, 0.1)[0] == pytest.approx(ref, abs=1e-12)

    def test_gradient_central_differences(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            theta, feats, conf, masks = random_instance(rng)
            _, g = P.loss_and_grad(theta, feats, conf, masks, 0.1)
            fd = np.empty(5)
            for k in range(5):
                e = np.zeros(5)
                e[k] = 1e-5
                fd[k] = (P.loss_and_grad(theta + e, feats, conf, masks, 0.1)[0]
                         - P.loss_and_grad(theta - e, feats, conf, masks, 0.1)[0]) / 2e-5
            assert np.linalg.norm(g - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-12)


@pytest.fixture(scope="module")
def data(small_scene, small_cache):
    samples = P.build_training_samples(small_scene, 6, 1, cache=small_cache)
    X = [P.extract_features(x, small_scene.grid) for x, _ in samples]
    y = [c for _, c in samples]
    return samples, X, y


class TestTraining:
    def test_loss_non_increasing(self, data):
        _, X, y = data
        est = P.PerceptionPredictor(epochs=60).fit(X, y)
        h = np.array(est.loss_history_)
        assert np.all(np.diff(h) <= 1e-12)
        assert h[-1] < h[0]

    def test_deterministic(self, data):
        samples = data[0]
        m1, _ = P.train_predictor(samples, P.TrainConfig(epochs=30))
        m2, _ = P.train_predictor(samples, P.TrainConfig(epochs=30))
        assert m1.weights == m2.weights and m1.bias == m2.bias

    def test_zero_init(self, data):
        _, X, y = data
        est = P.PerceptionPredictor(epochs=3).fit(X, y)
        feats = np.asarray([x.values for x in X])
        conf = np.asarray([c.values for c in y])
        start = P.loss_and_grad(np.zeros(5), feats, conf, (conf > 0.2).astype(float), 0.1)[0]
        assert est.loss_history_[0] == start

    def test_empty_samples(self):
        with pytest.raises(ParameterError):
            P.train_predictor([])

    def test_divergence(self, data, monkeypatch):
        _, X, y = data
        monkeypatch.setattr(P, "loss_and_grad", lambda *a: (math.nan, np.zeros(5)))
        with pytest.raises(DivergenceError):
            P.PerceptionPredictor(epochs=3).fit(X, y)

    @pytest.mark.parametrize("kw", [{"gamma": -1.0}, {"threshold": 1.0}, {"lr": 0.0},
                                    {"epochs": 0}])
    def test_bad_config(self, kw):
        with pytest.raises(ParameterError):
            P.TrainConfig(**kw)

    def test_defaults(self):
        cfg = P.TrainConfig()
        assert cfg.gamma == 0.1 and cfg.threshold == 0.2
        est = P.PerceptionPredictor()
        assert est.get_params()["gamma"] == 0.1 and est.get_params()["threshold"] == 0.2

    def test_estimator_protocol(self, data):
        _, X, y = data
        est = P.PerceptionPredictor(epochs=5)
        with pytest.raises(NotFittedError):
            est.predict(X)
        cloned = clone(est.set_params(gamma=0.3))
        assert cloned.get_params()["gamma"] == 0.3
        est.fit(X, y)
        pred = est.predict(X)
        assert pred.shape == (len(X),) + X[0].values.shape[:2]
        np.testing.assert_allclose(pred[0], P.predict_ability(est.model_, X[0]).values)

    def test_sample_subset_sizes(self, small_scene, small_cache, monkeypatch):
        sizes = []
        real = P.vehicle_free_cloud

        def spy(cache, f, placement, xhat=None):
            sizes.append(len(placement))
            return real(cache, f, placement, xhat)

        monkeypatch.setattr(P, "vehicle_free_cloud", spy)
        P.build_training_samples(small_scene, 60, 4, cache=small_cache)
        assert min(sizes) >= 1 and max(sizes) <= 6 and len(set(sizes)) >= 4


class TestScoreAndModes:
    def test_score_examples(self):
        assert P.perception_score(np.zeros((80, 80))) == 0.0
        assert P.perception_score(np.ones((80, 80))) == 6400.0
        a = np.full((4, 4), 0.3)
        b = a.copy()
        b[2, 2] += 1e-6
        assert P.perception_score(b) > P.perception_score(a)

    def test_noisy_or_pair(self):
        assert P.noisy_or([np.full((2, 2), 0.5), np.full((2, 2), 0.5)])[0, 0] == 0.75

    def test_singleton_modes_agree(self, small_scene, small_cache, trained_model):
        a = P.ability_for_placement(small_scene, 0, [3], trained_model, "fused", cache=small_cache)
        b = P.ability_for_placement(small_scene, 0, [3], trained_model, "noisyor",
                                    cache=small_cache)
        np.testing.assert_array_equal(a.values, b.values)

    def test_noisy_or_monotone_cells(self, small_scene, small_cache, trained_model):
        base = P.ability_for_placement(small_scene, 0, [0, 2], trained_model, "noisyor",
                                       cache=small_cache).values
        more = P.ability_for_placement(small_scene, 0, [0, 2, 5], trained_model, "noisyor",
                                       cache=small_cache).values
        assert np.all(more >= base)

    def test_empty_placement(self, small_scene, small_cache, trained_model):
        with pytest.raises(ParameterError):
            P.ability_for_placement(small_scene, 0, [], trained_model, cache=small_cache)

    def test_noisy_or_submodular_exhaustive(self, small_scene, small_cache, trained_model):
        ids = small_scene.mount_ids
        maps = {p: P.ability_for_placement(small_scene, 0, [p], trained_model, "noisyor",
                                           cache=small_cache).values for p in ids}
        k = {(): 0.0}
        for s in all_subsets(ids):
            if s:
                k[s] = P.perception_score(P.noisy_or([maps[p] for p in s]))
        checks = 0
        for t in all_subsets(ids):
            for s in all_subsets(t):
                for p in ids:
                    if p in t:
                        continue
                    gs = k[tuple(sorted(s + (p,)))] - k[s]
                    gt = k[tuple(sorted(t + (p,)))] - k[t]
                    assert gs >= gt - 1e-9
                    assert gt >= -1e-9
                    checks += 1
        assert checks == sum(math.comb(6, r) * (6 - r) * 2 ** r for r in range(6))


class TestModelFiles:
    def test_roundtrip(self, tmp_path):
        m = P.PredictorModel((0.1, -0.2, 0.3, 0.4), -1.5, {"seed": 3, "epochs": 10, "lr": 0.1})
        P.save_model(m, tmp_path / "m.json")
        assert P.load_model(tmp_path / "m.json") == m

    def test_version(self, tmp_path):
        (tmp_path / "m.json").write_text('{"version": "x", "weights": [0,0,0,0], "bias": 0}')
        with pytest.raises(VersionError):
            P.load_model(tmp_path / "m.json")

    def test_non_finite(self):
        with pytest.raises(ValidationError):
            P.PredictorModel((0, 0, math.inf, 0), 0.0)
