import math

import numpy as np
import pytest

from vista.config import ModelConfig
from vista.data import dihedral_point, rasterize_gaussian, uniform_raster
from vista.errors import ConfigError, DataError
from vista.fdcheck import finite_difference_check
from vista.gpm import (
    GoalHeatmap,
    bce_mean,
    goal_loss,
    goal_loss_tensor,
    goal_target,
    gpm_forward,
    gpm_forward_batch,
    heatmap_from_logits,
    init_gpm_params,
    load_heatmap_txt,
    save_heatmap_pgm,
    save_heatmap_txt,
    softargmax,
    softargmax_tensor,
    ttst_sample,
)
from vista.model import init_params
from vista.params import ParamStore
from vista.tensor import constant


def heatmap_from_grid(grid, logits=None):
    grid = np.asarray(grid, dtype=np.float64)
    return GoalHeatmap(grid=grid, agent_id=0, logits=logits)


class TestForward:
    def test_output_shape_contract(self):
        cfg = ModelConfig(t_obs=8, t_fut=12, grid=32, n_classes=3)
        params = init_params(cfg, seed=0)
        raster = uniform_raster(32, 3)
        obs = np.random.default_rng(0).uniform(2, 29, size=(8, 2))
        hm = gpm_forward(obs, raster, params, cfg, agent_id=5)
        assert hm.grid.shape == (32, 32)
        assert hm.agent_id == 5
        assert ((hm.grid >= 0) & (hm.grid <= 1)).all()
        assert (hm.grid > 0).any()

    def test_zero_weights_give_constant_sigmoid_bias(self):
        cfg = ModelConfig(t_obs=4, t_fut=3, grid=16)
        params = init_params(cfg, seed=0)
        for name in params.names():
            if name.startswith("gpm."):
                params[name].data = np.zeros_like(params[name].data)
        params["gpm.out.b"].data = np.array([0.3])
        obs = np.full((4, 2), 8.0)
        hm = gpm_forward(obs, None, params, cfg)
        expected = 1 / (1 + math.exp(-0.3))
        np.testing.assert_allclose(hm.grid, expected, atol=1e-12)

    def test_bce_gradient_matches_finite_differences(self, tiny_model_config):
        cfg = tiny_model_config
        rng = np.random.default_rng(2)
        store = ParamStore()
        init_gpm_params(store, cfg, rng)
        obs = rng.uniform(3, 12, size=(1, cfg.t_obs, 2))
        goal = rng.uniform(3, 12, size=2)

        def loss():
            logits = gpm_forward_batch(obs, None, store, cfg)
            return goal_loss_tensor(logits[0], goal, cfg.goal_sigma)

        err = finite_difference_check(store, loss, epsilon=1e-5, max_coords_per_param=4, seed=0)
        assert err < 1e-4

    def test_grid_mismatch_is_config_error(self):
        cfg = ModelConfig(t_obs=4, t_fut=3, grid=16)
        params = init_params(cfg, seed=0)
        with pytest.raises(ConfigError):
            gpm_forward_batch(np.zeros((1, 4, 2)), uniform_raster(10), params, cfg)


class TestSoftargmax:
    def test_uniform_heatmap_gives_exact_centroid(self):
        logits = np.zeros((5, 7))
        out = softargmax(heatmap_from_grid(np.ones((5, 7)), logits), 1.0)
        np.testing.assert_allclose(out, [3.0, 2.0], atol=1e-9)

    def test_delta_limit_hits_peak_cell_center(self):
        logits = np.zeros((6, 6))
        logits[2, 4] = 1.0
        out = softargmax(heatmap_from_grid(np.zeros((6, 6)), logits), 1e-3)
        np.testing.assert_allclose(out, [4.0, 2.0], atol=1e-6)

    def test_two_equal_peaks_give_midpoint(self):
        logits = np.zeros((5, 5))
        logits[0, 0] = 3.0
        logits[0, 4] = 3.0
        out = softargmax(heatmap_from_grid(np.zeros((5, 5)), logits), 0.01)
        np.testing.assert_allclose(out, [2.0, 0.0], atol=1e-9)

    def test_commutes_with_dihedral_transforms(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(9, 9))
        base = softargmax(heatmap_from_grid(np.zeros((9, 9)), logits), 0.5)
        for tid in range(8):
            moved = logits
            for _ in range(tid % 4):
                moved = np.rot90(moved, k=1, axes=(0, 1))
            if tid >= 4:
                moved = moved[:, ::-1]
            got = softargmax(heatmap_from_grid(np.zeros((9, 9)), np.ascontiguousarray(moved)), 0.5)
            np.testing.assert_allclose(got, dihedral_point(base, tid, 9), atol=1e-9)

    def test_high_temperature_converges_to_centroid(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(6, 6))
        centroid = np.array([2.5, 2.5])
        dist = []
        for temp in (1.0, 10.0, 100.0, 1e4):
            out = softargmax(heatmap_from_grid(np.zeros((6, 6)), logits), temp)
            dist.append(np.linalg.norm(out - centroid))
        assert all(d2 < d1 + 1e-12 for d1, d2 in zip(dist, dist[1:]))
        assert dist[-1] < 1e-3

    def test_gradient_flows(self):
        from vista.tensor import backward, reduce_sum

        logits = constant(np.random.default_rng(0).normal(size=(4, 4)).copy())
        logits.requires_grad = True
        out = softargmax_tensor(logits, 0.5)
        backward(reduce_sum(out))
        assert logits.grad is not None
        assert np.abs(logits.grad).max() > 0

    def test_nonpositive_temperature(self):
        with pytest.raises(ConfigError):
            softargmax(heatmap_from_grid(np.ones((3, 3)), np.zeros((3, 3))), 0.0)


class TestTTST:
    def test_single_peak_k1_centroid_near_peak(self):
        grid = np.zeros((8, 8))
        grid[5, 2] = 1.0
        sample = ttst_sample(heatmap_from_grid(grid), n_raw=500, k=1, seed=0)
        assert sample.goals.shape == (1, 2)
        np.testing.assert_allclose(sample.goals[0], [2.0, 5.0], atol=0.5)
        np.testing.assert_array_equal(sample.weights, [1.0])

    def test_two_separated_peaks_k2(self):
        grid = np.zeros((16, 16))
        grid[2, 2] = 0.5
        grid[13, 13] = 0.5
        sample = ttst_sample(heatmap_from_grid(grid), n_raw=2000, k=2, seed=1)
        goals = sample.goals[np.argsort(sample.goals[:, 0])]
        np.testing.assert_allclose(goals[0], [2.0, 2.0], atol=1.0)
        np.testing.assert_allclose(goals[1], [13.0, 13.0], atol=1.0)
        np.testing.assert_allclose(sample.weights, [0.5, 0.5], atol=0.05)

    def test_k_equals_n_raw_uniform_weights(self):
        grid = np.ones((6, 6))
        sample = ttst_sample(heatmap_from_grid(grid), n_raw=12, k=12, seed=3)
        np.testing.assert_allclose(sample.weights, np.full(12, 1 / 12), atol=1e-12)

    def test_deterministic_given_seed(self):
        grid = np.random.default_rng(0).uniform(size=(10, 10))
        a = ttst_sample(heatmap_from_grid(grid), 300, 5, seed=7)
        b = ttst_sample(heatmap_from_grid(grid), 300, 5, seed=7)
        np.testing.assert_array_equal(a.goals, b.goals)
        np.testing.assert_array_equal(a.weights, b.weights)

    def test_goals_within_grid_bounds(self):
        grid = np.random.default_rng(1).uniform(size=(9, 9))
        sample = ttst_sample(heatmap_from_grid(grid), 1000, 20, seed=2)
        assert (sample.goals >= -0.5).all() and (sample.goals <= 8.5).all()
        assert sample.weights.sum() == pytest.approx(1.0)

    def test_all_zero_heatmap_errors(self):
        with pytest.raises(DataError, match="no positive mass"):
            ttst_sample(heatmap_from_grid(np.zeros((4, 4))), 100, 2, seed=0)

    def test_bad_counts(self):
        with pytest.raises(ConfigError):
            ttst_sample(heatmap_from_grid(np.ones((4, 4))), 5, 10, seed=0)


class TestGoalLoss:
    def test_self_target_is_entropy_floor(self):
        target = goal_target((2.1, 1.4), (6, 6), sigma=1.5)
        hm = heatmap_from_grid(target)
        floor = bce_mean(target, target)
        assert goal_loss(hm, (2.1, 1.4), 1.5) == pytest.approx(floor, rel=1e-12)

    def test_flipped_prediction_is_worse_than_floor(self):
        target = goal_target((2.1, 1.4), (6, 6), sigma=1.5)
        floor = bce_mean(target, target)
        worse = bce_mean(1.0 - target, target)
        assert worse > floor

    def test_hand_two_by_two_case(self):
        pred = np.array([[0.9, 0.1], [0.1, 0.1]])
        target = np.array([[1.0, 0.0], [0.0, 0.0]])
        expected = -(math.log(0.9) + 3 * math.log(0.9)) / 4
        assert bce_mean(pred, target) == pytest.approx(expected, rel=1e-12)

    def test_target_peak_is_one(self):
        target = goal_target((3.0, 3.0), (8, 8), sigma=1.5)
        assert target.max() == pytest.approx(1.0)
        assert target.min() > 0


class TestExports:
    def test_txt_roundtrip(self, tmp_path):
        grid = np.random.default_rng(0).uniform(size=(5, 4))
        path = tmp_path / "h.txt"
        save_heatmap_txt(path, heatmap_from_grid(grid))
        np.testing.assert_array_equal(load_heatmap_txt(path), grid)

    def test_pgm_structure(self, tmp_path):
        grid = np.array([[0.0, 0.5], [1.0, 0.25]])
        path = tmp_path / "h.pgm"
        save_heatmap_pgm(path, heatmap_from_grid(grid))
        lines = path.read_text().splitlines()
        assert lines[0] == "P2"
        assert lines[1] == "2 2"
        assert lines[2] == "255"
        assert lines[3].split() == ["0", "128"]
        assert lines[4].split() == ["255", "64"]
