"""Model facade: parameter initialization and the prediction pipeline
(goal heatmaps -> sampled goals -> multimodal rollouts) with the
scene-unit <-> grid-cell conversion in one place."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .data import Scene
from .errors import ConfigError
from .gpm import (
    GoalHeatmap,
    GoalSample,
    gpm_forward_batch,
    heatmap_from_logits,
    init_gpm_params,
    ttst_sample,
)
from .params import ParamStore
from .tensor import no_grad
from .tpm import PredictionSet, init_tpm_params, predict_multimodal, rollout


def init_params(config: ModelConfig, seed: int = 0) -> ParamStore:
    config.validate()
    rng = np.random.default_rng(seed)
    store = ParamStore()
    if config.use_goal:
        init_gpm_params(store, config, rng)
    init_tpm_params(store, config, rng)
    return store


def stable_seed(*parts) -> int:
    """Deterministic 32-bit seed derived from strings/ints."""
    text = "\x1f".join(str(p) for p in parts)
    return zlib.crc32(text.encode("utf-8"))


@dataclass
class Model:
    config: ModelConfig
    params: ParamStore

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "Model":
        return cls(config=config, params=init_params(config, seed))

    # -- unit conversion ---------------------------------------------------

    def to_cells(self, xy):
        return np.asarray(xy, dtype=np.float64) / self.config.raster_downsample

    def to_scene(self, xy):
        return np.asarray(xy, dtype=np.float64) * self.config.raster_downsample

    # -- pipeline ----------------------------------------------------------

    def gt_goals(self, scene: Scene) -> np.ndarray:
        """Final ground-truth position per agent, scene units."""
        return scene.positions()[:, -1, :].copy()

    def goal_logits(self, scene: Scene):
        obs = self.to_cells(scene.positions()[:, : self.config.t_obs, :])
        return gpm_forward_batch(obs, scene.raster, self.params, self.config)

    def heatmaps(self, scene: Scene) -> list[GoalHeatmap]:
        if not self.config.use_goal:
            raise ConfigError("goal conditioning is disabled in this configuration")
        with no_grad():
            logits = self.goal_logits(scene)
        return [
            heatmap_from_logits(logits.data[i], agent_id)
            for i, agent_id in enumerate(scene.agent_ids)
        ]

    def sample_goals(self, scene: Scene, k: int, seed: int) -> list[GoalSample]:
        """TTST goals per agent, converted back to scene units; each agent's
        sampler is seeded from (seed, scene key, agent_id)."""
        samples = []
        for heatmap in self.heatmaps(scene):
            agent_seed = stable_seed(seed, scene.key(), heatmap.agent_id)
            gs = ttst_sample(heatmap, self.config.n_raw_samples, k, agent_seed)
            samples.append(
                GoalSample(goals=self.to_scene(gs.goals), weights=gs.weights)
            )
        return samples

    def predict(
        self, scene: Scene, k: int, seed: int, capture_trace: bool = False
    ) -> PredictionSet:
        if self.config.use_goal:
            goal_samples = self.sample_goals(scene, k, seed)
            with no_grad():
                return predict_multimodal(
                    scene, goal_samples, self.params, self.config, capture_trace
                )
        with no_grad():
            return predict_multimodal(
                scene, None, self.params, self.config, capture_trace, k=k
            )

    def rollout_with_goals(self, scene: Scene, goals, capture_trace: bool = False):
        with no_grad():
            return rollout(scene, goals, self.params, self.config, capture_trace)
