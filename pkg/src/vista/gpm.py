"""Goal prediction: per-agent destination heatmaps over the scene grid,
differentiable goal extraction, and multi-goal sampling.

The heatmap head is a small encoder-decoder with skip connections (two
2x-downsampling stages, channel widths from the config) built entirely from
the engine primitives: 3x3 convolutions are expressed as nine shifted 1x1
matmuls over a zero-padded input, pooling as a block mean, and upsampling as
nearest-neighbor duplication. Grid cell (r, c) is centered at (x=c, y=r).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .data import SceneRaster, rasterize_gaussian, uniform_raster
from .errors import ConfigError, DataError
from .params import ParamStore, glorot_uniform
from .tensor import (
    Tensor,
    bce_with_logits_mean,
    concat,
    constant,
    narrow,
    relu,
    scale,
    softmax,
)


@dataclass
class GoalHeatmap:
    grid: np.ndarray  # (H, W) probabilities after sigmoid
    agent_id: int
    logits: np.ndarray | None = None  # pre-sigmoid scores, same shape


@dataclass
class GoalSample:
    goals: np.ndarray  # (k, 2) coordinates, ordered by descending weight
    weights: np.ndarray  # (k,) cluster mass fractions summing to 1

    @property
    def k(self):
        return len(self.weights)


# -- parameters -----------------------------------------------------------


def init_gpm_params(store: ParamStore, config: ModelConfig, rng: np.random.Generator):
    c_in = config.n_classes + config.t_obs
    w1, w2 = config.enc_widths
    wd = config.dec_width

    def conv(name, cin, cout):
        fan_in, fan_out = 9 * cin, 9 * cout
        store.add(f"gpm.{name}.w", glorot_uniform(rng, fan_in, fan_out, (3, 3, cin, cout)))
        store.add(f"gpm.{name}.b", np.zeros(cout))

    conv("enc1", c_in, w1)
    conv("enc2", w1, w2)
    conv("bott", w2, w2)
    conv("dec2", w2 + w2, wd)
    conv("dec1", wd + w1, wd)
    store.add("gpm.out.w", glorot_uniform(rng, wd, 1, (wd, 1)))
    store.add("gpm.out.b", np.zeros(1))


# -- building blocks -------------------------------------------------------


def _conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded 3x3 convolution as one im2col matmul: the nine shifted
    views of the zero-padded input concatenate on the channel axis, matching
    the (3, 3, c_in, c_out) kernel flattened row-major."""
    n, h, wd, cin = x.shape
    cout = w.shape[-1]
    zrow = constant(np.zeros((n, 1, wd, cin)))
    xp = concat([zrow, x, zrow], axis=1)
    zcol = constant(np.zeros((n, h + 2, 1, cin)))
    xp = concat([zcol, xp, zcol], axis=2)
    shifts = [
        narrow(xp, (slice(None), slice(di, di + h), slice(dj, dj + wd)))
        for di in range(3)
        for dj in range(3)
    ]
    columns = concat(shifts, axis=3).reshape((n * h * wd, 9 * cin))
    kernel = w.reshape((9 * cin, cout))
    return (columns @ kernel).reshape((n, h, wd, cout)) + b


def _pool2(x: Tensor) -> Tensor:
    n, h, w, c = x.shape
    return x.reshape((n, h // 2, 2, w // 2, 2, c)).mean(axis=(2, 4))


def _upsample2(x: Tensor) -> Tensor:
    n, h, w, c = x.shape
    col = x.reshape((n, h, 1, w, 1, c))
    col = concat([col, col], axis=2)
    col = concat([col, col], axis=4)
    return col.reshape((n, 2 * h, 2 * w, c))


def encode_gpm_input(
    obs: np.ndarray, raster: SceneRaster | None, config: ModelConfig
) -> np.ndarray:
    """Stack raster class channels with one Gaussian channel per observed step.

    ``obs`` is (N, t_obs, 2) in grid-cell units. Scenes without a raster get a
    uniform single-class one.
    """
    if raster is None:
        raster = uniform_raster(config.grid, config.n_classes)
    h, w = raster.height, raster.width
    n = obs.shape[0]
    channels = np.empty((n, h, w, raster.n_classes + config.t_obs))
    for i in range(n):
        channels[i, :, :, : raster.n_classes] = raster.scores
        for t in range(config.t_obs):
            channels[i, :, :, raster.n_classes + t] = rasterize_gaussian(
                obs[i, t], (h, w), config.traj_sigma
            )
    return channels


def gpm_forward_batch(
    obs: np.ndarray,
    raster: SceneRaster | None,
    params: ParamStore,
    config: ModelConfig,
    channels: np.ndarray | None = None,
) -> Tensor:
    """Goal logits of shape (N, H, W) for a batch of co-observed agents.

    ``channels`` may carry a precomputed ``encode_gpm_input`` result (the
    encoding is a pure function of the observations, so callers that revisit
    the same window can cache it).
    """
    if obs.ndim != 3 or obs.shape[1] != config.t_obs:
        raise ConfigError(f"observed batch must be (N, {config.t_obs}, 2), got {obs.shape}")
    if raster is not None and (raster.height % 4 or raster.width % 4):
        raise ConfigError(f"raster {raster.height}x{raster.width} must be divisible by 4")

    x = constant(encode_gpm_input(obs, raster, config) if channels is None else channels)
    c1 = relu(_conv3x3(x, params["gpm.enc1.w"], params["gpm.enc1.b"]))
    p1 = _pool2(c1)
    c2 = relu(_conv3x3(p1, params["gpm.enc2.w"], params["gpm.enc2.b"]))
    p2 = _pool2(c2)
    bott = relu(_conv3x3(p2, params["gpm.bott.w"], params["gpm.bott.b"]))
    d2 = relu(_conv3x3(concat([_upsample2(bott), c2], axis=3), params["gpm.dec2.w"], params["gpm.dec2.b"]))
    d1 = relu(_conv3x3(concat([_upsample2(d2), c1], axis=3), params["gpm.dec1.w"], params["gpm.dec1.b"]))
    n, h, w, cd = d1.shape
    logits = d1.reshape((n * h * w, cd)) @ params["gpm.out.w"] + params["gpm.out.b"]
    return logits.reshape((n, h, w))


def gpm_forward(
    obs: np.ndarray,
    raster: SceneRaster | None,
    params: ParamStore,
    config: ModelConfig,
    agent_id: int = 0,
) -> GoalHeatmap:
    """Single-agent convenience wrapper returning probabilities + logits."""
    logits = gpm_forward_batch(obs[None], raster, params, config)
    return heatmap_from_logits(logits.data[0], agent_id)


def heatmap_from_logits(logits: np.ndarray, agent_id: int) -> GoalHeatmap:
    probs = _sigmoid_np(logits)
    return GoalHeatmap(grid=probs, agent_id=agent_id, logits=logits.copy())


def _sigmoid_np(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# -- goal extraction --------------------------------------------------------


def softargmax_tensor(logits: Tensor, temperature: float) -> Tensor:
    """Differentiable (x, y) expectation over cell centers; graph-tracked."""
    if temperature <= 0:
        raise ConfigError(f"softargmax temperature must be positive, got {temperature}")
    h, w = logits.shape
    p = softmax(scale(logits.reshape((1, h * w)), 1.0 / temperature), axis=-1)
    cols, rows = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    x = (p * constant(cols.reshape((1, h * w)))).sum(axis=-1)
    y = (p * constant(rows.reshape((1, h * w)))).sum(axis=-1)
    return concat([x, y], axis=0)


def softargmax(heatmap: GoalHeatmap, temperature: float) -> np.ndarray:
    """(x, y) soft-argmax of the pre-sigmoid scores."""
    logits = heatmap.logits if heatmap.logits is not None else np.log(
        np.clip(heatmap.grid, 1e-12, None)
    )
    return softargmax_tensor(constant(logits), temperature).data.copy()


def ttst_sample(heatmap: GoalHeatmap, n_raw: int, k: int, seed: int) -> GoalSample:
    """Large-scale categorical sampling over cells, reduced to k goals by
    K-means with farthest-point seeding; deterministic given the seed."""
    if not n_raw >= k >= 1:
        raise ConfigError(f"need n_raw >= k >= 1, got n_raw={n_raw}, k={k}")
    mass = heatmap.grid.astype(np.float64)
    total = mass.sum()
    if total <= 0:
        raise DataError("ttst_sample: heatmap has no positive mass")
    h, w = mass.shape
    rng = np.random.default_rng(seed)
    cells = rng.choice(h * w, size=n_raw, p=(mass / total).reshape(-1))
    rows, cols = np.divmod(cells, w)
    jitter = rng.uniform(-0.5, 0.5, size=(n_raw, 2))
    points = np.stack([cols + jitter[:, 0], rows + jitter[:, 1]], axis=1)

    centers, labels = _kmeans(points, k, rng, max_iters=50)
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    weights = counts / n_raw
    order = np.lexsort((centers[:, 1], centers[:, 0], -weights))
    return GoalSample(goals=centers[order], weights=weights[order])


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator, max_iters: int):
    """Lloyd iterations with greedy farthest-point seeding.

    Ties in seeding and assignment resolve to the lowest index; empty clusters
    reseed to the point farthest from every current center.
    """
    n = len(points)
    centers = np.empty((k, 2))
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        centers[j] = points[int(np.argmax(d2))]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        dist = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(dist, axis=1)
        for j in range(k):
            mask = new_labels == j
            if mask.any():
                centers[j] = points[mask].mean(axis=0)
            else:
                far = int(np.argmax(dist.min(axis=1)))
                centers[j] = points[far]
                new_labels[far] = j
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    return centers, labels


# -- loss ---------------------------------------------------------------


def goal_target(gt_goal, grid, sigma: float) -> np.ndarray:
    """BCE target: Gaussian at the ground-truth goal, rescaled to peak 1."""
    heat = rasterize_gaussian(gt_goal, grid, sigma)
    return heat / heat.max()


def goal_loss_tensor(logits: Tensor, gt_goal, sigma: float) -> Tensor:
    target = goal_target(gt_goal, logits.shape, sigma)
    return bce_with_logits_mean(logits, constant(target))


def goal_loss(pred: GoalHeatmap, gt_goal, sigma: float) -> float:
    """Mean per-cell BCE between the predicted grid and the Gaussian target."""
    target = goal_target(gt_goal, pred.grid.shape, sigma)
    return bce_mean(pred.grid, target)


def bce_mean(pred_probs: np.ndarray, target: np.ndarray) -> float:
    p = np.clip(pred_probs, 1e-12, 1.0 - 1e-12)
    return float(-(target * np.log(p) + (1.0 - target) * np.log(1.0 - p)).mean())


# -- export ----------------------------------------------------------------


def save_heatmap_txt(path, heatmap: GoalHeatmap):
    """Raster text format with D=1."""
    h, w = heatmap.grid.shape
    body = " ".join(repr(float(v)) for v in heatmap.grid.reshape(-1))
    _write(path, f"{h} {w} 1\n{body}\n")


def load_heatmap_txt(path) -> np.ndarray:
    with open(path) as fh:
        h, w, d = (int(v) for v in fh.readline().split())
        values = np.array(fh.read().split(), dtype=np.float64)
    if d != 1 or values.size != h * w:
        raise DataError(f"{path}: not a D=1 heatmap raster")
    return values.reshape(h, w)


def save_heatmap_pgm(path, heatmap: GoalHeatmap):
    """8-bit ASCII PGM, normalized so the peak maps to 255."""
    grid = heatmap.grid
    peak = grid.max()
    levels = np.zeros_like(grid, dtype=np.int64) if peak <= 0 else np.rint(
        grid / peak * 255
    ).astype(np.int64)
    h, w = grid.shape
    rows = "\n".join(" ".join(str(v) for v in row) for row in levels)
    _write(path, f"P2\n{w} {h}\n255\n{rows}\n")


def _write(path, text):
    import os

    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)
