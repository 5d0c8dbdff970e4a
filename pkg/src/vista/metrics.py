"""Evaluation suite for multimodal multi-agent forecasts.

Displacement metrics follow the usual definitions: ADE/FDE average over
agents, samples, and (for ADE) steps; the best-of-k variants take the
per-agent minimum over samples before averaging. The binomial-weighted
expected-error curve E_K gives, for each K, the expected error of the best
trajectory among a uniformly random K-subset of the k samples; its closed
form requires the per-sample errors sorted ascending. Collision rate counts
ordered agent pairs whose predicted distance falls strictly below a
threshold calibrated so the ground truth itself has zero collisions.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass
from math import comb

import numpy as np

from .data import Scene
from .errors import DataError


@dataclass
class EvalInput:
    predictions: np.ndarray  # (N, k, T_fut, 2)
    ground_truth: np.ndarray  # (N, T_fut, 2)
    unit: str = "pixels"

    def __post_init__(self):
        self.predictions = np.asarray(self.predictions, dtype=np.float64)
        self.ground_truth = np.asarray(self.ground_truth, dtype=np.float64)
        if self.predictions.ndim != 4 or self.ground_truth.ndim != 3:
            raise DataError(
                f"predictions must be (N, k, T, 2) and ground truth (N, T, 2); got "
                f"{self.predictions.shape} and {self.ground_truth.shape}"
            )
        n, k, t, _ = self.predictions.shape
        if self.ground_truth.shape != (n, t, 2) or k < 1:
            raise DataError(
                f"inconsistent shapes: predictions {self.predictions.shape}, "
                f"ground truth {self.ground_truth.shape}"
            )
        if not (np.isfinite(self.predictions).all() and np.isfinite(self.ground_truth).all()):
            raise DataError("evaluation inputs must be finite")

    @property
    def n_agents(self):
        return self.predictions.shape[0]

    @property
    def k(self):
        return self.predictions.shape[1]

    @property
    def t_fut(self):
        return self.predictions.shape[2]

    def step_errors(self) -> np.ndarray:
        """(N, k, T) l2 distances to the ground truth."""
        diff = self.predictions - self.ground_truth[:, None, :, :]
        return np.sqrt((diff**2).sum(-1))


# -- displacement metrics ---------------------------------------------------


def ade(ev: EvalInput) -> float:
    return float(ev.step_errors().mean())


def fde(ev: EvalInput) -> float:
    return float(ev.step_errors()[:, :, -1].mean())


def per_sample_ade(ev: EvalInput) -> np.ndarray:
    """(N, k) mean-over-steps l2 error per trajectory sample."""
    return ev.step_errors().mean(axis=2)


def min_ade_k(ev: EvalInput) -> float:
    return float(per_sample_ade(ev).min(axis=1).mean())


def min_fde_k(ev: EvalInput) -> float:
    return float(ev.step_errors()[:, :, -1].min(axis=1).mean())


# -- binomial-weighted expected-error curve ----------------------------------


def expected_error_curve(sample_errors) -> np.ndarray:
    """E_K for K = 1..k from one agent's per-sample errors.

    E_K is the expected error of the best sample within a uniformly random
    K-subset: with errors sorted ascending, the j-th smallest is that minimum
    with probability C(k-j, K-1)/C(k, K). E_1 is the plain mean and E_k the
    minimum, exactly.
    """
    errors = np.sort(np.asarray(sample_errors, dtype=np.float64))
    k = len(errors)
    curve = np.empty(k)
    for bigk in range(1, k + 1):
        weights = np.zeros(k)
        for j in range(1, k - bigk + 2):
            weights[j - 1] = float(comb(k - j, bigk - 1))
        curve[bigk - 1] = np.sum(weights * errors) / comb(k, bigk)
    return curve


def auc(ev: EvalInput):
    """(auc, curve): curve[K-1] = sum over agents of E_K; auc = its sum.

    Also exposed per agent-mean as ``auc_mean`` in reports, since the summed
    form scales with the number of agents.
    """
    errors = per_sample_ade(ev)
    curve = np.zeros(ev.k)
    for i in range(ev.n_agents):
        curve += expected_error_curve(errors[i])
    return float(curve.sum()), curve


# -- collisions ---------------------------------------------------------------


def calibrate_epsilon(scenes) -> float:
    """Largest threshold with zero ground-truth collisions, minus a 1e-9 guard.

    The infimum runs over all co-observed timesteps and agent pairs of every
    scene (full windows, observation and future alike).
    """
    best = math.inf
    for scene in scenes:
        pos = scene.positions()
        n = pos.shape[0]
        if n < 2:
            continue
        diff = pos[:, None, :, :] - pos[None, :, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        iu = np.triu_indices(n, k=1)
        best = min(best, float(dist[iu].min()))
    if not math.isfinite(best):
        raise DataError("epsilon calibration needs at least one scene with two co-present agents")
    return best - 1e-9


def collision_rate(ev: EvalInput, epsilon: float, mode: str = "per-sample-mean") -> float:
    """Fraction of (ordered pair, step) events closer than ``epsilon``.

    Each joint sample j is scored as
    sum_t sum_{i != j} 1[dist < eps] / (N (N-1) T); ``per-sample-mean``
    averages over the k samples, ``best-sample`` takes their minimum.
    A strict inequality applies at the boundary.
    """
    if epsilon < 0:
        raise DataError(f"epsilon must be >= 0, got {epsilon}")
    n, k, t, _ = ev.predictions.shape
    if n < 2:
        warnings.warn("collision rate over fewer than 2 agents is defined as 0")
        return 0.0
    per_sample = np.empty(k)
    denom = n * (n - 1) * t
    offdiag = ~np.eye(n, dtype=bool)
    for j in range(k):
        traj = ev.predictions[:, j]  # (N, T, 2)
        diff = traj[:, None, :, :] - traj[None, :, :, :]
        dist = np.sqrt((diff**2).sum(-1))  # (N, N, T)
        per_sample[j] = (dist < epsilon)[offdiag].sum() / denom
    if mode == "per-sample-mean":
        return float(per_sample.mean())
    if mode == "best-sample":
        return float(per_sample.min())
    raise DataError(f"unknown collision-rate mode {mode!r}")


# -- distribution metrics ------------------------------------------------------


def kde_nll(ev: EvalInput, bandwidth_floor: float = 1e-3) -> float:
    """Gaussian KDE negative log-likelihood of the ground truth.

    Per agent and step, an isotropic kernel over the k sample positions with
    a Scott-style scalar bandwidth k^(-1/3) * std (floored) scores the true
    position; the NLL averages over steps and agents.
    """
    if ev.k < 2:
        raise DataError("kde_nll needs k >= 2 samples")
    n, k, t, _ = ev.predictions.shape
    nll = 0.0
    for i in range(n):
        for step in range(t):
            cloud = ev.predictions[i, :, step, :]  # (k, 2)
            std = math.sqrt(cloud.var(axis=0).mean())
            h = max(k ** (-1.0 / 3.0) * std, bandwidth_floor)
            d2 = ((cloud - ev.ground_truth[i, step]) ** 2).sum(-1)
            density = np.exp(-0.5 * d2 / (h * h)).mean() / (2.0 * math.pi * h * h)
            nll -= math.log(max(density, 1e-300))
    return nll / (n * t)


def miss_rate(ev: EvalInput, threshold: float) -> float:
    """Fraction of agents whose best-of-k final displacement exceeds the threshold."""
    if threshold <= 0:
        raise DataError(f"miss threshold must be positive, got {threshold}")
    final = ev.step_errors()[:, :, -1].min(axis=1)
    return float((final > threshold).mean())


# -- aggregation and reporting --------------------------------------------------


def evaluate_windows(evals, epsilon: float, miss_threshold: float = 2.0, cr_mode: str = "per-sample-mean") -> dict:
    """Aggregate per-window metrics over a dataset.

    Per-agent-mean metrics pool agents across windows; AUC (a sum over
    agents) adds up; collision rates pool (pair, step) events by weighting
    each window with its N(N-1)T count.
    """
    if not evals:
        raise DataError("no evaluation windows")
    k = evals[0].k
    agents = np.array([ev.n_agents for ev in evals], dtype=np.float64)
    weights = agents / agents.sum()

    def pooled(fn):
        return float(sum(w * fn(ev) for w, ev in zip(weights, evals)))

    auc_total = 0.0
    curve_total = np.zeros(k)
    for ev in evals:
        a, curve = auc(ev)
        auc_total += a
        curve_total += curve

    cr_w = np.array(
        [ev.n_agents * (ev.n_agents - 1) * ev.t_fut if ev.n_agents >= 2 else 0.0 for ev in evals]
    )
    if cr_w.sum() > 0:
        crs_mean = np.array(
            [collision_rate(ev, epsilon, "per-sample-mean") if w else 0.0 for ev, w in zip(evals, cr_w)]
        )
        crs_best = np.array(
            [collision_rate(ev, epsilon, "best-sample") if w else 0.0 for ev, w in zip(evals, cr_w)]
        )
        cr_mean = float((crs_mean * cr_w).sum() / cr_w.sum())
        cr_best = float((crs_best * cr_w).sum() / cr_w.sum())
    else:
        warnings.warn("no window has two co-present agents; collision rates are 0")
        cr_mean = cr_best = 0.0

    report = {
        "ade": pooled(ade),
        "fde": pooled(fde),
        "min_ade": pooled(min_ade_k),
        "min_fde": pooled(min_fde_k),
        "auc": auc_total,
        "auc_mean": auc_total / float(agents.sum()),
        "auc_curve": [float(v) for v in curve_total],
        "cr_mean": cr_mean,
        "cr_best": cr_best,
        "kde_nll": pooled(lambda e: kde_nll(e)) if k >= 2 else None,
        "miss_rate": pooled(lambda e: miss_rate(e, miss_threshold)),
        "epsilon": float(epsilon),
        "n_agents": int(agents.sum()),
        "n_scenes": len(evals),
    }
    if cr_mode == "best-sample":
        report["cr"] = report["cr_best"]
    else:
        report["cr"] = report["cr_mean"]
    return report


def save_report_json(path, report: dict):
    _atomic(path, json.dumps(report, sort_keys=True, indent=1) + "\n")


def save_report_csv(path, report: dict):
    keys = [k for k in sorted(report) if k != "auc_curve"]
    header = ",".join(keys)
    row = ",".join(repr(report[k]) if isinstance(report[k], float) else str(report[k]) for k in keys)
    curve = ",".join(repr(v) for v in report.get("auc_curve", []))
    _atomic(path, f"{header}\n{row}\nauc_curve,{curve}\n")


def _atomic(path, text):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def eval_from_scene(scene: Scene, predictions: np.ndarray, t_obs: int, unit: str = "pixels") -> EvalInput:
    gt = scene.positions()[:, t_obs:, :]
    return EvalInput(predictions=predictions, ground_truth=gt, unit=unit)
