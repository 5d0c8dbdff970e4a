"""Recursive trajectory decoding: hybrid positional encoding, goal-trajectory
cross-attention fusion, social attention across agents, and displacement
decoding with attention-trace capture.

At every prediction step the full sequence so far (observations plus own
predictions) is re-embedded, so gradients flow through the model's own
feedback. Agents are processed in a canonical order (sorted by agent_id)
internally and restored to input order on output, which makes permutation
equivariance exact at the bit level. When ``anchor_coordinates`` is on,
positions and goals are embedded relative to the mean of the agents' last
observed positions, making predictions translation-equivariant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .attention import init_mha_params, multi_head_attention
from .config import ModelConfig
from .data import Scene
from .errors import ConfigError, DataError, DivergenceError
from .params import ParamStore, glorot_uniform
from .tensor import (
    Tensor,
    as_tensor,
    concat,
    constant,
    layer_norm,
    matmul,
    narrow,
    relu,
    sinusoidal_table,
)


@dataclass
class TokenSequence:
    tokens: Tensor  # (L, d)
    time_indices: np.ndarray  # (L,) strictly increasing


@dataclass
class AttentionTrace:
    agent_ids: list
    steps: list  # one (N, N) head-averaged row-stochastic matrix per step

    def to_json_obj(self, scene_id: str, sample_index: int, t_obs: int) -> dict:
        return {
            "scene_id": scene_id,
            "sample_index": sample_index,
            "agent_ids": [int(a) for a in self.agent_ids],
            "steps": [
                {"t": t_obs + 1 + i, "matrix": m.tolist()}
                for i, m in enumerate(self.steps)
            ],
        }


@dataclass
class PredictionSet:
    agent_ids: list
    trajectories: np.ndarray  # (N, k, T_fut, 2) in scene units
    goal_indices: np.ndarray  # (N, k) source goal index per trajectory
    traces: list | None = None  # AttentionTrace per sample index

    @property
    def k(self):
        return self.trajectories.shape[1]


@dataclass
class RolloutResult:
    trajectories: np.ndarray  # (N, T_fut, 2), input agent order
    trace: AttentionTrace | None
    step_tensors: list  # (N, 2) tensors per step, canonical agent order
    canonical_order: np.ndarray  # input index -> canonical row


# -- parameters -----------------------------------------------------------


def init_tpm_params(store: ParamStore, config: ModelConfig, rng: np.random.Generator):
    d = config.d_model
    store.add("tpm.embed.w", glorot_uniform(rng, 2, d, (2, d)))
    if config.embed_bias:
        store.add("tpm.embed.b", np.zeros(d))
    if config.use_learnable_pe:
        store.add("tpm.pe.learn", np.zeros((config.t_total + 1, d)))
    for layer in range(config.temporal_depth):
        init_mha_params(store, f"tpm.fusion.self{layer}", d, rng)
    if config.use_goal:
        init_mha_params(store, "tpm.fusion.cross", d, rng)
        store.add("tpm.fusion.norm.gamma", np.ones(d))
        store.add("tpm.fusion.norm.beta", np.zeros(d))
    if config.use_social:
        for layer in range(config.social_depth):
            init_mha_params(store, f"tpm.social{layer}", d, rng)
    store.add("tpm.dec.w1", glorot_uniform(rng, d, d, (d, d)))
    store.add("tpm.dec.b1", np.zeros(d))
    store.add("tpm.dec.w2", glorot_uniform(rng, d, 2, (d, 2)))
    store.add("tpm.dec.b2", np.zeros(2))


# -- building blocks -------------------------------------------------------


def embed_positions(positions, params: ParamStore, config: ModelConfig) -> Tensor:
    """Linear map of (..., 2) coordinates into the token space."""
    tokens = matmul(as_tensor(positions), params["tpm.embed.w"])
    if config.embed_bias:
        tokens = tokens + params["tpm.embed.b"]
    return tokens


def positional_terms(time_indices, params: ParamStore, config: ModelConfig) -> np.ndarray | Tensor:
    idx = np.asarray(time_indices, dtype=np.int64)
    if idx.min() < 0 or idx.max() > config.t_total:
        raise ConfigError(
            f"time index out of positional-table range 0..{config.t_total}: {idx}"
        )
    term = None
    if config.use_fixed_pe:
        term = constant(sinusoidal_table(config.t_total + 1, config.d_model)[idx])
    if config.use_learnable_pe:
        learned = narrow(params["tpm.pe.learn"], (idx,))
        term = learned if term is None else term + learned
    return term


def hybrid_positional_encoding(
    seq: TokenSequence, params: ParamStore, config: ModelConfig
) -> TokenSequence:
    """token_t + sinusoidal(t) + learnable(t); both terms are optional toggles."""
    term = positional_terms(seq.time_indices, params, config)
    tokens = seq.tokens if term is None else seq.tokens + term
    return TokenSequence(tokens=tokens, time_indices=seq.time_indices.copy())


def _apply_hpe_batch(tokens: Tensor, time_indices, params, config) -> Tensor:
    """HPE over (N, L, d): the same per-index terms broadcast across agents."""
    term = positional_terms(time_indices, params, config)
    return tokens if term is None else tokens + term


def goal_trajectory_fusion(
    history: TokenSequence, goal_token, params: ParamStore, config: ModelConfig
) -> Tensor:
    """Temporal self-attention, cross-attention against the goal token, and a
    normalized residual; returns the fused feature at the last time step."""
    tokens = history.tokens.reshape((1,) + history.tokens.shape)
    goal = as_tensor(goal_token).reshape((1, 1, config.d_model))
    fused = _fusion_batch(tokens, goal, params, config)
    return fused.reshape((config.d_model,))


def _fusion_batch(tokens: Tensor, goal_tokens: Tensor | None, params, config) -> Tensor:
    """Fused per-agent features: tokens (N, L, d) -> (N, d)."""
    n, length, d = tokens.shape
    seq = tokens
    for layer in range(config.temporal_depth - 1):
        seq, _ = multi_head_attention(
            seq, seq, seq, config.n_heads, params, f"tpm.fusion.self{layer}"
        )
    # Only the last time step feeds the decoder, so the outermost layer
    # queries just that row.
    query = narrow(seq, (slice(None), slice(length - 1, length)))
    t_last, _ = multi_head_attention(
        query, seq, seq, config.n_heads, params,
        f"tpm.fusion.self{config.temporal_depth - 1}",
    )
    if not config.use_goal or goal_tokens is None:
        return t_last.reshape((n, d))
    z_last, _ = multi_head_attention(
        t_last, goal_tokens, goal_tokens, config.n_heads, params, "tpm.fusion.cross"
    )
    normed = layer_norm(z_last) * params["tpm.fusion.norm.gamma"] + params["tpm.fusion.norm.beta"]
    return (normed + t_last).reshape((n, d))


def social_attention(features, params: ParamStore, config: ModelConfig):
    """Multi-head self-attention across agent tokens.

    Returns the updated (N, d) features and the head-averaged (N, N)
    attention matrix of the last social layer.
    """
    feats = as_tensor(features)
    n = feats.shape[0]
    if not config.use_social:
        return feats, np.eye(n)
    attn = None
    for layer in range(config.social_depth):
        feats, heads = multi_head_attention(
            feats, feats, feats, config.n_heads, params, f"tpm.social{layer}"
        )
        attn = heads.mean(axis=0)
    return feats, attn


def decode_step(feature, last_pos, params: ParamStore):
    """next_pos = last_pos + MLP(feature); MLP is d -> d -> 2 with relu."""
    f = as_tensor(feature)
    squeeze = f.ndim == 1
    if squeeze:
        f = f.reshape((1, f.shape[0]))
    hidden = relu(f @ params["tpm.dec.w1"] + params["tpm.dec.b1"])
    delta = hidden @ params["tpm.dec.w2"] + params["tpm.dec.b2"]
    out = as_tensor(last_pos).reshape(delta.shape) + delta
    return out.reshape((2,)) if squeeze else out


# -- rollout ----------------------------------------------------------------


def _canonical_order(agent_ids):
    return np.argsort(np.asarray(agent_ids, dtype=np.int64), kind="stable")


def shared_anchor(obs: np.ndarray) -> np.ndarray:
    """Mean of the agents' last observed positions, in canonical row order."""
    return obs[:, -1, :].mean(axis=0)


def rollout(
    scene: Scene,
    goals,
    params: ParamStore,
    config: ModelConfig,
    capture_trace: bool = False,
    n_steps: int | None = None,
) -> RolloutResult:
    """Recursive decoding of T_fut steps for all agents of one scene window.

    ``goals`` is one (x, y) per agent in scene units (ignored when the model
    is configured without goal conditioning). The observation window is the
    first t_obs frames of the scene. ``n_steps`` truncates the recursion
    (default T_fut); because step t+1 re-encodes exactly the observations
    plus the predictions of steps <= t, a truncated rollout is a bit-exact
    prefix of the full one.
    """
    obs_all = scene.positions()
    if obs_all.shape[1] < config.t_obs:
        raise DataError(
            f"scene {scene.key()}: {obs_all.shape[1]} frames < t_obs {config.t_obs}"
        )
    agent_ids = np.asarray(scene.agent_ids)
    obs = obs_all[:, : config.t_obs, :]
    goals_arr = None
    if config.use_goal:
        if goals is None:
            raise DataError("rollout needs one goal per agent when goal conditioning is on")
        goals_arr = np.asarray(goals, dtype=np.float64)
        if goals_arr.shape != (len(agent_ids), 2):
            raise DataError(f"goals must be (N, 2), got {goals_arr.shape}")
        if not np.isfinite(goals_arr).all():
            raise DataError("goals must be finite")

    order = _canonical_order(agent_ids)
    inverse = np.argsort(order)
    obs_c = obs[order]
    goals_c = goals_arr[order] if goals_arr is not None else None

    n = len(agent_ids)
    anchor = shared_anchor(obs_c) if config.anchor_coordinates else np.zeros(2)
    anchor_c = constant(anchor)

    goal_tokens = None
    if goals_c is not None:
        goal_tok = embed_positions(constant(goals_c - anchor), params, config)
        goal_tok = goal_tok.reshape((n, 1, config.d_model))
        goal_tokens = _apply_hpe_batch(
            goal_tok, np.array([config.t_total]), params, config
        )

    parts = [constant(obs_c)]
    step_tensors = []
    trace_steps = [] if capture_trace else None
    for step in range(1, (n_steps or config.t_fut) + 1):
        seq = parts[0] if len(parts) == 1 else concat(parts, axis=1)
        length = config.t_obs + step - 1
        rel = seq - anchor_c
        tokens = embed_positions(rel, params, config)
        tokens = _apply_hpe_batch(tokens, np.arange(length), params, config)
        fused = _fusion_batch(tokens, goal_tokens, params, config)
        social, attn = social_attention(fused, params, config)
        last = narrow(seq, (slice(None), length - 1))
        nxt = decode_step(social, last, params)
        if not np.isfinite(nxt.data).all():
            raise DivergenceError(
                f"non-finite prediction at step {step} of scene {scene.key()}",
                step=step,
            )
        parts.append(nxt.reshape((n, 1, 2)))
        step_tensors.append(nxt)
        if capture_trace:
            trace_steps.append(np.asarray(attn)[inverse][:, inverse].copy())

    trajectories = np.stack([t.data for t in step_tensors], axis=1)[inverse]
    trace = None
    if capture_trace:
        trace = AttentionTrace(agent_ids=list(agent_ids), steps=trace_steps)
    return RolloutResult(
        trajectories=trajectories,
        trace=trace,
        step_tensors=step_tensors,
        canonical_order=order,
    )


@dataclass
class BatchRolloutResult:
    trajectories: np.ndarray  # (B, N, T_fut, 2), input agent order
    step_tensors: list  # (B, N, 2) tensors per step


def rollout_batch(
    obs: np.ndarray,
    goals,
    params: ParamStore,
    config: ModelConfig,
) -> BatchRolloutResult:
    """Recursive decoding over a stack of same-shape windows.

    ``obs`` is (B, N, t_obs, 2); ``goals`` is (B, N, 2) or None. Social
    attention runs within each window (the window axis is a batch dim for
    the attention blocks). Agent order is kept as given; the per-scene
    ``rollout`` remains the canonical-order, trace-capturing path.
    """
    b, n, t_obs, _ = obs.shape
    if t_obs != config.t_obs:
        raise DataError(f"batch obs must have t_obs={config.t_obs}, got {t_obs}")
    if config.anchor_coordinates:
        anchor = obs[:, :, -1, :].mean(axis=1).reshape(b, 1, 1, 2)
    else:
        anchor = np.zeros((b, 1, 1, 2))
    anchor_c = constant(anchor)

    goal_tokens = None
    if config.use_goal:
        goals_arr = np.asarray(goals, dtype=np.float64).reshape(b, n, 2)
        rel_goals = (goals_arr - anchor.reshape(b, 1, 2)).reshape(b * n, 1, 2)
        goal_tok = embed_positions(constant(rel_goals), params, config)
        goal_tokens = _apply_hpe_batch(
            goal_tok, np.array([config.t_total]), params, config
        )

    parts = [constant(obs)]
    step_tensors = []
    for step in range(1, config.t_fut + 1):
        seq = parts[0] if len(parts) == 1 else concat(parts, axis=2)
        length = config.t_obs + step - 1
        rel = seq - anchor_c
        tokens = embed_positions(rel, params, config).reshape((b * n, length, config.d_model))
        tokens = _apply_hpe_batch(tokens, np.arange(length), params, config)
        fused = _fusion_batch(tokens, goal_tokens, params, config)  # (b*n, d)
        feats = fused.reshape((b, n, config.d_model))
        if config.use_social:
            for layer in range(config.social_depth):
                feats, _ = multi_head_attention(
                    feats, feats, feats, config.n_heads, params, f"tpm.social{layer}"
                )
        last = narrow(seq, (slice(None), slice(None), length - 1))
        delta_in = feats.reshape((b * n, config.d_model))
        hidden = relu(delta_in @ params["tpm.dec.w1"] + params["tpm.dec.b1"])
        delta = hidden @ params["tpm.dec.w2"] + params["tpm.dec.b2"]
        nxt = last + delta.reshape((b, n, 2))
        if not np.isfinite(nxt.data).all():
            raise DivergenceError(f"non-finite prediction at step {step}", step=step)
        parts.append(nxt.reshape((b, n, 1, 2)))
        step_tensors.append(nxt)

    trajectories = np.stack([t.data for t in step_tensors], axis=2)
    return BatchRolloutResult(trajectories=trajectories, step_tensors=step_tensors)


def predict_multimodal(
    scene: Scene,
    goal_samples,
    params: ParamStore,
    config: ModelConfig,
    capture_trace: bool = False,
    k: int | None = None,
) -> PredictionSet:
    """One joint rollout per sample index: sample j pairs the j-th goal of
    every agent, giving k rollouts total (not k^N)."""
    n = scene.n_agents
    if config.use_goal:
        ks = {gs.k for gs in goal_samples}
        if len(goal_samples) != n or len(ks) != 1:
            raise DataError(f"need one GoalSample with a common k per agent, got k's {ks}")
        k = ks.pop()
    else:
        k = k or 1
    trajs = np.empty((n, k, config.t_fut, 2))
    traces = [] if capture_trace else None
    for j in range(k):
        goals = (
            np.stack([gs.goals[j] for gs in goal_samples], axis=0)
            if config.use_goal
            else None
        )
        result = rollout(scene, goals, params, config, capture_trace=capture_trace)
        trajs[:, j] = result.trajectories
        if capture_trace:
            traces.append(result.trace)
    goal_indices = np.tile(np.arange(k), (n, 1))
    return PredictionSet(
        agent_ids=list(scene.agent_ids),
        trajectories=trajs,
        goal_indices=goal_indices,
        traces=traces,
    )


# -- export ----------------------------------------------------------------


def save_trace_json(path, trace: AttentionTrace, scene_id: str, sample_index: int, t_obs: int):
    obj = trace.to_json_obj(scene_id, sample_index, t_obs)
    _write(path, json.dumps(obj, sort_keys=True, indent=1) + "\n")


def save_prediction_txt(path, scene: Scene, pred: PredictionSet, t_obs: int):
    """Trajectory text format extended with a sample_id column."""
    future_frames = scene.frame_ids[t_obs:]
    lines = []
    for j in range(pred.k):
        for i, agent in enumerate(pred.agent_ids):
            for f, (x, y) in zip(future_frames, pred.trajectories[i, j]):
                lines.append(f"{j} {int(f)} {int(agent)} {float(x)!r} {float(y)!r}")
    _write(path, "\n".join(lines) + "\n")


def load_prediction_txt(path):
    """Returns {(sample_id, frame_id, agent_id): (x, y)} plus sorted key sets."""
    records = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise DataError(f"{path}:{lineno}: expected 'sample frame agent x y'")
            j, f, a = int(parts[0]), int(parts[1]), int(parts[2])
            records[(j, f, a)] = (float(parts[3]), float(parts[4]))
    return records


def _write(path, text):
    import os

    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)
