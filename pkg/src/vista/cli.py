"""Command-line surface: synthesize, train, predict, evaluate, render.

Exit codes: 0 ok, 2 configuration, 3 checkpoint, 4 data/alignment,
5 numeric divergence. Failures print a machine-readable JSON object to
stderr; stdout carries the human summary. Every artifact-producing run
writes a manifest (command, config snapshot, seed, input digests, outputs,
timings) next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from .config import Config, format_config, load_config
from .data import (
    ScenarioSpec,
    load_raster,
    load_trajectories,
    save_raster,
    save_trajectories,
    split_leave_one_out,
    split_ratio,
    synth_generate,
)
from .errors import (
    AlignmentError,
    CheckpointError,
    ConfigError,
    DataError,
    DivergenceError,
)
from .metrics import (
    EvalInput,
    calibrate_epsilon,
    evaluate_windows,
    save_report_csv,
    save_report_json,
)
from .model import Model, init_params, stable_seed
from .params import ParamStore
from .render import render_scene_svg, render_trace_svg, write_svg
from .tpm import (
    PredictionSet,
    load_prediction_txt,
    save_prediction_txt,
    save_trace_json,
)
from .training import TrainReport, strip_train_state, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_DATA = 4
EXIT_DIVERGED = 5


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.print_config:
        print(format_config(Config()), end="")
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(exc, EXIT_CONFIG)
    except CheckpointError as exc:
        return _fail(exc, EXIT_CHECKPOINT)
    except (AlignmentError, DataError, FileNotFoundError) as exc:
        return _fail(exc, EXIT_DATA)
    except DivergenceError as exc:
        return _fail(exc, EXIT_DIVERGED)


def _fail(exc, code: int) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "code": code}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def _build_parser():
    parser = argparse.ArgumentParser(prog="vista")
    parser.add_argument(
        "--print-config", action="store_true", help="print default config and exit"
    )
    parser.set_defaults(command=None)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate synthetic scenario files")
    p.add_argument("--scenario", required=False)
    p.add_argument("--spec", help="key=value scenario spec file")
    p.add_argument("--n", type=int, default=2, help="number of agents")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--windows", type=int, default=1)
    p.add_argument("--speed", type=float, default=None)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--grid", type=int, default=None)
    p.add_argument("--frames", type=int, default=None, help="frames per window")
    p.add_argument("--randomize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train with leave-one-out or ratio folds")
    p.add_argument("--data", required=True)
    p.add_argument("--raster-dir")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--fold", default="all", help="index | all | ratio")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="multimodal prediction from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--raster-dir")
    p.add_argument("--config")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="metric suite over prediction files")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--raster-dir")
    p.add_argument("--config")
    p.add_argument("--epsilon", default="auto")
    p.add_argument("--miss-threshold", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", help="SVG figures for scenes and attention traces")
    p.add_argument("--scene", required=True, help="trajectory data path")
    p.add_argument("--pred", required=True)
    p.add_argument("--trace", nargs="*", default=[], help="trace JSON files")
    p.add_argument("--config")
    p.add_argument("--steps", default="all", help="all | comma-separated step list")
    p.add_argument("--out-svg", required=True)
    p.set_defaults(func=cmd_render)
    return parser


# -- shared helpers ----------------------------------------------------------


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("VISTA_THREADS", "1")))
    except ValueError:
        return 1


def _config_from(args) -> Config:
    cfg = Config()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    cfg.validate()
    return cfg


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_inputs(paths) -> dict:
    digests = {}
    for p in paths:
        if p is None:
            continue
        if os.path.isdir(p):
            for name in sorted(os.listdir(p)):
                full = os.path.join(p, name)
                if os.path.isfile(full):
                    digests[full] = _sha256(full)
        elif os.path.isfile(p):
            digests[p] = _sha256(p)
    return digests


def _write_manifest(out_dir, command, args, cfg, seed, inputs, outputs, t0):
    manifest = {
        "command": command,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "config": cfg.snapshot() if cfg is not None else None,
        "seed": seed,
        "threads": _threads(),
        "input_digests": _digest_inputs(inputs),
        "outputs": sorted(outputs),
        "timings": {"wall_s": time.monotonic() - t0},
    }
    path = os.path.join(out_dir, f"manifest_{command}.json")
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _load_scenes(args, cfg: Config, data_attr="data"):
    data_path = getattr(args, data_attr)
    stride = cfg.data.stride if cfg.data.stride > 0 else None
    scenes = load_trajectories(
        data_path,
        t_obs=cfg.model.t_obs,
        t_fut=cfg.model.t_fut,
        stride=stride,
        time_jitter=cfg.data.time_jitter,
        jitter_seed=cfg.train.seed,
    )
    raster_dir = getattr(args, "raster_dir", None)
    if raster_dir:
        cache = {}
        for scene in scenes:
            if scene.scene_id not in cache:
                path = os.path.join(raster_dir, f"{scene.scene_id}.txt")
                cache[scene.scene_id] = load_raster(path) if os.path.isfile(path) else None
            scene.raster = cache[scene.scene_id]
    if not scenes:
        raise DataError(f"{data_path}: no usable windows")
    return scenes


def _pred_filename(scene) -> str:
    return f"pred_{scene.scene_id}__w{scene.window_index:03d}.txt"


# -- commands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    t0 = time.monotonic()
    if args.spec:
        with open(args.spec) as fh:
            spec = ScenarioSpec.from_text(fh.read())
    else:
        if not args.scenario:
            raise ConfigError("synth needs --scenario or --spec")
        spec = ScenarioSpec(scenario=args.scenario)
    if args.scenario:
        spec.scenario = args.scenario
    spec.n_agents = args.n if args.n is not None else spec.n_agents
    spec.seed = args.seed
    spec.n_windows = args.windows
    if args.speed is not None:
        spec.speed = args.speed
    if args.margin is not None:
        spec.margin = args.margin
    if args.grid is not None:
        spec.grid = args.grid
    if args.frames is not None:
        spec.n_frames = args.frames
    if args.randomize:
        spec.randomize = True

    scenes = synth_generate(spec)
    os.makedirs(args.out, exist_ok=True)
    raster_dir = os.path.join(args.out, "rasters")
    os.makedirs(raster_dir, exist_ok=True)
    outputs = []
    for scene in scenes:
        path = os.path.join(args.out, f"{scene.scene_id}__w{scene.window_index:03d}.txt")
        save_trajectories(path, scene)
        outputs.append(path)
    raster_path = os.path.join(raster_dir, f"{spec.scenario}.txt")
    save_raster(raster_path, scenes[0].raster)
    outputs.append(raster_path)
    _write_manifest(args.out, "synth", args, None, spec.seed, [args.spec], outputs, t0)
    print(f"wrote {len(scenes)} windows of '{spec.scenario}' to {args.out}")
    return EXIT_OK


def _fold_sets(scenes, fold: str, cfg: Config):
    if fold == "all":
        return split_leave_one_out(scenes)
    if fold == "ratio":
        train_set, test_set = split_ratio(scenes, 0.8, seed=cfg.train.seed)
        return [(train_set, test_set)]
    try:
        index = int(fold)
    except ValueError:
        raise ConfigError(f"--fold must be an index, 'all', or 'ratio', got {fold!r}") from None
    folds = split_leave_one_out(scenes)
    if not 0 <= index < len(folds):
        raise ConfigError(f"fold index {index} out of range 0..{len(folds) - 1}")
    return [folds[index]]


def cmd_train(args) -> int:
    t0 = time.monotonic()
    cfg = _config_from(args)
    if args.seed is not None:
        cfg.train.seed = args.seed
    scenes = _load_scenes(args, cfg)
    folds = _fold_sets(scenes, args.fold, cfg)
    os.makedirs(args.out, exist_ok=True)

    outputs = []
    for i, (train_scenes, _test) in enumerate(folds):
        if len(train_scenes) < 2:
            raise DataError(f"fold {i}: needs >= 2 training windows for a validation split")
        fit_scenes, val_scenes = split_ratio(
            train_scenes, 1.0 - cfg.data.val_ratio, seed=cfg.train.seed
        )
        state_path = os.path.join(args.out, f"state_fold{i}.bin")
        best, report = train(fit_scenes, val_scenes, cfg, state_out=state_path)
        ckpt = os.path.join(args.out, f"checkpoint_fold{i}.bin")
        best.save(ckpt)
        report_path = os.path.join(args.out, f"report_fold{i}.csv")
        report.to_csv(report_path)
        outputs.extend([ckpt, report_path, state_path])
        print(f"fold {i}: {report.summary()}")
    _write_manifest(
        args.out, "train", args, cfg, cfg.train.seed,
        [args.data, getattr(args, "raster_dir", None), getattr(args, "config", None)],
        outputs, t0,
    )
    print(f"{len(folds)} fold(s) trained; outputs in {args.out}")
    return EXIT_OK


def _load_checkpoint(path, cfg: Config) -> ParamStore:
    params = strip_train_state(ParamStore.load(path))
    expected = init_params(cfg.model, seed=0)
    got = {n: params[n].shape for n in params.names()}
    want = {n: expected[n].shape for n in expected.names()}
    if got != want:
        missing = sorted(set(want) - set(got))
        extra = sorted(set(got) - set(want))
        raise CheckpointError(
            f"{path}: parameters do not match the model config "
            f"(missing {missing[:3]}, unexpected {extra[:3]})"
        )
    return params


def cmd_predict(args) -> int:
    t0 = time.monotonic()
    cfg = _config_from(args)
    params = _load_checkpoint(args.checkpoint, cfg)
    model = Model(config=cfg.model, params=params)
    scenes = _load_scenes(args, cfg)
    os.makedirs(args.out, exist_ok=True)

    outputs = []
    for scene in scenes:
        pred = model.predict(scene, k=args.k, seed=args.seed, capture_trace=args.trace)
        path = os.path.join(args.out, _pred_filename(scene))
        save_prediction_txt(path, scene, pred, cfg.model.t_obs)
        outputs.append(path)
        if args.trace:
            for j, trace in enumerate(pred.traces):
                tpath = os.path.join(
                    args.out,
                    f"trace_{scene.scene_id}__w{scene.window_index:03d}_s{j:02d}.json",
                )
                save_trace_json(tpath, trace, scene.key(), j, cfg.model.t_obs)
                outputs.append(tpath)
    _write_manifest(
        args.out, "predict", args, cfg, args.seed,
        [args.data, args.checkpoint, getattr(args, "raster_dir", None), getattr(args, "config", None)],
        outputs, t0,
    )
    print(f"predicted {len(scenes)} windows (k={args.k}) into {args.out}")
    return EXIT_OK


def _eval_inputs_from_files(scenes, pred_dir, t_obs):
    evals = []
    k_global = None
    for scene in scenes:
        path = os.path.join(pred_dir, _pred_filename(scene))
        if not os.path.isfile(path):
            raise AlignmentError(
                f"missing prediction file for {scene.key()}: {path}",
                first_mismatch=scene.key(),
            )
        records = load_prediction_txt(path)
        samples = sorted({j for j, _, _ in records})
        k = len(samples)
        if samples != list(range(k)) or (k_global not in (None, k)):
            raise AlignmentError(
                f"{path}: inconsistent sample ids", first_mismatch=scene.key()
            )
        k_global = k
        frames = [int(f) for f in scene.frame_ids[t_obs:]]
        agents = scene.agent_ids
        expected = {(j, f, a) for j in range(k) for f in frames for a in agents}
        got = set(records)
        if expected != got:
            diff = sorted(expected.symmetric_difference(got))
            raise AlignmentError(
                f"{path}: prediction/ground-truth mismatch at (sample, frame, agent) = {diff[0]}",
                first_mismatch=diff[0],
            )
        n, t = len(agents), len(frames)
        traj = np.empty((n, k, t, 2))
        for i, a in enumerate(agents):
            for j in range(k):
                for s, f in enumerate(frames):
                    traj[i, j, s] = records[(j, f, a)]
        unit = "meters" if scenes[0].unit_scale else "pixels"
        evals.append(
            EvalInput(
                predictions=traj,
                ground_truth=scene.positions()[:, t_obs:, :],
                unit=unit,
            )
        )
    return evals


def cmd_evaluate(args) -> int:
    t0 = time.monotonic()
    cfg = _config_from(args)
    scenes = _load_scenes(args, cfg, data_attr="gt")
    evals = _eval_inputs_from_files(scenes, args.pred, cfg.model.t_obs)
    if args.epsilon == "auto":
        epsilon = calibrate_epsilon(scenes)
    else:
        try:
            epsilon = float(args.epsilon)
        except ValueError:
            raise ConfigError(f"--epsilon must be 'auto' or a number, got {args.epsilon!r}") from None
    miss = args.miss_threshold if args.miss_threshold is not None else cfg.eval.miss_threshold
    report = evaluate_windows(evals, epsilon, miss_threshold=miss, cr_mode=cfg.eval.cr_mode)

    os.makedirs(args.out, exist_ok=True)
    json_path = os.path.join(args.out, "metrics.json")
    csv_path = os.path.join(args.out, "metrics.csv")
    save_report_json(json_path, report)
    save_report_csv(csv_path, report)
    _write_manifest(
        args.out, "evaluate", args, cfg, None,
        [args.pred, args.gt, getattr(args, "config", None)], [json_path, csv_path], t0,
    )
    print(
        f"ADE {report['ade']:.4f}  FDE {report['fde']:.4f}  "
        f"minADE {report['min_ade']:.4f}  minFDE {report['min_fde']:.4f}  "
        f"AUC {report['auc']:.4f}  CR {report['cr']:.4%} (eps {report['epsilon']:.4g})"
    )
    return EXIT_OK


def cmd_render(args) -> int:
    t0 = time.monotonic()
    cfg = _config_from(args)
    scenes = _load_scenes(args, cfg, data_attr="scene")
    os.makedirs(args.out_svg, exist_ok=True)
    outputs = []
    for scene in scenes:
        path = os.path.join(args.pred, _pred_filename(scene))
        if not os.path.isfile(path):
            continue
        records = load_prediction_txt(path)
        k = len({j for j, _, _ in records})
        frames = [int(f) for f in scene.frame_ids[cfg.model.t_obs :]]
        traj = np.empty((scene.n_agents, k, len(frames), 2))
        for i, a in enumerate(scene.agent_ids):
            for j in range(k):
                for s, f in enumerate(frames):
                    traj[i, j, s] = records[(j, f, a)]
        pred = PredictionSet(
            agent_ids=list(scene.agent_ids),
            trajectories=traj,
            goal_indices=np.tile(np.arange(k), (scene.n_agents, 1)),
        )
        out = os.path.join(args.out_svg, f"scene_{scene.scene_id}__w{scene.window_index:03d}.svg")
        write_svg(out, render_scene_svg(scene, pred, cfg.model.t_obs))
        outputs.append(out)

    for trace_path in args.trace:
        with open(trace_path) as fh:
            obj = json.load(fh)
        steps = obj["steps"]
        if args.steps != "all":
            wanted = {int(v) for v in args.steps.split(",")}
            steps = [s for s in steps if s["t"] in wanted]
        stem = os.path.splitext(os.path.basename(trace_path))[0]
        for entry in steps:
            out = os.path.join(args.out_svg, f"{stem}_t{entry['t']:02d}.svg")
            write_svg(
                out,
                render_trace_svg(np.array(entry["matrix"]), obj["agent_ids"], entry["t"]),
            )
            outputs.append(out)
    _write_manifest(
        args.out_svg, "render", args, cfg, None,
        [args.scene, args.pred, *args.trace], outputs, t0,
    )
    print(f"rendered {len(outputs)} SVG file(s) into {args.out_svg}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
