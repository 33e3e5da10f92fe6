"""Command-line entry point: datagen / train / rollout / eval / mpc / inspect.

Every subcommand is deterministic given (config, seed, inputs); artifacts embed
the config snapshot that produced them. Exit codes: 0 ok, 2 config error,
3 diverged, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import control, learn, net, oracle, sim
from .config import ConfigError, RunConfig, load_config, snapshot

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


def _apply_thread_env() -> None:
    # torch intra-op threading loses to dispatch overhead at these tensor
    # sizes, so default to one torch thread; FLUIDGN_THREADS overrides both
    # torch and numba pools.
    threads = os.environ.get("FLUIDGN_THREADS")
    import torch

    torch.set_num_threads(int(threads) if threads else 1)
    if threads:
        import numba

        numba.set_num_threads(max(int(threads), 1))


def _load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return load_config(path)


def cmd_datagen(args) -> int:
    cfg = _load_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(done, total):
        print(f"datagen: episode {done}/{total}", flush=True)

    manifest = oracle.generate_dataset(
        cfg.datagen, cfg.pbd, cfg.graph, cfg.seed, out,
        config_snapshot=snapshot(cfg), progress=progress,
    )
    cal = manifest["calibration"]
    near = min(
        range(len(cal["r_l_grid"])), key=lambda i: abs(cal["r_l_grid"][i] - cfg.graph.r_l)
    )
    print(
        f"datagen: {len(manifest['episodes'])} episodes -> {out}; "
        f"mean liquid degree at r_l={cal['r_l_grid'][near]}: {cal['mean_degree'][near]:.1f}"
    )
    return EXIT_OK


def _write_metrics(path, rows) -> None:
    new = not Path(path).exists()
    with open(path, "a") as fh:
        if new:
            fh.write("step,loss,lr\n")
        for step, loss, lr in rows:
            fh.write(f"{step},{loss:.8e},{lr:.8e}\n")


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    episodes = sim.load_dataset(args.data, split=args.split)
    if not episodes:
        raise FileNotFoundError(f"no '{args.split}' episodes in {args.data}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.fgn"
    metrics_path = out / "metrics.csv"

    dims = net.FeatureDims.from_graph_config(cfg.graph)
    if args.resume:
        model = sim.load_model(args.resume)
        params, norm = model.params, model.norm
        adam = learn.AdamState.for_params(params)
        _, _, tensors = net.load_checkpoint(args.resume)
        adam.load_tensors({k[len("adam."):]: v for k, v in tensors.items()
                           if k.startswith("adam.")})
        adam.step = int(model.config.get("step", 0))
        print(f"train: resumed at step {adam.step}")
    else:
        params = net.ModelParams(cfg.net, dims, seed=cfg.seed)
        norm = learn.build_norm_stats(episodes, cfg.graph, cfg.train)
        adam = learn.AdamState.for_params(params)
        if metrics_path.exists():
            metrics_path.unlink()

    total = args.steps if args.steps is not None else cfg.train.max_steps
    model = sim.Model(params=params, norm=norm, graph_cfg=cfg.graph,
                      config={"train": cfg.train.to_dict(), "run_seed": cfg.seed})

    def save(step):
        sim.save_model(ckpt_path, model, adam_tensors=adam.state_tensors(),
                       extra={"step": step})

    chunk = max(min(args.save_every, total, 500), 1)
    last_saved = adam.step
    try:
        while adam.step < total:
            todo = min(chunk, total - adam.step)
            _, rows = learn.train_loop(
                episodes, params, norm, cfg.graph, cfg.train, steps=todo, adam=adam
            )
            _write_metrics(metrics_path, rows)
            if adam.step - last_saved >= args.save_every or adam.step >= total:
                save(adam.step)
                last_saved = adam.step
            print(f"train: step {adam.step}/{total} loss {rows[-1][1]:.5f}", flush=True)
    except learn.TrainingDiverged:
        save(adam.step)
        print(f"train: diverged at step {adam.step}; last good checkpoint saved", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"train: finished at step {adam.step} -> {ckpt_path}")
    return EXIT_OK


def _episode_rollout(model, episode):
    controls = sim.ControlInput.from_episode(episode)
    return sim.rollout(
        model,
        episode.positions[: 6],
        controls,
        episode.kinds,
        episode.meshes,
        episode.positions.shape[0],
        bvhs=episode.bvhs,
        meta={"dt": episode.meta.get("dt", 1.0), "scenario": episode.meta.get("scenario")},
    )


def _check_radii(model, manifest_path) -> None:
    manifest = sim.load_manifest(manifest_path)
    data_cfg = manifest.get("config", {}).get("graph")
    if data_cfg and (
        abs(data_cfg["r_l"] - model.graph_cfg.r_l) > 1e-12
        or abs(data_cfg["r_ol"] - model.graph_cfg.r_ol) > 1e-12
    ):
        print(
            "warning: checkpoint connectivity radii differ from dataset metadata",
            file=sys.stderr,
        )


def cmd_rollout(args) -> int:
    model = sim.load_model(args.checkpoint)
    _check_radii(model, args.data)
    episodes = sim.load_dataset(args.data, split=args.split)[: args.episodes]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, ep in enumerate(episodes):
        traj = _episode_rollout(model, ep)
        sim.save_trajectory(out / f"rollout_{i:03d}.fltj", traj)
        print(f"rollout: episode {i} status {traj.meta['status']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = sim.load_model(args.checkpoint)
    _check_radii(model, args.data)
    episodes = sim.load_dataset(args.data, split=args.split)[: args.episodes]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    values = []
    for i, ep in enumerate(episodes):
        pred = _episode_rollout(model, ep)
        gt = ep.to_trajectory()
        status = pred.meta["status"]
        if pred.num_frames == gt.num_frames:
            value = sim.trajectory_chamfer(pred, gt)
            values.append(value)
            rows.append((i, value, status))
        else:
            rows.append((i, float("nan"), status))
        if args.curves:
            curve = sim.frame_chamfer_curve(pred, gt)
            with open(out / f"curve_{i:03d}.csv", "w") as fh:
                fh.write("frame,chamfer\n")
                for k, v in enumerate(curve):
                    fh.write(f"{k},{v:.8e}\n")
    with open(out / "chamfer.csv", "w") as fh:
        fh.write("episode,chamfer,status\n")
        for i, value, status in rows:
            fh.write(f"{i},{value:.8e},{status}\n")
        if values:
            fh.write(f"aggregate,{np.mean(values):.8e},+/-{np.std(values):.8e}\n")
    if values:
        print(f"eval: mean chamfer {np.mean(values):.5f} +/- {np.std(values):.5f} "
              f"over {len(values)} episodes")
    else:
        print("eval: no complete rollouts", file=sys.stderr)
    return EXIT_OK


def cmd_mpc(args) -> int:
    cfg = _load_run_config(args.config)
    if args.fill_target is not None:
        cfg.mpc.fill_target = args.fill_target
    if args.horizon is not None:
        cfg.mpc.horizon = args.horizon
    seed = args.seed if args.seed is not None else cfg.mpc.seed
    model = sim.load_model(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    scene, containers = control.build_pour_scene(model, cfg.pbd, seed=seed)
    rng = np.random.default_rng(seed)
    result = control.mpc_optimize(scene, cfg.mpc, rng)

    with open(out / "controls.csv", "w") as fh:
        fh.write("step,angular_accel,angle\n")
        for k, (u, th) in enumerate(zip(result.controls, result.angles)):
            fh.write(f"{k},{u:.8e},{th:.8e}\n")
    frames = result.positions_log.shape[0]
    thetas = np.concatenate([[0.0], result.theta_log])[:frames]
    translations, quats = scene.pose_arrays(thetas)
    traj = sim.Trajectory(
        result.positions_log, translations, quats, scene.kinds,
        {"dt": cfg.pbd.dt, "scenario": "mpc_pour", "fill_target": cfg.mpc.fill_target,
         "achieved_fill": result.achieved_fill, "restarts_used": result.restarts_used},
    )
    sim.save_trajectory(out / "mpc_rollout.fltj", traj)
    summary = {
        "fill_target": cfg.mpc.fill_target,
        "achieved_fill": result.achieved_fill,
        "restarts_used": result.restarts_used,
        "steps": int(result.controls.shape[0]),
        "config": snapshot(cfg),
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    print(f"mpc: target {cfg.mpc.fill_target:.2f} achieved {result.achieved_fill:.2f} "
          f"(restarts {result.restarts_used})")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == net.CHECKPOINT_MAGIC:
        config, tensors = net.read_tensor_file(path)
        total = sum(int(np.prod(t.shape)) for t in tensors.values())
        print(f"{path}: checkpoint container, {len(tensors)} tensors, {total} values")
        print(json.dumps({k: v for k, v in config.items() if k != "dims"}, indent=1,
                         sort_keys=True))
    elif magic == sim.TRAJECTORY_MAGIC:
        traj = sim.load_trajectory(path)
        print(f"{path}: trajectory, T={traj.num_frames} N={traj.num_particles} "
              f"Q={traj.num_objects} dt={traj.meta.get('dt')}")
        print(json.dumps(traj.meta, indent=1, sort_keys=True, default=str))
    else:
        print(f"{path}: unknown magic {magic!r}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fluidgn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate oracle trajectories and a manifest")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train the model on a dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True, help="path to manifest.json")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--steps", type=int, default=None, help="override train.max_steps")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--save-every", type=int, default=2000)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="roll out the model on dataset episodes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("eval", help="rollout + chamfer table against ground truth")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--curves", action="store_true", help="write per-frame error curves")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mpc", help="two-stage pouring controller on a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--fill-target", type=float, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mpc)

    p = sub.add_parser("inspect", help="print the header of an artifact file")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    _apply_thread_env()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (learn.TrainingDiverged, control.ControlError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
