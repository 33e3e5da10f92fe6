"""Autoregressive rollout of the learned model, metrics, and trajectory files.

Trajectory files use the little-endian `FLTJ` container documented in
docs/formats.md; a JSON metadata block makes every artifact self-describing.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from . import net
from .geometry import Bvh, Mesh, build_bvh, load_obj
from .graph import HISTORY, GraphConfig, ObjectKind, SceneState, build_graph
from .learn import NormStats

TRAJECTORY_MAGIC = b"FLTJ"
TRAJECTORY_VERSION = 1


class SimError(RuntimeError):
    pass


@dataclass
class Trajectory:
    positions: np.ndarray  # (T, N, 3)
    translations: np.ndarray  # (T, Q, 3)
    quats: np.ndarray  # (T, Q, 4)
    kinds: np.ndarray  # (Q,) ObjectKind values
    meta: dict = field(default_factory=dict)  # dt, radii, mesh ids, scenario tag, status

    @property
    def num_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def num_particles(self) -> int:
        return self.positions.shape[1]

    @property
    def num_objects(self) -> int:
        return self.translations.shape[1]


def save_trajectory(path, traj: Trajectory) -> None:
    t, n, _ = traj.positions.shape
    q = traj.translations.shape[1]
    meta = dict(traj.meta)
    meta["kinds"] = [int(k) for k in traj.kinds]
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(TRAJECTORY_MAGIC)
        fh.write(struct.pack("<IIIIf", TRAJECTORY_VERSION, n, q, t, float(meta.get("dt", 1.0))))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for k in range(t):
            fh.write(traj.positions[k].astype("<f4").tobytes())
            pose = np.concatenate([traj.translations[k], traj.quats[k]], axis=1)
            fh.write(pose.astype("<f4").tobytes())


def load_trajectory(path) -> Trajectory:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != TRAJECTORY_MAGIC:
        raise SimError(f"not a trajectory file: {path}")
    version, n, q, t, dt = struct.unpack_from("<IIIIf", raw, 4)
    if version != TRAJECTORY_VERSION:
        raise SimError(f"unsupported trajectory version {version}")
    off = 4 + 20
    (mlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta = json.loads(raw[off : off + mlen])
    off += mlen
    positions = np.empty((t, n, 3))
    translations = np.empty((t, q, 3))
    quats = np.empty((t, q, 4))
    for k in range(t):
        frame = np.frombuffer(raw, dtype="<f4", count=n * 3, offset=off).reshape(n, 3)
        off += n * 12
        pose = np.frombuffer(raw, dtype="<f4", count=q * 7, offset=off).reshape(q, 7)
        off += q * 28
        positions[k] = frame
        translations[k] = pose[:, :3]
        quats[k] = pose[:, 3:]
    kinds = np.array(meta.pop("kinds", [int(ObjectKind.STATIONARY)] * q), dtype=np.int64)
    meta.setdefault("dt", dt)
    return Trajectory(positions, translations, quats, kinds, meta)


@dataclass
class Episode:
    """A trajectory joined with its scene meshes, ready for graphs/rollouts."""

    positions: np.ndarray
    translations: np.ndarray
    quats: np.ndarray
    kinds: np.ndarray
    meshes: list[Mesh]
    bvhs: list[Bvh]
    meta: dict = field(default_factory=dict)

    @staticmethod
    def from_trajectory(traj: Trajectory, meshes: list[Mesh], bvhs: list[Bvh] | None = None
                        ) -> "Episode":
        if bvhs is None:
            bvhs = [build_bvh(m) for m in meshes]
        return Episode(
            traj.positions, traj.translations, traj.quats, traj.kinds, meshes, bvhs, traj.meta
        )

    def to_trajectory(self) -> Trajectory:
        return Trajectory(self.positions, self.translations, self.quats, self.kinds, self.meta)


def load_manifest(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def load_dataset(manifest_path, split: str | None = None) -> list[Episode]:
    """Load every episode of a datagen manifest (optionally one split)."""
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    root = manifest_path.parent
    mesh_cache: dict[str, tuple[Mesh, Bvh]] = {}
    episodes = []
    for entry in manifest["episodes"]:
        if split is not None and entry.get("split") != split:
            continue
        traj = load_trajectory(root / entry["file"])
        meshes, bvhs = [], []
        for rel in entry["meshes"]:
            if rel not in mesh_cache:
                mesh = load_obj(root / rel)
                mesh_cache[rel] = (mesh, build_bvh(mesh))
            meshes.append(mesh_cache[rel][0])
            bvhs.append(mesh_cache[rel][1])
        episodes.append(Episode.from_trajectory(traj, meshes, bvhs))
    return episodes


# ---------------------------------------------------------------------------
# Model bundle
# ---------------------------------------------------------------------------


@dataclass
class Model:
    params: net.ModelParams
    norm: NormStats
    graph_cfg: GraphConfig
    config: dict = field(default_factory=dict)


def save_model(path, model: Model, adam_tensors: dict | None = None, extra: dict | None = None
               ) -> None:
    config = dict(model.config)
    config["graph"] = dict(model.graph_cfg.__dict__)
    if extra:
        config.update(extra)
    net.save_checkpoint(path, model.params, model.norm, extra=config, adam_tensors=adam_tensors)


def load_model(path, dtype: torch.dtype = torch.float32) -> Model:
    params, config, tensors = net.load_checkpoint(path, dtype)
    norm = NormStats.from_tensors(
        {k[len("norm."):]: v for k, v in tensors.items() if k.startswith("norm.")}
    )
    graph_cfg = GraphConfig(**config["graph"])
    return Model(params=params, norm=norm, graph_cfg=graph_cfg, config=config)


# ---------------------------------------------------------------------------
# Rollout
# ---------------------------------------------------------------------------


@dataclass
class ControlInput:
    """Absolute per-frame poses for every object; stationary rows stay fixed."""

    translations: np.ndarray  # (T, Q, 3)
    quats: np.ndarray  # (T, Q, 4)

    @property
    def num_frames(self) -> int:
        return self.translations.shape[0]

    @staticmethod
    def from_episode(episode: Episode) -> "ControlInput":
        return ControlInput(episode.translations.copy(), episode.quats.copy())


def integrate(p_t: np.ndarray, p_prev: np.ndarray, accel: np.ndarray) -> np.ndarray:
    """Semi-implicit position update: p_{t+1} = 2 p_t - p_{t-1} + a."""
    return 2.0 * p_t - p_prev + accel


def rollout(
    model: Model,
    initial_positions: np.ndarray,  # (WINDOW, N, 3) ground-truth bootstrap frames
    controls: ControlInput,
    kinds: np.ndarray,
    meshes: list[Mesh],
    num_frames: int,
    bvhs: list[Bvh] | None = None,
    meta: dict | None = None,
) -> Trajectory:
    """Autoregressive rollout under scripted controls.

    The first WINDOW frames are taken as given; the model predicts every later
    frame from its own history. Non-finite predictions truncate the rollout
    and set meta["status"] = "diverged-at-step-k".
    """
    if controls.num_frames < num_frames:
        raise SimError("length-mismatch: controls shorter than requested rollout")
    if bvhs is None:
        bvhs = [build_bvh(m) for m in meshes]
    window = initial_positions.shape[0]
    if window != HISTORY + 1:
        raise SimError("short-history")

    n = initial_positions.shape[1]
    positions = np.zeros((num_frames, n, 3))
    positions[:window] = initial_positions
    status = "ok"
    frames_done = num_frames

    with torch.no_grad():
        for t in range(window - 1, num_frames - 1):
            state = SceneState(
                positions[t - HISTORY : t + 1].transpose(1, 0, 2).copy(),
                controls.translations[t - HISTORY : t + 1].transpose(1, 0, 2).copy(),
                controls.quats[t - HISTORY : t + 1].transpose(1, 0, 2).copy(),
                kinds,
                meshes,
                bvhs,
            )
            graph = build_graph(state, model.graph_cfg)
            accel_n = net.forward(graph, model.params, model.norm).accel
            accel = model.norm.denormalize("accel", accel_n.numpy().astype(np.float64))
            nxt = integrate(positions[t], positions[t - 1], accel)
            if not np.isfinite(nxt).all():
                status = f"diverged-at-step-{t + 1}"
                frames_done = t + 1
                break
            positions[t + 1] = nxt

    out_meta = dict(meta or {})
    out_meta["status"] = status
    return Trajectory(
        positions[:frames_done],
        controls.translations[:frames_done].copy(),
        controls.quats[:frames_done].copy(),
        np.asarray(kinds),
        out_meta,
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor distance between two point clouds."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise SimError("empty-cloud")
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def trajectory_chamfer(pred: Trajectory, gt: Trajectory) -> float:
    """Mean per-frame chamfer distance over the whole rollout."""
    if pred.num_frames != gt.num_frames:
        raise SimError("length-mismatch")
    return float(
        np.mean([chamfer(pred.positions[k], gt.positions[k]) for k in range(pred.num_frames)])
    )


def frame_chamfer_curve(pred: Trajectory, gt: Trajectory) -> np.ndarray:
    frames = min(pred.num_frames, gt.num_frames)
    return np.array([chamfer(pred.positions[k], gt.positions[k]) for k in range(frames)])
