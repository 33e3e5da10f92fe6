"""Gradient-based pouring MPC on the learned dynamics.

The control variable is the jug's per-frame angular acceleration about the
x-axis (frame-time units). Costs are optimized with Adam through a fully
differentiable rollout of the learned model: graph connectivity and the
object-local contact points are rebuilt per step from detached state
(piecewise-constant), while every feature flows through the pose transform
and the particle history, so gradients reach the controls.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import net
from .geometry import Pose, quat_from_axis_angle, quat_mul, quat_to_matrix
from .graph import HISTORY, ObjectKind, SceneState, build_graph
from .sim import Model, integrate


class ControlError(RuntimeError):
    pass


@dataclass
class MpcConfig:
    horizon: int = 15
    replan_interval: int = 5
    opt_steps: int = 25
    lr: float = 0.02
    fill_target: float = 0.3
    restarts: int = 3  # extra random re-inits when gradients diverge
    max_steps: int = 80  # executed control frames
    init_scale: float = 0.004  # random init scale for angular accelerations
    u_clamp: float = 0.02  # |angular acceleration| bound (rad / frame^2)
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ControlError("horizon must be >= 1")
        if not (0.0 < self.fill_target <= 1.0):
            raise ControlError("fill target must be in (0, 1]")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class CupRegion:
    """Conical-frustum proxy for the cup interior, in the cup's local frame."""

    z0: float
    z1: float
    r0: float
    r1: float
    capacity: int  # particle count corresponding to a full cup
    margin: float = 0.95

    @staticmethod
    def from_container(container: dict, capacity: int) -> "CupRegion":
        kind, dims = container["kind"], container["dims"]
        if kind == "cone_cup":
            return CupRegion(
                z0=dims["wall"], z1=dims["height"],
                r0=dims["bottom_radius"] - dims["wall"], r1=dims["top_radius"] - dims["wall"],
                capacity=capacity,
            )
        if kind == "bowl_cup":
            return CupRegion(
                z0=dims["wall"], z1=dims["height"],
                r0=0.3 * dims["radius"], r1=dims["radius"] - dims["wall"],
                capacity=capacity,
            )
        raise ControlError(f"no interior proxy for container kind {kind}")

    def contains(self, local_points: np.ndarray) -> np.ndarray:
        z = local_points[:, 2]
        r = np.linalg.norm(local_points[:, :2], axis=1)
        frac = np.clip((z - self.z0) / max(self.z1 - self.z0, 1e-9), 0.0, 1.0)
        r_allowed = self.margin * (self.r0 + (self.r1 - self.r0) * frac)
        return (z >= self.z0) & (z <= self.z1) & (r <= r_allowed)


def fill_level(particles: np.ndarray, cup_pose: Pose, region: CupRegion) -> float:
    """Fraction of cup capacity currently inside the interior region."""
    local = (np.asarray(particles, dtype=np.float64) - cup_pose.translation) @ cup_pose.matrix()
    return float(region.contains(local).sum()) / max(region.capacity, 1)


def stage1_cost(particles: torch.Tensor, rim_world: torch.Tensor) -> torch.Tensor:
    """Mean squared distance of all particles to the rim target point."""
    return (particles - rim_world).pow(2).sum(dim=-1).mean()


def stage2_cost(angles: torch.Tensor) -> torch.Tensor:
    """Sum of squared jug rotation angles; zero when upright throughout."""
    return angles.pow(2).sum()


def adam_minimize(cost_fn, u0: np.ndarray, steps: int, lr: float,
                  clamp: float | None = None):
    """Minimize cost_fn(u) with Adam. Returns (u, cost curve); NaN aborts."""
    u = torch.tensor(np.asarray(u0, dtype=np.float64), requires_grad=True)
    opt_m = torch.zeros_like(u)
    opt_v = torch.zeros_like(u)
    curve = []
    for k in range(1, steps + 1):
        if u.grad is not None:
            u.grad = None
        cost = cost_fn(u)
        if not torch.isfinite(cost):
            return None, curve
        cost.backward()
        g = u.grad
        if g is None or not torch.isfinite(g).all():
            return None, curve
        curve.append(float(cost))
        with torch.no_grad():
            opt_m.mul_(0.9).add_(g, alpha=0.1)
            opt_v.mul_(0.999).addcmul_(g, g, value=0.001)
            m_hat = opt_m / (1 - 0.9**k)
            v_hat = opt_v / (1 - 0.999**k)
            u -= lr * m_hat / (v_hat.sqrt() + 1e-8)
            if clamp is not None:
                u.clamp_(-clamp, clamp)
    return u.detach().numpy(), curve


# ---------------------------------------------------------------------------
# Differentiable rollout of the pouring scene
# ---------------------------------------------------------------------------


@dataclass
class PourScene:
    """Pouring setup: jug (object 0, rotating about x), stationary cup/floor."""

    model: Model
    positions: np.ndarray  # (WINDOW, N, 3) bootstrap frames
    thetas: np.ndarray  # (WINDOW,) jug angle history
    base_translations: np.ndarray  # (Q, 3)
    base_quats: np.ndarray  # (Q, 4)
    kinds: np.ndarray
    meshes: list
    bvhs: list
    rim_local: np.ndarray  # rim target point, jug-local
    cup_index: int
    region: CupRegion
    axis: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))

    def jug_pose(self, theta: float) -> Pose:
        q = quat_mul(quat_from_axis_angle(self.axis, theta), self.base_quats[0])
        return Pose(self.base_translations[0], q)

    def pose_arrays(self, thetas: np.ndarray):
        frames = len(thetas)
        q = self.base_translations.shape[0]
        translations = np.tile(self.base_translations, (frames, 1, 1))
        quats = np.tile(self.base_quats, (frames, 1, 1))
        for k, th in enumerate(thetas):
            quats[k, 0] = quat_mul(quat_from_axis_angle(self.axis, float(th)), self.base_quats[0])
        return translations, quats

    def scene_state(self, positions: np.ndarray, thetas: np.ndarray) -> SceneState:
        translations, quats = self.pose_arrays(thetas)
        return SceneState(
            positions.transpose(1, 0, 2).copy(),
            translations.transpose(1, 0, 2).copy(),
            quats.transpose(1, 0, 2).copy(),
            self.kinds,
            self.meshes,
            self.bvhs,
        )

    def fill(self, positions: np.ndarray) -> float:
        cup_pose = Pose(
            self.base_translations[self.cup_index], self.base_quats[self.cup_index]
        )
        return fill_level(positions, cup_pose, self.region)


def _rot_x(theta: torch.Tensor) -> torch.Tensor:
    c, s = torch.cos(theta), torch.sin(theta)
    one = torch.ones_like(c)
    zero = torch.zeros_like(c)
    return torch.stack(
        [
            torch.stack([one, zero, zero]),
            torch.stack([zero, c, -s]),
            torch.stack([zero, s, c]),
        ]
    )


def _torch_graph(scene: PourScene, graph_np, pos_hist: list, theta_hist: list,
                 dtype: torch.dtype) -> net.GraphTensors:
    """Feature tensors mirroring the numpy graph builder, differentiable in
    particle positions and jug angles."""
    norm = scene.model.norm
    q_obj = scene.base_translations.shape[0]
    n = pos_hist[0].shape[0]
    base_rot = torch.as_tensor(quat_to_matrix(scene.base_quats[0]), dtype=dtype)
    jug_t = torch.as_tensor(scene.base_translations[0], dtype=dtype)
    rots = [_rot_x(th).to(dtype) @ base_rot for th in theta_hist]

    # node features
    vel = [pos_hist[k + 1] - pos_hist[k] for k in range(HISTORY)]
    x_l = torch.cat(vel, dim=1)
    obj_rows = []
    for i in range(q_obj):
        if i == 0:
            deltas = []
            for k in range(HISTORY):
                dth = theta_hist[k + 1] - theta_hist[k]
                deltas.append(torch.stack([
                    torch.zeros_like(dth), torch.zeros_like(dth), torch.zeros_like(dth),
                    dth, torch.zeros_like(dth), torch.zeros_like(dth),
                ]))
            row = torch.cat(deltas)
        else:
            row = torch.zeros(6 * HISTORY, dtype=dtype)
        onehot = torch.zeros(2, dtype=dtype)
        onehot[int(scene.kinds[i])] = 1.0
        obj_rows.append(torch.cat([row, onehot]))
    x_o = torch.stack(obj_rows)

    mesh_rows = []
    owner = graph_np.mesh_owner
    for i in range(q_obj):
        verts = torch.as_tensor(scene.meshes[i].vertices, dtype=dtype)
        if i == 0:
            world = [verts @ r.T + jug_t for r in rots]
        else:
            rot_i = torch.as_tensor(quat_to_matrix(scene.base_quats[i]), dtype=dtype)
            t_i = torch.as_tensor(scene.base_translations[i], dtype=dtype)
            w = verts @ rot_i.T + t_i
            world = [w] * (HISTORY + 1)
        mvel = torch.cat([world[k + 1] - world[k] for k in range(HISTORY)], dim=1)
        onehot = torch.zeros(len(verts), 2, dtype=dtype)
        onehot[:, int(scene.kinds[i])] = 1.0
        mesh_rows.append(torch.cat([mvel, onehot], dim=1))
    x_m = torch.cat(mesh_rows) if mesh_rows else torch.zeros(0, 17, dtype=dtype)
    mesh_world_now = torch.cat(
        [
            scene_mesh_world(scene, i, rots[-1], dtype)
            for i in range(q_obj)
        ]
    ) if q_obj else torch.zeros(0, 3, dtype=dtype)

    pos_now = pos_hist[-1]
    edges = {}

    e = graph_np.e_l
    rel = pos_now[e.dst] - pos_now[e.src]
    feats_l = torch.cat([rel, rel.norm(dim=1, keepdim=True)], dim=1)
    edges["e_l"] = (torch.as_tensor(e.src), torch.as_tensor(e.dst), feats_l)

    # Object-liquid contacts through a differentiable local plane model:
    # anchor point and face normal are frozen in the object frame, then the
    # closest point is the particle's projection onto that (pose-rotated)
    # plane. Exact at the linearization point; first-order in pose changes
    # and in tangential sliding.
    e = graph_np.e_ol
    c_local = torch.as_tensor(graph_np.ol_closest_local, dtype=dtype)
    obj_t = torch.as_tensor(scene.base_translations, dtype=dtype)
    parts = []  # e_ol is sorted source-major, so per-object chunks concatenate in order
    for i in range(q_obj):
        mask = e.src == i
        if not mask.any():
            continue
        normals_local = torch.as_tensor(
            scene.meshes[i].triangle_normals()[graph_np.ol_triangle[mask]], dtype=dtype
        )
        if i == 0:
            rot_i = rots[-1]
        else:
            rot_i = torch.as_tensor(quat_to_matrix(scene.base_quats[i]), dtype=dtype)
        anchor = c_local[mask] @ rot_i.T + obj_t[i]
        n_w = normals_local @ rot_i.T
        p_w = pos_now[torch.as_tensor(e.dst[mask])]
        cw = p_w - n_w * ((p_w - anchor) * n_w).sum(dim=1, keepdim=True)
        # off-plane anchors (edge/vertex contacts): keep the residual offset
        # so the value at the linearization point stays exact
        resid = (anchor - p_w) + n_w * ((p_w - anchor) * n_w).sum(dim=1, keepdim=True)
        cw = cw + resid.detach()
        parts.append(cw)
    src_ol = torch.as_tensor(e.src)
    dst_ol = torch.as_tensor(e.dst)
    if parts:
        c_world = torch.cat(parts)
        to_p = c_world - pos_now[dst_ol]
        to_o = c_world - obj_t[src_ol]
        feats_ol = torch.cat(
            [to_p, to_o, to_p.norm(dim=1, keepdim=True), to_o.norm(dim=1, keepdim=True)], dim=1
        )
    else:
        feats_ol = torch.zeros(0, 8, dtype=dtype)
    edges["e_ol"] = (src_ol, dst_ol, feats_ol)

    e = graph_np.e_om
    rel_m = mesh_world_now[e.dst] - obj_t[torch.as_tensor(e.src)]
    feats_om = torch.cat([rel_m, rel_m.norm(dim=1, keepdim=True)], dim=1)
    edges["e_om"] = (torch.as_tensor(e.src), torch.as_tensor(e.dst), feats_om)
    e = graph_np.e_mo
    edges["e_mo"] = (torch.as_tensor(e.src), torch.as_tensor(e.dst), feats_om)

    # canonical aggregation order and normalization, as in net.prepare_graph
    out_edges = {}
    for fam, (src, dst, feats) in edges.items():
        order = torch.as_tensor(
            net._canonical_edge_order(
                feats.detach().cpu().numpy(), src.numpy(), dst.numpy()
            ).copy()
        )
        out_edges[fam] = (
            src[order],
            dst[order],
            norm.normalize_tensor(fam, feats[order]) if norm else feats[order],
        )
    return net.GraphTensors(
        x_l=norm.normalize_tensor("liquid", x_l) if norm else x_l,
        x_o=norm.normalize_tensor("object", x_o) if norm else x_o,
        x_m=norm.normalize_tensor("mesh", x_m) if norm else x_m,
        edges=out_edges,
        num_liquid=n,
        num_objects=q_obj,
        num_mesh=len(owner),
    )


def scene_mesh_world(scene: PourScene, i: int, jug_rot: torch.Tensor,
                     dtype: torch.dtype) -> torch.Tensor:
    verts = torch.as_tensor(scene.meshes[i].vertices, dtype=dtype)
    if i == 0:
        return verts @ jug_rot.T + torch.as_tensor(scene.base_translations[0], dtype=dtype)
    rot_i = torch.as_tensor(quat_to_matrix(scene.base_quats[i]), dtype=dtype)
    return verts @ rot_i.T + torch.as_tensor(scene.base_translations[i], dtype=dtype)


def rollout_cost(scene: PourScene, u: torch.Tensor, stage: int,
                 omega0: float) -> torch.Tensor:
    """Stage cost accumulated over a differentiable horizon rollout."""
    dtype = scene.model.params.dtype
    u = u.to(dtype)
    params = scene.model.params
    norm = scene.model.norm
    pos_hist = [torch.as_tensor(p, dtype=dtype) for p in scene.positions]
    theta_hist = [torch.as_tensor(float(t), dtype=dtype) for t in scene.thetas]
    omega = torch.as_tensor(float(omega0), dtype=dtype)
    rim_local = torch.as_tensor(scene.rim_local, dtype=dtype)
    jug_t = torch.as_tensor(scene.base_translations[0], dtype=dtype)
    base_rot = torch.as_tensor(quat_to_matrix(scene.base_quats[0]), dtype=dtype)

    total = torch.zeros((), dtype=dtype)
    angles = []
    for h in range(u.shape[0]):
        state = scene.scene_state(
            np.stack([p.detach().numpy() for p in pos_hist]),
            np.array([float(t.detach()) for t in theta_hist]),
        )
        graph_np = build_graph(state, scene.model.graph_cfg)
        gt = _torch_graph(scene, graph_np, pos_hist, theta_hist, dtype)
        accel_n = net.forward(gt, params).accel
        accel = norm.denormalize_tensor("accel", accel_n)
        nxt = 2.0 * pos_hist[-1] - pos_hist[-2] + accel

        omega = omega + u[h]
        theta_next = theta_hist[-1] + omega
        pos_hist = pos_hist[1:] + [nxt]
        theta_hist = theta_hist[1:] + [theta_next]
        angles.append(theta_next)

        if stage == 1:
            rim_world = (_rot_x(theta_next) @ base_rot) @ rim_local + jug_t
            total = total + stage1_cost(nxt, rim_world)
    if stage == 1:
        return total / u.shape[0]
    return stage2_cost(torch.stack(angles))


def execute_steps(scene: PourScene, u: np.ndarray, omega0: float, steps: int):
    """Advance the real (non-differentiable) learned-model state by `steps`."""
    positions = scene.positions.copy()
    thetas = scene.thetas.copy()
    omega = float(omega0)
    frames: list[np.ndarray] = []
    with torch.no_grad():
        for h in range(steps):
            state = scene.scene_state(positions, thetas)
            graph = build_graph(state, scene.model.graph_cfg)
            accel_n = net.forward(graph, scene.model.params, scene.model.norm).accel
            accel = scene.model.norm.denormalize(
                "accel", accel_n.numpy().astype(np.float64)
            )
            nxt = integrate(positions[-1], positions[-2], accel)
            if not np.isfinite(nxt).all():
                raise ControlError("diverged")
            omega += float(u[h])
            theta_next = thetas[-1] + omega
            positions = np.concatenate([positions[1:], nxt[None]])
            thetas = np.concatenate([thetas[1:], [theta_next]])
            frames.append(nxt.copy())
    return positions, thetas, omega, frames


# ---------------------------------------------------------------------------
# Scene setup for the pouring task
# ---------------------------------------------------------------------------


def measure_cup_capacity(container: dict, pbd, seed: int = 0) -> int:
    """Oracle measurement of how many particles a cup holds when overfilled."""
    from .oracle import RigidBody, make_container, pbd_step

    region = CupRegion.from_container(container, capacity=1)
    cup = make_container(container["kind"], container["dims"])
    floor = make_container("floor_plane", {"size_x": 4.0, "size_y": 4.0})
    bodies = [
        RigidBody.make(cup, ObjectKind.STATIONARY),
        RigidBody.make(floor, ObjectKind.STATIONARY),
    ]
    rng = np.random.default_rng(seed)
    s = pbd.spacing
    r_spawn = region.r1 * region.margin - 0.5 * s
    xs = np.arange(-r_spawn, r_spawn + 1e-9, s)
    cols = [(x, y) for x in xs for y in xs if math.hypot(x, y) <= r_spawn]
    layers = max(int(2.2 * (region.z1 - region.z0) / s), 3)
    pts = np.array(
        [(x, y, region.z1 + 0.06 + k * s) for k in range(layers) for x, y in cols]
    )
    pts += rng.normal(0.0, 0.02 * s, size=pts.shape)
    vel = np.zeros_like(pts)
    hold = [b.pose for b in bodies]
    for _ in range(90):
        pts, vel = pbd_step(pts, vel, pbd, bodies, hold)
    inside = region.contains(pts)
    return max(int(inside.sum()), 1)


def build_pour_scene(model: Model, pbd, seed: int = 0, n_particles: int = 216,
                     capacity: int | None = None):
    """Settled jug of liquid next to a cup; rotating about +x pours toward -y."""
    from .graph import WINDOW
    from .oracle import (
        DEFAULT_CUP_DIMS,
        DEFAULT_JUG_DIMS,
        RigidBody,
        ScenarioSpec,
        _fill_grid,
        make_container,
        pbd_step,
    )

    jug_dims = dict(DEFAULT_JUG_DIMS["box_jug"])
    cup_dims = dict(DEFAULT_CUP_DIMS["cone_cup"])
    containers = [
        {"kind": "box_jug", "dims": jug_dims, "role": "jug"},
        {"kind": "cone_cup", "dims": cup_dims, "role": "cup"},
        {"kind": "floor_plane", "dims": {"size_x": 5.0, "size_y": 5.0}, "role": "floor"},
    ]
    base_t = np.array([[0.0, 0.0, 0.95], [0.0, -0.78, 0.0], [0.0, 0.0, 0.0]])
    base_q = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (3, 1))
    kinds = np.array(
        [ObjectKind.KINEMATIC, ObjectKind.STATIONARY, ObjectKind.STATIONARY], dtype=np.int64
    )
    meshes = [make_container(c["kind"], c["dims"]) for c in containers]
    bodies = [
        RigidBody.make(m, ObjectKind(k), Pose(t, q))
        for m, k, t, q in zip(meshes, kinds, base_t, base_q)
    ]

    rng = np.random.default_rng(seed)
    spec = ScenarioSpec(kind="still", num_frames=WINDOW, seed=seed, n_particles=n_particles)
    pos = _fill_grid(spec, jug_dims, pbd, rng) + base_t[0]
    vel = np.zeros_like(pos)
    hold = [b.pose for b in bodies]
    for _ in range(pbd.settle_steps):
        pos, vel = pbd_step(pos, vel, pbd, bodies, hold)
    frames = [pos.copy()]
    for _ in range(WINDOW - 1):
        pos, vel = pbd_step(pos, vel, pbd, bodies, hold)
        frames.append(pos.copy())

    if capacity is None:
        capacity = measure_cup_capacity(containers[1], pbd, seed=seed)
    region = CupRegion.from_container(containers[1], capacity)
    rim_local = np.array([0.0, -jug_dims["width"] / 2, jug_dims["height"]])
    scene = PourScene(
        model=model,
        positions=np.stack(frames),
        thetas=np.zeros(WINDOW),
        base_translations=base_t,
        base_quats=base_q,
        kinds=kinds,
        meshes=meshes,
        bvhs=[b.bvh for b in bodies],
        rim_local=rim_local,
        cup_index=1,
        region=region,
    )
    return scene, containers


@dataclass
class MpcResult:
    controls: np.ndarray
    angles: np.ndarray
    achieved_fill: float
    fill_curve: list
    cost_curves: list
    restarts_used: int
    positions_log: np.ndarray  # (frames, N, 3) executed learned-model frames
    theta_log: np.ndarray


def mpc_optimize(scene: PourScene, cfg: MpcConfig, rng: np.random.Generator) -> MpcResult:
    """Receding-horizon two-stage pouring controller.

    Stage 1 pulls all particles toward the rim target point; once the measured
    fill reaches the target at a re-plan boundary, stage 2 regularizes the jug
    angle back to upright. Gradient blow-ups restart from a fresh random
    initialization (bounded retries).
    """
    u_plan = rng.normal(0.0, cfg.init_scale, size=cfg.horizon)
    omega = 0.0
    stage = 1
    executed: list[float] = []
    angle_log: list[float] = []
    fill_curve: list[float] = []
    cost_curves: list[list[float]] = []
    restarts_used = 0
    pos_log = [scene.positions[-1].copy()]

    steps_done = 0
    while steps_done < cfg.max_steps:
        fill = scene.fill(scene.positions[-1])
        fill_curve.append(fill)
        if stage == 1 and fill >= cfg.fill_target:
            stage = 2

        attempt = 0
        while True:
            u_opt, curve = adam_minimize(
                lambda u: rollout_cost(scene, u, stage, omega),
                u_plan, cfg.opt_steps, cfg.lr, clamp=cfg.u_clamp,
            ) if cfg.opt_steps > 0 else (u_plan.copy(), [])
            if u_opt is not None:
                break
            attempt += 1
            restarts_used += 1
            if attempt > cfg.restarts:
                raise ControlError(f"diverged after {restarts_used} restarts")
            u_plan = rng.normal(0.0, cfg.init_scale, size=cfg.horizon)
        cost_curves.append(curve)

        k = min(cfg.replan_interval, cfg.max_steps - steps_done)
        new_pos, new_thetas, new_omega, frames = execute_steps(scene, u_opt[:k], omega, k)
        executed.extend(float(v) for v in u_opt[:k])
        angle_log.extend(new_thetas[-k:].tolist())
        pos_log.extend(frames)
        scene.positions = new_pos
        scene.thetas = new_thetas
        omega = new_omega
        steps_done += k
        u_plan = np.concatenate([u_opt[k:], np.zeros(k)])

    achieved = scene.fill(scene.positions[-1])
    fill_curve.append(achieved)
    return MpcResult(
        controls=np.array(executed),
        angles=np.array(angle_log),
        achieved_fill=achieved,
        fill_curve=fill_curve,
        cost_curves=cost_curves,
        restarts_used=restarts_used,
        positions_log=np.stack(pos_log),
        theta_log=np.array(angle_log),
    )
