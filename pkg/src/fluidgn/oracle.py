"""Ground-truth generator: position-based fluid with mesh boundaries.

A deliberately small solver in the position-based-dynamics family: predict
under gravity, iterate a constant-density constraint, project particles out of
every rigid mesh to a configured separation shell, then update velocities from
the position deltas. Rigid bodies are kinematic only; the fluid never pushes
back. Fidelity target is plausibility and self-consistency, not parity with
any external simulator.

World scale note: scene dimensions are chosen so the default connectivity
radii give each particle roughly 10-20 liquid neighbors at rest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .geometry import (
    Bvh,
    GeometryError,
    Mesh,
    Pose,
    build_bvh,
    quat_from_axis_angle,
    quat_mul,
    quat_normalize,
    quat_to_matrix,
)
from .geometry import _bvh_closest, _feature_normal  # numba kernels reused in solver loops
from .geometry import mesh_pseudonormals
from .graph import ObjectKind, spatial_hash_neighbors
from .sim import Trajectory

SCENARIO_KINDS = ("translation", "rotation", "full_body", "still", "custom")
CONTAINER_KINDS = ("box_jug", "tapered_jug", "spouted_jug", "cone_cup", "bowl_cup", "floor_plane")


class OracleError(ValueError):
    pass


@dataclass
class PbdConfig:
    particle_radius: float = 0.0375
    spacing: float = 0.075  # rest grid spacing (2 x radius)
    smoothing_h: float = 0.12  # density kernel support
    rest_density: float = 0.0  # 0 = derive from a perfect grid at `spacing`
    iterations: int = 5
    substeps: int = 2
    dt: float = 1.0 / 60.0
    gravity: tuple = (0.0, 0.0, -9.81)
    boundary_separation: float = 0.03
    xsph: float = 0.05
    # anti-clustering pressure, scaled to the number-density kernel
    # normalization; defaults off because the compression-only constraint
    # already removes tensile attraction. Re-enable for ablations.
    scorr_k: float = 0.0
    scorr_dq: float = 0.3  # fraction of h
    lambda_eps: float = 100.0
    settle_steps: int = 30

    def __post_init__(self):
        if self.dt <= 0 or self.iterations < 1:
            raise OracleError("dt must be positive and iterations >= 1")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["gravity"] = list(self.gravity)
        return d

    def resolved_rest_density(self) -> float:
        if self.rest_density > 0:
            return self.rest_density
        return reference_density(self.smoothing_h, self.spacing)


# ---------------------------------------------------------------------------
# SPH kernels and constraint solve
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _poly6(r2, h):
    if r2 >= h * h:
        return 0.0
    x = h * h - r2
    return 315.0 / (64.0 * np.pi * h**9) * x * x * x


@njit(cache=True, inline="always")
def _spiky_grad_scale(r, h):
    """Magnitude factor g with grad W = g * r_vec (r = |r_vec|)."""
    if r >= h or r < 1e-12:
        return 0.0
    x = h - r
    return -45.0 / (np.pi * h**6) * x * x / r


def reference_density(h: float, spacing: float) -> float:
    """Density of an infinite cubic lattice at `spacing`, unit particle mass."""
    reach = int(math.ceil(h / spacing))
    total = 0.0
    for i in range(-reach, reach + 1):
        for j in range(-reach, reach + 1):
            for k in range(-reach, reach + 1):
                r2 = (i * i + j * j + k * k) * spacing * spacing
                if r2 < h * h:
                    x = h * h - r2
                    total += 315.0 / (64.0 * np.pi * h**9) * x**3
    return total


@njit(cache=True, parallel=True)
def _density(pos, starts, nbrs, h, rho):
    for i in prange(len(pos)):
        acc = _poly6(0.0, h)
        for s in range(starts[i], starts[i + 1]):
            j = nbrs[s]
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            dz = pos[i, 2] - pos[j, 2]
            acc += _poly6(dx * dx + dy * dy + dz * dz, h)
        rho[i] = acc


@njit(cache=True, parallel=True)
def _lambdas(pos, starts, nbrs, rho, h, rho0, eps, lam):
    for i in prange(len(pos)):
        c = rho[i] / rho0 - 1.0
        if c < 0.0:
            c = 0.0  # only correct compression; expansion is free surface
        gx = 0.0
        gy = 0.0
        gz = 0.0
        sum_sq = 0.0
        for s in range(starts[i], starts[i + 1]):
            j = nbrs[s]
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            dz = pos[i, 2] - pos[j, 2]
            r = np.sqrt(dx * dx + dy * dy + dz * dz)
            g = _spiky_grad_scale(r, h) / rho0
            gjx = g * dx
            gjy = g * dy
            gjz = g * dz
            gx += gjx
            gy += gjy
            gz += gjz
            sum_sq += gjx * gjx + gjy * gjy + gjz * gjz
        sum_sq += gx * gx + gy * gy + gz * gz
        lam[i] = -c / (sum_sq + eps)


@njit(cache=True, parallel=True)
def _delta_positions(pos, starts, nbrs, lam, h, rho0, k_corr, w_dq, dp):
    for i in prange(len(pos)):
        ax = 0.0
        ay = 0.0
        az = 0.0
        for s in range(starts[i], starts[i + 1]):
            j = nbrs[s]
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            dz = pos[i, 2] - pos[j, 2]
            r2 = dx * dx + dy * dy + dz * dz
            r = np.sqrt(r2)
            g = _spiky_grad_scale(r, h)
            if g == 0.0:
                continue
            scorr = 0.0
            if w_dq > 0.0:
                ratio = _poly6(r2, h) / w_dq
                scorr = -k_corr * ratio * ratio * ratio * ratio
            scale = (lam[i] + lam[j] + scorr) * g / rho0
            ax += scale * dx
            ay += scale * dy
            az += scale * dz
        dp[i, 0] = ax
        dp[i, 1] = ay
        dp[i, 2] = az


@njit(cache=True, parallel=True)
def _xsph(pos, vel, starts, nbrs, h, rho0, c, out):
    for i in prange(len(pos)):
        ax = 0.0
        ay = 0.0
        az = 0.0
        for s in range(starts[i], starts[i + 1]):
            j = nbrs[s]
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            dz = pos[i, 2] - pos[j, 2]
            w = _poly6(dx * dx + dy * dy + dz * dz, h) / rho0
            ax += (vel[j, 0] - vel[i, 0]) * w
            ay += (vel[j, 1] - vel[i, 1]) * w
            az += (vel[j, 2] - vel[i, 2]) * w
        out[i, 0] = vel[i, 0] + c * ax
        out[i, 1] = vel[i, 1] + c * ay
        out[i, 2] = vel[i, 2] + c * az


@njit(cache=True, parallel=True)
def _project_mesh(
    pos, verts, tris, face_n, edge_n, vert_n,
    node_lo, node_hi, node_left, node_right, node_start, node_count, order,
    rot, rot_inv, trans, separation,
):
    """Push particles to >= `separation` on the outward side of the surface."""
    for i in prange(len(pos)):
        lx = pos[i, 0] - trans[0]
        ly = pos[i, 1] - trans[1]
        lz = pos[i, 2] - trans[2]
        local = np.empty(3)
        local[0] = rot_inv[0, 0] * lx + rot_inv[0, 1] * ly + rot_inv[0, 2] * lz
        local[1] = rot_inv[1, 0] * lx + rot_inv[1, 1] * ly + rot_inv[1, 2] * lz
        local[2] = rot_inv[2, 0] * lx + rot_inv[2, 1] * ly + rot_inv[2, 2] * lz
        cp, d2, ti = _bvh_closest(
            local, verts, tris, node_lo, node_hi, node_left, node_right,
            node_start, node_count, order,
        )
        dist = np.sqrt(d2)
        nrm = _feature_normal(cp, ti, verts, tris, face_n, edge_n, vert_n)
        side = (
            (local[0] - cp[0]) * nrm[0]
            + (local[1] - cp[1]) * nrm[1]
            + (local[2] - cp[2]) * nrm[2]
        )
        if side > 0.0 and dist >= separation:
            continue
        if side > 0.0 and dist > 1e-12:
            # outside but too close: slide out along the closest-point direction
            sx = (local[0] - cp[0]) / dist
            sy = (local[1] - cp[1]) / dist
            sz = (local[2] - cp[2]) / dist
        else:
            # inside (or exactly on the surface): exit along the pseudonormal
            sx, sy, sz = nrm[0], nrm[1], nrm[2]
        nx = cp[0] + sx * separation
        ny = cp[1] + sy * separation
        nz = cp[2] + sz * separation
        pos[i, 0] = rot[0, 0] * nx + rot[0, 1] * ny + rot[0, 2] * nz + trans[0]
        pos[i, 1] = rot[1, 0] * nx + rot[1, 1] * ny + rot[1, 2] * nz + trans[1]
        pos[i, 2] = rot[2, 0] * nx + rot[2, 1] * ny + rot[2, 2] * nz + trans[2]


@njit(cache=True, parallel=True)
def _signed_depths(
    pos, verts, tris, face_n, edge_n, vert_n,
    node_lo, node_hi, node_left, node_right, node_start, node_count, order,
    rot_inv, trans, out,
):
    """Penetration depth (distance behind the nearest feature's pseudonormal)."""
    for i in prange(len(pos)):
        lx = pos[i, 0] - trans[0]
        ly = pos[i, 1] - trans[1]
        lz = pos[i, 2] - trans[2]
        local = np.empty(3)
        local[0] = rot_inv[0, 0] * lx + rot_inv[0, 1] * ly + rot_inv[0, 2] * lz
        local[1] = rot_inv[1, 0] * lx + rot_inv[1, 1] * ly + rot_inv[1, 2] * lz
        local[2] = rot_inv[2, 0] * lx + rot_inv[2, 1] * ly + rot_inv[2, 2] * lz
        cp, d2, ti = _bvh_closest(
            local, verts, tris, node_lo, node_hi, node_left, node_right,
            node_start, node_count, order,
        )
        nrm = _feature_normal(cp, ti, verts, tris, face_n, edge_n, vert_n)
        side = (
            (local[0] - cp[0]) * nrm[0]
            + (local[1] - cp[1]) * nrm[1]
            + (local[2] - cp[2]) * nrm[2]
        )
        out[i] = np.sqrt(d2) if side < 0.0 else 0.0


def _csr_neighbors(points: np.ndarray, radius: float):
    pairs = spatial_hash_neighbors(points, radius)
    starts = np.searchsorted(pairs[:, 0], np.arange(len(points) + 1)).astype(np.int64)
    return starts, np.ascontiguousarray(pairs[:, 1])


@dataclass
class RigidBody:
    mesh: Mesh
    bvh: Bvh
    kind: ObjectKind
    pose: Pose
    face_n: np.ndarray = None
    edge_n: np.ndarray = None
    vert_n: np.ndarray = None

    def __post_init__(self):
        if self.face_n is None:
            self.face_n, self.edge_n, self.vert_n = mesh_pseudonormals(self.mesh)

    @staticmethod
    def make(mesh: Mesh, kind: ObjectKind, pose: Pose | None = None) -> "RigidBody":
        return RigidBody(mesh, build_bvh(mesh), kind, pose or Pose.identity())


def project_out_of_mesh(positions: np.ndarray, body: RigidBody, separation: float) -> None:
    """In-place projection of world-space points out of one posed mesh."""
    rot = body.pose.matrix()
    _project_mesh(
        positions, body.mesh.vertices, body.mesh.triangles,
        body.face_n, body.edge_n, body.vert_n,
        body.bvh.node_lo, body.bvh.node_hi, body.bvh.node_left, body.bvh.node_right,
        body.bvh.node_start, body.bvh.node_count, body.bvh.order,
        rot, rot.T.copy(), body.pose.translation, separation,
    )


def penetration_depths(positions: np.ndarray, body: RigidBody) -> np.ndarray:
    """Per-point depth behind the nearest face (0 when on the outward side)."""
    out = np.empty(len(positions))
    rot = body.pose.matrix()
    _signed_depths(
        np.ascontiguousarray(positions, dtype=np.float64),
        body.mesh.vertices, body.mesh.triangles,
        body.face_n, body.edge_n, body.vert_n,
        body.bvh.node_lo, body.bvh.node_hi, body.bvh.node_left, body.bvh.node_right,
        body.bvh.node_start, body.bvh.node_count, body.bvh.order,
        rot.T.copy(), body.pose.translation, out,
    )
    return out


def pbd_step(
    positions: np.ndarray,
    velocities: np.ndarray,
    cfg: PbdConfig,
    bodies: list[RigidBody],
    poses_next: list[Pose],
):
    """Advance the fluid by one frame; bodies move from their current poses to
    `poses_next` (interpolated per substep). Returns (positions, velocities)
    and leaves the bodies at the new poses."""
    rho0 = cfg.resolved_rest_density()
    h = cfg.smoothing_h
    gravity = np.array(cfg.gravity)
    w_dq = _poly6((cfg.scorr_dq * h) ** 2, h) if cfg.scorr_k > 0 else 0.0
    dt = cfg.dt / cfg.substeps
    vmax = 0.5 * h / dt  # CFL-style guard against tunneling

    pos = positions.copy()
    vel = velocities.copy()
    start_poses = [b.pose for b in bodies]

    for sub in range(1, cfg.substeps + 1):
        frac = sub / cfg.substeps
        for body, p0, p1 in zip(bodies, start_poses, poses_next):
            body.pose = _interp_pose(p0, p1, frac)

        speed = np.linalg.norm(vel, axis=1)
        over = speed > vmax
        if over.any():
            vel[over] *= (vmax / speed[over])[:, None]
        # velocity-Verlet predict: exact sampling of ballistic flight
        pred = pos + vel * dt + 0.5 * gravity * dt * dt

        starts, nbrs = _csr_neighbors(pred, h)
        rho = np.empty(len(pred))
        lam = np.empty(len(pred))
        dp = np.empty_like(pred)
        dp_max = 0.15 * h  # per-iteration correction clamp
        for _ in range(cfg.iterations):
            _density(pred, starts, nbrs, h, rho)
            _lambdas(pred, starts, nbrs, rho, h, rho0, cfg.lambda_eps, lam)
            _delta_positions(pred, starts, nbrs, lam, h, rho0, cfg.scorr_k, w_dq, dp)
            mag = np.linalg.norm(dp, axis=1)
            big = mag > dp_max
            if big.any():
                dp[big] *= (dp_max / mag[big])[:, None]
            pred += dp
            for body in bodies:
                project_out_of_mesh(pred, body, cfg.boundary_separation)

        vel = (pred - pos) / dt + 0.5 * gravity * dt
        if cfg.xsph > 0:
            smoothed = np.empty_like(vel)
            _xsph(pred, vel, starts, nbrs, h, rho0, cfg.xsph, smoothed)
            vel = smoothed
        pos = pred

    return pos, vel


def _interp_pose(a: Pose, b: Pose, frac: float) -> Pose:
    t = a.translation * (1 - frac) + b.translation * frac
    qa, qb = a.orientation, b.orientation
    if np.dot(qa, qb) < 0:
        qb = -qb
    return Pose(t, quat_normalize(qa * (1 - frac) + qb * frac))


def fluid_densities(positions: np.ndarray, cfg: PbdConfig) -> np.ndarray:
    starts, nbrs = _csr_neighbors(positions, cfg.smoothing_h)
    rho = np.empty(len(positions))
    _density(positions, starts, nbrs, cfg.smoothing_h, rho)
    return rho


# ---------------------------------------------------------------------------
# Procedural containers
# ---------------------------------------------------------------------------


def _quad(a, b, c, d):
    """Two triangles for quad abcd; outward side follows the right-hand rule."""
    return [[a, b, c], [a, c, d]]


def _signed_volume(verts: np.ndarray, tris: np.ndarray) -> float:
    v = verts[tris]
    return float(np.einsum("ij,ij->", np.cross(v[:, 0], v[:, 1]), v[:, 2])) / 6.0


def _outward(verts: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Orient a closed solid so every normal faces away from the material."""
    return tris[:, ::-1].copy() if _signed_volume(verts, tris) < 0 else tris


def _lathe(profile: list[tuple[float, float]], segments: int,
           cap_start: float | None = None, cap_end: float | None = None,
           flip: bool = False):
    """Revolve an (r, z) profile around +z into rings of quads.

    With the profile running along the solid's surface so that the material
    lies to the right of the traversal direction, normals face away from it;
    `flip` reverses orientation. Optional fan caps close the first/last ring
    toward the axis at the given z.
    """
    verts: list[list[float]] = []
    tris: list[list[int]] = []
    rings = []
    for r, z in profile:
        base = len(verts)
        for s in range(segments):
            ang = 2 * np.pi * s / segments
            verts.append([r * np.cos(ang), r * np.sin(ang), z])
        rings.append(base)
    for k in range(len(profile) - 1):
        a, b = rings[k], rings[k + 1]
        for s in range(segments):
            s2 = (s + 1) % segments
            quad = _quad(a + s, a + s2, b + s2, b + s)
            tris.extend(quad)
    if cap_start is not None:
        c = len(verts)
        verts.append([0.0, 0.0, cap_start])
        for s in range(segments):
            s2 = (s + 1) % segments
            tris.append([c, rings[0] + s2, rings[0] + s])
    if cap_end is not None:
        c = len(verts)
        verts.append([0.0, 0.0, cap_end])
        for s in range(segments):
            s2 = (s + 1) % segments
            tris.append([c, rings[-1] + s, rings[-1] + s2])
    tris_arr = np.array(tris, dtype=np.int32)
    if flip:
        tris_arr = tris_arr[:, ::-1]
    return np.array(verts), tris_arr


def _require_positive(dims: dict, keys: list[str]) -> None:
    for k in keys:
        if dims.get(k, 0.0) <= 0:
            raise OracleError(f"bad-dims: {k} must be positive")


def make_container(kind: str, dims: dict) -> Mesh:
    """Procedural open containers with thick walls and outward-facing normals.

    dims keys per kind:
      floor_plane: size_x, size_y
      box_jug:     width, depth, height, wall
      tapered_jug: base_radius, neck_radius, height, wall [, segments]
      spouted_jug: radius, height, wall [, segments, spout_length]
      cone_cup:    top_radius, bottom_radius, height, wall [, segments]
      bowl_cup:    radius, height, wall [, segments]
    """
    if kind == "floor_plane":
        _require_positive(dims, ["size_x", "size_y"])
        hx, hy = dims["size_x"] / 2, dims["size_y"] / 2
        verts = np.array([[-hx, -hy, 0], [hx, -hy, 0], [hx, hy, 0], [-hx, hy, 0]], dtype=float)
        return Mesh(verts, np.array(_quad(0, 1, 2, 3), dtype=np.int32))

    if kind == "box_jug":
        _require_positive(dims, ["width", "depth", "height", "wall"])
        w, d, h, t = dims["width"], dims["depth"], dims["height"], dims["wall"]
        if t * 2 >= min(w, d) or t >= h:
            raise OracleError("bad-dims: wall too thick")
        return _thick_box(w, d, h, t)

    if kind == "tapered_jug":
        _require_positive(dims, ["base_radius", "neck_radius", "height", "wall"])
        rb, rn, h, t = dims["base_radius"], dims["neck_radius"], dims["height"], dims["wall"]
        seg = int(dims.get("segments", 16))
        if t >= rn or rn > rb:
            raise OracleError("bad-dims: need wall < neck_radius <= base_radius")
        profile = [
            (rb, 0.0), (rb, 0.55 * h), (rn, 0.8 * h), (rn, h),  # outer, bottom to rim
            (rn - t, h), (rn - t, 0.8 * h), (rb - t, 0.55 * h), (rb - t, t),  # inner, down
        ]
        verts, tris = _lathe(profile, seg, cap_start=0.0, cap_end=t)
        return Mesh(verts, _outward(verts, tris))

    if kind == "cone_cup":
        _require_positive(dims, ["top_radius", "bottom_radius", "height", "wall"])
        rt, rb, h, t = dims["top_radius"], dims["bottom_radius"], dims["height"], dims["wall"]
        seg = int(dims.get("segments", 14))
        if t >= min(rt, rb):
            raise OracleError("bad-dims: wall too thick")
        profile = [(rb, 0.0), (rt, h), (rt - t, h), (rb - t, t)]
        verts, tris = _lathe(profile, seg, cap_start=0.0, cap_end=t)
        return Mesh(verts, _outward(verts, tris))

    if kind == "bowl_cup":
        _require_positive(dims, ["radius", "height", "wall"])
        r, h, t = dims["radius"], dims["height"], dims["wall"]
        seg = int(dims.get("segments", 14))
        if h > r or t >= r / 2:
            raise OracleError("bad-dims: need height <= radius and thin wall")
        levels = 6
        outer = [(math.sqrt(max(r * r - (r - z) ** 2, (0.12 * r) ** 2)), z)
                 for z in np.linspace(0, h, levels)]
        inner = [(max(rr - t, 0.05 * r), z + (t if z < 0.5 * h else 0.0))
                 for rr, z in reversed(outer)]
        verts, tris = _lathe(outer + inner, seg, cap_start=0.0, cap_end=t)
        return Mesh(verts, _outward(verts, tris))

    if kind == "spouted_jug":
        _require_positive(dims, ["radius", "height", "wall"])
        r, h, t = dims["radius"], dims["height"], dims["wall"]
        seg = int(dims.get("segments", 14))
        spout = dims.get("spout_length", 1.6 * r)
        if t >= r / 2:
            raise OracleError("bad-dims: wall too thick")
        profile = [(r, 0.0), (r, h), (r - t, h), (r - t, t)]
        verts, tris = _lathe(profile, seg, cap_start=0.0, cap_end=t)
        tris = _outward(verts, tris)
        plates = _spout_plates(r, h, t, spout)
        all_verts = [verts] + [p[0] for p in plates]
        all_tris = [tris]
        off = len(verts)
        for pv, pt in plates:
            all_tris.append(pt + off)
            off += len(pv)
        return Mesh(np.concatenate(all_verts), np.concatenate(all_tris))

    raise OracleError(f"unknown container kind: {kind}")


def _thick_box(w: float, d: float, h: float, t: float) -> Mesh:
    hw, hd = w / 2, d / 2
    iw, idp = hw - t, hd - t
    verts = np.array(
        [
            # outer: bottom ring (0-3), top ring (4-7)
            [-hw, -hd, 0], [hw, -hd, 0], [hw, hd, 0], [-hw, hd, 0],
            [-hw, -hd, h], [hw, -hd, h], [hw, hd, h], [-hw, hd, h],
            # inner: cavity floor ring (8-11), top ring (12-15)
            [-iw, -idp, t], [iw, -idp, t], [iw, idp, t], [-iw, idp, t],
            [-iw, -idp, h], [iw, -idp, h], [iw, idp, h], [-iw, idp, h],
        ],
        dtype=float,
    )
    tris: list[list[int]] = []
    tris += _quad(0, 3, 2, 1)  # outer bottom, normal -z
    tris += _quad(0, 1, 5, 4)  # outer -y
    tris += _quad(1, 2, 6, 5)  # outer +x
    tris += _quad(2, 3, 7, 6)  # outer +y
    tris += _quad(3, 0, 4, 7)  # outer -x
    tris += _quad(8, 9, 10, 11)  # cavity floor, normal +z
    tris += _quad(8, 12, 13, 9)  # inner -y wall, normal +y (into cavity)
    tris += _quad(9, 13, 14, 10)  # inner +x wall, normal -x
    tris += _quad(10, 14, 15, 11)  # inner +y wall, normal -y
    tris += _quad(11, 15, 12, 8)  # inner -x wall, normal +x
    tris += _quad(4, 5, 13, 12)  # rim -y, normal +z
    tris += _quad(5, 6, 14, 13)  # rim +x
    tris += _quad(6, 7, 15, 14)  # rim +y
    tris += _quad(7, 4, 12, 15)  # rim -x
    t_arr = np.array(tris, dtype=np.int32)
    return Mesh(verts, _outward(verts, t_arr))


def _oriented_plate(corners: np.ndarray, thickness: float):
    """Thick plate from 4 coplanar corners; extruded along the face normal."""
    n = np.cross(corners[1] - corners[0], corners[2] - corners[0])
    n /= np.linalg.norm(n)
    top = corners + 0.5 * thickness * n
    bot = corners - 0.5 * thickness * n
    verts = np.concatenate([top, bot])
    tris: list[list[int]] = []
    tris += _quad(0, 1, 2, 3)  # top face, normal +n
    tris += _quad(7, 6, 5, 4)  # bottom face, normal -n
    for a, b in ((0, 1), (1, 2), (2, 3), (3, 0)):
        tris += _quad(a, a + 4, b + 4, b)
    t_arr = np.array(tris, dtype=np.int32)
    return verts, _outward(verts, t_arr)


def _spout_plates(r: float, h: float, t: float, length: float):
    """Two tilted plates forming an open V channel at the +x rim."""
    half_angle = np.pi / 8
    out_dir = np.array([np.cos(half_angle / 2), 0.0, -0.45])  # slight downward pitch
    out_dir /= np.linalg.norm(out_dir)
    plates = []
    for sign in (1.0, -1.0):
        a0 = np.array([r * np.cos(0.0), 0.0, h])
        a1 = np.array([r * np.cos(half_angle), sign * r * np.sin(half_angle), h + 0.15 * r])
        b0 = a0 + length * out_dir
        b1 = a1 + length * out_dir
        corners = np.array([a0, a1, b1, b0])
        plates.append(_oriented_plate(corners, t))
    return plates


def surface_side_check(mesh: Mesh, bvh: Bvh, samples: int, eps: float, rng) -> float:
    """Fraction of probe pairs classified on the correct side of the surface.

    For random face interior points, a probe `eps` along the normal must read
    as outside (zero penetration) and a probe `eps` against it as inside.
    """
    normals = mesh.triangle_normals()
    tv = mesh.vertices[mesh.triangles]
    tri = rng.integers(0, len(mesh.triangles), size=samples)
    w = rng.dirichlet(np.ones(3), size=samples)
    base = (tv[tri] * w[:, :, None]).sum(axis=1)
    body = RigidBody(mesh, bvh, ObjectKind.STATIONARY, Pose.identity())
    out_ok = penetration_depths(base + eps * normals[tri], body) == 0.0
    in_ok = penetration_depths(base - eps * normals[tri], body) > 0.0
    return float((out_ok & in_ok).mean())


# ---------------------------------------------------------------------------
# Scenario generation
# ---------------------------------------------------------------------------


@dataclass
class ScenarioSpec:
    kind: str = "rotation"
    num_frames: int = 150
    seed: int = 0
    n_particles: int = 216
    jug: str = "box_jug"
    cup: str = "cone_cup"
    include_cup: bool = True
    motion: dict = field(default_factory=dict)  # explicit overrides; see _script_motion
    noise: bool = False  # perturb jug motion (the 30%-of-trials treatment)
    jitter_reseed: int | None = None  # replace the fill jitter stream only

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise OracleError(f"unknown scenario kind: {self.kind}")
        if self.num_frames < 6:
            raise OracleError("episodes need at least 6 frames")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


DEFAULT_JUG_DIMS = {
    "box_jug": {"width": 0.62, "depth": 0.62, "height": 0.78, "wall": 0.03},
    "tapered_jug": {"base_radius": 0.34, "neck_radius": 0.17, "height": 0.8, "wall": 0.03},
    "spouted_jug": {"radius": 0.32, "height": 0.66, "wall": 0.03},
}
DEFAULT_CUP_DIMS = {
    "cone_cup": {"top_radius": 0.3, "bottom_radius": 0.2, "height": 0.42, "wall": 0.025},
    "bowl_cup": {"radius": 0.34, "height": 0.3, "wall": 0.025},
}
FLOOR_DIMS = {"size_x": 5.0, "size_y": 5.0}


def _fill_grid(spec: ScenarioSpec, jug_dims: dict, pbd: PbdConfig, rng) -> np.ndarray:
    """Jittered grid of particles inside the jug cavity (jug-local frame)."""
    s = pbd.spacing
    margin = pbd.boundary_separation + 0.5 * s
    if spec.jug == "box_jug":
        ext_x = jug_dims["width"] / 2 - jug_dims["wall"] - margin
        ext_y = jug_dims["depth"] / 2 - jug_dims["wall"] - margin
        z0 = jug_dims["wall"] + margin
    else:
        r_in = (jug_dims.get("base_radius") or jug_dims["radius"]) - jug_dims["wall"]
        ext_x = ext_y = (r_in - margin) / math.sqrt(2.0)
        z0 = jug_dims["wall"] + margin
    nx = max(int(2 * ext_x / s) + 1, 1)
    ny = max(int(2 * ext_y / s) + 1, 1)
    nz = max(int(math.ceil(spec.n_particles / (nx * ny))), 1)
    xs = (np.arange(nx) - (nx - 1) / 2) * s
    ys = (np.arange(ny) - (ny - 1) / 2) * s
    zs = z0 + np.arange(nz) * s
    grid = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
    order = np.lexsort((grid[:, 0], grid[:, 1], grid[:, 2]))
    pts = grid[order][: spec.n_particles]
    jitter = rng.normal(0.0, 0.02 * s, size=pts.shape)
    if spec.jitter_reseed is not None:
        # keep the main stream position identical so the scripted motion and
        # scene layout stay fixed; only the initial particle jitter changes
        jitter = np.random.default_rng(spec.jitter_reseed).normal(0.0, 0.02 * s, size=pts.shape)
    return pts + jitter


def _script_motion(spec: ScenarioSpec, jug_start: Pose, cup_dir: np.ndarray, dt: float, rng):
    """Per-frame jug poses. Returns (translations, quats) arrays of length T."""
    frames = spec.num_frames
    translations = np.tile(jug_start.translation, (frames, 1))
    quats = np.tile(jug_start.orientation, (frames, 1))
    motion = spec.motion

    if spec.kind == "still":
        pass
    elif spec.kind == "translation":
        if "velocity" in motion:
            vel = np.tile(np.asarray(motion["velocity"], dtype=float), (frames - 1, 1))
        else:
            vel = np.zeros((frames - 1, 3))
            seg = 40
            for s0 in range(0, frames - 1, seg):
                axis = rng.integers(0, 3)
                v = np.zeros(3)
                v[axis] = rng.uniform(0.1, 0.3) * (1 if rng.random() < 0.5 else -1)
                if axis == 2 and v[2] < 0:
                    v[2] *= -0.5  # avoid driving the jug into the floor
                vel[s0 : s0 + seg] = v
        translations[1:] = jug_start.translation + np.cumsum(vel * dt, axis=0)
    elif spec.kind in ("rotation", "full_body"):
        if "axis" in motion:
            axis = np.asarray(motion["axis"], dtype=float)
        else:
            pour = motion.get("pour", bool(rng.random() < 0.5))
            if pour:
                axis = np.array([-cup_dir[1], cup_dir[0], 0.0])  # tips the rim toward the cup
            else:
                ang = rng.uniform(0, 2 * np.pi)
                axis = np.array([np.cos(ang), np.sin(ang), 0.0])
        omega = motion.get("omega", float(rng.uniform(0.7, 1.2)))
        max_angle = motion.get("max_angle", float(rng.uniform(1.4, 2.0)))
        for k in range(1, frames):
            ang = min(omega * k * dt, max_angle)
            quats[k] = quat_from_axis_angle(axis, ang)
        if spec.kind == "full_body":
            direction = rng.uniform(-1, 1, size=2)
            direction /= max(np.linalg.norm(direction), 1e-9)
            v = np.concatenate([direction * rng.uniform(0.05, 0.15), [rng.uniform(0.05, 0.15)]])
            ramp = np.arange(frames)[:, None] * dt
            translations = jug_start.translation + ramp * v
    elif spec.kind == "custom":
        translations = np.asarray(motion["translations"], dtype=float)
        quats = np.asarray(motion["quats"], dtype=float)

    if spec.noise:
        jitter_t = rng.normal(0.0, 0.0015, size=(frames, 3)).cumsum(axis=0)
        translations = translations + jitter_t
        for k in range(frames):
            wiggle = quat_from_axis_angle(rng.normal(size=3), rng.normal(0.0, 0.008))
            quats[k] = quat_mul(wiggle, quats[k])
    return translations, quats


def scene_containers(spec: ScenarioSpec, rng) -> tuple[list[dict], list[Pose], np.ndarray]:
    """Container descriptors, start poses, and kinds for one scenario."""
    jug_dims = dict(DEFAULT_JUG_DIMS[spec.jug])
    cup_dims = dict(DEFAULT_CUP_DIMS[spec.cup])
    jug_z = 0.95 if spec.kind in ("rotation", "full_body") else 0.75
    jug_pose = Pose(np.array([0.0, 0.0, jug_z]), np.array([1.0, 0.0, 0.0, 0.0]))

    ang = rng.uniform(0, 2 * np.pi)
    cup_dir = np.array([np.cos(ang), np.sin(ang), 0.0])
    pour = spec.motion.get("pour", None)
    near = 0.72 if (spec.kind == "rotation") else 0.9
    cup_dist = near if pour in (True, None) else 1.6
    cup_pose = Pose(cup_dir * cup_dist, np.array([1.0, 0.0, 0.0, 0.0]))

    containers = [
        {"kind": spec.jug, "dims": jug_dims, "role": "jug"},
        {"kind": spec.cup, "dims": cup_dims, "role": "cup"},
        {"kind": "floor_plane", "dims": dict(FLOOR_DIMS), "role": "floor"},
    ]
    poses = [jug_pose, cup_pose, Pose.identity()]
    kinds = np.array(
        [
            ObjectKind.STATIONARY if spec.kind == "still" else ObjectKind.KINEMATIC,
            ObjectKind.STATIONARY,
            ObjectKind.STATIONARY,
        ],
        dtype=np.int64,
    )
    if not spec.include_cup:
        containers.pop(1)
        poses.pop(1)
        kinds = np.delete(kinds, 1)
    return containers, poses, kinds


def generate_scenario(spec: ScenarioSpec, pbd: PbdConfig | None = None):
    """Simulate one scripted episode. Returns (Trajectory, meshes, containers)."""
    pbd = pbd or PbdConfig()
    rng = np.random.default_rng(spec.seed)
    containers, start_poses, kinds = scene_containers(spec, rng)
    meshes = [make_container(c["kind"], c["dims"]) for c in containers]
    bodies = [
        RigidBody.make(m, ObjectKind(k), p) for m, k, p in zip(meshes, kinds, start_poses)
    ]
    jug_dims = containers[0]["dims"]
    cup_dir = start_poses[1].translation.copy() if spec.include_cup else np.array([1.0, 0.0, 0.0])
    nd = np.linalg.norm(cup_dir[:2])
    cup_dir = cup_dir / nd if nd > 0 else np.array([1.0, 0.0, 0.0])

    positions = _fill_grid(spec, jug_dims, pbd, rng) + start_poses[0].translation
    velocities = np.zeros_like(positions)

    # settle under static poses so the recorded window starts from rest
    hold = [b.pose for b in bodies]
    for _ in range(pbd.settle_steps):
        positions, velocities = pbd_step(positions, velocities, pbd, bodies, hold)

    translations, quats = _script_motion(spec, start_poses[0], cup_dir, pbd.dt, rng)
    frames = spec.num_frames
    all_t = np.tile(np.stack([p.translation for p in start_poses]), (frames, 1, 1))
    all_q = np.tile(np.stack([p.orientation for p in start_poses]), (frames, 1, 1))
    if spec.kind != "still":
        all_t[:, 0] = translations
        all_q[:, 0] = quats

    out_pos = np.zeros((frames, len(positions), 3))
    out_pos[0] = positions
    for k in range(1, frames):
        poses_next = [Pose(all_t[k, i], all_q[k, i]) for i in range(len(bodies))]
        positions, velocities = pbd_step(positions, velocities, pbd, bodies, poses_next)
        out_pos[k] = positions

    meta = {
        "dt": pbd.dt,
        "scenario": spec.kind,
        "seed": spec.seed,
        "particle_radius": pbd.particle_radius,
        "spacing": pbd.spacing,
        "containers": containers,
        "noise_trial": spec.noise,
    }
    traj = Trajectory(out_pos, all_t, all_q, kinds, meta)
    return traj, meshes, containers


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------


def _episode_specs(datagen, base_seed: int) -> list[ScenarioSpec]:
    """Deterministic scenario assignment for a whole dataset."""
    rng = np.random.default_rng(base_seed)
    total = datagen.train_episodes + datagen.test_episodes
    kinds = list(datagen.scenario_mix)
    probs = np.array([datagen.scenario_mix[k] for k in kinds], dtype=float)
    probs /= probs.sum()
    specs = []
    for i in range(total):
        kind = kinds[int(rng.choice(len(kinds), p=probs))]
        noisy = bool(rng.random() < datagen.noise_fraction)
        specs.append(
            ScenarioSpec(
                kind=kind,
                num_frames=datagen.frames,
                seed=base_seed * 100_003 + i,
                n_particles=datagen.n_particles,
                jug=datagen.jug,
                cup=datagen.cup,
                noise=noisy,
            )
        )
    return specs


def generate_dataset(datagen, pbd: PbdConfig, graph_cfg, base_seed: int, out_dir,
                     config_snapshot: dict | None = None, progress=None) -> dict:
    """Write trajectory files, shared meshes, a manifest, and radii curves."""
    import json
    from pathlib import Path

    from .geometry import save_obj
    from .sim import save_trajectory

    out = Path(out_dir)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    specs = _episode_specs(datagen, base_seed)
    mesh_files: dict[str, str] = {}
    entries = []
    degree_samples = []
    for i, spec in enumerate(specs):
        traj, meshes, containers = generate_scenario(spec, pbd)
        rels = []
        for mesh, cont in zip(meshes, containers):
            key = json.dumps({"kind": cont["kind"], "dims": cont["dims"]}, sort_keys=True)
            if key not in mesh_files:
                rel = f"meshes/{cont['kind']}_{len(mesh_files):02d}.obj"
                save_obj(out / rel, mesh)
                mesh_files[key] = rel
            rels.append(mesh_files[key])
        split = "train" if i < datagen.train_episodes else "test"
        fname = f"ep_{i:03d}.fltj"
        save_trajectory(out / fname, traj)
        entries.append(
            {
                "file": fname,
                "meshes": rels,
                "kinds": [int(k) for k in traj.kinds],
                "scenario": spec.kind,
                "seed": spec.seed,
                "noise_trial": spec.noise,
                "split": split,
            }
        )
        if len(degree_samples) < datagen.calibration_samples:
            degree_samples.append((traj, meshes))
        if progress is not None:
            progress(i + 1, len(specs))

    calibration = radii_calibration(degree_samples, graph_cfg)
    manifest = {
        "episodes": entries,
        "pbd": pbd.to_dict(),
        "datagen": datagen.to_dict(),
        "seed": base_seed,
        "calibration": calibration,
    }
    if config_snapshot is not None:
        manifest["config"] = config_snapshot
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    _write_calibration_csv(out, calibration)
    return manifest


def radii_calibration(samples, graph_cfg) -> dict:
    """Mean liquid-liquid degree vs r_l and mean surface contacts vs r_ol.

    The curves make the connectivity-radius choice auditable: r_l should give
    roughly 10-20 neighbors, and the contact curve's onset shows the boundary
    separation the ground truth maintains.
    """
    from .geometry import Pose as _Pose
    from .geometry import world_closest_points

    r_l_grid = [round(r, 3) for r in np.linspace(0.06, 0.24, 10)]
    r_ol_grid = [round(r, 3) for r in np.linspace(0.02, 0.3, 15)]
    degrees = {r: [] for r in r_l_grid}
    contacts = {r: [] for r in r_ol_grid}
    for traj, meshes in samples:
        bvhs = [build_bvh(m) for m in meshes]
        frame_ids = np.linspace(5, traj.num_frames - 1, 4, dtype=int)
        for k in frame_ids:
            pts = traj.positions[k]
            for r in r_l_grid:
                degrees[r].append(len(spatial_hash_neighbors(pts, r)) / len(pts))
            best = np.full(len(pts), np.inf)
            for i, (mesh, bvh) in enumerate(zip(meshes, bvhs)):
                pose = _Pose(traj.translations[k, i], traj.quats[k, i])
                _, dist, _, _ = world_closest_points(mesh, bvh, pose, pts)
                best = np.minimum(best, dist)
            for r in r_ol_grid:
                contacts[r].append(float((best < r).sum()))
    return {
        "r_l_grid": r_l_grid,
        "mean_degree": [float(np.mean(degrees[r])) for r in r_l_grid],
        "r_ol_grid": r_ol_grid,
        "mean_contacts": [float(np.mean(contacts[r])) for r in r_ol_grid],
        "configured_r_l": graph_cfg.r_l,
        "configured_r_ol": graph_cfg.r_ol,
    }


def _write_calibration_csv(out_dir, calibration: dict) -> None:
    from pathlib import Path

    out = Path(out_dir)
    with open(out / "calibration_r_l.csv", "w") as fh:
        fh.write("r_l,mean_degree\n")
        for r, d in zip(calibration["r_l_grid"], calibration["mean_degree"]):
            fh.write(f"{r},{d}\n")
    with open(out / "calibration_r_ol.csv", "w") as fh:
        fh.write("r_ol,mean_contacts\n")
        for r, c in zip(calibration["r_ol_grid"], calibration["mean_contacts"]):
            fh.write(f"{r},{c}\n")


def max_penetration(traj: Trajectory, meshes: list[Mesh]) -> float:
    """Worst particle depth inside any mesh over the whole trajectory."""
    bodies = [RigidBody.make(m, ObjectKind(k)) for m, k in zip(meshes, traj.kinds)]
    worst = 0.0
    for k in range(traj.num_frames):
        for i, body in enumerate(bodies):
            body.pose = Pose(traj.translations[k, i], traj.quats[k, i])
            worst = max(worst, float(penetration_depths(traj.positions[k], body).max()))
    return worst
