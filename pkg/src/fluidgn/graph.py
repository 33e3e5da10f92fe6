"""Interaction-graph construction from a windowed scene state.

The graph has liquid/object/mesh node sets and four edge families:
liquid-liquid, object-liquid (through surface closest points), and the
bi-directional object/mesh pairs. Features are relative or finite-difference
quantities only, so the whole graph is invariant under scene translation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from numba import njit, prange

from .geometry import Bvh, Mesh, Pose, pose_delta, quat_to_matrix, world_closest_points

HISTORY = 5  # velocity steps per node; the window holds HISTORY + 1 frames
WINDOW = HISTORY + 1


class GraphError(ValueError):
    pass


class ObjectKind(IntEnum):
    KINEMATIC = 0
    STATIONARY = 1


@dataclass
class GraphConfig:
    r_l: float = 0.12  # liquid-liquid connectivity radius (m)
    r_ol: float = 0.19  # liquid-object connectivity radius (m)
    include_mesh_nodes: bool = True  # False = ablated variant (no mesh vertex nodes)
    include_floor_distance: bool = False  # optional baseline-style liquid feature
    floor_z: float = 0.0

    def __post_init__(self):
        if self.r_l <= 0 or self.r_ol <= 0:
            raise GraphError("connectivity radii must be positive")

    @property
    def liquid_feat_dim(self) -> int:
        return 3 * HISTORY + (1 if self.include_floor_distance else 0)

    @property
    def object_feat_dim(self) -> int:
        return 6 * HISTORY + 2

    @property
    def mesh_feat_dim(self) -> int:
        return 3 * HISTORY + 2


@dataclass
class SceneState:
    """One simulation window: particle and pose histories plus scene meshes."""

    particle_history: np.ndarray  # (N, WINDOW, 3), newest frame last
    object_translations: np.ndarray  # (Q, WINDOW, 3)
    object_quats: np.ndarray  # (Q, WINDOW, 4), unit (w, x, y, z)
    object_kind: np.ndarray  # (Q,) ObjectKind values
    meshes: list[Mesh]
    bvhs: list[Bvh | None]

    def __post_init__(self):
        self.particle_history = np.asarray(self.particle_history, dtype=np.float64)
        self.object_translations = np.asarray(self.object_translations, dtype=np.float64)
        self.object_quats = np.asarray(self.object_quats, dtype=np.float64)
        self.object_kind = np.asarray(self.object_kind, dtype=np.int64)
        if self.particle_history.ndim != 3 or self.particle_history.shape[1] != WINDOW:
            raise GraphError("short-history")
        if self.object_translations.shape[1] != WINDOW or self.object_quats.shape[1] != WINDOW:
            raise GraphError("short-history")
        if not np.isfinite(self.particle_history).all():
            raise GraphError("non-finite particle positions")

    @property
    def num_particles(self) -> int:
        return self.particle_history.shape[0]

    @property
    def num_objects(self) -> int:
        return self.object_translations.shape[0]

    def pose(self, obj: int, frame: int = -1) -> Pose:
        return Pose(self.object_translations[obj, frame], self.object_quats[obj, frame])

    def positions(self, frame: int = -1) -> np.ndarray:
        return self.particle_history[:, frame]


@dataclass
class EdgeSet:
    src: np.ndarray  # (E,) int64
    dst: np.ndarray  # (E,) int64
    feats: np.ndarray  # (E, F) float64

    def __len__(self) -> int:
        return len(self.src)

    @staticmethod
    def empty(feat_dim: int) -> "EdgeSet":
        return EdgeSet(
            np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros((0, feat_dim))
        )


@dataclass
class SimGraph:
    liquid_feats: np.ndarray  # (N, F_L)
    object_feats: np.ndarray  # (Q, F_O)
    mesh_feats: np.ndarray  # (M, F_M); M = 0 in ablated mode
    mesh_owner: np.ndarray  # (M,) owning object per mesh node
    e_l: EdgeSet  # liquid -> liquid, aggregated at dst
    e_ol: EdgeSet  # object -> liquid
    e_om: EdgeSet  # object -> mesh
    e_mo: EdgeSet  # mesh -> object
    ol_closest_local: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    ol_triangle: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))

    @property
    def num_liquid(self) -> int:
        return self.liquid_feats.shape[0]

    @property
    def num_objects(self) -> int:
        return self.object_feats.shape[0]

    @property
    def num_mesh(self) -> int:
        return self.mesh_feats.shape[0]


# ---------------------------------------------------------------------------
# Fixed-radius neighbor search
# ---------------------------------------------------------------------------


@njit(cache=True)
def _cell_keys(points, inv_radius):
    n = len(points)
    keys = np.empty(n, dtype=np.int64)
    cx = np.empty(n, dtype=np.int64)
    cy = np.empty(n, dtype=np.int64)
    cz = np.empty(n, dtype=np.int64)
    for i in range(n):
        cx[i] = np.int64(np.floor(points[i, 0] * inv_radius))
        cy[i] = np.int64(np.floor(points[i, 1] * inv_radius))
        cz[i] = np.int64(np.floor(points[i, 2] * inv_radius))
    ox, oy, oz = cx.min(), cy.min(), cz.min()
    for i in range(n):
        keys[i] = ((cx[i] - ox) << 42) | ((cy[i] - oy) << 21) | (cz[i] - oz)
    return keys, cx, cy, cz, ox, oy, oz


@njit(cache=True, parallel=True)
def _count_and_collect(points, r2, keys_sorted, sort_idx, cx, cy, cz, ox, oy, oz, counts, out, fill):
    n = len(points)
    for i in prange(n):
        c = 0
        base = counts[i] if fill else 0
        for dx in range(-1, 2):
            for dy in range(-1, 2):
                for dz in range(-1, 2):
                    key = ((cx[i] + dx - ox) << 42) | ((cy[i] + dy - oy) << 21) | (cz[i] + dz - oz)
                    lo = np.searchsorted(keys_sorted, key)
                    hi = np.searchsorted(keys_sorted, key + 1)
                    for s in range(lo, hi):
                        j = sort_idx[s]
                        if j == i:
                            continue
                        a = points[i, 0] - points[j, 0]
                        b = points[i, 1] - points[j, 1]
                        e = points[i, 2] - points[j, 2]
                        if a * a + b * b + e * e < r2:
                            if fill:
                                out[base + c, 0] = i
                                out[base + c, 1] = j
                            c += 1
        if not fill:
            counts[i] = c


def spatial_hash_neighbors(points: np.ndarray, radius: float) -> np.ndarray:
    """All ordered pairs (i, j), i != j, with ||p_i - p_j|| < radius.

    Exactly equivalent to the quadratic double loop (strict inequality on the
    squared distance); returned sorted by (i, j).
    """
    if radius <= 0:
        raise GraphError("radius must be positive")
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = len(points)
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    keys, cx, cy, cz, ox, oy, oz = _cell_keys(points, 1.0 / radius)
    sort_idx = np.argsort(keys, kind="stable").astype(np.int64)
    keys_sorted = keys[sort_idx]
    counts = np.zeros(n, dtype=np.int64)
    dummy = np.zeros((1, 2), dtype=np.int64)
    _count_and_collect(
        points, radius * radius, keys_sorted, sort_idx, cx, cy, cz, ox, oy, oz, counts, dummy, False
    )
    offsets = np.zeros(n, dtype=np.int64)
    np.cumsum(counts[:-1], out=offsets[1:])
    total = int(counts.sum())
    out = np.empty((total, 2), dtype=np.int64)
    _count_and_collect(
        points, radius * radius, keys_sorted, sort_idx, cx, cy, cz, ox, oy, oz, offsets, out, True
    )
    # per-i blocks are already in i order; sort each block by j
    order = np.lexsort((out[:, 1], out[:, 0]))
    return out[order]


# ---------------------------------------------------------------------------
# Feature primitives
# ---------------------------------------------------------------------------


def velocity_history(positions: np.ndarray) -> np.ndarray:
    """Finite-difference velocities between consecutive frames (dt folded in)."""
    positions = np.asarray(positions, dtype=np.float64)
    return np.diff(positions, axis=-2)


def object_velocity_features(translations: np.ndarray, quats: np.ndarray) -> np.ndarray:
    """Per-step 6-DOF pose deltas: translation delta and axis-angle rotation delta."""
    steps = translations.shape[0] - 1
    out = np.empty((steps, 6))
    for k in range(steps):
        out[k] = pose_delta(
            Pose(translations[k], quats[k]), Pose(translations[k + 1], quats[k + 1])
        )
    return out


def _kind_one_hot(kind: int) -> np.ndarray:
    oh = np.zeros(2)
    oh[int(kind)] = 1.0
    return oh


def mesh_world_history(mesh: Mesh, translations: np.ndarray, quats: np.ndarray) -> np.ndarray:
    """Vertex world positions for every frame of a pose window: (K, WINDOW, 3)."""
    frames = translations.shape[0]
    out = np.empty((mesh.num_vertices, frames, 3))
    for k in range(frames):
        out[:, k] = mesh.vertices @ quat_to_matrix(quats[k]).T + translations[k]
    return out


# ---------------------------------------------------------------------------
# Graph assembly
# ---------------------------------------------------------------------------


def build_graph(state: SceneState, cfg: GraphConfig) -> SimGraph:
    """Assemble the full interaction graph for one scene window.

    Liquid-object edges use the single globally closest surface point per
    (object, particle) pair, computed in the object frame under the current
    pose and mapped back to world coordinates.
    """
    n = state.num_particles
    q = state.num_objects
    if len(state.meshes) != q or len(state.bvhs) != q:
        raise GraphError("mesh-not-prepared")
    for b in state.bvhs:
        if b is None:
            raise GraphError("mesh-not-prepared")

    positions = state.positions()

    # liquid node features: stacked velocity history (+ optional floor distance)
    vel = velocity_history(state.particle_history).reshape(n, 3 * HISTORY)
    if cfg.include_floor_distance:
        floor = np.clip(positions[:, 2] - cfg.floor_z, -cfg.r_l, cfg.r_l)
        liquid_feats = np.concatenate([vel, floor[:, None]], axis=1)
    else:
        liquid_feats = vel

    # object node features: pose deltas + kind one-hot
    object_feats = np.empty((q, cfg.object_feat_dim))
    for i in range(q):
        deltas = object_velocity_features(state.object_translations[i], state.object_quats[i])
        object_feats[i] = np.concatenate([deltas.reshape(-1), _kind_one_hot(state.object_kind[i])])

    # liquid-liquid edges; pair (i, j) becomes edge j -> i with receiver-relative features
    pairs = spatial_hash_neighbors(positions, cfg.r_l)
    rel = positions[pairs[:, 0]] - positions[pairs[:, 1]]
    e_l = EdgeSet(
        src=pairs[:, 1].copy(),
        dst=pairs[:, 0].copy(),
        feats=np.concatenate([rel, np.linalg.norm(rel, axis=1, keepdims=True)], axis=1),
    )

    # object-liquid edges through surface closest points
    ol_src, ol_dst, ol_feats, ol_local, ol_tri = [], [], [], [], []
    for i in range(q):
        pose = state.pose(i)
        c_world, dist, tri, c_local = world_closest_points(
            state.meshes[i], state.bvhs[i], pose, positions
        )
        mask = dist < cfg.r_ol
        if not mask.any():
            continue
        c = c_world[mask]
        p = positions[mask]
        to_p = c - p
        to_o = c - pose.translation
        ol_src.append(np.full(mask.sum(), i, dtype=np.int64))
        ol_dst.append(np.flatnonzero(mask).astype(np.int64))
        ol_feats.append(
            np.concatenate(
                [
                    to_p,
                    to_o,
                    np.linalg.norm(to_p, axis=1, keepdims=True),
                    np.linalg.norm(to_o, axis=1, keepdims=True),
                ],
                axis=1,
            )
        )
        ol_local.append(c_local[mask])
        ol_tri.append(tri[mask])
    if ol_src:
        e_ol = EdgeSet(np.concatenate(ol_src), np.concatenate(ol_dst), np.concatenate(ol_feats))
        ol_closest_local = np.concatenate(ol_local)
        ol_triangle = np.concatenate(ol_tri)
        order = np.lexsort((e_ol.dst, e_ol.src))
        e_ol = EdgeSet(e_ol.src[order], e_ol.dst[order], e_ol.feats[order])
        ol_closest_local = ol_closest_local[order]
        ol_triangle = ol_triangle[order]
    else:
        e_ol = EdgeSet.empty(8)
        ol_closest_local = np.zeros((0, 3))
        ol_triangle = np.zeros(0, dtype=np.int32)

    # mesh nodes and their object edges (full model only)
    if cfg.include_mesh_nodes:
        mesh_feats_parts, owner_parts, om_feats_parts = [], [], []
        for i in range(q):
            hist = mesh_world_history(
                state.meshes[i], state.object_translations[i], state.object_quats[i]
            )
            k = state.meshes[i].num_vertices
            mvel = velocity_history(hist).reshape(k, 3 * HISTORY)
            oh = np.tile(_kind_one_hot(state.object_kind[i]), (k, 1))
            mesh_feats_parts.append(np.concatenate([mvel, oh], axis=1))
            owner_parts.append(np.full(k, i, dtype=np.int64))
            rel_m = hist[:, -1] - state.object_translations[i, -1]
            om_feats_parts.append(
                np.concatenate([rel_m, np.linalg.norm(rel_m, axis=1, keepdims=True)], axis=1)
            )
        mesh_feats = np.concatenate(mesh_feats_parts)
        mesh_owner = np.concatenate(owner_parts)
        om_feats = np.concatenate(om_feats_parts)
        mesh_ids = np.arange(len(mesh_owner), dtype=np.int64)
        e_om = EdgeSet(src=mesh_owner.copy(), dst=mesh_ids, feats=om_feats)
        e_mo = EdgeSet(src=mesh_ids.copy(), dst=mesh_owner.copy(), feats=om_feats.copy())
    else:
        mesh_feats = np.zeros((0, cfg.mesh_feat_dim))
        mesh_owner = np.zeros(0, dtype=np.int64)
        e_om = EdgeSet.empty(4)
        e_mo = EdgeSet.empty(4)

    return SimGraph(
        liquid_feats=liquid_feats,
        object_feats=object_feats,
        mesh_feats=mesh_feats,
        mesh_owner=mesh_owner,
        e_l=e_l,
        e_ol=e_ol,
        e_om=e_om,
        e_mo=e_mo,
        ol_closest_local=ol_closest_local,
        ol_triangle=ol_triangle,
    )


def mean_liquid_degree(graph: SimGraph) -> float:
    if graph.num_liquid == 0:
        return 0.0
    return len(graph.e_l) / graph.num_liquid


def merge_graphs(graphs: list[SimGraph]) -> SimGraph:
    """Disjoint union of graphs (per-sample node index offsets), for batching."""
    if len(graphs) == 1:
        return graphs[0]

    def cat_edges(sets: list[EdgeSet], src_off: list[int], dst_off: list[int], dim: int) -> EdgeSet:
        if not sets:
            return EdgeSet.empty(dim)
        return EdgeSet(
            np.concatenate([e.src + o for e, o in zip(sets, src_off)]),
            np.concatenate([e.dst + o for e, o in zip(sets, dst_off)]),
            np.concatenate([e.feats for e in sets]),
        )

    nl = np.cumsum([0] + [g.num_liquid for g in graphs])
    no = np.cumsum([0] + [g.num_objects for g in graphs])
    nm = np.cumsum([0] + [g.num_mesh for g in graphs])
    return SimGraph(
        liquid_feats=np.concatenate([g.liquid_feats for g in graphs]),
        object_feats=np.concatenate([g.object_feats for g in graphs]),
        mesh_feats=np.concatenate([g.mesh_feats for g in graphs]),
        mesh_owner=np.concatenate([g.mesh_owner + o for g, o in zip(graphs, no)]),
        e_l=cat_edges([g.e_l for g in graphs], nl, nl, 4),
        e_ol=cat_edges([g.e_ol for g in graphs], no, nl, 8),
        e_om=cat_edges([g.e_om for g in graphs], no, nm, 4),
        e_mo=cat_edges([g.e_mo for g in graphs], nm, no, 4),
        ol_closest_local=np.concatenate([g.ol_closest_local for g in graphs]),
        ol_triangle=np.concatenate([g.ol_triangle for g in graphs]),
    )
