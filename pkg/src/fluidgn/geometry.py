"""Triangle meshes, rigid poses, and BVH-accelerated closest-point queries.

All geometry lives in float64. Meshes are immutable after construction and a
built Bvh can be queried from many threads concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

DEGENERATE_AREA = 1e-12
BVH_LEAF_SIZE = 4


class GeometryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Quaternions (w, x, y, z)
# ---------------------------------------------------------------------------


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise GeometryError("zero-norm quaternion")
    return q / n


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise GeometryError("zero-norm rotation axis")
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis / n])


def quat_to_axis_angle(q: np.ndarray) -> np.ndarray:
    """Rotation vector (axis * angle) of a unit quaternion, angle in [0, pi]."""
    q = np.asarray(q, dtype=np.float64)
    if q[0] < 0.0:  # canonical hemisphere keeps the angle minimal
        q = -q
    vn = np.linalg.norm(q[1:])
    if vn < 1e-15:
        return np.zeros(3)
    angle = 2.0 * np.arctan2(vn, q[0])
    return q[1:] * (angle / vn)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class Pose:
    """Rigid transform p -> R(orientation) p + translation."""

    translation: np.ndarray
    orientation: np.ndarray  # unit quaternion (w, x, y, z)

    def __post_init__(self):
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3)
        )
        object.__setattr__(self, "orientation", quat_normalize(self.orientation))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)


def apply_pose(pose: Pose, p: np.ndarray) -> np.ndarray:
    """Apply a pose to one point or a batch of points (..., 3)."""
    p = np.asarray(p, dtype=np.float64)
    return p @ pose.matrix().T + pose.translation


def invert_pose(pose: Pose) -> Pose:
    qc = quat_conjugate(pose.orientation)
    return Pose(-(quat_to_matrix(qc) @ pose.translation), qc)


def compose_pose(a: Pose, b: Pose) -> Pose:
    """Pose such that compose(a, b)(p) == a(b(p)). Renormalizes the quaternion."""
    return Pose(a.matrix() @ b.translation + a.translation, quat_mul(a.orientation, b.orientation))


def pose_delta(prev: Pose, curr: Pose) -> np.ndarray:
    """6-vector [translation delta, axis-angle of curr * prev^-1] between poses."""
    dq = quat_mul(curr.orientation, quat_conjugate(prev.orientation))
    return np.concatenate([curr.translation - prev.translation, quat_to_axis_angle(dq)])


# ---------------------------------------------------------------------------
# Mesh
# ---------------------------------------------------------------------------


@dataclass
class Mesh:
    """Triangulated surface in its object-local frame."""

    vertices: np.ndarray  # (K, 3) float64
    triangles: np.ndarray  # (T, 3) int32
    object_id: int = 0
    _normals: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        if len(self.vertices) < 3 or len(self.triangles) < 1:
            raise GeometryError("empty-mesh")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise GeometryError("triangle index out of range")
        if np.any(triangle_areas(self.vertices, self.triangles) <= DEGENERATE_AREA):
            raise GeometryError("degenerate-triangle")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    def triangle_normals(self) -> np.ndarray:
        """Unit normals per triangle, orientation given by the winding."""
        if self._normals is None:
            v = self.vertices
            t = self.triangles
            n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
            self._normals = n / np.linalg.norm(n, axis=1, keepdims=True)
        return self._normals


def mesh_pseudonormals(mesh: Mesh):
    """Angle-weighted pseudonormals for inside/outside tests at any feature.

    Returns (face_normals (T,3), edge_normals (T,3,3), vertex_normals (K,3)).
    Edge k of a face joins its vertices k and k+1; boundary edges fall back to
    the face normal. Classifying the side of the surface with the pseudonormal
    of the nearest feature is robust at convex and concave edges alike.
    """
    v = mesh.vertices
    t = mesh.triangles
    fn = mesh.triangle_normals()
    edge_faces: dict[tuple[int, int], list[int]] = {}
    for f in range(len(t)):
        a, b, c = t[f]
        for i, j in ((a, b), (b, c), (c, a)):
            edge_faces.setdefault((min(i, j), max(i, j)), []).append(f)
    edge_n = np.zeros((len(t), 3, 3))
    for f in range(len(t)):
        a, b, c = t[f]
        for k, (i, j) in enumerate(((a, b), (b, c), (c, a))):
            acc = fn[edge_faces[(min(i, j), max(i, j))]].sum(axis=0)
            norm = np.linalg.norm(acc)
            edge_n[f, k] = acc / norm if norm > 1e-12 else fn[f]
    vert_n = np.zeros((len(v), 3))
    for f in range(len(t)):
        idx = t[f]
        pts = v[idx]
        for k in range(3):
            e1 = pts[(k + 1) % 3] - pts[k]
            e2 = pts[(k + 2) % 3] - pts[k]
            cosang = np.dot(e1, e2) / (np.linalg.norm(e1) * np.linalg.norm(e2))
            vert_n[idx[k]] += np.arccos(np.clip(cosang, -1.0, 1.0)) * fn[f]
    norms = np.linalg.norm(vert_n, axis=1)
    degenerate = norms <= 1e-12
    norms[degenerate] = 1.0
    vert_n /= norms[:, None]
    if degenerate.any():  # isolated or knife vertices: borrow any incident face
        for f in range(len(t)):
            for vid in t[f]:
                if degenerate[vid]:
                    vert_n[vid] = fn[f]
    return fn, edge_n, vert_n


@njit(cache=True)
def _feature_normal(cp, ti, verts, tris, face_n, edge_n, vert_n):
    """Pseudonormal of the feature (face/edge/vertex) the closest point is on."""
    a = verts[tris[ti, 0]]
    b = verts[tris[ti, 1]]
    c = verts[tris[ti, 2]]
    v0 = b - a
    v1 = c - a
    v2 = cp - a
    d00 = _dot3(v0, v0)
    d01 = _dot3(v0, v1)
    d11 = _dot3(v1, v1)
    d20 = _dot3(v2, v0)
    d21 = _dot3(v2, v1)
    denom = d00 * d11 - d01 * d01
    if denom <= 0.0:
        return face_n[ti]
    wb = (d11 * d20 - d01 * d21) / denom
    wc = (d00 * d21 - d01 * d20) / denom
    wa = 1.0 - wb - wc
    eps = 1e-6
    za = wa < eps
    zb = wb < eps
    zc = wc < eps
    if not (za or zb or zc):
        return face_n[ti]
    if zb and zc:
        return vert_n[tris[ti, 0]]
    if za and zc:
        return vert_n[tris[ti, 1]]
    if za and zb:
        return vert_n[tris[ti, 2]]
    if zc:
        return edge_n[ti, 0]  # edge a-b
    if za:
        return edge_n[ti, 1]  # edge b-c
    return edge_n[ti, 2]  # edge c-a


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    v = np.asarray(vertices, dtype=np.float64)
    t = np.asarray(triangles)
    cross = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    return 0.5 * np.linalg.norm(cross, axis=1)


def load_obj(path) -> Mesh:
    """Load a triangulated Wavefront OBJ (`v` and `f` records, 1-based indices)."""
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                if len(idx) != 3:
                    raise GeometryError(f"non-triangular face at line {lineno} in {path}")
                if any(i <= 0 for i in idx):
                    raise GeometryError(f"unsupported face index at line {lineno} in {path}")
                faces.append([i - 1 for i in idx])
    if not vertices or not faces:
        raise GeometryError("empty-mesh")
    return Mesh(np.array(vertices), np.array(faces, dtype=np.int32))


def save_obj(path, mesh: Mesh) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


# ---------------------------------------------------------------------------
# Closest-point primitives (numba kernels)
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _dot3(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@njit(cache=True)
def _closest_on_triangle(p, a, b, c):
    """Closest point on triangle abc to p (Ericson, Real-Time Collision Detection)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = _dot3(ab, ap)
    d2 = _dot3(ac, ap)
    if d1 <= 0.0 and d2 <= 0.0:
        return a.copy()

    bp = p - b
    d3 = _dot3(ab, bp)
    d4 = _dot3(ac, bp)
    if d3 >= 0.0 and d4 <= d3:
        return b.copy()

    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return a + v * ab

    cp = p - c
    d5 = _dot3(ab, cp)
    d6 = _dot3(ac, cp)
    if d6 >= 0.0 and d5 <= d6:
        return c.copy()

    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a + w * ac

    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + w * (c - b)

    denom = va + vb + vc
    v = vb / denom
    w = vc / denom
    return a + v * ab + w * ac


@njit(cache=True, inline="always")
def _box_dist_sq(p, lo, hi):
    d = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            e = lo[k] - p[k]
            d += e * e
        elif p[k] > hi[k]:
            e = p[k] - hi[k]
            d += e * e
    return d


@njit(cache=True)
def _scan_closest(q, verts, tris):
    """Linear scan over all triangles; ties keep the lowest triangle id."""
    best_d2 = np.inf
    best_tri = -1
    best_pt = np.zeros(3)
    for ti in range(len(tris)):
        cp = _closest_on_triangle(
            q, verts[tris[ti, 0]], verts[tris[ti, 1]], verts[tris[ti, 2]]
        )
        d = q - cp
        d2 = _dot3(d, d)
        if d2 < best_d2:
            best_d2 = d2
            best_tri = ti
            best_pt = cp
    return best_pt, best_d2, best_tri


@njit(cache=True)
def _bvh_closest(
    q, verts, tris, node_lo, node_hi, node_left, node_right, node_start, node_count, order
):
    """Best-first traversal on a binary min-heap keyed by box lower-bound distance."""
    cap = len(node_lo) + 2
    heap_d = np.empty(cap)
    heap_n = np.empty(cap, dtype=np.int32)
    size = 0

    # push root
    heap_d[0] = _box_dist_sq(q, node_lo[0], node_hi[0])
    heap_n[0] = 0
    size = 1

    best_d2 = np.inf
    best_tri = -1
    best_pt = np.zeros(3)

    while size > 0:
        # pop min
        d2 = heap_d[0]
        node = heap_n[0]
        size -= 1
        heap_d[0] = heap_d[size]
        heap_n[0] = heap_n[size]
        i = 0
        while True:
            l = 2 * i + 1
            r = l + 1
            s = i
            if l < size and heap_d[l] < heap_d[s]:
                s = l
            if r < size and heap_d[r] < heap_d[s]:
                s = r
            if s == i:
                break
            heap_d[i], heap_d[s] = heap_d[s], heap_d[i]
            heap_n[i], heap_n[s] = heap_n[s], heap_n[i]
            i = s

        if d2 >= best_d2:
            break  # heap min is a lower bound for everything left

        if node_start[node] >= 0:  # leaf
            for k in range(node_start[node], node_start[node] + node_count[node]):
                ti = order[k]
                cp = _closest_on_triangle(
                    q, verts[tris[ti, 0]], verts[tris[ti, 1]], verts[tris[ti, 2]]
                )
                dv = q - cp
                dd = _dot3(dv, dv)
                if dd < best_d2 or (dd == best_d2 and ti < best_tri):
                    best_d2 = dd
                    best_tri = ti
                    best_pt = cp
        else:
            for child in (node_left[node], node_right[node]):
                cd = _box_dist_sq(q, node_lo[child], node_hi[child])
                if cd < best_d2:
                    heap_d[size] = cd
                    heap_n[size] = child
                    i = size
                    size += 1
                    while i > 0:
                        parent = (i - 1) // 2
                        if heap_d[parent] <= heap_d[i]:
                            break
                        heap_d[i], heap_d[parent] = heap_d[parent], heap_d[i]
                        heap_n[i], heap_n[parent] = heap_n[parent], heap_n[i]
                        i = parent

    return best_pt, best_d2, best_tri


@njit(cache=True, parallel=True)
def _bvh_closest_batch(
    qs, verts, tris, node_lo, node_hi, node_left, node_right, node_start, node_count, order,
    out_pts, out_d, out_tri,
):
    for i in prange(len(qs)):
        pt, d2, ti = _bvh_closest(
            qs[i], verts, tris, node_lo, node_hi, node_left, node_right,
            node_start, node_count, order,
        )
        out_pts[i, 0] = pt[0]
        out_pts[i, 1] = pt[1]
        out_pts[i, 2] = pt[2]
        out_d[i] = np.sqrt(d2)
        out_tri[i] = ti


@njit(cache=True, parallel=True)
def _scan_closest_batch(qs, verts, tris, out_pts, out_d, out_tri):
    for i in prange(len(qs)):
        pt, d2, ti = _scan_closest(qs[i], verts, tris)
        out_pts[i, 0] = pt[0]
        out_pts[i, 1] = pt[1]
        out_pts[i, 2] = pt[2]
        out_d[i] = np.sqrt(d2)
        out_tri[i] = ti


# ---------------------------------------------------------------------------
# BVH
# ---------------------------------------------------------------------------


@dataclass
class Bvh:
    """Flat binary BVH; leaves reference ranges of the triangle permutation."""

    node_lo: np.ndarray
    node_hi: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    node_start: np.ndarray  # -1 for internal nodes
    node_count: np.ndarray
    order: np.ndarray  # permutation of triangle ids

    @property
    def num_nodes(self) -> int:
        return len(self.node_lo)

    def is_leaf(self, n: int) -> bool:
        return self.node_start[n] >= 0


@dataclass(frozen=True)
class ClosestPointResult:
    point: np.ndarray
    distance: float
    triangle_id: int


def build_bvh(mesh: Mesh, leaf_size: int = BVH_LEAF_SIZE) -> Bvh:
    """Top-down median-split BVH over the mesh triangles; deterministic."""
    tris = mesh.triangles
    if len(tris) == 0:
        raise GeometryError("empty-mesh")
    tv = mesh.vertices[tris]  # (T, 3, 3)
    tri_lo = tv.min(axis=1)
    tri_hi = tv.max(axis=1)
    centroids = tv.mean(axis=1)

    node_lo: list[np.ndarray] = []
    node_hi: list[np.ndarray] = []
    node_left: list[int] = []
    node_right: list[int] = []
    node_start: list[int] = []
    node_count: list[int] = []
    order = np.arange(len(tris), dtype=np.int32)

    def new_node(lo, hi):
        node_lo.append(lo)
        node_hi.append(hi)
        node_left.append(-1)
        node_right.append(-1)
        node_start.append(-1)
        node_count.append(0)
        return len(node_lo) - 1

    # iterative build; stack of (node, start, end) over `order`
    root = new_node(tri_lo[order].min(axis=0), tri_hi[order].max(axis=0))
    stack = [(root, 0, len(tris))]
    while stack:
        node, start, end = stack.pop()
        span = order[start:end]
        if end - start <= leaf_size:
            node_start[node] = start
            node_count[node] = end - start
            continue
        cen = centroids[span]
        axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
        perm = np.argsort(cen[:, axis], kind="stable")
        order[start:end] = span[perm]
        mid = start + (end - start) // 2
        left_span = order[start:mid]
        right_span = order[mid:end]
        li = new_node(tri_lo[left_span].min(axis=0), tri_hi[left_span].max(axis=0))
        ri = new_node(tri_lo[right_span].min(axis=0), tri_hi[right_span].max(axis=0))
        node_left[node] = li
        node_right[node] = ri
        stack.append((ri, mid, end))
        stack.append((li, start, mid))

    return Bvh(
        node_lo=np.ascontiguousarray(node_lo, dtype=np.float64),
        node_hi=np.ascontiguousarray(node_hi, dtype=np.float64),
        node_left=np.array(node_left, dtype=np.int32),
        node_right=np.array(node_right, dtype=np.int32),
        node_start=np.array(node_start, dtype=np.int32),
        node_count=np.array(node_count, dtype=np.int32),
        order=order,
    )


def closest_point_on_triangle(p: np.ndarray, tri: np.ndarray) -> ClosestPointResult:
    """Closest point on one non-degenerate triangle (3 x 3 vertex array)."""
    tri = np.asarray(tri, dtype=np.float64).reshape(3, 3)
    if triangle_areas(tri, np.array([[0, 1, 2]]))[0] <= DEGENERATE_AREA:
        raise GeometryError("degenerate-triangle")
    p = np.asarray(p, dtype=np.float64).reshape(3)
    cp = _closest_on_triangle(p, tri[0], tri[1], tri[2])
    return ClosestPointResult(cp, float(np.linalg.norm(p - cp)), 0)


def bvh_closest_point(bvh: Bvh, mesh: Mesh, q: np.ndarray) -> ClosestPointResult:
    pts, d, ti = bvh_closest_points(bvh, mesh, np.asarray(q, dtype=np.float64).reshape(1, 3))
    return ClosestPointResult(pts[0], float(d[0]), int(ti[0]))


def bvh_closest_points(bvh: Bvh, mesh: Mesh, qs: np.ndarray):
    """Batched exact closest-point query. Returns (points, distances, triangle_ids)."""
    qs = np.ascontiguousarray(qs, dtype=np.float64)
    out_pts = np.empty_like(qs)
    out_d = np.empty(len(qs))
    out_tri = np.empty(len(qs), dtype=np.int32)
    _bvh_closest_batch(
        qs, mesh.vertices, mesh.triangles,
        bvh.node_lo, bvh.node_hi, bvh.node_left, bvh.node_right,
        bvh.node_start, bvh.node_count, bvh.order,
        out_pts, out_d, out_tri,
    )
    return out_pts, out_d, out_tri


def scan_closest_points(mesh: Mesh, qs: np.ndarray):
    """Brute-force linear scan over all triangles; reference for the BVH."""
    qs = np.ascontiguousarray(qs, dtype=np.float64)
    out_pts = np.empty_like(qs)
    out_d = np.empty(len(qs))
    out_tri = np.empty(len(qs), dtype=np.int32)
    _scan_closest_batch(qs, mesh.vertices, mesh.triangles, out_pts, out_d, out_tri)
    return out_pts, out_d, out_tri


def world_closest_point(mesh: Mesh, bvh: Bvh, pose: Pose, p_world: np.ndarray) -> ClosestPointResult:
    """Closest surface point in world frame: query in the local frame, map back."""
    pts, d, ti, _ = world_closest_points(
        mesh, bvh, pose, np.asarray(p_world, dtype=np.float64).reshape(1, 3)
    )
    return ClosestPointResult(pts[0], float(d[0]), int(ti[0]))


def world_closest_points(mesh: Mesh, bvh: Bvh, pose: Pose, ps_world: np.ndarray):
    """Batched world-frame closest-point query against a posed mesh.

    Returns (world points, world distances, triangle ids, local points); the
    local points are useful when the pose is optimized while the contact point
    is held fixed in the object frame.
    """
    inv = invert_pose(pose)
    local = apply_pose(inv, ps_world)
    pts_local, _, tri = bvh_closest_points(bvh, mesh, local)
    pts_world = apply_pose(pose, pts_local)
    d = np.linalg.norm(np.asarray(ps_world, dtype=np.float64) - pts_world, axis=1)
    return pts_world, d, tri, pts_local
