"""Shared helpers: small procedural meshes and reference implementations."""

import numpy as np

from fluidgn.geometry import Mesh


def unit_cube() -> Mesh:
    v = np.array(
        [[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float
    )
    f = np.array(
        [
            [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
            [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
            [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],
        ]
    )
    return Mesh(v, f)


def uv_sphere(n_theta: int, n_phi: int, radius: float = 1.0) -> Mesh:
    """UV sphere with triangle fans at the poles; (n_theta, n_phi) rings."""
    verts = [[0.0, 0.0, radius]]
    for i in range(1, n_theta):
        th = np.pi * i / n_theta
        for j in range(n_phi):
            ph = 2 * np.pi * j / n_phi
            verts.append(
                [
                    radius * np.sin(th) * np.cos(ph),
                    radius * np.sin(th) * np.sin(ph),
                    radius * np.cos(th),
                ]
            )
    verts.append([0.0, 0.0, -radius])
    south = len(verts) - 1
    tris = []
    ring = lambda i, j: 1 + (i - 1) * n_phi + (j % n_phi)
    for j in range(n_phi):
        tris.append([0, ring(1, j), ring(1, j + 1)])
    for i in range(1, n_theta - 1):
        for j in range(n_phi):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            tris.append([a, c, d])
            tris.append([a, d, b])
    for j in range(n_phi):
        tris.append([south, ring(n_theta - 1, j + 1), ring(n_theta - 1, j)])
    return Mesh(np.array(verts), np.array(tris, dtype=np.int32))


def random_soup(rng, n_verts=60, n_tris=90, scale=1.0) -> Mesh:
    """Random triangle soup with degenerate faces filtered out."""
    verts = rng.normal(size=(n_verts, 3)) * scale
    tris = []
    while len(tris) < n_tris:
        t = rng.integers(0, n_verts, size=3)
        if len(set(t.tolist())) < 3:
            continue
        a, b, c = verts[t]
        if 0.5 * np.linalg.norm(np.cross(b - a, c - a)) > 1e-6:
            tris.append(t)
    return Mesh(verts, np.array(tris, dtype=np.int32))


def brute_force_closest_on_triangle(p, tri, samples=100):
    """Dense barycentric sampling (10^4 points) refined once around the
    coarse minimum; independent of the analytic closest-point routine."""
    e1 = tri[1] - tri[0]
    e2 = tri[2] - tri[0]

    def scan(u_lo, u_hi, v_lo, v_hi):
        us = np.linspace(u_lo, u_hi, samples)
        vs = np.linspace(v_lo, v_hi, samples)
        uu, vv = np.meshgrid(us, vs, indexing="ij")
        mask = (uu + vv <= 1.0) & (uu >= 0.0) & (vv >= 0.0)
        pts = tri[0] + uu[mask, None] * e1 + vv[mask, None] * e2
        d = np.linalg.norm(pts - p, axis=1)
        k = int(np.argmin(d))
        return float(d[k]), float(uu[mask][k]), float(vv[mask][k])

    best, u0, v0 = scan(0.0, 1.0, 0.0, 1.0)
    step = 1.5 / samples
    refined, _, _ = scan(max(u0 - step, 0.0), min(u0 + step, 1.0),
                         max(v0 - step, 0.0), min(v0 + step, 1.0))
    return min(best, refined)


def quadratic_pairs(points, radius):
    """O(N^2) reference for the fixed-radius neighbor search."""
    n = len(points)
    out = []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            d = points[i] - points[j]
            if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] < radius * radius:
                out.append((i, j))
    return np.array(sorted(out), dtype=np.int64).reshape(-1, 2)
