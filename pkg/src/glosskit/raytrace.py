"""Ray-traced visibility over surfels.

Each surfel is bounded by a stretched icosahedron (the proxy hull). A
median-split BVH over the hull boxes is traversed with ray packets: every
node is tested against the whole subset of rays that reached it, so the
Python overhead scales with the node count rather than the ray count.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from .brdf import DEFAULT_NS, fibonacci_dirs
from .surfel import Scene, Surfel

DEFAULT_ALPHA_MIN = 0.01
_PARALLEL_EPS = 1e-9
_BARY_EPS = 1e-9


def _icosahedron():
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = []
    for a, b in itertools.product((-1.0, 1.0), repeat=2):
        verts += [(0.0, a, b * phi), (a, b * phi, 0.0), (b * phi, 0.0, a)]
    verts = np.array(verts)
    faces = [
        tri
        for tri in itertools.combinations(range(12), 3)
        if all(abs(np.linalg.norm(verts[i] - verts[j]) - 2.0) < 1e-9 for i, j in itertools.combinations(tri, 2))
    ]
    # unit inradius so the hull contains the unit sphere, hence the scaled ellipse
    inradius = phi * phi / math.sqrt(3.0)
    return verts / inradius, np.array(faces, dtype=np.int64)


ICOSA_VERTS, ICOSA_FACES = _icosahedron()


@dataclass
class ProxyHull:
    vertices: np.ndarray  # (12, 3)
    faces: np.ndarray  # (20, 3)

    @property
    def lo(self):
        return self.vertices.min(0)

    @property
    def hi(self):
        return self.vertices.max(0)

    def contains(self, points, tol: float = 1e-9) -> np.ndarray:
        """Convex-hull membership via the 20 face half-spaces."""
        points = np.atleast_2d(points)
        tri = self.vertices[self.faces]
        nrm = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        centroid = self.vertices.mean(0)
        flip = np.einsum("fk,fk->f", nrm, tri[:, 0] - centroid) < 0
        nrm[flip] *= -1
        side = np.einsum("fk,pfk->pf", nrm, points[:, None, :] - tri[None, :, 0])
        scale = np.linalg.norm(nrm, axis=1)
        return np.all(side <= tol * scale, axis=1)


@dataclass
class SurfelArrays:
    """Plain numpy view of the geometry the tracer needs."""

    positions: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    normals: np.ndarray
    scales: np.ndarray
    opacity: np.ndarray

    def __len__(self):
        return len(self.positions)

    @classmethod
    def of(cls, scene) -> "SurfelArrays":
        if isinstance(scene, SurfelArrays):
            return scene
        if not isinstance(scene, Scene):
            scene = Scene.from_surfels(list(scene))
        g = lambda x: x.detach().cpu().numpy().astype(np.float64)  # noqa: E731
        return cls(
            g(scene.positions),
            g(scene.tangent_u),
            g(scene.tangent_v),
            g(scene.normals()),
            g(scene.scales),
            g(scene.opacity),
        )


def proxy_hull(surfel: Surfel, alpha_min: float = DEFAULT_ALPHA_MIN) -> ProxyHull | None:
    if not 0.0 < alpha_min < 1.0:
        raise ValueError("alpha_min must lie in (0, 1)")
    return _hull(
        surfel.position,
        surfel.tangent_u,
        surfel.tangent_v,
        np.cross(surfel.tangent_u, surfel.tangent_v),
        surfel.scale_u,
        surfel.scale_v,
        surfel.opacity,
        alpha_min,
    )


def hull_scale(opacity: float, alpha_min: float) -> float | None:
    if opacity <= alpha_min:
        return None
    return math.sqrt(2.0 * math.log(opacity / alpha_min))


def _hull(p, tu, tv, n, su, sv, opacity, alpha_min):
    k = hull_scale(opacity, alpha_min)
    if k is None:
        return None
    sz = 0.01 * min(su, sv)
    R = np.stack([tu, tv, n / np.linalg.norm(n)], axis=1)
    local = ICOSA_VERTS * (k * np.array([su, sv, sz]))
    return ProxyHull(local @ R.T + p, ICOSA_FACES)


@dataclass
class SurfelBvh:
    lo: np.ndarray  # (M, 3) node boxes
    hi: np.ndarray
    left: np.ndarray  # (M,) child node ids, -1 at leaves
    right: np.ndarray
    leaf_surfel: np.ndarray  # (M,) surfel index, -1 at internal nodes
    hulls: dict  # surfel index -> ProxyHull

    @property
    def empty(self) -> bool:
        return len(self.lo) == 0

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.leaf_surfel >= 0)


def build_bvh(surfels, alpha_min: float = DEFAULT_ALPHA_MIN) -> SurfelBvh:
    """Median-split BVH, one surfel per leaf; surfels at or below alpha_min are left out."""
    arr = SurfelArrays.of(surfels)
    hulls = {}
    for i in range(len(arr)):
        h = _hull(
            arr.positions[i], arr.tangent_u[i], arr.tangent_v[i], arr.normals[i],
            arr.scales[i, 0], arr.scales[i, 1], arr.opacity[i], alpha_min,
        )
        if h is not None:
            hulls[i] = h
    lo, hi, left, right, leaf = [], [], [], [], []
    if not hulls:
        z = np.zeros((0, 3))
        e = np.zeros(0, dtype=np.int64)
        return SurfelBvh(z, z.copy(), e, e.copy(), e.copy(), hulls)

    idx = np.array(sorted(hulls), dtype=np.int64)
    box_lo = np.stack([hulls[i].lo for i in idx])
    box_hi = np.stack([hulls[i].hi for i in idx])
    centers = 0.5 * (box_lo + box_hi)

    def new_node():
        lo.append(None), hi.append(None), left.append(-1), right.append(-1), leaf.append(-1)
        return len(lo) - 1

    def build(sel):
        node = new_node()
        lo[node] = box_lo[sel].min(0)
        hi[node] = box_hi[sel].max(0)
        if len(sel) == 1:
            leaf[node] = idx[sel[0]]
            return node
        c = centers[sel]
        axis = int(np.argmax(c.max(0) - c.min(0)))
        order = sel[np.argsort(c[:, axis], kind="stable")]
        half = len(order) // 2
        l_id = build(order[:half])
        r_id = build(order[half:])
        left[node], right[node] = l_id, r_id
        return node

    build(np.arange(len(idx)))
    return SurfelBvh(
        np.array(lo), np.array(hi), np.array(left), np.array(right), np.array(leaf, dtype=np.int64), hulls
    )


def _slab(lo, hi, origins, inv_dirs):
    pad = 1e-9 * (1.0 + np.abs(hi - lo).max())
    t1 = (lo - pad - origins) * inv_dirs
    t2 = (hi + pad - origins) * inv_dirs
    t_near = np.minimum(t1, t2).max(1)
    t_far = np.maximum(t1, t2).min(1)
    return t_near, t_far


def _safe_inverse(dirs):
    d = np.where(dirs == 0.0, 1e-300, dirs)
    with np.errstate(over="ignore", divide="ignore"):
        return 1.0 / d


def ray_hits_hull(hull: ProxyHull, origins, dirs) -> np.ndarray:
    """Two-sided Moller-Trumbore against the 20 hull faces; True if any face is hit at t >= 0."""
    tri = hull.vertices[hull.faces]  # (F, 3, 3)
    v0 = tri[:, 0]
    e1 = tri[:, 1] - v0
    e2 = tri[:, 2] - v0
    pvec = np.cross(dirs[:, None, :], e2[None])  # (R, F, 3)
    det = np.einsum("rfk,fk->rf", pvec, e1)
    ok = np.abs(det) > 1e-300
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origins[:, None, :] - v0[None]
    u = np.einsum("rfk,rfk->rf", tvec, pvec) * inv
    qvec = np.cross(tvec, e1[None])
    v = np.einsum("rk,rfk->rf", dirs, qvec) * inv
    t = np.einsum("fk,rfk->rf", e2, qvec) * inv
    hit = ok & (u >= -_BARY_EPS) & (v >= -_BARY_EPS) & (u + v <= 1 + _BARY_EPS) & (t >= -_BARY_EPS)
    return hit.any(1)


def _plane_response(arr: SurfelArrays, i: int, origins, dirs):
    """Vectorized ray-plane hit of surfel i: returns (t, response, valid)."""
    n = arr.normals[i]
    denom = dirs @ n
    valid = np.abs(denom) >= _PARALLEL_EPS
    safe = np.where(valid, denom, 1.0)
    t = ((arr.positions[i] - origins) @ n) / safe
    valid &= t > 0
    x = origins + t[:, None] * dirs - arr.positions[i]
    u = (x @ arr.tangent_u[i]) / arr.scales[i, 0]
    v = (x @ arr.tangent_v[i]) / arr.scales[i, 1]
    resp = np.exp(-0.5 * (u * u + v * v))
    return t, np.where(valid, resp, 0.0), valid


def surfel_response(ray, surfel: Surfel):
    """Exact ray response: {'t', 'response'} or None on a miss."""
    origin, direction = (np.asarray(x, dtype=np.float64) for x in ray)
    arr = SurfelArrays.of([surfel])
    t, resp, valid = _plane_response(arr, 0, origin[None], direction[None])
    if not valid[0]:
        return None
    return {"t": float(t[0]), "response": float(resp[0])}


def _traverse(bvh: SurfelBvh, origins, dirs, t_max, on_leaf):
    if bvh.empty or len(origins) == 0:
        return
    inv = _safe_inverse(dirs)
    stack = [(0, np.arange(len(origins)))]
    while stack:
        node, rays = stack.pop()
        t_near, t_far = _slab(bvh.lo[node], bvh.hi[node], origins[rays], inv[rays])
        keep = (t_near <= t_far) & (t_far >= 0.0) & (t_near <= t_max[rays])
        rays = rays[keep]
        if len(rays) == 0:
            continue
        s = bvh.leaf_surfel[node]
        if s >= 0:
            on_leaf(int(s), rays)
        else:
            stack.append((bvh.right[node], rays))
            stack.append((bvh.left[node], rays))


def transmittance_batch(origins, dirs, bvh: SurfelBvh, surfels, t_max=np.inf, exclude=None,
                        alpha_min: float = DEFAULT_ALPHA_MIN, use_hull: bool = True) -> np.ndarray:
    """Product of (1 - alpha) over surfels hit with 0 < t < t_max and alpha >= alpha_min."""
    arr = SurfelArrays.of(surfels)
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    R = len(origins)
    t_max = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (R,))
    excl = np.full(R, -1, dtype=np.int64) if exclude is None else np.broadcast_to(np.asarray(exclude), (R,))
    T = np.ones(R)

    def on_leaf(s, rays):
        o, d = origins[rays], dirs[rays]
        if use_hull:
            h = ray_hits_hull(bvh.hulls[s], o, d)
            rays, o, d = rays[h], o[h], d[h]
        t, resp, valid = _plane_response(arr, s, o, d)
        alpha = arr.opacity[s] * resp
        take = valid & (t < t_max[rays]) & (alpha >= alpha_min) & (excl[rays] != s)
        T[rays[take]] *= 1.0 - alpha[take]

    _traverse(bvh, origins, dirs, t_max, on_leaf)
    return T


def transmittance(ray, bvh: SurfelBvh, surfels, t_max: float = np.inf, exclude: int | None = None,
                  alpha_min: float = DEFAULT_ALPHA_MIN) -> float:
    if not t_max > 0:
        raise ValueError("t_max must be positive")
    origin, direction = ray
    return float(transmittance_batch(origin, direction, bvh, surfels, t_max, exclude, alpha_min)[0])


def visibility_rays(scene: Scene, ns: int = DEFAULT_NS):
    """Origins (N*ns, 3), directions (N*ns, 3) and owning surfel ids for the visibility table."""
    arr = SurfelArrays.of(scene)
    n = arr.normals
    dirs = fibonacci_dirs(ns, scene.normals().detach()).cpu().numpy()  # (N, ns, 3)
    eps = 1e-3 * arr.scales.min(1)
    origins = arr.positions + eps[:, None] * n
    N = len(arr)
    return (
        np.repeat(origins, ns, axis=0),
        dirs.reshape(N * ns, 3),
        np.repeat(np.arange(N), ns),
    )


def precompute_visibility(scene: Scene, alpha_min: float = DEFAULT_ALPHA_MIN, ns: int = DEFAULT_NS,
                          bvh: SurfelBvh | None = None) -> np.ndarray:
    """Visibility table (N, ns): transmittance toward each Fibonacci direction of each surfel."""
    N = len(scene)
    if N == 0:
        return np.ones((0, ns))
    if bvh is None:
        bvh = build_bvh(scene, alpha_min)
    origins, dirs, owner = visibility_rays(scene, ns)
    T = transmittance_batch(origins, dirs, bvh, scene, np.inf, owner, alpha_min)
    return T.reshape(N, ns)


def bench_proxy(scene, origins, dirs, alpha_min: float = DEFAULT_ALPHA_MIN, bvh: SurfelBvh | None = None) -> dict:
    """Leaf candidates admitted by box tests alone vs. those also passing the hull test."""
    if bvh is None:
        bvh = build_bvh(scene, alpha_min)
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    counts = {"aabb": 0, "proxy": 0}

    def on_leaf(s, rays):
        counts["aabb"] += len(rays)
        counts["proxy"] += int(ray_hits_hull(bvh.hulls[s], origins[rays], dirs[rays]).sum())

    t_inf = np.full(len(origins), np.inf)
    start = time.perf_counter()
    _traverse(bvh, origins, dirs, t_inf, on_leaf)
    elapsed = time.perf_counter() - start

    start = time.perf_counter()
    transmittance_batch(origins, dirs, bvh, scene, np.inf, None, alpha_min, use_hull=True)
    t_proxy = time.perf_counter() - start
    start = time.perf_counter()
    transmittance_batch(origins, dirs, bvh, scene, np.inf, None, alpha_min, use_hull=False)
    t_aabb = time.perf_counter() - start

    ratio = counts["proxy"] / counts["aabb"] if counts["aabb"] else 1.0
    return {
        "candidate_hits_proxy": counts["proxy"],
        "candidate_hits_aabb": counts["aabb"],
        "ratio": ratio,
        "traversal_seconds": elapsed,
        "query_seconds_proxy": t_proxy,
        "query_seconds_aabb": t_aabb,
    }
