"""Surface extraction and ray visibility: TSDF fusion, marching cubes, BVH, Chamfer distance."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from scipy.spatial import cKDTree

from .camera import PosedView


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self) -> int:
        return self.faces.shape[0]

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def areas(self) -> np.ndarray:
        tri = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def save_obj(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for v in self.vertices:
                fh.write(f"v {v[0]:.7g} {v[1]:.7g} {v[2]:.7g}\n")
            for f in self.faces + 1:
                fh.write(f"f {f[0]} {f[1]} {f[2]}\n")

    @classmethod
    def load_obj(cls, path: str | Path) -> "TriMesh":
        verts, faces = [], []
        for line in Path(path).read_text().splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
        return cls(np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def box_mesh(lo, hi) -> TriMesh:
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    v = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    f = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
                  [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]])
    return TriMesh(v, f)


def sample_surface(mesh: TriMesh, count: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    if len(mesh) == 0:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.areas()
    tri = mesh.triangles()[rng.choice(len(mesh), size=count, p=areas / areas.sum())]
    u, v = rng.random(count), rng.random(count)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    return tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])


def chamfer_distance(a, b) -> float:
    """Average of the two directed mean nearest-neighbour distances."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


# --- TSDF ------------------------------------------------------------------------------

@dataclass
class TsdfVolume:
    tsdf: np.ndarray  # (N, N, N), indexed [ix, iy, iz]
    weight: np.ndarray
    origin: np.ndarray
    voxel_size: float
    trunc: float

    @classmethod
    def create(cls, resolution: int = 64, lo=(-1.0, -1.0, -1.0), hi=(1.0, 1.0, 1.0), trunc_voxels: float = 4.0):
        lo = np.asarray(lo, dtype=np.float64)
        size = float(np.max(np.asarray(hi) - lo)) / resolution
        shape = (resolution,) * 3
        return cls(np.ones(shape), np.zeros(shape), lo, size, trunc_voxels * size)

    def voxel_centers(self) -> np.ndarray:
        n = self.tsdf.shape
        idx = np.stack(np.meshgrid(*[np.arange(k) for k in n], indexing="ij"), axis=-1)
        return self.origin + (idx + 0.5) * self.voxel_size

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(self.tsdf.copy(), self.weight.copy(), self.origin.copy(), self.voxel_size, self.trunc)


def tsdf_integrate(vol: TsdfVolume, depth, view: PosedView, mask=None) -> TsdfVolume:
    """Projective running-average update with unit weight per view. Returns a new volume."""
    depth = np.asarray(depth, dtype=np.float64)
    valid_px = np.isfinite(depth) & (depth > 0)
    if mask is not None:
        valid_px &= np.asarray(mask, dtype=bool)
    out = vol.copy()
    if not valid_px.any():
        return out
    pts = vol.voxel_centers().reshape(-1, 3)
    xy, z = view.project(pts)
    px = np.rint(xy[:, 0]).astype(np.int64)
    py = np.rint(xy[:, 1]).astype(np.int64)
    inside = (z > 1e-6) & (px >= 0) & (px < view.width) & (py >= 0) & (py < view.height)
    d = np.zeros(pts.shape[0])
    ok = np.zeros(pts.shape[0], dtype=bool)
    d[inside] = depth[py[inside], px[inside]]
    ok[inside] = valid_px[py[inside], px[inside]]
    dist = np.linalg.norm(pts - view.center, axis=1)
    sdf = d - dist
    upd = ok & (sdf >= -vol.trunc)
    t_new = np.clip(sdf[upd] / vol.trunc, -1.0, 1.0)
    ts = out.tsdf.reshape(-1)
    ws = out.weight.reshape(-1)
    ts[upd] = (ts[upd] * ws[upd] + t_new) / (ws[upd] + 1.0)
    ws[upd] += 1.0
    return out


def marching_cubes(vol: TsdfVolume, min_weight: float = 0.0) -> TriMesh:
    """Zero isosurface of the TSDF over observed voxels; degenerate triangles are dropped."""
    from skimage.measure import marching_cubes as _mc

    field = vol.tsdf
    observed = vol.weight > min_weight
    vals = field[observed]
    if vals.size == 0 or vals.min() >= 0 or vals.max() <= 0:
        return TriMesh.empty()
    try:
        verts, faces, _, _ = _mc(field, level=0.0, mask=observed)
    except (ValueError, RuntimeError):
        return TriMesh.empty()
    # every vertex lies on a voxel edge; a crossing into a never-updated voxel (tsdf = +1 behind the
    # truncation band) is not a surface, so drop triangles touching such edges
    lo = np.clip(np.floor(verts).astype(np.int64), 0, np.array(field.shape) - 1)
    hi = np.clip(np.ceil(verts).astype(np.int64), 0, np.array(field.shape) - 1)
    v_ok = observed[lo[:, 0], lo[:, 1], lo[:, 2]] & observed[hi[:, 0], hi[:, 1], hi[:, 2]]
    faces = faces[v_ok[faces].all(axis=1)]
    used, faces = np.unique(faces, return_inverse=True)
    verts = vol.origin + (verts[used] + 0.5) * vol.voxel_size
    faces = faces.reshape(-1, 3)
    mesh = TriMesh(verts.astype(np.float64), faces.astype(np.int64))
    if len(mesh):
        keep = mesh.areas() > 1e-14
        mesh = TriMesh(mesh.vertices, mesh.faces[keep])
    return mesh


# --- BVH ----------------------------------------------------------------------------------

@dataclass
class Bvh:
    lo: np.ndarray  # (M, 3) node boxes
    hi: np.ndarray
    left: np.ndarray  # child index or -1 for leaves
    right: np.ndarray
    start: np.ndarray  # leaf range into ``tri_order``
    count: np.ndarray
    tri_order: np.ndarray
    triangles: np.ndarray  # (F, 3, 3)

    @property
    def empty(self) -> bool:
        return self.triangles.shape[0] == 0


def build_bvh(mesh: TriMesh, leaf_size: int = 4) -> Bvh:
    tris = mesh.triangles().astype(np.float64) if len(mesh) else np.zeros((0, 3, 3))
    n = tris.shape[0]
    t_lo = tris.min(axis=1) if n else np.zeros((0, 3))
    t_hi = tris.max(axis=1) if n else np.zeros((0, 3))
    cent = tris.mean(axis=1) if n else np.zeros((0, 3))
    order = np.arange(n)
    lo, hi, left, right, start, count = [], [], [], [], [], []

    def new_node():
        for arr in (left, right, start, count):
            arr.append(-1)
        lo.append(np.zeros(3))
        hi.append(np.zeros(3))
        return len(left) - 1

    root = new_node()
    stack = [(root, 0, n)]
    while stack:
        node, s, e = stack.pop()
        ids = order[s:e]
        if e > s:
            lo[node] = t_lo[ids].min(axis=0)
            hi[node] = t_hi[ids].max(axis=0)
        if e - s <= leaf_size:
            start[node], count[node] = s, e - s
            continue
        c = cent[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        sorted_ids = ids[np.argsort(c[:, axis], kind="stable")]
        order[s:e] = sorted_ids
        mid = (s + e) // 2
        l_node, r_node = new_node(), new_node()
        left[node], right[node] = l_node, r_node
        start[node], count[node] = -1, 0
        stack.append((r_node, mid, e))
        stack.append((l_node, s, mid))
    return Bvh(np.array(lo), np.array(hi), np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
               np.array(start, dtype=np.int64), np.array(count, dtype=np.int64), order, tris)


@numba.njit(cache=True)
def _ray_tri(o, d, v0, v1, v2, t_min):
    e1 = v1 - v0
    e2 = v2 - v0
    p = np.cross(d, e2)
    det = np.dot(e1, p)
    if abs(det) < 1e-14:
        return False
    inv = 1.0 / det
    s = o - v0
    u = np.dot(s, p) * inv
    if u < 0.0 or u > 1.0:
        return False
    q = np.cross(s, e1)
    v = np.dot(d, q) * inv
    if v < 0.0 or u + v > 1.0:
        return False
    t = np.dot(e2, q) * inv
    return t > t_min


@numba.njit(cache=True)
def _ray_box(o, inv_d, lo, hi):
    tmin = 0.0
    tmax = np.inf
    for a in range(3):
        t1 = (lo[a] - o[a]) * inv_d[a]
        t2 = (hi[a] - o[a]) * inv_d[a]
        if t1 > t2:
            t1, t2 = t2, t1
        if t1 > tmin:
            tmin = t1
        if t2 < tmax:
            tmax = t2
        if tmin > tmax:
            return False
    return True


@numba.njit(cache=True)
def _any_hit(lo, hi, left, right, start, count, order, tris, origins, dirs, t_min):
    n = origins.shape[0]
    hit = np.zeros(n, dtype=np.bool_)
    stack = np.empty(128, dtype=np.int64)
    for r in range(n):
        o = origins[r]
        d = dirs[r]
        inv_d = np.empty(3)
        for a in range(3):
            inv_d[a] = 1.0 / d[a] if d[a] != 0.0 else np.inf
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0 and not hit[r]:
            sp -= 1
            node = stack[sp]
            if not _ray_box(o, inv_d, lo[node], hi[node]):
                continue
            if left[node] < 0:
                for k in range(start[node], start[node] + count[node]):
                    tri = tris[order[k]]
                    if _ray_tri(o, d, tri[0], tri[1], tri[2], t_min):
                        hit[r] = True
                        break
            else:
                stack[sp] = left[node]
                sp += 1
                stack[sp] = right[node]
                sp += 1
    return hit


def ray_hits(bvh: Bvh, origins, dirs, t_min: float = 0.0) -> np.ndarray:
    origins = np.ascontiguousarray(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
    dirs = np.ascontiguousarray(np.asarray(dirs, dtype=np.float64).reshape(-1, 3))
    if bvh.empty:
        return np.zeros(origins.shape[0], dtype=bool)
    return _any_hit(bvh.lo, bvh.hi, bvh.left, bvh.right, bvh.start, bvh.count, bvh.tri_order, bvh.triangles,
                    origins, dirs, t_min)


def trace_visibility(bvh: Bvh, origin, w_r, normal=None, eps: float = 1e-3) -> np.ndarray:
    """Binary visibility weight: 1 where the offset reflection ray hits the mesh."""
    origin = np.asarray(origin, dtype=np.float64)
    if normal is not None:
        origin = origin + eps * np.asarray(normal, dtype=np.float64)
    shape = origin.shape[:-1]
    return ray_hits(bvh, origin, w_r).astype(np.float64).reshape(shape)


def trace_visibility_soft(bvh: Bvh, origin, w_r, normal, rays: int, rng: np.random.Generator,
                          eps: float = 1e-3) -> np.ndarray:
    """Fraction of ``rays`` cosine-lobe jittered reflection rays that hit the mesh."""
    origin = np.asarray(origin, dtype=np.float64).reshape(-1, 3)
    w_r = np.asarray(w_r, dtype=np.float64).reshape(-1, 3)
    acc = np.zeros(origin.shape[0])
    for _ in range(rays):
        jitter = w_r + 0.1 * rng.normal(size=w_r.shape)
        jitter /= np.linalg.norm(jitter, axis=1, keepdims=True)
        acc += trace_visibility(bvh, origin, jitter, normal, eps)
    return acc / rays
