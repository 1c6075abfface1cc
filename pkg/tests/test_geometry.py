import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specsplat.camera import look_at, orbit_views
from specsplat.geometry import (
    TriMesh,
    TsdfVolume,
    box_mesh,
    build_bvh,
    chamfer_distance,
    marching_cubes,
    ray_hits,
    sample_surface,
    trace_visibility,
    tsdf_integrate,
)
from specsplat.pipeline.scenes import uv_sphere

from .conftest import unit


def sphere_volume(res=64, radius=0.5, sign=1.0):
    vol = TsdfVolume.create(res)
    c = vol.voxel_centers()
    vol.tsdf = sign * np.clip((np.linalg.norm(c, axis=-1) - radius) / vol.trunc, -1, 1)
    vol.weight[:] = 1.0
    return vol


def brute_hits(tris, o, d, eps=1e-12):
    """Möller–Trumbore against every triangle, one ray at a time."""
    out = np.zeros(len(o), dtype=bool)
    for i in range(len(o)):
        e1 = tris[:, 1] - tris[:, 0]
        e2 = tris[:, 2] - tris[:, 0]
        p = np.cross(d[i], e2)
        det = np.sum(e1 * p, axis=1)
        ok = np.abs(det) > eps
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = o[i] - tris[:, 0]
        u = np.sum(s * p, axis=1) * inv
        q = np.cross(s, e1)
        v = (q @ d[i]) * inv
        t = np.sum(e2 * q, axis=1) * inv
        out[i] = np.any(ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0))
    return out


def test_plane_zero_crossing():
    view = look_at(np.array([0.0, 0.0, -2.0]), np.zeros(3), up=(0, -1, 0), width=64, height=64, fov_deg=60)
    # fronto-parallel plane z = 0.3 -> ray distance depends on the pixel
    rays = view.world_rays()
    depth = (0.3 - view.center[2]) / rays[..., 2]
    vol = tsdf_integrate(TsdfVolume.create(48), depth, view)
    mesh = marching_cubes(vol, min_weight=0.5)
    assert len(mesh)
    central = np.abs(mesh.vertices[:, :2]).max(axis=1) < 0.5
    assert np.max(np.abs(mesh.vertices[central, 2] - 0.3)) < 0.5 * vol.voxel_size


def test_integrate_twice_is_idempotent_and_empty_is_noop():
    view = look_at(np.array([0.0, -2.0, 0.0]), np.zeros(3), width=32, height=32)
    depth = np.full((32, 32), 2.0)
    vol = TsdfVolume.create(24)
    once = tsdf_integrate(vol, depth, view)
    twice = tsdf_integrate(once, depth, view)
    np.testing.assert_allclose(twice.tsdf, once.tsdf, atol=1e-12)
    empty = tsdf_integrate(once, np.zeros((32, 32)), view)
    np.testing.assert_array_equal(empty.tsdf, once.tsdf)
    np.testing.assert_array_equal(empty.weight, once.weight)


def test_sphere_isosurface_accuracy():
    vol = sphere_volume()
    mesh = marching_cubes(vol)
    err = np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.5)
    assert err.max() < vol.voxel_size



def test_fused_sphere_has_no_inner_shell():
    # voxels deeper than the truncation band are never observed; they must not create a second surface
    views = orbit_views(12, 2.0, 48, 48, fov_deg=40.0, elevations=(-30.0, 30.0))
    vol = TsdfVolume.create(48)
    for view in views:
        rays = view.world_rays()
        b = np.sum(rays * view.center, axis=-1)
        disc = b * b - (view.center @ view.center - 0.5 ** 2)
        depth = np.where(disc > 0, -b - np.sqrt(np.maximum(disc, 0.0)), 0.0)
        vol = tsdf_integrate(vol, depth, view)
    mesh = marching_cubes(vol)
    assert len(mesh)
    err = np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.5)
    assert err.max() < vol.voxel_size

def test_sign_flip_same_surface():
    a = marching_cubes(sphere_volume(32))
    b = marching_cubes(sphere_volume(32, sign=-1.0))
    ka = np.unique(np.round(a.vertices, 6), axis=0)
    kb = np.unique(np.round(b.vertices, 6), axis=0)
    assert ka.shape == kb.shape
    np.testing.assert_allclose(ka, kb, atol=1e-6)


def test_constant_volume_no_triangles():
    vol = TsdfVolume.create(16)
    assert len(marching_cubes(vol)) == 0
    vol.weight[:] = 1
    assert len(marching_cubes(vol)) == 0


def test_visibility_inside_box_and_empty():
    box = build_bvh(box_mesh([-1, -1, -1], [1, 1, 1]))
    d = unit(np.random.default_rng(0).normal(size=(50, 3)))
    np.testing.assert_array_equal(trace_visibility(box, np.zeros((50, 3)), d), 1.0)
    empty = build_bvh(TriMesh.empty())
    np.testing.assert_array_equal(trace_visibility(empty, np.zeros((50, 3)), d), 0.0)


def test_sphere_above_ground_plane():
    plane = TriMesh(np.array([[-5.0, -5, 0], [5, -5, 0], [5, 5, 0], [-5, 5, 0]]), np.array([[0, 1, 2], [0, 2, 3]]))
    sphere = uv_sphere([0.0, 0.0, 1.0], 0.5, 16, 32)
    scene = TriMesh(np.concatenate([plane.vertices, sphere.vertices]),
                    np.concatenate([plane.faces, sphere.faces + len(plane.vertices)]))
    bvh = build_bvh(scene)
    p = np.array([[0.0, 0.0, 0.5]])  # bottom of the sphere
    n = np.array([[0.0, 0.0, -1.0]])
    assert trace_visibility(bvh, p, n, n)[0] == 1.0
    top = np.array([[0.0, 0.0, 1.5]])
    assert trace_visibility(bvh, top, -n, -n)[0] == 0.0


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10_000))
def test_bvh_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    tris = rng.uniform(-1, 1, (150, 1, 3)) + rng.normal(scale=0.2, size=(150, 3, 3))
    mesh = TriMesh(tris.reshape(-1, 3), np.arange(450).reshape(-1, 3))
    bvh = build_bvh(mesh)
    o = rng.uniform(-1.5, 1.5, (2000, 3))
    d = unit(rng.normal(size=(2000, 3)))
    np.testing.assert_array_equal(ray_hits(bvh, o, d), brute_hits(mesh.triangles(), o, d))


def test_visibility_binary_and_deterministic():
    bvh = build_bvh(uv_sphere([0.0, 0.0, 0.0], 0.5, 12, 24))
    rng = np.random.default_rng(1)
    o = rng.uniform(-1, 1, (300, 3))
    d = unit(rng.normal(size=(300, 3)))
    a = trace_visibility(bvh, o, d)
    assert set(np.unique(a)) <= {0.0, 1.0}
    np.testing.assert_array_equal(a, trace_visibility(bvh, o, d))


def test_chamfer_examples():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(200, 3))
    b = rng.normal(size=(150, 3))
    assert chamfer_distance(a, a) == 0.0
    assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a))
    pts = np.array([[0.0, 0, 0], [5.0, 0, 0]])
    assert chamfer_distance(pts, pts + [0, 0.3, 0]) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        chamfer_distance(a, np.zeros((0, 3)))


def test_sample_surface_on_sphere():
    mesh = uv_sphere([0.0, 0.0, 0.0], 0.5, 32, 64)
    pts = sample_surface(mesh, 5000, np.random.default_rng(3))
    r = np.linalg.norm(pts, axis=1)
    assert np.all(r <= 0.5 + 1e-9) and np.all(r > 0.49)
    # area weighting: hemispheres get equal shares
    assert abs(np.mean(pts[:, 2] > 0) - 0.5) < 0.03
    with pytest.raises(ValueError):
        sample_surface(TriMesh.empty(), 3, np.random.default_rng(0))


def test_obj_roundtrip(tmp_path):
    mesh = box_mesh([0, 0, 0], [1, 2, 3])
    mesh.save_obj(tmp_path / "m.obj")
    back = TriMesh.load_obj(tmp_path / "m.obj")
    np.testing.assert_allclose(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.faces, mesh.faces)
    assert back.areas().sum() == pytest.approx(2 * (2 + 3 + 6))
