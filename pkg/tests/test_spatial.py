import numpy as np
import pytest

from facesynth.mesh import LANDMARK_COUNT, ScanMesh, as_points
from facesynth.spatial import (
    MeshQuery,
    brute_force_closest,
    closest_point_on_mesh,
    closest_point_on_triangles,
    mesh_query,
)


def _scan_from_template(template):
    topo, base = template
    pts = as_points(base)
    return ScanMesh(
        vertices=pts,
        faces=topo.faces,
        landmarks=pts[topo.landmark_indices],
        vertex_colors=np.full((len(pts), 3), 0.5),
    )


class TestPointTriangle:
    def test_all_regions_against_scalar_reference(self):
        # scalar reference: dense sampling of the triangle + edge clamping
        rng = np.random.default_rng(0)
        for _ in range(200):
            tri = rng.normal(0, 1, size=(3, 3))
            p = rng.normal(0, 2, size=(1, 3))
            cp, bary, d2 = closest_point_on_triangles(p, tri[None, 0], tri[None, 1], tri[None, 2])
            # dense barycentric sampling oracle
            grid = np.linspace(0, 1, 60)
            u, v = np.meshgrid(grid, grid)
            keep = (u + v) <= 1.0
            u, v = u[keep], v[keep]
            samples = (1 - u - v)[:, None] * tri[0] + u[:, None] * tri[1] + v[:, None] * tri[2]
            oracle = np.min(np.sum((samples - p) ** 2, axis=1))
            assert d2[0] <= oracle + 1e-9
            assert np.isclose(bary[0].sum(), 1.0, atol=1e-9)
            assert bary[0].min() >= -1e-12
            recon = bary[0, 0] * tri[0] + bary[0, 1] * tri[1] + bary[0, 2] * tri[2]
            assert np.allclose(recon, cp[0], atol=1e-9)

    def test_projection_onto_large_triangle_interior(self):
        tri_a = np.array([[-10.0, -10.0, 0.0]])
        tri_b = np.array([[10.0, -10.0, 0.0]])
        tri_c = np.array([[0.0, 10.0, 0.0]])
        p = np.array([[0.5, 0.25, 3.0]])
        cp, _, d2 = closest_point_on_triangles(p, tri_a, tri_b, tri_c)
        assert np.allclose(cp[0], [0.5, 0.25, 0.0], atol=1e-12)
        assert np.isclose(d2[0], 9.0, atol=1e-12)


class TestMeshQuery:
    def test_vertex_query_hits_vertex(self, small_template):
        scan = _scan_from_template(small_template)
        pt, face, bary = closest_point_on_mesh(scan, scan.vertices[17])
        assert np.allclose(pt, scan.vertices[17], atol=1e-12)
        assert 17 in scan.faces[face]

    def test_bvh_matches_brute_force(self, mid_template):
        scan = _scan_from_template(mid_template)
        assert len(scan.faces) >= 64  # exercises the accelerated path
        rng = np.random.default_rng(1)
        queries = rng.normal(0, 1.2, size=(1000, 3))
        q = MeshQuery(scan.vertices, scan.faces)
        pt_a, face_a, bary_a, d_a = q.query(queries)
        pt_b, face_b, bary_b, d_b = brute_force_closest(scan.vertices, scan.faces, queries)
        assert np.max(np.abs(d_a - d_b)) < 1e-9
        # returned points must realize the reported distances
        assert np.allclose(np.linalg.norm(pt_a - queries, axis=1), d_a, atol=1e-9)
        assert np.allclose(bary_a.sum(axis=1), 1.0, atol=1e-9)
        assert bary_a.min() >= -1e-12

    def test_small_mesh_uses_exhaustive_path(self):
        verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 1]])
        faces = np.array([[0, 1, 2], [1, 2, 3]])
        q = MeshQuery(verts, faces)
        assert not q._use_bvh
        pt, face, bary, d = q.query(np.array([[0.2, 0.2, -1.0]]))
        assert np.allclose(pt[0], [0.2, 0.2, 0.0], atol=1e-12)
        assert face[0] == 0

    def test_empty_mesh_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            MeshQuery(np.zeros((3, 3)), np.zeros((0, 3), dtype=int))

    def test_query_cache_reuses_structure(self, small_template):
        scan = _scan_from_template(small_template)
        assert mesh_query(scan) is mesh_query(scan)

    def test_barycentric_reconstructs_point(self, mid_template):
        scan = _scan_from_template(mid_template)
        rng = np.random.default_rng(2)
        queries = rng.normal(0, 1.0, size=(64, 3))
        pt, face, bary, _ = MeshQuery(scan.vertices, scan.faces).query(queries)
        corners = scan.vertices[scan.faces[face]]
        recon = np.einsum("nk,nkc->nc", bary, corners)
        assert np.allclose(recon, pt, atol=1e-9)
