import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from garmentforge import io
from garmentforge.mesh import (
    DegenerateFaceError,
    Mesh,
    MeshValidationError,
    boundary_vertices,
    face_normals,
    geodesic_distances,
    graph_laplacian,
    knn_neighborhoods,
    submesh,
    surface_area,
    vertex_normals,
)
from meshes import floyd_warshall, grid, random_rotation, random_surface, unit_cube, uv_sphere


class TestMeshType:
    def test_rejects_out_of_range_index(self):
        with pytest.raises(MeshValidationError):
            Mesh(np.zeros((3, 3)), [[0, 1, 3]])

    def test_rejects_repeated_vertex(self):
        with pytest.raises(MeshValidationError):
            Mesh(np.zeros((3, 3)), [[0, 1, 1]])

    def test_arrays_are_read_only(self):
        m = unit_cube()
        with pytest.raises(ValueError):
            m.vertices[0, 0] = 5.0

    def test_edge_set_is_symmetric(self):
        m = random_surface(40, 0)
        e = {tuple(x) for x in m.edges()}
        directed = set()
        for a, b, c in m.faces:
            directed |= {(a, b), (b, c), (c, a)}
        assert all((min(a, b), max(a, b)) in e for a, b in directed)


class TestObj:
    def test_minimal_triangle(self, tmp_path):
        p = tmp_path / "t.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
        m = io.load_obj(p)
        assert (m.n_vertices, m.n_faces) == (3, 1)

    def test_quad_is_fan_triangulated(self, tmp_path):
        p = tmp_path / "q.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        assert io.load_obj(p).faces.tolist() == [[0, 1, 2], [0, 2, 3]]

    def test_slash_and_negative_indices(self, tmp_path):
        p = tmp_path / "s.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 -1//1\n")
        assert io.load_obj(p).faces.tolist() == [[0, 1, 2]]

    def test_malformed_record_reports_line(self, tmp_path):
        p = tmp_path / "bad.obj"
        p.write_text("v 0 0 0\nv 1 0\n")
        with pytest.raises(io.ObjParseError, match=":2:"):
            io.load_obj(p)

    def test_out_of_range_face(self, tmp_path):
        p = tmp_path / "oor.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n")
        with pytest.raises(MeshValidationError):
            io.load_obj(p)

    def test_round_trip(self, tmp_path):
        m = random_surface(100, 3)
        io.save_obj(tmp_path / "r.obj", m)
        back = io.load_obj(tmp_path / "r.obj")
        assert np.abs(back.vertices - m.vertices).max() < 1e-6
        assert np.array_equal(back.faces, m.faces)


class TestTensorFile:
    @pytest.mark.parametrize("dtype", ["f32", "f64", "i32", "i64", "u8"])
    def test_round_trip(self, tmp_path, dtype):
        a = (np.arange(24).reshape(2, 3, 4) % 7).astype(float)
        io.save_tensor(tmp_path / "a.gft", a, dtype)
        back = io.load_tensor(tmp_path / "a.gft")
        assert back.shape == (2, 3, 4)
        assert np.array_equal(back, a)

    def test_header_layout(self, tmp_path):
        io.save_tensor(tmp_path / "a.gft", np.ones(3), "f32")
        raw = (tmp_path / "a.gft").read_bytes()
        hlen = int.from_bytes(raw[8:12], "little")
        assert raw[:8] == b"GFTENSOR"
        assert b'"dtype":"f32"' in raw[12:12 + hlen]
        assert len(raw) == 12 + hlen + 12

    def test_truncated_payload(self, tmp_path):
        io.save_tensor(tmp_path / "a.gft", np.ones(3), "f64")
        p = tmp_path / "a.gft"
        p.write_bytes(p.read_bytes()[:-1])
        with pytest.raises(io.TensorFormatError):
            io.load_tensor(p)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.gft").write_bytes(b"NOTMAGIC\x00\x00\x00\x00")
        with pytest.raises(io.TensorFormatError):
            io.load_tensor(tmp_path / "x.gft")


class TestNormals:
    def test_right_hand_rule(self):
        m = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        assert np.allclose(face_normals(m), [[0, 0, 1]])

    def test_reversed_winding(self):
        m = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 2, 1]])
        assert np.allclose(face_normals(m), [[0, 0, -1]])

    def test_orthogonal_to_edges(self, rng):
        for _ in range(20):
            v = rng.normal(size=(3, 3))
            n = face_normals(Mesh(v, [[0, 1, 2]]))[0]
            assert abs(n @ (v[1] - v[0])) < 1e-9 and abs(n @ (v[2] - v[0])) < 1e-9
            assert abs(np.linalg.norm(n) - 1.0) < 1e-12

    def test_degenerate_face_named(self):
        m = Mesh([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], [[0, 1, 3], [0, 1, 2]])
        with pytest.raises(DegenerateFaceError) as exc:
            face_normals(m)
        assert exc.value.face_index == 1

    def test_sphere_vertex_normals_point_outward(self):
        s = uv_sphere()
        n = vertex_normals(s)
        assert (np.einsum("ij,ij->i", n, s.vertices) > 0.9).all()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_rotation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        m = random_surface(30, seed)
        r = random_rotation(rng)
        rotated = m.with_vertices(m.vertices @ r.T)
        assert np.abs(face_normals(rotated) - face_normals(m) @ r.T).max() < 1e-9


class TestLaplacian:
    def test_single_triangle(self):
        m = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        expected = np.array([[2, -1, -1], [-1, 2, -1], [-1, -1, 2]])
        assert np.array_equal(graph_laplacian(m).toarray(), expected)

    def test_row_sums_zero(self):
        for seed in range(5):
            lap = graph_laplacian(random_surface(60, seed))
            assert np.abs(np.asarray(lap.sum(axis=1))).max() < 1e-12

    def test_planar_grid_interior(self):
        g = grid(5, 5, spacing=0.3)
        delta = graph_laplacian(g) @ g.vertices
        # interior vertex of the regular triangulated grid: neighbors are point-symmetric
        center = 2 * 5 + 2
        manual = sum(g.vertices[center] - g.vertices[j] for j in graph_laplacian(g)[center].indices if j != center)
        assert np.abs(manual).max() < 1e-9
        assert np.abs(delta[center]).max() < 1e-9

    def test_isolated_vertex_warning(self):
        m = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], [[0, 1, 2]])
        lap, warnings = graph_laplacian(m, with_warnings=True)
        assert lap[3].nnz == 0
        assert len(warnings) == 1 and "3" in warnings[0]

    def test_row_slice_sorted(self):
        lap = graph_laplacian(random_surface(40, 1))
        for i in range(lap.shape[0]):
            idx = lap[i].indices
            assert np.all(np.diff(idx) > 0)


class TestGeodesics:
    def test_all_seeds(self):
        m = random_surface(30, 0)
        assert np.array_equal(geodesic_distances(m, np.arange(30)), np.zeros(30))

    def test_path_graph(self):
        # a strip whose bottom row is a straight path with unit edges
        v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0], [0.5, 10, 0], [1.5, 10, 0], [2.5, 10, 0]], float)
        f = [[0, 1, 4], [1, 5, 4], [1, 2, 5], [2, 6, 5], [2, 3, 6]]
        d = geodesic_distances(Mesh(v, f), [0])
        assert np.allclose(d[:4], [0, 1, 2, 3], atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_floyd_warshall_oracle(self, seed):
        m = random_surface(50, seed)
        src = seed * 7 % 50
        assert np.abs(geodesic_distances(m, [src]) - floyd_warshall(m)[src]).max() < 1e-9

    def test_unreachable_component(self, caplog):
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5], [6, 5, 5], [5, 6, 5]], float)
        d = geodesic_distances(Mesh(v, [[0, 1, 2], [3, 4, 5]]), [0])
        assert np.isinf(d[3:]).all()
        assert "unreachable" in caplog.text

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_triangle_inequality(self, seed):
        m = random_surface(40, seed)
        d = geodesic_distances(m, [seed % 40])
        e = m.edges()
        length = np.linalg.norm(m.vertices[e[:, 0]] - m.vertices[e[:, 1]], axis=1)
        assert (np.abs(d[e[:, 0]] - d[e[:, 1]]) <= length + 1e-9).all()


class TestArea:
    def test_unit_cube(self):
        assert surface_area(unit_cube()) == 6.0

    def test_scaling(self):
        m = random_surface(50, 2)
        assert abs(surface_area(m.with_vertices(2 * m.vertices)) - 4 * surface_area(m)) < 1e-9

    def test_per_face_oracle(self):
        m = random_surface(50, 4)
        total = 0.0
        for a, b, c in m.faces:
            total += 0.5 * np.linalg.norm(np.cross(m.vertices[b] - m.vertices[a], m.vertices[c] - m.vertices[a]))
        assert abs(surface_area(m) - total) < 1e-12

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_rigid_invariance(self, seed):
        rng = np.random.default_rng(seed)
        m = random_surface(30, seed)
        moved = m.with_vertices(m.vertices @ random_rotation(rng).T + rng.normal(size=3))
        assert abs(surface_area(moved) - surface_area(m)) < 1e-9


class TestKnn:
    def test_coincident(self):
        t = random_surface(30, 0)
        assert knn_neighborhoods(t.vertices[[7]], t, 1)[0, 0] == 7

    def test_full_k_sorted(self):
        t = random_surface(30, 0)
        src = np.array([[0.3, 0.3, 0.0]])
        nn = knn_neighborhoods(src, t, 30)[0]
        d = np.linalg.norm(t.vertices[nn] - src, axis=1)
        assert sorted(nn.tolist()) == list(range(30))
        assert np.all(np.diff(d) >= 0)

    def test_brute_force_oracle(self):
        s, t = random_surface(200, 1), random_surface(200, 2)
        nn = knn_neighborhoods(s, t, 5)
        for i in range(0, 200, 17):
            d = [np.linalg.norm(s.vertices[i] - t.vertices[j]) for j in range(200)]
            assert list(nn[i]) == sorted(range(200), key=lambda j: (d[j], j))[:5]

    def test_tie_break_lower_index(self):
        t = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0]])
        assert knn_neighborhoods(np.zeros((1, 3)), t, 2)[0].tolist() == [0, 1]

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            knn_neighborhoods(np.zeros((1, 3)), np.zeros((3, 3)), 4)


class TestSubmesh:
    def test_reindexing(self):
        m = unit_cube()
        sub, ids = submesh(m, np.arange(12) < 2)
        assert np.array_equal(sub.vertices, m.vertices[ids])
        assert np.array_equal(ids[sub.faces], m.faces[:2])

    def test_boundary_of_open_grid(self):
        b = boundary_vertices(grid(4, 4).faces)
        assert len(b) == 12
        assert len(boundary_vertices(unit_cube().faces)) == 0
