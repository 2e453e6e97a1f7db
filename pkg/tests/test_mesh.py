import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handfusion.errors import RecordFormatError, ValidationError
from handfusion.mesh import (
    KEYPOINT_COUNT,
    MANO_VERTEX_COUNT,
    HandMesh,
    HandPose,
    KeypointRegressor,
    NormalizedBBox,
    build_adjacency,
    build_procedural_hand,
    canonical_regressor,
    keypoints_from_vertices,
    load_mano_faces,
    load_mesh_record,
    nearest_vertex_regressor,
    save_mesh_record,
)


def random_mesh(rng, n=10, with_edges=True):
    verts = rng.standard_normal((n, 3))
    edges = []
    if with_edges:
        for i in range(n - 1):
            edges.append((i, i + 1))
    return HandMesh(vertices=verts, edges=np.asarray(edges or np.zeros((0, 2), int)))


def random_regressor(rng, rows, cols):
    w = rng.random((rows, cols))
    return KeypointRegressor(weights=w / w.sum(axis=1, keepdims=True))


class TestKeypointRegression:
    def test_one_hot_row_returns_vertex(self):
        rng = np.random.default_rng(0)
        mesh = random_mesh(rng, n=6)
        w = np.zeros((3, 6))
        w[0, 4] = 1.0
        w[1, 0] = 1.0
        w[2, 2] = 1.0
        kp = keypoints_from_vertices(mesh, KeypointRegressor(weights=w))
        assert np.array_equal(kp[0], mesh.vertices[4])
        assert np.array_equal(kp[1], mesh.vertices[0])
        assert np.array_equal(kp[2], mesh.vertices[2])

    def test_translation_moves_all_keypoints(self):
        rng = np.random.default_rng(1)
        mesh = random_mesh(rng, n=10)
        reg = random_regressor(rng, 5, 10)
        d = np.array([0.3, -1.2, 4.0])
        shifted = HandMesh(vertices=mesh.vertices + d, edges=mesh.edges)
        kp0 = keypoints_from_vertices(mesh, reg)
        kp1 = keypoints_from_vertices(shifted, reg)
        assert np.allclose(kp1 - kp0, d, atol=1e-12)

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(2)
        mesh = random_mesh(rng, n=10)
        reg = random_regressor(rng, 21, 10)
        kp = keypoints_from_vertices(mesh, reg)
        oracle = np.zeros((21, 3))
        for i in range(21):
            for j in range(10):
                for a in range(3):
                    oracle[i, a] += reg.weights[i, j] * mesh.vertices[j, a]
        assert np.abs(kp - oracle).max() < 1e-12

    def test_dimension_mismatch_rejected(self):
        rng = np.random.default_rng(3)
        mesh = random_mesh(rng, n=10)
        reg = random_regressor(rng, 21, 12)
        with pytest.raises(ValidationError, match="12"):
            keypoints_from_vertices(mesh, reg)

    @given(alpha=st.floats(-3, 3), beta=st.floats(-3, 3))
    @settings(max_examples=25, deadline=None)
    def test_linearity_in_vertices(self, alpha, beta):
        rng = np.random.default_rng(4)
        v, u = rng.standard_normal((2, 8, 3))
        reg = random_regressor(rng, 4, 8)
        combo = keypoints_from_vertices(HandMesh(vertices=alpha * v + beta * u), reg)
        parts = alpha * keypoints_from_vertices(
            HandMesh(vertices=v), reg
        ) + beta * keypoints_from_vertices(HandMesh(vertices=u), reg)
        assert np.allclose(combo, parts, atol=1e-9)

    def test_vertex_permutation_invariance(self):
        rng = np.random.default_rng(5)
        mesh = random_mesh(rng, n=12, with_edges=False)
        reg = random_regressor(rng, 5, 12)
        perm = rng.permutation(12)
        permuted = HandMesh(vertices=mesh.vertices[perm])
        # columns permuted consistently: w'[i, k] = w[i, j] where k = position of j under perm
        perm_reg = KeypointRegressor(weights=reg.weights[:, perm])
        assert np.allclose(
            keypoints_from_vertices(mesh, reg),
            keypoints_from_vertices(permuted, perm_reg),
            atol=1e-12,
        )


class TestRegressorValidation:
    def test_negative_weight_rejected(self):
        w = np.full((2, 4), 0.25)
        w[0, 0] = -0.25
        w[0, 1] = 0.75
        with pytest.raises(ValidationError, match="nonnegative"):
            KeypointRegressor(weights=w)

    def test_bad_row_sum_rejected(self):
        w = np.full((2, 4), 0.3)
        with pytest.raises(ValidationError, match="sum to 1"):
            KeypointRegressor(weights=w)


class TestAdjacency:
    def test_single_vertex(self):
        mesh = HandMesh(vertices=np.zeros((1, 3)))
        assert np.array_equal(build_adjacency(mesh, "symmetric"), [[1.0]])
        assert np.array_equal(build_adjacency(mesh, "row"), [[1.0]])

    def test_two_vertices_symmetric_half_everywhere(self):
        mesh = HandMesh(vertices=np.zeros((2, 3)), edges=[[0, 1]])
        adj = build_adjacency(mesh, "symmetric")
        # A+I all-ones, degrees 2: every entry 1/sqrt(2)/sqrt(2) = 0.5
        assert np.allclose(adj, 0.5, atol=1e-15)

    def test_path_graph_row_mode_row_stochastic(self):
        mesh = HandMesh(vertices=np.zeros((3, 3)), edges=[[0, 1], [1, 2]])
        adj = build_adjacency(mesh, "row")
        assert np.abs(adj.sum(axis=1) - 1.0).max() < 1e-12

    def test_symmetric_mode_is_symmetric(self):
        rng = np.random.default_rng(6)
        mesh = random_mesh(rng, n=15)
        adj = build_adjacency(mesh, "symmetric")
        assert np.abs(adj - adj.T).max() < 1e-12

    def test_isolated_vertex_is_legal(self):
        mesh = HandMesh(vertices=np.zeros((3, 3)), edges=[[0, 1]])
        adj = build_adjacency(mesh, "row")
        assert adj[2, 2] == 1.0

    def test_unknown_mode_rejected(self):
        mesh = HandMesh(vertices=np.zeros((2, 3)))
        with pytest.raises(ValidationError):
            build_adjacency(mesh, "fancy")


class TestMeshValidation:
    def test_edge_index_out_of_range(self):
        with pytest.raises(ValidationError, match="out of range"):
            HandMesh(vertices=np.zeros((3, 3)), edges=[[0, 3]])

    def test_self_loop_rejected(self):
        with pytest.raises(ValidationError, match="self-loop"):
            HandMesh(vertices=np.zeros((3, 3)), edges=[[1, 1]])

    def test_nonfinite_vertices_rejected(self):
        verts = np.zeros((3, 3))
        verts[1, 2] = np.nan
        with pytest.raises(ValidationError, match="finite"):
            HandMesh(vertices=verts)

    def test_edges_canonicalized(self):
        mesh = HandMesh(vertices=np.zeros((3, 3)), edges=[[1, 0], [0, 1], [2, 1]])
        assert np.array_equal(mesh.edges, [[0, 1], [1, 2]])


class TestBBox:
    @pytest.mark.parametrize(
        "coords",
        [(0.5, 0.2, 0.5, 0.8), (0.2, 0.5, 0.8, 0.5), (-0.1, 0, 0.5, 0.5), (0, 0, 1.5, 1)],
    )
    def test_degenerate_or_out_of_range_rejected(self, coords):
        with pytest.raises(ValidationError):
            NormalizedBBox(*coords)

    def test_center(self):
        assert NormalizedBBox(0.2, 0.4, 0.6, 0.8).center == (0.4, 0.6000000000000001)


class TestRecordIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        # quantize to float32 so the round trip is bit-exact at record precision
        verts = rng.standard_normal((10, 3)).astype(np.float32).astype(np.float64)
        mesh = HandMesh(vertices=verts, edges=[[0, 1], [2, 3], [4, 5]])
        reg = random_regressor(rng, 4, 10)
        path = tmp_path / "hand.hfmesh"
        save_mesh_record(path, mesh, reg)
        loaded, loaded_reg = load_mesh_record(path)
        assert np.array_equal(loaded.vertices, mesh.vertices)
        assert np.array_equal(loaded.edges, mesh.edges)
        assert np.array_equal(loaded_reg.weights, reg.weights)

    def test_round_trip_without_regressor(self, tmp_path):
        mesh = HandMesh(vertices=np.eye(3), edges=[[0, 2]])
        path = tmp_path / "bare.hfmesh"
        save_mesh_record(path, mesh)
        loaded, reg = load_mesh_record(path)
        assert reg is None
        assert np.array_equal(loaded.edges, mesh.edges)

    def test_truncated_file_rejected(self, tmp_path):
        mesh = HandMesh(vertices=np.eye(3))
        path = tmp_path / "trunc.hfmesh"
        save_mesh_record(path, mesh)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(RecordFormatError):
            load_mesh_record(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.hfmesh"
        path.write_bytes(b"NOTAMESH" + b"\x00" * 32)
        with pytest.raises(RecordFormatError, match="magic"):
            load_mesh_record(path)

    def test_out_of_range_edge_in_record(self, tmp_path):
        mesh = HandMesh(vertices=np.eye(3), edges=[[0, 1]])
        path = tmp_path / "bad_edge.hfmesh"
        save_mesh_record(path, mesh)
        raw = bytearray(path.read_bytes())
        # edge array starts after 8-byte magic + 16-byte counts + 9 f32 vertices
        edge_off = 8 + 16 + 9 * 4
        raw[edge_off : edge_off + 4] = (7).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(ValidationError):
            load_mesh_record(path)

    def test_mano_face_loader(self, tmp_path):
        faces = np.array([[0, 1, 2], [2, 1, 3]])
        path = tmp_path / "faces.npy"
        np.save(path, faces)
        edges = load_mano_faces(path)
        expected = {(0, 1), (0, 2), (1, 2), (1, 3), (2, 3)}
        assert {tuple(e) for e in edges} == expected


class TestProceduralHand:
    def test_vertex_and_joint_counts(self):
        hand = build_procedural_hand()
        assert hand.mesh.vertex_count == MANO_VERTEX_COUNT
        assert hand.joints.shape == (KEYPOINT_COUNT, 3)
        assert len(np.unique(hand.groups)) == KEYPOINT_COUNT

    def test_regressor_recovers_joints(self):
        for pose in (HandPose(), HandPose(flexion=(1, 1, 1, 1, 1)), HandPose(flexion=(0, 1, 0, 1, 1), spread=1.0)):
            hand = build_procedural_hand(pose)
            kp = keypoints_from_vertices(hand.mesh, canonical_regressor())
            assert np.linalg.norm((kp - hand.joints)[:, :2], axis=1).max() < 0.03

    def test_pose_validation(self):
        with pytest.raises(ValidationError):
            HandPose(flexion=(0, 0, 0, 0, 2.0))
        with pytest.raises(ValidationError):
            HandPose(spread=-0.5)

    def test_per_pose_regressor_is_row_stochastic(self):
        hand = build_procedural_hand(HandPose(flexion=(0.5, 0.5, 0.5, 0.5, 0.5)))
        reg = nearest_vertex_regressor(hand)
        assert np.allclose(reg.weights.sum(axis=1), 1.0, atol=1e-9)
