"""Hand mesh representation, keypoint regression and graph construction.

The mesh layer mirrors the MANO convention: 778 vertices, 21 anatomical
keypoints obtained as fixed convex combinations of vertices. Because the
real MANO topology is a licensed asset, the module ships a procedural
stand-in (palm patch plus five capsule-ring fingers) that produces exactly
778 vertices and a plausible edge list, together with a loader for a
user-supplied real face file.

Keypoint ordering used throughout the repo (convention-dependent, ours):
index 0 is the wrist, then four joints per finger in the order
thumb, index, middle, ring, pinky; within a finger base -> tip
(MCP, PIP, DIP, TIP). Real annotator output may order fingers differently;
remap before building a regressor if you import external meshes.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import RecordFormatError, ValidationError

MANO_VERTEX_COUNT = 778
KEYPOINT_COUNT = 21

FINGER_NAMES = ("thumb", "index", "middle", "ring", "pinky")
KEYPOINT_NAMES = ("wrist",) + tuple(
    f"{finger}_{part}" for finger in FINGER_NAMES for part in ("mcp", "pip", "dip", "tip")
)


@dataclass(frozen=True)
class NormalizedBBox:
    """Axis-aligned box in image-relative [0, 1] coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        vals = (self.x0, self.y0, self.x1, self.y1)
        if not all(np.isfinite(v) for v in vals):
            raise ValidationError(f"bbox coordinates must be finite, got {vals}")
        if not all(0.0 <= v <= 1.0 for v in vals):
            raise ValidationError(f"bbox coordinates must lie in [0, 1], got {vals}")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValidationError(f"bbox must have positive extent, got {vals}")

    @property
    def center(self):
        return ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    def as_tuple(self):
        return (self.x0, self.y0, self.x1, self.y1)


def _normalize_edges(edges, vertex_count):
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if edges.min() < 0 or edges.max() >= vertex_count:
        raise ValidationError(
            f"edge index out of range: valid range [0, {vertex_count}), "
            f"got min {edges.min()}, max {edges.max()}"
        )
    if np.any(edges[:, 0] == edges[:, 1]):
        raise ValidationError("self-loop edges are not allowed")
    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    canon = np.unique(np.stack([lo, hi], axis=1), axis=0)
    return canon


@dataclass
class HandMesh:
    """Vertices (V x 3, float64) plus an undirected edge list.

    Edges are canonicalized on construction: sorted pairs, deduplicated,
    no self-loops. Instances are treated as immutable after construction.
    """

    vertices: np.ndarray
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValidationError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.vertices.shape[0] < 1:
            raise ValidationError("mesh needs at least one vertex")
        if not np.all(np.isfinite(self.vertices)):
            raise ValidationError("vertices must be finite")
        self.edges = _normalize_edges(self.edges, self.vertices.shape[0])

    @property
    def vertex_count(self):
        return self.vertices.shape[0]


@dataclass
class KeypointRegressor:
    """Row-stochastic nonnegative weights (21 x V) mapping vertices to keypoints."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValidationError(f"regressor weights must be 2-D, got {self.weights.shape}")
        if np.any(self.weights < 0):
            raise ValidationError("regressor weights must be nonnegative")
        row_sums = self.weights.sum(axis=1)
        if not np.allclose(row_sums, 1.0, atol=1e-9, rtol=0.0):
            worst = int(np.argmax(np.abs(row_sums - 1.0)))
            raise ValidationError(
                f"regressor rows must sum to 1 +/- 1e-9; row {worst} sums to {row_sums[worst]!r}"
            )

    @property
    def keypoint_count(self):
        return self.weights.shape[0]

    @property
    def vertex_count(self):
        return self.weights.shape[1]


def keypoints_from_vertices(mesh, regressor):
    """Keypoints p with p_i = sum_j w_ij v_j; exactly linear in the vertices."""
    if regressor.vertex_count != mesh.vertex_count:
        raise ValidationError(
            f"regressor expects {regressor.vertex_count} vertices, "
            f"mesh has {mesh.vertex_count}"
        )
    return regressor.weights @ mesh.vertices


def build_adjacency(mesh, normalization="symmetric"):
    """Normalized adjacency with self-loops, dense (V x V) float64.

    ``symmetric`` returns D^{-1/2} (A + I) D^{-1/2}; ``row`` returns
    D^{-1} (A + I), whose rows sum to 1. Isolated vertices are fine: the
    self-loop guarantees degree >= 1.
    """
    if normalization not in ("symmetric", "row"):
        raise ValidationError(f"unknown normalization {normalization!r}")
    v = mesh.vertex_count
    a = np.zeros((v, v), dtype=np.float64)
    if mesh.edges.size:
        a[mesh.edges[:, 0], mesh.edges[:, 1]] = 1.0
        a[mesh.edges[:, 1], mesh.edges[:, 0]] = 1.0
    a[np.arange(v), np.arange(v)] = 1.0
    deg = a.sum(axis=1)
    if normalization == "symmetric":
        d = 1.0 / np.sqrt(deg)
        return a * d[:, None] * d[None, :]
    return a / deg[:, None]


# ---------------------------------------------------------------------------
# Procedural topology
# ---------------------------------------------------------------------------

_PALM_ROWS = 11
_PALM_COLS = 23
_PALM_LEN = 1.0
_PALM_HALFW = 0.45
_RING_SIZE = 8
_RINGS_PER_FINGER = 13
# arclength stations of the 13 rings, per segment, as (segment, fraction)
_RING_STATIONS = (
    [(0, t) for t in (0.0, 0.25, 0.5, 0.75, 1.0)]
    + [(1, t) for t in (0.25, 0.5, 0.75, 1.0)]
    + [(2, t) for t in (0.25, 0.5, 0.75, 1.0)]
)

# per finger: attachment point, base direction, total length, base radius
_FINGER_BASE_X = {"index": -0.33, "middle": -0.11, "ring": 0.11, "pinky": 0.33}
_FINGER_LENGTH = {"thumb": 0.52, "index": 0.62, "middle": 0.68, "ring": 0.62, "pinky": 0.48}
_FINGER_RADIUS = {"thumb": 0.072, "index": 0.055, "middle": 0.057, "ring": 0.053, "pinky": 0.046}
_SEGMENT_SPLIT = (0.45, 0.30, 0.25)
_SPREAD_ANGLE = {"index": -0.21, "middle": -0.07, "ring": 0.07, "pinky": 0.21}  # radians at spread=1
# flexion=1 bend angles (radians) at the three bending joints
_CURL_ANGLES = (1.35, 1.65, 1.15)
_THUMB_CURL = (1.05, 1.35, 0.9)


@dataclass(frozen=True)
class HandPose:
    """Articulation parameters for the procedural hand.

    ``flexion`` has one [0, 1] curl per finger in (thumb, index, middle,
    ring, pinky) order; 0 is fully extended, 1 fully curled toward the palm.
    ``spread`` in [0, 1] fans the four long fingers apart.
    """

    flexion: tuple = (0.0, 0.0, 0.0, 0.0, 0.0)
    spread: float = 0.5

    def __post_init__(self):
        if len(self.flexion) != 5:
            raise ValidationError("flexion needs 5 entries (thumb..pinky)")
        if not all(0.0 <= f <= 1.0 for f in self.flexion):
            raise ValidationError(f"flexion values must lie in [0, 1], got {self.flexion}")
        if not 0.0 <= self.spread <= 1.0:
            raise ValidationError(f"spread must lie in [0, 1], got {self.spread}")


REST_POSE = HandPose()


@dataclass
class ProceduralHand:
    """A posed procedural hand: mesh, 21 joints, and per-vertex group labels."""

    mesh: HandMesh
    joints: np.ndarray  # (21, 3)
    groups: np.ndarray  # (V,) int64, values in [0, 21)


def _rot_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def _rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def _chain_points(base, base_dir, seg_lengths, bend_axis, bend_angles):
    """Joint positions of a 3-segment chain bending about a fixed local axis."""
    pts = [np.asarray(base, dtype=np.float64)]
    direction = np.asarray(base_dir, dtype=np.float64)
    direction = direction / np.linalg.norm(direction)
    for seg_len, angle in zip(seg_lengths, bend_angles):
        if bend_axis == "x":
            direction = _rot_x(-angle) @ direction
        else:
            direction = _rot_z(angle) @ direction
        pts.append(pts[-1] + direction * seg_len)
    return np.stack(pts)  # (4, 3): base, after seg1, seg2, seg3


def _ring(center, tangent, radius):
    """8 vertices circling ``center`` in the plane orthogonal to ``tangent``."""
    t = tangent / np.linalg.norm(tangent)
    ref = np.array([1.0, 0.0, 0.0]) if abs(t[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
    n1 = np.cross(t, ref)
    n1 /= np.linalg.norm(n1)
    n2 = np.cross(t, n1)
    phis = 2.0 * np.pi * np.arange(_RING_SIZE) / _RING_SIZE
    return center[None, :] + radius * (np.cos(phis)[:, None] * n1 + np.sin(phis)[:, None] * n2)


def _finger_vertices(chain, base_radius):
    """13 rings + apex for one finger, following the posed joint chain."""
    verts = []
    for station_idx, (seg, frac) in enumerate(_RING_STATIONS):
        a, b = chain[seg], chain[seg + 1]
        center = a + (b - a) * frac
        tangent = b - a
        taper = 1.0 - 0.45 * station_idx / (len(_RING_STATIONS) - 1)
        verts.append(_ring(center, tangent, base_radius * taper))
    tip_dir = chain[3] - chain[2]
    tip_dir = tip_dir / np.linalg.norm(tip_dir)
    apex = chain[3] + tip_dir * base_radius * 1.5
    verts.append(apex[None, :])
    return np.concatenate(verts, axis=0)  # (105, 3)


def _palm_vertices():
    ys = np.linspace(0.0, _PALM_LEN, _PALM_ROWS)
    xs = np.linspace(-_PALM_HALFW, _PALM_HALFW, _PALM_COLS)
    gx, gy = np.meshgrid(xs, ys)
    # shallow dome so the palm is not exactly planar
    gz = 0.08 * (1.0 - (gx / _PALM_HALFW) ** 2) * np.sin(np.pi * gy / _PALM_LEN)
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def _palm_edges():
    def vid(r, c):
        return r * _PALM_COLS + c

    edges = []
    for r in range(_PALM_ROWS):
        for c in range(_PALM_COLS):
            if c + 1 < _PALM_COLS:
                edges.append((vid(r, c), vid(r, c + 1)))
            if r + 1 < _PALM_ROWS:
                edges.append((vid(r, c), vid(r + 1, c)))
    return edges


def _finger_edges(offset):
    edges = []
    for ring_idx in range(_RINGS_PER_FINGER):
        base = offset + ring_idx * _RING_SIZE
        for k in range(_RING_SIZE):
            edges.append((base + k, base + (k + 1) % _RING_SIZE))
            if ring_idx + 1 < _RINGS_PER_FINGER:
                edges.append((base + k, base + _RING_SIZE + k))
    apex = offset + _RINGS_PER_FINGER * _RING_SIZE
    last_ring = offset + (_RINGS_PER_FINGER - 1) * _RING_SIZE
    for k in range(_RING_SIZE):
        edges.append((apex, last_ring + k))
    return edges


def build_procedural_hand(pose=REST_POSE):
    """Build the 778-vertex procedural hand in the given pose.

    Vertex layout: 253 palm vertices (row-major grid) followed by five
    fingers (thumb, index, middle, ring, pinky), each 13 rings of 8 plus an
    apex. Joints follow :data:`KEYPOINT_NAMES`.
    """
    palm = _palm_vertices()
    verts = [palm]
    edges = _palm_edges()
    joints = [np.array([0.0, 0.05, 0.0])]  # wrist sits just inside the palm base

    seg = np.asarray(_SEGMENT_SPLIT)
    offset = palm.shape[0]
    for f_idx, name in enumerate(FINGER_NAMES):
        flex = pose.flexion[f_idx]
        if name == "thumb":
            base = np.array([-_PALM_HALFW - 0.05, 0.25 * _PALM_LEN, 0.0])
            base_dir = np.array([-0.75, 0.66, 0.0])
            angles = tuple(a * flex for a in _THUMB_CURL)
            chain = _chain_points(base, base_dir, seg * _FINGER_LENGTH[name], "z", angles)
        else:
            base = np.array([_FINGER_BASE_X[name], _PALM_LEN, 0.0])
            tilt = _SPREAD_ANGLE[name] * pose.spread
            base_dir = np.array([np.sin(tilt), np.cos(tilt), 0.0])
            angles = tuple(a * flex for a in _CURL_ANGLES)
            chain = _chain_points(base, base_dir, seg * _FINGER_LENGTH[name], "x", angles)
        verts.append(_finger_vertices(chain, _FINGER_RADIUS[name]))
        edges.extend(_finger_edges(offset))
        joints.extend(chain)
        offset += _RINGS_PER_FINGER * _RING_SIZE + 1

    vertices = np.concatenate(verts, axis=0)
    assert vertices.shape[0] == MANO_VERTEX_COUNT

    # stitch each finger base ring to its nearest palm vertex
    palm_tree = cKDTree(palm)
    for f_idx in range(5):
        ring_start = palm.shape[0] + f_idx * (_RINGS_PER_FINGER * _RING_SIZE + 1)
        for k in range(_RING_SIZE):
            _, nearest = palm_tree.query(vertices[ring_start + k])
            edges.append((ring_start + k, int(nearest)))

    joints = np.stack(joints)
    assert joints.shape == (KEYPOINT_COUNT, 3)

    groups = np.argmin(
        np.linalg.norm(vertices[:, None, :] - joints[None, :, :], axis=2), axis=1
    ).astype(np.int64)
    # nearest-joint grouping always keeps every group populated (each joint
    # carries its own ring / the palm base), which pooling relies on
    assert len(np.unique(groups)) == KEYPOINT_COUNT

    mesh = HandMesh(vertices=vertices, edges=np.asarray(edges, dtype=np.int64))
    return ProceduralHand(mesh=mesh, joints=joints, groups=groups)


def nearest_vertex_regressor(hand, k=8):
    """Uniform-weight regressor over the k nearest vertices to each joint."""
    tree = cKDTree(hand.mesh.vertices)
    weights = np.zeros((KEYPOINT_COUNT, hand.mesh.vertex_count), dtype=np.float64)
    for i, joint in enumerate(hand.joints):
        _, idx = tree.query(joint, k=k)
        weights[i, np.atleast_1d(idx)] = 1.0 / k
    return KeypointRegressor(weights=weights)


_CANONICAL_CACHE = {}


def canonical_hand():
    """Rest-pose procedural hand (cached; treat as read-only)."""
    if "hand" not in _CANONICAL_CACHE:
        _CANONICAL_CACHE["hand"] = build_procedural_hand(REST_POSE)
    return _CANONICAL_CACHE["hand"]


def canonical_regressor():
    """Regressor built on the rest pose; valid for any pose of the same topology."""
    if "reg" not in _CANONICAL_CACHE:
        _CANONICAL_CACHE["reg"] = nearest_vertex_regressor(canonical_hand())
    return _CANONICAL_CACHE["reg"]


# ---------------------------------------------------------------------------
# Record I/O
# ---------------------------------------------------------------------------
#
# Byte layout (all little-endian), version 1:
#   magic     8 bytes  b"HFMESH01"
#   counts    4 x u32  vertex_count, edge_count, regressor_rows, regressor_nnz
#   vertices  vertex_count*3 x f32, row-major
#   edges     edge_count*2 x u32
#   reg rows  regressor_nnz x u32
#   reg cols  regressor_nnz x u32
#   reg vals  regressor_nnz x f64
# Vertex coordinates are stored single precision (in-memory meshes are
# double); regressor weights stay double so the row-stochastic invariant
# survives the round trip exactly.

_MESH_MAGIC = b"HFMESH01"


def save_mesh_record(path, mesh, regressor=None):
    verts32 = mesh.vertices.astype("<f4")
    edges32 = mesh.edges.astype("<u4")
    if regressor is not None:
        if regressor.vertex_count != mesh.vertex_count:
            raise ValidationError("regressor column count must match mesh vertex count")
        rows, cols = np.nonzero(regressor.weights)
        vals = regressor.weights[rows, cols].astype("<f8")
        reg_rows_count = regressor.keypoint_count
    else:
        rows = cols = np.zeros(0, dtype=np.int64)
        vals = np.zeros(0, dtype="<f8")
        reg_rows_count = 0
    with open(path, "wb") as fh:
        fh.write(_MESH_MAGIC)
        fh.write(struct.pack("<4I", mesh.vertex_count, len(edges32), reg_rows_count, len(vals)))
        fh.write(verts32.tobytes())
        fh.write(edges32.tobytes())
        fh.write(rows.astype("<u4").tobytes())
        fh.write(cols.astype("<u4").tobytes())
        fh.write(vals.tobytes())


def _take(buf, offset, count, dtype):
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    return arr, offset + count * arr.itemsize


def load_mesh_record(path):
    """Load a mesh record; returns (HandMesh, KeypointRegressor or None)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < len(_MESH_MAGIC) + 16:
        raise RecordFormatError("mesh record truncated before header", field="header")
    if buf[: len(_MESH_MAGIC)] != _MESH_MAGIC:
        raise RecordFormatError(
            f"bad magic {buf[:8]!r}, expected {_MESH_MAGIC!r}", field="magic"
        )
    v_count, e_count, reg_rows, reg_nnz = struct.unpack_from("<4I", buf, len(_MESH_MAGIC))
    expected = len(_MESH_MAGIC) + 16 + v_count * 12 + e_count * 8 + reg_nnz * 16
    if len(buf) != expected:
        raise RecordFormatError(
            f"mesh record has {len(buf)} bytes, expected {expected}", field="payload"
        )
    offset = len(_MESH_MAGIC) + 16
    verts, offset = _take(buf, offset, v_count * 3, "<f4")
    edges, offset = _take(buf, offset, e_count * 2, "<u4")
    rows, offset = _take(buf, offset, reg_nnz, "<u4")
    cols, offset = _take(buf, offset, reg_nnz, "<u4")
    vals, offset = _take(buf, offset, reg_nnz, "<f8")
    mesh = HandMesh(
        vertices=verts.astype(np.float64).reshape(v_count, 3),
        edges=edges.astype(np.int64).reshape(e_count, 2),
    )
    regressor = None
    if reg_rows:
        if reg_nnz and (rows.max() >= reg_rows or cols.max() >= v_count):
            raise RecordFormatError("regressor triplet index out of range", field="regressor")
        weights = np.zeros((reg_rows, v_count), dtype=np.float64)
        weights[rows.astype(np.int64), cols.astype(np.int64)] = vals.astype(np.float64)
        regressor = KeypointRegressor(weights=weights)
    return mesh, regressor


def load_mano_faces(path):
    """Edges from a user-supplied MANO face file (.npy F x 3, or whitespace text).

    Returns an (E, 2) array of the unique undirected triangle sides, ready to
    pass as ``HandMesh.edges`` together with real MANO vertices.
    """
    path = str(path)
    if path.endswith(".npy"):
        faces = np.load(path)
    else:
        faces = np.loadtxt(path, dtype=np.int64)
    faces = np.asarray(faces, dtype=np.int64)
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise RecordFormatError(f"face file must be F x 3, got {faces.shape}", field="faces")
    sides = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=0)
    lo = np.minimum(sides[:, 0], sides[:, 1])
    hi = np.maximum(sides[:, 0], sides[:, 1])
    return np.unique(np.stack([lo, hi], axis=1), axis=0)
