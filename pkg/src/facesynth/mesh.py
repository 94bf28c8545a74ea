"""Mesh, texture, and corpus data types with OBJ/PNG/landmark I/O and UV sampling.

Conventions used throughout the package:

* A geometry vector is a flat float64 array of length ``3*m`` holding
  interleaved vertex coordinates ``(x1, y1, z1, ..., xm, ym, zm)``.
* A vertex color vector has the same layout with RGB values in ``[0, 1]``.
* A texture image is an ``(H, W, 3)`` float64 array with values in ``[0, 1]``.
* Texel ``(i, j)`` (row ``i``, column ``j``) has its center at UV coordinate
  ``((j + 0.5) / W, (i + 0.5) / H)``; the v axis points down (row 0 is v=0).

All container types are immutable after construction and safe to share
between threads.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from PIL import Image

from .errors import CorpusError, FormatError

LANDMARK_COUNT = 43

NEUTRAL_EXPRESSION = "neutral"


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def as_points(vector: np.ndarray) -> np.ndarray:
    """View a flat interleaved 3m-vector as an (m, 3) array."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim != 1 or vector.size % 3 != 0:
        raise ValueError(f"expected flat vector with length divisible by 3, got shape {vector.shape}")
    return vector.reshape(-1, 3)


def as_vector(points: np.ndarray) -> np.ndarray:
    """Flatten an (m, 3) point array into the interleaved 3m layout."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"expected (m, 3) array, got shape {points.shape}")
    return points.reshape(-1).copy()


def validate_geometry_vector(vector: np.ndarray, vertex_count: int) -> np.ndarray:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (3 * vertex_count,):
        raise ValueError(f"geometry vector must have length {3 * vertex_count}, got {vector.shape}")
    if not np.all(np.isfinite(vector)):
        raise ValueError("geometry vector contains non-finite entries")
    return vector


def validate_color_vector(vector: np.ndarray, vertex_count: int) -> np.ndarray:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (3 * vertex_count,):
        raise ValueError(f"color vector must have length {3 * vertex_count}, got {vector.shape}")
    if not np.all(np.isfinite(vector)):
        raise ValueError("color vector contains non-finite entries")
    if vector.min() < 0.0 or vector.max() > 1.0:
        raise ValueError("color vector entries must lie in [0, 1]")
    return vector


def validate_texture_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"texture image must have shape (H, W, 3), got {image.shape}")
    if image.shape[0] < 2 or image.shape[1] < 2:
        raise ValueError("texture image must be at least 2x2")
    if not np.all(np.isfinite(image)):
        raise ValueError("texture image contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("texture image channels must lie in [0, 1]")
    return image


def _validate_faces(faces: np.ndarray, vertex_count: int) -> np.ndarray:
    faces = np.asarray(faces, dtype=np.int64)
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise ValueError(f"faces must be an (F, 3) index array, got shape {faces.shape}")
    if faces.size and (faces.min() < 0 or faces.max() >= vertex_count):
        raise ValueError("face index out of range")
    return faces


@dataclass(frozen=True, eq=False)
class TemplateTopology:
    """Shared template connectivity: faces, per-vertex UV, and landmark vertex indices.

    Every corpus entry references the same topology; geometry and color
    vectors are defined relative to its vertex order.
    """

    vertex_count: int
    faces: np.ndarray
    uv: np.ndarray
    landmark_indices: np.ndarray

    def __post_init__(self):
        m = int(self.vertex_count)
        if m <= 0:
            raise ValueError("vertex_count must be positive")
        faces = _validate_faces(self.faces, m)
        uv = np.asarray(self.uv, dtype=np.float64)
        if uv.shape != (m, 2):
            raise ValueError(f"uv must have shape ({m}, 2), got {uv.shape}")
        if uv.min() < 0.0 or uv.max() > 1.0:
            raise ValueError("uv coordinates must lie in [0, 1]^2")
        lm = np.asarray(self.landmark_indices, dtype=np.int64)
        if lm.shape != (LANDMARK_COUNT,):
            raise ValueError(f"expected exactly {LANDMARK_COUNT} landmark indices, got {lm.shape}")
        if len(np.unique(lm)) != LANDMARK_COUNT:
            raise ValueError("landmark indices must be distinct")
        if lm.min() < 0 or lm.max() >= m:
            raise ValueError("landmark index out of range")
        # UV triangles must be usable for rasterization.
        a, b, c = uv[faces[:, 0]], uv[faces[:, 1]], uv[faces[:, 2]]
        area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
        if faces.size and np.any(area2 == 0.0):
            raise ValueError("degenerate UV triangle (zero area)")
        object.__setattr__(self, "vertex_count", m)
        object.__setattr__(self, "faces", _freeze(faces))
        object.__setattr__(self, "uv", _freeze(uv))
        object.__setattr__(self, "landmark_indices", _freeze(lm))

    @cached_property
    def edges(self) -> np.ndarray:
        """Undirected mesh edges derived from faces, each counted once; shape (E, 2)."""
        f = self.faces
        pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
        pairs = np.sort(pairs, axis=1)
        return _freeze(np.unique(pairs, axis=0))

    @cached_property
    def vertex_neighbors(self) -> list[np.ndarray]:
        """Adjacency lists (sorted vertex indices) for each vertex."""
        adj: list[list[int]] = [[] for _ in range(self.vertex_count)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return [np.asarray(sorted(n), dtype=np.int64) for n in adj]


@dataclass(frozen=True, eq=False)
class ScanMesh:
    """A raw (or deformed) triangle mesh with 43 landmark points.

    The color source, when present, is either per-vertex RGB
    (``vertex_colors``) or a texture image plus per-vertex UV coordinates.
    Scans without a color source can be aligned and queried but not used for
    color transfer.
    """

    vertices: np.ndarray
    faces: np.ndarray
    landmarks: np.ndarray
    vertex_colors: np.ndarray | None = None
    texture: np.ndarray | None = None
    uv: np.ndarray | None = None

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64)
        if vertices.ndim != 2 or vertices.shape[1] != 3 or vertices.shape[0] == 0:
            raise ValueError(f"vertices must be a non-empty (n, 3) array, got {vertices.shape}")
        n = vertices.shape[0]
        faces = _validate_faces(self.faces, n)
        landmarks = np.asarray(self.landmarks, dtype=np.float64)
        if landmarks.shape != (LANDMARK_COUNT, 3):
            raise ValueError(f"expected ({LANDMARK_COUNT}, 3) landmark array, got {landmarks.shape}")
        colors = self.vertex_colors
        texture = self.texture
        uv = self.uv
        if colors is not None:
            colors = np.asarray(colors, dtype=np.float64)
            if colors.shape != (n, 3):
                raise ValueError(f"vertex_colors must have shape ({n}, 3), got {colors.shape}")
            if colors.min() < 0.0 or colors.max() > 1.0:
                raise ValueError("vertex_colors must lie in [0, 1]")
            object.__setattr__(self, "vertex_colors", _freeze(colors))
        if texture is not None:
            texture = validate_texture_image(texture)
            if uv is None:
                raise ValueError("texture color source requires per-vertex uv")
            uv = np.asarray(uv, dtype=np.float64)
            if uv.shape != (n, 2):
                raise ValueError(f"uv must have shape ({n}, 2), got {uv.shape}")
            object.__setattr__(self, "texture", _freeze(texture))
            object.__setattr__(self, "uv", _freeze(uv))
        object.__setattr__(self, "vertices", _freeze(vertices))
        object.__setattr__(self, "faces", _freeze(faces))
        object.__setattr__(self, "landmarks", _freeze(landmarks))

    @property
    def has_color_source(self) -> bool:
        return self.vertex_colors is not None or self.texture is not None

    def color_at(self, face_indices: np.ndarray, barycentric: np.ndarray) -> np.ndarray:
        """Interpolate the scan's color source at surface points given as (face, barycentric)."""
        if not self.has_color_source:
            raise ValueError("scan has no color source")
        corners = self.faces[np.asarray(face_indices, dtype=np.int64)]
        w = np.asarray(barycentric, dtype=np.float64)
        if self.vertex_colors is not None:
            col = self.vertex_colors[corners]  # (N, 3, 3)
            return np.einsum("nk,nkc->nc", w, col)
        uv_pts = np.einsum("nk,nkc->nc", w, self.uv[corners])
        return sample_texture(self.texture, np.clip(uv_pts, 0.0, 1.0))


@dataclass(frozen=True, eq=False)
class CorpusEntry:
    """One aligned scan: identity label, expression label, geometry and colors."""

    identity: str
    expression: str
    geometry: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "geometry", _freeze(np.asarray(self.geometry, dtype=np.float64)))
        object.__setattr__(self, "colors", _freeze(np.asarray(self.colors, dtype=np.float64)))


@dataclass(frozen=True, eq=False)
class AlignedCorpus:
    """Scans in dense correspondence on a shared topology.

    Construction validates shapes, finiteness and color range. Presence of a
    neutral-expression entry per identity is required only by operations that
    depend on it (see ``coupling.neutralize_corpus``) and can be checked
    explicitly with :meth:`validate_neutral_coverage`.
    """

    topology: TemplateTopology
    entries: tuple[CorpusEntry, ...] = field(default_factory=tuple)

    def __post_init__(self):
        entries = tuple(self.entries)
        m = self.topology.vertex_count
        for e in entries:
            validate_geometry_vector(e.geometry, m)
            validate_color_vector(e.colors, m)
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def identities(self) -> list[str]:
        """Sorted unique identity labels."""
        return sorted({e.identity for e in self.entries})

    def geometry_matrix(self) -> np.ndarray:
        """Stack entry geometries into a (3m, n) column matrix."""
        return np.stack([e.geometry for e in self.entries], axis=1)

    def color_matrix(self) -> np.ndarray:
        """Stack entry color vectors into a (3m, n) column matrix."""
        return np.stack([e.colors for e in self.entries], axis=1)

    def validate_neutral_coverage(self) -> None:
        """Raise CorpusError if some identity has no neutral-expression entry."""
        seen = {e.identity for e in self.entries if e.expression == NEUTRAL_EXPRESSION}
        missing = sorted({e.identity for e in self.entries} - seen)
        if missing:
            raise CorpusError(f"identities without a neutral entry: {', '.join(missing)}")


# ---------------------------------------------------------------------------
# Texture sampling and rasterization
# ---------------------------------------------------------------------------


def sample_texture(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinearly sample a texture image at UV coordinates in [0, 1]^2.

    Pixel centers sit at ``((j + 0.5) / W, (i + 0.5) / H)``; coordinates at the
    image border clamp to the border pixels. Accepts a single (2,) point or an
    (N, 2) batch and returns the matching (3,) or (N, 3) RGB values.
    """
    image = np.asarray(image, dtype=np.float64)
    uv_arr = np.asarray(uv, dtype=np.float64)
    single = uv_arr.ndim == 1
    uv_arr = np.atleast_2d(uv_arr)
    if uv_arr.min() < 0.0 or uv_arr.max() > 1.0:
        raise ValueError("uv outside the unit square")
    h, w = image.shape[:2]
    x = np.clip(uv_arr[:, 0] * w - 0.5, 0.0, w - 1.0)
    y = np.clip(uv_arr[:, 1] * h - 0.5, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    out = (
        image[y0, x0] * (1 - fx) * (1 - fy)
        + image[y0, x1] * fx * (1 - fy)
        + image[y1, x0] * (1 - fx) * fy
        + image[y1, x1] * fx * fy
    )
    return out[0] if single else out


def vertex_colors_from_texture(topology: TemplateTopology, image: np.ndarray) -> np.ndarray:
    """Sample the texture at every template vertex UV, producing a 3m color vector."""
    image = validate_texture_image(image)
    return sample_texture(image, topology.uv).reshape(-1)


def _rasterize(topology, per_vertex_colors, shape):
    h, w = shape
    img = np.zeros((h, w, 3), dtype=np.float64)
    covered = np.zeros((h, w), dtype=bool)
    # UV mapped to continuous pixel coordinates; texel (i, j) center is (j, i).
    px = topology.uv[:, 0] * w - 0.5
    py = topology.uv[:, 1] * h - 0.5
    for face in topology.faces:
        i0, i1, i2 = face
        xs = px[face]
        ys = py[face]
        lo_x = max(int(np.ceil(xs.min())), 0)
        hi_x = min(int(np.floor(xs.max())), w - 1)
        lo_y = max(int(np.ceil(ys.min())), 0)
        hi_y = min(int(np.floor(ys.max())), h - 1)
        if lo_x > hi_x or lo_y > hi_y:
            continue
        gx, gy = np.meshgrid(np.arange(lo_x, hi_x + 1), np.arange(lo_y, hi_y + 1))
        denom = (ys[1] - ys[2]) * (xs[0] - xs[2]) + (xs[2] - xs[1]) * (ys[0] - ys[2])
        if denom == 0.0:
            raise ValueError("degenerate UV triangle in rasterization")
        l0 = ((ys[1] - ys[2]) * (gx - xs[2]) + (xs[2] - xs[1]) * (gy - ys[2])) / denom
        l1 = ((ys[2] - ys[0]) * (gx - xs[2]) + (xs[0] - xs[2]) * (gy - ys[2])) / denom
        l2 = 1.0 - l0 - l1
        eps = 1e-12
        inside = (l0 >= -eps) & (l1 >= -eps) & (l2 >= -eps)
        # First face in face order wins on overlap.
        fresh = inside & ~covered[lo_y : hi_y + 1, lo_x : hi_x + 1]
        if not fresh.any():
            continue
        if per_vertex_colors is not None:
            c = (
                l0[fresh, None] * per_vertex_colors[i0]
                + l1[fresh, None] * per_vertex_colors[i1]
                + l2[fresh, None] * per_vertex_colors[i2]
            )
            region = img[lo_y : hi_y + 1, lo_x : hi_x + 1]
            region[fresh] = c
        covered[lo_y : hi_y + 1, lo_x : hi_x + 1] |= fresh
    return img, covered


def rasterize_vertex_colors(
    topology: TemplateTopology, colors: np.ndarray, resolution: tuple[int, int]
) -> np.ndarray:
    """Render a per-vertex color vector into a texture image of the given (H, W).

    Texels inside a UV triangle get barycentric interpolation of that
    triangle's vertex colors; texels outside all triangles stay black.
    Overlaps resolve deterministically: the first face in face order wins.
    """
    h, w = int(resolution[0]), int(resolution[1])
    if h < 2 or w < 2:
        raise ValueError("resolution must be at least 2x2")
    colors = validate_color_vector(colors, topology.vertex_count)
    img, _ = _rasterize(topology, as_points(colors), (h, w))
    return np.clip(img, 0.0, 1.0)


def uv_coverage_mask(topology: TemplateTopology, resolution: tuple[int, int]) -> np.ndarray:
    """Boolean (H, W) mask of texels whose centers fall inside some UV triangle."""
    h, w = int(resolution[0]), int(resolution[1])
    if h < 2 or w < 2:
        raise ValueError("resolution must be at least 2x2")
    _, covered = _rasterize(topology, None, (h, w))
    return covered


def vertex_normals(points: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted per-vertex normals; zero-area fans yield zero vectors."""
    points = np.asarray(points, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    fn = np.cross(points[faces[:, 1]] - points[faces[:, 0]], points[faces[:, 2]] - points[faces[:, 0]])
    normals = np.zeros_like(points)
    for k in range(3):
        np.add.at(normals, faces[:, k], fn)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    return np.divide(normals, norm, out=np.zeros_like(normals), where=norm > 0)


def face_normals(points: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unit face normals; degenerate faces yield zero vectors."""
    points = np.asarray(points, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    fn = np.cross(points[faces[:, 1]] - points[faces[:, 0]], points[faces[:, 2]] - points[faces[:, 0]])
    norm = np.linalg.norm(fn, axis=1, keepdims=True)
    return np.divide(fn, norm, out=np.zeros_like(fn), where=norm > 0)


def bounding_box_diagonal(points: np.ndarray) -> float:
    points = np.asarray(points, dtype=np.float64)
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


# ---------------------------------------------------------------------------
# File I/O: OBJ, landmark sidecars, PNG textures
# ---------------------------------------------------------------------------


def _parse_obj(path):
    vertices = []
    vertex_colors = []
    uvs = []
    faces = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            try:
                if tag == "v":
                    if len(parts) == 4:
                        vertices.append([float(p) for p in parts[1:4]])
                    elif len(parts) == 7:
                        vertices.append([float(p) for p in parts[1:4]])
                        vertex_colors.append([float(p) for p in parts[4:7]])
                    else:
                        raise ValueError("v record needs 3 or 6 numbers")
                elif tag == "vt":
                    if len(parts) < 3:
                        raise ValueError("vt record needs 2 numbers")
                    uvs.append([float(parts[1]), float(parts[2])])
                elif tag == "f":
                    if len(parts) != 4:
                        raise ValueError("only triangular f records are supported")
                    idx = []
                    for p in parts[1:]:
                        first = p.split("/")[0]
                        idx.append(int(first))
                    faces.append(idx)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: malformed OBJ record: {exc}") from exc
    if not vertices:
        raise FormatError(f"{path}: OBJ file has no vertices")
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64) if faces else np.zeros((0, 3), dtype=np.int64)
    if f.size:
        if f.min() < 1 or f.max() > len(vertices):
            raise FormatError(f"{path}: face index out of range (OBJ indices are 1-based)")
        f = f - 1
    vt = np.asarray(uvs, dtype=np.float64) if uvs else None
    vc = np.asarray(vertex_colors, dtype=np.float64) if vertex_colors else None
    if vc is not None and len(vc) != len(v):
        raise FormatError(f"{path}: vertex colors present on some but not all v records")
    if vt is not None and len(vt) != len(v):
        raise FormatError(f"{path}: expected one vt per vertex (vertex-level UV), got {len(vt)} for {len(v)} vertices")
    return v, f, vt, vc


def read_scan_landmarks(path) -> np.ndarray:
    """Read a scan landmark sidecar: 43 lines of 'ordinal x y z', ordinals 1..43 ascending."""
    points = _read_landmark_lines(path, 4)
    return np.asarray(points, dtype=np.float64)


def read_template_landmarks(path) -> np.ndarray:
    """Read a template landmark sidecar: 43 lines of 'ordinal vertex_index'."""
    rows = _read_landmark_lines(path, 2)
    return np.asarray(rows, dtype=np.float64).astype(np.int64)[:, 0]


def _read_landmark_lines(path, width):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if len(lines) != LANDMARK_COUNT:
        raise FormatError(f"{path}: expected {LANDMARK_COUNT} landmark lines, found {len(lines)}")
    for expected, line in enumerate(lines, start=1):
        parts = line.split()
        if len(parts) != width:
            raise FormatError(f"{path}: landmark line {expected} needs {width} fields")
        try:
            ordinal = int(parts[0])
            values = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise FormatError(f"{path}: landmark line {expected} is not numeric") from exc
        if ordinal != expected:
            raise FormatError(f"{path}: landmark ordinals must ascend 1..{LANDMARK_COUNT}")
        rows.append(values)
    return rows


def write_scan_landmarks(path, landmarks: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, (x, y, z) in enumerate(np.asarray(landmarks, dtype=np.float64), start=1):
            fh.write(f"{i} {x:.17g} {y:.17g} {z:.17g}\n")


def write_template_landmarks(path, indices: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, idx in enumerate(np.asarray(indices, dtype=np.int64), start=1):
            fh.write(f"{i} {int(idx)}\n")


def load_scan(obj_path, landmarks_path=None, texture_path=None) -> ScanMesh:
    """Load a scan mesh from an OBJ plus its landmark sidecar.

    ``landmarks_path`` defaults to the OBJ path with a ``.lmk`` suffix. Color
    comes from 6-component ``v`` records when present, otherwise from
    ``texture_path`` plus the OBJ's ``vt`` records.
    """
    if landmarks_path is None:
        landmarks_path = os.path.splitext(str(obj_path))[0] + ".lmk"
    if not os.path.exists(obj_path):
        raise FormatError(f"scan OBJ not found: {obj_path}")
    if not os.path.exists(landmarks_path):
        raise FormatError(f"landmark sidecar not found: {landmarks_path}")
    v, f, vt, vc = _parse_obj(obj_path)
    landmarks = read_scan_landmarks(landmarks_path)
    texture = None
    if texture_path is not None:
        texture = load_texture(texture_path)
        if vt is None:
            raise FormatError(f"{obj_path}: texture supplied but OBJ has no vt records")
    return ScanMesh(
        vertices=v,
        faces=f,
        landmarks=landmarks,
        vertex_colors=vc,
        texture=texture,
        uv=vt if texture is not None else None,
    )


def load_template(obj_path, landmarks_path=None) -> tuple[TemplateTopology, np.ndarray]:
    """Load a template OBJ (vt required) and its landmark-index sidecar.

    Returns the topology and the template's base geometry as a 3m vector.
    """
    if landmarks_path is None:
        landmarks_path = os.path.splitext(str(obj_path))[0] + ".lmk"
    if not os.path.exists(obj_path):
        raise FormatError(f"template OBJ not found: {obj_path}")
    if not os.path.exists(landmarks_path):
        raise FormatError(f"template landmark sidecar not found: {landmarks_path}")
    v, f, vt, _ = _parse_obj(obj_path)
    if vt is None:
        raise FormatError(f"{obj_path}: template OBJ must carry vt records")
    indices = read_template_landmarks(landmarks_path)
    topo = TemplateTopology(
        vertex_count=len(v), faces=f, uv=np.clip(vt, 0.0, 1.0), landmark_indices=indices
    )
    return topo, as_vector(v)


def save_obj(path, vertices, faces, uv=None, vertex_colors=None, mtl_name=None, texture_name=None):
    """Write an ASCII OBJ with optional per-vertex UV, colors, and MTL reference."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    with open(path, "w", encoding="utf-8") as fh:
        if mtl_name is not None:
            fh.write(f"mtllib {mtl_name}\n")
        for i, (x, y, z) in enumerate(vertices):
            if vertex_colors is not None:
                r, g, b = vertex_colors[i]
                fh.write(f"v {x:.9g} {y:.9g} {z:.9g} {r:.9g} {g:.9g} {b:.9g}\n")
            else:
                fh.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        if uv is not None:
            for u, vv in np.asarray(uv, dtype=np.float64):
                fh.write(f"vt {u:.9g} {vv:.9g}\n")
        if mtl_name is not None:
            fh.write("usemtl material0\n")
        for a, b, c in faces + 1:
            if uv is not None:
                fh.write(f"f {a}/{a} {b}/{b} {c}/{c}\n")
            else:
                fh.write(f"f {a} {b} {c}\n")
    if mtl_name is not None and texture_name is not None:
        mtl_path = os.path.join(os.path.dirname(str(path)), mtl_name)
        with open(mtl_path, "w", encoding="utf-8") as fh:
            fh.write("newmtl material0\nKd 1 1 1\n")
            fh.write(f"map_Kd {texture_name}\n")


def save_template(obj_path, landmarks_path, topology: TemplateTopology, geometry: np.ndarray) -> None:
    save_obj(obj_path, as_points(geometry), topology.faces, uv=topology.uv)
    write_template_landmarks(landmarks_path, topology.landmark_indices)


def load_texture(path) -> np.ndarray:
    """Load an 8-bit RGB PNG and map values to [0, 1] by dividing by 255."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except FileNotFoundError:
        raise FormatError(f"texture not found: {path}") from None
    except Exception as exc:
        raise FormatError(f"cannot read texture {path}: {exc}") from exc
    return arr / 255.0


def save_texture(path, image: np.ndarray) -> None:
    image = validate_texture_image(image)
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")
