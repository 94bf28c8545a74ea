"""Statistical face models: per-space PCA bases and the joint geometry+texture basis.

A model holds, for each space, the training mean, an orthonormal basis of
principal directions (columns ordered by descending singular value), and the
singular values of the centered training matrix. Faces are encoded as
coefficient vectors against a truncated basis and decoded affinely.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .mesh import AlignedCorpus, _freeze

SPACE_GEOMETRY = "geometry"
SPACE_TEXTURE = "texture"
SPACE_JOINT = "joint"

DEFAULT_RANK = 200

_MAGIC_MODEL = b"MM3D"
_MAGIC_JOINT = b"MMJT"
_FORMAT_VERSION = 1

# Columns produced through the Gram-matrix route whose singular value falls
# below this fraction of the largest are replaced by a deterministic
# orthonormal completion rather than divided out of noise.
_GRAM_RELATIVE_CUTOFF = 1e-7


@dataclass(frozen=True, eq=False)
class Coefficients:
    """A coefficient vector tagged with the space it lives in."""

    values: np.ndarray
    space: str

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("coefficient values must be one-dimensional")
        if not np.all(np.isfinite(values)):
            raise ValueError("coefficient values must be finite")
        if self.space not in (SPACE_GEOMETRY, SPACE_TEXTURE, SPACE_JOINT):
            raise ValueError(f"unknown coefficient space: {self.space!r}")
        object.__setattr__(self, "values", _freeze(values))

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True, eq=False)
class MorphableModel:
    """PCA model of geometry and vertex colors over a fixed topology."""

    vertex_count: int
    sample_count: int
    mean_geometry: np.ndarray
    mean_texture: np.ndarray
    geometry_basis: np.ndarray
    texture_basis: np.ndarray
    geometry_singular_values: np.ndarray
    texture_singular_values: np.ndarray
    k_geometry: int
    k_texture: int

    def __post_init__(self):
        for name in (
            "mean_geometry",
            "mean_texture",
            "geometry_basis",
            "texture_basis",
            "geometry_singular_values",
            "texture_singular_values",
        ):
            object.__setattr__(self, name, _freeze(np.asarray(getattr(self, name), dtype=np.float64)))
        dim = 3 * self.vertex_count
        r = self.rank
        if self.mean_geometry.shape != (dim,) or self.mean_texture.shape != (dim,):
            raise ValueError("model means have the wrong length")
        if self.geometry_basis.shape != (dim, r) or self.texture_basis.shape != (dim, r):
            raise ValueError("model bases have inconsistent shapes")
        if self.texture_singular_values.shape != (r,):
            raise ValueError("singular value arrays have inconsistent lengths")
        if not (1 <= self.k_geometry <= r and 1 <= self.k_texture <= r):
            raise ValueError("truncation ranks must lie in [1, rank]")

    @property
    def rank(self) -> int:
        return self.geometry_basis.shape[1] if self.geometry_basis.ndim == 2 else 0

    def _space(self, space: str):
        if space == SPACE_GEOMETRY:
            return self.mean_geometry, self.geometry_basis, self.geometry_singular_values, self.k_geometry
        if space == SPACE_TEXTURE:
            return self.mean_texture, self.texture_basis, self.texture_singular_values, self.k_texture
        raise ValueError(f"unknown model space: {space!r}")


@dataclass(frozen=True, eq=False)
class JointModel:
    """PCA model of stacked (geometry, texture) vectors with per-block standardization.

    The basis columns are orthonormal over the stacked 6m rows; the geometry
    and texture row blocks taken alone are not individually orthogonal.
    """

    vertex_count: int
    sample_count: int
    mean_geometry: np.ndarray
    mean_texture: np.ndarray
    basis: np.ndarray
    singular_values: np.ndarray
    geometry_scale: float
    texture_scale: float

    def __post_init__(self):
        for name in ("mean_geometry", "mean_texture", "basis", "singular_values"):
            object.__setattr__(self, name, _freeze(np.asarray(getattr(self, name), dtype=np.float64)))
        dim = 3 * self.vertex_count
        if self.basis.shape[0] != 2 * dim:
            raise ValueError("joint basis must have 6m rows")
        if self.geometry_scale <= 0 or self.texture_scale <= 0:
            raise ValueError("block scales must be positive")

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    @property
    def geometry_block(self) -> np.ndarray:
        return self.basis[: 3 * self.vertex_count]

    @property
    def texture_block(self) -> np.ndarray:
        return self.basis[3 * self.vertex_count :]


def _fix_column_signs(basis: np.ndarray) -> np.ndarray:
    """Make each column's largest-magnitude entry positive (deterministic signs)."""
    if basis.size == 0:
        return basis
    idx = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[idx, np.arange(basis.shape[1])])
    signs[signs == 0] = 1.0
    return basis * signs


def _complete_columns(basis: np.ndarray, missing: np.ndarray) -> None:
    """Fill the flagged columns with a deterministic orthonormal completion.

    Candidate directions are canonical unit vectors, Gram-Schmidt
    orthogonalized (twice, for stability) against all accepted columns.
    """
    dim = basis.shape[0]
    candidate = 0
    for col in np.flatnonzero(missing):
        while True:
            if candidate >= dim:
                raise ValueError("cannot complete orthonormal basis")
            v = np.zeros(dim)
            v[candidate] = 1.0
            candidate += 1
            for _ in range(2):
                v -= basis[:, :col] @ (basis[:, :col].T @ v)
            norm = np.linalg.norm(v)
            if norm > 0.5:
                basis[:, col] = v / norm
                break


def _svd_basis(delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Left singular vectors and singular values of a centered (D, n) matrix.

    Uses LAPACK directly for modest D and the n x n Gram eigendecomposition
    when D is much larger than n (the tall-skinny regime), followed by a QR
    polish so the returned basis is orthonormal to machine precision either
    way. Column signs follow the largest-entry-positive convention.
    """
    dim, n = delta.shape
    r = min(dim, n)
    if dim <= max(4 * n, 512):
        u, s, _ = np.linalg.svd(delta, full_matrices=False)
        basis = u[:, :r]
        values = s[:r]
    else:
        gram = delta.T @ delta
        w, vecs = np.linalg.eigh(gram)
        order = np.argsort(w)[::-1]
        w = np.clip(w[order], 0.0, None)
        vecs = vecs[:, order]
        values = np.sqrt(w)
        cutoff = values[0] * _GRAM_RELATIVE_CUTOFF if values.size and values[0] > 0 else 0.0
        basis = np.zeros((dim, r))
        good = values > cutoff
        if good.any():
            basis[:, good] = (delta @ vecs[:, good]) / values[good]
        _complete_columns(basis, ~good)
        q, rr = np.linalg.qr(basis)
        # qr may flip directions; undo so columns stay close to the input
        flips = np.sign(np.diag(rr))
        flips[flips == 0] = 1.0
        basis = q * flips
    basis = _fix_column_signs(np.ascontiguousarray(basis))
    return basis, np.ascontiguousarray(values)


def _centered(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = matrix.mean(axis=1)
    return mean, matrix - mean[:, None]


def build_model_from_matrices(
    geometry_matrix: np.ndarray,
    color_matrix: np.ndarray,
    k_geometry: int = DEFAULT_RANK,
    k_texture: int = DEFAULT_RANK,
) -> MorphableModel:
    """Build the PCA model from (3m, n) geometry and color column matrices.

    The mean is the per-row average; bases and singular values come from the
    thin SVD of the centered matrices. Requested truncation ranks are clamped
    to the achievable rank min(n, 3m).
    """
    g = np.asarray(geometry_matrix, dtype=np.float64)
    t = np.asarray(color_matrix, dtype=np.float64)
    if g.ndim != 2 or g.shape != t.shape:
        raise ValueError("geometry and color matrices must share a (3m, n) shape")
    if g.shape[0] % 3:
        raise ValueError("matrix rows must be a multiple of 3")
    n = g.shape[1]
    if n < 2:
        raise ValueError("model construction needs at least 2 corpus entries")
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(t))):
        raise ValueError("corpus contains non-finite data")
    mean_g, delta_g = _centered(g)
    mean_t, delta_t = _centered(t)
    basis_g, values_g = _svd_basis(delta_g)
    basis_t, values_t = _svd_basis(delta_t)
    r = basis_g.shape[1]
    return MorphableModel(
        vertex_count=g.shape[0] // 3,
        sample_count=n,
        mean_geometry=mean_g,
        mean_texture=mean_t,
        geometry_basis=basis_g,
        texture_basis=basis_t,
        geometry_singular_values=values_g,
        texture_singular_values=values_t,
        k_geometry=max(1, min(int(k_geometry), r)),
        k_texture=max(1, min(int(k_texture), r)),
    )


def build_model(corpus: AlignedCorpus, k_geometry: int = DEFAULT_RANK, k_texture: int = DEFAULT_RANK) -> MorphableModel:
    """Build the PCA model from an aligned corpus."""
    if len(corpus) < 2:
        raise ValueError("model construction needs at least 2 corpus entries")
    return build_model_from_matrices(corpus.geometry_matrix(), corpus.color_matrix(), k_geometry, k_texture)


def build_joint_model_from_matrices(geometry_matrix: np.ndarray, color_matrix: np.ndarray) -> JointModel:
    """Build the stacked geometry+texture model from (3m, n) column matrices.

    Each centered block is divided by its Frobenius norm before stacking, so
    length units and color units contribute equally; the scales are stored
    for decoding. A zero-variance block keeps scale 1.
    """
    g = np.asarray(geometry_matrix, dtype=np.float64)
    t = np.asarray(color_matrix, dtype=np.float64)
    if g.ndim != 2 or g.shape != t.shape:
        raise ValueError("geometry and color matrices must share a (3m, n) shape")
    n = g.shape[1]
    if n < 2:
        raise ValueError("joint model construction needs at least 2 corpus entries")
    mean_g, delta_g = _centered(g)
    mean_t, delta_t = _centered(t)
    s_g = float(np.linalg.norm(delta_g)) or 1.0
    s_t = float(np.linalg.norm(delta_t)) or 1.0
    stacked = np.concatenate([delta_g / s_g, delta_t / s_t], axis=0)
    basis, values = _svd_basis(stacked)
    return JointModel(
        vertex_count=g.shape[0] // 3,
        sample_count=n,
        mean_geometry=mean_g,
        mean_texture=mean_t,
        basis=basis,
        singular_values=values,
        geometry_scale=s_g,
        texture_scale=s_t,
    )


def build_joint_model(corpus: AlignedCorpus) -> JointModel:
    """Build the stacked geometry+texture model from an aligned corpus."""
    if len(corpus) < 2:
        raise ValueError("joint model construction needs at least 2 corpus entries")
    return build_joint_model_from_matrices(corpus.geometry_matrix(), corpus.color_matrix())


def project(model: MorphableModel, x: np.ndarray, space: str, k: int | None = None) -> Coefficients:
    """Encode a 3m vector as its first k coefficients in the given space."""
    mean, basis, _, k_default = model._space(space)
    k = k_default if k is None else int(k)
    if not 1 <= k <= model.rank:
        raise ValueError(f"k={k} out of range [1, {model.rank}]")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != mean.shape:
        raise ValueError(f"expected vector of length {mean.shape[0]}, got {x.shape}")
    return Coefficients(basis[:, :k].T @ (x - mean), space)


def reconstruct(model: MorphableModel, coefficients: Coefficients) -> np.ndarray:
    """Decode coefficients back to a 3m vector: mean plus truncated basis times values."""
    if coefficients.space == SPACE_JOINT:
        raise ValueError("joint-space coefficients cannot be decoded by a per-space model")
    mean, basis, _, _ = model._space(coefficients.space)
    k = len(coefficients)
    if k > model.rank:
        raise ValueError("coefficient vector longer than model rank")
    return mean + basis[:, :k] @ coefficients.values


def sample_coefficients(
    model: MorphableModel, space: str, k: int | None = None, seed: int = 0, temperature: float = 1.0
) -> Coefficients:
    """Draw coefficients from the model's Gaussian prior.

    Component i is N(0, temperature^2 * s_i^2 / n) where s_i is the i-th
    singular value of the centered training matrix for the space and n the
    training size; a seeded generator makes draws reproducible.
    """
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    _, _, values, k_default = model._space(space)
    k = k_default if k is None else int(k)
    if not 1 <= k <= model.rank:
        raise ValueError(f"k={k} out of range [1, {model.rank}]")
    std = temperature * values[:k] / np.sqrt(model.sample_count)
    rng = np.random.default_rng(seed)
    return Coefficients(rng.standard_normal(k) * std, space)


def coefficient_std(model: MorphableModel, space: str, k: int) -> np.ndarray:
    """Training-set standard deviation of the first k coefficients (s_i / sqrt(n))."""
    _, _, values, _ = model._space(space)
    return values[:k] / np.sqrt(model.sample_count)


def project_joint(joint: JointModel, geometry: np.ndarray, texture: np.ndarray, k: int | None = None) -> Coefficients:
    """Encode a (geometry, texture) pair against the joint basis."""
    k = joint.rank if k is None else int(k)
    if not 1 <= k <= joint.rank:
        raise ValueError(f"k={k} out of range [1, {joint.rank}]")
    stacked = np.concatenate(
        [
            (np.asarray(geometry, dtype=np.float64) - joint.mean_geometry) / joint.geometry_scale,
            (np.asarray(texture, dtype=np.float64) - joint.mean_texture) / joint.texture_scale,
        ]
    )
    return Coefficients(joint.basis[:, :k].T @ stacked, SPACE_JOINT)


def reconstruct_joint(joint: JointModel, coefficients: Coefficients) -> tuple[np.ndarray, np.ndarray]:
    """Decode joint coefficients into the (geometry, texture) pair."""
    if coefficients.space != SPACE_JOINT:
        raise ValueError("expected joint-space coefficients")
    k = len(coefficients)
    stacked = joint.basis[:, :k] @ coefficients.values
    dim = 3 * joint.vertex_count
    g = joint.geometry_scale * stacked[:dim] + joint.mean_geometry
    t = joint.texture_scale * stacked[dim:] + joint.mean_texture
    return g, t


# ---------------------------------------------------------------------------
# Binary container
# ---------------------------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes, origin: str):
        self.data = data
        self.pos = 0
        self.origin = origin

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise FormatError(f"{self.origin}: truncated file")
        out = self.data[self.pos : self.pos + count]
        self.pos += count
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def array(self, count: int) -> np.ndarray:
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{self.origin}: trailing bytes after model payload")


def _column_major(a: np.ndarray) -> bytes:
    return np.asarray(a, dtype="<f8").tobytes(order="F")


def model_to_bytes(model) -> bytes:
    """Serialize a MorphableModel or JointModel into its binary container."""
    parts = []
    if isinstance(model, MorphableModel):
        parts.append(_MAGIC_MODEL)
        parts.append(struct.pack("<I", _FORMAT_VERSION))
        parts.append(
            struct.pack(
                "<5Q", model.vertex_count, model.sample_count, model.rank, model.k_geometry, model.k_texture
            )
        )
        parts.append(np.asarray(model.mean_geometry, dtype="<f8").tobytes())
        parts.append(np.asarray(model.mean_texture, dtype="<f8").tobytes())
        parts.append(np.asarray(model.geometry_singular_values, dtype="<f8").tobytes())
        parts.append(np.asarray(model.texture_singular_values, dtype="<f8").tobytes())
        parts.append(_column_major(model.geometry_basis))
        parts.append(_column_major(model.texture_basis))
    elif isinstance(model, JointModel):
        parts.append(_MAGIC_JOINT)
        parts.append(struct.pack("<I", _FORMAT_VERSION))
        parts.append(struct.pack("<3Q", model.vertex_count, model.sample_count, model.rank))
        parts.append(struct.pack("<2d", model.geometry_scale, model.texture_scale))
        parts.append(np.asarray(model.mean_geometry, dtype="<f8").tobytes())
        parts.append(np.asarray(model.mean_texture, dtype="<f8").tobytes())
        parts.append(np.asarray(model.singular_values, dtype="<f8").tobytes())
        parts.append(_column_major(model.basis))
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    return b"".join(parts)


def model_from_bytes(data: bytes, origin: str = "<bytes>"):
    """Parse a model container; raises FormatError on bad magic, version, or truncation."""
    r = _Reader(data, origin)
    magic = r.take(4)
    if magic not in (_MAGIC_MODEL, _MAGIC_JOINT):
        raise FormatError(f"{origin}: bad magic {magic!r}")
    version = r.u32()
    if version != _FORMAT_VERSION:
        raise FormatError(f"{origin}: unsupported container version {version}")
    if magic == _MAGIC_MODEL:
        m, n, rank, k_g, k_t = (r.u64() for _ in range(5))
        dim = 3 * m
        mean_g = r.array(dim)
        mean_t = r.array(dim)
        values_g = r.array(rank)
        values_t = r.array(rank)
        basis_g = r.array(dim * rank).reshape((dim, rank), order="F")
        basis_t = r.array(dim * rank).reshape((dim, rank), order="F")
        r.done()
        return MorphableModel(
            vertex_count=m,
            sample_count=n,
            mean_geometry=mean_g,
            mean_texture=mean_t,
            geometry_basis=basis_g,
            texture_basis=basis_t,
            geometry_singular_values=values_g,
            texture_singular_values=values_t,
            k_geometry=k_g,
            k_texture=k_t,
        )
    m, n, rank = (r.u64() for _ in range(3))
    s_g = r.f64()
    s_t = r.f64()
    dim = 3 * m
    mean_g = r.array(dim)
    mean_t = r.array(dim)
    values = r.array(rank)
    basis = r.array(2 * dim * rank).reshape((2 * dim, rank), order="F")
    r.done()
    return JointModel(
        vertex_count=m,
        sample_count=n,
        mean_geometry=mean_g,
        mean_texture=mean_t,
        basis=basis,
        singular_values=values,
        geometry_scale=s_g,
        texture_scale=s_t,
    )


def save_model(path, model) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path):
    """Load a MorphableModel or JointModel depending on the file's magic."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise FormatError(f"model file not found: {path}") from None
    return model_from_bytes(data, origin=str(path))
