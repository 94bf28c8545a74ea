"""Texture-to-geometry estimators and the neutral-expression corpus transform.

Four estimator variants couple a texture to a plausible geometry:

* ``random``   - ignore the texture; draw geometry coefficients from the
                 Gaussian prior of the morphable model.
* ``nn``       - copy the geometry coefficients of the training sample whose
                 texture coefficients are nearest in L2.
* ``ls``       - ridge-stabilized linear regression from texture to geometry
                 coefficients, fit in closed form.
* ``ml``       - maximum-a-posteriori coefficients of the joint
                 geometry+texture model under a Gaussian prior and isotropic
                 texture noise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CorpusError, FormatError, NumericalError
from .mesh import NEUTRAL_EXPRESSION, AlignedCorpus, CorpusEntry, TemplateTopology, _freeze, vertex_colors_from_texture
from .morphable import (
    SPACE_GEOMETRY,
    SPACE_TEXTURE,
    Coefficients,
    JointModel,
    MorphableModel,
    build_joint_model,
    model_from_bytes,
    model_to_bytes,
    reconstruct,
)

VARIANT_RANDOM = "random"
VARIANT_NEAREST = "nn"
VARIANT_MAX_LIKELIHOOD = "ml"
VARIANT_LEAST_SQUARES = "ls"
VARIANTS = (VARIANT_RANDOM, VARIANT_NEAREST, VARIANT_MAX_LIKELIHOOD, VARIANT_LEAST_SQUARES)

_MAGIC_COUPLING = b"MMCP"
_COUPLING_VERSION = 1
_VARIANT_TAGS = {name: i for i, name in enumerate(VARIANTS)}


@dataclass(frozen=True, eq=False)
class CouplingModel:
    """A fitted texture-to-geometry estimator plus its reference morphable model."""

    variant: str
    model: MorphableModel
    k_geometry: int
    k_texture: int
    geometry_variances: np.ndarray | None = None  # random
    texture_coefficients: np.ndarray | None = None  # nn, (k_t, n)
    geometry_coefficients: np.ndarray | None = None  # nn, (k_g, n)
    weights: np.ndarray | None = None  # ls, (k_t, k_g)
    joint: JointModel | None = None  # ml
    joint_variances: np.ndarray | None = None  # ml, prior variances per joint coefficient
    noise_scale: float = 1.0  # ml, variance of the isotropic texture noise

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown coupling variant: {self.variant!r}")
        for name in ("geometry_variances", "texture_coefficients", "geometry_coefficients", "weights", "joint_variances"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, _freeze(np.asarray(value, dtype=np.float64)))
        if self.variant == VARIANT_RANDOM:
            if self.geometry_variances is None or self.geometry_variances.shape != (self.k_geometry,):
                raise ValueError("random variant needs k_geometry prior variances")
        elif self.variant == VARIANT_NEAREST:
            a_t, a_g = self.texture_coefficients, self.geometry_coefficients
            if a_t is None or a_g is None or a_t.shape[0] != self.k_texture or a_g.shape[0] != self.k_geometry:
                raise ValueError("nn variant needs stored coefficient matrices")
            if a_t.shape[1] != a_g.shape[1] or a_t.shape[1] == 0:
                raise ValueError("nn coefficient matrices must share a non-empty column count")
        elif self.variant == VARIANT_LEAST_SQUARES:
            if self.weights is None or self.weights.shape != (self.k_texture, self.k_geometry):
                raise ValueError("ls variant needs a (k_texture, k_geometry) weight matrix")
        elif self.variant == VARIANT_MAX_LIKELIHOOD:
            if self.joint is None or self.joint_variances is None:
                raise ValueError("ml variant needs a joint model and prior variances")
            if self.joint_variances.ndim != 1 or len(self.joint_variances) > self.joint.rank:
                raise ValueError("ml prior variances exceed the joint rank")
            if self.noise_scale <= 0:
                raise ValueError("ml noise scale must be positive")

    @property
    def k_joint(self) -> int:
        if self.joint_variances is None:
            raise ValueError("coupling has no joint payload")
        return len(self.joint_variances)


def neutralize_corpus(corpus: AlignedCorpus) -> AlignedCorpus:
    """Replace every entry's geometry with its identity's neutral geometry.

    Textures and labels are untouched; the first neutral entry of an identity
    wins when there are several. Raises CorpusError naming any identity that
    has no neutral entry.
    """
    corpus.validate_neutral_coverage()
    neutral: dict[str, np.ndarray] = {}
    for e in corpus.entries:
        if e.expression == NEUTRAL_EXPRESSION and e.identity not in neutral:
            neutral[e.identity] = e.geometry
    entries = tuple(
        CorpusEntry(identity=e.identity, expression=e.expression, geometry=neutral[e.identity], colors=e.colors)
        for e in corpus.entries
    )
    return AlignedCorpus(topology=corpus.topology, entries=entries)


def _coefficient_matrix(model: MorphableModel, matrix: np.ndarray, space: str, k: int) -> np.ndarray:
    mean, basis, _, _ = model._space(space)
    return basis[:, :k].T @ (matrix - mean[:, None])


def default_ridge(texture_coefficients: np.ndarray) -> float:
    """Default ridge strength: 1e-8 * trace(A A^T) / k for texture coefficients A."""
    k = texture_coefficients.shape[0]
    return 1e-8 * float(np.sum(texture_coefficients**2)) / max(k, 1)


def least_squares_weights(
    texture_coefficients: np.ndarray, geometry_coefficients: np.ndarray, ridge: float = 0.0
) -> np.ndarray:
    """Closed-form minimizer of || W^T A_t - A_g ||_F with an optional ridge.

    ``texture_coefficients`` is (k_t, n), ``geometry_coefficients`` (k_g, n);
    the result is (k_t, k_g). With ridge 0 the pseudoinverse handles rank
    deficiency; otherwise the regularized normal equations are solved.
    """
    a_t = np.asarray(texture_coefficients, dtype=np.float64)
    a_g = np.asarray(geometry_coefficients, dtype=np.float64)
    if a_t.ndim != 2 or a_g.ndim != 2 or a_t.shape[1] != a_g.shape[1]:
        raise ValueError("coefficient matrices must be 2-D with matching column counts")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    if ridge == 0.0:
        return np.linalg.pinv(a_t @ a_t.T) @ a_t @ a_g.T
    return np.linalg.solve(a_t @ a_t.T + ridge * np.eye(a_t.shape[0]), a_t @ a_g.T)


def fit_coupling(
    corpus: AlignedCorpus,
    model: MorphableModel,
    variant: str,
    *,
    ridge: float | None = None,
    noise_scale: float = 1.0,
    k_joint: int | None = None,
) -> CouplingModel:
    """Fit one of the four estimator variants on a projected corpus.

    ``ridge`` (ls only) defaults to a trace-scaled 1e-8; pass 0.0 for the
    pure pseudoinverse solution. ``noise_scale`` and ``k_joint`` apply to the
    ml variant; ``k_joint`` defaults to the positive-spectrum rank capped at
    k_geometry + k_texture.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown coupling variant: {variant!r}")
    n = len(corpus)
    if n == 0:
        raise ValueError("cannot fit a coupling on an empty corpus")
    k_g, k_t = model.k_geometry, model.k_texture

    if variant == VARIANT_RANDOM:
        variances = model.geometry_singular_values[:k_g] ** 2 / model.sample_count
        return CouplingModel(variant, model, k_g, k_t, geometry_variances=variances)

    a_t = _coefficient_matrix(model, corpus.color_matrix(), SPACE_TEXTURE, k_t)
    a_g = _coefficient_matrix(model, corpus.geometry_matrix(), SPACE_GEOMETRY, k_g)

    if variant == VARIANT_NEAREST:
        return CouplingModel(variant, model, k_g, k_t, texture_coefficients=a_t, geometry_coefficients=a_g)

    if variant == VARIANT_LEAST_SQUARES:
        eps = default_ridge(a_t) if ridge is None else float(ridge)
        weights = least_squares_weights(a_t, a_g, eps)
        return CouplingModel(variant, model, k_g, k_t, weights=weights)

    joint = build_joint_model(corpus)
    values = joint.singular_values
    positive = int(np.sum(values > 1e-10 * values[0])) if values.size and values[0] > 0 else 0
    if positive == 0:
        raise NumericalError("joint model has no positive-variance directions")
    k_j = min(positive, k_g + k_t) if k_joint is None else int(k_joint)
    if not 1 <= k_j <= joint.rank:
        raise ValueError(f"k_joint={k_j} out of range [1, {joint.rank}]")
    dim = 3 * joint.vertex_count
    stacked = np.concatenate(
        [
            (corpus.geometry_matrix() - joint.mean_geometry[:, None]) / joint.geometry_scale,
            (corpus.color_matrix() - joint.mean_texture[:, None]) / joint.texture_scale,
        ],
        axis=0,
    )
    betas = joint.basis[:, :k_j].T @ stacked  # (k_j, n), rows have zero mean
    variances = np.mean(betas**2, axis=1)
    variances = np.maximum(variances, 1e-300)
    if noise_scale <= 0:
        raise ValueError("noise_scale must be positive")
    del stacked, dim
    return CouplingModel(
        variant,
        model,
        k_g,
        k_t,
        joint=joint,
        joint_variances=variances,
        noise_scale=float(noise_scale),
    )


def estimate_joint_coefficients(
    joint: JointModel,
    prior_variances: np.ndarray,
    noise_scale: float,
    texture: np.ndarray,
    *,
    drop_prior: bool = False,
) -> np.ndarray:
    """Posterior-mode joint coefficients for a texture under the Gaussian prior.

    Solves (U_t^T U_t / v + P) beta = U_t^T r / v where r is the
    block-standardized centered texture, v the noise variance and P the
    inverse prior covariance (zero when ``drop_prior``, for testing against a
    plain least-squares oracle).
    """
    if noise_scale <= 0:
        raise NumericalError("texture noise scale must be positive")
    k = len(prior_variances)
    u_t = joint.texture_block[:, :k]
    residual = (np.asarray(texture, dtype=np.float64) - joint.mean_texture) / joint.texture_scale
    lhs = u_t.T @ u_t / noise_scale
    if not drop_prior:
        lhs = lhs + np.diag(1.0 / np.asarray(prior_variances, dtype=np.float64))
    rhs = u_t.T @ residual / noise_scale
    try:
        return np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular system in joint coefficient estimate: {exc}") from exc


def ml_objective(
    joint: JointModel,
    prior_variances: np.ndarray,
    noise_scale: float,
    texture: np.ndarray,
    beta: np.ndarray,
) -> float:
    """Quadratic objective whose minimizer is ``estimate_joint_coefficients``.

    Data term: squared residual of the standardized texture against the
    texture block, weighted by 1/noise; prior term: beta weighted by the
    inverse prior variances.
    """
    if noise_scale <= 0:
        raise NumericalError("texture noise scale must be positive")
    beta = np.asarray(beta, dtype=np.float64)
    k = len(beta)
    if k != len(prior_variances):
        raise ValueError("beta and prior variances disagree in length")
    u_t = joint.texture_block[:, :k]
    residual = (np.asarray(texture, dtype=np.float64) - joint.mean_texture) / joint.texture_scale - u_t @ beta
    data_term = float(residual @ residual) / noise_scale
    prior_term = float(np.sum(beta**2 / np.asarray(prior_variances, dtype=np.float64)))
    return data_term + prior_term


def _as_color_vector(coupling: CouplingModel, texture, topology: TemplateTopology | None) -> np.ndarray:
    arr = np.asarray(texture, dtype=np.float64)
    if arr.ndim == 3:
        if topology is None:
            raise ValueError("converting a texture image needs the template topology")
        if topology.vertex_count != coupling.model.vertex_count:
            raise ValueError("topology does not match the coupling's model")
        return vertex_colors_from_texture(topology, arr)
    if arr.shape != (3 * coupling.model.vertex_count,):
        raise ValueError(
            f"texture must be a 3m color vector or an image; got shape {arr.shape} for m={coupling.model.vertex_count}"
        )
    return arr


def synthesize_geometry(
    coupling: CouplingModel,
    texture=None,
    *,
    seed: int = 0,
    temperature: float = 1.0,
    topology: TemplateTopology | None = None,
) -> np.ndarray:
    """Produce a geometry vector for a texture via the fitted estimator.

    ``texture`` is a 3m color vector or an (H, W, 3) image (the latter needs
    ``topology`` to sample per-vertex colors). The random variant ignores the
    texture and uses ``seed``/``temperature``; the others are deterministic.
    """
    model = coupling.model
    if coupling.variant == VARIANT_RANDOM:
        rng = np.random.default_rng(seed)
        std = temperature * np.sqrt(coupling.geometry_variances)
        alpha = rng.standard_normal(coupling.k_geometry) * std
        return reconstruct(model, Coefficients(alpha, SPACE_GEOMETRY))

    if texture is None:
        raise ValueError(f"variant {coupling.variant!r} needs a texture input")
    colors = _as_color_vector(coupling, texture, topology)

    if coupling.variant == VARIANT_MAX_LIKELIHOOD:
        beta = estimate_joint_coefficients(coupling.joint, coupling.joint_variances, coupling.noise_scale, colors)
        joint = coupling.joint
        block = joint.geometry_block[:, : len(beta)]
        return joint.geometry_scale * (block @ beta) + joint.mean_geometry

    alpha_t = coupling.model.texture_basis[:, : coupling.k_texture].T @ (colors - model.mean_texture)
    if coupling.variant == VARIANT_NEAREST:
        diffs = coupling.texture_coefficients - alpha_t[:, None]
        j = int(np.argmin(np.einsum("ij,ij->j", diffs, diffs)))  # argmin takes the lowest index on ties
        alpha_g = coupling.geometry_coefficients[:, j]
    else:  # least squares
        alpha_g = coupling.weights.T @ alpha_t
    return reconstruct(model, Coefficients(alpha_g, SPACE_GEOMETRY))


# ---------------------------------------------------------------------------
# Binary container
# ---------------------------------------------------------------------------


def coupling_to_bytes(coupling: CouplingModel) -> bytes:
    parts = [_MAGIC_COUPLING, struct.pack("<I", _COUPLING_VERSION), struct.pack("<B", _VARIANT_TAGS[coupling.variant])]
    parts.append(struct.pack("<2Q", coupling.k_geometry, coupling.k_texture))
    blob = model_to_bytes(coupling.model)
    parts.append(struct.pack("<Q", len(blob)))
    parts.append(blob)
    if coupling.variant == VARIANT_RANDOM:
        parts.append(np.asarray(coupling.geometry_variances, dtype="<f8").tobytes())
    elif coupling.variant == VARIANT_NEAREST:
        n = coupling.texture_coefficients.shape[1]
        parts.append(struct.pack("<Q", n))
        parts.append(np.asarray(coupling.texture_coefficients, dtype="<f8").tobytes(order="F"))
        parts.append(np.asarray(coupling.geometry_coefficients, dtype="<f8").tobytes(order="F"))
    elif coupling.variant == VARIANT_LEAST_SQUARES:
        parts.append(np.asarray(coupling.weights, dtype="<f8").tobytes(order="F"))
    else:
        parts.append(struct.pack("<Q", coupling.k_joint))
        parts.append(struct.pack("<d", coupling.noise_scale))
        parts.append(np.asarray(coupling.joint_variances, dtype="<f8").tobytes())
        blob = model_to_bytes(coupling.joint)
        parts.append(struct.pack("<Q", len(blob)))
        parts.append(blob)
    return b"".join(parts)


def coupling_from_bytes(data: bytes, origin: str = "<bytes>") -> CouplingModel:
    from .morphable import _Reader  # shared strict reader

    r = _Reader(data, origin)
    if r.take(4) != _MAGIC_COUPLING:
        raise FormatError(f"{origin}: bad coupling magic")
    if r.u32() != _COUPLING_VERSION:
        raise FormatError(f"{origin}: unsupported coupling version")
    tag = struct.unpack("<B", r.take(1))[0]
    try:
        variant = VARIANTS[tag]
    except IndexError:
        raise FormatError(f"{origin}: unknown variant tag {tag}") from None
    k_g = r.u64()
    k_t = r.u64()
    model = model_from_bytes(r.take(r.u64()), origin=f"{origin}[model]")
    if not isinstance(model, MorphableModel):
        raise FormatError(f"{origin}: embedded reference model has the wrong type")
    kwargs = {}
    if variant == VARIANT_RANDOM:
        kwargs["geometry_variances"] = r.array(k_g)
    elif variant == VARIANT_NEAREST:
        n = r.u64()
        kwargs["texture_coefficients"] = r.array(k_t * n).reshape((k_t, n), order="F")
        kwargs["geometry_coefficients"] = r.array(k_g * n).reshape((k_g, n), order="F")
    elif variant == VARIANT_LEAST_SQUARES:
        kwargs["weights"] = r.array(k_t * k_g).reshape((k_t, k_g), order="F")
    else:
        k_j = r.u64()
        kwargs["noise_scale"] = r.f64()
        kwargs["joint_variances"] = r.array(k_j)
        joint = model_from_bytes(r.take(r.u64()), origin=f"{origin}[joint]")
        if not isinstance(joint, JointModel):
            raise FormatError(f"{origin}: embedded joint model has the wrong type")
        kwargs["joint"] = joint
    r.done()
    return CouplingModel(variant, model, k_g, k_t, **kwargs)


def save_coupling(path, coupling: CouplingModel) -> None:
    with open(path, "wb") as fh:
        fh.write(coupling_to_bytes(coupling))


def load_coupling(path) -> CouplingModel:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise FormatError(f"coupling file not found: {path}") from None
    return coupling_from_bytes(data, origin=str(path))
