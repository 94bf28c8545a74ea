"""Procedural template and synthetic corpus generation for desk-scale verification.

The template is a sphere-like patch (no poles) on a regular parameter grid
with the grid coordinates reused as the UV atlas, so UV coverage fills the
unit square. Corpus entries mix a small number of smooth, band-limited
displacement and color fields through per-identity latent draws, with an
optional linear mixing between the texture and geometry latents; that planted
correlation is what the coupling estimators are expected to recover.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import (
    LANDMARK_COUNT,
    NEUTRAL_EXPRESSION,
    AlignedCorpus,
    CorpusEntry,
    ScanMesh,
    TemplateTopology,
    as_points,
    as_vector,
)

EXPRESSION_LABELS = (NEUTRAL_EXPRESSION, "smile", "frown", "open", "squint")

_BASE_SKIN = np.array([0.62, 0.45, 0.35])


def make_template(grid: tuple[int, int] = (33, 33), radius: float = 1.0) -> tuple[TemplateTopology, np.ndarray]:
    """Build the shipped test template: a sphere patch with grid UVs.

    Returns the topology and the base geometry as a 3m vector. ``grid`` is
    (vertices along u, vertices along v); the patch spans 100 degrees of
    azimuth and 100 degrees of polar angle centered on the +z axis, so there
    are no degenerate pole triangles.
    """
    nu, nv = int(grid[0]), int(grid[1])
    if nu < 8 or nv < 8:
        raise ValueError("template grid must be at least 8x8")
    u = np.linspace(0.0, 1.0, nu)
    v = np.linspace(0.0, 1.0, nv)
    uu, vv = np.meshgrid(u, v, indexing="xy")  # row-major: v varies along rows
    theta = np.deg2rad(-50.0 + 100.0 * uu)  # azimuth
    phi = np.deg2rad(40.0 + 100.0 * vv)  # polar angle from +y
    x = radius * np.sin(phi) * np.sin(theta)
    y = radius * np.cos(phi)
    z = radius * np.sin(phi) * np.cos(theta)
    points = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1)

    faces = []
    for i in range(nv - 1):
        for j in range(nu - 1):
            a = i * nu + j
            b = i * nu + j + 1
            c = (i + 1) * nu + j
            d = (i + 1) * nu + j + 1
            faces.append((a, b, d))
            faces.append((a, d, c))
    faces = np.asarray(faces, dtype=np.int64)

    landmark_indices = _landmark_grid_indices(nu, nv)
    topo = TemplateTopology(vertex_count=nu * nv, faces=faces, uv=uv, landmark_indices=landmark_indices)
    return topo, as_vector(points)


def _landmark_grid_indices(nu: int, nv: int) -> np.ndarray:
    """43 distinct grid vertices: a spread 7x6 pattern topped up in scan order."""
    fi = np.linspace(0.15, 0.85, 7)
    fj = np.linspace(0.15, 0.85, 6)
    chosen: list[int] = []
    used: set[int] = set()
    for a in fi:
        for b in fj:
            idx = int(round(a * (nv - 1))) * nu + int(round(b * (nu - 1)))
            if idx not in used:
                used.add(idx)
                chosen.append(idx)
    for idx in range(nu * nv):
        if len(chosen) >= LANDMARK_COUNT:
            break
        if idx not in used:
            used.add(idx)
            chosen.append(idx)
    if len(chosen) < LANDMARK_COUNT:
        raise ValueError("grid too coarse to place 43 distinct landmarks")
    return np.asarray(chosen[:LANDMARK_COUNT], dtype=np.int64)


def smooth_field(uv: np.ndarray, rng: np.random.Generator, waves: int = 3) -> np.ndarray:
    """A band-limited scalar field over UV: a few low-frequency sinusoids."""
    out = np.zeros(len(uv))
    for _ in range(waves):
        freq = rng.uniform(0.5, 2.0, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.normal(0.0, 1.0)
        out += amp * np.sin(2.0 * np.pi * (freq[0] * uv[:, 0] + freq[1] * uv[:, 1]) + phase)
    return out / np.sqrt(waves)


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    """Parameters of the procedural corpus generator."""

    identities: int = 100
    expressions_per_identity: int = 5
    latent_dim: int = 4
    mixing: np.ndarray | None = None  # texture latent = mixing @ geometry latent; None means identity
    noise: float = 0.05
    seed: int = 0
    grid: tuple[int, int] = (33, 33)
    radius: float = 1.0
    geometry_amplitude: float = 0.08
    expression_amplitude: float = 0.05
    texture_amplitude: float = 0.15

    def __post_init__(self):
        if self.identities < 1:
            raise ValueError("need at least one identity")
        if not 1 <= self.expressions_per_identity:
            raise ValueError("expressions_per_identity must be positive")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be at least 1")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.mixing is not None:
            m = np.asarray(self.mixing, dtype=np.float64)
            if m.shape != (self.latent_dim, self.latent_dim):
                raise ValueError("mixing must be a (latent_dim, latent_dim) matrix")
            object.__setattr__(self, "mixing", m)

    def expression_labels(self) -> tuple[str, ...]:
        count = self.expressions_per_identity
        labels = list(EXPRESSION_LABELS[: min(count, len(EXPRESSION_LABELS))])
        labels += [f"extra{i}" for i in range(len(labels), count)]
        return tuple(labels)


@dataclass(frozen=True, eq=False)
class SyntheticCorpus:
    """Generated corpus plus everything needed to reason about it in tests."""

    corpus: AlignedCorpus
    base_geometry: np.ndarray
    latents: dict[str, np.ndarray]
    geometry_fields: np.ndarray  # (d, m, 3) displacement fields
    texture_fields: np.ndarray  # (d, m, 3) color fields
    expression_offsets: dict[str, np.ndarray]  # label -> (m, 3)


def generate_corpus(spec: SyntheticCorpusSpec) -> SyntheticCorpus:
    """Generate a deterministic synthetic corpus from the spec's seed.

    Per identity, a latent z ~ N(0, I_d) shapes the geometry through d smooth
    radial displacement fields; the texture mixes (M z) through d smooth color
    fields plus per-entry Gaussian noise, clipped to [0, 1]. Every identity's
    first expression is neutral (zero expression offset).
    """
    topo, base = make_template(spec.grid, spec.radius)
    base_pts = as_points(base)
    m = topo.vertex_count
    root = np.random.SeedSequence(spec.seed)
    rng_fields, rng_expr, rng_ident, rng_noise = (np.random.default_rng(s) for s in root.spawn(4))

    radial = base_pts / np.linalg.norm(base_pts, axis=1, keepdims=True)
    d = spec.latent_dim
    geometry_fields = np.stack(
        [spec.geometry_amplitude * smooth_field(topo.uv, rng_fields)[:, None] * radial for _ in range(d)]
    )
    texture_fields = np.stack(
        [
            spec.texture_amplitude
            * np.stack([smooth_field(topo.uv, rng_fields) for _ in range(3)], axis=1)
            for _ in range(d)
        ]
    )
    skin = _BASE_SKIN[None, :] + 0.05 * np.stack([smooth_field(topo.uv, rng_fields) for _ in range(3)], axis=1)

    labels = spec.expression_labels()
    offsets: dict[str, np.ndarray] = {}
    for label in labels:
        if label == NEUTRAL_EXPRESSION:
            offsets[label] = np.zeros((m, 3))
        else:
            offsets[label] = spec.expression_amplitude * smooth_field(topo.uv, rng_expr)[:, None] * radial

    mixing = np.eye(d) if spec.mixing is None else spec.mixing
    entries = []
    latents: dict[str, np.ndarray] = {}
    for i in range(spec.identities):
        identity = f"id{i:04d}"
        z = rng_ident.standard_normal(d)
        latents[identity] = z
        geo_core = base_pts + np.tensordot(z, geometry_fields, axes=1)
        color_core = skin + np.tensordot(mixing @ z, texture_fields, axes=1)
        for label in labels:
            pts = geo_core + offsets[label]
            colors = color_core
            if spec.noise > 0:
                colors = colors + spec.noise * rng_noise.standard_normal(colors.shape)
            entries.append(
                CorpusEntry(
                    identity=identity,
                    expression=label,
                    geometry=as_vector(pts),
                    colors=np.clip(colors, 0.0, 1.0).reshape(-1),
                )
            )
    corpus = AlignedCorpus(topology=topo, entries=tuple(entries))
    return SyntheticCorpus(
        corpus=corpus,
        base_geometry=base,
        latents=latents,
        geometry_fields=geometry_fields,
        texture_fields=texture_fields,
        expression_offsets=offsets,
    )


def warp_template(
    topology: TemplateTopology, base_geometry: np.ndarray, seed: int = 0, amplitude: float = 0.08
) -> tuple[ScanMesh, np.ndarray]:
    """Make a smoothly warped copy of the template as a scan, for alignment tests.

    Returns the scan (with warped landmarks and flat colors) and the warped
    geometry as a 3m vector (the recovery target).
    """
    rng = np.random.default_rng(seed)
    pts = as_points(base_geometry)
    radial = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    warped = pts + amplitude * smooth_field(topology.uv, rng)[:, None] * radial
    tangent = np.stack(
        [amplitude * 0.5 * smooth_field(topology.uv, rng) for _ in range(3)], axis=1
    )
    warped = warped + tangent
    scan = ScanMesh(
        vertices=warped,
        faces=topology.faces,
        landmarks=warped[topology.landmark_indices],
        vertex_colors=np.full((len(warped), 3), 0.5),
    )
    return scan, as_vector(warped)
