"""Landmark-guided non-rigid template fitting and scan-to-template color transfer.

The deformation minimizes a three-term energy over per-vertex displacements:
a landmark term pulling the 43 template landmark vertices to the scan's
landmark points, a surface term pulling every vertex to its closest point on
the scan, and a smoothness term penalizing displacement differences across
mesh edges. Closest points are frozen within a refresh cycle so the gradient
is exact for the surrogate energy; refreshing them never increases the
surface term, so the energy trace is non-increasing under a fixed weight
schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .mesh import (
    ScanMesh,
    TemplateTopology,
    as_points,
    as_vector,
    bounding_box_diagonal,
    face_normals,
    sample_texture,
    vertex_normals,
)
from .spatial import MeshQuery, mesh_query


@dataclass(frozen=True)
class AlignmentParams:
    """Weights and schedule for template fitting.

    ``two_phase`` switches the surface weight off for the first half of the
    iteration budget (landmark-dominant warm start), which helps escape bad
    initializations; the default single-phase schedule keeps the energy trace
    globally non-increasing.
    """

    landmark_weight: float = 10.0
    fit_weight: float = 1.0
    smoothness_weight: float = 1.0
    max_iters: int = 200
    step_init: float = 0.1
    energy_tol: float = 1e-6
    correspondence_refresh: int = 10
    two_phase: bool = False
    max_halvings: int = 30

    def __post_init__(self):
        if self.landmark_weight < 0 or self.fit_weight < 0 or self.smoothness_weight < 0:
            raise ValueError("weights must be non-negative")
        if self.landmark_weight == 0 and self.fit_weight == 0:
            raise ValueError("at least one of the landmark and surface weights must be positive")
        if self.max_iters <= 0 or self.step_init <= 0 or self.energy_tol <= 0:
            raise ValueError("max_iters, step_init and energy_tol must be positive")
        if self.correspondence_refresh <= 0:
            raise ValueError("correspondence_refresh must be positive")


@dataclass(frozen=True)
class AlignmentResult:
    geometry: np.ndarray
    final_energy: float
    energy_trace: np.ndarray
    iterations: int
    converged: bool
    cycle_starts: tuple[int, ...] = field(default_factory=tuple)


def alignment_energy(
    topology: TemplateTopology,
    template_points: np.ndarray,
    displacement: np.ndarray,
    scan_landmarks: np.ndarray,
    correspondences: np.ndarray,
    landmark_weight: float,
    fit_weight: float,
    smoothness_weight: float,
) -> tuple[float, np.ndarray]:
    """Energy and its exact gradient with correspondences held fixed.

    All point arrays are (m, 3); ``correspondences`` holds the cached closest
    scan point for every template vertex. Returns (energy, gradient (m, 3)).
    """
    v = np.asarray(template_points, dtype=np.float64)
    d = np.asarray(displacement, dtype=np.float64)
    if v.shape != d.shape or v.shape[0] != topology.vertex_count:
        raise ValueError("displacement shape does not match the template")
    if correspondences.shape != v.shape:
        raise ValueError("correspondence array shape does not match the template")
    grad = np.zeros_like(d)
    moved = v + d

    lm_idx = topology.landmark_indices
    r_lm = moved[lm_idx] - scan_landmarks
    energy = landmark_weight * float(np.sum(r_lm**2))
    if landmark_weight:
        np.add.at(grad, lm_idx, 2.0 * landmark_weight * r_lm)

    r_fit = moved - correspondences
    energy += fit_weight * float(np.sum(r_fit**2))
    if fit_weight:
        grad += 2.0 * fit_weight * r_fit

    e0 = topology.edges[:, 0]
    e1 = topology.edges[:, 1]
    diff = d[e0] - d[e1]
    energy += smoothness_weight * float(np.sum(diff**2))
    if smoothness_weight:
        np.add.at(grad, e0, 2.0 * smoothness_weight * diff)
        np.add.at(grad, e1, -2.0 * smoothness_weight * diff)

    return energy, grad


def align_template(
    topology: TemplateTopology,
    template_geometry: np.ndarray,
    scan: ScanMesh,
    params: AlignmentParams = AlignmentParams(),
) -> AlignmentResult:
    """Deform the template to fit a scan by gradient descent with backtracking.

    The step halves on an energy increase (up to ``max_halvings``) and
    doubles after an accepted step. Closest-point correspondences refresh
    every ``correspondence_refresh`` iterations; the run stops when the
    relative energy decrease over a refresh cycle falls below ``energy_tol``,
    when no descent step can be found, or at ``max_iters``.
    """
    v = as_points(template_geometry)
    if v.shape[0] != topology.vertex_count:
        raise ValueError("template geometry does not match the topology")
    if len(scan.faces) == 0:
        raise NumericalError("scan has no faces to align against")
    query = MeshQuery(scan.vertices, scan.faces)

    weights_final = (params.landmark_weight, params.fit_weight, params.smoothness_weight)
    if params.two_phase:
        weights_now = (params.landmark_weight, 0.0, params.smoothness_weight)
        switch_at = params.max_iters // 2
    else:
        weights_now = weights_final
        switch_at = 0

    d = np.zeros_like(v)
    corr = query.query(v)[0]
    energy, grad = alignment_energy(topology, v, d, scan.landmarks, corr, *weights_now)
    if not np.isfinite(energy):
        raise NumericalError("non-finite alignment energy (degenerate scan?)")
    trace = [energy]
    cycle_starts = [0]
    cycle_start_energy = energy
    step = params.step_init
    converged = False
    iterations = 0

    for it in range(params.max_iters):
        if it > 0 and it % params.correspondence_refresh == 0:
            if params.two_phase and it >= switch_at:
                weights_now = weights_final
                switch_at = params.max_iters + 1  # switch once
            corr = query.query(v + d)[0]
            energy, grad = alignment_energy(topology, v, d, scan.landmarks, corr, *weights_now)
            if weights_now == weights_final:
                drop = cycle_start_energy - energy
                if drop <= params.energy_tol * max(abs(cycle_start_energy), 1e-30):
                    converged = True
                    break
            cycle_start_energy = energy
            cycle_starts.append(len(trace))

        accepted = False
        for _ in range(params.max_halvings + 1):
            d_new = d - step * grad
            e_new, g_new = alignment_energy(topology, v, d_new, scan.landmarks, corr, *weights_now)
            if not np.isfinite(e_new):
                step *= 0.5
                continue
            if e_new < energy:
                d, energy, grad = d_new, e_new, g_new
                step *= 2.0
                accepted = True
                break
            step *= 0.5
        iterations = it + 1
        if not accepted:
            converged = True
            break
        trace.append(energy)

    return AlignmentResult(
        geometry=as_vector(v + d),
        final_energy=float(energy),
        energy_trace=np.asarray(trace, dtype=np.float64),
        iterations=iterations,
        converged=converged,
        cycle_starts=tuple(cycle_starts),
    )


def transfer_texture(
    aligned_geometry: np.ndarray, topology: TemplateTopology, scan: ScanMesh
) -> np.ndarray:
    """Pull scan color onto the aligned template, returning a 3m color vector.

    Each template vertex takes the scan color at its closest surface point.
    Vertices whose normal opposes the hit face's normal (a sign of grazing or
    back-face hits) are refilled by averaging already-trusted neighbor
    colors, one smoothing pass at a time.
    """
    if not scan.has_color_source:
        raise ValueError("scan has no color source")
    pts = as_points(aligned_geometry)
    if pts.shape[0] != topology.vertex_count:
        raise ValueError("aligned geometry does not match the topology")
    _, face_idx, bary, _ = mesh_query(scan).query(pts)
    colors = scan.color_at(face_idx, bary)

    t_normals = vertex_normals(pts, topology.faces)
    s_normals = face_normals(scan.vertices, scan.faces)[face_idx]
    marked = np.einsum("ij,ij->i", t_normals, s_normals) < 0.0

    neighbors = topology.vertex_neighbors
    for _ in range(topology.vertex_count):
        if not marked.any():
            break
        filled = []
        new_colors = colors.copy()
        for i in np.flatnonzero(marked):
            good = [j for j in neighbors[i] if not marked[j]]
            if good:
                new_colors[i] = colors[good].mean(axis=0)
                filled.append(i)
        if not filled:
            break  # isolated marked island; keep the sampled colors
        colors = new_colors
        marked[filled] = False
    return np.clip(colors, 0.0, 1.0).reshape(-1)


def alignment_quality(aligned_geometry: np.ndarray, reference_geometry: np.ndarray) -> float:
    """Mean per-vertex distance between two geometries, useful for checks."""
    a = as_points(aligned_geometry)
    b = as_points(reference_geometry)
    return float(np.linalg.norm(a - b, axis=1).mean())


def relative_vertex_error(aligned_geometry: np.ndarray, reference_geometry: np.ndarray) -> float:
    """Mean vertex error normalized by the reference bounding-box diagonal."""
    ref = as_points(reference_geometry)
    diag = bounding_box_diagonal(ref)
    return alignment_quality(aligned_geometry, reference_geometry) / max(diag, 1e-30)
